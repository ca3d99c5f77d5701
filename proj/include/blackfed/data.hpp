#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "blackfed/common.hpp"
#include "blackfed/tensor.hpp"
#include "blackfed/wire.hpp"

namespace blackfed {

/// Distribution shift applied to one client's images (never its masks).
struct ClientShift {
  double brightness = 0.0;            // additive offset
  double contrast = 1.0;              // gain around mid-grey
  std::array<double, 3> tint{0, 0, 0};  // per-channel additive offset
  double noise = 0.03;                // std of additive pixel noise
  double texture = 0.08;              // background pattern amplitude
  std::vector<double> class_weights;  // relative frequency of shape classes 1..Nc-1; empty = uniform
};

enum class ShapeKind : std::uint16_t { rectangle = 1, disk = 2, stripe = 3 };

struct SceneConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t num_classes = 4;  // background + rectangle, disk, stripe
  int min_shapes = 1;
  int max_shapes = 3;
  std::size_t images_per_client = 100;
  double hue = 0.2;  // strength of the per-class colour cue in shape fills
  std::uint64_t seed = 0;
  std::vector<ClientShift> shifts;  // one per client

  void validate() const {
    if (num_classes < 2 || num_classes > 4) throw Error(ErrorCode::config, "synthetic scenes support 2..4 classes");
    if (height < 8 || width < 8) throw Error(ErrorCode::config, "synthetic scenes need at least 8x8 pixels");
    if (channels == 0 || channels > 3) throw Error(ErrorCode::config, "synthetic scenes support 1..3 channels");
    if (min_shapes < 1 || max_shapes < min_shapes) throw Error(ErrorCode::config, "invalid shapes-per-image range");
    if (images_per_client < 5) throw Error(ErrorCode::config, "images_per_client must be >= 5");
    for (const auto& s : shifts) {
      if (!s.class_weights.empty() && s.class_weights.size() != num_classes - 1) {
        throw Error(ErrorCode::config, "class_weights needs one entry per shape class");
      }
    }
  }

  /// Four clients with distinct brightness, contrast, colour cast, noise and
  /// class mix. Client 0 is the unshifted reference with a uniform class mix;
  /// each later client favours one shape class.
  static SceneConfig default_four_clients(std::uint64_t seed) {
    SceneConfig cfg;
    cfg.seed = seed;
    cfg.images_per_client = 40;
    cfg.shifts = {
        ClientShift{0.00, 1.000, {0.00, 0.00, 0.00}, 0.02, 0.06, {1, 1, 1}},
        ClientShift{0.11, 0.775, {0.06, -0.03, -0.05}, 0.06, 0.10, {5, 1, 1}},
        ClientShift{-0.09, 1.175, {-0.05, 0.05, 0.03}, 0.04, 0.14, {1, 5, 1}},
        ClientShift{0.04, 0.875, {-0.03, -0.02, 0.08}, 0.10, 0.04, {1, 1, 5}},
    };
    return cfg;
  }
};

struct Sample {
  Tensor<float> image;  // [C,H,W]
  Labels mask;          // [H,W]
};

struct ClientDataset {
  std::size_t client_id = 0;
  std::vector<Sample> train, val, test;

  std::size_t total() const { return train.size() + val.size() + test.size(); }
};

/// Seeded disjoint partition of [0, n) into round(0.6n) / round(0.2n) / rest.
struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

inline SplitIndices split_60_20_20(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n))));
  SplitIndices s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
               idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

template <typename Item>
std::tuple<std::vector<Item>, std::vector<Item>, std::vector<Item>> split_60_20_20(std::vector<Item> items,
                                                                                  std::uint64_t seed) {
  const SplitIndices s = split_60_20_20(items.size(), seed);
  auto pick = [&](const std::vector<std::size_t>& idx) {
    std::vector<Item> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(std::move(items[i]));
    return out;
  };
  auto train = pick(s.train);
  auto val = pick(s.val);
  auto test = pick(s.test);
  return {std::move(train), std::move(val), std::move(test)};
}

struct PlacedShape {
  ShapeKind kind;
  int y0, x0, y1, x1;  // inclusive bounding box
  int cy, cx, radius;  // disks
  std::array<double, 3> colour;

  bool covers(int y, int x) const {
    if (y < y0 || y > y1 || x < x0 || x > x1) return false;
    if (kind != ShapeKind::disk) return true;
    const int dy = y - cy, dx = x - cx;
    return dy * dy + dx * dx <= radius * radius;
  }
};

/// Unshifted scene: geometry, mask and the clean rendering.
struct Scene {
  std::vector<PlacedShape> shapes;
  Tensor<float> image;  // [C,H,W], before the client shift
  Labels mask;          // [H,W]
};

namespace detail {

inline ShapeKind pick_kind(Rng& rng, const SceneConfig& cfg, const ClientShift& shift) {
  const std::size_t kinds = cfg.num_classes - 1;
  std::vector<double> w = shift.class_weights.empty() ? std::vector<double>(kinds, 1.0) : shift.class_weights;
  double total = 0;
  for (double v : w) total += v;
  double u = rng.uniform() * total;
  for (std::size_t k = 0; k < kinds; ++k) {
    if (u < w[k]) return static_cast<ShapeKind>(k + 1);
    u -= w[k];
  }
  return static_cast<ShapeKind>(kinds);
}

inline PlacedShape propose_shape(Rng& rng, ShapeKind kind, int H, int W) {
  PlacedShape s{kind, 0, 0, 0, 0, 0, 0, 0, {}};
  switch (kind) {
    case ShapeKind::rectangle: {
      const int h = rng.range(H / 5, H / 3 + 1), w = rng.range(W / 5, W / 3 + 1);
      s.y0 = rng.range(0, H - h);
      s.x0 = rng.range(0, W - w);
      s.y1 = s.y0 + h - 1;
      s.x1 = s.x0 + w - 1;
      break;
    }
    case ShapeKind::disk: {
      s.radius = rng.range(std::max(2, H / 10), std::max(3, H / 5));
      s.cy = rng.range(s.radius, H - 1 - s.radius);
      s.cx = rng.range(s.radius, W - 1 - s.radius);
      s.y0 = s.cy - s.radius;
      s.y1 = s.cy + s.radius;
      s.x0 = s.cx - s.radius;
      s.x1 = s.cx + s.radius;
      break;
    }
    case ShapeKind::stripe: {
      const int thick = rng.range(2, 3);
      const bool horizontal = rng.sign() > 0;
      const int len_lo = (horizontal ? W : H) / 2, len_hi = (horizontal ? W : H) - 2;
      const int len = rng.range(len_lo, len_hi);
      if (horizontal) {
        s.y0 = rng.range(0, H - thick);
        s.x0 = rng.range(0, W - len);
        s.y1 = s.y0 + thick - 1;
        s.x1 = s.x0 + len - 1;
      } else {
        s.y0 = rng.range(0, H - len);
        s.x0 = rng.range(0, W - thick);
        s.y1 = s.y0 + len - 1;
        s.x1 = s.x0 + thick - 1;
      }
      break;
    }
  }
  return s;
}

inline bool overlaps(const PlacedShape& a, const PlacedShape& b) {
  // One pixel of clearance between bounding boxes.
  return !(a.y1 + 1 < b.y0 || b.y1 + 1 < a.y0 || a.x1 + 1 < b.x0 || b.x1 + 1 < a.x0);
}

}  // namespace detail

/// Draws one unshifted scene. Throws after `max_attempts` failed placements.
inline Scene render_scene(Rng& rng, const SceneConfig& cfg, const ClientShift& shift, int max_attempts = 200) {
  const int H = static_cast<int>(cfg.height), W = static_cast<int>(cfg.width);
  const std::size_t C = cfg.channels;
  Scene scene;
  scene.image = Tensor<float>({C, cfg.height, cfg.width});
  scene.mask = Labels({cfg.height, cfg.width}, 0);

  // Background: grey level plus an oriented sinusoidal texture.
  const double base = rng.uniform(0.35, 0.65);
  const double theta = rng.uniform(0.0, 3.141592653589793);
  const double freq = rng.uniform(0.25, 0.6);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double t = std::sin(freq * (std::cos(theta) * x + std::sin(theta) * y) + phase);
      for (std::size_t c = 0; c < C; ++c) {
        scene.image[(c * cfg.height + static_cast<std::size_t>(y)) * cfg.width + static_cast<std::size_t>(x)] =
            static_cast<float>(base + shift.texture * t);
      }
    }
  }

  const int count = rng.range(cfg.min_shapes, cfg.max_shapes);
  for (int n = 0; n < count; ++n) {
    const ShapeKind kind = detail::pick_kind(rng, cfg, shift);
    bool placed = false;
    for (int attempt = 0; attempt < max_attempts && !placed; ++attempt) {
      PlacedShape s = detail::propose_shape(rng, kind, H, W);
      if (std::any_of(scene.shapes.begin(), scene.shapes.end(), [&](const PlacedShape& o) { return detail::overlaps(s, o); })) {
        continue;
      }
      // Fill contrasts with the background in either direction.
      const double level = rng.sign() > 0 ? rng.uniform(base + 0.2, 0.98) : rng.uniform(0.02, base - 0.2);
      // Each class leans towards one primary colour.
      const double sat = cfg.hue * rng.uniform(0.5, 1.5);
      for (std::size_t c = 0; c < 3; ++c) {
        const double lean = c + 1 == static_cast<std::size_t>(kind) ? 1.0 : -0.5;
        s.colour[c] = std::clamp(level + sat * lean + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      }
      scene.shapes.push_back(s);
      placed = true;
    }
    if (!placed) {
      throw Error(ErrorCode::invalid_argument,
                  "could not place shape " + std::to_string(n) + " after " + std::to_string(max_attempts) + " attempts");
    }
  }

  for (const PlacedShape& s : scene.shapes) {
    for (int y = s.y0; y <= s.y1; ++y) {
      for (int x = s.x0; x <= s.x1; ++x) {
        if (!s.covers(y, x)) continue;
        const std::size_t p = static_cast<std::size_t>(y) * cfg.width + static_cast<std::size_t>(x);
        scene.mask[p] = static_cast<std::uint16_t>(s.kind);
        for (std::size_t c = 0; c < C; ++c) {
          scene.image[c * cfg.height * cfg.width + p] = static_cast<float>(s.colour[c]);
        }
      }
    }
  }
  return scene;
}

/// Applies a client's appearance shift and pixel noise, clamped to [0, 1].
inline void apply_shift(Tensor<float>& image, const ClientShift& shift, Rng& rng) {
  const std::size_t C = image.dim(0), P = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < P; ++p) {
      float& v = image[c * P + p];
      double x = (static_cast<double>(v) - 0.5) * shift.contrast + 0.5 + shift.brightness + shift.tint[c % 3];
      if (shift.noise > 0) x += shift.noise * rng.normal();
      v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }
}

/// Deterministic function of (config, client_id).
inline ClientDataset generate_client_dataset(const SceneConfig& cfg, std::size_t client_id, std::size_t n_images) {
  cfg.validate();
  if (n_images < 5) throw Error(ErrorCode::invalid_argument, "need at least 5 images per client");
  if (client_id >= cfg.shifts.size()) {
    throw Error(ErrorCode::invalid_argument, "no shift configured for client " + std::to_string(client_id));
  }
  const ClientShift& shift = cfg.shifts[client_id];
  Rng rng(derive_seed(cfg.seed, 2 * client_id));
  std::vector<Sample> items;
  items.reserve(n_images);
  for (std::size_t i = 0; i < n_images; ++i) {
    Scene scene = render_scene(rng, cfg, shift);
    apply_shift(scene.image, shift, rng);
    items.push_back(Sample{std::move(scene.image), std::move(scene.mask)});
  }
  auto [train, val, test] = split_60_20_20(std::move(items), derive_seed(cfg.seed, 2 * client_id + 1));
  ClientDataset ds{client_id, std::move(train), std::move(val), std::move(test)};

  std::vector<bool> seen(cfg.num_classes, false);
  for (const Sample& s : ds.train) {
    for (std::uint16_t v : s.mask.values()) seen[v] = true;
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw Error(ErrorCode::invalid_argument,
                "client " + std::to_string(client_id) + " training split misses a class; increase images_per_client");
  }
  return ds;
}

inline ClientDataset generate_client_dataset(const SceneConfig& cfg, std::size_t client_id) {
  return generate_client_dataset(cfg, client_id, cfg.images_per_client);
}

/// Normalized histogram of pixel intensities (all channels) over [0, 1].
inline std::vector<double> intensity_histogram(std::span<const Sample> samples, std::size_t bins) {
  if (bins == 0) throw Error(ErrorCode::invalid_argument, "histogram needs at least one bin");
  if (samples.empty()) throw Error(ErrorCode::empty_split, "histogram of an empty dataset");
  std::vector<double> counts(bins, 0.0);
  double total = 0;
  for (const Sample& s : samples) {
    for (float v : s.image.values()) {
      const double x = std::clamp(static_cast<double>(v), 0.0, 1.0);
      const auto b = std::min(bins - 1, static_cast<std::size_t>(x * static_cast<double>(bins)));
      counts[b] += 1.0;
      total += 1.0;
    }
  }
  for (double& c : counts) c /= total;
  return counts;
}

inline double histogram_l1(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::invalid_argument, "histogram bin counts differ");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d;
}

/// Multiplicative brightness jitter with factor uniform in [1/b, b], clamped.
inline void random_brightness(Tensor<float>& image, double b, Rng& rng) {
  if (b <= 1.0) return;
  const float f = static_cast<float>(rng.uniform(1.0 / b, b));
  for (float& v : image.values()) v = std::clamp(v * f, 0.0f, 1.0f);
}

/// Stacks samples [C,H,W]/[H,W] into a batch [B,C,H,W]/[B,H,W].
inline std::pair<Tensor<float>, Labels> make_batch(std::span<const Sample* const> items) {
  std::vector<const Tensor<float>*> images;
  std::vector<const Labels*> masks;
  for (const Sample* s : items) {
    images.push_back(&s->image);
    masks.push_back(&s->mask);
  }
  return {stack<float>(images), stack<std::uint16_t>(masks)};
}

inline std::string canonical(const SceneConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "H=" << cfg.height << ";W=" << cfg.width << ";C=" << cfg.channels << ";Nc=" << cfg.num_classes
     << ";shapes=" << cfg.min_shapes << "-" << cfg.max_shapes << ";n=" << cfg.images_per_client
     << ";hue=" << cfg.hue << ";seed=" << cfg.seed;
  for (const auto& s : cfg.shifts) {
    os << ";shift=" << s.brightness << "," << s.contrast << "," << s.tint[0] << "," << s.tint[1] << "," << s.tint[2]
       << "," << s.noise << "," << s.texture;
    for (double w : s.class_weights) os << "," << w;
  }
  return os.str();
}

// Dataset cache file: "BFDS", 32-byte SHA-256 of the scene config and client
// id, u32 client id, u32 split sizes (train, val, test), then each sample as
// an image tensor followed by a mask tensor in the wire tensor encoding.

inline Digest dataset_digest(const SceneConfig& cfg, std::size_t client_id) {
  return sha256(canonical(cfg) + ";client=" + std::to_string(client_id));
}

inline std::vector<std::uint8_t> encode_dataset(const SceneConfig& cfg, const ClientDataset& ds) {
  ByteWriter w;
  w.text("BFDS");
  const Digest d = dataset_digest(cfg, ds.client_id);
  w.bytes(d);
  w.u32(static_cast<std::uint32_t>(ds.client_id));
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) w.u32(static_cast<std::uint32_t>(split->size()));
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const Sample& s : *split) {
      write_tensor(w, s.image);
      write_tensor(w, s.mask);
    }
  }
  return w.take();
}

inline ClientDataset decode_dataset(const SceneConfig& cfg, std::size_t client_id, std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::io, "dataset file");
  char magic[4];
  r.raw(magic, 4);
  if (std::string_view(magic, 4) != "BFDS") throw Error(ErrorCode::io, "bad dataset file magic");
  Digest d;
  r.raw(d.data(), d.size());
  if (d != dataset_digest(cfg, client_id)) throw Error(ErrorCode::io, "dataset cache was built from another config");
  ClientDataset ds;
  ds.client_id = r.u32();
  if (ds.client_id != client_id) throw Error(ErrorCode::io, "dataset cache belongs to another client");
  std::array<std::uint32_t, 3> sizes{r.u32(), r.u32(), r.u32()};
  std::array<std::vector<Sample>*, 3> splits{&ds.train, &ds.val, &ds.test};
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::uint32_t i = 0; i < sizes[k]; ++i) {
      Tensor<float> image = read_real_tensor(r, ErrorCode::io);
      Labels mask = read_label_tensor(r, ErrorCode::io);
      splits[k]->push_back(Sample{std::move(image), std::move(mask)});
    }
  }
  if (r.remaining() != 0) throw Error(ErrorCode::io, "trailing bytes in dataset file");
  return ds;
}

/// Loads the client's cached dataset from `path` when it matches the config,
/// otherwise generates it and writes the cache.
inline ClientDataset load_or_generate(const SceneConfig& cfg, std::size_t client_id, const std::string& path) {
  try {
    return decode_dataset(cfg, client_id, read_file(path));
  } catch (const Error&) {
    ClientDataset ds = generate_client_dataset(cfg, client_id);
    write_file(path, encode_dataset(cfg, ds));
    return ds;
  }
}

}  // namespace blackfed
