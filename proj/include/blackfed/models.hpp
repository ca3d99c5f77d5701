#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "blackfed/bytes.hpp"
#include "blackfed/graph.hpp"
#include "blackfed/ops.hpp"
#include "blackfed/tensor.hpp"

namespace blackfed {

/// Shared architecture of every client stem and the server head.
///
/// Stem: conv3x3(C -> stem_mid, stride) + ReLU, conv3x3(stem_mid -> 64) + ReLU.
/// Head: conv3x3(64 -> head_width) + ReLU, bilinear x stride,
///       conv3x3(head_width -> head_width) + ReLU, conv3x3(head_width -> Nc).
struct ArchConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 4;
  std::size_t stem_mid = 16;
  std::size_t stem_stride = 2;
  std::size_t head_width = 32;

  static constexpr std::size_t stem_out = 64;

  std::size_t feature_h() const { return (height + 2 - 3) / stem_stride + 1; }
  std::size_t feature_w() const { return (width + 2 - 3) / stem_stride + 1; }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0 || stem_mid == 0 || head_width == 0 || stem_stride == 0) {
      throw Error(ErrorCode::config, "architecture extents must be positive");
    }
    if (num_classes < 2) throw Error(ErrorCode::config, "num_classes must be >= 2");
    if (height % stem_stride != 0 || width % stem_stride != 0) {
      throw Error(ErrorCode::config, "image extents must be divisible by the stem stride");
    }
  }

  /// Canonical text form; its SHA-256 stamps weight files.
  std::string canonical() const {
    std::ostringstream os;
    os << "C=" << channels << ";H=" << height << ";W=" << width << ";Nc=" << num_classes << ";mid=" << stem_mid
       << ";stride=" << stem_stride << ";head=" << head_width << ";out=" << stem_out;
    return os.str();
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

template <typename T>
struct ConvLayer {
  Tensor<T> kernel;  // [Cout, Cin, Kh, Kw]
  Tensor<T> bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t padding = 1;

  std::size_t param_count() const { return kernel.size() + bias.size(); }
};

template <typename T>
ConvLayer<T> make_conv(std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng) {
  ConvLayer<T> layer{Tensor<T>({cout, cin, 3, 3}), Tensor<T>({cout}), stride, 1};
  // He-uniform for ReLU networks.
  const double bound = std::sqrt(6.0 / static_cast<double>(cin * 9));
  for (T& v : layer.kernel.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return layer;
}

/// Client-side two-layer convolutional stem (weights Theta^i).
template <typename T>
struct ClientStem {
  ArchConfig config;
  std::vector<ConvLayer<T>> layers;

  static ClientStem init(const ArchConfig& cfg, Rng& rng) {
    cfg.validate();
    ClientStem s{cfg, {}};
    s.layers.push_back(make_conv<T>(cfg.channels, cfg.stem_mid, cfg.stem_stride, rng));
    s.layers.push_back(make_conv<T>(cfg.stem_mid, ArchConfig::stem_out, 1, rng));
    return s;
  }

  static constexpr const char* part_name = "stem";
};

/// Server-side segmentation head (weights Phi).
template <typename T>
struct ServerHead {
  ArchConfig config;
  std::vector<ConvLayer<T>> layers;

  static ServerHead init(const ArchConfig& cfg, Rng& rng) {
    cfg.validate();
    ServerHead h{cfg, {}};
    h.layers.push_back(make_conv<T>(ArchConfig::stem_out, cfg.head_width, 1, rng));
    h.layers.push_back(make_conv<T>(cfg.head_width, cfg.head_width, 1, rng));
    h.layers.push_back(make_conv<T>(cfg.head_width, cfg.num_classes, 1, rng));
    return h;
  }

  static constexpr const char* part_name = "head";
};

/// Stem and head joined in one graph, used by the non-split baselines.
template <typename T>
struct FullModel {
  ClientStem<T> stem;
  ServerHead<T> head;

  static FullModel init(const ArchConfig& cfg, Rng& rng) {
    auto stem = ClientStem<T>::init(cfg, rng);
    auto head = ServerHead<T>::init(cfg, rng);
    return FullModel{std::move(stem), std::move(head)};
  }
};

/// Flat view of a model's trainable weights in canonical order: layers
/// ascending, kernel then bias, row-major within each.
template <typename T>
struct ParamVector {
  std::vector<T> values;

  std::size_t size() const { return values.size(); }
  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

template <typename T>
std::size_t param_count(const std::vector<ConvLayer<T>>& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

template <typename T>
ParamVector<T> flatten_layers(const std::vector<ConvLayer<T>>& layers) {
  ParamVector<T> out;
  out.values.reserve(param_count(layers));
  for (const auto& l : layers) {
    out.values.insert(out.values.end(), l.kernel.values().begin(), l.kernel.values().end());
    out.values.insert(out.values.end(), l.bias.values().begin(), l.bias.values().end());
  }
  return out;
}

template <typename T>
void unflatten_layers(std::vector<ConvLayer<T>>& layers, const ParamVector<T>& params) {
  if (params.size() != param_count(layers)) {
    throw Error(ErrorCode::invalid_shape, "parameter vector has " + std::to_string(params.size()) +
                                              " values, model needs " + std::to_string(param_count(layers)));
  }
  std::size_t pos = 0;
  for (auto& l : layers) {
    std::copy_n(params.values.begin() + static_cast<std::ptrdiff_t>(pos), l.kernel.size(), l.kernel.data());
    pos += l.kernel.size();
    std::copy_n(params.values.begin() + static_cast<std::ptrdiff_t>(pos), l.bias.size(), l.bias.data());
    pos += l.bias.size();
  }
}

template <typename T>
ParamVector<T> flatten(const ClientStem<T>& m) { return flatten_layers(m.layers); }
template <typename T>
ParamVector<T> flatten(const ServerHead<T>& m) { return flatten_layers(m.layers); }
template <typename T>
void unflatten(ClientStem<T>& m, const ParamVector<T>& p) { unflatten_layers(m.layers, p); }
template <typename T>
void unflatten(ServerHead<T>& m, const ParamVector<T>& p) { unflatten_layers(m.layers, p); }

/// Graph-bound parameters of one model part, in canonical order.
template <typename T>
struct BoundParams {
  std::vector<Var<T>> vars;  // kernel, bias, kernel, bias, ...

  ParamVector<T> gradient(Graph<T>& graph) const {
    ParamVector<T> out;
    for (const Var<T>& v : vars) {
      const Tensor<T>& g = graph.grad(v);
      out.values.insert(out.values.end(), g.values().begin(), g.values().end());
    }
    return out;
  }
};

namespace detail {

template <typename T>
std::vector<Var<T>> bind_layers(Graph<T>& graph, const std::vector<ConvLayer<T>>& layers, bool trainable,
                                BoundParams<T>* bound) {
  std::vector<Var<T>> vars;
  for (const auto& l : layers) {
    vars.push_back(trainable ? graph.parameter(l.kernel) : graph.constant(l.kernel));
    vars.push_back(trainable ? graph.parameter(l.bias) : graph.constant(l.bias));
  }
  if (bound) bound->vars = vars;
  return vars;
}

}  // namespace detail

template <typename T>
Var<T> stem_forward(const ClientStem<T>& stem, Var<T> x, bool trainable = false, BoundParams<T>* bound = nullptr) {
  const ArchConfig& cfg = stem.config;
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.height || s[3] != cfg.width) {
    throw Error(ErrorCode::invalid_shape, "stem expects [B," + std::to_string(cfg.channels) + "," +
                                              std::to_string(cfg.height) + "," + std::to_string(cfg.width) +
                                              "], got " + shape_string(s));
  }
  auto p = detail::bind_layers(*x.graph, stem.layers, trainable, bound);
  Var<T> h = relu(conv2d(x, p[0], p[1], stem.layers[0].stride, stem.layers[0].padding));
  return relu(conv2d(h, p[2], p[3], stem.layers[1].stride, stem.layers[1].padding));
}

template <typename T>
Var<T> head_forward(const ServerHead<T>& head, Var<T> features, bool trainable = false,
                    BoundParams<T>* bound = nullptr) {
  const ArchConfig& cfg = head.config;
  const Shape& s = features.shape();
  if (s.size() != 4 || s[1] != ArchConfig::stem_out || s[2] != cfg.feature_h() || s[3] != cfg.feature_w()) {
    throw Error(ErrorCode::invalid_shape, "head expects [B,64," + std::to_string(cfg.feature_h()) + "," +
                                              std::to_string(cfg.feature_w()) + "], got " + shape_string(s));
  }
  auto p = detail::bind_layers(*features.graph, head.layers, trainable, bound);
  Var<T> h = relu(conv2d(features, p[0], p[1], 1, 1));
  h = bilinear_upsample(h, cfg.height, cfg.width);
  h = relu(conv2d(h, p[2], p[3], 1, 1));
  return conv2d(h, p[4], p[5], 1, 1);
}

/// Joined forward; a side is trainable iff its BoundParams is supplied.
template <typename T>
Var<T> full_model_forward(const FullModel<T>& model, Var<T> x, BoundParams<T>* stem_bound = nullptr,
                          BoundParams<T>* head_bound = nullptr) {
  Var<T> features = stem_forward(model.stem, x, stem_bound != nullptr, stem_bound);
  return head_forward(model.head, features, head_bound != nullptr, head_bound);
}

/// Inference helpers that build a throwaway constant graph.
template <typename T>
Tensor<T> stem_forward(const ClientStem<T>& stem, const Tensor<T>& x) {
  Graph<T> g;
  return stem_forward(stem, g.constant(x)).value();
}

template <typename T>
Tensor<T> head_forward(const ServerHead<T>& head, const Tensor<T>& features) {
  Graph<T> g;
  return head_forward(head, g.constant(features)).value();
}

template <typename T>
Tensor<T> full_model_forward(const FullModel<T>& model, const Tensor<T>& x) {
  Graph<T> g;
  return full_model_forward(model, g.constant(x)).value();
}

enum class ModelPart { stem, head, full };

/// Forward multiply-add FLOPs per image: 2*Kh*Kw*Cin*Cout*Hout*Wout summed
/// over conv layers. Resampling and activations are not counted.
inline std::uint64_t count_flops(ModelPart part, const ArchConfig& cfg, std::size_t height, std::size_t width) {
  auto conv = [](std::uint64_t cin, std::uint64_t cout, std::uint64_t h, std::uint64_t w) {
    return 2ull * 9ull * cin * cout * h * w;
  };
  const std::uint64_t fh = (height + 2 - 3) / cfg.stem_stride + 1;
  const std::uint64_t fw = (width + 2 - 3) / cfg.stem_stride + 1;
  std::uint64_t stem = conv(cfg.channels, cfg.stem_mid, fh, fw) + conv(cfg.stem_mid, ArchConfig::stem_out, fh, fw);
  const std::uint64_t uh = fh * cfg.stem_stride, uw = fw * cfg.stem_stride;
  std::uint64_t head = conv(ArchConfig::stem_out, cfg.head_width, fh, fw) +
                       conv(cfg.head_width, cfg.head_width, uh, uw) + conv(cfg.head_width, cfg.num_classes, uh, uw);
  switch (part) {
    case ModelPart::stem: return stem;
    case ModelPart::head: return head;
    case ModelPart::full: return stem + head;
  }
  return 0;
}

// Weight checkpoint file: "BFWT", u16 version, 32-byte SHA-256 of the
// architecture's canonical string and part name, u64 parameter count, then
// little-endian float32 values in ParamVector order.

inline constexpr std::uint16_t kWeightFileVersion = 1;

inline Digest arch_digest(const ArchConfig& cfg, std::string_view part) {
  return sha256(cfg.canonical() + ";part=" + std::string(part));
}

template <typename T>
std::vector<std::uint8_t> encode_weights(const ArchConfig& cfg, std::string_view part, const ParamVector<T>& p) {
  ByteWriter w;
  w.text("BFWT");
  w.u16(kWeightFileVersion);
  const Digest d = arch_digest(cfg, part);
  w.bytes(d);
  w.u64(p.size());
  for (T v : p.values) w.f32(static_cast<float>(v));
  return w.take();
}

template <typename T>
ParamVector<T> decode_weights(const ArchConfig& cfg, std::string_view part, std::span<const std::uint8_t> bytes,
                              std::size_t expected_count) {
  ByteReader r(bytes, ErrorCode::io, "weight file");
  char magic[4];
  r.raw(magic, 4);
  if (std::string_view(magic, 4) != "BFWT") throw Error(ErrorCode::io, "bad weight file magic");
  if (r.u16() != kWeightFileVersion) throw Error(ErrorCode::io, "unsupported weight file version");
  Digest d;
  r.raw(d.data(), d.size());
  if (d != arch_digest(cfg, part)) throw Error(ErrorCode::io, "weight file architecture digest mismatch");
  const std::uint64_t n = r.u64();
  if (n != expected_count) {
    throw Error(ErrorCode::io, "weight file holds " + std::to_string(n) + " parameters, expected " +
                                   std::to_string(expected_count));
  }
  ParamVector<T> p;
  p.values.resize(n);
  for (auto& v : p.values) v = static_cast<T>(r.f32());
  if (r.remaining() != 0) throw Error(ErrorCode::io, "trailing bytes in weight file");
  return p;
}

template <typename T>
void save_weights(const std::string& path, const ClientStem<T>& m) {
  write_file(path, encode_weights(m.config, ClientStem<T>::part_name, flatten(m)));
}
template <typename T>
void save_weights(const std::string& path, const ServerHead<T>& m) {
  write_file(path, encode_weights(m.config, ServerHead<T>::part_name, flatten(m)));
}
template <typename T>
void load_weights(const std::string& path, ClientStem<T>& m) {
  unflatten(m, decode_weights<T>(m.config, ClientStem<T>::part_name, read_file(path), param_count(m.layers)));
}
template <typename T>
void load_weights(const std::string& path, ServerHead<T>& m) {
  unflatten(m, decode_weights<T>(m.config, ServerHead<T>::part_name, read_file(path), param_count(m.layers)));
}

/// Order-sensitive digest of a parameter vector's exact bits.
template <typename T>
Digest param_digest(const ParamVector<T>& p) {
  return sha256(std::span(reinterpret_cast<const std::uint8_t*>(p.values.data()), p.values.size() * sizeof(T)));
}

}  // namespace blackfed
