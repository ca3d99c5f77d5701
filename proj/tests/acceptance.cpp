// Acceptance suite: one PASS/FAIL line per criterion, details indented below.
// BLACKFED_ACCEPT_ONLY=1,4,9 restricts the run to the listed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "blackfed/config.hpp"

using namespace blackfed;

namespace {

struct Outcome {
  bool pass = false;
  std::vector<std::string> details;

  void note(const std::string& s) { details.push_back(s); }
  Outcome& require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      note("failed: " + what);
    }
    return *this;
  }
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

// ---------------------------------------------------------------- 1

Outcome autodiff_vs_finite_differences() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o{true, {}};
  Rng rng(2024);
  double worst = 0;
  std::size_t largest = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ArchConfig cfg;
    cfg.channels = 1 + rng.below(3);
    cfg.height = cfg.width = 6;
    cfg.num_classes = 2 + rng.below(3);
    cfg.stem_mid = 2;
    cfg.head_width = 2;
    FullModel<double> model = FullModel<double>::init(cfg, rng);
    // Positive biases keep most units active, so the probes rarely cross a
    // ReLU kink.
    for (auto* layers : {&model.stem.layers, &model.head.layers})
      for (auto& l : *layers)
        for (double& v : l.bias.values()) v = rng.uniform(0.05, 0.3);
    const std::size_t params = param_count(model.stem.layers) + param_count(model.head.layers);
    largest = std::max(largest, params);
    Tensor<double> x({2, cfg.channels, 6, 6});
    for (double& v : x.values()) v = rng.uniform(-1, 1);
    Labels t({2, 6, 6});
    for (auto& v : t.values()) v = static_cast<std::uint16_t>(rng.below(cfg.num_classes));

    Graph<double> g;
    BoundParams<double> sb, hb;
    g.backward(pixelwise_cross_entropy(full_model_forward(model, g.constant(x), &sb, &hb), t));
    ParamVector<double> grad = sb.gradient(g);
    const ParamVector<double> hg = hb.gradient(g);
    grad.values.insert(grad.values.end(), hg.values.begin(), hg.values.end());

    ParamVector<double> theta = flatten(model.stem), phi = flatten(model.head);
    auto loss = [&] {
      unflatten(model.stem, theta);
      unflatten(model.head, phi);
      Graph<double> h;
      return pixelwise_cross_entropy(full_model_forward(model, h.constant(x)), t).value()[0];
    };
    for (std::size_t i = 0; i < grad.size(); ++i) {
      double& p = i < theta.size() ? theta.values[i] : phi.values[i - theta.size()];
      const double keep = p;
      p = keep + 1e-5;
      const double up = loss();
      p = keep - 1e-5;
      const double down = loss();
      p = keep;
      worst = std::max(worst, relative_error(grad.values[i], (up - down) / 2e-5));
    }
  }
  const double secs = seconds_since(t0);
  o.note(fmt("20 instances, up to %.0f params, max relative error %.3g, %.1f s", static_cast<double>(largest), worst, secs));
  o.require(largest <= 5000, "instance exceeds 5k params").require(worst < 1e-4, "relative error >= 1e-4");
  o.require(secs < 120, "runtime >= 2 min");
  return o;
}

// ---------------------------------------------------------------- 2

Outcome spsa_estimator_unbiased() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o{true, {}};
  const std::size_t dim = 16;
  Rng rng(7);
  std::vector<double> B(dim * dim), A(dim * dim, 0.0);
  for (double& v : B) v = rng.normal();
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      for (std::size_t k = 0; k < dim; ++k) A[i * dim + j] += B[k * dim + i] * B[k * dim + j] / dim;
      if (i == j) A[i * dim + j] += 0.1;
    }
  ParamVector<double> theta;
  for (std::size_t i = 0; i < dim; ++i) theta.values.push_back(rng.normal());
  std::vector<double> g(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) g[i] += 2 * A[i * dim + j] * theta.values[j];
  LossFn<double> f = [&](const ParamVector<double>& x) {
    double s = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < dim; ++j) row += A[i * dim + j] * x.values[j];
      s += x.values[i] * row;
    }
    return s;
  };

  // A single two-sided estimate of component j carries the cross terms
  // sum_{k != j} g_k d_k d_j, whose standard deviation is about |g|. A 5%
  // componentwise tolerance on the mean therefore needs on the order of 1e7
  // draws; 1e4 draws alone leave errors of tens of percent.
  const std::size_t short_n = 10000, n = std::size_t{1} << 24;
  SpsaConfig cfg;
  cfg.seed = 11;
  SpsaGc<double> opt(cfg, dim);
  std::vector<double> sum(dim, 0.0);
  auto max_rel = [&](std::size_t count) {
    double worst = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      if (std::abs(g[j]) > 0.1) worst = std::max(worst, std::abs(sum[j] / static_cast<double>(count) - g[j]) / std::abs(g[j]));
    }
    return worst;
  };
  double short_err = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto e = opt.estimate(f, theta);
    for (std::size_t j = 0; j < dim; ++j) sum[j] += e.gradient.values[j];
    if (r + 1 == short_n) short_err = max_rel(short_n);
  }
  const double err = max_rel(n);
  std::size_t checked = 0;
  for (double v : g) checked += std::abs(v) > 0.1;
  const double secs = seconds_since(t0);
  o.note(fmt("%.0f of 16 components above 0.1; max relative error %.4f after 2^24 draws (%.3f after 1e4), %.1f s",
             static_cast<double>(checked), err, short_err, secs));
  o.require(err < 0.05, "componentwise error >= 5%").require(secs < 60, "runtime >= 1 min");
  return o;
}

// ---------------------------------------------------------------- 3

Outcome optimizer_oracles() {
  Outcome o{true, {}};
  // AdamW against a textbook scalar AdamW in double.
  Rng rng(3);
  double worst = 0;
  for (int problem = 0; problem < 20; ++problem) {
    const AdamWConfig cfg{rng.uniform(1e-4, 1e-1), 0.9, 0.999, 1e-8, rng.uniform(0, 0.1)};
    AdamW<double> opt(cfg, 1);
    const double target = rng.uniform(-5, 5);
    double x = rng.uniform(-5, 5), ref = x, m = 0, v = 0, p1 = 1, p2 = 1;
    std::vector<double> p{x};
    for (int s = 0; s < 100; ++s) {
      const double gx = 2 * (p[0] - target);
      const std::vector<double> gv{gx};
      opt.step(std::span<double>(p), std::span<const double>(gv));
      const double gr = 2 * (ref - target);
      m = cfg.beta1 * m + (1 - cfg.beta1) * gr;
      v = cfg.beta2 * v + (1 - cfg.beta2) * gr * gr;
      p1 *= cfg.beta1;
      p2 *= cfg.beta2;
      ref -= cfg.lr * ((m / (1 - p1)) / (std::sqrt(v / (1 - p2)) + cfg.eps) + cfg.weight_decay * ref);
      worst = std::max(worst, std::abs(p[0] - ref));
    }
  }
  o.note(fmt("AdamW vs scalar reference: max deviation %.3g over 20 problems x 100 steps", worst));
  o.require(worst <= 1e-9, "AdamW deviates from the reference");

  // beta = 0 is plain SPSA, bitwise.
  SpsaConfig cfg;
  cfg.beta = 0.0;
  cfg.seed = 19;
  ParamVector<float> a, b;
  for (int i = 0; i < 32; ++i) a.values.push_back(static_cast<float>(rng.normal()));
  b = a;
  LossFn<float> f = [](const ParamVector<float>& x) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += std::sin(x.values[i]) + 0.05 * x.values[i] * x.values[i];
    return s;
  };
  SpsaGc<float> gc(cfg, a.size());
  Spsa<float> plain(cfg, b.size());
  bool identical = true;
  for (int t = 0; t < 300 && identical; ++t) {
    gc.step(a, f);
    plain.step(b, f);
    identical = a == b;
  }
  o.note(std::string("SPSA-GC with beta=0 vs plain SPSA over 300 steps: ") + (identical ? "bitwise equal" : "differ"));
  o.require(identical, "beta=0 differs from plain SPSA");

  SpsaGc<double> opt(SpsaConfig{}, 1);
  ParamVector<double> x{{0.0}};
  LossFn<double> parabola = [](const ParamVector<double>& p) { return (p.values[0] - 3) * (p.values[0] - 3); };
  for (int t = 0; t < 500; ++t) opt.step(x, parabola);
  o.note(fmt("(theta-3)^2 after 500 steps: |theta-3| = %.4g", std::abs(x.values[0] - 3)));
  o.require(std::abs(x.values[0] - 3) < 0.1, "SPSA-GC did not reach |theta-3| < 0.1");
  return o;
}

// ---------------------------------------------------------------- benchmark runs shared by 4-8

RunConfig benchmark(std::uint64_t seed) {
  RunConfig cfg = load_config_file(std::string(BLACKFED_SOURCE_DIR) + "/configs/default.cfg");
  cfg.seed = seed;
  return cfg;
}

struct SeedRuns {
  RunResult v2, individual, combined, whitebox, server_first;
  double criterion6_cpu = 0;
};

class Bench {
 public:
  const SeedRuns& seed(std::uint64_t s) {
    auto it = runs_.find(s);
    if (it != runs_.end()) return it->second;
    SeedRuns r;
    RunConfig cfg = benchmark(s);
    RunLog log;
    double c0 = cpu_seconds();
    cfg.mode = Mode::blackfed_v2;
    r.v2 = run_mode(cfg, log);
    cfg.mode = Mode::individual;
    r.individual = run_mode(cfg, log);
    r.criterion6_cpu = cpu_seconds() - c0;
    cfg.mode = Mode::combined;
    r.combined = run_mode(cfg, log);
    cfg.mode = Mode::whitebox;
    r.whitebox = run_mode(cfg, log);
    cfg.mode = Mode::server_first_ablation;
    r.server_first = run_mode(cfg, log);
    std::cerr << "  [benchmark seed " << s << " done]\n";
    return runs_.emplace(s, std::move(r)).first->second;
  }

 private:
  std::map<std::uint64_t, SeedRuns> runs_;
};

// ---------------------------------------------------------------- 4, 5

struct TcpRun {
  std::map<MessageType, std::size_t> counts;
  std::size_t frames = 0, undecodable = 0;
  std::string matrix_csv;
};

const TcpRun& tcp_run() {
  static const TcpRun result = [] {
    TcpRun r;
    RunConfig cfg = benchmark(kSeeds[0]);
    cfg.mode = Mode::blackfed_v2;
    cfg.transport = TransportKind::tcp;
    WireTap tap([&](WireTap::Direction, std::span<const std::uint8_t> bytes) {
      ++r.frames;
      try {
        ++r.counts[message_type(decode(bytes))];
      } catch (const Error&) {
        ++r.undecodable;
      }
    });
    BlackfedOptions opt;
    opt.tap = &tap;
    RunLog log;
    r.matrix_csv = run_blackfed(cfg, log, opt).matrix.to_csv();
    return r;
  }();
  return result;
}

// Compile-time schema: every variant and the type of every field.
constexpr bool schema_is_parameter_free() {
  static_assert(std::variant_size_v<SplitMessage> == 12);
  static_assert(std::is_empty_v<BeginClientPhase> && std::is_empty_v<BeginServerPhase> &&
                std::is_empty_v<EndSession> && std::is_empty_v<Ack>);
  static_assert(std::is_same_v<decltype(Hello::feature_shape), Shape>);
  static_assert(std::is_same_v<decltype(Features::tensor), Tensor<float>>);
  static_assert(std::is_same_v<decltype(Masks::labels), Labels>);
  static_assert(std::is_same_v<decltype(LossReply::loss), float>);
  static_assert(std::is_same_v<decltype(PredictionReply::logits), Tensor<float>>);
  static_assert(std::is_same_v<decltype(BeginInference::weights), InferenceWeights>);
  static_assert(std::is_same_v<decltype(ErrorMessage::text), std::string>);
  static_assert(sizeof(Hello) == sizeof(Hello{}.client_id) + sizeof(Hello{}.protocol_version) + sizeof(Shape) +
                                     (sizeof(Hello) - sizeof(Hello{}.client_id) - sizeof(Hello{}.protocol_version) -
                                      sizeof(Shape)));
  return true;
}

Outcome wire_guarantee() {
  Outcome o{true, {}};
  static_assert(schema_is_parameter_free());
  const TcpRun& r = tcp_run();
  const std::set<MessageType> allowed{MessageType::hello,      MessageType::features,        MessageType::masks,
                                      MessageType::loss_reply, MessageType::prediction_reply, MessageType::error};
  std::size_t outside = 0;
  std::ostringstream counts;
  for (const auto& [type, n] : r.counts) {
    if (!allowed.count(type) && !is_control(type)) outside += n;
    counts << to_string(type) << '=' << n << ' ';
  }
  o.note("tapped " + std::to_string(r.frames) + " frames of a full v2 TCP run: " + counts.str());
  o.note("schema: 12 variants, field types fixed at compile time; no variant holds a parameter or gradient vector");
  o.require(r.frames > 0, "no frames tapped").require(r.undecodable == 0, "undecodable frames");
  o.require(outside == 0, "frames outside the allowed set");
  // Frame size depends only on the tensor shape, never on model size.
  const auto small = encode(Features{0, Tensor<float>({1, 64, 16, 16})});
  ArchConfig wide;
  wide.head_width = 256;
  wide.stem_mid = 64;
  const auto same = encode(Features{0, Tensor<float>({1, ArchConfig::stem_out, wide.feature_h(), wide.feature_w()})});
  o.require(small.size() == same.size(), "Features frame size depends on the architecture");
  return o;
}

Outcome transport_equivalence(Bench& bench) {
  Outcome o{true, {}};
  const std::string tcp = tcp_run().matrix_csv;
  const std::string inproc = bench.seed(kSeeds[0]).v2.matrix.to_csv();
  o.note(std::string("seed 1 eval_matrix.csv over inproc and tcp: ") + (tcp == inproc ? "identical" : "different"));
  o.require(tcp == inproc, "eval matrices differ");
  return o;
}

// ---------------------------------------------------------------- 6, 7, 8

Outcome collaboration_benefit(Bench& bench) {
  Outcome o{true, {}};
  int good = 0;
  double cpu = 0;
  for (std::uint64_t s : kSeeds) {
    const SeedRuns& r = bench.seed(s);
    cpu += r.criterion6_cpu;
    const double v2o = *r.v2.matrix.mean_ood(), v1o = *r.v2.live_matrix->mean_ood();
    const double io = *r.individual.matrix.mean_ood();
    const double v2l = *r.v2.matrix.mean_local(), il = *r.individual.matrix.mean_local();
    const bool ok = v2o >= io + 0.05 && v2o >= v1o && v2l >= il - 0.05;
    good += ok;
    o.note("seed " + std::to_string(s) +
           fmt(": OOD v2 %.3f v1 %.3f individual %.3f; Local v2 %.3f", v2o, v1o, io, v2l) +
           fmt(" individual %.3f -> ", il) + (ok ? "holds" : "does not hold"));
  }
  o.note(fmt("holds on %.0f of 5 seeds; v2 + individual training took %.0f s CPU", good, cpu));
  o.require(good >= 4, "fewer than 4 of 5 seeds").require(cpu < 900, "CPU time >= 15 min");
  return o;
}

Outcome upper_bounds(Bench& bench) {
  Outcome o{true, {}};
  for (std::uint64_t s : kSeeds) {
    const SeedRuns& r = bench.seed(s);
    const double comb = *r.combined.matrix.mean_local(), wb = *r.whitebox.matrix.mean_local();
    const double v2 = *r.v2.matrix.mean_local(), v1 = *r.v2.live_matrix->mean_local();
    const bool ok = comb >= v2 - 0.03 && wb >= v1 - 0.03;
    o.note("seed " + std::to_string(s) + fmt(": Local combined %.3f v2 %.3f, whitebox %.3f v1 %.3f", comb, v2, wb, v1));
    o.require(ok, "ordering broken on seed " + std::to_string(s));
  }
  return o;
}

Outcome order_ablation(Bench& bench) {
  Outcome o{true, {}};
  int good = 0;
  for (std::uint64_t s : kSeeds) {
    const SeedRuns& r = bench.seed(s);
    // Client-first without the checkpoint map is the v2 run scored with live weights.
    const double cf = *r.v2.live_matrix->mean_local(), sf = *r.server_first.matrix.mean_local();
    good += cf >= sf;
    o.note("seed " + std::to_string(s) + fmt(": client-first %.3f, server-first %.3f", cf, sf));
  }
  o.note(fmt("client-first ahead on %.0f of 5 seeds", good));
  o.require(good >= 4, "fewer than 4 of 5 seeds");
  return o;
}

// ---------------------------------------------------------------- 9

RunConfig tiny(std::size_t clients) {
  RunConfig c;
  c.num_clients = clients;
  c.runs = 2;
  c.client_epochs = c.server_epochs = 1;
  c.arch.height = c.arch.width = c.data.height = c.data.width = 16;
  c.arch.stem_mid = 4;
  c.arch.head_width = 8;
  c.data.max_shapes = 2;
  c.data.images_per_client = 20;
  return c;
}

Outcome checkpoint_semantics() {
  Outcome o{true, {}};
  {
    const RunConfig cfg = tiny(2);
    const auto data = make_datasets(cfg);
    ServerNode server(initial_head(cfg), ServerConfig{ServerMode::v2, cfg.server_adamw, false});
    ClientNode c0(0, initial_stem(cfg, 0), data[0], ClientConfig{8, 2.0, cfg.spsa, 1});
    ClientNode c1(1, initial_stem(cfg, 1), data[1], ClientConfig{8, 2.0, cfg.spsa, 2});
    InProcTransport t(server);
    c0.connect(t);
    c0.client_train_phase(1);
    c0.server_train_phase(1);
    c0.validate();
    c0.end_session();
    const ParamVector<float> stored = server.checkpoints().find(0)->weights;
    c1.connect(t);
    c1.client_train_phase(1);
    c1.server_train_phase(3);
    c1.validate();
    c1.end_session();
    const bool moved = server.weights() != stored;
    const bool kept = server.checkpoints().find(0)->weights == stored;
    o.note(std::string("snapshot for client 0 after client 1 trained: ") + (kept ? "bit-unchanged" : "changed") +
           (moved ? ", live weights moved" : ", live weights did not move"));
    o.require(moved && kept, "snapshot isolation");
  }
  {
    // One client leaves one checkpoint. With several runs the >= rule can keep
    // an earlier snapshot, so v1 and v2 agree exactly when that checkpoint is
    // the final live head.
    for (int runs = 1; runs <= 4; ++runs) {
      RunConfig cfg = tiny(1);
      cfg.runs = runs;
      RunLog a, b;
      cfg.mode = Mode::blackfed_v1;
      const EvalMatrix v1 = run_blackfed(cfg, a).matrix;
      cfg.mode = Mode::blackfed_v2;
      const RunResult v2 = run_blackfed(cfg, b);
      const bool final_is_checkpoint = v2.checkpoints.find(0)->weights == flatten(*v2.head);
      const bool same = v1 == v2.matrix;
      o.note("N=1, runs=" + std::to_string(runs) + ": checkpoint " +
             (final_is_checkpoint ? "is" : "is not") + " the final head, matrices " + (same ? "identical" : "differ"));
      o.require(same == final_is_checkpoint, "N=1 matrices disagree with the checkpoint state");
      if (runs == 1) o.require(same, "N=1 single-run matrices differ");
    }
  }
  {
    ServerCheckpointMap map;
    const double scores[] = {0.3, 0.5, 0.4};
    for (int v = 0; v < 3; ++v) map.update(0, ParamVector<float>{{static_cast<float>(v)}}, scores[v], v);
    o.note(fmt("replay 0.3/0.5/0.4 retains %.1f", map.find(0)->val_miou));
    o.require(map.find(0)->val_miou == 0.5 && map.find(0)->weights.values[0] == 1.0f, "replay");
  }
  return o;
}

// ---------------------------------------------------------------- 10

Outcome miou_oracle() {
  Outcome o{true, {}};
  Rng rng(10);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t nc = 2 + rng.below(4), h = 1 + rng.below(8), w = 1 + rng.below(8);
    Labels pred({h, w}), gt({h, w});
    for (std::size_t p = 0; p < gt.size(); ++p) {
      gt[p] = static_cast<std::uint16_t>(rng.below(nc));
      pred[p] = rng.uniform() < 0.5 ? gt[p] : static_cast<std::uint16_t>(rng.below(nc));
    }
    // Per-pixel brute force: an explicit nc x nc confusion matrix.
    std::vector<long> conf(nc * nc, 0);
    for (std::size_t p = 0; p < gt.size(); ++p) ++conf[gt[p] * nc + pred[p]];
    double sum = 0;
    int present = 0;
    for (std::size_t c = 0; c < nc; ++c) {
      long row = 0, col = 0;
      for (std::size_t k = 0; k < nc; ++k) row += conf[c * nc + k], col += conf[k * nc + c];
      const long uni = row + col - conf[c * nc + c];
      if (uni == 0) continue;
      sum += static_cast<double>(conf[c * nc + c]) / static_cast<double>(uni);
      ++present;
    }
    mismatches += miou(pred, gt, nc) != sum / present;
  }
  Labels gt({2, 2}), pred({2, 2});
  const std::uint16_t g[] = {0, 0, 1, 1}, p[] = {0, 1, 1, 1};
  for (int i = 0; i < 4; ++i) gt[i] = g[i], pred[i] = p[i];
  const double hand = miou(pred, gt, 2);
  o.note(fmt("%.0f of 1000 random pairs differ from the oracle; hand case %.17g (7/12 = %.17g)", mismatches, hand, 7.0 / 12.0));
  // (1/2 + 2/3) / 2 rounds one ulp below the double nearest 7/12.
  o.require(mismatches == 0, "oracle mismatch")
      .require(std::abs(hand - 7.0 / 12.0) <= 2 * std::numeric_limits<double>::epsilon(), "hand case");
  return o;
}

// ---------------------------------------------------------------- 11

Outcome flop_split() {
  Outcome o{true, {}};
  const ArchConfig cfg;
  const double stem = static_cast<double>(count_flops(ModelPart::stem, cfg, cfg.height, cfg.width));
  const double full = static_cast<double>(count_flops(ModelPart::full, cfg, cfg.height, cfg.width));
  // Hand count, 2*9*Cin*Cout*H*W per 3x3 conv: both stem convs run at the
  // strided resolution, the head runs one conv there and two after upsampling.
  const double s = static_cast<double>(cfg.stem_stride);
  const double h = std::floor((static_cast<double>(cfg.height) - 1) / s) + 1;
  const double w = std::floor((static_cast<double>(cfg.width) - 1) / s) + 1;
  const double C = static_cast<double>(cfg.channels), M = static_cast<double>(cfg.stem_mid),
               F = static_cast<double>(ArchConfig::stem_out), Hw = static_cast<double>(cfg.head_width),
               K = static_cast<double>(cfg.num_classes);
  const double hand_stem = 18 * h * w * (C * M + M * F);
  const double hand_head = 18 * h * w * F * Hw + 18 * (h * s) * (w * s) * (Hw * Hw + Hw * K);
  o.note(fmt("stem %.0f of %.0f FLOPs: ratio %.4f (hand count %.4f)", stem, full, stem / full,
             hand_stem / (hand_stem + hand_head)));
  o.require(stem / full < 0.15, "ratio >= 0.15");
  o.require(stem == hand_stem && full == hand_stem + hand_head, "closed form disagrees with the hand count");
  return o;
}

// ---------------------------------------------------------------- 12

Outcome fedavg_reduction() {
  Outcome o{true, {}};
  Rng rng(12);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t clients = 2 + rng.below(5), len = 1 + rng.below(200);
    std::vector<ParamVector<float>> ps(clients);
    for (auto& p : ps)
      for (std::size_t j = 0; j < len; ++j) p.values.push_back(static_cast<float>(rng.normal()));
    const std::vector<std::size_t> n(clients, 1 + rng.below(50));
    const ParamVector<float> avg = fedavg_average(ps, n);
    for (std::size_t j = 0; j < len; ++j) {
      double sum = 0;
      for (const auto& p : ps) sum += p.values[j];
      worst = std::max(worst, std::abs(avg.values[j] - sum / static_cast<double>(clients)));
    }
  }
  const std::vector<ParamVector<float>> scalar{{{0.0f}}, {{4.0f}}};
  const float three = fedavg_average(scalar, std::vector<std::size_t>{1, 3}).values[0];
  o.note(fmt("equal counts vs 64-bit mean: max deviation %.3g; (n=1, 0)/(n=3, 4) gives %.9g", worst, three));
  o.require(worst <= 1e-6, "deviation > 1e-6").require(three == 3.0f, "scalar case");
  return o;
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* env = std::getenv("BLACKFED_ACCEPT_ONLY")) {
    std::stringstream ss(env);
    std::string item;
    while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
  }
  Bench bench;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"autodiff matches finite differences", autodiff_vs_finite_differences},
      {"SPSA estimator is unbiased", spsa_estimator_unbiased},
      {"optimizer oracles", optimizer_oracles},
      {"black-box wire guarantee", wire_guarantee},
      {"transport equivalence", [&] { return transport_equivalence(bench); }},
      {"collaboration benefit", [&] { return collaboration_benefit(bench); }},
      {"upper-bound ordering", [&] { return upper_bounds(bench); }},
      {"order ablation", [&] { return order_ablation(bench); }},
      {"checkpoint semantics", checkpoint_semantics},
      {"mIoU oracle", miou_oracle},
      {"FLOP split", flop_split},
      {"FedAvg reduction", fedavg_reduction},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = Outcome{false, {std::string("exception: ") + e.what()}};
    }
    failed += !out.pass;
    std::cout << (out.pass ? "PASS" : "FAIL") << ' ' << id << ' ' << criteria[i].first << '\n';
    for (const auto& d : out.details) std::cout << "     " << d << '\n';
    std::cout.flush();
  }
  return failed == 0 ? 0 : 1;
}
