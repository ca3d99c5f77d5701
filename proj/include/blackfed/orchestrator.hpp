#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "blackfed/client.hpp"
#include "blackfed/data.hpp"
#include "blackfed/log.hpp"
#include "blackfed/metrics.hpp"
#include "blackfed/models.hpp"
#include "blackfed/optimizers.hpp"
#include "blackfed/server.hpp"
#include "blackfed/tcp.hpp"

namespace blackfed {

enum class Mode { blackfed_v1, blackfed_v2, individual, combined, whitebox, fedavg, server_first_ablation };
enum class TransportKind { inproc, tcp };
enum class StemInit { per_client, shared };
enum class PhaseOrder { client_first, server_first };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::blackfed_v1: return "blackfed_v1";
    case Mode::blackfed_v2: return "blackfed_v2";
    case Mode::individual: return "individual";
    case Mode::combined: return "combined";
    case Mode::whitebox: return "whitebox";
    case Mode::fedavg: return "fedavg";
    case Mode::server_first_ablation: return "server_first_ablation";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::blackfed_v1, Mode::blackfed_v2, Mode::individual, Mode::combined, Mode::whitebox, Mode::fedavg,
                 Mode::server_first_ablation}) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorCode::config, "unknown mode '" + s + "'");
}

/// Single-model modes report only the Local column.
inline bool single_model(Mode m) { return m == Mode::combined || m == Mode::fedavg; }

inline SpsaConfig benchmark_spsa() {
  SpsaConfig s;
  s.a = 3e-4;
  return s;
}

struct RunConfig {
  std::size_t num_clients = 4;
  int client_epochs = 10;
  int server_epochs = 10;
  int runs = 5;
  Mode mode = Mode::blackfed_v2;
  std::uint64_t seed = 1;
  ArchConfig arch;
  SceneConfig data = SceneConfig::default_four_clients(0);
  SpsaConfig spsa = benchmark_spsa();
  AdamWConfig server_adamw{3e-3};
  AdamWConfig baseline_adamw{3e-3};  // full-model and white-box training
  std::size_t batch_size = 8;
  double brightness = 2.0;
  StemInit stem_init = StemInit::shared;
  TransportKind transport = TransportKind::inproc;
  std::string listen_addr = "127.0.0.1:0";
  bool strict_checkpoints = false;
  std::vector<int> grid_client_epochs{5, 10};
  std::vector<int> grid_server_epochs{5, 10};

  void validate() const {
    if (num_clients < 1) throw Error(ErrorCode::config, "num_clients must be >= 1");
    if (client_epochs < 0 || server_epochs < 0 || runs < 0) {
      throw Error(ErrorCode::config, "client_epochs, server_epochs and runs must be >= 0");
    }
    if (batch_size == 0) throw Error(ErrorCode::config, "batch_size must be positive");
    arch.validate();
    data.validate();
    if (data.shifts.size() < num_clients) {
      throw Error(ErrorCode::config, "data config defines " + std::to_string(data.shifts.size()) + " client shifts, need " +
                                         std::to_string(num_clients));
    }
    if (data.height != arch.height || data.width != arch.width || data.channels != arch.channels ||
        data.num_classes != arch.num_classes) {
      throw Error(ErrorCode::config, "data and model extents disagree");
    }
    if (mode == Mode::whitebox && transport != TransportKind::inproc) {
      throw Error(ErrorCode::config, "whitebox mode joins stem and head in one graph and runs in-process only");
    }
  }
};

/// Independent RNG streams, all derived from the run seed.
namespace streams {
inline std::uint64_t data(std::uint64_t s) { return derive_seed(s, 1); }
inline std::uint64_t head_init(std::uint64_t s) { return derive_seed(s, 2); }
inline std::uint64_t stem_init(std::uint64_t s, std::size_t i) { return derive_seed(s, 100 + i); }
inline std::uint64_t spsa(std::uint64_t s, std::size_t i) { return derive_seed(s, 200 + i); }
inline std::uint64_t client(std::uint64_t s, std::size_t i) { return derive_seed(s, 300 + i); }
inline std::uint64_t baseline(std::uint64_t s, std::size_t i) { return derive_seed(s, 400 + i); }
}  // namespace streams

/// JSON-lines event log: one object per line with at least "event" and
/// "wall" (seconds since the log was opened).
class RunLog {
 public:
  RunLog() : start_(std::chrono::steady_clock::now()) {}
  explicit RunLog(const std::filesystem::path& file) : RunLog() {
    out_ = std::make_unique<std::ofstream>(file);
    if (!*out_) throw Error(ErrorCode::io, "cannot open log " + file.string());
  }

  void emit(nlohmann::json event) {
    event["wall"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (out_) {
      *out_ << event.dump() << '\n';
      out_->flush();
    }
    events_.push_back(std::move(event));
  }

  const std::vector<nlohmann::json>& events() const { return events_; }

 private:
  std::chrono::steady_clock::time_point start_;
  std::unique_ptr<std::ofstream> out_;
  std::vector<nlohmann::json> events_;
};

/// Checks that the log holds exactly runs*N*(c_e+s_e) epoch events in
/// round-robin order with the given phase order. Returns an empty string on
/// success, else a description of the first discrepancy.
inline std::string audit_schedule(const std::vector<nlohmann::json>& events, const RunConfig& cfg,
                                  PhaseOrder order = PhaseOrder::client_first) {
  std::vector<std::pair<std::string, std::size_t>> expected;
  for (int r = 0; r < cfg.runs; ++r) {
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
      const std::pair<std::string, int> phases[2] = {{"client_epoch", cfg.client_epochs}, {"server_epoch", cfg.server_epochs}};
      for (int p = 0; p < 2; ++p) {
        const auto& [name, count] = phases[order == PhaseOrder::client_first ? p : 1 - p];
        for (int e = 0; e < count; ++e) expected.emplace_back(name, i);
      }
    }
  }
  std::size_t n = 0;
  for (const auto& ev : events) {
    const std::string name = ev.value("event", "");
    if (name != "client_epoch" && name != "server_epoch") continue;
    if (n >= expected.size()) return "more optimization epochs logged than scheduled";
    const std::size_t client = ev.value("client", std::size_t{0});
    if (name != expected[n].first || client != expected[n].second) {
      return "epoch event " + std::to_string(n) + " is " + name + " for client " + std::to_string(client) + ", expected " +
             expected[n].first + " for client " + std::to_string(expected[n].second);
    }
    ++n;
  }
  if (n != expected.size()) {
    return "logged " + std::to_string(n) + " optimization epochs, scheduled " + std::to_string(expected.size());
  }
  return "";
}

struct RunResult {
  Mode mode = Mode::blackfed_v2;
  EvalMatrix matrix;
  std::optional<EvalMatrix> live_matrix;  // blackfed v2: same run scored with live server weights
  std::vector<ClientStem<float>> stems;
  std::optional<ServerHead<float>> head;
  ServerCheckpointMap checkpoints;
};

/// All client datasets for a config; a pure function of (data config, seed).
inline std::vector<ClientDataset> make_datasets(const RunConfig& cfg) {
  SceneConfig sc = cfg.data;
  sc.seed = streams::data(cfg.seed);
  std::vector<ClientDataset> out;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) out.push_back(generate_client_dataset(sc, i));
  return out;
}

inline ClientStem<float> initial_stem(const RunConfig& cfg, std::size_t client) {
  Rng rng(streams::stem_init(cfg.seed, cfg.stem_init == StemInit::shared ? 0 : client));
  return ClientStem<float>::init(cfg.arch, rng);
}

inline ServerHead<float> initial_head(const RunConfig& cfg) {
  Rng rng(streams::head_init(cfg.seed));
  return ServerHead<float>::init(cfg.arch, rng);
}

namespace detail {

/// Owns the server side of one run and opens one client session at a time
/// over the configured transport.
class SessionHost {
 public:
  SessionHost(ServerNode& server, const RunConfig& cfg) : server_(&server), kind_(cfg.transport) {
    if (kind_ == TransportKind::tcp) {
      tcp_ = std::make_unique<TcpServer>(server, Endpoint::parse(cfg.listen_addr));
      thread_ = std::thread([this] {
        try {
          tcp_->serve();
        } catch (const std::exception& e) {
          failure_ = e.what();
        }
      });
    }
  }
  ~SessionHost() {
    if (tcp_) {
      tcp_->stop();
      thread_.join();
    }
  }
  SessionHost(const SessionHost&) = delete;
  SessionHost& operator=(const SessionHost&) = delete;

  std::unique_ptr<Transport> open(WireTap* tap) {
    if (!failure_.empty()) throw Error(ErrorCode::session, "server thread failed: " + failure_);
    std::unique_ptr<Transport> t;
    if (kind_ == TransportKind::tcp) {
      t = std::make_unique<TcpClientTransport>(Endpoint{"127.0.0.1", tcp_->port()});
    } else {
      t = std::make_unique<InProcTransport>(*server_);
    }
    t->set_tap(tap);
    return t;
  }

 private:
  ServerNode* server_;
  TransportKind kind_;
  std::unique_ptr<TcpServer> tcp_;
  std::thread thread_;
  std::string failure_;
};

inline void dump_state(const std::filesystem::path& dir, const RunConfig& cfg, const std::vector<ClientNode>& clients,
                       const ServerNode& server, int run, std::size_t client, const std::string& reason) {
  std::filesystem::create_directories(dir);
  for (const ClientNode& c : clients) save_weights((dir / ("stem_" + std::to_string(c.id()) + ".bfwt")).string(), c.stem());
  save_weights((dir / "head_live.bfwt").string(), server.head());
  server.checkpoints().save(dir / "checkpoints", cfg.arch);
  nlohmann::json progress{{"mode", to_string(cfg.mode)}, {"seed", cfg.seed}, {"run", run},
                          {"client", client},           {"reason", reason}, {"server_visits", server.visits()}};
  std::ofstream(dir / "progress.json") << progress.dump(2) << '\n';
}

}  // namespace detail

struct BlackfedOptions {
  PhaseOrder order = PhaseOrder::client_first;
  WireTap* tap = nullptr;                     // records every frame when set
  std::optional<std::filesystem::path> dump;  // state dump directory on failure
};

/// Round-robin split training: for each run, for each client in ascending
/// order, a client phase (SPSA-GC on the stem) and a server phase (AdamW on
/// the head), then a validation pass that feeds the checkpoint map.
inline RunResult run_blackfed(const RunConfig& cfg, RunLog& log, const BlackfedOptions& opt = {}) {
  cfg.validate();
  const bool v2 = cfg.mode != Mode::blackfed_v1;
  std::vector<ClientDataset> data = make_datasets(cfg);
  std::vector<ClientNode> clients;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    ClientConfig cc{cfg.batch_size, cfg.brightness, cfg.spsa, streams::client(cfg.seed, i)};
    cc.spsa.seed = streams::spsa(cfg.seed, i);
    clients.emplace_back(static_cast<std::uint32_t>(i), initial_stem(cfg, i), data[i], cc);
  }
  ServerNode server(initial_head(cfg), ServerConfig{v2 ? ServerMode::v2 : ServerMode::v1, cfg.server_adamw,
                                                    cfg.strict_checkpoints});
  detail::SessionHost host(server, cfg);
  log.emit({{"event", "run_start"}, {"mode", to_string(cfg.mode)}, {"seed", cfg.seed},
            {"order", opt.order == PhaseOrder::client_first ? "client_first" : "server_first"}});

  int run = 0;
  std::size_t current = 0;
  try {
    for (run = 0; run < cfg.runs; ++run) {
      for (current = 0; current < cfg.num_clients; ++current) {
        ClientNode& c = clients[current];
        auto transport = host.open(opt.tap);
        c.connect(*transport);
        auto client_phase = [&] {
          const PhaseLog p = c.client_train_phase(cfg.client_epochs);
          for (std::size_t e = 0; e < p.epoch_loss.size(); ++e) {
            log.emit({{"event", "client_epoch"}, {"run", run}, {"client", current}, {"epoch", e},
                      {"loss", p.epoch_loss[e]}});
          }
        };
        auto server_phase = [&] {
          const PhaseLog p = c.server_train_phase(cfg.server_epochs);
          for (std::size_t e = 0; e < p.epoch_loss.size(); ++e) {
            log.emit({{"event", "server_epoch"}, {"run", run}, {"client", current}, {"epoch", e},
                      {"loss", p.epoch_loss[e]}});
          }
        };
        if (opt.order == PhaseOrder::client_first) {
          client_phase();
          server_phase();
        } else {
          server_phase();
          client_phase();
        }
        const double val_loss = c.validate();
        c.end_session();
        const ValidationRecord& v = server.validations().back();
        log.emit({{"event", "validation"}, {"run", run}, {"client", current}, {"loss", val_loss}, {"miou", v.miou},
                  {"stored", v.stored}});
      }
    }

    RunResult result;
    result.mode = cfg.mode;
    auto score = [&](InferenceWeights w) {
      return assemble_eval_matrix(cfg.num_clients, false, [&](std::size_t i, std::size_t k) -> std::optional<double> {
        auto transport = host.open(opt.tap);
        clients[i].connect(*transport);
        const double m = clients[i].evaluate(data[k].test, w);
        clients[i].end_session();
        return m;
      });
    };
    result.matrix = score(v2 ? InferenceWeights::checkpoint : InferenceWeights::live);
    if (v2) result.live_matrix = score(InferenceWeights::live);
    for (const ClientNode& c : clients) result.stems.push_back(c.stem());
    result.head = server.head();
    result.checkpoints = server.checkpoints();
    log.emit({{"event", "run_end"}, {"mean_local", result.matrix.mean_local().value_or(0.0)},
              {"mean_ood", result.matrix.mean_ood().value_or(-1.0)}});
    return result;
  } catch (const std::exception& e) {
    if (opt.dump) {
      detail::dump_state(*opt.dump, cfg, clients, server, run, current, e.what());
      log.emit({{"event", "failure"}, {"run", run}, {"client", current}, {"reason", e.what()},
                {"state_dump", opt.dump->string()}});
    }
    throw;
  }
}

namespace detail {

/// Shuffled (optionally brightness-augmented) batches over `items`.
inline std::vector<std::pair<Tensor<float>, Labels>> shuffled_batches(const std::vector<const Sample*>& items,
                                                                      std::size_t batch, double brightness, Rng& rng) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::pair<Tensor<float>, Labels>> out;
  for (std::size_t b = 0; b < order.size(); b += batch) {
    std::vector<Sample> chunk;
    for (std::size_t j = b; j < std::min(order.size(), b + batch); ++j) {
      Sample s = *items[order[j]];
      if (brightness > 1.0) random_brightness(s.image, brightness, rng);
      chunk.push_back(std::move(s));
    }
    std::vector<const Sample*> ptrs;
    for (const Sample& s : chunk) ptrs.push_back(&s);
    out.push_back(make_batch(ptrs));
  }
  return out;
}

/// First-order trainer for the joined model. Either side may be frozen.
class FullTrainer {
 public:
  FullTrainer(FullModel<float>& model, const AdamWConfig& cfg)
      : model_(&model), stem_opt_(cfg, param_count(model.stem.layers)), head_opt_(cfg, param_count(model.head.layers)) {}

  double step(const Tensor<float>& images, const Labels& masks, bool train_stem, bool train_head) {
    Graph<float> g;
    BoundParams<float> sb, hb;
    Var<float> loss = pixelwise_cross_entropy(
        full_model_forward(*model_, g.constant(images), train_stem ? &sb : nullptr, train_head ? &hb : nullptr), masks);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw Error(ErrorCode::non_finite, "non-finite training loss");
    g.backward(loss);
    if (train_stem) {
      ParamVector<float> p = flatten(model_->stem);
      stem_opt_.step(p, sb.gradient(g));
      unflatten(model_->stem, p);
    }
    if (train_head) {
      ParamVector<float> p = flatten(model_->head);
      head_opt_.step(p, hb.gradient(g));
      unflatten(model_->head, p);
    }
    return value;
  }

  double epoch(const std::vector<const Sample*>& items, std::size_t batch, double brightness, Rng& rng,
               bool train_stem = true, bool train_head = true) {
    double total = 0;
    std::size_t n = 0;
    for (const auto& [x, y] : shuffled_batches(items, batch, brightness, rng)) {
      total += step(x, y, train_stem, train_head);
      ++n;
    }
    return total / static_cast<double>(n);
  }

 private:
  FullModel<float>* model_;
  AdamW<float> stem_opt_, head_opt_;
};

inline double evaluate_full(const FullModel<float>& model, std::span<const Sample> split, std::size_t batch) {
  if (split.empty()) throw Error(ErrorCode::empty_split, "cannot evaluate on an empty split");
  ConfusionAccumulator acc(model.head.config.num_classes);
  for (std::size_t b = 0; b < split.size(); b += batch) {
    std::vector<const Sample*> ptrs;
    for (std::size_t j = b; j < std::min(split.size(), b + batch); ++j) ptrs.push_back(&split[j]);
    auto [x, y] = make_batch(ptrs);
    acc.add(argmax_channels(full_model_forward(model, x)), y);
  }
  return *acc.miou();
}

inline std::vector<const Sample*> pointers(std::span<const Sample> s) {
  std::vector<const Sample*> out;
  for (const Sample& x : s) out.push_back(&x);
  return out;
}

inline FullModel<float> initial_full(const RunConfig& cfg, std::size_t stem_client) {
  return FullModel<float>{initial_stem(cfg, stem_client), initial_head(cfg)};
}

}  // namespace detail

/// Each client trains the joined model on its own data for runs*s_e epochs.
inline RunResult run_individual(const RunConfig& cfg, RunLog& log) {
  cfg.validate();
  std::vector<ClientDataset> data = make_datasets(cfg);
  std::vector<FullModel<float>> models;
  const int epochs = cfg.runs * cfg.server_epochs;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    FullModel<float> m = detail::initial_full(cfg, i);
    detail::FullTrainer trainer(m, cfg.baseline_adamw);
    Rng rng(streams::baseline(cfg.seed, i));
    const auto items = detail::pointers(data[i].train);
    for (int e = 0; e < epochs; ++e) {
      const double loss = trainer.epoch(items, cfg.batch_size, cfg.brightness, rng);
      log.emit({{"event", "individual_epoch"}, {"client", i}, {"epoch", e}, {"loss", loss}});
    }
    models.push_back(std::move(m));
  }
  RunResult r;
  r.mode = Mode::individual;
  r.matrix = assemble_eval_matrix(cfg.num_clients, false, [&](std::size_t i, std::size_t k) -> std::optional<double> {
    return detail::evaluate_full(models[i], data[k].test, cfg.batch_size);
  });
  for (auto& m : models) r.stems.push_back(m.stem);
  return r;
}

/// One joined model on the pooled training data; Local column only.
inline RunResult run_combined(const RunConfig& cfg, RunLog& log) {
  cfg.validate();
  std::vector<ClientDataset> data = make_datasets(cfg);
  FullModel<float> m = detail::initial_full(cfg, 0);
  detail::FullTrainer trainer(m, cfg.baseline_adamw);
  Rng rng(streams::baseline(cfg.seed, 0));
  std::vector<const Sample*> pooled;
  for (const auto& d : data) {
    for (const Sample& s : d.train) pooled.push_back(&s);
  }
  const int epochs = cfg.runs * cfg.server_epochs;
  for (int e = 0; e < epochs; ++e) {
    const double loss = trainer.epoch(pooled, cfg.batch_size, cfg.brightness, rng);
    log.emit({{"event", "combined_epoch"}, {"epoch", e}, {"loss", loss}, {"pooled", pooled.size()}});
  }
  RunResult r;
  r.mode = Mode::combined;
  r.matrix = assemble_eval_matrix(cfg.num_clients, true, [&](std::size_t, std::size_t k) -> std::optional<double> {
    return detail::evaluate_full(m, data[k].test, cfg.batch_size);
  });
  r.stems.push_back(m.stem);
  r.head = m.head;
  return r;
}

/// Round-robin schedule with first-order updates on both sides. The stem
/// gradient flows through the joined graph, so this never uses the wire.
inline RunResult run_whitebox(const RunConfig& cfg, RunLog& log) {
  cfg.validate();
  std::vector<ClientDataset> data = make_datasets(cfg);
  ServerHead<float> head = initial_head(cfg);
  std::vector<ClientStem<float>> stems;
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    stems.push_back(initial_stem(cfg, i));
    rngs.emplace_back(streams::client(cfg.seed, i));
  }
  // Optimizer state persists across visits, as on the split path.
  std::vector<AdamW<float>> stem_opt(cfg.num_clients, AdamW<float>(cfg.baseline_adamw, param_count(stems[0].layers)));
  AdamW<float> head_opt(cfg.baseline_adamw, param_count(head.layers));

  auto epoch = [&](std::size_t i, bool train_stem) {
    FullModel<float> joined{stems[i], head};
    double total = 0;
    std::size_t n = 0;
    for (const auto& [x, y] :
         detail::shuffled_batches(detail::pointers(data[i].train), cfg.batch_size, cfg.brightness, rngs[i])) {
      Graph<float> g;
      BoundParams<float> sb, hb;
      Var<float> loss =
          pixelwise_cross_entropy(full_model_forward(joined, g.constant(x), train_stem ? &sb : nullptr, train_stem ? nullptr : &hb), y);
      total += loss.value()[0];
      ++n;
      g.backward(loss);
      if (train_stem) {
        ParamVector<float> p = flatten(joined.stem);
        stem_opt[i].step(p, sb.gradient(g));
        unflatten(joined.stem, p);
      } else {
        ParamVector<float> p = flatten(joined.head);
        head_opt.step(p, hb.gradient(g));
        unflatten(joined.head, p);
      }
    }
    stems[i] = std::move(joined.stem);
    head = std::move(joined.head);
    return total / static_cast<double>(n);
  };

  for (int run = 0; run < cfg.runs; ++run) {
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
      for (int e = 0; e < cfg.client_epochs; ++e) {
        log.emit({{"event", "client_epoch"}, {"run", run}, {"client", i}, {"epoch", e}, {"loss", epoch(i, true)}});
      }
      for (int e = 0; e < cfg.server_epochs; ++e) {
        log.emit({{"event", "server_epoch"}, {"run", run}, {"client", i}, {"epoch", e}, {"loss", epoch(i, false)}});
      }
    }
  }
  RunResult r;
  r.mode = Mode::whitebox;
  r.matrix = assemble_eval_matrix(cfg.num_clients, false, [&](std::size_t i, std::size_t k) -> std::optional<double> {
    return detail::evaluate_full(FullModel<float>{stems[i], head}, data[k].test, cfg.batch_size);
  });
  r.stems = stems;
  r.head = head;
  return r;
}

/// n-weighted parameter average, accumulated in double.
inline ParamVector<float> fedavg_average(std::span<const ParamVector<float>> params, std::span<const std::size_t> counts) {
  if (params.empty() || params.size() != counts.size()) {
    throw Error(ErrorCode::invalid_argument, "fedavg needs one sample count per parameter vector");
  }
  double total = 0;
  for (std::size_t n : counts) total += static_cast<double>(n);
  if (total <= 0) throw Error(ErrorCode::invalid_argument, "fedavg sample counts sum to zero");
  const std::size_t len = params[0].size();
  std::vector<double> acc(len, 0.0);
  for (std::size_t c = 0; c < params.size(); ++c) {
    if (params[c].size() != len) throw Error(ErrorCode::invalid_shape, "fedavg parameter length mismatch");
    const double w = static_cast<double>(counts[c]) / total;
    for (std::size_t j = 0; j < len; ++j) acc[j] += w * static_cast<double>(params[c].values[j]);
  }
  ParamVector<float> out;
  out.values.resize(len);
  for (std::size_t j = 0; j < len; ++j) out.values[j] = static_cast<float>(acc[j]);
  // Exact idempotence when every client holds identical weights.
  bool identical = true;
  for (std::size_t c = 1; c < params.size() && identical; ++c) identical = params[c] == params[0];
  if (identical) out = params[0];
  return out;
}

inline ParamVector<float> flatten_full(const FullModel<float>& m) {
  ParamVector<float> p = flatten(m.stem);
  const ParamVector<float> h = flatten(m.head);
  p.values.insert(p.values.end(), h.values.begin(), h.values.end());
  return p;
}

inline void unflatten_full(FullModel<float>& m, const ParamVector<float>& p) {
  const std::size_t ns = param_count(m.stem.layers);
  unflatten(m.stem, ParamVector<float>{{p.values.begin(), p.values.begin() + static_cast<std::ptrdiff_t>(ns)}});
  unflatten(m.head, ParamVector<float>{{p.values.begin() + static_cast<std::ptrdiff_t>(ns), p.values.end()}});
}

/// Per round every client trains a copy of the global joined model for c_e
/// epochs; the global model becomes their n-weighted average.
inline RunResult run_fedavg(const RunConfig& cfg, RunLog& log) {
  cfg.validate();
  std::vector<ClientDataset> data = make_datasets(cfg);
  FullModel<float> global = detail::initial_full(cfg, 0);
  std::vector<Rng> rngs;
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    rngs.emplace_back(streams::baseline(cfg.seed, i));
    counts.push_back(data[i].train.size());
  }
  for (int round = 0; round < cfg.runs; ++round) {
    std::vector<ParamVector<float>> locals;
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
      FullModel<float> local = global;
      detail::FullTrainer trainer(local, cfg.baseline_adamw);
      const auto items = detail::pointers(data[i].train);
      for (int e = 0; e < cfg.client_epochs; ++e) {
        const double loss = trainer.epoch(items, cfg.batch_size, cfg.brightness, rngs[i]);
        log.emit({{"event", "fedavg_epoch"}, {"run", round}, {"client", i}, {"epoch", e}, {"loss", loss}});
      }
      locals.push_back(flatten_full(local));
    }
    unflatten_full(global, fedavg_average(locals, counts));
    log.emit({{"event", "fedavg_round"}, {"run", round}});
  }
  RunResult r;
  r.mode = Mode::fedavg;
  r.matrix = assemble_eval_matrix(cfg.num_clients, true, [&](std::size_t, std::size_t k) -> std::optional<double> {
    return detail::evaluate_full(global, data[k].test, cfg.batch_size);
  });
  r.stems.push_back(global.stem);
  r.head = global.head;
  return r;
}

struct OrderAblation {
  EvalMatrix client_first;  // live server weights, as without the checkpoint map
  EvalMatrix server_first;
};

/// Same schedule twice, differing only in phase order within a visit.
inline OrderAblation run_order_ablation(const RunConfig& cfg, RunLog& log) {
  RunConfig c = cfg;
  c.mode = Mode::blackfed_v1;
  OrderAblation out;
  BlackfedOptions opts;
  out.client_first = run_blackfed(c, log, opts).matrix;
  opts.order = PhaseOrder::server_first;
  out.server_first = run_blackfed(c, log, opts).matrix;
  return out;
}

struct GridCell {
  int client_epochs;
  int server_epochs;
  double mean_miou;  // mean Local mIoU
};

inline std::vector<GridCell> run_epoch_grid(const RunConfig& cfg, RunLog& log) {
  std::vector<GridCell> out;
  for (int ce : cfg.grid_client_epochs) {
    for (int se : cfg.grid_server_epochs) {
      RunConfig c = cfg;
      c.client_epochs = ce;
      c.server_epochs = se;
      const RunResult r = run_blackfed(c, log);
      out.push_back({ce, se, r.matrix.mean_local().value_or(0.0)});
      log.emit({{"event", "grid_cell"}, {"client_epochs", ce}, {"server_epochs", se}, {"mean_miou", out.back().mean_miou}});
    }
  }
  return out;
}

/// Dispatches on cfg.mode. The server-first ablation mode reports its
/// server-first matrix.
inline RunResult run_mode(const RunConfig& cfg, RunLog& log, const BlackfedOptions& opt = {}) {
  switch (cfg.mode) {
    case Mode::blackfed_v1:
    case Mode::blackfed_v2: return run_blackfed(cfg, log, opt);
    case Mode::server_first_ablation: {
      RunConfig c = cfg;
      c.mode = Mode::blackfed_v1;
      BlackfedOptions o = opt;
      o.order = PhaseOrder::server_first;
      RunResult r = run_blackfed(c, log, o);
      r.mode = Mode::server_first_ablation;
      return r;
    }
    case Mode::individual: return run_individual(cfg, log);
    case Mode::combined: return run_combined(cfg, log);
    case Mode::whitebox: return run_whitebox(cfg, log);
    case Mode::fedavg: return run_fedavg(cfg, log);
  }
  throw Error(ErrorCode::config, "unhandled mode");
}

/// Writes eval_matrix.csv, summary.csv and, for v2, eval_matrix_live.csv,
/// plus final weights and the checkpoint map where the mode has them.
inline void write_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const RunResult& r) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "eval_matrix.csv") << r.matrix.to_csv();
  std::ofstream(dir / "summary.csv") << r.matrix.summary_csv();
  if (r.live_matrix) std::ofstream(dir / "eval_matrix_live.csv") << r.live_matrix->to_csv();
  for (std::size_t i = 0; i < r.stems.size(); ++i) {
    save_weights((dir / ("stem_" + std::to_string(i) + ".bfwt")).string(), r.stems[i]);
  }
  if (r.head) save_weights((dir / "head_live.bfwt").string(), *r.head);
  if (r.checkpoints.size() > 0) r.checkpoints.save(dir / "checkpoints", cfg.arch);
}

}  // namespace blackfed
