// blackfed command-line entry point: run, serve, client, report.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "blackfed/config.hpp"
#include "blackfed/log.hpp"
#include "blackfed/orchestrator.hpp"
#include "blackfed/tcp.hpp"

namespace fs = std::filesystem;
using namespace blackfed;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct CommonOptions {
  std::string config;
  std::string mode;
  std::string transport;
  std::string listen;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "config file (key = value lines)");
  cmd->add_option("--mode", o.mode, "overrides the config mode");
  cmd->add_option("--seed", o.seed, "overrides the config seed");
  cmd->add_option("--set", o.overrides, "extra key=value override, repeatable");
}

RunConfig load(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config_file(o.config);
  ConfigLoader loader(cfg);
  for (const auto& kv : o.overrides) loader.apply_override(kv);
  if (!o.mode.empty()) cfg.mode = parse_mode(o.mode);
  if (!o.transport.empty()) loader.apply_override("transport=" + o.transport);
  if (!o.listen.empty()) cfg.listen_addr = o.listen;
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

bool is_blackfed(Mode m) { return m == Mode::blackfed_v1 || m == Mode::blackfed_v2; }

int cmd_run(const CommonOptions& o, const std::string& out, bool grid) {
  const RunConfig cfg = load(o);
  const fs::path dir(out);
  fs::create_directories(dir);
  RunLog log(dir / "run.log.jsonl");
  const fs::path dump = dir / "state_dump";
  try {
    if (grid) {
      std::ofstream csv(dir / "grid.csv");
      csv << "client_epochs,server_epochs,mean_local\n";
      for (const GridCell& c : run_epoch_grid(cfg, log)) {
        csv << c.client_epochs << ',' << c.server_epochs << ',' << EvalMatrix::format(c.mean_miou) << '\n';
      }
      return 0;
    }
    BlackfedOptions opt;
    opt.dump = dump;
    const RunResult r = run_mode(cfg, log, opt);
    write_outputs(dir, cfg, r);
    if (is_blackfed(cfg.mode) || cfg.mode == Mode::whitebox || cfg.mode == Mode::server_first_ablation) {
      const PhaseOrder order = cfg.mode == Mode::server_first_ablation ? PhaseOrder::server_first : PhaseOrder::client_first;
      const std::string audit = audit_schedule(log.events(), cfg, order);
      if (!audit.empty()) throw Error(ErrorCode::schedule, "schedule audit failed: " + audit);
    }
    std::cout << r.matrix.summary_csv();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    if (fs::exists(dump)) std::cerr << "state dump: " << dump.string() << '\n';
    return kExitRuntime;
  }
}

/// Admits clients in round-robin order until every training visit is done,
/// then admits anyone for evaluation. Stops the listener once each client
/// has finished its evaluation session.
class TurnGate : public MessageHandler {
 public:
  TurnGate(ServerNode& server, const RunConfig& cfg)
      : server_(&server), n_(cfg.num_clients), total_(static_cast<std::uint64_t>(cfg.runs) * cfg.num_clients) {}

  void set_listener(TcpServer* listener) { listener_ = listener; }
  bool finished() const { return evaluated_ >= n_; }

  std::optional<SplitMessage> handle(const SplitMessage& msg) override {
    if (const auto* h = std::get_if<Hello>(&msg)) {
      if (h->client_id >= n_) return ErrorMessage{ProtocolError::not_enrolled, "unknown client id"};
      if (ended_ < total_ && h->client_id != ended_ % n_) {
        return ErrorMessage{ProtocolError::busy, "waiting for client " + std::to_string(ended_ % n_)};
      }
      auto reply = server_->handle(msg);
      admitted_ = reply && std::holds_alternative<Ack>(*reply);
      return reply;
    }
    const bool end = std::holds_alternative<EndSession>(msg);
    auto reply = server_->handle(msg);
    if (end && admitted_) {
      admitted_ = false;
      if (ended_ < total_) {
        ++ended_;
        log::info("visit " + std::to_string(ended_) + " of " + std::to_string(total_) + " done");
      } else if (++evaluated_ >= n_ && listener_) {
        listener_->stop();
      }
    }
    return reply;
  }

  void on_disconnect() override {
    if (!admitted_) return;
    admitted_ = false;
    server_->on_disconnect();
  }

 private:
  ServerNode* server_;
  std::size_t n_;
  std::uint64_t total_;
  std::uint64_t ended_ = 0;
  std::size_t evaluated_ = 0;
  bool admitted_ = false;
  TcpServer* listener_ = nullptr;
};

int cmd_serve(const CommonOptions& o, const std::string& out) {
  const RunConfig cfg = load(o);
  if (!is_blackfed(cfg.mode)) throw Error(ErrorCode::config, "serve needs mode blackfed_v1 or blackfed_v2");
  try {
    ServerNode server(initial_head(cfg), ServerConfig{cfg.mode == Mode::blackfed_v2 ? ServerMode::v2 : ServerMode::v1,
                                                      cfg.server_adamw, cfg.strict_checkpoints});
    TurnGate gate(server, cfg);
    TcpServer tcp(gate, Endpoint::parse(cfg.listen_addr));
    gate.set_listener(&tcp);
    std::cout << "listening on 127.0.0.1:" << tcp.port() << std::endl;
    tcp.serve();
    const fs::path dir(out);
    fs::create_directories(dir);
    save_weights((dir / "head_live.bfwt").string(), server.head());
    if (server.checkpoints().size() > 0) server.checkpoints().save(dir / "checkpoints", cfg.arch);
    std::ofstream val(dir / "validations.csv");
    val << "client,visit,miou,stored\n";
    for (const auto& v : server.validations()) {
      val << v.client_id << ',' << v.visit << ',' << EvalMatrix::format(v.miou) << ',' << v.stored << '\n';
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "serve failed: " << e.what() << '\n';
    return kExitRuntime;
  }
}

/// Connects, retrying while the server is busy with another client or not
/// yet listening.
std::unique_ptr<TcpClientTransport> open_session(ClientNode& c, const Endpoint& server, double patience_s) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(patience_s);
  auto wait = std::chrono::milliseconds(5);
  for (;;) {
    std::string why;
    try {
      auto t = std::make_unique<TcpClientTransport>(server);
      c.connect(*t);
      return t;
    } catch (const Error& e) {
      why = e.what();
      const bool retry = why.find("BUSY") != std::string::npos || why.find("connect to") != std::string::npos;
      if (!retry) throw;
    }
    if (std::chrono::steady_clock::now() > deadline) throw Error(ErrorCode::session, "gave up waiting: " + why);
    std::this_thread::sleep_for(wait);
    wait = std::min(wait * 2, std::chrono::milliseconds(200));
  }
}

int cmd_client(const CommonOptions& o, std::uint32_t id, const std::string& connect, const std::string& data_dir,
               const std::string& out, double patience) {
  const RunConfig cfg = load(o);
  if (!is_blackfed(cfg.mode)) throw Error(ErrorCode::config, "client needs mode blackfed_v1 or blackfed_v2");
  if (id >= cfg.num_clients) throw Error(ErrorCode::config, "--client-id must be below schedule.num_clients");
  const Endpoint server = Endpoint::parse(connect);
  const fs::path dir(out);
  fs::create_directories(dir);
  RunLog log(dir / ("client_" + std::to_string(id) + ".log.jsonl"));
  try {
    SceneConfig sc = cfg.data;
    sc.seed = streams::data(cfg.seed);
    ClientDataset data;
    if (data_dir.empty()) {
      data = generate_client_dataset(sc, id);
    } else {
      fs::create_directories(data_dir);
      data = load_or_generate(sc, id, (fs::path(data_dir) / ("client_" + std::to_string(id) + ".bfds")).string());
    }
    ClientConfig cc{cfg.batch_size, cfg.brightness, cfg.spsa, streams::client(cfg.seed, id)};
    cc.spsa.seed = streams::spsa(cfg.seed, id);
    ClientNode node(id, initial_stem(cfg, id), std::move(data), cc);

    for (int run = 0; run < cfg.runs; ++run) {
      auto t = open_session(node, server, patience);
      const PhaseLog cp = node.client_train_phase(cfg.client_epochs);
      for (std::size_t e = 0; e < cp.epoch_loss.size(); ++e) {
        log.emit({{"event", "client_epoch"}, {"run", run}, {"client", id}, {"epoch", e}, {"loss", cp.epoch_loss[e]}});
      }
      const PhaseLog sp = node.server_train_phase(cfg.server_epochs);
      for (std::size_t e = 0; e < sp.epoch_loss.size(); ++e) {
        log.emit({{"event", "server_epoch"}, {"run", run}, {"client", id}, {"epoch", e}, {"loss", sp.epoch_loss[e]}});
      }
      const double val = node.validate();
      node.end_session();
      log.emit({{"event", "validation"}, {"run", run}, {"client", id}, {"loss", val}});
    }
    auto t = open_session(node, server, patience);
    const double local = node.evaluate(
        node.data().test, cfg.mode == Mode::blackfed_v2 ? InferenceWeights::checkpoint : InferenceWeights::live);
    node.end_session();
    log.emit({{"event", "evaluation"}, {"client", id}, {"local_miou", local}});
    save_weights((dir / ("stem_" + std::to_string(id) + ".bfwt")).string(), node.stem());
    std::ofstream(dir / ("client_" + std::to_string(id) + ".csv")) << "client,local\n"
                                                                    << id << ',' << EvalMatrix::format(local) << '\n';
    std::cout << "client " << id << " local mIoU " << EvalMatrix::format(local) << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "client " << id << " failed: " << e.what() << '\n';
    return kExitRuntime;
  }
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::config, "missing " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string svg_polyline(const std::vector<std::vector<double>>& series, const std::vector<std::string>& labels,
                         const std::string& title) {
  const double w = 640, h = 360, pad = 40;
  double ymax = 0;
  std::size_t xmax = 1;
  for (const auto& s : series) {
    for (double v : s) ymax = std::max(ymax, v);
    xmax = std::max(xmax, s.size());
  }
  if (ymax <= 0) ymax = 1;
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"" << pad << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  os << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << w - 2 * pad << "\" height=\"" << h - 2 * pad
     << "\" fill=\"none\" stroke=\"#888\"/>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* colour = colours[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" points=\"";
    for (std::size_t i = 0; i < series[k].size(); ++i) {
      const double x = pad + (w - 2 * pad) * (xmax > 1 ? static_cast<double>(i) / static_cast<double>(xmax - 1) : 0.5);
      const double y = h - pad - (h - 2 * pad) * series[k][i] / ymax;
      os << x << ',' << y << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << w - pad - 120 << "\" y=\"" << pad + 16 * (k + 1) << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
       << colour << "\">" << labels[k] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

int cmd_report(const std::string& run_dir, const std::string& histogram, const std::string& loss_curve,
               const CommonOptions& o) {
  const fs::path dir(run_dir);
  if (!fs::is_directory(dir)) throw Error(ErrorCode::config, "no run directory " + run_dir);
  const auto summary = read_csv(dir / "summary.csv");
  if (summary.size() < 2) throw Error(ErrorCode::config, "summary.csv has no rows");

  std::cout << std::left << std::setw(8) << "client" << std::setw(22) << "Local" << "OOD" << '\n';
  double sum_local = 0, sum_ood = 0;
  int n_local = 0, n_ood = 0;
  for (std::size_t r = 1; r < summary.size(); ++r) {
    const auto& row = summary[r];
    const std::string local = row.size() > 1 ? row[1] : "", ood = row.size() > 2 ? row[2] : "";
    std::cout << std::setw(8) << row[0] << std::setw(22) << (local.empty() ? "-" : local) << (ood.empty() ? "-" : ood)
              << '\n';
    if (!local.empty()) sum_local += std::stod(local), ++n_local;
    if (!ood.empty()) sum_ood += std::stod(ood), ++n_ood;
  }
  std::cout << std::setw(8) << "mean" << std::setw(22) << (n_local ? std::to_string(sum_local / n_local) : "-")
            << (n_ood ? std::to_string(sum_ood / n_ood) : "-") << '\n';

  if (!histogram.empty()) {
    const RunConfig cfg = load(o);
    SceneConfig sc = cfg.data;
    sc.seed = streams::data(cfg.seed);
    std::vector<std::vector<double>> series;
    std::vector<std::string> labels;
    std::ofstream csv(fs::path(histogram).replace_extension(".csv"));
    csv << "client,bin,density\n";
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
      series.push_back(intensity_histogram(generate_client_dataset(sc, i).train, 32));
      labels.push_back("client " + std::to_string(i));
      for (std::size_t b = 0; b < series.back().size(); ++b) {
        csv << i << ',' << b << ',' << EvalMatrix::format(series.back()[b]) << '\n';
      }
    }
    std::ofstream(histogram) << svg_polyline(series, labels, "pixel intensity density");
  }
  if (!loss_curve.empty()) {
    std::ifstream in(dir / "run.log.jsonl");
    if (!in) throw Error(ErrorCode::config, "missing run.log.jsonl");
    std::vector<double> client, server;
    std::string line;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      const std::string ev = j.value("event", "");
      if (ev == "client_epoch") client.push_back(j.at("loss").get<double>());
      if (ev == "server_epoch") server.push_back(j.at("loss").get<double>());
    }
    std::ofstream(loss_curve) << svg_polyline({client, server}, {"client epochs", "server epochs"}, "training loss");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split-network federated segmentation with black-box clients"};
  app.require_subcommand(1);

  CommonOptions run_opts, serve_opts, client_opts, report_opts;
  std::string run_out = "out", serve_out = "out_server", client_out = "out_client", data_dir, connect, run_dir,
              histogram, loss_curve;
  std::uint32_t client_id = 0;
  double patience = 600;
  bool grid = false;

  auto* run = app.add_subcommand("run", "train and evaluate one mode in this process");
  add_common(run, run_opts);
  run->add_option("--out", run_out, "output directory");
  run->add_option("--transport", run_opts.transport, "inproc or tcp");
  run->add_option("--listen", run_opts.listen, "server address for tcp transport");
  run->add_flag("--grid", grid, "run the client/server epoch grid instead");

  auto* serve = app.add_subcommand("serve", "host the server head over TCP for standalone clients");
  add_common(serve, serve_opts);
  serve->add_option("--listen", serve_opts.listen, "host:port (port 0 picks one)");
  serve->add_option("--out", serve_out, "output directory");

  auto* client = app.add_subcommand("client", "run one standalone client against a server");
  add_common(client, client_opts);
  client->add_option("--client-id", client_id, "client index")->required();
  client->add_option("--connect", connect, "server host:port")->required();
  client->add_option("--data-dir", data_dir, "dataset cache directory");
  client->add_option("--out", client_out, "output directory");
  client->add_option("--patience", patience, "seconds to wait for a turn");

  auto* report = app.add_subcommand("report", "print the Local/OOD table of a finished run");
  report->add_option("run_dir", run_dir, "run output directory")->required();
  report->add_option("--histogram", histogram, "write an intensity histogram SVG (uses --config)");
  report->add_option("--loss-curve", loss_curve, "write a training loss SVG");
  add_common(report, report_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_opts, run_out, grid);
    if (*serve) return cmd_serve(serve_opts, serve_out);
    if (*client) return cmd_client(client_opts, client_id, connect, data_dir, client_out, patience);
    if (*report) return cmd_report(run_dir, histogram, loss_curve, report_opts);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return e.code() == ErrorCode::config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
