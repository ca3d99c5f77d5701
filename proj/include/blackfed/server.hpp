#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "blackfed/log.hpp"
#include "blackfed/metrics.hpp"
#include "blackfed/models.hpp"
#include "blackfed/ops.hpp"
#include "blackfed/optimizers.hpp"
#include "blackfed/protocol.hpp"

namespace blackfed {

enum class ServerMode { v1, v2 };

struct CheckpointEntry {
  ParamVector<float> weights;
  double val_miou = 0.0;
  std::uint64_t stamp = 0;  // server visit counter when stored
};

/// Client index -> best server weights seen for that client.
class ServerCheckpointMap {
 public:
  /// Stores a deep copy iff the client has no entry yet or `val_miou` is at
  /// least the stored score.
  bool update(std::uint32_t client_id, const ParamVector<float>& weights, double val_miou, std::uint64_t stamp) {
    auto it = entries_.find(client_id);
    if (it != entries_.end() && val_miou < it->second.val_miou) return false;
    entries_[client_id] = CheckpointEntry{weights, val_miou, stamp};
    return true;
  }

  const CheckpointEntry* find(std::uint32_t client_id) const {
    auto it = entries_.find(client_id);
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::uint32_t, CheckpointEntry>& entries() const { return entries_; }

  /// One weight file per client plus `index.txt` with lines
  /// "client_id miou stamp filename".
  void save(const std::filesystem::path& dir, const ArchConfig& arch) const {
    std::filesystem::create_directories(dir);
    std::ostringstream index;
    index.precision(17);
    for (const auto& [id, e] : entries_) {
      const std::string file = "server_client_" + std::to_string(id) + ".bfwt";
      write_file((dir / file).string(), encode_weights(arch, ServerHead<float>::part_name, e.weights));
      index << id << ' ' << e.val_miou << ' ' << e.stamp << ' ' << file << '\n';
    }
    const std::string text = index.str();
    write_file((dir / "index.txt").string(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  static ServerCheckpointMap load(const std::filesystem::path& dir, const ArchConfig& arch) {
    std::ifstream in(dir / "index.txt");
    if (!in) throw Error(ErrorCode::io, "missing checkpoint index in " + dir.string());
    ServerCheckpointMap map;
    Rng rng(0);
    const std::size_t count = param_count(ServerHead<float>::init(arch, rng).layers);
    std::uint32_t id;
    double miou;
    std::uint64_t stamp;
    std::string file;
    while (in >> id >> miou >> stamp >> file) {
      auto weights = decode_weights<float>(arch, ServerHead<float>::part_name, read_file((dir / file).string()), count);
      map.entries_[id] = CheckpointEntry{std::move(weights), miou, stamp};
    }
    return map;
  }

 private:
  std::map<std::uint32_t, CheckpointEntry> entries_;
};

struct ServerConfig {
  ServerMode mode = ServerMode::v2;
  AdamWConfig adamw;
  bool strict = false;  // NOT_ENROLLED instead of falling back to live weights
};

/// Validation result recorded when a validation phase closes.
struct ValidationRecord {
  std::uint32_t client_id;
  std::uint64_t visit;
  double miou;
  bool stored;
};

/// The federation server: owns Phi, trains it with AdamW on streamed
/// features, and keeps the per-client checkpoint map.
class ServerNode : public MessageHandler {
 public:
  enum class Phase { idle, client, server, validation, inference };

  ServerNode(ServerHead<float> head, ServerConfig config)
      : head_(std::move(head)), config_(config), adamw_(config.adamw, param_count(head_.layers)) {}

  const ServerHead<float>& head() const { return head_; }
  ParamVector<float> weights() const { return flatten(head_); }
  const ServerCheckpointMap& checkpoints() const { return checkpoints_; }
  ServerCheckpointMap& checkpoints() { return checkpoints_; }
  const ServerConfig& config() const { return config_; }
  void set_mode(ServerMode mode) { config_.mode = mode; }
  std::uint64_t visits() const { return visits_; }
  std::optional<std::uint32_t> session() const { return session_; }
  Phase phase() const { return phase_; }
  const std::vector<ValidationRecord>& validations() const { return validations_; }
  const AdamW<float>& optimizer() const { return adamw_; }

  /// Loss of Phi on one batch without updating it.
  double evaluate_loss(const Tensor<float>& features, const Labels& masks) const {
    Graph<float> g;
    return pixelwise_cross_entropy(head_forward(head_, g.constant(features)), masks).value()[0];
  }

  /// One first-order step on Phi; returns the pre-update loss.
  double train_step(const Tensor<float>& features, const Labels& masks) {
    Graph<float> g;
    BoundParams<float> bound;
    Var<float> loss = pixelwise_cross_entropy(head_forward(head_, g.constant(features), true, &bound), masks);
    const double value = loss.value()[0];
    g.backward(loss);
    ParamVector<float> p = flatten(head_);
    adamw_.step(p, bound.gradient(g));
    unflatten(head_, p);
    return value;
  }

  /// Stores the live Phi for `client_id` if it beats the stored score.
  bool checkpoint_update(std::uint32_t client_id, double val_miou) {
    return checkpoints_.update(client_id, flatten(head_), val_miou, visits_);
  }

  /// Forward through the weights selected for this client. Live Phi is
  /// never modified; v2 reads a snapshot copy.
  Tensor<float> serve_inference(std::uint32_t client_id, const Tensor<float>& features, InferenceWeights weights) {
    if (weights == InferenceWeights::live) return head_forward(head_, features);
    const CheckpointEntry* e = checkpoints_.find(client_id);
    if (!e) {
      if (config_.strict) {
        throw Error(ErrorCode::protocol, "client " + std::to_string(client_id) + " has no stored server weights");
      }
      log::warn("client " + std::to_string(client_id) + " not enrolled in checkpoint map; using live weights");
      return head_forward(head_, features);
    }
    auto cached = snapshot_cache_.find(client_id);
    if (cached == snapshot_cache_.end() || cached->second.first != e->stamp) {
      ServerHead<float> h = head_;
      unflatten(h, e->weights);
      cached = snapshot_cache_.insert_or_assign(client_id, std::make_pair(e->stamp, std::move(h))).first;
    }
    return head_forward(cached->second.second, features);
  }

  std::optional<SplitMessage> handle(const SplitMessage& msg) override {
    try {
      return std::visit([this](const auto& m) { return on(m); }, msg);
    } catch (const Error& e) {
      const ProtocolError code = e.code() == ErrorCode::non_finite      ? ProtocolError::non_finite
                                 : e.code() == ErrorCode::invalid_shape ? ProtocolError::shape_mismatch
                                                                        : ProtocolError::internal;
      pending_.reset();
      return ErrorMessage{code, e.what()};
    }
  }

  void on_disconnect() override {
    log::warn("client session dropped without EndSession");
    close_phase();
    session_.reset();
    phase_ = Phase::idle;
  }

 private:
  using Reply = std::optional<SplitMessage>;

  static ErrorMessage sequence_error(const std::string& text) { return {ProtocolError::bad_sequence, text}; }

  Reply on(const Hello& m) {
    if (session_) return ErrorMessage{ProtocolError::busy, "another client session is active"};
    if (m.protocol_version != kProtocolVersion) {
      return ErrorMessage{ProtocolError::version_mismatch,
                          "server speaks protocol " + std::to_string(kProtocolVersion) + ", client sent " +
                              std::to_string(m.protocol_version)};
    }
    const Shape expected{ArchConfig::stem_out, head_.config.feature_h(), head_.config.feature_w()};
    if (m.feature_shape != expected) {
      return ErrorMessage{ProtocolError::shape_mismatch,
                          "server expects features " + shape_string(expected) + ", client declared " +
                              shape_string(m.feature_shape)};
    }
    session_ = m.client_id;
    phase_ = Phase::idle;
    return Ack{};
  }

  Reply begin(Phase next) {
    if (!session_) return sequence_error("no session; send Hello first");
    close_phase();
    phase_ = next;
    if (next == Phase::client) frozen_digest_ = param_digest(flatten(head_));
    if (next == Phase::server) ++visits_;
    if (next == Phase::validation) validation_ = ConfusionAccumulator(head_.config.num_classes);
    return Ack{};
  }

  Reply on(const BeginClientPhase&) { return begin(Phase::client); }
  Reply on(const BeginServerPhase&) { return begin(Phase::server); }
  Reply on(const BeginValidation&) { return begin(Phase::validation); }
  Reply on(const BeginInference& m) {
    inference_weights_ = m.weights;
    return begin(Phase::inference);
  }

  Reply on(const EndSession&) {
    if (!session_) return sequence_error("no session to end");
    close_phase();
    session_.reset();
    phase_ = Phase::idle;
    return Ack{};
  }

  Reply on(const Features& m) {
    if (!session_) return sequence_error("Features before Hello");
    check_features(m.tensor);
    if (phase_ == Phase::inference) {
      if (config_.strict && inference_weights_ == InferenceWeights::checkpoint && !checkpoints_.find(*session_)) {
        return ErrorMessage{ProtocolError::not_enrolled,
                            "client " + std::to_string(*session_) + " has no stored server weights"};
      }
      return PredictionReply{m.batch_id, serve_inference(*session_, m.tensor, inference_weights_)};
    }
    if (phase_ == Phase::idle) return sequence_error("Features outside a phase");
    if (pending_) return sequence_error("Features while batch " + std::to_string(pending_->batch_id) + " awaits Masks");
    pending_ = m;
    return std::nullopt;
  }

  Reply on(const Masks& m) {
    if (!pending_ || pending_->batch_id != m.batch_id) return sequence_error("Masks without matching Features");
    Features f = std::move(*pending_);
    pending_.reset();
    const Shape& fs = f.tensor.shape();
    if (m.labels.rank() != 3 || m.labels.dim(0) != fs[0] || m.labels.dim(1) != head_.config.height ||
        m.labels.dim(2) != head_.config.width) {
      return ErrorMessage{ProtocolError::shape_mismatch, "mask shape " + shape_string(m.labels.shape()) +
                                                             " does not match batch " + shape_string(fs)};
    }
    double loss = 0.0;
    switch (phase_) {
      case Phase::client: loss = evaluate_loss(f.tensor, m.labels); break;
      case Phase::server: loss = train_step(f.tensor, m.labels); break;
      case Phase::validation: {
        Graph<float> g;
        Var<float> logits = head_forward(head_, g.constant(f.tensor));
        loss = pixelwise_cross_entropy(logits, m.labels).value()[0];
        validation_.add(argmax_channels(logits.value()), m.labels);
        break;
      }
      default: return sequence_error("Masks outside a training phase");
    }
    return LossReply{f.batch_id, static_cast<float>(loss)};
  }

  template <typename Other>
  Reply on(const Other&) {
    return sequence_error(std::string("unexpected ") + to_string(type_of<Other>()) + " from client");
  }

  void check_features(const Tensor<float>& t) const {
    const Shape& s = t.shape();
    if (s.size() != 4 || s[1] != ArchConfig::stem_out || s[2] != head_.config.feature_h() ||
        s[3] != head_.config.feature_w()) {
      throw Error(ErrorCode::invalid_shape, "features " + shape_string(s) + " do not match the declared shape");
    }
  }

  void close_phase() {
    pending_.reset();
    if (phase_ == Phase::client && param_digest(flatten(head_)) != frozen_digest_) {
      throw Error(ErrorCode::contract_violation, "server weights changed during a client phase");
    }
    if (phase_ == Phase::validation && session_) {
      const double score = validation_.miou().value_or(0.0);
      const bool stored = config_.mode == ServerMode::v2 && checkpoint_update(*session_, score);
      validations_.push_back({*session_, visits_, score, stored});
    }
    phase_ = Phase::idle;
  }

  ServerHead<float> head_;
  ServerConfig config_;
  AdamW<float> adamw_;
  ServerCheckpointMap checkpoints_;
  std::map<std::uint32_t, std::pair<std::uint64_t, ServerHead<float>>> snapshot_cache_;
  std::optional<std::uint32_t> session_;
  Phase phase_ = Phase::idle;
  std::optional<Features> pending_;
  InferenceWeights inference_weights_ = InferenceWeights::checkpoint;
  ConfusionAccumulator validation_{2};
  Digest frozen_digest_{};
  std::uint64_t visits_ = 0;
  std::vector<ValidationRecord> validations_;
};

}  // namespace blackfed
