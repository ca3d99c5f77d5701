#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "blackfed/data.hpp"
#include "blackfed/log.hpp"
#include "blackfed/metrics.hpp"
#include "blackfed/models.hpp"
#include "blackfed/optimizers.hpp"
#include "blackfed/protocol.hpp"

namespace blackfed {

struct ClientConfig {
  std::size_t batch_size = 8;
  double brightness = 2.0;  // augmentation factor range [1/b, b]; <= 1 disables
  SpsaConfig spsa;
  std::uint64_t seed = 0;  // shuffle and augmentation stream
};

/// Mean loss per epoch plus the number of skipped (non-finite) steps.
struct PhaseLog {
  std::vector<double> epoch_loss;
  std::size_t skipped = 0;
};

/// Sends one message and returns the reply; ErrorMessage becomes an exception.
inline SplitMessage exchange(Transport& t, const SplitMessage& msg) {
  t.send(msg);
  SplitMessage reply = t.receive();
  if (const auto* e = std::get_if<ErrorMessage>(&reply)) {
    throw Error(ErrorCode::protocol, std::string(to_string(e->code)) + ": " + e->text);
  }
  return reply;
}

/// Features then Masks; returns the scalar loss, or NaN when the server
/// reports a non-finite loss.
inline double client_round_trip(Transport& t, std::uint32_t batch_id, const Tensor<float>& features,
                                const Labels& masks) {
  t.send(Features{batch_id, features});
  t.send(Masks{batch_id, masks});
  SplitMessage reply = t.receive();
  if (const auto* e = std::get_if<ErrorMessage>(&reply)) {
    if (e->code == ProtocolError::non_finite) return std::numeric_limits<double>::quiet_NaN();
    throw Error(ErrorCode::protocol, std::string(to_string(e->code)) + ": " + e->text);
  }
  const auto* r = std::get_if<LossReply>(&reply);
  if (!r || r->batch_id != batch_id) throw Error(ErrorCode::protocol, "expected LossReply for batch " + std::to_string(batch_id));
  return r->loss;
}

/// Features in, logits out.
inline Tensor<float> client_predict(Transport& t, std::uint32_t batch_id, const Tensor<float>& features) {
  SplitMessage reply = exchange(t, Features{batch_id, features});
  auto* r = std::get_if<PredictionReply>(&reply);
  if (!r || r->batch_id != batch_id) {
    throw Error(ErrorCode::protocol, "expected PredictionReply for batch " + std::to_string(batch_id));
  }
  return std::move(r->logits);
}

/// A data-holding client. Owns its stem Theta^i and its data; trains the
/// stem from scalar losses only.
class ClientNode {
 public:
  ClientNode(std::uint32_t id, ClientStem<float> stem, ClientDataset data, ClientConfig config)
      : id_(id),
        stem_(std::move(stem)),
        data_(std::move(data)),
        config_(config),
        spsa_(config.spsa, param_count(stem_.layers)),
        rng_(config.seed) {
    if (config_.batch_size == 0) throw Error(ErrorCode::config, "batch_size must be positive");
  }

  std::uint32_t id() const { return id_; }
  const ClientStem<float>& stem() const { return stem_; }
  ClientStem<float>& stem() { return stem_; }
  const ClientDataset& data() const { return data_; }
  const SpsaGc<float>& optimizer() const { return spsa_; }
  bool connected() const { return transport_ != nullptr; }

  void connect(Transport& transport) {
    transport_ = &transport;
    const Shape features{ArchConfig::stem_out, stem_.config.feature_h(), stem_.config.feature_w()};
    SplitMessage reply = exchange(transport, Hello{id_, kProtocolVersion, features});
    if (!std::holds_alternative<Ack>(reply)) throw Error(ErrorCode::protocol, "Hello was not acknowledged");
  }

  void end_session() {
    SplitMessage reply = exchange(link(), EndSession{});
    transport_ = nullptr;
    if (!std::holds_alternative<Ack>(reply)) throw Error(ErrorCode::protocol, "EndSession was not acknowledged");
  }

  /// `epochs` passes of SPSA-GC over the training split against the frozen
  /// server. Both evaluations of a step see the same batch.
  PhaseLog client_train_phase(int epochs) {
    control(BeginClientPhase{});
    PhaseLog log;
    ClientStem<float> probe = stem_;
    for (int e = 0; e < epochs; ++e) {
      double total = 0;
      std::size_t steps = 0;
      for (const auto& batch : epoch_batches()) {
        const auto& [images, masks] = batch;
        LossFn<float> loss = [&](const ParamVector<float>& theta) {
          unflatten(probe, theta);
          return client_round_trip(link(), next_batch_id(), stem_forward(probe, images), masks);
        };
        ParamVector<float> theta = flatten(stem_);
        const SpsaStepResult<float> r = spsa_.step(theta, loss);
        if (!r.applied) {
          ++log.skipped;
          log::warn("client " + std::to_string(id_) + ": non-finite loss, SPSA step skipped");
          continue;
        }
        unflatten(stem_, theta);
        total += r.mean_loss();
        ++steps;
      }
      log.epoch_loss.push_back(steps ? total / static_cast<double>(steps) : std::nan(""));
    }
    return log;
  }

  /// Streams `epochs` passes of features and masks while the server trains.
  PhaseLog server_train_phase(int epochs) {
    control(BeginServerPhase{});
    PhaseLog log;
    for (int e = 0; e < epochs; ++e) {
      double total = 0;
      std::size_t steps = 0;
      for (const auto& [images, masks] : epoch_batches()) {
        const double loss = client_round_trip(link(), next_batch_id(), stem_forward(stem_, images), masks);
        if (!std::isfinite(loss)) {
          throw Error(ErrorCode::non_finite, "server reported a non-finite loss for client " + std::to_string(id_) +
                                                 " in epoch " + std::to_string(e));
        }
        total += loss;
        ++steps;
      }
      log.epoch_loss.push_back(total / static_cast<double>(steps));
    }
    return log;
  }

  /// Validation pass; the server scores it and updates its checkpoint map.
  /// Returns the mean validation loss.
  double validate() {
    control(BeginValidation{});
    double total = 0;
    std::size_t n = 0;
    for (const auto& [images, masks] : ordered_batches(data_.val)) {
      const double loss = client_round_trip(link(), next_batch_id(), stem_forward(stem_, images), masks);
      total += loss * static_cast<double>(masks.dim(0));
      n += masks.dim(0);
    }
    return n ? total / static_cast<double>(n) : std::nan("");
  }

  /// mIoU of (Theta^i, selected server weights) on `split`, which may belong
  /// to another client.
  double evaluate(std::span<const Sample> split, InferenceWeights weights) {
    if (split.empty()) throw Error(ErrorCode::empty_split, "cannot evaluate on an empty split");
    control(BeginInference{weights});
    ConfusionAccumulator acc(stem_.config.num_classes);
    for (const auto& [images, masks] : ordered_batches(split)) {
      acc.add(argmax_channels(client_predict(link(), next_batch_id(), stem_forward(stem_, images))), masks);
    }
    return *acc.miou();
  }

 private:
  Transport& link() {
    if (!transport_) throw Error(ErrorCode::session, "client " + std::to_string(id_) + " is not connected");
    return *transport_;
  }

  std::uint32_t next_batch_id() { return batch_id_++; }

  void control(const SplitMessage& msg) {
    SplitMessage reply = exchange(link(), msg);
    if (!std::holds_alternative<Ack>(reply)) throw Error(ErrorCode::protocol, "control message not acknowledged");
  }

  /// Shuffled, augmented training batches for one epoch.
  std::vector<std::pair<Tensor<float>, Labels>> epoch_batches() {
    if (data_.train.empty()) throw Error(ErrorCode::empty_split, "client " + std::to_string(id_) + " has no training data");
    std::vector<std::size_t> order(data_.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng_.shuffle(order);
    std::vector<std::pair<Tensor<float>, Labels>> out;
    for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
      std::vector<Sample> items;
      for (std::size_t j = b; j < std::min(order.size(), b + config_.batch_size); ++j) {
        Sample s = data_.train[order[j]];
        if (config_.brightness > 1.0) random_brightness(s.image, config_.brightness, rng_);
        items.push_back(std::move(s));
      }
      std::vector<const Sample*> ptrs;
      for (const Sample& s : items) ptrs.push_back(&s);
      out.push_back(make_batch(ptrs));
    }
    return out;
  }

  std::vector<std::pair<Tensor<float>, Labels>> ordered_batches(std::span<const Sample> split) const {
    std::vector<std::pair<Tensor<float>, Labels>> out;
    for (std::size_t b = 0; b < split.size(); b += config_.batch_size) {
      std::vector<const Sample*> ptrs;
      for (std::size_t j = b; j < std::min(split.size(), b + config_.batch_size); ++j) ptrs.push_back(&split[j]);
      out.push_back(make_batch(ptrs));
    }
    return out;
  }

  std::uint32_t id_;
  ClientStem<float> stem_;
  ClientDataset data_;
  ClientConfig config_;
  SpsaGc<float> spsa_;
  Rng rng_;
  Transport* transport_ = nullptr;
  std::uint32_t batch_id_ = 0;
};

}  // namespace blackfed
