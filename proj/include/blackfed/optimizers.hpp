#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "blackfed/common.hpp"
#include "blackfed/models.hpp"

namespace blackfed {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with bias correction and decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(AdamWConfig config, std::size_t size) : config_(config), m_(size, T(0)), v_(size, T(0)) {}

  void step(std::span<T> params, std::span<const T> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw Error(ErrorCode::invalid_shape, "AdamW: expected " + std::to_string(m_.size()) + " parameters, got " +
                                                std::to_string(params.size()) + " params / " +
                                                std::to_string(grads.size()) + " grads");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!std::isfinite(grads[i])) {
        throw Error(ErrorCode::non_finite, "AdamW: gradient " + std::to_string(i) + " is " +
                                               std::to_string(static_cast<double>(grads[i])) + " at step " +
                                               std::to_string(step_ + 1) + "; step aborted");
      }
    }
    ++step_;
    const T lr = static_cast<T>(config_.lr);
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T eps = static_cast<T>(config_.eps);
    const T decay = static_cast<T>(1.0 - config_.lr * config_.weight_decay);
    const T bc1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(step_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(step_)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const T g = grads[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
      const T m_hat = m_[i] / bc1;
      const T v_hat = v_[i] / bc2;
      params[i] = params[i] * decay - lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }

  void step(ParamVector<T>& params, const ParamVector<T>& grads) { step(params.values, grads.values); }

  std::uint64_t steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  std::span<const T> first_moment() const { return m_; }
  std::span<const T> second_moment() const { return v_; }

 private:
  AdamWConfig config_;
  std::vector<T> m_, v_;
  std::uint64_t step_ = 0;
};

struct SpsaConfig {
  double a = 0.01;
  double A = 100.0;
  double alpha = 0.602;
  double gamma = 0.101;
  double c = 0.005;
  double beta = 0.9;
  int num_perturbations = 1;
  std::uint64_t seed = 0;

  double step_size(std::uint64_t k) const { return a / std::pow(A + static_cast<double>(k) + 1.0, alpha); }
  double perturbation(std::uint64_t k) const { return c / std::pow(static_cast<double>(k) + 1.0, gamma); }
};

/// Scalar objective evaluated by a (possibly remote) round trip.
template <typename T>
using LossFn = std::function<double(const ParamVector<T>&)>;

template <typename T>
struct SpsaEstimate {
  ParamVector<T> gradient;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  bool finite = true;
};

/// Two-sided simultaneous-perturbation gradient estimate with a given
/// Rademacher direction: g_j = (L(x + c*d) - L(x - c*d)) / (2*c*d_j).
template <typename T>
SpsaEstimate<T> spsa_estimate(const LossFn<T>& loss, const ParamVector<T>& x, std::span<const int> direction,
                              double c) {
  if (direction.size() != x.size()) throw Error(ErrorCode::invalid_shape, "perturbation length mismatch");
  if (!(c > 0.0)) throw Error(ErrorCode::schedule, "perturbation scale must be positive");
  ParamVector<T> plus = x, minus = x;
  const T ct = static_cast<T>(c);
  for (std::size_t j = 0; j < x.size(); ++j) {
    const T d = static_cast<T>(direction[j]);
    plus.values[j] = x.values[j] + ct * d;
    minus.values[j] = x.values[j] - ct * d;
  }
  SpsaEstimate<T> est;
  est.loss_plus = loss(plus);
  est.loss_minus = loss(minus);
  est.finite = std::isfinite(est.loss_plus) && std::isfinite(est.loss_minus);
  est.gradient.values.assign(x.size(), T(0));
  if (!est.finite) return est;
  const double diff = (est.loss_plus - est.loss_minus) / (2.0 * c);
  for (std::size_t j = 0; j < x.size(); ++j) {
    est.gradient.values[j] = static_cast<T>(diff / static_cast<double>(direction[j]));
  }
  return est;
}

inline std::vector<int> rademacher(Rng& rng, std::size_t n) {
  std::vector<int> d(n);
  for (int& v : d) v = rng.sign();
  return d;
}

template <typename T>
struct SpsaStepResult {
  bool applied = false;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double step_size = 0.0;
  double perturbation = 0.0;

  double mean_loss() const { return 0.5 * (loss_plus + loss_minus); }
};

/// SPSA with gradient correction: the estimate is taken at the look-ahead
/// point x + beta*m, then m <- beta*m - a_k*g and x <- x + m.
template <typename T>
class SpsaGc {
 public:
  SpsaGc(SpsaConfig config, std::size_t size) : config_(config), m_(size, T(0)), rng_(config.seed) {
    if (config_.num_perturbations < 1) throw Error(ErrorCode::config, "num_perturbations must be >= 1");
  }

  /// Pseudo-gradient at `x` averaged over num_perturbations fresh directions.
  SpsaEstimate<T> estimate(const LossFn<T>& loss, const ParamVector<T>& x) {
    const double ck = config_.perturbation(k_);
    SpsaEstimate<T> total;
    total.gradient.values.assign(x.size(), T(0));
    const int draws = config_.num_perturbations;
    for (int r = 0; r < draws; ++r) {
      const std::vector<int> d = rademacher(rng_, x.size());
      SpsaEstimate<T> e = spsa_estimate(loss, x, d, ck);
      total.loss_plus += e.loss_plus / draws;
      total.loss_minus += e.loss_minus / draws;
      if (!e.finite) {
        total.finite = false;
        continue;
      }
      if (draws == 1) {
        total.gradient = std::move(e.gradient);
      } else {
        for (std::size_t j = 0; j < x.size(); ++j) total.gradient.values[j] += e.gradient.values[j] / static_cast<T>(draws);
      }
    }
    return total;
  }

  SpsaStepResult<T> step(ParamVector<T>& x, const LossFn<T>& loss) {
    if (x.size() != m_.size()) throw Error(ErrorCode::invalid_shape, "SPSA-GC parameter length mismatch");
    const double ak = config_.step_size(k_);
    if (!(ak >= 1e-12)) {
      throw Error(ErrorCode::schedule, "SPSA-GC step size underflow at k=" + std::to_string(k_));
    }
    SpsaStepResult<T> result;
    result.step_size = ak;
    result.perturbation = config_.perturbation(k_);

    const T beta = static_cast<T>(config_.beta);
    ParamVector<T> ahead = x;
    for (std::size_t j = 0; j < x.size(); ++j) ahead.values[j] = x.values[j] + beta * m_[j];

    SpsaEstimate<T> g = estimate(loss, ahead);
    result.loss_plus = g.loss_plus;
    result.loss_minus = g.loss_minus;
    ++k_;
    if (!g.finite) return result;  // skipped; caller logs it

    const T a = static_cast<T>(ak);
    for (std::size_t j = 0; j < x.size(); ++j) {
      m_[j] = beta * m_[j] - a * g.gradient.values[j];
      x.values[j] = x.values[j] + m_[j];
    }
    result.applied = true;
    return result;
  }

  std::uint64_t iteration() const { return k_; }
  const SpsaConfig& config() const { return config_; }
  std::span<const T> momentum() const { return m_; }

 private:
  SpsaConfig config_;
  std::vector<T> m_;
  std::uint64_t k_ = 0;
  Rng rng_;
};

/// Plain SPSA descent x <- x - a_k*g, sharing SpsaGc's schedule and RNG
/// stream. Kept as the reference SpsaGc must reduce to when beta = 0.
template <typename T>
class Spsa {
 public:
  Spsa(SpsaConfig config, std::size_t size) : config_(config), size_(size), rng_(config.seed) {}

  SpsaStepResult<T> step(ParamVector<T>& x, const LossFn<T>& loss) {
    if (x.size() != size_) throw Error(ErrorCode::invalid_shape, "SPSA parameter length mismatch");
    SpsaStepResult<T> result;
    result.step_size = config_.step_size(k_);
    result.perturbation = config_.perturbation(k_);
    const std::vector<int> d = rademacher(rng_, size_);
    SpsaEstimate<T> g = spsa_estimate(loss, x, d, result.perturbation);
    result.loss_plus = g.loss_plus;
    result.loss_minus = g.loss_minus;
    ++k_;
    if (!g.finite) return result;
    const T a = static_cast<T>(result.step_size);
    for (std::size_t j = 0; j < size_; ++j) x.values[j] = x.values[j] - a * g.gradient.values[j];
    result.applied = true;
    return result;
  }

 private:
  SpsaConfig config_;
  std::size_t size_;
  std::uint64_t k_ = 0;
  Rng rng_;
};

}  // namespace blackfed
