#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "blackfed/common.hpp"
#include "blackfed/tensor.hpp"

namespace blackfed {

/// Per-class TP/FP/FN counts. mIoU averages IoU over classes that occur in
/// the ground truth or the prediction; classes absent from both are skipped.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t num_classes)
      : tp_(num_classes, 0), fp_(num_classes, 0), fn_(num_classes, 0) {
    if (num_classes == 0) throw Error(ErrorCode::invalid_argument, "confusion needs at least one class");
  }

  void add(const Labels& pred, const Labels& gt) {
    if (pred.shape() != gt.shape()) {
      throw Error(ErrorCode::invalid_argument,
                  "prediction " + shape_string(pred.shape()) + " vs ground truth " + shape_string(gt.shape()));
    }
    const std::size_t nc = tp_.size();
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const std::size_t p = pred[i], g = gt[i];
      if (p >= nc || g >= nc) {
        throw Error(ErrorCode::invalid_label, "class index outside [0, " + std::to_string(nc) + ") at pixel " +
                                                  std::to_string(i));
      }
      if (p == g) {
        ++tp_[g];
      } else {
        ++fp_[p];
        ++fn_[g];
      }
    }
  }

  void merge(const ConfusionAccumulator& other) {
    if (other.tp_.size() != tp_.size()) throw Error(ErrorCode::invalid_argument, "class count mismatch in merge");
    for (std::size_t c = 0; c < tp_.size(); ++c) {
      tp_[c] += other.tp_[c];
      fp_[c] += other.fp_[c];
      fn_[c] += other.fn_[c];
    }
  }

  /// Empty when no pixel has been accumulated.
  std::optional<double> miou() const {
    double sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < tp_.size(); ++c) {
      const std::uint64_t denom = tp_[c] + fp_[c] + fn_[c];
      if (denom == 0) continue;
      sum += static_cast<double>(tp_[c]) / static_cast<double>(denom);
      ++present;
    }
    if (present == 0) return std::nullopt;
    return sum / static_cast<double>(present);
  }

  std::size_t num_classes() const { return tp_.size(); }
  std::uint64_t tp(std::size_t c) const { return tp_.at(c); }
  std::uint64_t fp(std::size_t c) const { return fp_.at(c); }
  std::uint64_t fn(std::size_t c) const { return fn_.at(c); }

  friend bool operator==(const ConfusionAccumulator&, const ConfusionAccumulator&) = default;

 private:
  std::vector<std::uint64_t> tp_, fp_, fn_;
};

inline double miou(const Labels& pred, const Labels& gt, std::size_t num_classes) {
  ConfusionAccumulator acc(num_classes);
  acc.add(pred, gt);
  auto v = acc.miou();
  if (!v) throw Error(ErrorCode::invalid_argument, "mIoU of an empty mask");
  return *v;
}

/// N x N grid: miou[i][k] is the configuration trained for client i scored on
/// client k's test split. Single-model modes only fill the diagonal.
class EvalMatrix {
 public:
  EvalMatrix() = default;
  explicit EvalMatrix(std::size_t n) : n_(n), cells_(n * n) {}

  std::size_t size() const { return n_; }

  void set(std::size_t i, std::size_t k, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::invalid_argument, "mIoU outside [0,1]");
    cells_.at(i * n_ + k) = v;
  }
  const std::optional<double>& at(std::size_t i, std::size_t k) const { return cells_.at(i * n_ + k); }

  std::optional<double> local(std::size_t i) const { return at(i, i); }

  /// Mean over k != i of populated cells; empty when none exist.
  std::optional<double> ood(std::size_t i) const {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < n_; ++k) {
      if (k == i || !at(i, k)) continue;
      sum += *at(i, k);
      ++count;
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  }

  std::optional<double> mean_local() const { return mean_of([this](std::size_t i) { return local(i); }); }
  std::optional<double> mean_ood() const { return mean_of([this](std::size_t i) { return ood(i); }); }

  /// Mean of every populated cell.
  std::optional<double> mean_all() const {
    double sum = 0;
    std::size_t count = 0;
    for (const auto& c : cells_) {
      if (c) {
        sum += *c;
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  }

  bool complete(bool diagonal_only) const {
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t k = 0; k < n_; ++k) {
        if ((i == k || !diagonal_only) && !at(i, k)) return false;
      }
    }
    return true;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "trained_for";
    for (std::size_t k = 0; k < n_; ++k) os << ",test_" << k;
    os << '\n';
    for (std::size_t i = 0; i < n_; ++i) {
      os << i;
      for (std::size_t k = 0; k < n_; ++k) {
        os << ',';
        if (at(i, k)) os << format(*at(i, k));
      }
      os << '\n';
    }
    return os.str();
  }

  std::string summary_csv() const {
    std::ostringstream os;
    os << "client,local,ood\n";
    for (std::size_t i = 0; i < n_; ++i) {
      os << i << ',';
      if (local(i)) os << format(*local(i));
      os << ',';
      if (ood(i)) os << format(*ood(i));
      os << '\n';
    }
    return os.str();
  }

  static std::string format(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  }

  friend bool operator==(const EvalMatrix&, const EvalMatrix&) = default;

 private:
  template <typename F>
  std::optional<double> mean_of(F f) const {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (auto v = f(i)) {
        sum += *v;
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  }

  std::size_t n_ = 0;
  std::vector<std::optional<double>> cells_;
};

/// Fills an EvalMatrix from `score(i, k)`, which yields the mIoU of the
/// configuration trained for client i on client k's test split, or nothing
/// when that split is unavailable.
template <typename Score>
EvalMatrix assemble_eval_matrix(std::size_t n, bool diagonal_only, Score&& score) {
  EvalMatrix m(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      if (diagonal_only && i != k) continue;
      std::optional<double> v = score(i, k);
      if (v) m.set(i, k, *v);
    }
  }
  return m;
}

}  // namespace blackfed
