#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "splitsim/error.hpp"
#include "splitsim/tensor.hpp"

namespace splitsim {

/// counts(t, p): samples of true class t predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  static ConfusionMatrix from_counts(std::size_t classes, std::vector<std::uint64_t> counts) {
    if (counts.size() != classes * classes) throw DimensionError("confusion matrix needs C*C counts");
    ConfusionMatrix cm(classes);
    cm.counts_ = std::move(counts);
    return cm;
  }

  void add(int truth, int predicted, std::uint64_t n = 1) {
    counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(predicted)] += n;
  }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw DimensionError("confusion matrix class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t correct() const {
    std::uint64_t c = 0;
    for (std::size_t k = 0; k < classes_; ++k) c += at(k, k);
    return c;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

inline double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw Error("accuracy of an empty confusion matrix is undefined");
  return static_cast<double>(cm.correct()) / static_cast<double>(n);
}

/// Unweighted mean of per-class F1; a class with 2TP+FP+FN == 0 scores 0.
inline double macro_f1(const ConfusionMatrix& cm) {
  const std::size_t C = cm.classes();
  if (C < 2) throw Error("macro F1 needs at least two classes");
  if (cm.total() == 0) throw Error("macro F1 of an empty confusion matrix is undefined");
  double sum = 0.0;
  for (std::size_t k = 0; k < C; ++k) {
    double tp = static_cast<double>(cm.at(k, k)), fp = 0.0, fn = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      if (j == k) continue;
      fp += static_cast<double>(cm.at(j, k));
      fn += static_cast<double>(cm.at(k, j));
    }
    const double denom = 2.0 * tp + fp + fn;
    sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  return sum / static_cast<double>(C);
}

/// Multiclass Matthews correlation (covariance form); 0 when the denominator vanishes.
inline double mcc(const ConfusionMatrix& cm) {
  const std::size_t C = cm.classes();
  if (C < 2) throw Error("MCC needs at least two classes");
  const double s = static_cast<double>(cm.total());
  const double c = static_cast<double>(cm.correct());
  double pt = 0.0, pp = 0.0, tt = 0.0;
  for (std::size_t k = 0; k < C; ++k) {
    double t_k = 0.0, p_k = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      t_k += static_cast<double>(cm.at(k, j));
      p_k += static_cast<double>(cm.at(j, k));
    }
    pt += p_k * t_k;
    pp += p_k * p_k;
    tt += t_k * t_k;
  }
  const double denom = std::sqrt(s * s - pp) * std::sqrt(s * s - tt);
  if (!(denom > 0.0)) return 0.0;
  return (c * s - pt) / denom;
}

/// Welford accumulator of per-batch cut-gradient norms (sample std).
class GradNormStats {
 public:
  void push(double norm) {
    ++count_;
    const double delta = norm - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta * (norm - mean_);
  }

  void merge(const GradNormStats& o) {
    if (o.count_ == 0) return;
    if (count_ == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(count_ + o.count_);
    const double delta = o.mean_ - mean_;
    mean_ += delta * static_cast<double>(o.count_) / n;
    m2_ += o.m2_ + delta * delta * static_cast<double>(count_) * static_cast<double>(o.count_) / n;
    count_ += o.count_;
  }

  std::size_t count() const noexcept { return count_; }
  double mean() const noexcept { return count_ ? mean_ : std::numeric_limits<double>::quiet_NaN(); }

  /// Sample standard deviation; absent below two observations.
  std::optional<double> stddev() const {
    if (count_ < 2) return std::nullopt;
    return std::sqrt(std::max(0.0, m2_ / static_cast<double>(count_ - 1)));
  }

 private:
  std::size_t count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

/// L2 norm of the batch-mean per-sample cut gradient. Rows of a cut gradient
/// for a batch-mean loss are per-sample gradients divided by B, so the
/// batch-mean per-sample gradient is their column sum.
inline double batch_mean_grad_norm(const Tensor& d_features) {
  double sq = 0.0;
  for (std::size_t c = 0; c < d_features.cols(); ++c) {
    double col = 0.0;
    for (std::size_t r = 0; r < d_features.rows(); ++r) col += d_features.at(r, c);
    sq += col * col;
  }
  return std::sqrt(sq);
}

inline GradNormStats& grad_norm_accumulate(GradNormStats& stats, const Tensor& d_features) {
  stats.push(batch_mean_grad_norm(d_features));
  return stats;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std, 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  r.n = xs.size();
  if (xs.empty()) {
    r.mean = r.std = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  double sum = 0.0;
  for (double v : xs) sum += v;
  r.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double v : xs) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

}  // namespace splitsim
