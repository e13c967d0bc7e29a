#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitsim/error.hpp"

namespace splitsim {

/// Dense row-major tensor of 64-bit floats.
///
/// The checked constructor rejects shape/size mismatches and non-finite values.
/// Kernels inside the library build results from `Tensor::zeros` and write
/// through `values()`, so intermediate arithmetic is not re-validated.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive");
    }
    if (element_count(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape product " +
                           std::to_string(element_count(shape_)));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw NumericError("tensor constructed with a non-finite value");
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    Tensor t;
    t.data_.assign(element_count(shape), 0.0);
    t.shape_ = std::move(shape);
    return t;
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    if (shape.empty()) return 0;
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : data_.size() / shape_[0]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const { return std::span<const double>(data_).subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Rows selected by index, in the given order.
  Tensor gather_rows(std::span<const std::size_t> indices) const {
    const std::size_t c = cols();
    std::vector<std::size_t> shape = shape_;
    shape[0] = indices.size();
    Tensor out = zeros(shape);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      std::memcpy(out.data_.data() + k * c, data_.data() + indices[k] * c, c * sizeof(double));
    }
    return out;
  }

  /// Bitwise equality, including shape. Distinguishes +0/-0 and NaN payloads.
  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Stacks 2-D tensors with equal column counts.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    rows += p.rows();
  }
  std::vector<std::size_t> shape = parts.front().shape();
  shape[0] = rows;
  Tensor out = Tensor::zeros(shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::memcpy(out.values().data() + offset, p.values().data(), p.size() * sizeof(double));
    offset += p.size();
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace splitsim
