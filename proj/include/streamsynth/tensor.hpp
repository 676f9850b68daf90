#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "streamsynth/error.hpp"

namespace streamsynth {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Only rank 1 and rank 2 tensors are used by the models. A rank-1 tensor of
/// extent n is treated as a 1 x n row where a matrix view is needed.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {
    for (auto extent : shape)
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != data.size())
      throw DimensionError("shape " + shape_string(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor ones(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}, 1.0); }
  static Tensor vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
  }

  template <class Rng>
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.data) x = dist(rng);
    return t;
  }

  /// Trainable parameter: gradient buffer allocated and zeroed.
  static Tensor parameter(Tensor t) {
    t.requires_grad = true;
    t.grad.assign(t.data.size(), 0.0);
    return t;
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  bool has_grad() const { return !grad.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  bool all_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

/// Square boolean matrix; entry (i, j) true means row i may attend column j.
struct BoolMatrix {
  std::size_t n = 0;
  std::vector<char> cells;

  BoolMatrix() = default;
  explicit BoolMatrix(std::size_t size, bool fill = false) : n(size), cells(size * size, fill ? 1 : 0) {}

  bool operator()(std::size_t i, std::size_t j) const { return cells[i * n + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { cells[i * n + j] = v ? 1 : 0; }

  /// True when every allowed pair of this matrix is also allowed in `other`.
  bool subset_of(const BoolMatrix& other) const {
    if (other.n != n) return false;
    for (std::size_t k = 0; k < cells.size(); ++k)
      if (cells[k] && !other.cells[k]) return false;
    return true;
  }

  friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;
};

}  // namespace streamsynth
