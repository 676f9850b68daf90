#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "streamsynth/tape.hpp"

// Differentiable primitives. Every reduction runs left to right in index
// order so that results are bit-reproducible and independent of how many
// trailing rows a matrix has.

namespace streamsynth {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape == b.shape, std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " +
                                  shape_string(b.shape));
}

inline void require_matrix(const Tensor& a, const char* op) {
  require(a.rank() == 1 || a.rank() == 2, std::string(op) + ": expected rank 1 or 2, got " + shape_string(a.shape));
}

template <class Fwd, class Deriv>
Var elementwise_unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t k = 0; k < x.size(); ++k) out.data[k] = fwd(x.data[k]);
  const std::size_t ia = a.id;
  const std::size_t io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, deriv](Tape& t) {
    auto ga = t.grad(ia);
    if (ga.empty()) return;
    const auto& x = t.value(ia).data;
    const auto& y = t.value(io).data;
    auto go = t.grad(io);
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += go[k] * deriv(x[k], y[k]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t k = 0; k < x.size(); ++k) out.data[k] = x[k] + y[k];
  const std::size_t ia = a.id, ib = b.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a, b}, [ia, ib, io](Tape& t) {
    auto go = t.grad(io);
    for (std::size_t id : {ia, ib}) {
      auto g = t.grad(id);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += go[k];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t k = 0; k < x.size(); ++k) out.data[k] = x[k] - y[k];
  const std::size_t ia = a.id, ib = b.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a, b}, [ia, ib, io](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    auto gb = t.grad(ib);
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += go[k];
    for (std::size_t k = 0; k < gb.size(); ++k) gb[k] -= go[k];
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t k = 0; k < x.size(); ++k) out.data[k] = x[k] * y[k];
  const std::size_t ia = a.id, ib = b.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a, b}, [ia, ib, io](Tape& t) {
    auto go = t.grad(io);
    const auto& x = t.value(ia).data;
    const auto& y = t.value(ib).data;
    auto ga = t.grad(ia);
    auto gb = t.grad(ib);
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += go[k] * y[k];
    for (std::size_t k = 0; k < gb.size(); ++k) gb[k] += go[k] * x[k];
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// Multiplication by a scalar constant.
inline Var scale(Var a, double c) {
  return detail::elementwise_unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::elementwise_unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var relu(Var a) {
  return detail::elementwise_unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var silu(Var a) {
  return detail::elementwise_unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Var tanh(Var a) {
  return detail::elementwise_unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::elementwise_unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

/// log(sigmoid(x)), evaluated without overflow for large |x|.
inline Var log_sigmoid(Var a) {
  return detail::elementwise_unary(
      a, [](double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(x)); });
}

inline Var abs(Var a) {
  return detail::elementwise_unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// Applies `fn` on the forward pass and the identity on the backward pass.
template <class Fn>
Var straight_through(Var a, Fn fn) {
  return detail::elementwise_unary(
      a, [fn](double x) { return fn(x); }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(Tensor({1}, std::vector<double>{s}), {a}, [ia, io](Tape& t) {
    const double go = t.grad(io)[0];
    for (double& g : t.grad(ia)) g += go;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Matrix products and row-broadcast helpers
// ---------------------------------------------------------------------------

/// Standard matrix product. A rank-1 left operand is a single row and yields
/// a rank-1 result.
inline Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  detail::require_matrix(x, "matmul");
  detail::require(w.rank() == 2, "matmul: right operand must be rank 2, got " + shape_string(w.shape));
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  detail::require(w.rows() == k, "matmul: inner extents disagree " + shape_string(x.shape) + " x " +
                                     shape_string(w.shape));
  Tensor out(x.rank() == 1 ? Shape{n} : Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data.data() + i * n;
    const double* xr = x.data.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xr[p];
      const double* wr = w.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += xv * wr[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a, b}, [ia, ib, io, m, k, n](Tape& t) {
    const double* go = t.grad(io).data();
    const double* xd = t.value(ia).data.data();
    const double* wd = t.value(ib).data.data();
    auto ga = t.grad(ia);
    auto gb = t.grad(ib);
    if (!ga.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* wr = wd + p * n;
          const double* gr = go + i * n;
          for (std::size_t j = 0; j < n; ++j) s += gr[j] * wr[j];
          ga[i * k + p] += s;
        }
    }
    if (!gb.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = xd[i * k + p];
          double* gw = gb.data() + p * n;
          const double* gr = go + i * n;
          for (std::size_t j = 0; j < n; ++j) gw[j] += xv * gr[j];
        }
    }
  });
}

/// out[i, j] = a[i, j] + bias[j].
inline Var add_bias(Var a, Var bias) {
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  detail::require_matrix(x, "add_bias");
  detail::require(b.size() == x.cols(), "add_bias: bias of " + shape_string(b.shape) + " for input " +
                                            shape_string(x.shape));
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] = x.data[i * cols + j] + b.data[j];
  const std::size_t ia = a.id, ib = bias.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a, bias}, [ia, ib, io, rows, cols](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    auto gb = t.grad(ib);
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += go[k];
    if (!gb.empty())
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gb[j] += go[i * cols + j];
  });
}

/// Repeats a rank-1 tensor of extent F into an [rows, F] matrix.
inline Var broadcast_rows(Var v, std::size_t rows) {
  const Tensor& x = v.value();
  const std::size_t cols = x.size();
  detail::require(rows > 0, "broadcast_rows: zero rows");
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) std::copy(x.data.begin(), x.data.end(), out.data.begin() + i * cols);
  const std::size_t iv = v.id, io = v.tape->num_nodes();
  return v.tape->record(std::move(out), {v}, [iv, io, rows, cols](Tape& t) {
    auto go = t.grad(io);
    auto gv = t.grad(iv);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) gv[j] += go[i * cols + j];
  });
}

/// Each input row is repeated `factor` times consecutively (nearest-neighbour upsampling).
inline Var repeat_rows(Var a, std::size_t factor) {
  const Tensor& x = a.value();
  detail::require(x.rank() == 2 && factor > 0, "repeat_rows: expected rank 2 input and positive factor");
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out({rows * factor, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t r = 0; r < factor; ++r)
      std::copy(x.data.begin() + i * cols, x.data.begin() + (i + 1) * cols, out.data.begin() + (i * factor + r) * cols);
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, rows, cols, factor](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t r = 0; r < factor; ++r)
        for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += go[(i * factor + r) * cols + j];
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  detail::require(x.rank() == 2 && begin < end && end <= x.rows(), "slice_rows: bad range");
  const std::size_t cols = x.cols();
  Tensor out({end - begin, cols},
             std::vector<double>(x.data.begin() + begin * cols, x.data.begin() + end * cols));
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, begin, cols](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    for (std::size_t k = 0; k < go.size(); ++k) ga[begin * cols + k] += go[k];
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "slice_cols");
  detail::require(begin < end && end <= x.cols(), "slice_cols: bad range");
  const std::size_t rows = x.rows(), cols = x.cols(), width = end - begin;
  Tensor out(x.rank() == 1 ? Shape{width} : Shape{rows, width});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < width; ++j) out.data[i * width + j] = x.data[i * cols + begin + j];
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, rows, cols, begin, width](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < width; ++j) ga[i * cols + begin + j] += go[i * width + j];
  });
}

/// Horizontal concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    detail::require(p.value().rank() == 2 && p.rows() == rows, "concat_cols: row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (std::size_t n = 0; n < parts.size(); ++n) {
    const Tensor& x = parts[n].value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < widths[n]; ++j) out.data[i * total + offset + j] = x.data[i * widths[n] + j];
    offset += widths[n];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  const std::size_t io = parts.front().tape->num_nodes();
  return parts.front().tape->record(std::move(out), parts, [ids, widths, io, rows, total](Tape& t) {
    auto go = t.grad(io);
    std::size_t offset = 0;
    for (std::size_t n = 0; n < ids.size(); ++n) {
      auto g = t.grad(ids[n]);
      if (!g.empty())
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < widths[n]; ++j) g[i * widths[n] + j] += go[i * total + offset + j];
      offset += widths[n];
    }
  });
}

/// Zeroes rows [start, rows). Masked rows pass no gradient back.
inline Var zero_rows_from(Var a, std::size_t start) {
  const Tensor& x = a.value();
  detail::require(x.rank() == 2, "zero_rows_from: expected rank 2");
  const std::size_t cols = x.cols();
  const std::size_t keep = std::min(start, x.rows()) * cols;
  Tensor out(x.shape);
  std::copy(x.data.begin(), x.data.begin() + keep, out.data.begin());
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, keep](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    for (std::size_t k = 0; k < keep; ++k) ga[k] += go[k];
  });
}

// ---------------------------------------------------------------------------
// Normalisation, softmax, lookups
// ---------------------------------------------------------------------------

/// Softmax along `axis` (0 or 1 for matrices; 0 for vectors).
inline Var softmax(Var a, std::size_t axis = 1) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "softmax");
  const bool vec = x.rank() == 1;
  detail::require(vec ? axis == 0 : axis <= 1, "softmax: axis out of range");
  const std::size_t rows = x.rows(), cols = x.cols();
  // Iterate over lines of length `len` with element stride `stride`.
  const bool along_rows = vec || axis == 1;
  const std::size_t lines = along_rows ? rows : cols;
  const std::size_t len = along_rows ? cols : rows;
  const std::size_t stride = along_rows ? 1 : cols;
  const std::size_t step = along_rows ? cols : 1;
  Tensor out(x.shape);
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x.data[base + k * stride]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(x.data[base + k * stride] - mx);
      out.data[base + k * stride] = e;
      z += e;
    }
    for (std::size_t k = 0; k < len; ++k) out.data[base + k * stride] /= z;
  }
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, lines, len, stride, step](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    const auto& y = t.value(io).data;
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * step;
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += go[base + k * stride] * y[base + k * stride];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t idx = base + k * stride;
        ga[idx] += y[idx] * (go[idx] - dot);
      }
    }
  });
}

/// Row-wise log-softmax.
inline Var log_softmax(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "log_softmax");
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x.data.data() + i * cols;
    double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(xr[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] = xr[j] - lz;
  }
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, rows, cols](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    const auto& y = t.value(io).data;
    for (std::size_t i = 0; i < rows; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < cols; ++j) gs += go[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += go[i * cols + j] - std::exp(y[i * cols + j]) * gs;
    }
  });
}

/// out[i] = a[i, index[i]].
inline Var pick(Var a, const std::vector<std::size_t>& index) {
  const Tensor& x = a.value();
  detail::require(x.rank() == 2 && index.size() == x.rows(), "pick: one index per row required");
  const std::size_t cols = x.cols();
  Tensor out({index.size()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= cols) throw RangeError("pick: index " + std::to_string(index[i]) + " out of range");
    out.data[i] = x.data[i * cols + index[i]];
  }
  const std::size_t ia = a.id, io = a.tape->num_nodes();
  return a.tape->record(std::move(out), {a}, [ia, io, index, cols](Tape& t) {
    auto go = t.grad(io);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < index.size(); ++i) ga[i * cols + index[i]] += go[i];
  });
}

/// Per-row normalisation to zero mean / unit variance, then gain and bias.
inline Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "layer_norm");
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::require(gain.size() == cols && bias.size() == cols, "layer_norm: gain/bias extent mismatch");
  const auto& g = gain.value().data;
  const auto& b = bias.value().data;
  Tensor out(x.shape);
  std::vector<double> xhat(x.size()), inv_std(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x.data.data() + i * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(cols);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      const double h = (xr[j] - mu) * inv_std[i];
      xhat[i * cols + j] = h;
      out.data[i * cols + j] = h * g[j] + b[j];
    }
  }
  const std::size_t ia = a.id, ig = gain.id, ib = bias.id, io = a.tape->num_nodes();
  return a.tape->record(
      std::move(out), {a, gain, bias},
      [ia, ig, ib, io, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t) {
        auto go = t.grad(io);
        auto ga = t.grad(ia);
        auto gg = t.grad(ig);
        auto gb = t.grad(ib);
        const auto& g = t.value(ig).data;
        const double n = static_cast<double>(cols);
        for (std::size_t i = 0; i < rows; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t k = i * cols + j;
            if (!gg.empty()) gg[j] += go[k] * xhat[k];
            if (!gb.empty()) gb[j] += go[k];
            const double dh = go[k] * g[j];
            s1 += dh;
            s2 += dh * xhat[k];
          }
          if (ga.empty()) continue;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t k = i * cols + j;
            const double dh = go[k] * g[j];
            ga[k] += inv_std[i] * (dh - s1 / n - xhat[k] * s2 / n);
          }
        }
      });
}

/// Gathers rows of `table` ([V, F]) by id.
inline Var embedding(Var table, const std::vector<std::size_t>& ids) {
  const Tensor& w = table.value();
  detail::require(w.rank() == 2, "embedding: table must be rank 2");
  detail::require(!ids.empty(), "embedding: empty id list");
  const std::size_t cols = w.cols();
  Tensor out({ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= w.rows())
      throw RangeError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(w.rows()));
    std::copy(w.data.begin() + ids[i] * cols, w.data.begin() + (ids[i] + 1) * cols, out.data.begin() + i * cols);
  }
  const std::size_t it = table.id, io = table.tape->num_nodes();
  return table.tape->record(std::move(out), {table}, [it, io, ids, cols](Tape& t) {
    auto go = t.grad(io);
    auto gt = t.grad(it);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < cols; ++j) gt[ids[i] * cols + j] += go[i * cols + j];
  });
}

/// Right-padded 1-D convolution over rows.
///
/// `weight` has shape [kernel_size * F_in, F_out] laid out tap-major, so
/// out[i] = bias + sum_k x[i + k] * W_k with rows past the end read as zero.
/// Output row i therefore depends only on x[i .. i + pad].
inline Var conv1d_right_padded(Var x, Var weight, Var bias, std::size_t kernel_size, std::size_t pad) {
  const Tensor& in = x.value();
  const Tensor& w = weight.value();
  detail::require(kernel_size == pad + 1, "conv1d_right_padded: kernel size must equal pad + 1");
  detail::require(in.rank() == 2, "conv1d_right_padded: input must be [L, F]");
  const std::size_t len = in.rows(), fin = in.cols();
  detail::require(w.rank() == 2 && w.rows() == kernel_size * fin,
                  "conv1d_right_padded: weight must be [kernel * F_in, F_out], got " + shape_string(w.shape));
  const std::size_t fout = w.cols();
  detail::require(bias.size() == fout, "conv1d_right_padded: bias extent mismatch");
  Tensor out({len, fout});
  const auto& b = bias.value().data;
  for (std::size_t i = 0; i < len; ++i) {
    double* o = out.data.data() + i * fout;
    for (std::size_t j = 0; j < fout; ++j) o[j] = b[j];
    for (std::size_t k = 0; k < kernel_size && i + k < len; ++k) {
      const double* xr = in.data.data() + (i + k) * fin;
      for (std::size_t f = 0; f < fin; ++f) {
        const double xv = xr[f];
        const double* wr = w.data.data() + (k * fin + f) * fout;
        for (std::size_t j = 0; j < fout; ++j) o[j] += xv * wr[j];
      }
    }
  }
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id, io = x.tape->num_nodes();
  return x.tape->record(std::move(out), {x, weight, bias}, [ix, iw, ib, io, len, fin, fout, kernel_size](Tape& t) {
    auto go = t.grad(io);
    auto gx = t.grad(ix);
    auto gw = t.grad(iw);
    auto gb = t.grad(ib);
    const auto& in = t.value(ix).data;
    const auto& w = t.value(iw).data;
    for (std::size_t i = 0; i < len; ++i) {
      const double* g = go.data() + i * fout;
      if (!gb.empty())
        for (std::size_t j = 0; j < fout; ++j) gb[j] += g[j];
      for (std::size_t k = 0; k < kernel_size && i + k < len; ++k)
        for (std::size_t f = 0; f < fin; ++f) {
          const std::size_t row = k * fin + f;
          const double* wr = w.data() + row * fout;
          double s = 0.0;
          for (std::size_t j = 0; j < fout; ++j) {
            s += g[j] * wr[j];
            if (!gw.empty()) gw[row * fout + j] += in[(i + k) * fin + f] * g[j];
          }
          if (!gx.empty()) gx[(i + k) * fin + f] += s;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses and attention
// ---------------------------------------------------------------------------

/// Mean negative log-softmax over the positions whose ignore flag is false.
/// Ignored positions contribute neither loss nor gradient.
inline Var cross_entropy_ignore(Var logits, const std::vector<std::size_t>& targets, const std::vector<bool>& ignore) {
  const Tensor& x = logits.value();
  detail::require(x.rank() == 2, "cross_entropy_ignore: logits must be [L, V]");
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::require(targets.size() == rows && ignore.size() == rows,
                  "cross_entropy_ignore: targets/ignore length must equal L");
  std::size_t active = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (ignore[i]) continue;
    if (targets[i] >= cols) throw RangeError("cross_entropy_ignore: target " + std::to_string(targets[i]) + " out of vocabulary");
    ++active;
  }
  if (active == 0) throw EmptyLossError("cross_entropy_ignore: every position is ignored");
  std::vector<double> probs(x.size(), 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (ignore[i]) continue;
    const double* xr = x.data.data() + i * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(xr[j] - mx);
    for (std::size_t j = 0; j < cols; ++j) probs[i * cols + j] = std::exp(xr[j] - mx) / z;
    loss += -(xr[targets[i]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(active);
  const std::size_t ia = logits.id, io = logits.tape->num_nodes();
  return logits.tape->record(
      Tensor({1}, std::vector<double>{loss * inv}), {logits},
      [ia, io, rows, cols, inv, targets, ignore, probs = std::move(probs)](Tape& t) {
        const double go = t.grad(io)[0] * inv;
        auto ga = t.grad(ia);
        for (std::size_t i = 0; i < rows; ++i) {
          if (ignore[i]) continue;
          for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += go * probs[i * cols + j];
          ga[i * cols + targets[i]] -= go;
        }
      });
}

/// Single-head scaled dot-product attention restricted by `mask`.
///
/// Disallowed pairs are excluded from the softmax (equivalent to an additive
/// -inf score); a row with no allowed column is an error.
inline Var masked_attention(Var q, Var k, Var v, const BoolMatrix& mask) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  detail::require(Q.rank() == 2 && K.rank() == 2 && V.rank() == 2, "masked_attention: inputs must be rank 2");
  const std::size_t len = Q.rows(), dk = Q.cols(), dv = V.cols();
  detail::require(K.rows() == len && V.rows() == len && K.cols() == dk, "masked_attention: shape mismatch");
  detail::require(mask.n == len, "masked_attention: mask is " + std::to_string(mask.n) + "x" + std::to_string(mask.n) +
                                     " for length " + std::to_string(len));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> probs(len * len, 0.0);
  Tensor out({len, dv});
  for (std::size_t i = 0; i < len; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < len; ++j) {
      if (!mask(i, j)) continue;
      double s = 0.0;
      for (std::size_t f = 0; f < dk; ++f) s += Q.data[i * dk + f] * K.data[j * dk + f];
      s *= scale;
      probs[i * len + j] = s;
      mx = any ? std::max(mx, s) : s;
      any = true;
    }
    if (!any) throw DimensionError("masked_attention: row " + std::to_string(i) + " has no allowed positions");
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      if (!mask(i, j)) continue;
      const double e = std::exp(probs[i * len + j] - mx);
      probs[i * len + j] = e;
      z += e;
    }
    double* o = out.data.data() + i * dv;
    for (std::size_t j = 0; j < len; ++j) {
      if (!mask(i, j)) continue;
      const double p = probs[i * len + j] / z;
      probs[i * len + j] = p;
      for (std::size_t f = 0; f < dv; ++f) o[f] += p * V.data[j * dv + f];
    }
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id, io = q.tape->num_nodes();
  return q.tape->record(std::move(out), {q, k, v},
                        [iq, ik, iv, io, len, dk, dv, scale, mask, probs = std::move(probs)](Tape& t) {
                          auto go = t.grad(io);
                          auto gq = t.grad(iq);
                          auto gk = t.grad(ik);
                          auto gv = t.grad(iv);
                          const auto& Q = t.value(iq).data;
                          const auto& K = t.value(ik).data;
                          const auto& V = t.value(iv).data;
                          std::vector<double> dp(len);
                          for (std::size_t i = 0; i < len; ++i) {
                            const double* g = go.data() + i * dv;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < len; ++j) {
                              if (!mask(i, j)) continue;
                              const double p = probs[i * len + j];
                              double s = 0.0;
                              for (std::size_t f = 0; f < dv; ++f) {
                                s += g[f] * V[j * dv + f];
                                if (!gv.empty()) gv[j * dv + f] += p * g[f];
                              }
                              dp[j] = s;
                              dot += p * s;
                            }
                            for (std::size_t j = 0; j < len; ++j) {
                              if (!mask(i, j)) continue;
                              const double ds = probs[i * len + j] * (dp[j] - dot) * scale;
                              for (std::size_t f = 0; f < dk; ++f) {
                                if (!gq.empty()) gq[i * dk + f] += ds * K[j * dk + f];
                                if (!gk.empty()) gk[j * dk + f] += ds * Q[i * dk + f];
                              }
                            }
                          }
                        });
}

}  // namespace streamsynth
