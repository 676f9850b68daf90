#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "streamsynth/tape.hpp"

namespace streamsynth {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error between an analytic and a numeric derivative. Magnitudes
/// below `floor` are measured against `floor`, so derivatives that are zero
/// on both routes compare as exact.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / scale;
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` records a scalar loss on the given tape from the current values
/// of `tensors`; it is re-run once for the analytic pass and twice per checked
/// element. When `max_per_tensor` is nonzero only that many evenly spaced
/// elements of each tensor are perturbed.
inline GradCheckReport check_gradients(const std::function<Var(Tape&)>& loss_fn, std::span<Tensor* const> tensors,
                                       double step = 1e-4, std::size_t max_per_tensor = 0) {
  for (Tensor* t : tensors) t->grad.assign(t->size(), 0.0);
  {
    Tape tape;
    tape.backward(loss_fn(tape));
  }
  std::vector<std::vector<double>> analytic;
  for (Tensor* t : tensors) analytic.push_back(t->grad);

  auto evaluate = [&] {
    Tape tape;
    return loss_fn(tape).item();
  };

  GradCheckReport report;
  for (std::size_t n = 0; n < tensors.size(); ++n) {
    Tensor& t = *tensors[n];
    const std::size_t count = t.size();
    const std::size_t stride = (max_per_tensor == 0 || count <= max_per_tensor) ? 1 : count / max_per_tensor;
    for (std::size_t k = 0; k < count; k += stride) {
      const double saved = t.data[k];
      t.data[k] = saved + step;
      const double up = evaluate();
      t.data[k] = saved - step;
      const double down = evaluate();
      t.data[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[n][k], numeric);
      ++report.checked;
      if (err > report.max_relative_error || report.checked == 1) {
        report.max_relative_error = err;
        report.worst_tensor = n;
        report.worst_index = k;
        report.worst_analytic = analytic[n][k];
        report.worst_numeric = numeric;
      }
    }
  }
  for (Tensor* t : tensors) t->zero_grad();
  return report;
}

/// Convenience form for a function of a single input point: perturbs a copy
/// of `point` and returns the max relative error.
inline double check_gradients(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double step = 1e-4) {
  Tensor x = Tensor::parameter(point);
  Tensor* ptrs[] = {&x};
  return check_gradients([&](Tape& tape) { return f(tape, tape.param(x)); }, ptrs, step).max_relative_error;
}

}  // namespace streamsynth
