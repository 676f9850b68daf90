#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "streamsynth/cfm/model.hpp"
#include "streamsynth/fsq.hpp"

namespace streamsynth::cfm {

/// V-statistic energy distance between two point sets (rows):
/// 2 E|X - Y| - E|X - X'| - E|Y - Y'|, with self-pairs included.
inline double energy_distance(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw DimensionError("energy_distance: point dimensions differ");
  auto mean_dist = [](const Tensor& p, const Tensor& q) {
    double total = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < q.rows(); ++j) {
        double d = 0.0;
        for (std::size_t f = 0; f < p.cols(); ++f) {
          const double diff = p(i, f) - q(j, f);
          d += diff * diff;
        }
        row += std::sqrt(d);
      }
      total += row;
    }
    return total / (static_cast<double>(p.rows()) * static_cast<double>(q.rows()));
  };
  return 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
}

/// Two interleaved half circles with Gaussian noise, tokenized like a
/// speech frame: the point is scaled by 1/cell around the data centre and
/// quantized per dimension with bounded rounding, so each token is a grid
/// cell with index encode_index(digits, K).
struct TwoMoons {
  double noise = 0.1;
  double cell = 0.2;
  int bound = 0;  // 0: smallest K covering the noiseless moons plus 4 noise deviations

  static constexpr double kCentreX = 0.5, kCentreY = 0.25;

  int grid_bound() const {
    if (bound > 0) return bound;
    const double reach = std::max(1.5, 0.75) + 4.0 * noise;
    return static_cast<int>(std::ceil(reach / cell));
  }
  std::size_t vocab() const {
    const std::size_t r = 2 * static_cast<std::size_t>(grid_bound()) + 1;
    return r * r;
  }

  std::array<double, 2> draw(Rng& rng) const {
    std::normal_distribution<double> n(0.0, noise);
    const bool upper = std::uniform_int_distribution<int>(0, 1)(rng) == 0;
    const double angle = std::numbers::pi * uniform01(rng);
    const double x = upper ? std::cos(angle) : 1.0 - std::cos(angle);
    const double y = upper ? std::sin(angle) : 0.5 - std::sin(angle);
    const double nx = n(rng), ny = n(rng);
    return {x + nx, y + ny};
  }

  std::size_t token(const std::array<double, 2>& p) const {
    const int k = grid_bound();
    const int digits[2] = {fsq::bounded_round((p[0] - kCentreX) / cell, k), fsq::bounded_round((p[1] - kCentreY) / cell, k)};
    return fsq::encode_index(digits, k).value;
  }

  /// `count` points as rows of a [count, 2] tensor.
  Tensor points(std::size_t count, Rng& rng) const {
    Tensor out({count, 2});
    for (std::size_t i = 0; i < count; ++i) {
      const auto p = draw(rng);
      out(i, 0) = p[0];
      out(i, 1) = p[1];
    }
    return out;
  }

  /// `tokens` tokenized target points. Frame 2i is the point itself and
  /// frame 2i+1 another target point drawn until it falls in the same cell.
  Example example(std::size_t tokens, std::size_t speaker_dim, Rng& rng) const {
    Example ex{std::vector<std::size_t>(tokens), Tensor({speaker_dim}), Tensor({kUpsample * tokens, 2})};
    for (std::size_t i = 0; i < tokens; ++i) {
      const auto p = draw(rng);
      ex.tokens[i] = token(p);
      auto q = draw(rng);
      while (token(q) != ex.tokens[i]) q = draw(rng);
      ex.x1(2 * i, 0) = p[0];
      ex.x1(2 * i, 1) = p[1];
      ex.x1(2 * i + 1, 0) = q[0];
      ex.x1(2 * i + 1, 1) = q[1];
    }
    return ex;
  }
};

/// Deterministic per-token base frame: e(mu)_f = sin(0.37 (mu + 1)(f + 1) + 0.5 f).
inline std::vector<double> token_frame(std::size_t token, std::size_t feature_dim) {
  std::vector<double> out(feature_dim);
  for (std::size_t f = 0; f < feature_dim; ++f)
    out[f] = std::sin(0.37 * static_cast<double>(token + 1) * static_cast<double>(f + 1) + 0.5 * static_cast<double>(f));
  return out;
}

/// Toy acoustic features for a token sequence and speaker vector v: frame 2i
/// is e(mu_i), frame 2i+1 is halfway to e(mu_{i+1}) (so features look one
/// token ahead), and feature f is mapped by (1 + 0.3 tanh(v_g)) x + 0.3 v_g
/// with g = f mod dim(v).
inline Tensor toy_features(std::span<const std::size_t> tokens, const Tensor& speaker, std::size_t feature_dim) {
  if (tokens.empty()) throw DimensionError("toy_features: empty token sequence");
  if (speaker.size() == 0) throw DimensionError("toy_features: empty speaker vector");
  Tensor out({kUpsample * tokens.size(), feature_dim});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto here = token_frame(tokens[i], feature_dim);
    const auto next = token_frame(tokens[i + 1 < tokens.size() ? i + 1 : i], feature_dim);
    for (std::size_t f = 0; f < feature_dim; ++f) {
      const double v = speaker.data[f % speaker.size()];
      const double a = 1.0 + 0.3 * std::tanh(v), b = 0.3 * v;
      out(2 * i, f) = a * here[f] + b;
      out(2 * i + 1, f) = a * 0.5 * (here[f] + next[f]) + b;
    }
  }
  return out;
}

}  // namespace streamsynth::cfm
