#pragma once

#include <cmath>
#include <numbers>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "streamsynth/ops.hpp"
#include "streamsynth/rng.hpp"

namespace streamsynth {

/// Ordered, named view over the trainable tensors of a model. Declaration
/// order is the checkpoint order.
class ParameterSet {
 public:
  void add(std::string name, Tensor& t) { entries_.emplace_back(std::move(name), &t); }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Tensor& operator[](std::size_t i) const { return *entries_[i].second; }

  std::vector<Tensor*> tensors() const {
    std::vector<Tensor*> out;
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second->size();
    return n;
  }

  void zero_grad() const {
    for (const auto& e : entries_) e.second->grad.assign(e.second->size(), 0.0);
  }

  /// Order-sensitive FNV-1a digest of every parameter bit pattern.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries_)
      for (double x : e.second->data) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof bits);
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xffU;
          h *= 0x100000001b3ULL;
        }
      }
    return h;
  }

 private:
  std::vector<std::pair<std::string, Tensor*>> entries_;
};

/// y = x W + b with W of shape [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;
  bool has_bias = true;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true, double gain = 1.0)
      : weight(Tensor::parameter(Tensor::randn({in, out}, rng, gain / std::sqrt(static_cast<double>(in))))),
        bias(Tensor::parameter(Tensor({out}))),
        has_bias(with_bias) {}

  Var operator()(Tape& tape, Var x, bool train = true) {
    Var y = matmul(x, tape.use(weight, train));
    if (!has_bias) return y;
    if (y.value().rank() == 1) {
      return add(y, tape.use(bias, train));
    }
    return add_bias(y, tape.use(bias, train));
  }

  void collect(ParameterSet& ps, const std::string& prefix) {
    ps.add(prefix + ".weight", weight);
    if (has_bias) ps.add(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim)
      : gain(Tensor::parameter(Tensor({dim}, 1.0))), bias(Tensor::parameter(Tensor({dim}))) {}

  Var operator()(Tape& tape, Var x, bool train = true) {
    return layer_norm(x, tape.use(gain, train), tape.use(bias, train));
  }

  void collect(ParameterSet& ps, const std::string& prefix) {
    ps.add(prefix + ".gain", gain);
    ps.add(prefix + ".bias", bias);
  }
};

/// Pre-norm transformer block: masked single-head attention and a SiLU MLP,
/// each wrapped in a residual connection.
struct AttentionBlock {
  LayerNorm norm1, norm2;
  Linear query, key, value, output;
  Linear fc1, fc2;

  AttentionBlock() = default;
  AttentionBlock(std::size_t dim, std::size_t mlp_dim, Rng& rng)
      : norm1(dim),
        norm2(dim),
        query(dim, dim, rng),
        key(dim, dim, rng),
        value(dim, dim, rng),
        output(dim, dim, rng, true, 0.5),
        fc1(dim, mlp_dim, rng),
        fc2(mlp_dim, dim, rng, true, 0.5) {}

  Var operator()(Tape& tape, Var x, const BoolMatrix& mask, bool train = true) {
    Var h = norm1(tape, x, train);
    Var att = masked_attention(query(tape, h, train), key(tape, h, train), value(tape, h, train), mask);
    x = add(x, output(tape, att, train));
    Var m = fc2(tape, silu(fc1(tape, norm2(tape, x, train), train)), train);
    return add(x, m);
  }

  void collect(ParameterSet& ps, const std::string& prefix) {
    norm1.collect(ps, prefix + ".norm1");
    query.collect(ps, prefix + ".query");
    key.collect(ps, prefix + ".key");
    value.collect(ps, prefix + ".value");
    output.collect(ps, prefix + ".output");
    norm2.collect(ps, prefix + ".norm2");
    fc1.collect(ps, prefix + ".fc1");
    fc2.collect(ps, prefix + ".fc2");
  }
};

/// Adam with optional global-norm gradient clipping.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
  };

  Adam(ParameterSet params, Options opts) : params_(std::move(params)), opts_(opts) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_.emplace_back(params_[i].size(), 0.0);
      v_.emplace_back(params_[i].size(), 0.0);
    }
  }

  const ParameterSet& params() const { return params_; }
  void zero_grad() { params_.zero_grad(); }
  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }

  void step() {
    ++t_;
    double clip = 1.0;
    if (opts_.clip_norm > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < params_.size(); ++i)
        for (double g : params_[i].grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > opts_.clip_norm) clip = opts_.clip_norm / norm;
    }
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (p.grad.size() != p.size()) continue;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = p.grad[k] * clip;
        m_[i][k] = opts_.beta1 * m_[i][k] + (1.0 - opts_.beta1) * g;
        v_[i][k] = opts_.beta2 * v_[i][k] + (1.0 - opts_.beta2) * g * g;
        p.data[k] -= opts_.lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + opts_.eps);
      }
    }
  }

 private:
  ParameterSet params_;
  Options opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// Exponential moving average of a parameter set.
class WeightAverage {
 public:
  WeightAverage(ParameterSet params, double decay) : params_(std::move(params)), decay_(decay) {
    for (std::size_t i = 0; i < params_.size(); ++i) avg_.push_back(params_[i].data);
  }

  void update() {
    for (std::size_t i = 0; i < params_.size(); ++i)
      for (std::size_t k = 0; k < avg_[i].size(); ++k)
        avg_[i][k] = decay_ * avg_[i][k] + (1.0 - decay_) * params_[i].data[k];
  }

  /// Overwrites the live parameters with the average.
  void apply() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].data = avg_[i];
  }

 private:
  ParameterSet params_;
  double decay_;
  std::vector<std::vector<double>> avg_;
};

/// Cosine decay from `base` at step 0 to zero at `total`.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  const double u = total == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * u));
}

}  // namespace streamsynth
