#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "streamsynth/cfm/model.hpp"

namespace streamsynth::cfm {

/// Field evaluation at state x and time t; `conditional` selects the
/// conditional or the unconditional branch.
using VelocityFn = std::function<Tensor(const Tensor& x, double t, bool conditional)>;

struct SampleConfig {
  std::size_t nfe = 10;
  double beta = 0.7;
  std::uint64_t seed = 0;
  MaskSpec mask;

  void validate() const {
    if (nfe < 1) throw ConfigError("sample: nfe must be at least 1");
    if (!(beta >= 0.0)) throw ConfigError("sample: beta must be non-negative");
    mask.validate();
  }
};

/// Standard normal noise drawn row by row from a generator seeded with
/// `seed`; a longer draw extends a shorter one.
inline Tensor noise(std::size_t length, std::size_t feature_dim, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({length, feature_dim}, rng);
}

/// (1 + beta) * conditional - beta * unconditional.
inline Tensor cfg_field(const VelocityFn& v, const Tensor& x, double t, double beta) {
  if (!(beta >= 0.0)) throw ConfigError("cfg_field: beta must be non-negative");
  const Tensor c = v(x, t, true);
  const Tensor u = v(x, t, false);
  Tensor out(c.shape);
  for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = (1.0 + beta) * c.data[k] - beta * u.data[k];
  return out;
}

/// Euler steps between cosine-scheduled times s_k = schedule(k / nfe).
inline Tensor integrate(const VelocityFn& v, Tensor x, std::size_t nfe, double beta) {
  if (nfe < 1) throw ConfigError("sample: nfe must be at least 1");
  for (std::size_t k = 0; k < nfe; ++k) {
    const double t0 = cosine_schedule(static_cast<double>(k) / static_cast<double>(nfe));
    const double t1 = cosine_schedule(static_cast<double>(k + 1) / static_cast<double>(nfe));
    const Tensor f = cfg_field(v, x, t0, beta);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += (t1 - t0) * f.data[i];
  }
  return x;
}

/// Frozen-model field for one condition; token features are computed once.
inline VelocityFn model_field(CfmModel& model, const Condition& cond, const MaskSpec& mask) {
  Tensor mu;
  {
    Tape tape;
    mu = model.token_features(tape, cond.tokens, mask, false).value();
  }
  return [&model, cond, mask, mu](const Tensor& x, double t, bool conditional) {
    Tape tape;
    Var feat = conditional ? tape.constant_ref(mu) : Var{};
    return model.estimate(tape, tape.constant_ref(x), t, cond, feat, mask, false).value();
  };
}

inline Tensor sample(CfmModel& model, const Condition& cond, const SampleConfig& cfg) {
  cfg.validate();
  return integrate(model_field(model, cond, cfg.mask), noise(cond.frames(), model.config().feature_dim, cfg.seed),
                   cfg.nfe, cfg.beta);
}

/// Chunked inference. After each token chunk the sample is recomputed on the
/// known token prefix and every frame whose dependency cone lies inside that
/// prefix is emitted: frame i is final once reach^depth(i) / 2 + P is a known
/// token, where depth counts all attention layers of the unrolled sampler.
/// Concatenated output equals sample() on the full sequence exactly.
class Streamer {
 public:
  Streamer(CfmModel& model, Condition cond, SampleConfig cfg) : model_(&model), cond_(std::move(cond)), cfg_(cfg) {
    cfg_.validate();
    if (!cfg_.mask.causal()) throw UnsupportedModeError("stream_generate: the non-causal mask cannot stream");
    cond_.tokens.clear();
  }

  /// Adds tokens and returns the frames that became final, if any.
  std::optional<Tensor> push(std::span<const std::size_t> tokens) {
    if (finished_) throw Error("stream_generate: push after finish");
    cond_.tokens.insert(cond_.tokens.end(), tokens.begin(), tokens.end());
    return emit(safe_frames(cond_.tokens.size()));
  }

  /// Flushes every remaining frame.
  std::optional<Tensor> finish() {
    if (finished_) return std::nullopt;
    finished_ = true;
    return emit(cond_.frames());
  }

  std::size_t emitted() const { return emitted_; }

  /// Frames final once `known` tokens are available.
  std::size_t safe_frames(std::size_t known) const {
    const std::size_t depth = model_->attention_depth(cfg_.nfe);
    const std::size_t lookahead = model_->config().lookahead;
    std::size_t n = 0;
    while (n < kUpsample * known) {
      std::size_t r = n;
      for (std::size_t d = 0; d < depth && cfg_.mask.kind != MaskKind::FullCausal; ++d) r = cfg_.mask.reach(r, 0);
      if (r / kUpsample + lookahead + 1 > known) break;
      ++n;
    }
    return n;
  }

 private:
  std::optional<Tensor> emit(std::size_t end) {
    if (end <= emitted_) return std::nullopt;
    const Tensor full = sample(*model_, cond_, cfg_);
    const std::size_t f = full.cols();
    Tensor out({end - emitted_, f});
    std::copy(full.data.begin() + static_cast<std::ptrdiff_t>(emitted_ * f),
              full.data.begin() + static_cast<std::ptrdiff_t>(end * f), out.data.begin());
    emitted_ = end;
    return out;
  }

  CfmModel* model_;
  Condition cond_;
  SampleConfig cfg_;
  std::size_t emitted_ = 0;
  bool finished_ = false;
};

/// Feeds `chunks` through a Streamer and returns every emitted block.
inline std::vector<Tensor> stream_generate(CfmModel& model, const Condition& cond,
                                           const std::vector<std::vector<std::size_t>>& chunks,
                                           const SampleConfig& cfg) {
  Streamer s(model, cond, cfg);
  std::vector<Tensor> out;
  for (const auto& c : chunks)
    if (auto block = s.push(c)) out.push_back(std::move(*block));
  if (auto block = s.finish()) out.push_back(std::move(*block));
  return out;
}

inline Tensor concat_frames(const std::vector<Tensor>& blocks) {
  if (blocks.empty()) throw DimensionError("concat_frames: no blocks");
  std::size_t rows = 0;
  for (const auto& b : blocks) rows += b.rows();
  Tensor out({rows, blocks.front().cols()});
  std::size_t at = 0;
  for (const auto& b : blocks) {
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at));
    at += b.size();
  }
  return out;
}

}  // namespace streamsynth::cfm
