#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "streamsynth/cfm/mask.hpp"
#include "streamsynth/nn.hpp"

namespace streamsynth::cfm {

struct CfmConfig {
  std::size_t feature_dim = 8;
  std::size_t vocab = 6561;
  std::size_t speaker_dim = 16;
  std::size_t hidden = 32;
  std::size_t mlp = 64;
  std::size_t time_dim = 16;
  std::size_t lookahead = 3;  // P tokens
  std::size_t align_layers = 2;
  std::size_t estimator_layers = 3;
  double p_uncond = 0.2;
  double mask_min = 0.7;
  double mask_max = 1.0;

  void validate() const {
    if (feature_dim == 0 || vocab == 0 || speaker_dim == 0 || hidden == 0 || mlp == 0)
      throw ConfigError("cfm: dimensions must be positive");
    if (time_dim == 0 || time_dim % 2 != 0) throw ConfigError("cfm: time_dim must be a positive even number");
    if (align_layers == 0 || estimator_layers == 0) throw ConfigError("cfm: layer counts must be positive");
    if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw ConfigError("cfm: p_uncond must lie in [0, 1]");
    if (!(mask_min >= 0.0 && mask_min <= mask_max && mask_max <= 1.0))
      throw ConfigError("cfm: mask fraction range must satisfy 0 <= min <= max <= 1");
  }
};

inline constexpr std::size_t kUpsample = 2;

/// Conditions: speaker vector, speech tokens, and optional prompt frames that
/// are revealed at the start of the reference; every later reference frame is
/// zero and flagged as masked.
struct Condition {
  Tensor speaker;                   // [speaker_dim]
  std::vector<std::size_t> tokens;  // speech token values
  Tensor prompt;                    // [prompt_frames, F]; ignored when prompt_frames == 0
  std::size_t prompt_frames = 0;

  std::size_t frames() const { return kUpsample * tokens.size(); }

  /// Reference of `length` frames: prompt rows, then zeros.
  Tensor reference(std::size_t length, std::size_t feature_dim) const {
    Tensor ref({length, feature_dim});
    const std::size_t keep = std::min(prompt_frames, length);
    for (std::size_t i = 0; i < keep; ++i)
      for (std::size_t f = 0; f < feature_dim; ++f) ref(i, f) = prompt(i, f);
    return ref;
  }

  /// 1 at revealed reference frames, 0 at masked ones.
  Tensor flags(std::size_t length) const {
    Tensor out({length, 1});
    for (std::size_t i = 0; i < std::min(prompt_frames, length); ++i) out(i, 0) = 1.0;
    return out;
  }

  /// Same speaker and prompt, first `n` tokens.
  Condition prefix(std::size_t n) const {
    Condition c = *this;
    c.tokens.resize(n);
    return c;
  }
};

/// Sinusoidal embedding of t with frequencies spaced geometrically in [1, 1000].
inline Tensor time_embedding(double t, std::size_t dim) {
  Tensor out({dim});
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = half > 1 ? std::exp(std::log(1000.0) * static_cast<double>(k) / static_cast<double>(half - 1)) : 1.0;
    out.data[k] = std::sin(t * freq);
    out.data[half + k] = std::cos(t * freq);
  }
  return out;
}

/// Token embedding, right-padded look-ahead convolution, 2x upsampling and
/// masked alignment blocks produce per-frame token features; the estimator
/// predicts the field from [x_t, reference, flag, token features, speaker,
/// time embedding] through masked attention blocks.
class CfmModel {
 public:
  CfmModel() = default;
  CfmModel(CfmConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t h = cfg_.hidden;
    token_embed_ = Tensor::parameter(Tensor::randn({cfg_.vocab, h}, rng, 1.0));
    conv_weight_ = Tensor::parameter(
        Tensor::randn({(cfg_.lookahead + 1) * h, h}, rng, 0.5 / std::sqrt(static_cast<double>((cfg_.lookahead + 1) * h))));
    conv_bias_ = Tensor::parameter(Tensor({h}));
    for (std::size_t l = 0; l < cfg_.align_layers; ++l) align_.emplace_back(h, cfg_.mlp, rng);
    align_norm_ = LayerNorm(h);
    const std::size_t in = 2 * cfg_.feature_dim + 1 + h + cfg_.speaker_dim + cfg_.time_dim;
    input_ = Linear(in, h, rng);
    for (std::size_t l = 0; l < cfg_.estimator_layers; ++l) estimator_.emplace_back(h, cfg_.mlp, rng);
    out_norm_ = LayerNorm(h);
    output_ = Linear(h, cfg_.feature_dim, rng, true, 0.5);
  }

  const CfmConfig& config() const { return cfg_; }

  /// Attention layers a frame's output passes through over a full sample.
  std::size_t attention_depth(std::size_t nfe) const { return cfg_.align_layers + nfe * cfg_.estimator_layers; }

  /// Per-frame token features, [2T, hidden].
  Var token_features(Tape& tape, std::span<const std::size_t> tokens, const MaskSpec& mask, bool train = true) {
    if (tokens.empty()) throw DimensionError("cfm: empty token sequence");
    for (auto t : tokens)
      if (t >= cfg_.vocab) throw RangeError("cfm: token " + std::to_string(t) + " outside vocabulary");
    Var e = embedding(tape.use(token_embed_, train), std::vector<std::size_t>(tokens.begin(), tokens.end()));
    Var c = conv1d_right_padded(e, tape.use(conv_weight_, train), tape.use(conv_bias_, train), cfg_.lookahead + 1,
                                cfg_.lookahead);
    Var x = repeat_rows(add(e, c), kUpsample);
    const BoolMatrix m = build_mask(mask, x.rows());
    for (auto& b : align_) x = b(tape, x, m, train);
    return align_norm_(tape, x, train);
  }

  /// Field estimate at state x_t. `mu` are token features, or an invalid Var
  /// for the unconditional branch (speaker, tokens and reference dropped).
  Var estimate(Tape& tape, Var x_t, double t, const Condition& cond, Var mu, const MaskSpec& mask,
               bool train = true) {
    const std::size_t length = x_t.rows();
    const bool conditional = mu.tape != nullptr;
    if (conditional && mu.rows() != length) throw DimensionError("cfm: token features do not match frame count");
    if (x_t.cols() != cfg_.feature_dim) throw DimensionError("cfm: state width does not match feature_dim");
    Var ref = tape.constant(conditional ? cond.reference(length, cfg_.feature_dim) : Tensor({length, cfg_.feature_dim}));
    Var flag = tape.constant(conditional ? cond.flags(length) : Tensor({length, 1}));
    Var feat = conditional ? mu : tape.constant(Tensor({length, cfg_.hidden}));
    Tensor spk_row({cfg_.speaker_dim});
    if (conditional) {
      if (cond.speaker.size() != cfg_.speaker_dim) throw DimensionError("cfm: speaker vector has wrong size");
      spk_row = cond.speaker;
    }
    Var spk = broadcast_rows(tape.constant(spk_row), length);
    Var temb = broadcast_rows(tape.constant(time_embedding(t, cfg_.time_dim)), length);
    Var x = input_(tape, concat_cols({x_t, ref, flag, feat, spk, temb}), train);
    const BoolMatrix m = build_mask(mask, length);
    for (auto& b : estimator_) x = b(tape, x, m, train);
    return output_(tape, silu(out_norm_(tape, x, train)), train);
  }

  ParameterSet parameters() {
    ParameterSet ps;
    ps.add("token_embed", token_embed_);
    ps.add("lookahead.weight", conv_weight_);
    ps.add("lookahead.bias", conv_bias_);
    for (std::size_t l = 0; l < align_.size(); ++l) align_[l].collect(ps, "align" + std::to_string(l));
    align_norm_.collect(ps, "align_norm");
    input_.collect(ps, "input");
    for (std::size_t l = 0; l < estimator_.size(); ++l) estimator_[l].collect(ps, "estimator" + std::to_string(l));
    out_norm_.collect(ps, "out_norm");
    output_.collect(ps, "output");
    return ps;
  }

 private:
  CfmConfig cfg_;
  Tensor token_embed_, conv_weight_, conv_bias_;
  std::vector<AttentionBlock> align_;
  LayerNorm align_norm_;
  Linear input_;
  std::vector<AttentionBlock> estimator_;
  LayerNorm out_norm_;
  Linear output_;
};

/// Random draws of one training example.
struct TrainDraw {
  double t = 0.0;
  Tensor x0;
  std::size_t keep = 0;  // reference frames left unmasked
  MaskSpec mask;
  bool drop_condition = false;
};

inline TrainDraw draw_training(Rng& rng, std::size_t length, const CfmConfig& cfg, std::size_t chunk) {
  TrainDraw d;
  d.t = uniform01(rng);
  d.x0 = Tensor::randn({length, cfg.feature_dim}, rng);
  const double frac = cfg.mask_min + (cfg.mask_max - cfg.mask_min) * uniform01(rng);
  d.keep = static_cast<std::size_t>(std::floor((1.0 - frac) * static_cast<double>(length)));
  d.mask = MaskSpec{kAllMaskKinds[std::uniform_int_distribution<std::size_t>(0, 3)(rng)], chunk};
  d.drop_condition = uniform01(rng) < cfg.p_uncond;
  return d;
}

/// mean |(x1 - x0) - prediction|.
inline Var flow_loss(Tape& tape, Var prediction, const Tensor& x0, const Tensor& x1) {
  return mean(abs(sub(tape.constant(target_field(x0, x1)), prediction)));
}

/// Loss of one example for fixed draws. The reference is x1 with every frame
/// from `keep` on zeroed.
inline Var training_loss(Tape& tape, CfmModel& model, const Tensor& x1, const Tensor& speaker,
                         std::span<const std::size_t> tokens, const TrainDraw& d, bool train = true) {
  if (x1.rows() != kUpsample * tokens.size()) throw DimensionError("cfm: x1 must have two frames per token");
  Condition cond{speaker, std::vector<std::size_t>(tokens.begin(), tokens.end()), x1, d.keep};
  Var x_t = tape.constant(ot_path(d.x0, x1, d.t));
  Var mu = d.drop_condition ? Var{} : model.token_features(tape, tokens, d.mask, train);
  return flow_loss(tape, model.estimate(tape, x_t, d.t, cond, mu, d.mask, train), d.x0, x1);
}

struct Example {
  std::vector<std::size_t> tokens;
  Tensor speaker;
  Tensor x1;
};

/// Draws t, x0, reference mask, attention mask and condition dropout for each
/// example and takes one optimizer step on the mean loss.
inline double training_step(CfmModel& model, Adam& opt, std::span<const Example> batch, Rng& rng,
                            std::size_t chunk = 30) {
  opt.zero_grad();
  double total = 0.0;
  for (const auto& ex : batch) {
    const TrainDraw d = draw_training(rng, ex.x1.rows(), model.config(), chunk);
    Tape tape;
    Var loss = scale(training_loss(tape, model, ex.x1, ex.speaker, ex.tokens, d), 1.0 / static_cast<double>(batch.size()));
    tape.backward(loss);
    total += loss.item();
  }
  opt.step();
  return total;
}

}  // namespace streamsynth::cfm
