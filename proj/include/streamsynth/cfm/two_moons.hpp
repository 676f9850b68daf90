#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "streamsynth/cfm/data.hpp"
#include "streamsynth/cfm/sampling.hpp"

namespace streamsynth::cfm {

/// Mean energy distance between two iid 2000-point samples of the default
/// target (noise 0.1), from 400 replicates of an independent numpy run.
/// Standard error 4e-5.
inline constexpr double kMoonsNullEnergy = 0.001227;

/// Flow matching on grid-tokenized two-moons points: train, sample with
/// guidance, and compare the samples with fresh target points by energy
/// distance relative to the target-vs-target level.
struct MoonsConfig {
  TwoMoons data{0.1, 0.2};
  std::size_t hidden = 32;
  std::size_t steps = 6000;
  std::size_t batch = 8;         // sequences per step
  std::size_t train_tokens = 8;  // tokens per training sequence
  double lr = 2e-3;              // cosine-decayed
  double ema = 0.999;            // sampling uses the averaged weights
  std::size_t eval_sequences = 40;
  std::size_t eval_tokens = 50;  // one frame per token is kept
  std::size_t baseline_pairs = 20;
  SampleConfig sample{.nfe = 10, .beta = 0.7, .seed = 0, .mask = {MaskKind::NonCausal, 30}};
};

struct MoonsResult {
  double energy = 0.0;    // samples vs target
  double baseline = 0.0;  // in-run mean target vs target at the same size, a cross-check
  double ratio(double reference = kMoonsNullEnergy) const { return energy / reference; }
  std::vector<double> losses;
};

inline MoonsResult run_two_moons(const MoonsConfig& cfg, std::uint64_t seed) {
  CfmConfig c;
  c.feature_dim = 2;
  c.vocab = cfg.data.vocab();
  c.speaker_dim = 1;
  c.hidden = cfg.hidden;
  c.mlp = 2 * cfg.hidden;
  Rng model_rng = make_rng(seed, "moons.model");
  CfmModel model(c, model_rng);
  Adam opt(model.parameters(), {.lr = cfg.lr, .clip_norm = 1.0});
  std::optional<WeightAverage> avg;
  Rng data_rng = make_rng(seed, "moons.data"), train_rng = make_rng(seed, "moons.train");

  MoonsResult r;
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    std::vector<Example> batch;
    for (std::size_t k = 0; k < cfg.batch; ++k) batch.push_back(cfg.data.example(cfg.train_tokens, 1, data_rng));
    opt.set_lr(cosine_lr(cfg.lr, s, cfg.steps));
    r.losses.push_back(training_step(model, opt, batch, train_rng));
    if (!avg) avg.emplace(model.parameters(), cfg.ema);
    else avg->update();
  }
  if (avg) avg->apply();

  Rng eval_rng = make_rng(seed, "moons.eval");
  // Even frames only: one independent point per token.
  Tensor gen({cfg.eval_sequences * cfg.eval_tokens, 2});
  std::size_t at = 0;
  for (std::size_t q = 0; q < cfg.eval_sequences; ++q) {
    const Example ex = cfg.data.example(cfg.eval_tokens, 1, eval_rng);
    Condition cond;
    cond.speaker = ex.speaker;
    cond.tokens = ex.tokens;
    SampleConfig sc = cfg.sample;
    sc.seed = derive_seed(seed, "moons.noise") + q;
    const Tensor x = sample(model, cond, sc);
    for (std::size_t i = 0; i < x.rows(); i += kUpsample) {
      gen.data[at++] = x(i, 0);
      gen.data[at++] = x(i, 1);
    }
  }

  Rng target_rng = make_rng(seed, "moons.target");
  const std::size_t n = gen.rows();
  for (std::size_t k = 0; k < cfg.baseline_pairs; ++k)
    r.baseline += energy_distance(cfg.data.points(n, target_rng), cfg.data.points(n, target_rng));
  r.baseline /= static_cast<double>(cfg.baseline_pairs);
  r.energy = energy_distance(gen, cfg.data.points(n, target_rng));
  return r;
}

}  // namespace streamsynth::cfm
