#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "streamsynth/rl/asr_reward.hpp"
#include "streamsynth/seqlm/generate.hpp"

namespace streamsynth::rl {

/// Ranking score of a candidate: minus the recognizer loss on the candidate
/// cut or padded (last token repeated) to the expected length, minus the
/// length error, plus cosine similarity of mean digit vectors with a
/// reference utterance.
inline double preference_score(ToyAsrBackend& asr, std::span<const std::size_t> text,
                               std::span<const std::size_t> candidate, std::span<const std::size_t> reference) {
  const auto& cfg = asr.config();
  const std::size_t want = cfg.frames_per_token * text.size();
  std::vector<std::size_t> fitted(candidate.begin(), candidate.end());
  if (fitted.empty()) fitted.push_back(0);
  const double length_error = std::fabs(static_cast<double>(candidate.size()) - static_cast<double>(want));
  fitted.resize(want, fitted.back());
  Tape tape;
  const double l_asr = asr.loss(tape, tape.constant(recover_lowrank(fitted, cfg.dim, cfg.bound)), text).item();

  auto mean_digits = [&](std::span<const std::size_t> s) {
    std::vector<double> m(cfg.dim, 0.0);
    if (s.empty()) return m;
    const Tensor d = recover_lowrank(s, cfg.dim, cfg.bound);
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < cfg.dim; ++j) m[j] += d(i, j) / static_cast<double>(d.rows());
    return m;
  };
  const auto a = mean_digits(candidate), b = mean_digits(reference);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < cfg.dim; ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  const double sim = na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0;
  return -l_asr - length_error + sim;
}

struct PairMiningConfig {
  seqlm::SamplerConfig sampler{.kind = seqlm::SamplerConfig::Kind::TopK, .top_k = 5, .temperature = 1.0};
  std::size_t attempts = 8;  // draws per context before giving up on two distinct candidates
  std::uint64_t seed = 0;
};

/// Two sampled candidates per context from `lm`, ordered by preference_score.
/// Contexts whose draws never differ are skipped.
inline std::vector<PreferencePair> mine_preferences(const ToyLM& lm, ToyAsrBackend& asr,
                                                    std::span<const seqlm::Pair> contexts,
                                                    const PairMiningConfig& cfg) {
  std::vector<PreferencePair> out;
  std::uint64_t draw = 0;
  auto sample = [&](const seqlm::Pair& c) {
    seqlm::GenerationConfig g;
    g.mode = seqlm::Mode::NonStreaming;
    g.sampler = cfg.sampler;
    g.seed = cfg.seed * 1000003 + draw++;
    return seqlm::synthesize(lm, lm.vocab(), c.text, g).speech;
  };
  for (const auto& c : contexts) {
    auto a = sample(c);
    std::vector<std::size_t> b;
    for (std::size_t k = 0; k < cfg.attempts; ++k) {
      b = sample(c);
      if (b != a && !a.empty() && !b.empty()) break;
      if (a.empty()) a = b;
    }
    if (a == b || a.empty() || b.empty()) continue;
    const double sa = preference_score(asr, c.text, a, c.speech);
    const double sb = preference_score(asr, c.text, b, c.speech);
    if (sa == sb) continue;
    out.push_back(sa > sb ? PreferencePair{c.text, a, b} : PreferencePair{c.text, b, a});
  }
  return out;
}

enum class Objective { Dpo, Asr, Both };

struct FinetuneConfig {
  Objective objective = Objective::Both;
  DpoConfig dpo;
  AsrRewardConfig asr;
  double lambda = 1.0;  // weight of L_ASR next to L_DPO
};

/// One optimizer step on L_DPO + lambda L_ASR (or either alone).
inline double finetune_step(ToyLM& lm, Adam& opt, ToyAsrBackend& asr, std::span<const ScoredPair> pairs,
                            std::span<const seqlm::Pair> asr_batch, double tau, const FinetuneConfig& cfg, Rng& rng) {
  opt.zero_grad();
  double loss = 0.0;
  if (cfg.objective != Objective::Asr && !pairs.empty()) loss += accumulate_dpo(lm, pairs, cfg.dpo);
  if (cfg.objective != Objective::Dpo && !asr_batch.empty()) {
    const double w = cfg.objective == Objective::Both ? cfg.lambda : 1.0;
    loss += w * accumulate_asr(lm, asr, asr_batch, tau, rng, w);
  }
  opt.step();
  return loss;
}

}  // namespace streamsynth::rl
