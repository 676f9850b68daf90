#pragma once

#include <cstdint>
#include <vector>

#include "streamsynth/rl/preference.hpp"

namespace streamsynth::rl {

/// Desk-scale fine-tuning setup: a motif corpus over 16 text tokens and the
/// 81-code (D=4, K=1) speech alphabet, a recognizer trained on the training
/// split, and an LM given a short supervised warm-up.
struct RlToyConfig {
  std::size_t train_pairs = 400;
  std::size_t held_pairs = 100;
  std::size_t max_text = 6;
  std::size_t asr_epochs = 20;
  std::size_t sft_steps = 200;
  std::size_t sft_batch = 4;
  double sft_lr = 3e-3;
  AsrConfig asr;
  seqlm::LmConfig lm;
};

struct RlToy {
  seqlm::Vocabulary vocab;
  std::vector<seqlm::Pair> train, held;
  ToyAsrBackend asr;
  ToyLM lm;
};

inline RlToy make_rl_toy(const RlToyConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  RlToy toy;
  toy.vocab = seqlm::Vocabulary(cfg.asr.text_size, cfg.asr.codebook());
  auto all = seqlm::make_corpus({.pairs = cfg.train_pairs + cfg.held_pairs,
                                 .min_text = 1,
                                 .max_text = cfg.max_text,
                                 .text_size = cfg.asr.text_size,
                                 .speech_size = cfg.asr.codebook()},
                                rng);
  toy.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.train_pairs));
  toy.held.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.train_pairs), all.end());
  toy.asr = ToyAsrBackend(cfg.asr, rng);
  train_asr(toy.asr, toy.train, cfg.asr_epochs, rng);
  toy.lm = ToyLM(toy.vocab, cfg.lm, rng);
  Adam opt(toy.lm.parameters(), {.lr = cfg.sft_lr, .clip_norm = 1.0});
  std::vector<seqlm::TokenSequence> seqs;
  for (const auto& p : toy.train) seqs.push_back(seqlm::build_nonstream(toy.vocab, p.text, p.speech));
  std::uniform_int_distribution<std::size_t> pick(0, seqs.size() - 1);
  for (std::size_t s = 0; s < cfg.sft_steps; ++s) {
    std::vector<seqlm::TokenSequence> batch;
    for (std::size_t k = 0; k < cfg.sft_batch; ++k) batch.push_back(seqs[pick(rng)]);
    seqlm::train_step(toy.lm, opt, batch);
  }
  return toy;
}

}  // namespace streamsynth::rl
