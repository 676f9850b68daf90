#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "streamsynth/fsq.hpp"
#include "streamsynth/rl/dpo.hpp"
#include "streamsynth/seqlm/corpus.hpp"

namespace streamsynth::rl {

/// Digit vectors of a speech token sequence, [T, D], entries in [-K, K].
inline Tensor recover_lowrank(std::span<const std::size_t> tokens, std::size_t dim, int bound) {
  const fsq::FsqConfig cfg{.dim = dim, .bound = bound};
  const std::uint64_t size = cfg.codebook_size();
  Tensor out({tokens.size(), dim});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= size)
      throw RangeError("recover_lowrank: token " + std::to_string(tokens[i]) + " outside codebook of " + std::to_string(size));
    const auto d = fsq::decode_index(fsq::SpeechToken{static_cast<std::uint32_t>(tokens[i])}, dim, bound);
    for (std::size_t j = 0; j < dim; ++j) out(i, j) = d[j];
  }
  return out;
}

/// Standard Gumbel draws, -log(-log U), shaped like `shape`.
inline Tensor gumbel_noise(const Shape& shape, Rng& rng) {
  Tensor g(shape);
  for (auto& x : g.data) {
    double u = uniform01(rng);
    while (u <= 0.0) u = uniform01(rng);
    x = -std::log(-std::log(u));
  }
  return g;
}

/// softmax((logits + g) / tau) along the last axis with given noise.
inline Var gumbel_softmax(Var logits, const Tensor& noise, double tau) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_softmax: tau must be positive");
  Var z = scale(add(logits, logits.tape->constant(noise)), 1.0 / tau);
  return softmax(z, z.value().rank() == 1 ? 0 : 1);
}

inline Var gumbel_softmax_sample(Var logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_softmax: tau must be positive");
  return gumbel_softmax(logits, gumbel_noise(logits.value().shape, rng), tau);
}

/// Row-wise argmax of logits + noise, as one-hot rows.
inline Tensor hard_sample(const Tensor& logits, const Tensor& noise) {
  Tensor out(logits.shape);
  const std::size_t rows = logits.rank() == 1 ? 1 : logits.rows(), cols = logits.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (logits.data[i * cols + j] + noise.data[i * cols + j] > logits.data[i * cols + best] + noise.data[i * cols + best])
        best = j;
    out.data[i * cols + best] = 1.0;
  }
  return out;
}

struct AsrConfig {
  std::size_t dim = 4;  // FSQ D
  int bound = 1;        // FSQ K
  std::size_t hidden = 16;
  std::size_t mlp = 32;
  std::size_t text_size = 16;
  std::size_t frames_per_token = 3;

  fsq::FsqConfig fsq() const { return {.dim = dim, .bound = bound, .hidden = hidden}; }
  std::size_t codebook() const { return static_cast<std::size_t>(fsq().codebook_size()); }
};

/// Frozen recognizer: up-projection of recovered codes, then a classifier
/// over each group of frames_per_token consecutive frames.
class ToyAsrBackend {
 public:
  ToyAsrBackend() = default;
  ToyAsrBackend(AsrConfig cfg, Rng& rng) : cfg_(cfg), table_(fsq::digit_table(cfg.fsq())) {
    cfg_.fsq().validate();
    if (cfg_.frames_per_token == 0 || cfg_.text_size == 0) throw ConfigError("asr: frames_per_token and text_size must be positive");
    up_ = Linear(cfg_.dim, cfg_.hidden, rng);
    l1_ = Linear(cfg_.frames_per_token * cfg_.hidden, cfg_.mlp, rng);
    l2_ = Linear(cfg_.mlp, cfg_.text_size, rng);
  }

  const AsrConfig& config() const { return cfg_; }
  const Tensor& digit_table() const { return table_; }

  /// Text logits [T / frames_per_token, text_size] from codes [T, D].
  Var logits(Tape& tape, Var codes, bool train = false) {
    const std::size_t n = codes.rows(), g = cfg_.frames_per_token;
    if (n == 0 || n % g != 0)
      throw DimensionError("asr: " + std::to_string(n) + " frames is not a positive multiple of " + std::to_string(g));
    Var h = tanh(up_(tape, codes, train));
    std::vector<Var> parts;
    for (std::size_t j = 0; j < g; ++j) {
      std::vector<std::size_t> rows;
      for (std::size_t i = j; i < n; i += g) rows.push_back(i);
      parts.push_back(embedding(h, rows));
    }
    return l2_(tape, tanh(l1_(tape, concat_cols(parts), train)), train);
  }

  /// -log P(text | codes), summed over text tokens.
  Var loss(Tape& tape, Var codes, std::span<const std::size_t> text, bool train = false) {
    Var lg = logits(tape, codes, train);
    if (lg.rows() != text.size())
      throw DimensionError("asr: " + std::to_string(lg.rows()) + " frame groups for " + std::to_string(text.size()) +
                           " text tokens");
    return scale(sum(pick(log_softmax(lg), std::vector<std::size_t>(text.begin(), text.end()))), -1.0);
  }

  /// Expected digit vectors under soft one-hot rows over the codebook.
  Var soft_codes(Tape& tape, Var soft_tokens) { return matmul(soft_tokens, tape.constant_ref(table_)); }

  ParameterSet parameters() {
    ParameterSet ps;
    up_.collect(ps, "proj_up");
    l1_.collect(ps, "l1");
    l2_.collect(ps, "l2");
    return ps;
  }

 private:
  AsrConfig cfg_;
  Tensor table_;
  Linear up_, l1_, l2_;
};

/// Supervised training of the recognizer on ground-truth token sequences.
inline double train_asr(ToyAsrBackend& asr, std::span<const seqlm::Pair> pairs, std::size_t epochs, Rng& rng,
                        double lr = 1e-2) {
  Adam opt(asr.parameters(), {.lr = lr, .clip_norm = 1.0});
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double last = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    last = 0.0;
    for (std::size_t i : order) {
      opt.zero_grad();
      Tape tape;
      const auto& p = pairs[i];
      Var loss = asr.loss(tape, tape.constant(recover_lowrank(p.speech, asr.config().dim, asr.config().bound)), p.text, true);
      tape.backward(loss);
      opt.step();
      last += loss.item() / static_cast<double>(pairs.size());
    }
  }
  return last;
}

/// Logits of the LM at every speech-target position of the non-streaming
/// teacher-forced layout, restricted to the speech alphabet: [T, S].
inline Var speech_logits(Tape& tape, ToyLM& lm, const TokenSequence& seq, bool train = true) {
  const auto& vocab = lm.vocab();
  std::vector<std::size_t> rows;
  for (std::size_t p = 0; p < seq.size(); ++p)
    if (seq.loss_mask[p] && vocab.category(seq.targets[p]) == seqlm::Category::Speech) rows.push_back(p);
  if (rows.empty()) throw EmptyLossError("speech_logits: no speech positions");
  Var all = embedding(lm.logits(tape, seq.ids, train), rows);
  return slice_cols(all, vocab.text_size(), vocab.text_size() + vocab.speech_size());
}

/// L_ASR of soft tokens drawn from `logits` with the given Gumbel noise.
inline Var asr_loss_soft(Tape& tape, ToyAsrBackend& asr, Var logits, const Tensor& noise, double tau,
                         std::span<const std::size_t> text) {
  if (logits.cols() != asr.config().codebook()) throw DimensionError("asr: speech alphabet does not match codebook");
  return asr.loss(tape, asr.soft_codes(tape, gumbel_softmax(logits, noise, tau)), text);
}

/// L_ASR of the hard tokens argmax(logits + noise).
inline double asr_loss_hard(ToyAsrBackend& asr, const Tensor& logits, const Tensor& noise,
                            std::span<const std::size_t> text) {
  Tape tape;
  Var onehot = tape.constant(hard_sample(logits, noise));
  return asr.loss(tape, asr.soft_codes(tape, onehot), text).item();
}

struct AsrRewardConfig {
  double tau = 1.0;
  double tau_final = 0.1;
  bool anneal = false;

  void validate() const {
    if (!(tau > 0.0) || !(tau_final > 0.0)) throw ConfigError("asr reward: tau must be positive");
  }
  /// Temperature at `step` of `total`: constant, or linear from tau to tau_final.
  double at(std::size_t step, std::size_t total) const {
    if (!anneal || total <= 1) return tau;
    const double f = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
    return tau + (tau_final - tau) * f;
  }
};

/// Teacher-forced L_ASR of one pair; gradients flow into the LM only.
inline Var asr_reward_loss(Tape& tape, ToyLM& lm, ToyAsrBackend& asr, const seqlm::Pair& pair, double tau, Rng& rng,
                           bool train = true) {
  const TokenSequence seq = seqlm::build_nonstream(lm.vocab(), pair.text, pair.speech);
  Var logits = speech_logits(tape, lm, seq, train);
  return asr_loss_soft(tape, asr, logits, gumbel_noise(logits.value().shape, rng), tau, pair.text);
}

/// Accumulates weight * mean L_ASR gradient of `batch` into the LM.
inline double accumulate_asr(ToyLM& lm, ToyAsrBackend& asr, std::span<const seqlm::Pair> batch, double tau, Rng& rng,
                             double weight = 1.0) {
  double total = 0.0;
  for (const auto& p : batch) {
    Tape tape;
    Var loss = asr_reward_loss(tape, lm, asr, p, tau, rng);
    total += loss.item();
    tape.backward(scale(loss, weight / static_cast<double>(batch.size())));
  }
  return total / static_cast<double>(batch.size());
}

inline double asr_reward_step(ToyLM& lm, Adam& opt, ToyAsrBackend& asr, std::span<const seqlm::Pair> batch, double tau,
                              Rng& rng) {
  opt.zero_grad();
  const double loss = accumulate_asr(lm, asr, batch, tau, rng);
  opt.step();
  return loss;
}

/// Mean L_ASR over `pairs` with Gumbel noise drawn from a fixed seed, so two
/// evaluations of the same model agree exactly.
inline double evaluate_asr(ToyLM& lm, ToyAsrBackend& asr, std::span<const seqlm::Pair> pairs, double tau,
                           std::uint64_t seed, std::size_t draws = 4) {
  Rng rng(seed);
  double total = 0.0;
  for (const auto& p : pairs)
    for (std::size_t d = 0; d < draws; ++d) {
      Tape tape;
      total += asr_reward_loss(tape, lm, asr, p, tau, rng, false).item();
    }
  return total / static_cast<double>(pairs.size() * draws);
}

}  // namespace streamsynth::rl
