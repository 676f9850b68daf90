#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "streamsynth/seqlm/model.hpp"

namespace streamsynth::rl {

using seqlm::ToyLM;
using seqlm::TokenSequence;
using seqlm::Vocabulary;

struct PreferencePair {
  std::vector<std::size_t> text;
  std::vector<std::size_t> preferred;
  std::vector<std::size_t> rejected;

  void validate(const Vocabulary& vocab) const {
    if (text.empty() || preferred.empty() || rejected.empty())
      throw RangeError("preference pair: text, preferred and rejected must be non-empty");
    for (auto t : text) vocab.text(t);
    for (auto s : preferred) vocab.speech(s);
    for (auto s : rejected) vocab.speech(s);
  }
  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

struct DpoConfig {
  double beta = 0.1;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("dpo: beta_dpo must be positive");
  }
};

/// -log sigmoid(beta [(w - w_ref) - (l - l_ref)]).
inline double dpo_loss(double logp_w, double logp_l, double logp_w_ref, double logp_l_ref, double beta) {
  const double z = beta * ((logp_w - logp_w_ref) - (logp_l - logp_l_ref));
  return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

inline Var dpo_loss(Var logp_w, Var logp_l, double logp_w_ref, double logp_l_ref, double beta) {
  Var margin = add_scalar(sub(logp_w, logp_l), -(logp_w_ref - logp_l_ref));
  return scale(log_sigmoid(scale(margin, beta)), -1.0);
}

/// Rows of `seq` whose target is a speech token or E, i.e. the response.
inline std::vector<std::size_t> response_rows(const Vocabulary& vocab, const TokenSequence& seq) {
  std::vector<std::size_t> rows;
  for (std::size_t p = 0; p < seq.size(); ++p) {
    if (!seq.loss_mask[p]) continue;
    const auto c = vocab.category(seq.targets[p]);
    if (c == seqlm::Category::Speech || c == seqlm::Category::End) rows.push_back(p);
  }
  return rows;
}

/// log pi(speech, E | text) under teacher forcing on the non-streaming layout.
inline Var response_logprob(Tape& tape, ToyLM& lm, const TokenSequence& seq, bool train = true) {
  const auto rows = response_rows(lm.vocab(), seq);
  if (rows.empty()) throw EmptyLossError("response_logprob: no response positions");
  std::vector<std::size_t> targets;
  for (auto r : rows) targets.push_back(seq.targets[r]);
  Var lp = embedding(log_softmax(lm.logits(tape, seq.ids, train)), rows);
  return sum(pick(lp, targets));
}

inline double response_logprob(ToyLM& lm, const TokenSequence& seq) {
  Tape tape;
  return response_logprob(tape, lm, seq, false).item();
}

/// Pair with its sequences and frozen reference log-probs.
struct ScoredPair {
  TokenSequence preferred, rejected;
  double ref_w = 0.0, ref_l = 0.0;
};

inline std::vector<ScoredPair> score_pairs(ToyLM& reference, std::span<const PreferencePair> pairs) {
  std::vector<ScoredPair> out;
  for (const auto& p : pairs) {
    p.validate(reference.vocab());
    ScoredPair s;
    s.preferred = seqlm::build_nonstream(reference.vocab(), p.text, p.preferred);
    s.rejected = seqlm::build_nonstream(reference.vocab(), p.text, p.rejected);
    s.ref_w = response_logprob(reference, s.preferred);
    s.ref_l = response_logprob(reference, s.rejected);
    out.push_back(std::move(s));
  }
  return out;
}

/// Mean over pairs of log pi(w) - log pi(l).
inline double mean_margin(ToyLM& lm, std::span<const ScoredPair> pairs) {
  double total = 0.0;
  for (const auto& p : pairs) total += response_logprob(lm, p.preferred) - response_logprob(lm, p.rejected);
  return total / static_cast<double>(pairs.size());
}

/// Gradient of the mean DPO loss of `batch` scaled by `weight`, accumulated
/// into the policy's parameter gradients. Returns the unscaled mean loss.
inline double accumulate_dpo(ToyLM& policy, std::span<const ScoredPair> batch, const DpoConfig& cfg, double weight = 1.0) {
  cfg.validate();
  double total = 0.0;
  for (const auto& p : batch) {
    Tape tape;
    Var loss = dpo_loss(response_logprob(tape, policy, p.preferred), response_logprob(tape, policy, p.rejected), p.ref_w,
                        p.ref_l, cfg.beta);
    total += loss.item();
    tape.backward(scale(loss, weight / static_cast<double>(batch.size())));
  }
  return total / static_cast<double>(batch.size());
}

inline double dpo_step(ToyLM& policy, Adam& opt, std::span<const ScoredPair> batch, const DpoConfig& cfg) {
  opt.zero_grad();
  const double loss = accumulate_dpo(policy, batch, cfg);
  opt.step();
  return loss;
}

}  // namespace streamsynth::rl
