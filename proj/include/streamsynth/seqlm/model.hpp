#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "streamsynth/nn.hpp"
#include "streamsynth/seqlm/sequence.hpp"

namespace streamsynth::seqlm {

struct LmConfig {
  std::size_t hidden = 48;
  std::size_t mlp = 96;
  std::size_t layers = 2;
  std::size_t max_positions = 256;

  void validate() const {
    if (hidden == 0 || mlp == 0 || layers == 0 || max_positions == 0)
      throw ConfigError("lm: hidden, mlp, layers and max_positions must be positive");
  }
};

inline BoolMatrix causal_mask(std::size_t n) {
  BoolMatrix m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

/// Token and learned position embeddings, causal transformer blocks, final
/// norm and an output projection over the whole vocabulary.
class ToyLM {
 public:
  ToyLM() = default;
  ToyLM(Vocabulary vocab, LmConfig cfg, Rng& rng) : vocab_(vocab), cfg_(cfg) {
    cfg_.validate();
    token_embed_ = Tensor::parameter(Tensor::randn({vocab_.size(), cfg_.hidden}, rng, 0.5));
    pos_embed_ = Tensor::parameter(Tensor::randn({cfg_.max_positions, cfg_.hidden}, rng, 0.1));
    for (std::size_t l = 0; l < cfg_.layers; ++l) blocks_.emplace_back(cfg_.hidden, cfg_.mlp, rng);
    final_norm_ = LayerNorm(cfg_.hidden);
    out_ = Linear(cfg_.hidden, vocab_.size(), rng, true, 0.2);
  }

  const Vocabulary& vocab() const { return vocab_; }
  const LmConfig& config() const { return cfg_; }

  /// Final hidden states, one row per input position.
  Var hidden(Tape& tape, std::span<const TokenId> ids, bool train = true) {
    if (ids.empty()) throw RangeError("lm: empty input");
    if (ids.size() > cfg_.max_positions)
      throw RangeError("lm: sequence of " + std::to_string(ids.size()) + " exceeds max_positions " +
                       std::to_string(cfg_.max_positions));
    std::vector<std::size_t> tok(ids.begin(), ids.end());
    for (auto id : tok) vocab_.category(id);
    std::vector<std::size_t> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    Var x = add(embedding(tape.use(token_embed_, train), tok), embedding(tape.use(pos_embed_, train), pos));
    const BoolMatrix mask = causal_mask(ids.size());
    for (auto& b : blocks_) x = b(tape, x, mask, train);
    return final_norm_(tape, x, train);
  }

  Var logits(Tape& tape, std::span<const TokenId> ids, bool train = true) {
    return out_(tape, hidden(tape, ids, train), train);
  }

  /// Logits of the next token after `ids`; only the last row is projected.
  std::vector<double> next_logits(std::span<const TokenId> ids) const {
    auto& self = const_cast<ToyLM&>(*this);  // frozen forward: nothing is written
    Tape tape;
    Var h = self.hidden(tape, ids, false);
    Var last = slice_rows(h, ids.size() - 1, ids.size());
    return self.out_(tape, last, false).value().data;
  }

  ParameterSet parameters() {
    ParameterSet ps;
    ps.add("token_embed", token_embed_);
    ps.add("pos_embed", pos_embed_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(ps, "block" + std::to_string(l));
    final_norm_.collect(ps, "final_norm");
    out_.collect(ps, "out");
    return ps;
  }

 private:
  Vocabulary vocab_;
  LmConfig cfg_;
  Tensor token_embed_;
  Tensor pos_embed_;
  std::vector<AttentionBlock> blocks_;
  LayerNorm final_norm_;
  Linear out_;
};

/// Mean next-token cross entropy over the scored positions.
inline Var sequence_loss(Tape& tape, ToyLM& lm, const TokenSequence& seq, bool train = true) {
  std::vector<std::size_t> targets(seq.targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = seq.loss_mask[i] ? seq.targets[i] : 0;
  return cross_entropy_ignore(lm.logits(tape, seq.ids, train), targets, seq.ignore_mask());
}

inline double evaluate_loss(ToyLM& lm, const TokenSequence& seq) {
  Tape tape;
  return sequence_loss(tape, lm, seq, false).item();
}

/// One optimizer step on the summed gradient of `batch`; returns the mean loss.
inline double train_step(ToyLM& lm, Adam& opt, std::span<const TokenSequence> batch) {
  opt.zero_grad();
  double total = 0.0;
  for (const auto& seq : batch) {
    Tape tape;
    Var loss = scale(sequence_loss(tape, lm, seq), 1.0 / static_cast<double>(batch.size()));
    tape.backward(loss);
    total += loss.item();
  }
  opt.step();
  return total;
}

}  // namespace streamsynth::seqlm
