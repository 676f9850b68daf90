#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "streamsynth/rng.hpp"
#include "streamsynth/seqlm/sequence.hpp"

namespace streamsynth::seqlm {

/// Anything that scores the next token given a context.
template <class M>
concept TokenPredictor = requires(const M& m, std::span<const TokenId> ids) {
  { m.next_logits(ids) } -> std::convertible_to<std::vector<double>>;
};

struct SamplerConfig {
  enum class Kind { Greedy, TopK };
  Kind kind = Kind::Greedy;
  std::size_t top_k = 5;
  double temperature = 1.0;
};

inline std::size_t default_max_steps(std::size_t text_len) { return 4 * (text_len * 3 + 16); }

struct GenerationConfig {
  Mode mode = Mode::Streaming;
  InterleaveConfig interleave;
  SamplerConfig sampler;
  std::size_t max_steps = 0;  // 0: default_max_steps(total text length)
  std::uint64_t seed = 0;
};

struct Chunk {
  std::size_t index = 0;
  std::vector<std::size_t> speech;  // speech alphabet values
  std::size_t steps = 0;            // LM evaluations performed when the chunk left
};

/// Picks among `allowed` ids. Greedy takes the largest logit (lowest id on
/// ties); top-k samples from the k best allowed ids at the given temperature.
inline TokenId choose_token(std::span<const double> logits, std::span<const TokenId> allowed,
                            const SamplerConfig& cfg, Rng& rng) {
  if (allowed.empty()) throw Error("sampler: empty candidate set");
  std::vector<TokenId> cand(allowed.begin(), allowed.end());
  std::stable_sort(cand.begin(), cand.end(), [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
  if (cfg.kind == SamplerConfig::Kind::Greedy) return cand.front();
  if (cfg.top_k == 0) throw ConfigError("sampler: top_k must be positive");
  if (!(cfg.temperature > 0.0)) throw ConfigError("sampler: temperature must be positive");
  cand.resize(std::min(cfg.top_k, cand.size()));
  std::vector<double> w(cand.size());
  for (std::size_t i = 0; i < cand.size(); ++i) w[i] = std::exp((logits[cand[i]] - logits[cand[0]]) / cfg.temperature);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  return cand[pick(rng)];
}

/// Autoregressive driver. In streaming mode a FILLING prediction makes the
/// driver append the next N source text tokens (or T once the text is used
/// up), and speech is handed out every M tokens. Non-streaming mode hands out
/// everything once E appears.
template <TokenPredictor Model>
class Generator {
 public:
  Generator(const Model& model, const Vocabulary& vocab, Prompt prompt, GenerationConfig cfg)
      : model_(&model), vocab_(vocab), cfg_(cfg), ids_(std::move(prompt.ids)), pending_(std::move(prompt.pending_text)),
        turn_(prompt.turn_emitted), rng_(cfg.seed) {
    cfg_.interleave.validate();
    if (cfg_.max_steps == 0) {
      std::size_t text_len = pending_.size();
      for (TokenId id : ids_)
        if (vocab_.category(id) == Category::Text) ++text_len;
      cfg_.max_steps = default_max_steps(text_len);
    }
    if (cfg_.mode == Mode::NonStreaming && !turn_) {
      for (auto t : pending_) ids_.push_back(vocab_.text(t));
      pending_.clear();
      ids_.push_back(vocab_.turn());
      turn_ = true;
    }
  }

  /// Next chunk of speech, or nullopt once generation has finished.
  std::optional<Chunk> next() {
    while (!finished_ || !buffer_.empty())
      if (auto c = advance()) return c;
    return std::nullopt;
  }

  /// One LM evaluation. Returns a chunk if this step completed one; once
  /// generation stops the remaining speech is returned as a final chunk.
  std::optional<Chunk> advance() {
    if (!finished_ && steps_ == cfg_.max_steps) {
      finished_ = true;
      truncated_ = true;
    }
    if (finished_) {
      if (!buffer_.empty()) return flush();
      return std::nullopt;
    }
    const TokenId tok = step();
    const Category c = vocab_.category(tok);
    if (c == Category::Speech) {
      ids_.push_back(tok);
      speech_.push_back(vocab_.speech_value(tok));
      buffer_.push_back(vocab_.speech_value(tok));
      if (cfg_.mode == Mode::Streaming && buffer_.size() == cfg_.interleave.speech_per_group) return flush();
    } else if (c == Category::Filling) {
      filled_.push_back(ids_.size() - 1);
      const std::size_t take = std::min(cfg_.interleave.text_per_group, pending_.size());
      for (std::size_t k = 0; k < take; ++k) ids_.push_back(vocab_.text(pending_[k]));
      pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(take));
      if (take < cfg_.interleave.text_per_group) {
        ids_.push_back(vocab_.turn());
        turn_ = true;
      }
    } else {
      ids_.push_back(tok);
      finished_ = true;
      if (!buffer_.empty()) return flush();
    }
    return std::nullopt;
  }

  /// Runs to completion and returns every chunk.
  std::vector<Chunk> run() {
    std::vector<Chunk> out;
    while (auto c = next()) out.push_back(std::move(*c));
    return out;
  }

  bool finished() const { return finished_; }
  bool truncated() const { return truncated_; }
  std::size_t steps() const { return steps_; }
  const std::vector<TokenId>& sequence() const { return ids_; }
  const std::vector<std::size_t>& speech() const { return speech_; }
  /// Text tokens placed in the sequence so far, prompt included.
  std::size_t text_consumed() const {
    return static_cast<std::size_t>(
        std::count_if(ids_.begin(), ids_.end(), [&](TokenId id) { return vocab_.category(id) == Category::Text; }));
  }
  std::size_t text_pending() const { return pending_.size(); }
  /// Positions whose prediction was FILLING.
  const std::vector<std::size_t>& filling_positions() const { return filled_; }

 private:
  TokenId step() {
    const std::vector<double> logits = model_->next_logits(ids_);
    if (logits.size() != vocab_.size()) throw DimensionError("generate: logits size does not match vocabulary");
    if (allowed_.empty()) {
      for (std::size_t s = 0; s < vocab_.speech_size(); ++s) allowed_.push_back(vocab_.speech(s));
      allowed_.push_back(0);  // replaced below
    }
    allowed_.back() = (cfg_.mode == Mode::Streaming && !turn_) ? vocab_.filling() : vocab_.end();
    ++steps_;
    return choose_token(logits, allowed_, cfg_.sampler, rng_);
  }

  Chunk flush() {
    Chunk c{chunks_++, std::move(buffer_), steps_};
    buffer_.clear();
    return c;
  }

  const Model* model_;
  Vocabulary vocab_;
  GenerationConfig cfg_;
  std::vector<TokenId> ids_;
  std::vector<std::size_t> pending_;
  bool turn_ = false;
  Rng rng_;
  std::vector<TokenId> allowed_;
  std::vector<std::size_t> buffer_, speech_, filled_;
  std::size_t steps_ = 0, chunks_ = 0;
  bool finished_ = false, truncated_ = false;
};

struct GenerationResult {
  std::vector<Chunk> chunks;
  std::vector<std::size_t> speech;
  std::vector<TokenId> sequence;
  bool truncated = false;
  std::size_t steps = 0;
};

template <TokenPredictor Model>
GenerationResult generate(const Model& model, const Vocabulary& vocab, Prompt prompt, const GenerationConfig& cfg) {
  Generator<Model> gen(model, vocab, std::move(prompt), cfg);
  GenerationResult r;
  r.chunks = gen.run();
  r.speech = gen.speech();
  r.sequence = gen.sequence();
  r.truncated = gen.truncated();
  r.steps = gen.steps();
  return r;
}

/// Text-to-speech generation without a speaker prompt.
template <TokenPredictor Model>
GenerationResult synthesize(const Model& model, const Vocabulary& vocab, std::span<const std::size_t> text,
                            const GenerationConfig& cfg) {
  return generate(model, vocab, build_sft_prompt(vocab, text, cfg.mode, cfg.interleave), cfg);
}

}  // namespace streamsynth::seqlm
