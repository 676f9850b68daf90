#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "streamsynth/rng.hpp"
#include "streamsynth/seqlm/sequence.hpp"

namespace streamsynth::seqlm {

struct Pair {
  std::vector<std::size_t> text;
  std::vector<std::size_t> speech;
  friend bool operator==(const Pair&, const Pair&) = default;
};

/// Every text token t expands to three speech tokens
/// ((7t + 1) mod S, (13t + 5) mod S, (29t + 11) mod S).
inline constexpr std::array<std::size_t, 3> kMotifMultiplier = {7, 13, 29};
inline constexpr std::array<std::size_t, 3> kMotifOffset = {1, 5, 11};

inline std::array<std::size_t, 3> motif(std::size_t text_token, std::size_t speech_size) {
  std::array<std::size_t, 3> out{};
  for (std::size_t j = 0; j < 3; ++j) out[j] = (text_token * kMotifMultiplier[j] + kMotifOffset[j]) % speech_size;
  return out;
}

inline std::vector<std::size_t> motif_speech(std::span<const std::size_t> text, std::size_t speech_size) {
  std::vector<std::size_t> out;
  out.reserve(3 * text.size());
  for (auto t : text)
    for (auto s : motif(t, speech_size)) out.push_back(s);
  return out;
}

struct CorpusConfig {
  std::size_t pairs = 50;
  std::size_t min_text = 1;
  std::size_t max_text = 12;
  std::size_t text_size = 64;
  std::size_t speech_size = 6561;

  void validate() const {
    if (min_text > max_text) throw ConfigError("corpus: min_text exceeds max_text");
    if (text_size == 0 || speech_size == 0) throw ConfigError("corpus: alphabets must be non-empty");
  }
};

/// Uniform random texts with motif-expanded speech.
inline std::vector<Pair> make_corpus(const CorpusConfig& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_int_distribution<std::size_t> len(cfg.min_text, cfg.max_text);
  std::uniform_int_distribution<std::size_t> tok(0, cfg.text_size - 1);
  std::vector<Pair> out(cfg.pairs);
  for (auto& p : out) {
    p.text.resize(len(rng));
    for (auto& t : p.text) t = tok(rng);
    p.speech = motif_speech(p.text, cfg.speech_size);
  }
  return out;
}

/// Exact next-token rule of the motif corpus for prompts without speech. In
/// streaming layouts it emits the speech of the text seen so far, at most M
/// per text group, and FILLING when the group is used up; after T it finishes
/// the speech and emits E. Equals build_stream whenever M <= 3N.
class MotifOracle {
 public:
  MotifOracle(Vocabulary vocab, InterleaveConfig cfg) : vocab_(vocab), cfg_(cfg) { cfg_.validate(); }

  std::vector<double> next_logits(std::span<const TokenId> ids) const {
    std::vector<std::size_t> text;
    std::size_t speech = 0;
    bool turn = false;
    for (TokenId id : ids) {
      const Category c = vocab_.category(id);
      if (c == Category::Text) text.push_back(vocab_.text_value(id));
      if (c == Category::Speech) ++speech;
      if (c == Category::TurnOfSpeech) turn = true;
    }
    const std::size_t available = 3 * text.size();
    const std::size_t groups = (text.size() + cfg_.text_per_group - 1) / cfg_.text_per_group;
    TokenId next;
    if (turn) {
      next = speech < available ? vocab_.speech(motif(text[speech / 3], vocab_.speech_size())[speech % 3]) : vocab_.end();
    } else {
      next = speech < available && speech < groups * cfg_.speech_per_group
                 ? vocab_.speech(motif(text[speech / 3], vocab_.speech_size())[speech % 3])
                 : vocab_.filling();
    }
    std::vector<double> logits(vocab_.size(), 0.0);
    logits[next] = 1.0;
    return logits;
  }

 private:
  Vocabulary vocab_;
  InterleaveConfig cfg_;
};

/// Both layouts of every pair, as used for unified training.
inline std::vector<TokenSequence> unified_sequences(const Vocabulary& vocab, std::span<const Pair> pairs,
                                                    const InterleaveConfig& cfg, NonStreamOptions opts = {}) {
  std::vector<TokenSequence> out;
  for (const auto& p : pairs) {
    out.push_back(build_nonstream(vocab, p.text, p.speech, opts));
    out.push_back(build_stream(vocab, p.text, p.speech, cfg));
  }
  return out;
}

}  // namespace streamsynth::seqlm
