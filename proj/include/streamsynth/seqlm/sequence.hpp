#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "streamsynth/error.hpp"

namespace streamsynth::seqlm {

using TokenId = std::size_t;

/// Target value stored at positions that do not contribute to the loss.
inline constexpr TokenId kIgnore = std::numeric_limits<TokenId>::max();

enum class Category { Text, Speech, Start, TurnOfSpeech, End, Filling };

inline const char* category_name(Category c) {
  switch (c) {
    case Category::Text: return "text";
    case Category::Speech: return "speech";
    case Category::Start: return "S";
    case Category::TurnOfSpeech: return "T";
    case Category::End: return "E";
    case Category::Filling: return "FILLING";
  }
  return "?";
}

/// Id layout: [0, text) text tokens, [text, text + speech) speech tokens,
/// then S, T, E and FILLING.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::size_t text_size, std::size_t speech_size) : text_(text_size), speech_(speech_size) {
    if (text_size == 0 || speech_size == 0) throw ConfigError("vocabulary alphabets must be non-empty");
  }

  std::size_t text_size() const { return text_; }
  std::size_t speech_size() const { return speech_; }
  std::size_t size() const { return text_ + speech_ + 4; }

  TokenId text(std::size_t t) const {
    if (t >= text_) throw RangeError("text token " + std::to_string(t) + " outside alphabet of " + std::to_string(text_));
    return t;
  }
  TokenId speech(std::size_t s) const {
    if (s >= speech_)
      throw RangeError("speech token " + std::to_string(s) + " outside alphabet of " + std::to_string(speech_));
    return text_ + s;
  }
  TokenId start() const { return text_ + speech_; }
  TokenId turn() const { return text_ + speech_ + 1; }
  TokenId end() const { return text_ + speech_ + 2; }
  TokenId filling() const { return text_ + speech_ + 3; }

  Category category(TokenId id) const {
    if (id < text_) return Category::Text;
    if (id < text_ + speech_) return Category::Speech;
    switch (id - text_ - speech_) {
      case 0: return Category::Start;
      case 1: return Category::TurnOfSpeech;
      case 2: return Category::End;
      case 3: return Category::Filling;
      default: throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
  }

  std::size_t text_value(TokenId id) const { return id; }
  std::size_t speech_value(TokenId id) const { return id - text_; }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::size_t text_ = 0;
  std::size_t speech_ = 0;
};

/// N text tokens followed by M speech tokens per streaming group.
struct InterleaveConfig {
  std::size_t text_per_group = 5;
  std::size_t speech_per_group = 15;

  void validate() const {
    if (text_per_group < 1) throw ConfigError("interleave: N must be at least 1");
    if (speech_per_group < 1) throw ConfigError("interleave: M must be at least 1");
  }
};

/// LM training sequence: targets[p] is what position p must predict, or
/// kIgnore when loss_mask[p] is false.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<TokenId> targets;
  std::vector<bool> loss_mask;

  std::size_t size() const { return ids.size(); }

  std::vector<bool> ignore_mask() const {
    std::vector<bool> out(loss_mask.size());
    for (std::size_t i = 0; i < loss_mask.size(); ++i) out[i] = !loss_mask[i];
    return out;
  }

  std::size_t scored() const { return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true)); }
};

struct NonStreamOptions {
  /// Score the prediction of T made at the last text position.
  bool score_turn_token = false;
};

/// S, text..., T, speech..., E. Positions S and text are unscored (except the
/// T prediction when enabled); every position from T through the one
/// predicting E is scored.
inline TokenSequence build_nonstream(const Vocabulary& vocab, std::span<const std::size_t> text,
                                     std::span<const std::size_t> speech, NonStreamOptions opts = {}) {
  TokenSequence seq;
  seq.ids.push_back(vocab.start());
  for (auto t : text) seq.ids.push_back(vocab.text(t));
  seq.ids.push_back(vocab.turn());
  for (auto s : speech) seq.ids.push_back(vocab.speech(s));
  seq.ids.push_back(vocab.end());

  const std::size_t turn_pos = text.size() + 1;
  seq.targets.assign(seq.ids.size(), kIgnore);
  seq.loss_mask.assign(seq.ids.size(), false);
  for (std::size_t p = 0; p + 1 < seq.ids.size(); ++p) {
    const bool scored = p >= turn_pos || (opts.score_turn_token && p + 1 == turn_pos);
    if (!scored) continue;
    seq.targets[p] = seq.ids[p + 1];
    seq.loss_mask[p] = true;
  }
  return seq;
}

/// Streaming layout: groups of N text tokens each followed by up to M speech
/// tokens. The position closing a full group's speech predicts FILLING (the
/// next input is either the next text group or T). A group shorter than N
/// means the text ran out, so T follows it immediately; after a full final
/// group T follows that group's speech. Remaining speech and E come last.
inline TokenSequence build_stream(const Vocabulary& vocab, std::span<const std::size_t> text,
                                  std::span<const std::size_t> speech, const InterleaveConfig& cfg) {
  cfg.validate();
  TokenSequence seq;
  std::vector<std::size_t> boundaries;
  seq.ids.push_back(vocab.start());
  std::size_t ti = 0, si = 0;
  auto finish = [&] {
    seq.ids.push_back(vocab.turn());
    for (; si < speech.size(); ++si) seq.ids.push_back(vocab.speech(speech[si]));
    seq.ids.push_back(vocab.end());
  };
  while (true) {
    const std::size_t group = std::min(cfg.text_per_group, text.size() - ti);
    for (std::size_t k = 0; k < group; ++k) seq.ids.push_back(vocab.text(text[ti++]));
    if (group < cfg.text_per_group) {
      finish();
      break;
    }
    const std::size_t take = std::min(cfg.speech_per_group, speech.size() - si);
    for (std::size_t k = 0; k < take; ++k) seq.ids.push_back(vocab.speech(speech[si++]));
    boundaries.push_back(seq.ids.size() - 1);
    if (ti == text.size()) {
      finish();
      break;
    }
  }

  seq.targets.assign(seq.ids.size(), kIgnore);
  seq.loss_mask.assign(seq.ids.size(), false);
  std::size_t b = 0;
  for (std::size_t p = 0; p + 1 < seq.ids.size(); ++p) {
    if (b < boundaries.size() && boundaries[b] == p) {
      seq.targets[p] = vocab.filling();
      seq.loss_mask[p] = true;
      ++b;
      continue;
    }
    const Category here = vocab.category(seq.ids[p]);
    const Category next = vocab.category(seq.ids[p + 1]);
    const bool scored = here == Category::Speech || here == Category::TurnOfSpeech ||
                        (here == Category::Text && next == Category::Speech);
    if (!scored) continue;
    seq.targets[p] = seq.ids[p + 1];
    seq.loss_mask[p] = true;
  }
  return seq;
}

struct Streams {
  std::vector<std::size_t> text;
  std::vector<std::size_t> speech;
  friend bool operator==(const Streams&, const Streams&) = default;
};

/// Parses a streaming sequence back into its text and speech streams,
/// validating the grammar S (text-group speech-run)* T speech* E.
inline Streams deinterleave(const Vocabulary& vocab, std::span<const TokenId> ids, const InterleaveConfig& cfg) {
  cfg.validate();
  Streams out;
  if (ids.empty()) return out;
  auto category_at = [&](std::size_t p) {
    try {
      return vocab.category(ids[p]);
    } catch (const RangeError&) {
      throw ParseError("token id " + std::to_string(ids[p]) + " outside vocabulary", p);
    }
  };
  if (category_at(0) != Category::Start) throw ParseError(std::string("expected S, found ") + category_name(category_at(0)), 0);

  std::size_t p = 1;
  bool speech_exhausted = false;
  // Interleaved phase.
  while (true) {
    const std::size_t group_start = p;
    while (p < ids.size() && p - group_start < cfg.text_per_group && category_at(p) == Category::Text)
      out.text.push_back(vocab.text_value(ids[p++]));
    const std::size_t group = p - group_start;
    if (p == ids.size()) throw ParseError("sequence ends before T", p);
    if (group < cfg.text_per_group) {
      if (category_at(p) != Category::TurnOfSpeech)
        throw ParseError("short text group must be followed by T", p);
      break;
    }
    const std::size_t run_start = p;
    while (p < ids.size() && category_at(p) == Category::Speech) out.speech.push_back(vocab.speech_value(ids[p++]));
    const std::size_t run = p - run_start;
    if (p == ids.size()) throw ParseError("sequence ends before T", p);
    if (run > cfg.speech_per_group)
      throw ParseError("speech run of " + std::to_string(run) + " exceeds M=" + std::to_string(cfg.speech_per_group),
                       run_start + cfg.speech_per_group);
    if (run > 0 && speech_exhausted) throw ParseError("speech resumes after a short speech run", run_start);
    if (run < cfg.speech_per_group) speech_exhausted = true;
    const Category c = category_at(p);
    if (c == Category::TurnOfSpeech) break;
    if (c != Category::Text) throw ParseError(std::string("unexpected ") + category_name(c) + " before T", p);  }
  ++p;  // T
  const std::size_t tail_start = p;
  while (p < ids.size() && category_at(p) == Category::Speech) out.speech.push_back(vocab.speech_value(ids[p++]));
  if (p > tail_start && speech_exhausted) throw ParseError("speech after T although speech ran out earlier", tail_start);
  if (p == ids.size()) throw ParseError("missing E", p);
  if (category_at(p) != Category::End)
    throw ParseError(std::string("unexpected ") + category_name(category_at(p)) + " after T", p);
  if (p + 1 != ids.size()) throw ParseError("token after E", p + 1);
  return out;
}

/// Parses S text... T speech... E.
inline Streams parse_nonstream(const Vocabulary& vocab, std::span<const TokenId> ids) {
  Streams out;
  if (ids.empty()) return out;
  if (vocab.category(ids[0]) != Category::Start) throw ParseError("expected S", 0);
  std::size_t p = 1;
  while (p < ids.size() && vocab.category(ids[p]) == Category::Text) out.text.push_back(ids[p++]);
  if (p == ids.size() || vocab.category(ids[p]) != Category::TurnOfSpeech) throw ParseError("expected T", p);
  ++p;
  while (p < ids.size() && vocab.category(ids[p]) == Category::Speech) out.speech.push_back(vocab.speech_value(ids[p++]));
  if (p == ids.size() || vocab.category(ids[p]) != Category::End) throw ParseError("expected E", p);
  if (p + 1 != ids.size()) throw ParseError("token after E", p + 1);
  return out;
}

enum class Mode { Streaming, NonStreaming };

/// Initial LM context plus the text the generation driver still has to feed.
struct Prompt {
  std::vector<TokenId> ids;
  std::vector<std::size_t> pending_text;  // fed N at a time on FILLING
  bool turn_emitted = false;
  std::size_t speech_in_group = 0;  // speech tokens already in the open group
};

/// In-context-learning prompt. Non-streaming: S, prompt_text, text, T,
/// prompt_speech. Streaming: prompt and target text form one stream that is
/// interleaved N:M with the prompt speech until the prompt speech runs out;
/// the remaining text is left to the driver.
inline Prompt build_icl_prompt(const Vocabulary& vocab, std::span<const std::size_t> prompt_text,
                               std::span<const std::size_t> text, std::span<const std::size_t> prompt_speech, Mode mode,
                               const InterleaveConfig& cfg) {
  cfg.validate();
  Prompt p;
  p.ids.push_back(vocab.start());
  std::vector<std::size_t> all(prompt_text.begin(), prompt_text.end());
  all.insert(all.end(), text.begin(), text.end());
  if (mode == Mode::NonStreaming) {
    for (auto t : all) p.ids.push_back(vocab.text(t));
    p.ids.push_back(vocab.turn());
    for (auto s : prompt_speech) p.ids.push_back(vocab.speech(s));
    p.turn_emitted = true;
    return p;
  }
  std::size_t ti = 0, si = 0;
  while (true) {
    const std::size_t group = std::min(cfg.text_per_group, all.size() - ti);
    for (std::size_t k = 0; k < group; ++k) p.ids.push_back(vocab.text(all[ti++]));
    if (group < cfg.text_per_group) {
      p.ids.push_back(vocab.turn());
      p.turn_emitted = true;
      for (; si < prompt_speech.size(); ++si) p.ids.push_back(vocab.speech(prompt_speech[si]));
      break;
    }
    const std::size_t take = std::min(cfg.speech_per_group, prompt_speech.size() - si);
    for (std::size_t k = 0; k < take; ++k) p.ids.push_back(vocab.speech(prompt_speech[si++]));
    p.speech_in_group = take;
    if (take < cfg.speech_per_group || si == prompt_speech.size()) break;  // model continues or signals FILLING
    if (ti == all.size()) {
      p.ids.push_back(vocab.turn());
      p.turn_emitted = true;
      for (; si < prompt_speech.size(); ++si) p.ids.push_back(vocab.speech(prompt_speech[si]));
      break;
    }
  }
  p.pending_text.assign(all.begin() + static_cast<std::ptrdiff_t>(ti), all.end());
  return p;
}

/// Zero-shot prompt for a speaker-fine-tuned model. Non-streaming: S, text, T.
/// Streaming: S followed by the first group of text.
inline Prompt build_sft_prompt(const Vocabulary& vocab, std::span<const std::size_t> text, Mode mode,
                               const InterleaveConfig& cfg) {
  return build_icl_prompt(vocab, {}, text, {}, mode, cfg);
}

}  // namespace streamsynth::seqlm
