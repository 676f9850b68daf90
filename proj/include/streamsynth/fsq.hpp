#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "streamsynth/nn.hpp"

namespace streamsynth::fsq {

/// Low-rank dimensionality D and per-dimension bound K; the codebook has
/// (2K+1)^D entries.
struct FsqConfig {
  std::size_t dim = 8;
  int bound = 1;
  std::size_t hidden = 16;  // width of the space being projected
  bool down_bias = true;
  bool up_bias = true;

  std::uint64_t radix() const { return 2 * static_cast<std::uint64_t>(bound) + 1; }

  std::uint64_t codebook_size() const {
    std::uint64_t n = 1;
    for (std::size_t j = 0; j < dim; ++j) n *= radix();
    return n;
  }

  void validate() const {
    if (dim == 0) throw ConfigError("fsq: D must be positive");
    if (bound <= 0) throw ConfigError("fsq: K must be positive");
    if (hidden == 0) throw ConfigError("fsq: hidden width must be positive");
    if (std::log2(static_cast<double>(radix())) * static_cast<double>(dim) > 31.0)
      throw ConfigError("fsq: codebook (2K+1)^D must fit in 31 bits");
  }
};

struct SpeechToken {
  std::uint32_t value = 0;
  auto operator<=>(const SpeechToken&) const = default;
};

/// Clamp to [-K, K], then round to nearest with ties away from zero.
inline int bounded_round(double x, int bound) {
  const double k = static_cast<double>(bound);
  return static_cast<int>(std::round(std::clamp(x, -k, k)));
}

inline std::vector<int> bounded_round(std::span<const double> h, int bound) {
  std::vector<int> out(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) out[j] = bounded_round(h[j], bound);
  return out;
}

/// Mixed-radix index with digits offset by +K:
/// mu = sum_j (h_j + K) * (2K+1)^j.
inline SpeechToken encode_index(std::span<const int> digits, int bound) {
  const std::uint64_t radix = 2 * static_cast<std::uint64_t>(bound) + 1;
  std::uint64_t mu = 0, place = 1;
  for (int h : digits) {
    if (h < -bound || h > bound)
      throw RangeError("encode_index: digit " + std::to_string(h) + " outside [-" + std::to_string(bound) + ", " +
                       std::to_string(bound) + "]");
    mu += static_cast<std::uint64_t>(h + bound) * place;
    place *= radix;
  }
  return SpeechToken{static_cast<std::uint32_t>(mu)};
}

/// Inverse of encode_index: digit_j = floor(mu / (2K+1)^j) mod (2K+1), minus K.
inline std::vector<int> decode_index(SpeechToken token, std::size_t dim, int bound) {
  const std::uint64_t radix = 2 * static_cast<std::uint64_t>(bound) + 1;
  std::uint64_t size = 1;
  for (std::size_t j = 0; j < dim; ++j) size *= radix;
  if (token.value >= size)
    throw RangeError("decode_index: token " + std::to_string(token.value) + " outside codebook of " +
                     std::to_string(size));
  std::vector<int> digits(dim);
  std::uint64_t rest = token.value;
  for (std::size_t j = 0; j < dim; ++j) {
    digits[j] = static_cast<int>(rest % radix) - bound;
    rest /= radix;
  }
  return digits;
}

/// Table of every codebook entry's digit vector, row mu = decode_index(mu).
inline Tensor digit_table(const FsqConfig& cfg) {
  const std::uint64_t size = cfg.codebook_size();
  Tensor table({static_cast<std::size_t>(size), cfg.dim});
  for (std::uint64_t mu = 0; mu < size; ++mu) {
    const auto d = decode_index(SpeechToken{static_cast<std::uint32_t>(mu)}, cfg.dim, cfg.bound);
    for (std::size_t j = 0; j < cfg.dim; ++j) table(static_cast<std::size_t>(mu), j) = d[j];
  }
  return table;
}

struct Utilization {
  double fraction = 0.0;
  std::size_t distinct = 0;
  std::vector<std::size_t> histogram;  // one bin per code
};

inline Utilization utilization(std::span<const SpeechToken> tokens, const FsqConfig& cfg) {
  Utilization u;
  u.histogram.assign(static_cast<std::size_t>(cfg.codebook_size()), 0);
  for (SpeechToken t : tokens) {
    if (t.value >= u.histogram.size()) throw RangeError("utilization: token " + std::to_string(t.value) + " out of range");
    if (u.histogram[t.value]++ == 0) ++u.distinct;
  }
  if (!tokens.empty()) u.fraction = static_cast<double>(u.distinct) / static_cast<double>(u.histogram.size());
  return u;
}

/// Projection pair around the bounded rounding.
class FsqCodec {
 public:
  struct Quantized {
    Var projected;                        // Proj_down(H), before rounding
    Var codes;                            // bounded-rounded values, straight-through
    Var reconstructed;                    // Proj_up(codes)
    std::vector<SpeechToken> tokens;      // one per row
  };

  FsqCodec() = default;
  FsqCodec(FsqConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    proj_down_ = Linear(cfg_.hidden, cfg_.dim, rng, cfg_.down_bias, 2.0);
    proj_up_ = Linear(cfg_.dim, cfg_.hidden, rng, cfg_.up_bias);
  }

  const FsqConfig& config() const { return cfg_; }
  Linear& proj_down() { return proj_down_; }
  Linear& proj_up() { return proj_up_; }

  /// Rounds Proj_down(H) and projects back up. The rounding is bypassed on the
  /// backward pass.
  Quantized quantize(Tape& tape, Var hidden, bool train = true) {
    Quantized q;
    q.projected = proj_down_(tape, hidden, train);
    const int k = cfg_.bound;
    q.codes = straight_through(q.projected, [k](double x) { return static_cast<double>(bounded_round(x, k)); });
    q.reconstructed = proj_up_(tape, q.codes, train);
    const Tensor& c = q.codes.value();
    std::vector<int> digits(cfg_.dim);
    for (std::size_t i = 0; i < c.rows(); ++i) {
      for (std::size_t j = 0; j < cfg_.dim; ++j) digits[j] = static_cast<int>(c(i, j));
      q.tokens.push_back(encode_index(digits, k));
    }
    return q;
  }

  /// Recovered low-rank codes for a token sequence, shape [T, D].
  Tensor recover_codes(std::span<const SpeechToken> tokens) const {
    if (tokens.empty()) throw RangeError("recover_codes: empty token sequence");
    Tensor out({tokens.size(), cfg_.dim});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto d = decode_index(tokens[i], cfg_.dim, cfg_.bound);
      for (std::size_t j = 0; j < cfg_.dim; ++j) out(i, j) = d[j];
    }
    return out;
  }

  Var up(Tape& tape, Var codes, bool train = true) { return proj_up_(tape, codes, train); }

  void collect(ParameterSet& ps, const std::string& prefix) {
    proj_down_.collect(ps, prefix + ".proj_down");
    proj_up_.collect(ps, prefix + ".proj_up");
  }

 private:
  FsqConfig cfg_;
  Linear proj_down_;
  Linear proj_up_;
};

/// Toy supervised tokenizer: two-layer encoder, FSQ bottleneck, and a linear
/// classifier head predicting the text token behind each frame.
struct ToyTokenizer {
  Linear enc1, enc2;
  FsqCodec codec;
  Linear head;

  ToyTokenizer() = default;
  ToyTokenizer(std::size_t input_dim, std::size_t text_vocab, FsqConfig cfg, Rng& rng)
      : enc1(input_dim, cfg.hidden, rng), enc2(cfg.hidden, cfg.hidden, rng), codec(cfg, rng),
        head(cfg.hidden, text_vocab, rng) {}

  Var encode(Tape& tape, Var features, bool train = true) {
    return enc2(tape, tanh(enc1(tape, features, train)), train);
  }

  Var classify(Tape& tape, Var reconstructed, bool train = true) { return head(tape, tanh(reconstructed), train); }

  struct Output {
    FsqCodec::Quantized quantized;
    Var logits;
  };

  Output forward(Tape& tape, Var features, bool train = true) {
    Output out{codec.quantize(tape, encode(tape, features, train), train), {}};
    out.logits = classify(tape, out.quantized.reconstructed, train);
    return out;
  }

  ParameterSet parameters() {
    ParameterSet ps;
    enc1.collect(ps, "enc1");
    enc2.collect(ps, "enc2");
    codec.collect(ps, "fsq");
    head.collect(ps, "head");
    return ps;
  }
};

/// Nearest-neighbour vector quantizer with a fixed codebook; the baseline the
/// FSQ utilization is compared against.
inline std::vector<SpeechToken> nearest_neighbor_codes(const Tensor& points, const Tensor& codebook) {
  std::vector<SpeechToken> out;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    double best = INFINITY;
    std::uint32_t arg = 0;
    for (std::size_t c = 0; c < codebook.rows(); ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < points.cols(); ++j) {
        const double diff = points(i, j) - codebook(c, j);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = static_cast<std::uint32_t>(c);
      }
    }
    out.push_back(SpeechToken{arg});
  }
  return out;
}

}  // namespace streamsynth::fsq
