#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <string_view>

#include "streamsynth/error.hpp"
#include "streamsynth/tensor.hpp"

namespace streamsynth::cfm {

enum class MaskKind { NonCausal, FullCausal, ChunkM, Chunk2M };

inline constexpr MaskKind kAllMaskKinds[] = {MaskKind::NonCausal, MaskKind::FullCausal, MaskKind::ChunkM,
                                            MaskKind::Chunk2M};

inline const char* mask_name(MaskKind k) {
  switch (k) {
    case MaskKind::NonCausal: return "noncausal";
    case MaskKind::FullCausal: return "causal";
    case MaskKind::ChunkM: return "chunk";
    case MaskKind::Chunk2M: return "chunk2";
  }
  return "?";
}

inline MaskKind parse_mask(std::string_view name) {
  for (MaskKind k : kAllMaskKinds)
    if (name == mask_name(k)) return k;
  throw ConfigError("unknown mask kind '" + std::string(name) + "' (expected noncausal, causal, chunk or chunk2)");
}

struct MaskSpec {
  MaskKind kind = MaskKind::ChunkM;
  std::size_t chunk = 30;  // frames

  bool causal() const { return kind != MaskKind::NonCausal; }

  void validate() const {
    if (chunk < 1) throw ConfigError("mask: chunk must be at least 1 frame");
  }

  /// Largest column frame i may attend to, ignoring the sequence end.
  std::size_t reach(std::size_t i, std::size_t length) const {
    switch (kind) {
      case MaskKind::NonCausal: return length - 1;
      case MaskKind::FullCausal: return i;
      case MaskKind::ChunkM: return (i / chunk + 1) * chunk - 1;
      case MaskKind::Chunk2M: return (i / chunk + 2) * chunk - 1;
    }
    return i;
  }
};

/// Allowed (row attends to column) pairs. Every causal kind allows the
/// prefix [0, reach(i)].
inline BoolMatrix build_mask(const MaskSpec& spec, std::size_t length) {
  spec.validate();
  if (length < 1) throw DimensionError("build_mask: length must be at least 1");
  BoolMatrix m(length);
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t end = std::min(spec.reach(i, length), length - 1);
    for (std::size_t j = 0; j <= end; ++j) m.set(i, j, true);
  }
  return m;
}

/// t' = 1 - cos(pi t / 2).
inline double cosine_schedule(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw RangeError("cosine_schedule: t must lie in [0, 1]");
  return 1.0 - std::cos(0.5 * std::numbers::pi * t);
}

/// (1 - t) x0 + t x1.
inline Tensor ot_path(const Tensor& x0, const Tensor& x1, double t) {
  if (x0.shape != x1.shape)
    throw DimensionError("ot_path: shape " + shape_string(x0.shape) + " vs " + shape_string(x1.shape));
  if (!(t >= 0.0 && t <= 1.0)) throw RangeError("ot_path: t must lie in [0, 1]");
  Tensor out(x0.shape);
  for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = (1.0 - t) * x0.data[k] + t * x1.data[k];
  return out;
}

/// x1 - x0, the field that transports x0 to x1 along the straight path.
inline Tensor target_field(const Tensor& x0, const Tensor& x1) {
  if (x0.shape != x1.shape)
    throw DimensionError("target_field: shape " + shape_string(x0.shape) + " vs " + shape_string(x1.shape));
  Tensor out(x0.shape);
  for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = x1.data[k] - x0.data[k];
  return out;
}

}  // namespace streamsynth::cfm
