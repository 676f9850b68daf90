#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "streamsynth/cfm/sampling.hpp"
#include "streamsynth/seqlm/generate.hpp"

namespace streamsynth::latency {

/// Per-token compute times in seconds: TTS language model, flow matching,
/// vocoder, and the upstream text LLM of a chat system.
struct StageTiming {
  double d_lm = 0.0;
  double d_fm = 0.0;
  double d_voc = 0.0;
  double d_llm = 0.0;

  void validate() const {
    for (double d : {d_lm, d_fm, d_voc, d_llm})
      if (!(d >= 0.0) || !std::isfinite(d)) throw ConfigError("timing: stage delays must be finite and non-negative");
  }
  StageTiming scaled(double c) const { return {c * d_lm, c * d_fm, c * d_voc, c * d_llm}; }
};

/// M (d_lm + d_fm + d_voc): first-package latency of a non-overlapped
/// pipeline that hands over packages of M speech tokens.
inline double l_tts(std::size_t m, const StageTiming& t) {
  if (m < 1) throw ConfigError("l_tts: M must be at least 1");
  t.validate();
  const double md = static_cast<double>(m);
  return md * t.d_lm + md * t.d_fm + md * t.d_voc;
}

/// N d_llm + l_tts(M): upper bound on chat first-package latency when the
/// TTS model starts after the first N text tokens.
inline double l_chat_bound(std::size_t n, std::size_t m, const StageTiming& t) {
  if (n < 1) throw ConfigError("l_chat_bound: N must be at least 1");
  return static_cast<double>(n) * t.d_llm + l_tts(m, t);
}

/// Where the first package's time went. `wait` is time the package spent
/// queued in front of a busy stage.
struct Breakdown {
  double llm = 0.0;  // waiting for upstream text
  double lm = 0.0;
  double fm = 0.0;
  double voc = 0.0;
  double wait = 0.0;
  double total() const { return llm + lm + fm + voc + wait; }
};

struct PackageTiming {
  std::size_t begin = 0, end = 0;  // speech token range
  std::size_t lm_steps = 0;        // LM evaluations done when the package became ready
  double llm_wait = 0.0;           // upstream text wait accumulated by then
  double ready = 0.0, fm_start = 0.0, fm_done = 0.0, voc_start = 0.0, voc_done = 0.0;
  std::size_t tokens() const { return end - begin; }
};

struct LatencyReport {
  double first_package_seconds = 0.0;
  std::size_t tokens_before_first_package = 0;
  Breakdown breakdown;
  std::vector<PackageTiming> packages;
  double total_seconds = 0.0;
  std::size_t lm_steps = 0;
  std::vector<std::size_t> speech;
  std::vector<Tensor> audio;  // vocoder output per package, when rendered
};

/// ComputeOnly converts each package as soon as its M tokens exist, treating
/// the package end as the sequence end for the look-ahead. Lookahead waits
/// until every frame of the package is final (cfm::Streamer rule), so the
/// audio equals offline synthesis.
enum class FlowMode { ComputeOnly, Lookahead };

struct SimulationConfig {
  seqlm::InterleaveConfig interleave;
  seqlm::Mode mode = seqlm::Mode::Streaming;
  seqlm::SamplerConfig sampler;
  std::uint64_t seed = 0;
  bool chat = false;     // text arrives from an upstream LLM at d_llm per token
  bool overlap = false;  // stages run concurrently instead of one package at a time
  FlowMode flow = FlowMode::ComputeOnly;
  cfm::SampleConfig sample{.nfe = 10, .beta = 0.7, .seed = 0, .mask = {cfm::MaskKind::FullCausal, 30}};
  bool render = true;
};

/// Stand-in vocoder: passes frames through; its cost is d_voc per token.
struct StubVocoder {
  Tensor operator()(const Tensor& frames) const { return frames; }
};

namespace detail {

inline Tensor rows(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out({end - begin, t.cols()});
  std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(begin * t.cols()),
            t.data.begin() + static_cast<std::ptrdiff_t>(end * t.cols()), out.data.begin());
  return out;
}

}  // namespace detail

/// Runs the real streaming generator, flow-matching sampler and stub vocoder
/// against a virtual clock and reports when the first package leaves the
/// vocoder. No wall-clock time is involved.
template <seqlm::TokenPredictor Model>
LatencyReport simulate(const Model& lm, const seqlm::Vocabulary& vocab, std::span<const std::size_t> text,
                       cfm::CfmModel* flow, const cfm::Condition& base, const StageTiming& timing,
                       const SimulationConfig& cfg) {
  timing.validate();
  cfg.interleave.validate();
  if ((cfg.render || cfg.flow == FlowMode::Lookahead) && flow == nullptr)
    throw ConfigError("simulate: a flow-matching model is required to render or to apply the look-ahead rule");
  std::optional<cfm::Streamer> rule;
  if (cfg.flow == FlowMode::Lookahead) rule.emplace(*flow, base, cfg.sample);

  seqlm::GenerationConfig gcfg;
  gcfg.mode = cfg.mode;
  gcfg.interleave = cfg.interleave;
  gcfg.sampler = cfg.sampler;
  gcfg.seed = cfg.seed;
  seqlm::Generator<Model> gen(lm, vocab, seqlm::build_sft_prompt(vocab, text, cfg.mode, cfg.interleave), gcfg);

  auto text_ready = [&](std::size_t consumed) {
    return cfg.chat ? static_cast<double>(consumed) * timing.d_llm : 0.0;
  };

  LatencyReport r;
  double lm_clock = 0.0, llm_wait = 0.0;
  std::vector<double> token_time;  // production time of each speech token
  std::vector<PackageTiming> pending;
  std::size_t next_fm = 0;
  double fm_free = 0.0, voc_free = 0.0;

  // One LM evaluation on the LM clock; false once the generator is done.
  auto lm_step = [&]() {
    if (gen.finished()) return false;
    const double start = std::max(lm_clock, text_ready(gen.text_consumed()));
    llm_wait += start - lm_clock;
    lm_clock = start;
    const std::size_t before = gen.steps();
    auto chunk = gen.advance();
    lm_clock += static_cast<double>(gen.steps() - before) * timing.d_lm;
    while (token_time.size() < gen.speech().size()) token_time.push_back(lm_clock);
    if (chunk) {
      PackageTiming p;
      p.begin = gen.speech().size() - chunk->speech.size();
      p.end = gen.speech().size();
      p.ready = lm_clock;  // handed over by the generator
      pending.push_back(p);
    }
    return true;
  };

  // Earliest time package k can enter the flow stage, or nullopt if the LM
  // has not yet produced what it needs.
  auto ready_time = [&](const PackageTiming& p) -> std::optional<double> {
    if (cfg.flow == FlowMode::ComputeOnly) return p.ready;
    const std::size_t produced = gen.speech().size();
    for (std::size_t known = p.end; known <= produced; ++known)
      if (rule->safe_frames(known) >= cfm::kUpsample * p.end) return std::max(p.ready, token_time[known - 1]);
    if (gen.finished()) return lm_clock;
    return std::nullopt;
  };

  auto run_package = [&](PackageTiming& p, double ready, double& fm_at, double& voc_at) {
    p.ready = ready;
    p.fm_start = std::max(ready, fm_at);
    p.fm_done = p.fm_start + static_cast<double>(p.tokens()) * timing.d_fm;
    fm_at = p.fm_done;
    p.voc_start = std::max(p.fm_done, voc_at);
    p.voc_done = p.voc_start + static_cast<double>(p.tokens()) * timing.d_voc;
    voc_at = p.voc_done;
    r.packages.push_back(p);
  };

  if (cfg.overlap) {
    // The LM never blocks on downstream stages.
    std::vector<double> ready_at;
    std::vector<std::size_t> steps_at;
    std::vector<double> wait_at;
    while (lm_step()) {
      for (std::size_t k = ready_at.size(); k < pending.size(); ++k) {
        ready_at.push_back(-1.0);
        steps_at.push_back(0);
        wait_at.push_back(0.0);
      }
      for (std::size_t k = 0; k < pending.size(); ++k)
        if (ready_at[k] < 0.0)
          if (auto t = ready_time(pending[k])) {
            ready_at[k] = *t;
            steps_at[k] = gen.steps();
            wait_at[k] = llm_wait;
          }
    }
    for (std::size_t k = 0; k < pending.size(); ++k) {
      if (ready_at[k] < 0.0) {
        ready_at[k] = lm_clock;
        steps_at[k] = gen.steps();
        wait_at[k] = llm_wait;
      }
      pending[k].lm_steps = steps_at[k];
      pending[k].llm_wait = wait_at[k];
      run_package(pending[k], ready_at[k], fm_free, voc_free);
    }
  } else {
    // One worker: a runnable package goes through flow and vocoder before
    // the LM resumes.
    for (;;) {
      if (next_fm < pending.size())
        if (auto t = ready_time(pending[next_fm])) {
          PackageTiming& p = pending[next_fm++];
          p.lm_steps = gen.steps();
          p.llm_wait = llm_wait;
          double shared = lm_clock;
          run_package(p, std::max(*t, lm_clock), shared, shared);
          lm_clock = shared;
          continue;
        }
      if (!lm_step()) break;
    }
  }

  if (r.packages.empty()) throw SimulationError("simulate: the pipeline produced no speech package");
  r.speech = gen.speech();
  r.lm_steps = gen.steps();
  const PackageTiming& first = r.packages.front();
  r.first_package_seconds = first.voc_done;
  r.tokens_before_first_package = first.tokens();
  r.breakdown.llm = first.llm_wait;
  r.breakdown.lm = static_cast<double>(first.lm_steps) * timing.d_lm;
  r.breakdown.fm = static_cast<double>(first.tokens()) * timing.d_fm;
  r.breakdown.voc = static_cast<double>(first.tokens()) * timing.d_voc;
  r.breakdown.wait = (first.ready - first.llm_wait - r.breakdown.lm) + (first.fm_start - first.ready) +
                     (first.voc_start - first.fm_done);
  r.total_seconds = r.packages.back().voc_done;

  if (cfg.render) {
    StubVocoder vocoder;
    for (const auto& p : r.packages) {
      // Tokens visible to the flow stage when the package was converted.
      std::size_t known = p.end;
      if (cfg.flow == FlowMode::Lookahead) {
        known = r.speech.size();
        for (std::size_t k = p.end; k <= r.speech.size(); ++k)
          if (rule->safe_frames(k) >= cfm::kUpsample * p.end) {
            known = k;
            break;
          }
      }
      cfm::Condition cond = base;
      cond.tokens.assign(r.speech.begin(), r.speech.begin() + static_cast<std::ptrdiff_t>(known));
      const Tensor frames = cfm::sample(*flow, cond, cfg.sample);
      r.audio.push_back(vocoder(detail::rows(frames, cfm::kUpsample * p.begin, cfm::kUpsample * p.end)));
    }
  }
  return r;
}

/// Wall-clock per-token costs of the real stages on this machine: LM steps
/// of one streaming generation, one full flow-matching sample, and the stub
/// vocoder. d_llm is left at zero.
template <seqlm::TokenPredictor Model>
StageTiming measure_stage_costs(const Model& lm, const seqlm::Vocabulary& vocab, std::span<const std::size_t> text,
                                cfm::CfmModel& flow, const cfm::Condition& base, const SimulationConfig& cfg) {
  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::duration d) { return std::chrono::duration<double>(d).count(); };
  seqlm::GenerationConfig gcfg;
  gcfg.mode = cfg.mode;
  gcfg.interleave = cfg.interleave;
  gcfg.sampler = cfg.sampler;
  gcfg.seed = cfg.seed;
  auto t0 = clock::now();
  auto g = seqlm::synthesize(lm, vocab, text, gcfg);
  auto t1 = clock::now();
  if (g.speech.empty()) throw SimulationError("measure_stage_costs: generation produced no speech");
  cfm::Condition cond = base;
  cond.tokens = g.speech;
  const Tensor frames = cfm::sample(flow, cond, cfg.sample);
  auto t2 = clock::now();
  volatile std::size_t sink = StubVocoder{}(frames).size();
  (void)sink;
  auto t3 = clock::now();
  const double n = static_cast<double>(g.speech.size());
  return {seconds(t1 - t0) / static_cast<double>(g.steps), seconds(t2 - t1) / n, seconds(t3 - t2) / n, 0.0};
}

}  // namespace streamsynth::latency
