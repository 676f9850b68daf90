// Memorizes a small motif corpus, then synthesizes one utterance both ways:
// streaming (packages of M speech tokens pushed through the flow-matching
// streamer as they appear) and offline. Prints the packages, checks that
// both paths agree, and reports simulated first-package latency.
//
//   stream_demo [seed]

#include <cstdlib>
#include <iostream>

#include "streamsynth/cfm/sampling.hpp"
#include "streamsynth/latency.hpp"
#include "streamsynth/seqlm/corpus.hpp"
#include "streamsynth/seqlm/generate.hpp"
#include "streamsynth/seqlm/model.hpp"

namespace ss = streamsynth;
namespace sq = streamsynth::seqlm;
namespace cfm = streamsynth::cfm;

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
  const sq::Vocabulary vocab(16, 81);
  const sq::InterleaveConfig icfg{2, 6};

  ss::Rng rng = ss::make_rng(seed, "demo.corpus");
  const auto pairs = sq::make_corpus({.pairs = 8, .min_text = 3, .max_text = 6, .text_size = 16, .speech_size = 81}, rng);
  const auto seqs = sq::unified_sequences(vocab, pairs, icfg);

  ss::Rng mrng = ss::make_rng(seed, "demo.lm");
  sq::ToyLM lm(vocab, {.hidden = 32, .mlp = 64, .layers = 2, .max_positions = 64}, mrng);
  ss::Adam opt(lm.parameters(), {.lr = 3e-3, .clip_norm = 1.0});
  double worst = 1e9;
  int epoch = 0;
  for (; epoch < 300 && worst > 0.05; ++epoch) {
    for (std::size_t i = 0; i < seqs.size(); i += 2) sq::train_step(lm, opt, std::span(seqs).subspan(i, 2));
    worst = 0.0;
    for (const auto& s : seqs) worst = std::max(worst, sq::evaluate_loss(lm, s));
  }
  std::cout << "lm: " << epoch << " epochs, worst sequence loss " << worst << "\n";

  // Untrained flow model: the point is the chunking, not the audio.
  cfm::CfmConfig c;
  c.vocab = 81;
  c.hidden = 16;
  c.mlp = 32;
  ss::Rng frng = ss::make_rng(seed, "demo.cfm");
  cfm::CfmModel flow(c, frng);
  cfm::Condition cond;
  cond.speaker = ss::Tensor::randn({c.speaker_dim}, frng);
  const cfm::SampleConfig sc{.nfe = 10, .beta = 0.7, .seed = seed, .mask = {cfm::MaskKind::FullCausal, 30}};

  const auto& text = pairs.front().text;
  sq::GenerationConfig g;
  g.interleave = icfg;
  sq::Generator<sq::ToyLM> gen(lm, vocab, sq::build_sft_prompt(vocab, text, g.mode, icfg), g);
  cfm::Streamer streamer(flow, cond, sc);
  std::vector<std::size_t> speech;
  std::vector<ss::Tensor> blocks;
  while (auto chunk = gen.next()) {
    std::cout << "package " << chunk->index << " after " << chunk->steps << " LM steps:";
    for (auto s : chunk->speech) std::cout << ' ' << s;
    speech.insert(speech.end(), chunk->speech.begin(), chunk->speech.end());
    if (auto f = streamer.push(chunk->speech)) {
      std::cout << "  -> " << f->rows() << " frames";
      blocks.push_back(std::move(*f));
    }
    std::cout << '\n';
  }
  if (auto f = streamer.finish()) {
    std::cout << "flush -> " << f->rows() << " frames\n";
    blocks.push_back(std::move(*f));
  }
  if (speech.empty()) {
    std::cout << "the LM produced no speech\n";
    return 1;
  }
  const ss::Tensor streamed = cfm::concat_frames(blocks);

  g.mode = sq::Mode::NonStreaming;
  const auto offline = sq::synthesize(lm, vocab, text, g);
  cond.tokens = offline.speech;
  const ss::Tensor whole = cfm::sample(flow, cond, sc);
  const bool same = offline.speech == speech && whole.data == streamed.data;
  std::cout << "tokens match corpus: " << (speech == pairs.front().speech ? "yes" : "no")
            << ", streaming equals offline: " << (same ? "yes" : "no") << "\n";

  const ss::latency::StageTiming t{0.010, 0.005, 0.002, 0.020};
  ss::latency::SimulationConfig sim;
  sim.interleave = {5, 15};
  sim.render = false;
  sq::MotifOracle oracle(vocab, sim.interleave);
  const std::vector<std::size_t> long_text(20, 3);
  const auto r = ss::latency::simulate(oracle, vocab, long_text, nullptr, {}, t, sim);
  std::cout << "first package at " << r.first_package_seconds << " s (formula " << ss::latency::l_tts(15, t) << " s)\n";
  return same ? 0 : 1;
}
