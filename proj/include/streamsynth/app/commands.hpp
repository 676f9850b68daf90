#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "streamsynth/app/config.hpp"
#include "streamsynth/app/report.hpp"
#include "streamsynth/cfm/data.hpp"
#include "streamsynth/cfm/sampling.hpp"
#include "streamsynth/checkpoint.hpp"
#include "streamsynth/io.hpp"
#include "streamsynth/latency.hpp"
#include "streamsynth/rl/preference.hpp"

// Commands behind the streamsynth tool. Everything is written under the
// output root:
//
//   data/train.corpus data/test.corpus          gen-data
//   data/speakers.sfea data/test_speakers.sfea  one speaker vector per row
//   data/features/{train,test}_NNNN.sfea        toy feature targets
//   checkpoints/{fsq,lm,cfm,lm_ft}.ckpt         train, finetune
//   fsq/test.tokens                             train fsq
//   synth/<mode>/utt_NNNN.{tokens,sfea}         synthesize
//   rl/preferences.txt                          finetune
//   reports/<command>.report                    every command

namespace streamsynth::app {

namespace fs = std::filesystem;

struct Env {
  RunConfig cfg;
  fs::path root = "out";
  std::ostream* out = nullptr;  // human-readable progress; may be null

  std::ostream& log() const {
    static std::ostringstream sink;
    return out ? *out : sink;
  }
  fs::path data(const std::string& name) const { return root / "data" / name; }
  fs::path checkpoint(const std::string& name) const { return root / "checkpoints" / (name + ".ckpt"); }
};

/// STREAMSYNTH_OUT when set, else `fallback`.
inline fs::path output_root(const fs::path& fallback) {
  if (const char* env = std::getenv("STREAMSYNTH_OUT"); env && *env) return env;
  return fallback;
}

inline std::string numbered(const std::string& stem, std::size_t i, const std::string& ext) {
  std::ostringstream s;
  s << stem << std::setw(4) << std::setfill('0') << i << ext;
  return s.str();
}

inline MetricsReport new_report(const Env& env, const std::string& command) {
  return {command, config_hash(env.cfg), env.cfg.seed, kArtifactVersion, {}};
}

inline void publish(const Env& env, const MetricsReport& r) {
  const std::string text = report_text(r);
  io::write_file(env.root / "reports" / (r.command + ".report"), text);
  env.log() << text;
}

// ---- shared model plumbing

inline seqlm::Vocabulary vocabulary(const RunConfig& c) { return {c.seqlm.text_vocab, c.speech_size()}; }

inline seqlm::LmConfig lm_config(const RunConfig& c) {
  return {.hidden = c.seqlm.hidden, .mlp = c.seqlm.mlp, .layers = c.seqlm.layers, .max_positions = c.seqlm.max_positions};
}

inline seqlm::InterleaveConfig interleave(const RunConfig& c) { return {c.seqlm.N, c.seqlm.M}; }

inline cfm::CfmConfig cfm_config(const RunConfig& c) {
  cfm::CfmConfig m;
  m.feature_dim = c.cfm.F;
  m.vocab = c.speech_size();
  m.speaker_dim = c.cfm.speaker_dim;
  m.hidden = c.cfm.hidden;
  m.mlp = c.cfm.mlp;
  m.lookahead = c.cfm.P;
  return m;
}

inline cfm::SampleConfig sample_config(const RunConfig& c, std::uint64_t seed) {
  return {.nfe = c.cfm.nfe, .beta = c.cfm.beta, .seed = seed, .mask = c.mask_spec()};
}

inline seqlm::ToyLM fresh_lm(const RunConfig& c) {
  Rng rng = c.rng("seqlm");
  return seqlm::ToyLM(vocabulary(c), lm_config(c), rng);
}

inline seqlm::ToyLM load_lm(const RunConfig& c, const fs::path& path) {
  seqlm::ToyLM lm = fresh_lm(c);
  checkpoint::load(path, "seqlm", lm.parameters());
  return lm;
}

inline cfm::CfmModel fresh_cfm(const RunConfig& c) {
  Rng rng = c.rng("cfm");
  return cfm::CfmModel(cfm_config(c), rng);
}

inline cfm::CfmModel load_cfm(const RunConfig& c, const fs::path& path) {
  cfm::CfmModel m = fresh_cfm(c);
  checkpoint::load(path, "cfm", m.parameters());
  return m;
}

inline checkpoint::Metadata provenance(const Env& env) {
  return {{"config_hash", hex64(config_hash(env.cfg))}, {"seed", std::to_string(env.cfg.seed)}, {"version", kArtifactVersion}};
}

inline void save_checkpoint(const Env& env, const std::string& name, const std::string& module, const ParameterSet& ps) {
  fs::create_directories(env.root / "checkpoints");
  checkpoint::save(env.checkpoint(name), module, ps, provenance(env));
}

inline std::vector<seqlm::Pair> load_corpus(const fs::path& p) { return io::load(p, io::read_corpus); }
inline Tensor load_features(const fs::path& p) { return io::load(p, io::read_features); }

inline Tensor row(const Tensor& m, std::size_t i) {
  Tensor out({m.cols()});
  std::copy(m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols()),
            m.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * m.cols()), out.data.begin());
  return out;
}

// ---- gen-data

inline MetricsReport cmd_gen_data(const Env& env) {
  const RunConfig& c = env.cfg;
  Rng rng = c.rng("data");
  auto all = seqlm::make_corpus({.pairs = c.data.pairs + c.data.test_pairs,
                                 .min_text = c.data.min_text,
                                 .max_text = c.data.max_text,
                                 .text_size = c.seqlm.text_vocab,
                                 .speech_size = c.speech_size()},
                                rng);
  const std::span<const seqlm::Pair> train(all.data(), c.data.pairs), test(all.data() + c.data.pairs, c.data.test_pairs);
  io::save(env.data("train.corpus"), [&](std::ostream& os) { io::write_corpus(os, train); });
  io::save(env.data("test.corpus"), [&](std::ostream& os) { io::write_corpus(os, test); });

  std::size_t frames = 0;
  auto features = [&](std::span<const seqlm::Pair> pairs, const std::string& split, const std::string& speakers) {
    Rng srng = c.rng("speaker." + split);
    const Tensor spk = Tensor::randn({pairs.size(), c.cfm.speaker_dim}, srng);
    io::save(env.data(speakers), [&](std::ostream& os) { io::write_features(os, spk); });
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const Tensor x = cfm::toy_features(pairs[i].speech, row(spk, i), c.cfm.F);
      frames += x.rows();
      io::save(env.root / "data" / "features" / numbered(split + "_", i, ".sfea"),
               [&](std::ostream& os) { io::write_features(os, x); });
    }
  };
  features(train, "train", "speakers.sfea");
  features(test, "test", "test_speakers.sfea");

  std::size_t speech = 0;
  for (const auto& p : all) speech += p.speech.size();
  MetricsReport r = new_report(env, "gen-data");
  r.metrics["pairs"] = static_cast<double>(train.size());
  r.metrics["test_pairs"] = static_cast<double>(test.size());
  r.metrics["speech_tokens"] = static_cast<double>(speech);
  r.metrics["feature_frames"] = static_cast<double>(frames);
  return r;
}

// ---- train fsq

/// Tokenizer input for a text token: its base frame plus 0.05 Gaussian noise.
inline Tensor tokenizer_inputs(std::span<const std::size_t> text, std::size_t dim, Rng& rng) {
  Tensor x({text.size(), dim});
  std::normal_distribution<double> n(0.0, 0.05);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto base = cfm::token_frame(text[i], dim);
    for (std::size_t f = 0; f < dim; ++f) x(i, f) = base[f] + n(rng);
  }
  return x;
}

inline MetricsReport cmd_train_fsq(const Env& env) {
  const RunConfig& c = env.cfg;
  auto flatten = [](const std::vector<seqlm::Pair>& pairs) {
    std::vector<std::size_t> out;
    for (const auto& p : pairs) out.insert(out.end(), p.text.begin(), p.text.end());
    return out;
  };
  const auto train = flatten(load_corpus(env.data("train.corpus")));
  const auto test = flatten(load_corpus(env.data("test.corpus")));
  if (train.empty() || test.empty()) throw ConfigError("train fsq: empty corpus");

  Rng rng = c.rng("fsq");
  fsq::ToyTokenizer tok(c.cfm.F, c.seqlm.text_vocab, c.fsq_config(), rng);
  Adam opt(tok.parameters(), {.lr = c.fsq.lr, .clip_norm = 1.0});
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  double last = 0.0;
  for (std::size_t s = 0; s < c.fsq.steps; ++s) {
    std::vector<std::size_t> batch(32);
    for (auto& t : batch) t = train[pick(rng)];
    opt.zero_grad();
    Tape tape;
    auto out = tok.forward(tape, tape.constant(tokenizer_inputs(batch, c.cfm.F, rng)));
    Var loss = cross_entropy_ignore(out.logits, batch, std::vector<bool>(batch.size(), false));
    tape.backward(loss);
    opt.step();
    last = loss.item();
  }

  Tape tape;
  auto out = tok.forward(tape, tape.constant(tokenizer_inputs(test, c.cfm.F, rng)), false);
  const double test_loss = cross_entropy_ignore(out.logits, test, std::vector<bool>(test.size(), false)).item();
  std::size_t correct = 0;
  const Tensor& lg = out.logits.value();
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < lg.cols(); ++j)
      if (lg(i, j) > lg(i, arg)) arg = j;
    correct += arg == test[i];
  }
  io::TokenFile tf{c.fsq.D, static_cast<int>(c.fsq.K), out.quantized.tokens};
  io::save(env.root / "fsq" / "test.tokens", [&](std::ostream& os) { io::write_tokens(os, tf); });
  save_checkpoint(env, "fsq", "fsq", tok.parameters());

  MetricsReport r = new_report(env, "train-fsq");
  r.metrics["train_loss"] = last;
  r.metrics["test_loss"] = test_loss;
  r.metrics["test_accuracy"] = static_cast<double>(correct) / static_cast<double>(test.size());
  r.metrics["utilization"] = fsq::utilization(out.quantized.tokens, c.fsq_config()).fraction;
  return r;
}

// ---- train lm

struct LmScores {
  double loss = 0.0;
  double token_accuracy = 0.0;
};

/// Teacher-forced loss and argmax accuracy over scored positions.
inline LmScores score_lm(seqlm::ToyLM& lm, std::span<const seqlm::TokenSequence> seqs) {
  double loss = 0.0;
  std::size_t scored = 0, correct = 0;
  for (const auto& s : seqs) {
    Tape tape;
    const Tensor lg = lm.logits(tape, s.ids, false).value();
    loss += seqlm::evaluate_loss(lm, s) * static_cast<double>(s.scored());
    for (std::size_t p = 0; p < s.size(); ++p) {
      if (!s.loss_mask[p]) continue;
      std::size_t arg = 0;
      for (std::size_t j = 1; j < lg.cols(); ++j)
        if (lg(p, j) > lg(p, arg)) arg = j;
      correct += arg == s.targets[p];
      ++scored;
    }
  }
  if (scored == 0) throw EmptyLossError("score_lm: no scored positions");
  return {loss / static_cast<double>(scored), static_cast<double>(correct) / static_cast<double>(scored)};
}

inline MetricsReport cmd_train_lm(const Env& env) {
  const RunConfig& c = env.cfg;
  const auto vocab = vocabulary(c);
  auto seqs = seqlm::unified_sequences(vocab, load_corpus(env.data("train.corpus")), interleave(c));
  const auto test = seqlm::unified_sequences(vocab, load_corpus(env.data("test.corpus")), interleave(c));
  seqlm::ToyLM lm = fresh_lm(c);
  Adam opt(lm.parameters(), {.lr = c.seqlm.lr, .clip_norm = 1.0});
  Rng rng = c.rng("seqlm.batches");
  std::size_t epochs = 0;
  double worst = INFINITY;
  // Runs the configured epochs, stopping early once every training sequence
  // is fitted (checked every 5 epochs).
  while (epochs < c.seqlm.epochs && worst >= 0.01) {
    std::shuffle(seqs.begin(), seqs.end(), rng);
    for (std::size_t i = 0; i < seqs.size(); i += c.seqlm.batch)
      seqlm::train_step(lm, opt, std::span(seqs).subspan(i, std::min(c.seqlm.batch, seqs.size() - i)));
    if (++epochs % 5 == 0) {
      worst = 0.0;
      for (const auto& s : seqs) worst = std::max(worst, seqlm::evaluate_loss(lm, s));
    }
    env.log() << "epoch " << epochs << (epochs % 5 == 0 ? " worst " + io::format_real(worst) : "") << '\n';
  }
  save_checkpoint(env, "lm", "seqlm", lm.parameters());
  const LmScores tr = score_lm(lm, seqs);
  MetricsReport r = new_report(env, "train-lm");
  r.metrics["epochs"] = static_cast<double>(epochs);
  r.metrics["train_loss"] = tr.loss;
  r.metrics["train_token_accuracy"] = tr.token_accuracy;
  if (!test.empty()) {
    const LmScores te = score_lm(lm, test);
    r.metrics["test_loss"] = te.loss;
    r.metrics["test_token_accuracy"] = te.token_accuracy;
  }
  return r;
}

// ---- train cfm

inline std::vector<cfm::Example> load_examples(const Env& env, const std::string& split) {
  const auto pairs = load_corpus(env.data(split + ".corpus"));
  const Tensor spk = load_features(env.data(split == "train" ? "speakers.sfea" : "test_speakers.sfea"));
  if (spk.rows() < pairs.size()) throw IoError("speaker file has fewer rows than the corpus");
  std::vector<cfm::Example> out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out.push_back({pairs[i].speech, row(spk, i), load_features(env.root / "data" / "features" / numbered(split + "_", i, ".sfea"))});
  return out;
}

inline MetricsReport cmd_train_cfm(const Env& env) {
  const RunConfig& c = env.cfg;
  const auto examples = load_examples(env, "train");
  cfm::CfmModel model = fresh_cfm(c);
  Adam opt(model.parameters(), {.lr = c.cfm.lr, .clip_norm = 1.0});
  Rng rng = c.rng("cfm.train");
  std::uniform_int_distribution<std::size_t> pick(0, examples.size() - 1);
  std::vector<double> losses;
  for (std::size_t s = 0; s < c.cfm.steps; ++s) {
    std::vector<cfm::Example> batch;
    for (std::size_t k = 0; k < c.cfm.batch; ++k) batch.push_back(examples[pick(rng)]);
    losses.push_back(cfm::training_step(model, opt, batch, rng, c.cfm.chunk));
  }
  save_checkpoint(env, "cfm", "cfm", model.parameters());
  auto window_mean = [&](std::size_t begin, std::size_t end) {
    double t = 0.0;
    for (std::size_t i = begin; i < end; ++i) t += losses[i];
    return end > begin ? t / static_cast<double>(end - begin) : 0.0;
  };
  const std::size_t w = std::min<std::size_t>(10, losses.size());
  MetricsReport r = new_report(env, "train-cfm");
  r.metrics["loss_first"] = window_mean(0, w);
  r.metrics["loss_last"] = window_mean(losses.size() - w, losses.size());
  return r;
}

// ---- synthesize

struct SynthOptions {
  std::string mode = "stream";  // stream | offline
  std::vector<std::vector<std::size_t>> texts;  // empty: the test corpus texts
  std::size_t limit = 4;                        // test texts used when none are given
};

inline MetricsReport cmd_synthesize(const Env& env, const SynthOptions& opt) {
  const RunConfig& c = env.cfg;
  if (opt.mode != "stream" && opt.mode != "offline") throw ConfigError("synthesize: mode must be stream or offline");
  const bool stream = opt.mode == "stream";
  if (stream && !c.mask_spec().causal())
    throw UnsupportedModeError("synthesize: streaming needs a causal mask (causal, chunk or chunk2), got " + c.cfm.mask);
  auto texts = opt.texts;
  if (texts.empty()) {
    const auto test = load_corpus(env.data("test.corpus"));
    for (std::size_t i = 0; i < std::min(opt.limit, test.size()); ++i) texts.push_back(test[i].text);
  }
  const auto vocab = vocabulary(c);
  for (const auto& t : texts)
    for (auto id : t) vocab.text(id);
  seqlm::ToyLM lm = load_lm(c, env.checkpoint("lm"));
  cfm::CfmModel flow = load_cfm(c, env.checkpoint("cfm"));
  Rng srng = c.rng("synth.speaker");
  const fs::path dir = env.root / "synth" / opt.mode;

  std::size_t tokens = 0, frames = 0, chunks = 0, empty = 0;
  for (std::size_t u = 0; u < texts.size(); ++u) {
    cfm::Condition cond;
    cond.speaker = Tensor::randn({c.cfm.speaker_dim}, srng);
    const auto sc = sample_config(c, derive_seed(c.seed, "synth.noise") + u);
    seqlm::GenerationConfig g;
    g.mode = stream ? seqlm::Mode::Streaming : seqlm::Mode::NonStreaming;
    g.interleave = interleave(c);
    g.seed = derive_seed(c.seed, "synth.lm") + u;
    env.log() << "utterance " << u << '\n';
    std::vector<std::size_t> speech;
    Tensor audio;
    if (stream) {
      seqlm::Generator<seqlm::ToyLM> gen(lm, vocab, seqlm::build_sft_prompt(vocab, texts[u], g.mode, g.interleave), g);
      cfm::Streamer st(flow, cond, sc);
      std::vector<Tensor> blocks;
      while (auto chunk = gen.next()) {
        env.log() << "--chunk " << chunk->index << "--\n";
        for (std::size_t k = 0; k < chunk->speech.size(); ++k) env.log() << (k ? " " : "") << chunk->speech[k];
        env.log() << '\n';
        speech.insert(speech.end(), chunk->speech.begin(), chunk->speech.end());
        if (auto f = st.push(chunk->speech)) blocks.push_back(std::move(*f));
        ++chunks;
      }
      if (!speech.empty()) {
        if (auto f = st.finish()) blocks.push_back(std::move(*f));
        audio = cfm::concat_frames(blocks);
      }
    } else {
      speech = seqlm::synthesize(lm, vocab, texts[u], g).speech;
      if (!speech.empty()) {
        cond.tokens = speech;
        audio = cfm::sample(flow, cond, sc);
        ++chunks;
      }
    }
    io::TokenFile tf{c.fsq.D, static_cast<int>(c.fsq.K), {}};
    for (auto s : speech) tf.tokens.push_back({static_cast<std::uint32_t>(s)});
    io::save(dir / numbered("utt_", u, ".tokens"), [&](std::ostream& os) { io::write_tokens(os, tf); });
    // An utterance the LM ends at once has a token file but no features.
    if (speech.empty()) {
      env.log() << "utterance " << u << ": no speech\n";
      ++empty;
      continue;
    }
    io::save(dir / numbered("utt_", u, ".sfea"), [&](std::ostream& os) { io::write_features(os, audio); });
    tokens += speech.size();
    frames += audio.rows();
  }
  MetricsReport r = new_report(env, "synthesize-" + opt.mode);
  r.metrics["utterances"] = static_cast<double>(texts.size());
  r.metrics["speech_tokens"] = static_cast<double>(tokens);
  r.metrics["frames"] = static_cast<double>(frames);
  r.metrics["chunks"] = static_cast<double>(chunks);
  r.metrics["empty_utterances"] = static_cast<double>(empty);
  return r;
}

// ---- finetune

struct FinetuneOptions {
  fs::path preferences;  // empty: mine them from the training corpus
};

inline rl::AsrConfig asr_config(const RunConfig& c) {
  rl::AsrConfig a;
  a.dim = c.fsq.D;
  a.bound = static_cast<int>(c.fsq.K);
  a.text_size = c.seqlm.text_vocab;
  return a;
}

inline rl::Objective parse_objective(const std::string& s) {
  if (s == "dpo") return rl::Objective::Dpo;
  if (s == "asr") return rl::Objective::Asr;
  if (s == "both") return rl::Objective::Both;
  throw ConfigError("objective must be dpo, asr or both, got '" + s + "'");
}

inline MetricsReport cmd_finetune(const Env& env, const FinetuneOptions& opt) {
  const RunConfig& c = env.cfg;
  const auto train = load_corpus(env.data("train.corpus"));
  const auto test = load_corpus(env.data("test.corpus"));
  seqlm::ToyLM lm = load_lm(c, env.checkpoint("lm"));
  seqlm::ToyLM reference = lm;

  Rng arng = c.rng("rl.asr");
  rl::ToyAsrBackend asr(asr_config(c), arng);
  rl::train_asr(asr, train, c.rl.asr_epochs, arng);

  const rl::FinetuneConfig fc{parse_objective(c.rl.objective), {c.rl.beta_dpo}, {c.rl.tau}, c.rl.lambda};
  std::vector<rl::PreferencePair> prefs;
  if (fc.objective != rl::Objective::Asr) {
    if (!opt.preferences.empty()) {
      prefs = io::load(opt.preferences, io::read_preferences);
    } else {
      prefs = rl::mine_preferences(lm, asr, train, {.seed = derive_seed(c.seed, "rl.mine")});
      io::save(env.root / "rl" / "preferences.txt", [&](std::ostream& os) { io::write_preferences(os, prefs); });
    }
    if (prefs.empty()) throw Error("finetune: no preference pairs available");
  }
  const auto scored = rl::score_pairs(reference, prefs);

  const std::uint64_t eval_seed = derive_seed(c.seed, "rl.eval");
  const auto& held = test.empty() ? train : test;
  MetricsReport r = new_report(env, "finetune");
  r.metrics["asr_heldout_before"] = rl::evaluate_asr(lm, asr, held, c.rl.tau, eval_seed);
  if (!scored.empty()) r.metrics["dpo_margin_before"] = rl::mean_margin(lm, scored);

  Adam adam(lm.parameters(), {.lr = c.rl.lr, .clip_norm = 1.0});
  Rng rng = c.rng("rl.train");
  std::uniform_int_distribution<std::size_t> pick_text(0, train.size() - 1);
  for (std::size_t s = 0; s < c.rl.steps; ++s) {
    adam.set_lr(cosine_lr(c.rl.lr, s, c.rl.steps));
    std::vector<rl::ScoredPair> pb;
    std::vector<seqlm::Pair> ab;
    for (std::size_t k = 0; k < c.rl.batch; ++k) {
      if (!scored.empty()) pb.push_back(scored[std::uniform_int_distribution<std::size_t>(0, scored.size() - 1)(rng)]);
      ab.push_back(train[pick_text(rng)]);
    }
    rl::finetune_step(lm, adam, asr, pb, ab, c.rl.tau, fc, rng);
  }
  save_checkpoint(env, "lm_ft", "seqlm", lm.parameters());
  r.metrics["asr_heldout_after"] = rl::evaluate_asr(lm, asr, held, c.rl.tau, eval_seed);
  if (!scored.empty()) r.metrics["dpo_margin_after"] = rl::mean_margin(lm, scored);
  r.metrics["pairs"] = static_cast<double>(scored.size());
  r.metrics["steps"] = static_cast<double>(c.rl.steps);
  return r;
}

// ---- bench-latency

struct BenchOptions {
  std::size_t text_len = 20;
  bool wall_clock = false;  // replace the configured delays by measured per-token costs
};

inline latency::StageTiming configured_timing(const RunConfig& c) {
  return {c.latency.d_lm, c.latency.d_fm, c.latency.d_voc, c.latency.d_llm};
}

inline MetricsReport cmd_bench_latency(const Env& env, const BenchOptions& opt) {
  const RunConfig& c = env.cfg;
  if (opt.text_len == 0) throw ConfigError("bench-latency: text length must be positive");
  const auto vocab = vocabulary(c);
  Rng rng = c.rng("latency");
  std::vector<std::size_t> text(opt.text_len);
  for (auto& t : text) t = std::uniform_int_distribution<std::size_t>(0, c.seqlm.text_vocab - 1)(rng);

  latency::SimulationConfig sc;
  sc.interleave = interleave(c);
  sc.chat = c.latency.chat;
  sc.overlap = c.latency.overlap;
  sc.flow = c.latency.flow == "lookahead" ? latency::FlowMode::Lookahead : latency::FlowMode::ComputeOnly;
  sc.sample = sample_config(c, derive_seed(c.seed, "latency.noise"));
  sc.render = false;
  const seqlm::MotifOracle oracle(vocab, sc.interleave);
  cfm::CfmModel flow = fresh_cfm(c);
  cfm::Condition base;
  base.speaker = Tensor::randn({c.cfm.speaker_dim}, rng);

  latency::StageTiming timing = configured_timing(c);
  if (opt.wall_clock) {
    const auto measured = latency::measure_stage_costs(oracle, vocab, text, flow, base, sc);
    timing.d_lm = measured.d_lm;
    timing.d_fm = measured.d_fm;
    timing.d_voc = measured.d_voc;
  }
  const auto rep = latency::simulate(oracle, vocab, text, &flow, base, timing, sc);

  MetricsReport r = new_report(env, "bench-latency");
  auto& m = r.metrics;
  m["n"] = static_cast<double>(c.seqlm.N);
  m["m"] = static_cast<double>(c.seqlm.M);
  m["d_lm"] = timing.d_lm;
  m["d_fm"] = timing.d_fm;
  m["d_voc"] = timing.d_voc;
  m["d_llm"] = timing.d_llm;
  m["overlap"] = c.latency.overlap;
  m["chat"] = c.latency.chat;
  m["first_package_seconds"] = rep.first_package_seconds;
  m["tokens_before_first_package"] = static_cast<double>(rep.tokens_before_first_package);
  m["l_tts"] = latency::l_tts(c.seqlm.M, timing);
  m["l_chat_bound"] = latency::l_chat_bound(c.seqlm.N, c.seqlm.M, timing);
  m["breakdown.llm"] = rep.breakdown.llm;
  m["breakdown.lm"] = rep.breakdown.lm;
  m["breakdown.fm"] = rep.breakdown.fm;
  m["breakdown.voc"] = rep.breakdown.voc;
  m["breakdown.wait"] = rep.breakdown.wait;
  m["total_seconds"] = rep.total_seconds;
  m["packages"] = static_cast<double>(rep.packages.size());
  m["lm_steps"] = static_cast<double>(rep.lm_steps);
  return r;
}

/// Human-readable summary of a bench-latency report.
inline std::string latency_table(const MetricsReport& r) {
  std::ostringstream os;
  const auto& m = r.metrics;
  auto ms = [](double s) {
    std::ostringstream t;
    t << std::fixed << std::setprecision(3) << s * 1000.0 << " ms";
    return t.str();
  };
  os << "stage          first package\n"
     << "upstream LLM   " << ms(m.at("breakdown.llm")) << '\n'
     << "token LM       " << ms(m.at("breakdown.lm")) << '\n'
     << "flow matching  " << ms(m.at("breakdown.fm")) << '\n'
     << "vocoder        " << ms(m.at("breakdown.voc")) << '\n'
     << "waiting        " << ms(m.at("breakdown.wait")) << '\n'
     << "total          " << ms(m.at("first_package_seconds")) << "  (" << m.at("tokens_before_first_package")
     << " tokens)\n"
     << "L_TTS formula  " << ms(m.at("l_tts")) << '\n'
     << "L_Chat bound   " << ms(m.at("l_chat_bound")) << '\n'
     << "utterance      " << ms(m.at("total_seconds")) << " over " << m.at("packages") << " packages\n";
  return os.str();
}

// ---- eval

struct EvalOptions {
  fs::path checkpoint;      // empty: checkpoints/lm.ckpt
  fs::path testset;         // empty: data/test.corpus
  fs::path cfm_checkpoint;  // empty: energy distance is skipped
  bool untrained = false;   // evaluate a freshly initialized LM instead
};

inline MetricsReport cmd_eval(const Env& env, const EvalOptions& opt) {
  const RunConfig& c = env.cfg;
  const auto vocab = vocabulary(c);
  const fs::path test_path = opt.testset.empty() ? env.data("test.corpus") : opt.testset;
  const auto pairs = load_corpus(test_path);
  if (pairs.empty()) throw ConfigError("eval: empty test set " + test_path.string());
  seqlm::ToyLM lm = opt.untrained ? fresh_lm(c) : load_lm(c, opt.checkpoint.empty() ? env.checkpoint("lm") : opt.checkpoint);
  const auto seqs = seqlm::unified_sequences(vocab, pairs, interleave(c));
  const LmScores s = score_lm(lm, seqs);

  std::vector<fsq::SpeechToken> generated;
  std::size_t exact = 0;
  for (const auto& p : pairs) {
    seqlm::GenerationConfig g;
    g.interleave = interleave(c);
    const auto out = seqlm::synthesize(lm, vocab, p.text, g);
    exact += out.speech == p.speech;
    for (auto t : out.speech) generated.push_back({static_cast<std::uint32_t>(t)});
  }

  MetricsReport r = new_report(env, "eval");
  r.metrics["loss"] = s.loss;
  r.metrics["uniform_loss"] = std::log(static_cast<double>(vocab.size()));
  r.metrics["token_accuracy"] = s.token_accuracy;
  r.metrics["exact_speech"] = static_cast<double>(exact) / static_cast<double>(pairs.size());
  r.metrics["utilization"] = generated.empty() ? 0.0 : fsq::utilization(generated, c.fsq_config()).fraction;
  if (!opt.cfm_checkpoint.empty()) {
    cfm::CfmModel flow = load_cfm(c, opt.cfm_checkpoint);
    const auto examples = load_examples(env, "test");
    const std::size_t n = std::min<std::size_t>(8, examples.size());
    double ed = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      cfm::Condition cond;
      cond.speaker = examples[i].speaker;
      cond.tokens = examples[i].tokens;
      ed += cfm::energy_distance(cfm::sample(flow, cond, sample_config(c, derive_seed(c.seed, "eval.noise") + i)),
                                 examples[i].x1);
    }
    r.metrics["energy_distance"] = ed / static_cast<double>(n);
  }
  return r;
}

}  // namespace streamsynth::app
