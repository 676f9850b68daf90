// streamsynth: data generation, training, synthesis, fine-tuning, latency
// benchmarking and evaluation over the toy speech pipeline.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "streamsynth/app/commands.hpp"

namespace app = streamsynth::app;
namespace io = streamsynth::io;

namespace {

std::vector<std::size_t> parse_ids(const std::string& s) {
  std::vector<std::size_t> out;
  for (auto w : io::split_ws(s)) out.push_back(io::parse_uint(w, 0));
  return out;
}

/// Text ids per line; corpus lines ("TEXT ... | SPEECH ...") keep their text part.
std::vector<std::vector<std::size_t>> read_texts(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<std::vector<std::size_t>> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (io::blank(line)) continue;
    try {
      if (line.find("TEXT") != std::string::npos) {
        std::istringstream one(line);
        out.push_back(io::read_corpus(one).at(0).text);
      } else {
        out.push_back(parse_ids(line));
      }
    } catch (const streamsynth::ParseError& e) {
      throw streamsynth::ParseError(path.string() + ": " + e.what(), n);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Toy streaming speech synthesis pipeline"};
  cli.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<unsigned long long> seed;
  cli.add_option("-c,--config", config_path, "key=value configuration file")->check(CLI::ExistingFile);
  cli.add_option("-o,--out", out_dir, "output root (default: $STREAMSYNTH_OUT, else ./out)");
  cli.add_option("--seed", seed, "global seed");

  app::Overrides overrides;
  // Registers a flag that overrides one configuration key.
  auto override_opt = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); },
                                          help + " (" + key + ")");
  };

  auto* gen = cli.add_subcommand("gen-data", "synthesize the toy corpus and feature targets");

  auto* train = cli.add_subcommand("train", "train one model and write its checkpoint");
  std::string target;
  train->add_option("target", target, "fsq, lm or cfm")->required()->check(CLI::IsMember({"fsq", "lm", "cfm"}));

  auto* synth = cli.add_subcommand("synthesize", "text to speech tokens and features");
  app::SynthOptions sopt;
  std::vector<std::string> texts;
  std::string text_file;
  synth->add_option("--mode", sopt.mode, "stream or offline")->check(CLI::IsMember({"stream", "offline"}));
  synth->add_option("--text", texts, "text token ids, e.g. \"3 14 15\" (repeatable)");
  synth->add_option("--input", text_file, "file of text id lines or corpus lines")->check(CLI::ExistingFile);
  synth->add_option("--limit", sopt.limit, "test utterances used when no text is given");
  override_opt(synth, "--mask", "cfm.mask", "noncausal, causal, chunk or chunk2");
  override_opt(synth, "--chunk,--chunk-frames", "cfm.chunk", "chunk size in frames");
  override_opt(synth, "--nfe", "cfm.nfe", "flow evaluations");
  override_opt(synth, "--beta", "cfm.beta", "guidance strength");

  auto* ft = cli.add_subcommand("finetune", "preference and recognizer-reward fine-tuning of the LM");
  app::FinetuneOptions fopt;
  override_opt(ft, "--objective", "rl.objective", "dpo, asr or both");
  override_opt(ft, "--tau", "rl.tau", "Gumbel-softmax temperature");
  override_opt(ft, "--beta-dpo", "rl.beta_dpo", "DPO temperature");
  override_opt(ft, "--lambda", "rl.lambda", "weight of the recognizer loss");
  override_opt(ft, "--steps", "rl.steps", "optimizer steps");
  ft->add_option("--preferences", fopt.preferences, "preference file (default: mine from the corpus)")
      ->check(CLI::ExistingFile);

  auto* bench = cli.add_subcommand("bench-latency", "first-package latency on a virtual clock");
  app::BenchOptions bopt;
  override_opt(bench, "--n", "seqlm.N", "text tokens per group");
  override_opt(bench, "--m", "seqlm.M", "speech tokens per group");
  override_opt(bench, "--d-lm", "latency.d_lm", "LM seconds per token");
  override_opt(bench, "--d-fm", "latency.d_fm", "flow matching seconds per token");
  override_opt(bench, "--d-voc", "latency.d_voc", "vocoder seconds per token");
  override_opt(bench, "--d-llm", "latency.d_llm", "upstream LLM seconds per text token");
  override_opt(bench, "--flow", "latency.flow", "compute or lookahead");
  bool overlap = false, chat = false;
  bench->add_flag("--overlap", overlap, "run stages concurrently");
  bench->add_flag("--chat", chat, "text arrives from an upstream LLM");
  bench->add_option("--text-len", bopt.text_len, "text tokens in the benchmark utterance");
  bench->add_flag("--wall-clock", bopt.wall_clock, "use measured per-token costs (not reproducible)");

  auto* eval = cli.add_subcommand("eval", "LM metrics on a test corpus");
  app::EvalOptions eopt;
  eval->add_option("--checkpoint", eopt.checkpoint, "LM checkpoint (default: checkpoints/lm.ckpt)");
  eval->add_option("--testset", eopt.testset, "corpus file (default: data/test.corpus)");
  eval->add_option("--cfm-checkpoint", eopt.cfm_checkpoint, "flow-matching checkpoint for energy distance");
  eval->add_flag("--untrained", eopt.untrained, "evaluate a freshly initialized LM");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (seed) overrides.emplace_back("seed", std::to_string(*seed));
    if (overlap) overrides.emplace_back("latency.overlap", "true");
    if (chat) overrides.emplace_back("latency.chat", "true");
    app::Env env;
    env.cfg = app::parse_config(config_path.empty() ? std::string() : io::read_file(config_path), overrides);
    env.root = out_dir.empty() ? app::output_root("out") : std::filesystem::path(out_dir);
    env.out = &std::cout;

    app::MetricsReport r;
    if (*gen) {
      r = app::cmd_gen_data(env);
    } else if (*train) {
      r = target == "fsq" ? app::cmd_train_fsq(env) : target == "lm" ? app::cmd_train_lm(env) : app::cmd_train_cfm(env);
    } else if (*synth) {
      for (const auto& t : texts) sopt.texts.push_back(parse_ids(t));
      if (!text_file.empty())
        for (auto& t : read_texts(text_file)) sopt.texts.push_back(std::move(t));
      r = app::cmd_synthesize(env, sopt);
    } else if (*ft) {
      r = app::cmd_finetune(env, fopt);
    } else if (*bench) {
      r = app::cmd_bench_latency(env, bopt);
    } else {
      r = app::cmd_eval(env, eopt);
    }
    app::publish(env, r);
    if (*bench) std::cout << '\n' << app::latency_table(r);
    return 0;
  } catch (const streamsynth::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
