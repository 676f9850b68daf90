#include <gtest/gtest.h>

#include <cmath>

#include "cli_support.hpp"
#include "streamsynth/app/commands.hpp"
#include "streamsynth/app/report.hpp"
#include "streamsynth/cfm/data.hpp"
#include "streamsynth/io.hpp"
#include "streamsynth/seqlm/corpus.hpp"

namespace ss = streamsynth;
namespace io = streamsynth::io;
namespace app = streamsynth::app;
namespace fs = std::filesystem;
using clitest::run;
using ss::Tensor;

namespace {

app::MetricsReport report(const fs::path& p) { return io::load(p, app::read_report); }

std::string tiny_args(const fs::path& dir) { return "-c '" + clitest::write_tiny_config(dir).string() + "' -o out "; }

}  // namespace

TEST(Cli, GenDataMatchesTheLibraryDirectly) {
  const auto dir = clitest::fresh_dir("cli_gen");
  ASSERT_EQ(run(tiny_args(dir) + "gen-data", dir).status, 0);

  const auto cfg = app::parse_config(clitest::kTinyConfig);
  ss::Rng rng = cfg.rng("data");
  const auto all = ss::seqlm::make_corpus({.pairs = 16, .min_text = 1, .max_text = 6, .text_size = 16, .speech_size = 81}, rng);
  const auto train = io::load(dir / "out/data/train.corpus", io::read_corpus);
  const auto test = io::load(dir / "out/data/test.corpus", io::read_corpus);
  ASSERT_EQ(train.size(), 12u);
  ASSERT_EQ(test.size(), 4u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(train[i], all[i]);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(test[i], all[12 + i]);

  const Tensor spk = io::load(dir / "out/data/speakers.sfea", io::read_features);
  ASSERT_EQ(spk.rows(), 12u);
  for (std::size_t i : {0u, 5u, 11u}) {
    Tensor s({1, spk.cols()});
    for (std::size_t j = 0; j < spk.cols(); ++j) s(0, j) = spk(i, j);
    const Tensor want = ss::cfm::toy_features(train[i].speech, s, cfg.cfm.F);
    const Tensor got = io::load(dir / "out/data/features" / app::numbered("train_", i, ".sfea"), io::read_features);
    EXPECT_EQ(got.shape, want.shape);
    EXPECT_EQ(got.data, want.data);
  }
  EXPECT_EQ(report(dir / "out/reports/gen-data.report").metrics.at("pairs"), 12.0);

  // 100 spot checks of the motif rule, written out literally: text token t
  // becomes (7t+1, 13t+5, 29t+11) mod 81.
  ss::Rng pick(99);
  const std::size_t mult[3] = {7, 13, 29}, off[3] = {1, 5, 11};
  for (int k = 0; k < 100; ++k) {
    const auto& p = train[std::uniform_int_distribution<std::size_t>(0, 11)(pick)];
    ASSERT_EQ(p.speech.size(), 3 * p.text.size());
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.speech.size() - 1)(pick);
    EXPECT_EQ(p.speech[i], (mult[i % 3] * p.text[i / 3] + off[i % 3]) % 81);
  }
}

TEST(Cli, InvalidConfigurationExitsTwoAndNamesTheKey) {
  const auto dir = clitest::fresh_dir("cli_badcfg");
  std::ofstream(dir / "bad.cfg") << "[fsq]\nbogus = 1\n[seqlm]\nM = 0\n";
  const auto r = run("-c bad.cfg -o out gen-data", dir);
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("fsq.bogus"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("seqlm.M"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir / "out"));

  EXPECT_EQ(run("-o out bench-latency --d-lm -1", dir).status, 2);
  EXPECT_EQ(run("-o out no-such-command", dir).status, 2);
  EXPECT_EQ(run("-o out train", dir).status, 2);
}

TEST(Cli, MissingCheckpointNamesThePath) {
  const auto dir = clitest::fresh_dir("cli_missing");
  ASSERT_EQ(run(tiny_args(dir) + "gen-data", dir).status, 0);
  const auto r = run(tiny_args(dir) + "eval --checkpoint /nonexistent/lm.ckpt", dir);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("missing checkpoint: /nonexistent/lm.ckpt"), std::string::npos) << r.output;
  const auto s = run(tiny_args(dir) + "synthesize", dir);
  EXPECT_EQ(s.status, 1);
  EXPECT_NE(s.output.find("lm.ckpt"), std::string::npos) << s.output;
}

TEST(Cli, OutputRootPrecedence) {
  const auto dir = clitest::fresh_dir("cli_root");
  const auto cfg = clitest::write_tiny_config(dir).string();
  ASSERT_EQ(run("-c '" + cfg + "' bench-latency", dir, "env -u STREAMSYNTH_OUT").status, 0);
  EXPECT_TRUE(fs::exists(dir / "out/reports/bench-latency.report"));
  ASSERT_EQ(run("-c '" + cfg + "' bench-latency", dir, "STREAMSYNTH_OUT=from_env").status, 0);
  EXPECT_TRUE(fs::exists(dir / "from_env/reports/bench-latency.report"));
  ASSERT_EQ(run("-c '" + cfg + "' -o from_flag bench-latency", dir, "STREAMSYNTH_OUT=from_env2").status, 0);
  EXPECT_TRUE(fs::exists(dir / "from_flag/reports/bench-latency.report"));
  EXPECT_FALSE(fs::exists(dir / "from_env2"));
}

TEST(Cli, BenchLatencyReportsTheFormula) {
  const auto dir = clitest::fresh_dir("cli_bench");
  const auto r = run("-o out bench-latency --m 15 --d-lm 0.02 --d-fm 0.004 --d-voc 0.001 --d-llm 0.03", dir);
  ASSERT_EQ(r.status, 0) << r.output;
  const auto m = report(dir / "out/reports/bench-latency.report").metrics;
  const double l_tts = 15 * (0.02 + 0.004 + 0.001);
  EXPECT_NEAR(m.at("l_tts"), l_tts, 1e-12);
  EXPECT_NEAR(m.at("first_package_seconds"), l_tts, 0.01 * l_tts);
  EXPECT_NEAR(m.at("l_chat_bound"), l_tts + 5 * 0.03, 1e-12);
  EXPECT_NE(r.output.find("first_package_seconds"), std::string::npos);
}

TEST(Cli, UntrainedEvalIsNearUniform) {
  const auto dir = clitest::fresh_dir("cli_untrained");
  ASSERT_EQ(run(tiny_args(dir) + "gen-data", dir).status, 0);
  ASSERT_EQ(run(tiny_args(dir) + "eval --untrained", dir).status, 0);
  const auto m = report(dir / "out/reports/eval.report").metrics;
  // 16 text + 81 speech + 4 special tokens.
  EXPECT_NEAR(m.at("uniform_loss"), std::log(101.0), 1e-12);
  EXPECT_NEAR(m.at("loss"), m.at("uniform_loss"), 0.05 * m.at("uniform_loss"));
}

TEST(Cli, PipelineRunsAndStreamMatchesOfflineOnTrainingTexts) {
  const auto dir = clitest::fresh_dir("cli_pipeline");
  ASSERT_EQ(clitest::run_pipeline(dir), "");
  const auto lm = report(dir / "out/reports/train-lm.report").metrics;
  EXPECT_EQ(lm.at("train_token_accuracy"), 1.0);
  // Memorized texts: the LM output is fixed, and chunked causal sampling
  // equals the one-shot masked sample.
  const auto offline = clitest::tree(dir / "out/synth/offline");
  ASSERT_EQ(offline.size(), 24u);
  for (const auto& [name, bytes] : offline) EXPECT_EQ(clitest::slurp(dir / "out/synth/stream" / name), bytes) << name;

  const auto ft = report(dir / "out/reports/finetune.report").metrics;
  EXPECT_GT(ft.at("pairs"), 0.0);
  EXPECT_TRUE(fs::exists(dir / "out/checkpoints/lm_ft.ckpt"));
  EXPECT_TRUE(report(dir / "out/reports/eval.report").metrics.contains("energy_distance"));
}

TEST(Cli, StreamModeRejectsNonCausalMasks) {
  const auto dir = clitest::fresh_dir("cli_mask");
  const auto args = tiny_args(dir);
  for (const char* c : {"gen-data", "train lm", "train cfm"}) ASSERT_EQ(run(args + c, dir).status, 0);
  const auto r = run(args + "synthesize --mode stream --mask noncausal", dir);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("noncausal"), std::string::npos) << r.output;
  EXPECT_EQ(run(args + "synthesize --mode offline --mask noncausal", dir).status, 0);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  const auto a = clitest::fresh_dir("cli_repeat_a"), b = clitest::fresh_dir("cli_repeat_b");
  ASSERT_EQ(clitest::run_pipeline(a), "");
  ASSERT_EQ(clitest::run_pipeline(b), "");
  const auto ta = clitest::tree(a / "out"), tb = clitest::tree(b / "out");
  EXPECT_GT(ta.size(), 40u);
  EXPECT_EQ(ta.size(), tb.size());
  for (const auto& [name, bytes] : ta) {
    auto it = tb.find(name);
    ASSERT_NE(it, tb.end()) << name;
    EXPECT_TRUE(it->second == bytes) << name << " differs";
  }
}

TEST(Cli, SeedChangesTheOutputs) {
  const auto dir = clitest::fresh_dir("cli_seed");
  const auto args = tiny_args(dir);
  ASSERT_EQ(run(args + "gen-data", dir).status, 0);
  const auto first = clitest::slurp(dir / "out/data/train.corpus");
  ASSERT_EQ(run(args + "--seed 12 gen-data", dir).status, 0);
  EXPECT_NE(clitest::slurp(dir / "out/data/train.corpus"), first);
  EXPECT_EQ(report(dir / "out/reports/gen-data.report").seed, 12u);
}
