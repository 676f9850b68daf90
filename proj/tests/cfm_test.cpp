#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "streamsynth/cfm/data.hpp"
#include "streamsynth/cfm/sampling.hpp"
#include "streamsynth/cfm/two_moons.hpp"
#include "streamsynth/gradcheck.hpp"

namespace ss = streamsynth;
using namespace streamsynth::cfm;
using ss::Tape;
using ss::Tensor;
using ss::Var;
using ss::BoolMatrix;

namespace {

CfmConfig small_config() {
  CfmConfig c;
  c.feature_dim = 3;
  c.vocab = 11;
  c.speaker_dim = 2;
  c.hidden = 8;
  c.mlp = 12;
  c.time_dim = 4;
  c.lookahead = 2;
  return c;
}

Condition random_condition(ss::Rng& rng, const CfmConfig& c, std::size_t tokens) {
  Condition cond;
  cond.speaker = Tensor::randn({c.speaker_dim}, rng);
  cond.tokens.resize(tokens);
  for (auto& t : cond.tokens) t = std::uniform_int_distribution<std::size_t>(0, c.vocab - 1)(rng);
  cond.prompt = Tensor::randn({3, c.feature_dim}, rng);
  cond.prompt_frames = 3;
  return cond;
}

bool bit_equal(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }

}  // namespace

TEST(BuildMask, SingleFrameIsAlwaysVisible) {
  for (MaskKind k : kAllMaskKinds) {
    BoolMatrix m = build_mask({k, 5}, 1);
    EXPECT_TRUE(m(0, 0)) << mask_name(k);
  }
}

TEST(BuildMask, FullCausalIsLowerTriangular) {
  BoolMatrix m = build_mask({MaskKind::FullCausal, 1}, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m(i, j), j <= i);
}

TEST(BuildMask, ChunkRowsSeeTheirWholeChunk) {
  BoolMatrix m = build_mask({MaskKind::ChunkM, 2}, 4);
  EXPECT_TRUE(m(0, 0) && m(0, 1));
  EXPECT_FALSE(m(0, 2) || m(0, 3));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_TRUE(m(2, j));
  BoolMatrix m2 = build_mask({MaskKind::Chunk2M, 2}, 6);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(m2(1, j), j < 4);
}

TEST(BuildMask, NestingHoldsForAllLengths) {
  for (std::size_t chunk : {1u, 2u, 5u, 30u}) {
    for (std::size_t len = 1; len <= 64; ++len) {
      auto full = build_mask({MaskKind::FullCausal, chunk}, len);
      auto c1 = build_mask({MaskKind::ChunkM, chunk}, len);
      auto c2 = build_mask({MaskKind::Chunk2M, chunk}, len);
      auto nc = build_mask({MaskKind::NonCausal, chunk}, len);
      ASSERT_TRUE(full.subset_of(c1));
      ASSERT_TRUE(c1.subset_of(c2));
      ASSERT_TRUE(c2.subset_of(nc));
    }
  }
}

TEST(BuildMask, InvalidArguments) {
  EXPECT_THROW(build_mask({MaskKind::ChunkM, 0}, 4), ss::ConfigError);
  EXPECT_THROW(build_mask({MaskKind::ChunkM, 2}, 0), ss::DimensionError);
  EXPECT_EQ(parse_mask("chunk2"), MaskKind::Chunk2M);
  EXPECT_THROW(parse_mask("sideways"), ss::ConfigError);
}

TEST(OtPath, EndpointsMidpointAndField) {
  ss::Rng rng(1);
  Tensor x0 = Tensor::randn({4, 3}, rng), x1 = Tensor::randn({4, 3}, rng);
  EXPECT_TRUE(bit_equal(ot_path(x0, x1, 0.0), x0));
  EXPECT_TRUE(bit_equal(ot_path(x0, x1, 1.0), x1));
  Tensor mid = ot_path(x0, x1, 0.5);
  for (std::size_t k = 0; k < mid.size(); ++k) EXPECT_NEAR(mid.data[k], (x0.data[k] + x1.data[k]) / 2.0, 1e-15);
  Tensor same = ot_path(x0, x0, 0.3);
  for (std::size_t k = 0; k < same.size(); ++k) EXPECT_NEAR(same.data[k], x0.data[k], 1e-15);
  for (double v : target_field(x0, x0).data) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(ot_path(x0, Tensor({3, 3}), 0.5), ss::DimensionError);
}

TEST(CosineSchedule, ValuesAndMonotonicity) {
  EXPECT_NEAR(cosine_schedule(0.0), 0.0, 1e-12);
  EXPECT_NEAR(cosine_schedule(1.0), 1.0, 1e-12);
  EXPECT_NEAR(cosine_schedule(0.5), 1.0 - std::sqrt(0.5), 1e-12);
  double prev = -1.0;
  for (int k = 0; k <= 1000; ++k) {
    const double u = k / 1000.0;
    const double v = cosine_schedule(u);
    EXPECT_GT(v, prev);
    EXPECT_NEAR(std::acos(1.0 - v) * 2.0 / std::numbers::pi, u, 1e-7);  // inverse maps back
    prev = v;
  }
  EXPECT_THROW(cosine_schedule(-0.01), ss::RangeError);
  EXPECT_THROW(cosine_schedule(1.01), ss::RangeError);
}

TEST(CfgField, HardWiredBranches) {
  VelocityFn v = [](const Tensor& x, double, bool conditional) { return Tensor(x.shape, conditional ? 1.0 : 0.0); };
  Tensor x({5, 2});
  for (double y : cfg_field(v, x, 0.3, 0.7).data) EXPECT_DOUBLE_EQ(y, 1.7);
  for (double y : cfg_field(v, x, 0.3, 0.0).data) EXPECT_EQ(y, 1.0);
  EXPECT_THROW(cfg_field(v, x, 0.3, -0.1), ss::ConfigError);
}

TEST(CfgField, AffineInBetaWithRealModel) {
  ss::Rng rng(3);
  CfmConfig c = small_config();
  CfmModel model(c, rng);
  Condition cond = random_condition(rng, c, 5);
  MaskSpec mask{MaskKind::ChunkM, 4};
  VelocityFn v = model_field(model, cond, mask);
  Tensor x = Tensor::randn({10, c.feature_dim}, rng);
  Tensor f0 = cfg_field(v, x, 0.4, 0.0), f1 = cfg_field(v, x, 0.4, 1.0), f2 = cfg_field(v, x, 0.4, 2.0);
  Tensor conditional = v(x, 0.4, true);
  for (std::size_t k = 0; k < f0.size(); ++k) {
    EXPECT_NEAR(f2.data[k], 2.0 * f1.data[k] - f0.data[k], 1e-12);
    EXPECT_EQ(f0.data[k], conditional.data[k]);
  }
}

TEST(Sample, ConstantFieldTelescopes) {
  VelocityFn v = [](const Tensor& x, double, bool) { return Tensor(x.shape, 0.25); };
  Tensor x0 = noise(6, 2, 9);
  for (std::size_t nfe : {1u, 3u, 10u}) {
    Tensor out = integrate(v, x0, nfe, 0.7);
    for (std::size_t k = 0; k < out.size(); ++k) EXPECT_NEAR(out.data[k], x0.data[k] + 0.25, 1e-12);
  }
  EXPECT_THROW(integrate(v, x0, 0, 0.7), ss::ConfigError);
}

TEST(Sample, NoiseHasPrefixProperty) {
  Tensor a = noise(4, 3, 17), b = noise(9, 3, 17);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a.data[k], b.data[k]);
}

TEST(Sample, DeterministicGivenSeed) {
  ss::Rng rng(5);
  CfmConfig c = small_config();
  CfmModel model(c, rng);
  Condition cond = random_condition(rng, c, 6);
  SampleConfig sc{.nfe = 3, .beta = 0.7, .seed = 42, .mask = {MaskKind::FullCausal, 4}};
  EXPECT_TRUE(bit_equal(sample(model, cond, sc), sample(model, cond, sc)));
  sc.seed = 43;
  EXPECT_FALSE(bit_equal(sample(model, cond, sc), sample(model, cond, {.nfe = 3, .beta = 0.7, .seed = 42, .mask = {MaskKind::FullCausal, 4}})));
  sc.nfe = 0;
  EXPECT_THROW(sample(model, cond, sc), ss::ConfigError);
}

TEST(TrainingLoss, OracleEstimatorGivesZeroLossAndGradient) {
  ss::Rng rng(2);
  Tensor x0 = Tensor::randn({6, 3}, rng), x1 = Tensor::randn({6, 3}, rng);
  Tensor w = Tensor::parameter(target_field(x0, x1));
  Tape tape;
  Var loss = flow_loss(tape, tape.param(w), x0, x1);
  tape.backward(loss);
  EXPECT_EQ(loss.item(), 0.0);
  for (double g : w.grad) EXPECT_EQ(g, 0.0);
}

TEST(TrainingLoss, FullMaskZeroesTheReference) {
  ss::Rng rng(2);
  CfmConfig c = small_config();
  c.mask_min = c.mask_max = 1.0;
  TrainDraw d = draw_training(rng, 8, c, 4);
  EXPECT_EQ(d.keep, 0u);
  Condition cond{Tensor({2}), {1, 2, 3, 4}, Tensor::randn({8, 3}, rng), d.keep};
  for (double v : cond.reference(8, 3).data) EXPECT_EQ(v, 0.0);
  for (double v : cond.flags(8).data) EXPECT_EQ(v, 0.0);
}

TEST(TrainingLoss, DrawsCoverMaskKindsAndFractions) {
  ss::Rng rng(8);
  CfmConfig c = small_config();
  std::size_t kinds[4] = {0, 0, 0, 0}, dropped = 0;
  for (int k = 0; k < 4000; ++k) {
    TrainDraw d = draw_training(rng, 100, c, 30);
    ASSERT_LE(d.keep, 30u);
    ASSERT_GE(d.t, 0.0);
    ASSERT_LE(d.t, 1.0);
    ++kinds[static_cast<int>(d.mask.kind)];
    dropped += d.drop_condition;
  }
  for (auto n : kinds) EXPECT_NEAR(n / 4000.0, 0.25, 0.03);
  EXPECT_NEAR(dropped / 4000.0, c.p_uncond, 0.03);
}

TEST(TrainingLoss, MaskedReferenceFramesHaveNoInfluence) {
  ss::Rng rng(4);
  CfmConfig c = small_config();
  CfmModel model(c, rng);
  std::vector<std::size_t> tokens = {1, 5, 2, 7, 3};
  Tensor x1 = Tensor::randn({10, c.feature_dim}, rng);
  Tensor spk = Tensor::randn({c.speaker_dim}, rng);
  TrainDraw d{0.6, Tensor::randn({10, c.feature_dim}, rng), 3, {MaskKind::ChunkM, 4}, false};
  auto ps = model.parameters();
  auto grads = [&](const Tensor& ref_source) {
    ps.zero_grad();
    Tape tape;
    Condition cond{spk, tokens, ref_source, d.keep};
    Var x_t = tape.constant(ot_path(d.x0, x1, d.t));
    Var mu = model.token_features(tape, tokens, d.mask);
    Var loss = flow_loss(tape, model.estimate(tape, x_t, d.t, cond, mu, d.mask), d.x0, x1);
    tape.backward(loss);
    std::vector<double> all{loss.item()};
    for (auto* t : ps.tensors()) all.insert(all.end(), t->grad.begin(), t->grad.end());
    return all;
  };
  Tensor altered = x1;
  for (std::size_t i = d.keep; i < 10; ++i)
    for (std::size_t f = 0; f < c.feature_dim; ++f) altered(i, f) += 3.0;
  EXPECT_EQ(grads(x1), grads(altered));
  Tensor visible = x1;
  visible(0, 0) += 3.0;
  EXPECT_NE(grads(x1), grads(visible));
}

class CfmGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(CfmGradients, MatchFiniteDifferences) {
  ss::Rng rng(GetParam());
  CfmConfig c = small_config();
  CfmModel model(c, rng);
  std::vector<std::size_t> tokens = {1, 5, 2, 7};
  Tensor x1 = Tensor::randn({8, c.feature_dim}, rng);
  Tensor spk = Tensor::randn({c.speaker_dim}, rng);
  TrainDraw d{0.37, Tensor::randn({8, c.feature_dim}, rng), 2, {MaskKind::ChunkM, 4}, false};
  auto ps = model.parameters();
  auto loss = [&](Tape& t) { return training_loss(t, model, x1, spk, tokens, d); };
  EXPECT_LT(ss::check_gradients(loss, ps.tensors()).max_relative_error, 1e-4);
  d.drop_condition = true;
  d.mask.kind = MaskKind::FullCausal;
  EXPECT_LT(ss::check_gradients(loss, ps.tensors()).max_relative_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, CfmGradients, ::testing::Values(1u, 2u, 3u));

TEST(Locality, FramesIgnoreTokensOutsideTheirWindow) {
  ss::Rng rng(6);
  CfmConfig c = small_config();
  CfmModel model(c, rng);
  Condition cond = random_condition(rng, c, 12);
  for (MaskKind kind : {MaskKind::FullCausal, MaskKind::ChunkM}) {
    SampleConfig sc{.nfe = 2, .beta = 0.7, .seed = 3, .mask = {kind, 4}};
    const Tensor base = sample(model, cond, sc);
    for (std::size_t tok = 0; tok < cond.tokens.size(); ++tok) {
      Condition changed = cond;
      changed.tokens[tok] = (changed.tokens[tok] + 1) % c.vocab;
      const Tensor out = sample(model, changed, sc);
      for (std::size_t i = 0; i < base.rows(); ++i) {
        const std::size_t last_token = sc.mask.reach(i, base.rows()) / kUpsample + c.lookahead;
        bool same = true;
        for (std::size_t f = 0; f < c.feature_dim; ++f) same = same && out(i, f) == base(i, f);
        if (tok > last_token) {
          ASSERT_TRUE(same) << mask_name(kind) << " frame " << i << " token " << tok;
        } else if (tok == last_token) {
          EXPECT_FALSE(same) << "look-ahead token should reach frame " << i;
        }
      }
    }
  }
}

TEST(Locality, Chunk2MFieldGrowsOneChunkPerLayer) {
  // One align layer, one estimator layer, one step: two attention layers,
  // so frame i depends on tokens through chunk floor(i/4) + 2, plus P.
  ss::Rng rng(8);
  CfmConfig c = small_config();
  c.align_layers = 1;
  c.estimator_layers = 1;
  CfmModel model(c, rng);
  Condition cond = random_condition(rng, c, 16);
  SampleConfig sc{.nfe = 1, .beta = 0.7, .seed = 5, .mask = {MaskKind::Chunk2M, 4}};
  const Tensor base = sample(model, cond, sc);
  for (std::size_t tok = 0; tok < cond.tokens.size(); ++tok) {
    Condition changed = cond;
    changed.tokens[tok] = (changed.tokens[tok] + 3) % c.vocab;
    const Tensor out = sample(model, changed, sc);
    for (std::size_t i = 0; i < base.rows(); ++i) {
      const std::size_t end = std::min<std::size_t>((i / 4 + 3) * 4 - 1, base.rows() - 1);
      const std::size_t last = end / kUpsample + c.lookahead;
      bool same = true;
      for (std::size_t f = 0; f < c.feature_dim; ++f) same = same && out(i, f) == base(i, f);
      if (tok > last) {
        ASSERT_TRUE(same) << "frame " << i << " token " << tok;
      } else if (tok == last) {
        EXPECT_FALSE(same) << "frame " << i << " token " << tok;
      }
    }
  }
}

TEST(Stream, NonCausalIsRejected) {
  ss::Rng rng(1);
  CfmModel model(small_config(), rng);
  EXPECT_THROW(Streamer(model, Condition{}, {.mask = {MaskKind::NonCausal, 4}}), ss::UnsupportedModeError);
}

TEST(Stream, ChunkedOutputEqualsOneShot) {
  ss::Rng rng(7);
  CfmConfig c = small_config();
  CfmModel model(c, rng);
  for (MaskKind kind : {MaskKind::FullCausal, MaskKind::ChunkM, MaskKind::Chunk2M}) {
    Condition cond = random_condition(rng, c, 24);
    SampleConfig sc{.nfe = 3, .beta = 0.7, .seed = 11, .mask = {kind, 6}};
    const Tensor offline = sample(model, cond, sc);
    std::vector<std::vector<std::size_t>> chunks;
    for (std::size_t k = 0; k < 4; ++k) chunks.emplace_back(cond.tokens.begin() + 6 * k, cond.tokens.begin() + 6 * (k + 1));
    auto blocks = stream_generate(model, cond, chunks, sc);
    EXPECT_TRUE(bit_equal(concat_frames(blocks), offline)) << mask_name(kind);
    if (kind == MaskKind::FullCausal) {
      EXPECT_GE(blocks.size(), 4u);
    }

    auto single = stream_generate(model, cond, {cond.tokens}, sc);
    EXPECT_TRUE(bit_equal(concat_frames(single), offline));
  }
}

TEST(Stream, EmitsOnlyFramesWithKnownLookahead) {
  ss::Rng rng(7);
  CfmConfig c = small_config();
  CfmModel model(c, rng);
  Streamer s(model, Condition{Tensor::randn({c.speaker_dim}, rng), {}, Tensor({1, c.feature_dim}), 0},
             {.nfe = 2, .mask = {MaskKind::FullCausal, 4}});
  EXPECT_EQ(s.safe_frames(2), 0u);  // P = 2 needs three tokens for frame 0
  EXPECT_EQ(s.safe_frames(3), 2u);
  EXPECT_EQ(s.safe_frames(10), 16u);
}

TEST(EnergyDistance, ZeroForIdenticalSetsPositiveForShift) {
  ss::Rng rng(1);
  Tensor a = Tensor::randn({200, 2}, rng);
  EXPECT_NEAR(energy_distance(a, a), 0.0, 1e-12);
  Tensor b = a;
  for (std::size_t i = 0; i < b.rows(); ++i) b(i, 0) += 1.0;
  EXPECT_GT(energy_distance(a, b), 0.1);
  EXPECT_NEAR(energy_distance(a, b), energy_distance(b, a), 1e-12);
}

TEST(TwoMoons, NullEnergyMatchesTheReferenceConstant) {
  // 200 replicate pairs: standard error about 6e-5 here plus 4e-5 in the
  // reference, so 3e-4 is over four combined deviations.
  TwoMoons tm;
  ss::Rng rng(21);
  double mean = 0.0;
  for (int k = 0; k < 200; ++k) mean += energy_distance(tm.points(2000, rng), tm.points(2000, rng));
  mean /= 200.0;
  EXPECT_NEAR(mean, kMoonsNullEnergy, 3e-4);
}

TEST(TwoMoons, TokensNameTheCellOfEachFrame) {
  TwoMoons tm;
  ss::Rng rng(3);
  auto ex = tm.example(50, 1, rng);
  const int k = tm.grid_bound();
  for (std::size_t i = 0; i < ex.x1.rows(); ++i) {
    const auto d = ss::fsq::decode_index(ss::fsq::SpeechToken{static_cast<std::uint32_t>(ex.tokens[i / 2])}, 2, k);
    const double cx = TwoMoons::kCentreX + d[0] * tm.cell, cy = TwoMoons::kCentreY + d[1] * tm.cell;
    if (std::abs(d[0]) < k) {
      EXPECT_LE(std::abs(ex.x1(i, 0) - cx), tm.cell / 2 + 1e-12);
    }
    if (std::abs(d[1]) < k) {
      EXPECT_LE(std::abs(ex.x1(i, 1) - cy), tm.cell / 2 + 1e-12);
    }
  }
  EXPECT_EQ(tm.vocab(), static_cast<std::size_t>((2 * k + 1) * (2 * k + 1)));
}

TEST(ToyFeatures, FollowTheDocumentedRule) {
  std::vector<std::size_t> tokens = {3, 9, 4};
  Tensor spk = Tensor::vector({0.5, -1.0});
  Tensor x = toy_features(tokens, spk, 4);
  ASSERT_EQ(x.rows(), 6u);
  auto e = [](std::size_t tok, std::size_t f) { return std::sin(0.37 * (tok + 1.0) * (f + 1.0) + 0.5 * f); };
  for (std::size_t f = 0; f < 4; ++f) {
    const double v = f % 2 == 0 ? 0.5 : -1.0;
    const double a = 1.0 + 0.3 * std::tanh(v), b = 0.3 * v;
    EXPECT_NEAR(x(0, f), a * e(3, f) + b, 1e-12);
    EXPECT_NEAR(x(1, f), a * 0.5 * (e(3, f) + e(9, f)) + b, 1e-12);
    EXPECT_NEAR(x(5, f), a * e(4, f) + b, 1e-12);
  }
}

class CfmTraining : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(CfmTraining, LossHalvesWithin2000Steps) {
  ss::Rng rng(GetParam());
  CfmConfig c;  // F = 8, speaker 16, vocabulary 6561
  CfmModel model(c, rng);
  ss::Adam opt(model.parameters(), {.lr = 3e-3, .clip_norm = 1.0});
  // 32 utterances of 4 tokens over a 48-token alphabet.
  std::vector<std::size_t> alphabet(48);
  for (auto& a : alphabet) a = std::uniform_int_distribution<std::size_t>(0, c.vocab - 1)(rng);
  std::vector<Example> pool;
  for (int n = 0; n < 32; ++n) {
    Example ex;
    ex.tokens.resize(4);
    for (auto& t : ex.tokens) t = alphabet[std::uniform_int_distribution<std::size_t>(0, alphabet.size() - 1)(rng)];
    ex.speaker = Tensor::randn({c.speaker_dim}, rng);
    ex.x1 = toy_features(ex.tokens, ex.speaker, c.feature_dim);
    pool.push_back(std::move(ex));
  }
  // The loss is measured on 64 fixed draws so that both ends see the same noise.
  ss::Rng eval_rng(999);
  std::vector<TrainDraw> draws;
  for (std::size_t k = 0; k < 64; ++k) draws.push_back(draw_training(eval_rng, pool[k % 32].x1.rows(), c, 4));
  auto evaluate = [&] {
    double total = 0.0;
    for (std::size_t k = 0; k < draws.size(); ++k) {
      const auto& ex = pool[k % 32];
      Tape tape;
      total += training_loss(tape, model, ex.x1, ex.speaker, ex.tokens, draws[k], false).item();
    }
    return total / static_cast<double>(draws.size());
  };
  const double initial = evaluate();
  for (int step = 0; step < 2000; ++step) {
    std::vector<Example> batch;
    for (int b = 0; b < 8; ++b) batch.push_back(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
    training_step(model, opt, batch, rng, 4);
  }
  const double final_loss = evaluate();
  EXPECT_LT(final_loss, 0.5 * initial) << "initial " << initial << " final " << final_loss;
}

INSTANTIATE_TEST_SUITE_P(Seeds, CfmTraining, ::testing::Values(1u, 2u, 3u));
