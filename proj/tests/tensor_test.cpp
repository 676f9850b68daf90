#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "streamsynth/checkpoint.hpp"
#include "streamsynth/gradcheck.hpp"
#include "streamsynth/nn.hpp"
#include "streamsynth/ops.hpp"

namespace ss = streamsynth;
using ss::Tape;
using ss::Tensor;
using ss::Var;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  ss::Rng rng(seed);
  return Tensor::randn({r, c}, rng);
}

ss::BoolMatrix lower_triangular(std::size_t n) {
  ss::BoolMatrix m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape tape;
  Tensor m = random_matrix(3, 4, 1);
  Var out = ss::matmul(tape.constant(Tensor::identity(3)), tape.constant(m));
  EXPECT_EQ(out.value().data, m.data);
}

TEST(Matmul, ZerosTimesOnesIsZero) {
  Tape tape;
  Var out = ss::matmul(tape.constant(Tensor::zeros(2, 3)), tape.constant(Tensor::ones(3, 4)));
  EXPECT_EQ(out.shape(), (ss::Shape{2, 4}));
  for (double x : out.value().data) EXPECT_EQ(x, 0.0);
}

TEST(Matmul, InnerExtentMismatchThrows) {
  Tape tape;
  EXPECT_THROW(ss::matmul(tape.constant(Tensor::zeros(2, 3)), tape.constant(Tensor::zeros(4, 2))),
               ss::DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Tensor a = Tensor::parameter(random_matrix(4, 5, 7));
  Tensor b = Tensor::parameter(random_matrix(5, 2, 8));
  Tensor* ps[] = {&a, &b};
  auto report = ss::check_gradients([&](Tape& t) { return ss::sum(ss::matmul(t.param(a), t.param(b))); }, ps);
  EXPECT_LT(report.max_relative_error, 1e-6);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Var x = tape.leaf(random_matrix(2, 3, 3));
  tape.backward(ss::sum(x));
  for (double g : tape.grad(x)) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  Tape tape;
  Tensor point = random_matrix(3, 3, 4);
  Var x = tape.leaf(point);
  tape.backward(ss::sum(ss::mul(x, x)));
  auto g = tape.grad(x);
  for (std::size_t k = 0; k < point.size(); ++k) EXPECT_DOUBLE_EQ(g[k], 2.0 * point.data[k]);
}

TEST(Backward, NonScalarLossThrows) {
  Tape tape;
  Var x = tape.leaf(random_matrix(2, 2, 5));
  EXPECT_THROW(tape.backward(ss::scale(x, 2.0)), ss::DimensionError);
}

TEST(Backward, ParameterGradientsAccumulateAcrossUses) {
  Tensor w = Tensor::parameter(Tensor::vector({1.0, 2.0}));
  Tape tape;
  Var a = tape.param(w);
  Var b = tape.param(w);
  tape.backward(ss::sum(ss::add(a, b)));
  EXPECT_EQ(w.grad, (std::vector<double>{2.0, 2.0}));
}

TEST(Backward, ReplayIsBitDeterministic) {
  auto run = [] {
    Tape tape;
    Var x = tape.leaf(random_matrix(4, 6, 11));
    Var w = tape.leaf(random_matrix(6, 3, 12));
    Var y = ss::softmax(ss::tanh(ss::matmul(x, w)));
    Var loss = ss::sum(ss::mul(y, y));
    tape.backward(loss);
    auto g = tape.grad(x);
    return std::make_pair(loss.item(), std::vector<double>(g.begin(), g.end()));
  };
  auto first = run();
  auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(Tape, OperationsAreRecordedInTopologicalOrder) {
  Tape tape;
  Var x = tape.leaf(random_matrix(2, 2, 1));
  Var y = ss::silu(x);
  Var z = ss::sum(ss::mul(y, x));
  EXPECT_LT(x.id, y.id);
  EXPECT_LT(y.id, z.id);
  EXPECT_EQ(tape.num_ops(), 3u);
}

TEST(Softmax, UniformInputGivesUniformOutput) {
  Tape tape;
  Var out = ss::softmax(tape.constant(Tensor::vector({0.0, 0.0, 0.0})), 0);
  for (double p : out.value().data) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
}

TEST(Softmax, ColumnAxisNormalisesColumns) {
  Tape tape;
  Var out = ss::softmax(tape.constant(random_matrix(3, 4, 2)), 0);
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += out.value()(i, j);
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Conv1d, DeltaKernelIsIdentity) {
  const std::size_t features = 3, pad = 2;
  Tensor weight({(pad + 1) * features, features});
  for (std::size_t f = 0; f < features; ++f) weight(f, f) = 1.0;  // tap 0 = identity
  Tape tape;
  Tensor x = random_matrix(5, features, 9);
  Var out = ss::conv1d_right_padded(tape.constant(x), tape.constant(weight), tape.constant(Tensor({features})),
                                    pad + 1, pad);
  EXPECT_EQ(out.value().data, x.data);
}

TEST(Conv1d, OutputIgnoresInputsBeyondPad) {
  const std::size_t len = 8, features = 2, pad = 2;
  Tensor weight = random_matrix((pad + 1) * features, features, 21);
  Tensor bias = random_matrix(1, features, 22);
  bias.shape = {features};
  Tensor x = random_matrix(len, features, 23);
  auto run = [&](const Tensor& in) {
    Tape tape;
    return ss::conv1d_right_padded(tape.constant(in), tape.constant(weight), tape.constant(bias), pad + 1, pad)
        .value();
  };
  const Tensor base = run(x);
  for (std::size_t i = 0; i + pad + 1 < len; ++i) {
    Tensor perturbed = x;
    for (std::size_t f = 0; f < features; ++f) perturbed(i + pad + 1, f) += 3.0;
    const Tensor out = run(perturbed);
    for (std::size_t r = 0; r <= i; ++r)
      for (std::size_t f = 0; f < features; ++f) EXPECT_EQ(out(r, f), base(r, f)) << "row " << r;
  }
}

TEST(Conv1d, KernelMustBePadPlusOne) {
  Tape tape;
  EXPECT_THROW(ss::conv1d_right_padded(tape.constant(Tensor::zeros(4, 2)), tape.constant(Tensor::zeros(6, 2)),
                                       tape.constant(Tensor({2})), 3, 1),
               ss::DimensionError);
}

TEST(CrossEntropy, ConfidentCorrectPredictionHasZeroLoss) {
  Tape tape;
  Tensor logits = Tensor::zeros(3, 4);
  logits(1, 2) = 1000.0;
  Var loss = ss::cross_entropy_ignore(tape.constant(logits), {0, 2, 0}, {true, false, true});
  EXPECT_EQ(loss.item(), 0.0);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocabulary) {
  Tape tape;
  Var loss = ss::cross_entropy_ignore(tape.constant(Tensor::zeros(1, 4)), {3}, {false});
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, IgnoredPositionsReceiveExactlyZeroGradient) {
  Tape tape;
  Var logits = tape.leaf(random_matrix(4, 5, 31));
  tape.backward(ss::cross_entropy_ignore(logits, {1, 2, 3, 4}, {true, false, true, false}));
  auto g = tape.grad(logits);
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_EQ(g[0 * 5 + j], 0.0);
    EXPECT_EQ(g[2 * 5 + j], 0.0);
  }
}

TEST(CrossEntropy, AllIgnoredIsAnExplicitError) {
  Tape tape;
  EXPECT_THROW(ss::cross_entropy_ignore(tape.constant(Tensor::zeros(2, 3)), {0, 1}, {true, true}),
               ss::EmptyLossError);
}

TEST(MaskedAttention, IdentityMaskCopiesValues) {
  Tape tape;
  Tensor v = random_matrix(4, 3, 41);
  ss::BoolMatrix mask(4);
  for (std::size_t i = 0; i < 4; ++i) mask.set(i, i, true);
  Var out = ss::masked_attention(tape.constant(random_matrix(4, 3, 42)), tape.constant(random_matrix(4, 3, 43)),
                                 tape.constant(v), mask);
  EXPECT_EQ(out.value().data, v.data);
}

TEST(MaskedAttention, IdenticalKeysAverageValues) {
  Tape tape;
  Tensor k({4, 3}, 0.5);
  Tensor v = random_matrix(4, 3, 44);
  Var out = ss::masked_attention(tape.constant(random_matrix(4, 3, 45)), tape.constant(k), tape.constant(v),
                                 ss::BoolMatrix(4, true));
  for (std::size_t f = 0; f < 3; ++f) {
    const double avg = (v(0, f) + v(1, f) + v(2, f) + v(3, f)) / 4.0;
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.value()(i, f), avg, 1e-15);
  }
}

TEST(MaskedAttention, CausalRowsIgnoreFutureValuesBitExactly) {
  const std::size_t n = 6;
  Tensor q = random_matrix(n, 3, 51), k = random_matrix(n, 3, 52), v = random_matrix(n, 3, 53);
  auto run = [&](const Tensor& values) {
    Tape tape;
    return ss::masked_attention(tape.constant(q), tape.constant(k), tape.constant(values), lower_triangular(n)).value();
  };
  const Tensor base = run(v);
  for (std::size_t j = 1; j < n; ++j) {
    Tensor pv = v;
    for (std::size_t f = 0; f < 3; ++f) pv(j, f) += 10.0;
    const Tensor out = run(pv);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t f = 0; f < 3; ++f) EXPECT_EQ(out(i, f), base(i, f));
  }
}

TEST(MaskedAttention, RowWithoutAllowedPositionsThrows) {
  Tape tape;
  ss::BoolMatrix mask(2, true);
  mask.set(1, 0, false);
  mask.set(1, 1, false);
  Tensor x = random_matrix(2, 2, 1);
  EXPECT_THROW(ss::masked_attention(tape.constant(x), tape.constant(x), tape.constant(x), mask), ss::DimensionError);
}

TEST(LayerNorm, RowsAreStandardised) {
  Tape tape;
  Var out = ss::layer_norm(tape.constant(random_matrix(3, 8, 61)), tape.constant(Tensor({8}, 1.0)),
                           tape.constant(Tensor({8})));
  for (std::size_t i = 0; i < 3; ++i) {
    double mu = 0.0, var = 0.0;
    for (double x : out.value().row(i)) mu += x;
    mu /= 8.0;
    for (double x : out.value().row(i)) var += (x - mu) * (x - mu);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var / 8.0, 1.0, 1e-4);
  }
}

TEST(Embedding, OutOfRangeIdThrows) {
  Tape tape;
  EXPECT_THROW(ss::embedding(tape.constant(Tensor::zeros(3, 2)), {0, 3}), ss::RangeError);
}

// Every differentiable primitive against central differences, three seeds.
class PrimitiveGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  const std::uint64_t seed = GetParam();
  Tensor a = Tensor::parameter(random_matrix(5, 4, seed));
  Tensor b = Tensor::parameter(random_matrix(5, 4, seed + 100));
  Tensor w = Tensor::parameter(random_matrix(4, 3, seed + 200));
  Tensor gain = Tensor::parameter(random_matrix(1, 4, seed + 300));
  gain.shape = {4};
  Tensor bias = Tensor::parameter(random_matrix(1, 4, seed + 400));
  bias.shape = {4};
  Tensor table = Tensor::parameter(random_matrix(7, 4, seed + 500));
  Tensor conv_w = Tensor::parameter(random_matrix(3 * 4, 4, seed + 600));
  Tensor* ps[] = {&a, &b, &w, &gain, &bias, &table, &conv_w};

  // Weighted sums keep every output element's gradient distinct.
  Tensor weights3 = random_matrix(5, 3, seed + 700);
  Tensor weights4 = random_matrix(5, 4, seed + 800);
  auto weighted = [](Tape& t, Var y, const Tensor& wts) { return ss::sum(ss::mul(y, t.constant(wts))); };

  std::vector<std::pair<const char*, std::function<Var(Tape&)>>> cases = {
      {"add", [&](Tape& t) { return weighted(t, ss::add(t.param(a), t.param(b)), weights4); }},
      {"sub", [&](Tape& t) { return weighted(t, ss::sub(t.param(a), t.param(b)), weights4); }},
      {"mul", [&](Tape& t) { return weighted(t, ss::mul(t.param(a), t.param(b)), weights4); }},
      {"matmul", [&](Tape& t) { return weighted(t, ss::matmul(t.param(a), t.param(w)), weights3); }},
      {"silu", [&](Tape& t) { return weighted(t, ss::silu(t.param(a)), weights4); }},
      {"tanh", [&](Tape& t) { return weighted(t, ss::tanh(t.param(a)), weights4); }},
      {"relu", [&](Tape& t) { return weighted(t, ss::relu(t.param(a)), weights4); }},
      {"sigmoid", [&](Tape& t) { return weighted(t, ss::sigmoid(t.param(a)), weights4); }},
      {"log_sigmoid", [&](Tape& t) { return weighted(t, ss::log_sigmoid(t.param(a)), weights4); }},
      {"softmax_rows", [&](Tape& t) { return weighted(t, ss::softmax(t.param(a), 1), weights4); }},
      {"softmax_cols", [&](Tape& t) { return weighted(t, ss::softmax(t.param(a), 0), weights4); }},
      {"log_softmax", [&](Tape& t) { return weighted(t, ss::log_softmax(t.param(a)), weights4); }},
      {"layer_norm",
       [&](Tape& t) { return weighted(t, ss::layer_norm(t.param(a), t.param(gain), t.param(bias)), weights4); }},
      {"add_bias", [&](Tape& t) { return weighted(t, ss::add_bias(t.param(a), t.param(bias)), weights4); }},
      {"embedding",
       [&](Tape& t) { return weighted(t, ss::embedding(t.param(table), {1, 3, 3, 6, 0}), weights4); }},
      {"conv1d",
       [&](Tape& t) {
         return weighted(t, ss::conv1d_right_padded(t.param(a), t.param(conv_w), t.param(bias), 3, 2), weights4);
       }},
      {"cross_entropy",
       [&](Tape& t) {
         return ss::cross_entropy_ignore(t.param(a), {0, 1, 2, 3, 1}, {false, true, false, false, true});
       }},
      {"masked_attention",
       [&](Tape& t) {
         return weighted(t, ss::masked_attention(t.param(a), t.param(b), ss::tanh(t.param(a)), lower_triangular(5)),
                         weights4);
       }},
      {"slices_concat",
       [&](Tape& t) {
         Var left = ss::slice_cols(t.param(a), 0, 2);
         Var right = ss::slice_cols(t.param(b), 1, 3);
         return weighted(t, ss::concat_cols({right, left}), weights4);
       }},
      {"repeat_rows",
       [&](Tape& t) {
         return ss::sum(ss::mul(ss::repeat_rows(ss::slice_rows(t.param(a), 1, 4), 2), ss::slice_rows(
                                                                                          ss::repeat_rows(t.param(b), 2), 2, 8)));
       }},
      {"broadcast_pick",
       [&](Tape& t) {
         Var m = ss::add(ss::broadcast_rows(t.param(gain), 5), t.param(a));
         return ss::sum(ss::pick(ss::log_softmax(m), {0, 3, 2, 1, 1}));
       }},
      {"abs_mean", [&](Tape& t) { return ss::mean(ss::abs(ss::sub(t.param(a), t.param(b)))); }},
      {"zero_rows", [&](Tape& t) { return weighted(t, ss::zero_rows_from(t.param(a), 3), weights4); }},
  };
  for (auto& [name, fn] : cases) {
    auto report = ss::check_gradients(fn, ps);
    EXPECT_LT(report.max_relative_error, 1e-4) << name << " worst analytic " << report.worst_analytic
                                               << " numeric " << report.worst_numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Values(1u, 2u, 3u));

TEST(GradCheck, SinglePointFormReportsSmallError) {
  Tensor point = random_matrix(3, 2, 77);
  const double err = ss::check_gradients([](Tape&, Var x) { return ss::sum(ss::tanh(ss::mul(x, x))); }, point);
  EXPECT_LT(err, 1e-6);
}

TEST(Checkpoint, RoundTripsValuesAndMetadata) {
  ss::Rng rng(5);
  ss::Linear layer(3, 2, rng);
  ss::ParameterSet ps;
  layer.collect(ps, "proj");
  std::stringstream buf;
  ss::checkpoint::write(buf, "toy", ps, {{"hidden", "3"}});

  ss::Rng other(6);
  ss::Linear restored(3, 2, other);
  ss::ParameterSet rs;
  restored.collect(rs, "proj");
  auto meta = ss::checkpoint::read(buf, "toy", rs);
  EXPECT_EQ(meta["hidden"], "3");
  EXPECT_EQ(meta["param.0"], "proj.weight 3x2");
  EXPECT_EQ(restored.weight.data, layer.weight.data);
  EXPECT_EQ(rs.hash(), ps.hash());
}

TEST(Checkpoint, HeaderIsMagicThenLittleEndianVersion) {
  ss::ParameterSet empty;
  std::stringstream buf;
  ss::checkpoint::write(buf, "m", empty);
  const std::string bytes = buf.str();
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "SSYN");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  ss::Rng rng(5);
  ss::Linear layer(3, 2, rng);
  ss::ParameterSet ps;
  layer.collect(ps, "proj");
  std::stringstream buf;
  ss::checkpoint::write(buf, "toy", ps);
  ss::Linear wrong(2, 2, rng);
  ss::ParameterSet ws;
  wrong.collect(ws, "proj");
  EXPECT_THROW(ss::checkpoint::read(buf, "toy", ws), ss::IoError);
}
