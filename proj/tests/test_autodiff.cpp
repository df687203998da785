#include <gtest/gtest.h>

#include <cmath>

#include "mcqr/autodiff.hpp"
#include "mcqr/gradcheck.hpp"
#include "mcqr/rng.hpp"

using namespace mcqr;

namespace {

Parameter make_param(const std::string& name, Shape shape, std::uint64_t seed, std::size_t index) {
  Parameter p;
  p.name = name;
  p.value = Tensor(shape);
  Rng rng(seed);
  for (double& v : p.value.values()) v = rng.uniform(-1.0, 1.0);
  p.index = index;
  p.zero_grad();
  return p;
}

double row_sum(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (double v : t.row(r)) s += v;
  return s;
}

}  // namespace

// softmax

TEST(Softmax, UniformOnEqualInputs) {
  Tape tape;
  const DTensor y = softmax(tape.constant(Tensor({1, 4}, 0.0)), 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.value()[i], 0.25);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  Tape tape;
  const DTensor y = softmax(tape.constant(Tensor::matrix(1, 2, {1000.0, 0.0})), 1);
  EXPECT_TRUE(std::isfinite(y.value()[0]));
  EXPECT_NEAR(y.value()[0], 1.0, 1e-15);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-15);
}

TEST(Softmax, MatchesHighPrecisionReference) {
  // 50-digit evaluation of exp(x_i) / sum exp(x).
  const double expected[] = {0.0900305731703804579980221, 0.2447284710547976524729596,
                             0.6652409557748218895290183};
  Tape tape;
  const DTensor y = softmax(tape.constant(Tensor::matrix(1, 3, {1.0, 2.0, 3.0})), 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], expected[i], 1e-12);
}

TEST(Softmax, InvalidAxisIsContractViolation) {
  Tape tape;
  EXPECT_THROW(softmax(tape.constant(Tensor({2, 2}, 1.0)), 2), ContractViolation);
}

TEST(Softmax, SumsToOneOnRandomInputsAlongEitherAxis) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({3, 7});
    for (double& v : x.values()) v = rng.uniform(-30.0, 30.0);
    Tape tape;
    const Tensor rows = softmax(tape.constant(x), 1).value();
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(row_sum(rows, r), 1.0, 1e-9);
    const Tensor cols = softmax(tape.constant(x), 0).value();
    for (std::size_t c = 0; c < 7; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < 3; ++r) s += cols.at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

// layer_norm

TEST(LayerNorm, ConstantRowCollapsesToBias) {
  Tape tape;
  const DTensor y = layer_norm(tape.constant(Tensor::matrix(1, 3, {5, 5, 5})),
                               tape.constant(Tensor({3}, 1.0)), tape.constant(Tensor({3}, 0.0)),
                               1e-6);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.value()[i], 0.0);
}

TEST(LayerNorm, StandardizedRowIsUnchanged) {
  Tape tape;
  const DTensor y = layer_norm(tape.constant(Tensor::matrix(1, 2, {1, -1})),
                               tape.constant(Tensor({2}, 1.0)), tape.constant(Tensor({2}, 0.0)),
                               1e-12);
  EXPECT_NEAR(y.value()[0], 1.0, 1e-11);
  EXPECT_NEAR(y.value()[1], -1.0, 1e-11);
}

TEST(LayerNorm, GainAndBiasFollowTheFormula) {
  // mu = 2, var = 2/3; (x - mu) / sqrt(var + 1e-6) * 2 + 1, at 50 digits.
  Tape tape;
  const DTensor y = layer_norm(tape.constant(Tensor::matrix(1, 3, {1, 2, 3})),
                               tape.constant(Tensor({3}, 2.0)), tape.constant(Tensor({3}, 1.0)),
                               1e-6);
  EXPECT_NEAR(y.value()[0], -1.449487905667937765200741, 1e-12);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-12);
  EXPECT_NEAR(y.value()[2], 3.449487905667937765200741, 1e-12);
}

TEST(LayerNorm, ShapeMismatchIsContractViolation) {
  Tape tape;
  EXPECT_THROW(layer_norm(tape.constant(Tensor({2, 3}, 1.0)), tape.constant(Tensor({2}, 1.0)),
                          tape.constant(Tensor({3}, 0.0)), 1e-6),
               ContractViolation);
}

// backward

TEST(Backward, SumGivesAllOnes) {
  Parameter x = make_param("x", {2, 3}, 1, 0);
  Tape tape;
  tape.backward(sum(tape.param(x)));
  for (double g : x.grad.values()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SquareOfThree) {
  Parameter x;
  x.name = "x";
  x.value = Tensor::scalar(3.0);
  x.zero_grad();
  Tape tape;
  const DTensor a = tape.param(x);
  tape.backward(sum(mul(a, a)));
  EXPECT_DOUBLE_EQ(x.grad[0], 6.0);
}

TEST(Backward, NonScalarLossIsContractViolation) {
  Parameter x = make_param("x", {2, 2}, 2, 0);
  Tape tape;
  const DTensor y = affine(tape.param(x), 2.0);
  EXPECT_THROW(tape.backward(y), ContractViolation);
}

TEST(Backward, SecondReplayIsAnError) {
  Parameter x = make_param("x", {2, 2}, 3, 0);
  Tape tape;
  const DTensor loss = sum(tape.param(x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractViolation);
  EXPECT_THROW(tape.param(x), ContractViolation);
  tape.clear();
  EXPECT_NO_THROW(tape.backward(sum(tape.param(x))));
}

TEST(Backward, UnreachableParameterKeepsZeroGrad) {
  Parameter x = make_param("x", {2}, 4, 0);
  Parameter dead = make_param("dead", {3}, 5, 1);
  Tape tape;
  tape.param(dead);
  tape.backward(sum(tape.param(x)));
  for (double g : dead.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, IsLinearInTheLoss) {
  Parameter w = make_param("w", {3, 3}, 6, 0);
  Tensor input({2, 3});
  Rng rng(7);
  for (double& v : input.values()) v = rng.uniform(-1, 1);
  auto l1 = [&](Tape& t) { return sum(relu(matmul(t.constant(input), t.param(w)))); };
  auto l2 = [&](Tape& t) { return sum(sigmoid(matmul(t.constant(input), t.param(w)))); };
  const double a = 0.7, b = -1.3;

  GradientBuffers g1(1), g2(1), g12(1);
  {
    Tape t;
    t.backward(l1(t), g1);
  }
  {
    Tape t;
    t.backward(l2(t), g2);
  }
  {
    Tape t;
    t.backward(add(affine(l1(t), a), affine(l2(t), b)), g12);
  }
  for (std::size_t i = 0; i < w.value.size(); ++i)
    EXPECT_NEAR(g12[0][i], a * g1[0][i] + b * g2[0][i], 1e-12);
}

TEST(Backward, TwoLayerNetworkMatchesFiniteDifferences) {
  Parameter w1 = make_param("w1", {4, 5}, 10, 0);
  Parameter b1 = make_param("b1", {5}, 11, 1);
  Parameter w2 = make_param("w2", {5, 3}, 12, 2);
  Tensor input({3, 4});
  Rng rng(13);
  for (double& v : input.values()) v = rng.uniform(-1, 1);
  const ScalarFn f = [&](Tape& t) {
    const DTensor h = sigmoid(add_row(matmul(t.constant(input), t.param(w1)), t.param(b1)));
    const DTensor p = softmax(matmul(h, t.param(w2)), 1);
    return affine(sum(log(pick(p, {0, 2, 1}))), -1.0);
  };
  const GradCheckReport rep = grad_check(f, {&w1, &b1, &w2}, 1e-4);
  ASSERT_EQ(rep.entries.size(), 3u);
  EXPECT_LT(rep.worst(), 1e-4);
}

TEST(Backward, EveryOpPassesGradCheck) {
  Parameter a = make_param("a", {3, 4}, 20, 0);
  Parameter b = make_param("b", {4, 4}, 21, 1);
  Parameter g = make_param("g", {4}, 22, 2);
  Parameter table = make_param("table", {5, 2}, 23, 3);
  auto buckets = std::make_shared<std::vector<int>>(std::vector<int>{0, 1, 2, -1, 4, 3, 2, 1, 0});
  const ScalarFn f = [&](Tape& t) {
    const DTensor x = t.param(a);
    const DTensor y = matmul(x, t.param(b));                    // 3×4
    const DTensor ln = layer_norm(y, t.param(g), t.param(g), 1e-6);
    const DTensor nt = matmul_nt(ln, x);                          // 3×3
    const DTensor bias = relative_bias(t.param(table), buckets, 3, 3);
    const DTensor att = attention(ln, x, y, 2, bias);             // 3×4
    const DTensor cat = concat_rows(att, slice_rows(gather_rows(t.param(b), {1, 3, 1}), 0, 2));
    const DTensor sc = scatter_cols(softmax(nt, 1), {0, 2, 0}, 4);
    const DTensor pd = pad_cols(sc, 5);
    const DTensor lam = sigmoid(slice_rows(matmul(cat, t.param(b)), 0, 3));
    const DTensor mixed = mul_col(slice_rows(pd, 0, 3), pick(lam, {0, 1, 2}));
    return add(sum(mul(cat, cat)), sum(log(affine(relu(mixed), 1.0, 0.5))));
  };
  const GradCheckReport rep = grad_check(f, {&a, &b, &g, &table}, 1e-5);
  for (const auto& e : rep.entries) EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
}

// grad_check

TEST(GradCheck, QuadraticIsNearlyExact) {
  Parameter x;
  x.name = "x";
  x.value = Tensor::scalar(1.0);
  x.zero_grad();
  const GradCheckReport rep = grad_check([&](Tape& t) {
    const DTensor v = t.param(x);
    return sum(mul(v, v));
  }, {&x}, 1e-4);
  EXPECT_LT(rep.worst(), 1e-6);
}

TEST(GradCheck, DeadParameterReportsZeros) {
  Parameter x = make_param("x", {2}, 30, 0);
  Parameter dead = make_param("dead", {2}, 31, 1);
  const GradCheckReport rep = grad_check([&](Tape& t) { return sum(t.param(x)); }, {&x, &dead});
  ASSERT_EQ(rep.entries.size(), 2u);
  EXPECT_EQ(rep.entries[1].name, "dead");
  EXPECT_EQ(rep.entries[1].max_abs_analytic, 0.0);
  EXPECT_EQ(rep.entries[1].max_abs_numeric, 0.0);
  EXPECT_EQ(rep.entries[1].max_rel_error, 0.0);
}

TEST(GradCheck, RejectsStepOutsideRange) {
  Parameter x = make_param("x", {1}, 32, 0);
  const ScalarFn f = [&](Tape& t) { return sum(t.param(x)); };
  EXPECT_THROW(grad_check(f, {&x}, 0.0), ContractViolation);
  EXPECT_THROW(grad_check(f, {&x}, 0.02), ContractViolation);
}

TEST(GradCheck, DetectsNondeterminism) {
  Parameter x = make_param("x", {1}, 33, 0);
  int calls = 0;
  const ScalarFn f = [&](Tape& t) { return affine(sum(t.param(x)), 1.0, 0.1 * ++calls); };
  EXPECT_THROW(grad_check(f, {&x}), NondeterminismError);
}

// tape

TEST(Tape, InputsAlwaysPrecedeOutputs) {
  Parameter w = make_param("w", {3, 3}, 40, 0);
  Tape tape;
  const DTensor x = tape.param(w);
  sum(softmax(matmul(relu(x), x), 1));
  for (std::size_t id = 0; id < tape.size(); ++id)
    for (std::size_t in : tape.node(id).inputs) EXPECT_LT(in, id);
}

TEST(Tape, ForwardIsBitwiseDeterministic) {
  Parameter w = make_param("w", {6, 6}, 41, 0);
  auto run = [&] {
    Tape tape;
    const DTensor x = tape.param(w);
    return attention(x, x, x, 3).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, TruncateDropsLaterNodes) {
  Parameter w = make_param("w", {2, 2}, 42, 0);
  Tape tape;
  const DTensor x = tape.param(w);
  const std::size_t mark = tape.size();
  const Tensor first = softmax(x, 1).value();
  tape.truncate(mark);
  EXPECT_EQ(tape.size(), mark);
  EXPECT_EQ(softmax(x, 1).value(), first);
}

TEST(Tape, ConstantOnlyGraphsNeedNoGradient) {
  Tape tape;
  const DTensor c = matmul(tape.constant(Tensor({2, 2}, 1.0)), tape.constant(Tensor({2, 2}, 2.0)));
  EXPECT_FALSE(tape.needs_grad(c.id()));
}

TEST(Attention, MaskedKeysGetZeroProbability) {
  Tape tape;
  Tensor q({2, 4}), k({3, 4});
  Rng rng(50);
  for (double& v : q.values()) v = rng.uniform(-1, 1);
  for (double& v : k.values()) v = rng.uniform(-1, 1);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1, 1, 0});
  const DTensor kk = tape.constant(k);
  const DTensor att = attention(tape.constant(q), kk, kk, 2, std::nullopt, mask);
  const Tensor& p = attention_probs(att);
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(p[(h * 2 + 0) * 3 + 1], 0.0);
    EXPECT_EQ(p[(h * 2 + 1) * 3 + 2], 0.0);
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += p[(h * 2 + r) * 3 + c];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}
