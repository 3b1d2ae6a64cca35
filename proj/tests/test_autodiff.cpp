#include <gtest/gtest.h>

#include <cmath>

#include "qforget/autodiff.hpp"
#include "qforget/error.hpp"
#include "qforget/factmodel.hpp"
#include "test_support.hpp"

namespace qforget {
namespace {

using ad::Tape;
using ad::Var;

TEST(Autodiff, ScalarMatmul) {
  Tape tape;
  Var a = tape.constant(Tensor::scalar(2.0));
  Var b = tape.constant(Tensor::scalar(3.0));
  EXPECT_EQ(ad::matmul(a, b).value().item(), 6.0);
}

TEST(Autodiff, UniformCrossEntropyIsLn2) {
  Tape tape;
  Var z = tape.constant(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(ad::cross_entropy(z, {0}).value().item(), std::log(2.0));
}

TEST(Autodiff, GeluAtZero) {
  Tape tape;
  Var x = tape.constant(Tensor::scalar(0.0));
  EXPECT_EQ(ad::gelu(x).value().item(), 0.0);
  EXPECT_EQ(ad::gelu_value(0.0), 0.0);
}

TEST(Autodiff, HalfSquaredNormGradientIsTheta) {
  const Tensor theta({1, 4}, {0.5, -1.25, 3.0, 0.0});
  Tape tape;
  Var t = tape.parameter("t", theta);
  // 1/2 ||t||^2 = (n/2) mean(t * t)
  Var loss = ad::scale(ad::mean(ad::mul(t, t)), 2.0);
  const auto g = tape.backward(loss);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_DOUBLE_EQ(g.at("t")[i], theta[i]);
}

TEST(Autodiff, SumOfMatVecHandOracle) {
  // L = sum(W x), W 2x2, x = [3, -2]: dL/dW[i][j] = x[j].
  Tape tape;
  Var w = tape.parameter("w", Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Var x = tape.constant(Tensor({1, 2}, {3.0, -2.0}));
  Var y = ad::matmul(x, w, kernels::Trans::Yes);  // 1x2 = x W^T
  Var loss = ad::scale(ad::mean(y), 2.0);
  EXPECT_DOUBLE_EQ(loss.value().item(), (1 * 3 - 2 * 2) + (3 * 3 - 4 * 2));
  const NamedTensors g = tape.backward(loss);
  EXPECT_EQ(g.at("w"), Tensor({2, 2}, {3.0, -2.0, 3.0, -2.0}));
}

TEST(Autodiff, UnreachedParameterGetsZeros) {
  Tape tape;
  Var used = tape.parameter("used", Tensor({1, 2}, {1.0, 2.0}));
  tape.parameter("unused", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  const auto g = tape.backward(ad::mean(used));
  EXPECT_EQ(g.at("unused"), Tensor::zeros(2, 3));
}

TEST(Autodiff, ShapeMismatchNamesBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor::zeros(2, 3));
  Var b = tape.constant(Tensor::zeros(2, 2));
  try {
    ad::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(shape_string({2, 3})), std::string::npos) << msg;
    EXPECT_NE(msg.find(shape_string({2, 2})), std::string::npos) << msg;
  }
}

TEST(Autodiff, NonFiniteIntermediateNamesTheOp) {
  Tape tape;
  Var a = tape.constant(Tensor::scalar(1e300));
  try {
    ad::scale(a, 1e300);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find(ad::op_name(ad::OpKind::Scale)), std::string::npos) << e.what();
  }
}

TEST(Autodiff, BackwardOnNonScalarThrows) {
  Tape tape;
  Var a = tape.parameter("a", Tensor::zeros(2, 2));
  EXPECT_THROW(tape.backward(ad::scale(a, 2.0)), ShapeError);
}

TEST(Autodiff, BackwardTwiceIsBitIdentical) {
  const auto m = testing::tiny_model();
  const ParamSet p = testing::with_random_adapters(model::init_model(m), 3);
  const auto facts = data::FactDataset::generate(testing::tiny_dataset()).trained_facts();
  Tape tape;
  Var loss = model::mean_loss(model::bind(tape, p), m, facts);
  EXPECT_EQ(tape.backward(loss), tape.backward(loss));
}

TEST(Autodiff, LinearityInIntegerCoefficients) {
  const Tensor w0({2, 3}, {0.3, -0.7, 1.1, 0.2, 0.9, -0.4});
  auto grads = [&](double a, double b) {
    Tape tape;
    Var w = tape.parameter("w", w0);
    Var x = tape.constant(Tensor({2, 3}, {1.0, 0.5, -2.0, 0.25, 3.0, 1.5}));
    Var l1 = ad::mean(ad::gelu(ad::mul(w, x)));
    Var l2 = ad::l2_norm(w);
    Var loss = ad::add(ad::scale(l1, a), ad::scale(l2, b));
    return tape.backward(loss).at("w");
  };
  const Tensor g1 = grads(1, 0), g2 = grads(0, 1), g = grads(2, 4);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], 2 * g1[i] + 4 * g2[i]);
}

TEST(FiniteDiff, QuadraticWithinOneEMinusEight) {
  NamedTensors params{{"w", Tensor({2, 3}, {0.3, -0.7, 1.1, 0.2, 0.9, -0.4})}};
  const auto report = ad::finite_diff_check(
      [](Tape&, const std::map<std::string, Var>& v) { return ad::scale(ad::mean(ad::mul(v.at("w"), v.at("w"))), 3.0); },
      params);
  EXPECT_TRUE(report.passed);
  EXPECT_LE(report.max_rel_error, 1e-8);
  EXPECT_EQ(report.coordinates_checked, 6u);
}

TEST(FiniteDiff, EveryPrimitive) {
  Rng rng(11);
  NamedTensors params{{"a", testing::random_matrix(rng, 3, 4)},
                      {"b", testing::random_matrix(rng, 4, 2)},
                      {"c", testing::random_matrix(rng, 3, 2)},
                      {"e", testing::random_matrix(rng, 5, 2)}};
  Tensor ref_lp({3, 2}, {std::log(0.3), std::log(0.7), std::log(0.5), std::log(0.5), std::log(0.9), std::log(0.1)});
  const auto report = ad::finite_diff_check(
      [&](Tape& tape, const std::map<std::string, Var>& v) {
        Var h = ad::gelu(ad::add(ad::matmul(v.at("a"), v.at("b")), v.at("c")));
        Var emb = ad::embedding(v.at("e"), {4, 0, 2});
        Var z = ad::concat_cols(ad::mul(h, emb), ad::softplus(h));
        Var ce = ad::mean(ad::cross_entropy(z, {0, 3, 1}));
        Var kl = ad::mean(ad::softmax_kl(ad::scale(h, 1.5), ref_lp));
        Var st = ad::mean(ad::straight_through(v.at("c"), tape.value(v.at("c"))));
        return ad::add(ad::add(ce, kl), ad::add(st, ad::l2_norm(v.at("a"))));
      },
      params);
  EXPECT_TRUE(report.passed) << report.worst_coordinate << " rel " << report.max_rel_error << " abs "
                             << report.max_abs_error;
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(FiniteDiff, FullToyModelLoss) {
  const auto m = testing::tiny_model();
  const ParamSet p = testing::with_random_adapters(model::init_model(m), 5);
  const auto facts = data::FactDataset::generate(testing::tiny_dataset()).trained_facts();
  const auto report = ad::finite_diff_check(
      [&](Tape&, const std::map<std::string, Var>& v) { return model::mean_loss(v, m, facts); }, p.values());
  EXPECT_TRUE(report.passed) << report.worst_coordinate;
  EXPECT_LE(report.max_rel_error, 1e-6);
  EXPECT_LE(report.max_abs_error, 1e-9);
}

TEST(FiniteDiff, ZeroGradientCoordinateUsesAbsoluteCriterion) {
  NamedTensors params{{"w", Tensor({1, 2}, {0.0, 1.0})}};
  // d/dw0 of w0^2 at 0 is exactly 0.
  const auto report = ad::finite_diff_check(
      [](Tape&, const std::map<std::string, Var>& v) { return ad::mean(ad::mul(v.at("w"), v.at("w"))); }, params);
  EXPECT_TRUE(report.passed);
  EXPECT_LE(report.max_abs_error, 1e-9);
}

}  // namespace
}  // namespace qforget
