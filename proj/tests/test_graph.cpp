#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "sts/graph.hpp"

namespace sts::ad {
namespace {

using testing::all_op_cases;
using testing::gradcheck;

TEST(GraphForward, SoftmaxOfZerosIsUniform) {
  Graph<float> g;
  auto x = g.input("x", {2, 10});
  auto y = g.softmax(x);
  g.set_input(x, Tensor({2, 10}, 0.0f));
  g.forward();
  for (float v : g.value(y).data()) EXPECT_FLOAT_EQ(v, 0.1f);
}

TEST(GraphForward, Relu) {
  Graph<float> g;
  auto x = g.input("x", {3});
  auto y = g.relu(x);
  g.forward({{"x", Tensor({3}, {-1.0f, 0.0f, 2.0f})}});
  EXPECT_EQ(g.value(y), Tensor({3}, {0.0f, 0.0f, 2.0f}));
}

TEST(GraphForward, IdentityKernelConvolutionReturnsImage) {
  std::mt19937_64 rng(3);
  Graph<float> g;
  auto x = g.input("x", {2, 3, 5, 4});
  Tensor w({3, 3, 1, 1}, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
  auto y = g.conv2d(x, g.parameter("w", w), g.parameter("b", Tensor({3}, 0.0f)));
  Tensor img({2, 3, 5, 4});
  std::uniform_real_distribution<float> u(0, 1);
  for (float& v : img.data()) v = u(rng);
  g.set_input(x, img);
  g.forward();
  EXPECT_EQ(g.value(y), img);
}

TEST(GraphForward, SoftmaxRowsAreProbabilityVectors) {
  std::mt19937_64 rng(11);
  Graph<double> g;
  auto x = g.input("x", {16, 7});
  auto y = g.softmax(x);
  g.set_input(x, testing::random_tensor({16, 7}, rng, -30, 30));
  g.forward();
  const Tensor64& p = g.value(y);
  for (std::size_t r = 0; r < 16; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GE(p[r * 7 + c], 0.0);
      EXPECT_LE(p[r * 7 + c], 1.0);
      total += p[r * 7 + c];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(GraphForward, ShapeMismatchNamesTheNode) {
  Graph<float> g;
  auto x = g.input("x", {1, 3, 8, 8});
  auto w = g.parameter("w", Tensor({4, 2, 3, 3}));
  auto b = g.parameter("b", Tensor({4}));
  try {
    g.conv2d(x, w, b);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "shape");
    EXPECT_NE(std::string(e.what()).find("conv2d"), std::string::npos);
  }
}

TEST(GraphForward, BindingWithWrongShapeIsRejected) {
  Graph<float> g;
  auto x = g.input("x", {2, 2});
  EXPECT_THROW(g.set_input(x, Tensor({4})), Error);
}

TEST(GraphForward, NonFiniteIntermediateReportsNodeId) {
  Graph<float> g;
  auto x = g.input("x", {2});
  auto y = g.affine(x, 1e30, 0.0);
  auto z = g.mul(y, y);
  g.set_input(x, Tensor({2}, {1.0f, 2.0f}));
  try {
    g.forward();
    FAIL() << "expected a non-finite error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("node " + std::to_string(z)), std::string::npos)
        << e.what();
  }
}

TEST(GraphForward, UnboundInputIsAnError) {
  Graph<float> g;
  auto x = g.input("x", {2});
  g.relu(x);
  EXPECT_THROW(g.forward(), Error);
}

TEST(GraphBackward, SumGivesAllOnes) {
  Graph<float> g;
  auto x = g.input("x", {3, 4}, true);
  auto loss = g.sum(x);
  g.set_input(x, Tensor({3, 4}, 0.25f));
  g.forward();
  g.backward(loss);
  for (float v : g.gradient(x).data()) EXPECT_EQ(v, 1.0f);
}

TEST(GraphBackward, BeforeForwardIsAnError) {
  Graph<float> g;
  auto x = g.input("x", {3}, true);
  auto loss = g.sum(x);
  g.set_input(x, Tensor({3}, 1.0f));
  EXPECT_THROW(g.backward(loss), Error);
}

TEST(GraphBackward, NonScalarLossIsAnError) {
  Graph<float> g;
  auto x = g.input("x", {3}, true);
  auto y = g.relu(x);
  g.set_input(x, Tensor({3}, 1.0f));
  g.forward();
  EXPECT_THROW(g.backward(y), Error);
}

TEST(GraphBackward, SmoothedNormAtIdenticalRowsHasZeroGradient) {
  // d/dd sqrt(sum d^2 + eps) = d / sqrt(sum d^2 + eps), which is exactly 0 at d = 0.
  Graph<double> g;
  auto p = g.input("p", {1, 4}, true);
  auto q = g.input("q", {1, 4}, true);
  auto loss = g.sum(g.l2norm_last_axis(g.sub(p, q)));
  Tensor64 v({1, 4}, {0.1, 0.2, 0.3, 0.4});
  g.set_input(p, v);
  g.set_input(q, v);
  g.forward();
  EXPECT_NEAR(g.value(loss).item(), std::sqrt(kNormEpsilon), 1e-15);
  g.backward(loss);
  for (double d : g.gradient(p).data()) {
    EXPECT_TRUE(std::isfinite(d));
    EXPECT_LE(std::abs(d), 4 * std::sqrt(kNormEpsilon));
  }
}

TEST(GraphBackward, FrozenParametersGetNoGradientBuffer) {
  Graph<float> g;
  auto x = g.input("x", {1, 2}, true);
  auto w = g.parameter("w", Tensor({2, 2}, 1.0f), false);
  auto b = g.parameter("b", Tensor({2}, 0.0f), false);
  auto loss = g.sum(g.dense(x, w, b));
  g.set_input(x, Tensor({1, 2}, 1.0f));
  g.forward();
  g.backward(loss);
  EXPECT_THROW(g.gradient(w), Error);
  EXPECT_EQ(g.gradient(x), Tensor({1, 2}, 2.0f));
  EXPECT_EQ(g.gradients().size(), 1u);
}

TEST(GraphBackward, TwoUsesOfOneTensorAccumulate) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    ad::Graph<double> g;
    auto x = testing::bound_input(g, "x", testing::random_tensor({6}, rng));
    auto t = g.tanh(x);
    auto loss = g.sum(g.add(g.mul(x, t), g.mul(t, t)));
    EXPECT_LT(gradcheck(g, loss), 1e-6);
  }
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto cases = all_op_cases();
  const auto& c = cases.at(GetParam());
  std::mt19937_64 rng(1000 + GetParam());
  for (int point = 0; point < 10; ++point) {
    ad::Graph<double> g;
    auto loss = c.build(g, rng);
    const double err = gradcheck(g, loss);
    EXPECT_LT(err, 1e-6) << c.op << " at point " << point;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Range<std::size_t>(0, all_op_cases().size()),
                         [](const auto& info) { return all_op_cases()[info.param].op; });

TEST(GraphDebug, JsonDumpListsNodes) {
  Graph<float> g;
  auto x = g.input("x", {1, 3});
  g.softmax(x);
  auto j = g.to_json();
  ASSERT_EQ(j["nodes"].size(), 2u);
  EXPECT_EQ(j["nodes"][1]["op"], "softmax");
  EXPECT_EQ(j["nodes"][1]["inputs"][0], 0);
}

TEST(GraphDeterminism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(9);
  Graph<float> g;
  auto x = g.input("x", {4, 2, 6, 6});
  auto w = g.parameter("w", testing::random_tensor({3, 2, 3, 3}, rng).cast<float>());
  auto b = g.parameter("b", Tensor({3}, 0.1f));
  auto y = g.softmax(g.flatten(g.maxpool2x2(g.relu(g.conv2d(x, w, b)))));
  Tensor in = testing::random_tensor({4, 2, 6, 6}, rng).cast<float>();
  g.set_input(x, in);
  g.forward();
  Tensor first = g.value(y);
  g.set_input(x, in);
  g.forward();
  EXPECT_EQ(first, g.value(y));
}

}  // namespace
}  // namespace sts::ad
