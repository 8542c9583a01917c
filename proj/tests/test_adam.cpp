#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sts/adam.hpp"

namespace sts::ad {
namespace {

void step(Tensor& p, const Tensor& g, AdamState<float>& s) {
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  adam_step<float>(ps, gs, s);
}

TEST(Adam, FirstStepMovesBySignTimesLearningRate) {
  AdamState<float> s;
  s.config.lr = 0.1;
  Tensor p({4}, {1.0f, 1.0f, 1.0f, 1.0f});
  Tensor g({4}, {3.0f, -0.5f, 1e-3f, -200.0f});
  step(p, g, s);
  // m_hat = g and v_hat = g^2 after bias correction, so the update is
  // -lr * g / (|g| + eps).
  for (std::size_t i = 0; i < 4; ++i) {
    const double expected = 1.0 - 0.1 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p[i], expected, 1e-6);
  }
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  AdamState<float> s;
  Tensor p({3}, {0.5f, -2.0f, 7.0f});
  const Tensor before = p;
  step(p, Tensor({3}, 0.0f), s);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1);
  step(p, Tensor({3}, 0.0f), s);
  EXPECT_EQ(s.step, 2);
}

TEST(Adam, TwoStepClosedForm) {
  // Constant gradient g over two steps (b1=0.9, b2=0.999):
  //   m2 = 0.19 g, corr1 = 1 - 0.81 = 0.19          -> m_hat = g
  //   v2 = 0.001999 g^2, corr2 = 1 - 0.998001       -> v_hat = g^2
  // Bias correction cancels exactly, so both updates equal -lr g/(|g|+eps).
  AdamState<double> s;
  s.config.lr = 0.1;
  Tensor64 p({1}, {0.0});
  const Tensor64 g({1}, {0.5});
  Tensor64* ps[] = {&p};
  const Tensor64* gs[] = {&g};
  adam_step<double>(ps, gs, s);
  const double first = p[0];
  adam_step<double>(ps, gs, s);
  const double second = p[0] - first;
  EXPECT_NEAR(first, -0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(second, first, 1e-12);

  // A sign flip exposes the accumulated first moment:
  //   m2 = 0.9 * 0.05 - 0.05 = -0.005 -> m_hat = -0.005 / 0.19
  //   v2 = 0.001999 * 0.25            -> v_hat = 0.25
  AdamState<double> s2;
  s2.config.lr = 0.1;
  Tensor64 q({1}, {0.0});
  const Tensor64 g1({1}, {0.5});
  const Tensor64 g2({1}, {-0.5});
  Tensor64* qs[] = {&q};
  const Tensor64* g1s[] = {&g1};
  const Tensor64* g2s[] = {&g2};
  adam_step<double>(qs, g1s, s2);
  const double before = q[0];
  adam_step<double>(qs, g2s, s2);
  const double update = q[0] - before;
  const double m_hat = -0.005 / 0.19;
  EXPECT_NEAR(update, -0.1 * m_hat / (0.5 + 1e-8), 1e-12);
  EXPECT_GT(std::abs(std::abs(update) - std::abs(first)), 0.09);
}

TEST(Adam, ShapeMismatchThrows) {
  AdamState<float> s;
  Tensor p({3});
  Tensor g({4});
  EXPECT_THROW(step(p, g, s), Error);
}

TEST(Adam, StepCounterStrictlyIncreases) {
  AdamState<float> s;
  Tensor p({2}, 1.0f);
  for (int i = 1; i <= 5; ++i) {
    step(p, Tensor({2}, 0.3f), s);
    EXPECT_EQ(s.step, i);
  }
  ASSERT_EQ(s.m.size(), 1u);
  EXPECT_EQ(s.m[0].shape(), p.shape());
  EXPECT_EQ(s.v[0].shape(), p.shape());
}

}  // namespace
}  // namespace sts::ad
