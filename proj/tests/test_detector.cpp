#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "sts/detector.hpp"

namespace sts {
namespace {

std::string error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return "";
}

// All histograms of n items over c classes.
void for_each_histogram(std::size_t n, std::size_t c, const std::function<void(const std::vector<std::size_t>&)>& fn) {
  std::vector<std::size_t> h(c, 0);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t left) {
    if (i + 1 == c) {
      h[i] = left;
      fn(h);
      return;
    }
    for (std::size_t k = 0; k <= left; ++k) {
      h[i] = k;
      rec(i + 1, left - k);
    }
  };
  rec(0, n);
}

TEST(Threshold, KnownValues) {
  EXPECT_NEAR(lemma1_threshold(10, 0.01), 0.1125, 1e-4);
  EXPECT_NEAR(lemma1_threshold(43, 0.01), 0.1347, 1e-4);
  EXPECT_EQ(lemma1_threshold(10, 0.0), 0.0);
}

TEST(Threshold, InvalidArgumentsAreErrors) {
  EXPECT_EQ(error_kind([] { lemma1_threshold(1, 0.01); }), "config");
  EXPECT_EQ(error_kind([] { lemma1_threshold(10, 1.0); }), "config");
  EXPECT_EQ(error_kind([] { lemma1_threshold(10, -0.1); }), "config");
}

TEST(Threshold, WorstCaseHistogramSitsOnTheBound) {
  for (std::size_t c : {2u, 10u, 43u}) {
    // 1 - delta on one class, delta spread evenly over the rest.
    std::vector<std::size_t> h(c, 1);
    h[0] = 99 * (c - 1);
    EXPECT_NEAR(histogram_entropy(h), lemma1_threshold(c, 0.01), 1e-9) << c;
  }
}

TEST(Threshold, BruteForceDominance) {
  const std::size_t n = 12, c = 4;
  const double delta = 0.25;
  const double bound = lemma1_threshold(c, delta);
  std::size_t checked = 0;
  for_each_histogram(n, c, [&](const std::vector<std::size_t>& h) {
    const auto top = *std::max_element(h.begin(), h.end());
    if (static_cast<double>(top) < (1.0 - delta) * n) return;
    EXPECT_LE(histogram_entropy(h), bound + 1e-12);
    ++checked;
  });
  EXPECT_GT(checked, 0u);
}

TEST(Threshold, MonotoneInDeltaAndClasses) {
  for (std::size_t c : {2u, 10u, 43u}) {
    double prev = 0.0;
    const double cap = static_cast<double>(c - 1) / static_cast<double>(c);
    for (double d = 0.001; d < cap; d += cap / 50) {
      const double t = lemma1_threshold(c, d);
      EXPECT_GT(t, prev);
      EXPECT_LE(t, std::log2(static_cast<double>(c)) + 1e-12);
      prev = t;
    }
  }
  EXPECT_LT(lemma1_threshold(10, 0.01), lemma1_threshold(43, 0.01));
}

TEST(Entropy, CountingOracle) {
  const std::vector<int> pred = {0, 2, 2, 1, 2, 0, 4};
  const auto h = class_histogram(pred, 5);
  EXPECT_EQ(h, (std::vector<std::size_t>{2, 1, 3, 0, 1}));
  double expect = 0.0;
  for (double k : {2.0, 1.0, 3.0, 1.0}) expect -= k / 7 * std::log2(k / 7);
  EXPECT_NEAR(histogram_entropy(h), expect, 1e-12);
  EXPECT_EQ(error_kind([] { class_histogram(std::vector<int>{5}, 5); }), "label");
  EXPECT_EQ(error_kind([] { histogram_entropy(std::vector<std::size_t>(3, 0)); }), "empty");
}

TEST(Entropy, EdgeHistograms) {
  EXPECT_EQ(histogram_entropy(std::vector<std::size_t>{0, 9, 0}), 0.0);
  EXPECT_NEAR(histogram_entropy(std::vector<std::size_t>(10, 7)), std::log2(10.0), 1e-12);
}

TEST(Verdict, BoundaryIsTrojan) {
  const double t = lemma1_threshold(10, 0.01);
  EXPECT_EQ(classify_model(t, t), Verdict::Trojan);
  EXPECT_EQ(classify_model(std::nextafter(t, 1.0), t), Verdict::Pure);
  EXPECT_EQ(classify_model(0.0, t), Verdict::Trojan);
}

TEST(Verdict, FromPredictions) {
  std::vector<int> pred(500, 3);
  auto r = entropy_from_predictions(pred, 10);
  EXPECT_EQ(r.entropy, 0.0);
  EXPECT_EQ(r.verdict, Verdict::Trojan);
  EXPECT_EQ(r.modal_fraction(), 1.0);
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = static_cast<int>(i % 10);
  r = entropy_from_predictions(pred, 10);
  EXPECT_EQ(r.verdict, Verdict::Pure);
  EXPECT_NEAR(r.probabilities[4], 0.1, 1e-12);
  EXPECT_EQ(error_kind([] { entropy_from_predictions({}, 10); }), "empty");
}

TEST(F1, Examples) {
  using V = Verdict;
  const std::vector<V> perfect = {V::Trojan, V::Trojan, V::Pure, V::Pure};
  const bool gt[] = {true, true, false, false};
  EXPECT_EQ(f1_score(perfect, gt), 1.0);
  const std::vector<V> inverted = {V::Pure, V::Pure, V::Trojan, V::Trojan};
  EXPECT_EQ(f1_score(inverted, gt), 0.0);

  // 5 true positives, 1 false positive: precision 5/6, recall 1.
  std::vector<V> v(10, V::Pure);
  bool truth[10] = {};
  for (int i = 0; i < 5; ++i) {
    v[i] = V::Trojan;
    truth[i] = true;
  }
  v[5] = V::Trojan;
  EXPECT_NEAR(f1_score(v, truth), 10.0 / 11.0, 1e-12);
  const auto c = confusion(v, truth);
  EXPECT_EQ(c.true_positive, 5u);
  EXPECT_EQ(c.false_positive, 1u);
  EXPECT_EQ(c.true_negative, 4u);
  EXPECT_EQ(c.false_negative, 0u);
}

TEST(Summary, CsvAndJson) {
  std::vector<ModelDetection> models;
  models.push_back({"m-a", entropy_from_predictions(std::vector<int>(50, 1), 10), true});
  std::vector<int> spread(50);
  for (std::size_t i = 0; i < spread.size(); ++i) spread[i] = static_cast<int>(i % 10);
  models.push_back({"m-b", entropy_from_predictions(spread, 10), false});
  const auto s = summarize(models);
  EXPECT_EQ(s.f1, 1.0);
  const auto csv = to_csv(s);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model_id,entropy,threshold,verdict,ground_truth");
  EXPECT_NE(csv.find("m-a,0,"), std::string::npos);
  const auto j = to_json(s);
  EXPECT_EQ(j.at("models").size(), 2u);
  EXPECT_EQ(j.at("models")[1].at("verdict"), "pure");
}

}  // namespace
}  // namespace sts
