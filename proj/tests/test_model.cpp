#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "sts/model.hpp"

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

ArchitectureConfig small_arch(std::size_t classes) {
  ArchitectureConfig a;
  a.conv = {{4, 3, 1, 1}, {8, 3, 1, 4}};
  a.hidden = {16};
  a.num_classes = classes;
  return a;
}

// Dark images are class 0, bright images class 1.
LabeledImageSet toy_set(std::size_t n, std::uint64_t seed) {
  auto set = make_empty_set(32, 32, 2);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 0.4f);
  std::vector<float> img(set.image_size());
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    for (float& v : img) v = u(rng) + 0.6f * static_cast<float>(label);
    set.push_back(img, label);
  }
  return set;
}

double mean_cross_entropy(const ModelCheckpoint& m, const LabeledImageSet& set) {
  const Tensor p = predict(m, set.all_images());
  double total = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    total -= std::log(std::max(1e-12, static_cast<double>(p[i * m.arch.num_classes + set.labels[i]])));
  }
  return total / static_cast<double>(set.size());
}

TEST(Architecture, ParameterCountMatchesLayerFormula) {
  auto count = [](std::size_t classes) {
    std::size_t n = 3 * 3 * 3 * 32 + 32;  // conv0
    n += 3 * 3 * 32 * 64 + 64;            // conv1
    n += 64 * 256 + 256;                  // dense0 on globally pooled features
    n += 256 * classes + classes;
    return n;
  };
  ArchitectureConfig a;
  EXPECT_EQ(a.flattened_size(), 64u);
  EXPECT_EQ(build_model(a, 1).parameter_count(), count(10));
  EXPECT_EQ(count(10), 38602u);
  a.num_classes = 43;
  EXPECT_EQ(build_model(a, 1).parameter_count(), count(43));
}

TEST(Architecture, FlattenedSizeFollowsPadding) {
  ArchitectureConfig a;
  a.conv = {{32, 3, 1, 1}, {64, 3, 1, 1}};
  EXPECT_EQ(a.flattened_size(), 8u * 8u * 64u);
  a.conv = {{32, 3, 0, 1}, {64, 3, 0, 1}};
  EXPECT_EQ(a.flattened_size(), 7u * 7u * 64u);  // 30 -> 15 -> 13 -> 7 (ceil)
}

TEST(Architecture, InvalidConfigsAreErrors) {
  ArchitectureConfig a;
  a.num_classes = 1;
  EXPECT_EQ(error_kind([&] { build_model(a, 0); }), "config");
  a.num_classes = 10;
  a.conv = {{8, 40, 0, 1}};
  EXPECT_EQ(error_kind([&] { build_model(a, 0); }), "config");
}

TEST(Architecture, JsonRoundTrip) {
  const ArchitectureConfig a = small_arch(7);
  const auto b = architecture_from_json(to_json(a));
  EXPECT_EQ(to_json(b), to_json(a));
}

TEST(Build, SameSeedSameParameters) {
  const ArchitectureConfig a;
  const auto m1 = build_model(a, 42), m2 = build_model(a, 42), m3 = build_model(a, 43);
  EXPECT_EQ(m1.params, m2.params);
  EXPECT_NE(m1.params, m3.params);
}

TEST(Predict, RowsAreDistributionsAndBatchIndependent) {
  const auto m = build_model(ArchitectureConfig{}, 3);
  SyntheticConfig sc;
  sc.num_images = 20;
  const auto set = make_synthetic(sc);
  const Tensor all = predict(m, set.all_images());
  ASSERT_EQ(all.shape(), (Shape{20, 10}));
  for (std::size_t r = 0; r < 20; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 10; ++c) total += all[r * 10 + c];
    EXPECT_NEAR(total, 1.0, 1e-5);
  }
  const std::size_t idx[] = {13};
  const Tensor one = predict(m, set.batch(idx));
  for (std::size_t c = 0; c < 10; ++c) EXPECT_NEAR(one[c], all[13 * 10 + c], 1e-6);
}

TEST(Predict, UntrainedModelIsNearChance) {
  SyntheticConfig sc;
  sc.num_images = 1000;
  const auto set = make_synthetic(sc);
  Classifier c(build_model(ArchitectureConfig{}, 8));
  EXPECT_NEAR(c.accuracy(set), 0.1, 0.05);
}

TEST(Predict, ArgmaxTiesGoToLowestIndex) {
  const float row[] = {0.1f, 0.4f, 0.4f, 0.1f};
  EXPECT_EQ(argmax(row), 1);
}

TEST(Train, ZeroEpochsReturnsInitialModel) {
  const auto m = build_model(small_arch(2), 5);
  const auto set = toy_set(40, 1);
  TrainConfig tc;
  tc.epochs = 0;
  const auto r = train(m, set, {}, tc);
  EXPECT_EQ(r.model.params, m.params);
  EXPECT_TRUE(r.trace.empty());
}

TEST(Train, SeparableToySetIsLearned) {
  const auto set = toy_set(200, 2);
  const auto m = build_model(small_arch(2), 6);
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch = 20;
  tc.lr = 5e-3;
  tc.seed = 3;
  const auto r = train(m, set, {}, tc);
  EXPECT_GE(Classifier(r.model).accuracy(set), 0.99);
  EXPECT_LT(mean_cross_entropy(r.model, set), mean_cross_entropy(m, set));
  ASSERT_EQ(r.trace.size(), 20u);
  EXPECT_LT(r.trace.back().train_loss, r.trace.front().train_loss);

  const auto again = train(m, set, {}, tc);
  EXPECT_EQ(again.model.params, r.model.params);
}

TEST(Train, WeightDecayShrinksParameters) {
  const auto set = toy_set(60, 4);
  const auto m = build_model(small_arch(2), 8);
  auto squared_norm = [](const ModelCheckpoint& c) {
    double total = 0.0;
    for (const auto& [name, t] : c.params)
      for (float v : t.data()) total += static_cast<double>(v) * v;
    return total;
  };
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch = 20;
  tc.lr = 5e-3;
  const double plain = squared_norm(train(m, set, {}, tc).model);
  tc.weight_decay = 5.0;
  const double decayed = squared_norm(train(m, set, {}, tc).model);
  EXPECT_LT(decayed, plain);
}

TEST(Train, TiedValidationKeepsTheLaterEpoch) {
  const auto set = toy_set(100, 5);
  TrainConfig tc;
  tc.epochs = 8;
  tc.batch = 20;
  tc.lr = 5e-3;
  const auto r = train(build_model(small_arch(2), 9), set, set, tc);
  double best = 0.0;
  std::size_t expected = 0;
  for (const auto& e : r.trace) {
    if (e.val_accuracy >= best) {
      best = e.val_accuracy;
      expected = e.epoch;
    }
  }
  EXPECT_EQ(r.best_epoch, expected);
}

TEST(Train, ImageShapeMismatchIsAnError) {
  auto a = small_arch(2);
  a.height = a.width = 16;
  const auto set = toy_set(10, 1);
  EXPECT_EQ(error_kind([&] { train(build_model(a, 0), set, {}, TrainConfig{}); }), "shape");
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = build_model(ArchitectureConfig{}, 11);
  m.meta.seed = 11;
  m.meta.epochs = 4;
  m.meta.dataset_hash = "abc";
  m.meta.is_trojan = true;
  const auto path = std::filesystem::temp_directory_path() / "sts_test_model.stsm";
  save_checkpoint(m, path);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(to_json(back.arch), to_json(m.arch));
  EXPECT_EQ(back.meta.seed, 11u);
  EXPECT_EQ(back.meta.epochs, 4u);
  EXPECT_EQ(back.meta.dataset_hash, "abc");
  EXPECT_TRUE(back.meta.is_trojan);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(m));
}

TEST(Checkpoint, CorruptBytesAreErrors) {
  const auto bytes = encode_checkpoint(build_model(small_arch(3), 1));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_FALSE(error_kind([&] { decode_checkpoint(bad); }).empty());
  auto cut = bytes;
  cut.resize(cut.size() - 4);
  EXPECT_FALSE(error_kind([&] { decode_checkpoint(cut); }).empty());
}

}  // namespace
}  // namespace sts
