#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <random>
#include <set>

#include "sts/dataset.hpp"

namespace {

using namespace sts;

io::Bytes cifar_records(std::size_t n, std::uint64_t seed) {
  io::Bytes out;
  out.reserve(n * 3073);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(static_cast<std::uint8_t>(i % 10));
    for (std::size_t k = 0; k < 3072; ++k) out.push_back(static_cast<std::uint8_t>(rng() & 0xff));
  }
  return out;
}

std::string error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return "";
}

TEST(Cifar, RecordLayoutIsPlanarRgb) {
  io::Bytes rec(3073, 0);
  rec[0] = 7;
  rec[1 + 0 * 1024 + 5 * 32 + 9] = 255;  // red plane, row 5, column 9
  rec[1 + 1 * 1024 + 0 * 32 + 31] = 51;  // green plane, row 0, column 31
  rec[1 + 2 * 1024 + 31 * 32 + 0] = 102;  // blue plane, row 31, column 0
  const auto set = decode_cifar10_binary(rec);
  ASSERT_EQ(set.size(), 1u);
  EXPECT_EQ(set.labels[0], 7);
  const auto img = set.image(0);
  EXPECT_EQ(img[0 * 1024 + 5 * 32 + 9], 1.0f);
  EXPECT_EQ(img[1 * 1024 + 0 * 32 + 31], 51.0f / 255.0f);
  EXPECT_EQ(img[2 * 1024 + 31 * 32 + 0], 102.0f / 255.0f);
  EXPECT_EQ(img[0], 0.0f);
}

TEST(Cifar, FullBatchParsesTenThousandRecords) {
  const auto bytes = cifar_records(10000, 3);
  const auto set = decode_cifar10_binary(bytes);
  EXPECT_EQ(set.size(), 10000u);
  EXPECT_EQ(set.height, 32u);
  EXPECT_EQ(set.width, 32u);
  EXPECT_EQ(set.num_classes, 10u);
  EXPECT_EQ(set.labels[1234], 4);
  EXPECT_EQ(set.image(9999)[17], bytes[9999 * 3073 + 1 + 17] / 255.0f);
  set.validate();
}

TEST(Cifar, LabelOutOfRangeIsAnError) {
  auto bytes = cifar_records(3, 1);
  bytes[3073] = 10;
  EXPECT_EQ(error_kind([&] { decode_cifar10_binary(bytes); }), "label");
}

TEST(Cifar, TruncatedFileIsAnError) {
  auto bytes = cifar_records(2, 1);
  bytes.pop_back();
  EXPECT_EQ(error_kind([&] { decode_cifar10_binary(bytes); }), "truncated");
}

TEST(StsRaw, RoundTripIsBitIdentical) {
  SyntheticConfig cfg;
  cfg.num_images = 40;
  const auto set = make_synthetic(cfg);
  const auto path = std::filesystem::temp_directory_path() / "sts_test_roundtrip.stsd";
  save_sts_raw(set, path);
  const auto back = load_sts_raw(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.labels, set.labels);
  EXPECT_EQ(back.pixels, set.pixels);
  EXPECT_EQ(back.num_classes, set.num_classes);
  EXPECT_EQ(back.content_hash(), set.content_hash());
}

TEST(StsRaw, HeaderLayout) {
  auto set = make_empty_set(2, 3, 5);
  std::vector<float> img(set.image_size(), 0.0f);
  img[0] = 1.0f;  // red at (0,0)
  set.push_back(img, 4);
  const auto bytes = encode_sts_raw(set);
  ASSERT_EQ(bytes.size(), 4 + 2 + 4 + 2 + 2 + 2 + 2 + 2 + 2 * 3 * 3u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "STSD");
  EXPECT_EQ(bytes[4], 1);  // version
  EXPECT_EQ(bytes[6], 1);  // N
  EXPECT_EQ(bytes[10], 2);  // H
  EXPECT_EQ(bytes[12], 3);  // W
  EXPECT_EQ(bytes[14], 3);  // channels
  EXPECT_EQ(bytes[16], 5);  // classes
  EXPECT_EQ(bytes[18], 4);  // label
  EXPECT_EQ(bytes[20], 255);  // first pixel, red
  EXPECT_EQ(bytes[21], 0);
}

TEST(StsRaw, DecodeErrors) {
  auto set = make_empty_set(2, 2, 10);
  set.push_back(std::vector<float>(set.image_size(), 0.5f), 3);
  const auto good = encode_sts_raw(set);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(error_kind([&] { decode_sts_raw(bad_magic); }), "magic");

  auto bad_label = good;
  bad_label[18] = 10;
  EXPECT_EQ(error_kind([&] { decode_sts_raw(bad_label); }), "label");

  auto truncated = good;
  truncated.resize(truncated.size() - 1);
  EXPECT_EQ(error_kind([&] { decode_sts_raw(truncated); }), "truncated");

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(error_kind([&] { decode_sts_raw(trailing); }), "format");
}

TEST(Synthetic, DeterministicBalancedAndInRange) {
  SyntheticConfig cfg;
  cfg.num_images = 200;
  cfg.num_classes = 10;
  cfg.seed = 9;
  const auto a = make_synthetic(cfg);
  const auto b = make_synthetic(cfg);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  std::vector<int> counts(10, 0);
  for (int l : a.labels) ++counts[l];
  for (int c : counts) EXPECT_EQ(c, 20);
  a.validate();
  cfg.seed = 10;
  EXPECT_NE(make_synthetic(cfg).pixels, a.pixels);
}

TEST(Synthetic, ManyClasses) {
  SyntheticConfig cfg;
  cfg.num_images = 80;
  cfg.num_classes = 40;
  const auto set = make_synthetic(cfg);
  EXPECT_EQ(std::set<int>(set.labels.begin(), set.labels.end()).size(), 40u);
}

TEST(Split, DisjointAndSized) {
  SyntheticConfig cfg;
  cfg.num_images = 100;
  const auto set = make_synthetic(cfg);
  const auto [a, b] = split_set(set, 0.7, 4);
  EXPECT_EQ(a.size(), 70u);
  EXPECT_EQ(b.size(), 30u);
  std::set<std::vector<float>> seen;
  for (std::size_t i = 0; i < a.size(); ++i) seen.emplace(a.image(i).begin(), a.image(i).end());
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(seen.count(std::vector<float>(b.image(i).begin(), b.image(i).end())), 0u);
  }
  EXPECT_EQ(error_kind([&] { split_set(set, 1.0, 0); }), "config");
}

TEST(Batch, GathersPlanarImages) {
  SyntheticConfig cfg;
  cfg.num_images = 5;
  const auto set = make_synthetic(cfg);
  const std::size_t idx[] = {3, 1};
  const Tensor t = set.batch(idx);
  EXPECT_EQ(t.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(t[0], set.image(3)[0]);
  EXPECT_EQ(t[set.image_size() + 100], set.image(1)[100]);
}

}  // namespace
