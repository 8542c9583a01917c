#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "sts/io.hpp"
#include "sts/tensor.hpp"

namespace sts {

/// Images with integer labels. Pixels are floats in [0,1] stored planar per
/// image (channel, row, column), which is the layout the classifier consumes.
struct LabeledImageSet {
  static constexpr std::size_t kChannels = 3;

  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t image_size() const noexcept { return kChannels * height * width; }

  std::span<float> image(std::size_t i) {
    return std::span(pixels).subspan(i * image_size(), image_size());
  }
  std::span<const float> image(std::size_t i) const {
    return std::span(pixels).subspan(i * image_size(), image_size());
  }

  /// Appends one image (planar, image_size() floats) with its label.
  void push_back(std::span<const float> image, int label);

  /// Images at `indices` as an [B,3,H,W] tensor.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all_images() const;
  LabeledImageSet subset(std::span<const std::size_t> indices) const;

  /// Throws on label/pixel range violations or inconsistent sizes.
  void validate() const;

  /// SHA-256 of the sts-raw encoding.
  std::string content_hash() const;
};

LabeledImageSet make_empty_set(std::size_t height, std::size_t width, std::size_t num_classes);

/// Random split into (first, second) with round(ratio * N) images in the first.
std::pair<LabeledImageSet, LabeledImageSet> split_set(const LabeledImageSet& set, double ratio,
                                                      std::uint64_t seed);

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (1024 red, 1024 green, 1024 blue, row-major 32x32).
LabeledImageSet decode_cifar10_binary(std::span<const std::uint8_t> bytes,
                                      std::size_t num_classes = 10);
LabeledImageSet load_cifar10_binary(const std::vector<std::filesystem::path>& files,
                                    std::size_t num_classes = 10);

// sts-raw: "STSD", u16 version, u32 N, u16 H, u16 W, u16 channels (=3),
// u16 class count, then N x (u16 label + H*W*3 u8 pixels, interleaved RGB),
// little-endian.
inline constexpr std::uint16_t kStsRawVersion = 1;
io::Bytes encode_sts_raw(const LabeledImageSet& set);
LabeledImageSet decode_sts_raw(std::span<const std::uint8_t> bytes);
void save_sts_raw(const LabeledImageSet& set, const std::filesystem::path& path);
LabeledImageSet load_sts_raw(const std::filesystem::path& path);

/// Seeded colored-shape classes. Each class pairs a shape family with a hue;
/// instances vary in position, size, tint, background gradient and noise.
/// Pixels are quantized to multiples of 1/255 so sts-raw round trips exactly.
struct SyntheticConfig {
  std::size_t num_images = 5000;
  std::size_t num_classes = 10;
  std::size_t height = 32;
  std::size_t width = 32;
  std::uint64_t seed = 1;
};

LabeledImageSet make_synthetic(const SyntheticConfig& config);

}  // namespace sts
