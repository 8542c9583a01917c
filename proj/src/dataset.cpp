#include "sts/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sts {

void LabeledImageSet::push_back(std::span<const float> img, int label) {
  if (img.size() != image_size()) {
    throw Error("shape", "image has " + std::to_string(img.size()) + " values, expected " +
                             std::to_string(image_size()));
  }
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(label);
}

Tensor LabeledImageSet::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw Error("shape", "empty batch");
  Tensor out({indices.size(), kChannels, height, width});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) throw Error("range", "image index out of range");
    auto src = image(indices[b]);
    std::copy(src.begin(), src.end(), out.raw() + b * image_size());
  }
  return out;
}

Tensor LabeledImageSet::all_images() const {
  if (empty()) throw Error("empty", "image set is empty");
  return Tensor({size(), kChannels, height, width}, pixels);
}

LabeledImageSet LabeledImageSet::subset(std::span<const std::size_t> indices) const {
  LabeledImageSet out = make_empty_set(height, width, num_classes);
  out.pixels.reserve(indices.size() * image_size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw Error("range", "image index out of range");
    out.push_back(image(i), labels[i]);
  }
  return out;
}

void LabeledImageSet::validate() const {
  if (height == 0 || width == 0) throw Error("shape", "image set has zero-sized images");
  if (pixels.size() != labels.size() * image_size()) {
    throw Error("shape", "pixel buffer does not match label count");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw Error("label", "label " + std::to_string(labels[i]) + " of image " +
                               std::to_string(i) + " outside [0," + std::to_string(num_classes) +
                               ")");
    }
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("range", "pixel value outside [0,1]");
  }
}

std::string LabeledImageSet::content_hash() const { return io::sha256_hex(encode_sts_raw(*this)); }

LabeledImageSet make_empty_set(std::size_t height, std::size_t width, std::size_t num_classes) {
  LabeledImageSet s;
  s.height = height;
  s.width = width;
  s.num_classes = num_classes;
  return s;
}

std::pair<LabeledImageSet, LabeledImageSet> split_set(const LabeledImageSet& set, double ratio,
                                                      std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error("config", "split ratio must lie in (0,1)");
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto first = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(set.size())));
  std::span<const std::size_t> all(order);
  return {set.subset(all.first(first)), set.subset(all.subspan(first))};
}

// ---------------------------------------------------------------------------
// CIFAR-10

LabeledImageSet decode_cifar10_binary(std::span<const std::uint8_t> bytes, std::size_t num_classes) {
  constexpr std::size_t kSide = 32, kPlane = kSide * kSide, kRecord = 1 + 3 * kPlane;
  if (bytes.empty()) throw Error("truncated", "cifar10-binary: empty file");
  if (bytes.size() % kRecord != 0) {
    throw Error("truncated", "cifar10-binary: size " + std::to_string(bytes.size()) +
                                 " is not a multiple of the 3073-byte record");
  }
  LabeledImageSet set = make_empty_set(kSide, kSide, num_classes);
  const std::size_t n = bytes.size() / kRecord;
  set.pixels.resize(n * 3 * kPlane);
  set.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kRecord;
    if (rec[0] >= num_classes) {
      throw Error("label", "cifar10-binary: record " + std::to_string(i) + " has label " +
                               std::to_string(rec[0]) + " >= " + std::to_string(num_classes));
    }
    set.labels[i] = rec[0];
    float* dst = set.pixels.data() + i * 3 * kPlane;
    for (std::size_t k = 0; k < 3 * kPlane; ++k) dst[k] = static_cast<float>(rec[1 + k]) / 255.0f;
  }
  return set;
}

LabeledImageSet load_cifar10_binary(const std::vector<std::filesystem::path>& files,
                                    std::size_t num_classes) {
  if (files.empty()) throw Error("config", "cifar10-binary: no batch files given");
  LabeledImageSet all = make_empty_set(32, 32, num_classes);
  for (const auto& f : files) {
    LabeledImageSet part = decode_cifar10_binary(io::read_file(f), num_classes);
    all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  return all;
}

// ---------------------------------------------------------------------------
// sts-raw

namespace {

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

io::Bytes encode_sts_raw(const LabeledImageSet& set) {
  if (set.height > 0xffff || set.width > 0xffff || set.num_classes > 0xffff ||
      set.size() > 0xffffffffu) {
    throw Error("range", "sts-raw: dimensions exceed format limits");
  }
  io::Bytes out;
  out.reserve(18 + set.size() * (2 + set.image_size()));
  for (char c : {'S', 'T', 'S', 'D'}) out.push_back(static_cast<std::uint8_t>(c));
  io::put_le<std::uint16_t>(out, kStsRawVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.size()));
  io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(set.height));
  io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(set.width));
  io::put_le<std::uint16_t>(out, LabeledImageSet::kChannels);
  io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(set.num_classes));
  const std::size_t plane = set.height * set.width;
  for (std::size_t i = 0; i < set.size(); ++i) {
    io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(set.labels[i]));
    auto img = set.image(i);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < LabeledImageSet::kChannels; ++c)
        out.push_back(quantize(img[c * plane + p]));
  }
  return out;
}

LabeledImageSet decode_sts_raw(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "sts-raw");
  auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), "STSD")) throw Error("magic", "sts-raw: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kStsRawVersion) {
    throw Error("format", "sts-raw: unsupported version " + std::to_string(version));
  }
  const auto n = r.get<std::uint32_t>();
  const auto h = r.get<std::uint16_t>();
  const auto w = r.get<std::uint16_t>();
  const auto channels = r.get<std::uint16_t>();
  const auto classes = r.get<std::uint16_t>();
  if (channels != LabeledImageSet::kChannels) {
    throw Error("format", "sts-raw: expected 3 channels, got " + std::to_string(channels));
  }
  if (h == 0 || w == 0) throw Error("format", "sts-raw: zero image size");
  LabeledImageSet set = make_empty_set(h, w, classes);
  const std::size_t plane = set.height * set.width;
  set.pixels.resize(static_cast<std::size_t>(n) * set.image_size());
  set.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = r.get<std::uint16_t>();
    if (label >= classes) {
      throw Error("label", "sts-raw: image " + std::to_string(i) + " has label " +
                               std::to_string(label) + " >= " + std::to_string(classes));
    }
    set.labels[i] = label;
    auto px = r.take(plane * 3);
    auto img = set.image(i);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = px[p * 3 + c] / 255.0f;
  }
  if (r.remaining() != 0) throw Error("format", "sts-raw: trailing bytes after last record");
  return set;
}

void save_sts_raw(const LabeledImageSet& set, const std::filesystem::path& path) {
  io::write_file(path, encode_sts_raw(set));
}

LabeledImageSet load_sts_raw(const std::filesystem::path& path) {
  return decode_sts_raw(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

struct Rgb {
  float r, g, b;
};

Rgb hsv(float h, float s, float v) {
  h = h - std::floor(h);
  const float k = h * 6.0f;
  const int sector = static_cast<int>(k) % 6;
  const float f = k - std::floor(k);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

constexpr int kShapeFamilies = 10;
constexpr int kSubsamples = 4;  // per axis, for anti-aliased shape edges

bool inside_shape(int family, float dx, float dy, float r) {
  const float ax = std::abs(dx), ay = std::abs(dy);
  const float dist = std::sqrt(dx * dx + dy * dy);
  switch (family) {
    case 0: return dist <= r;                                              // disk
    case 1: return ax <= 0.8f * r && ay <= 0.8f * r;                       // square
    case 2: return dy >= -0.8f * r && dy <= 0.8f * r && ax <= (dy + 0.8f * r) * 0.6f;  // triangle
    case 3: return (ax <= r / 3 && ay <= r) || (ay <= r / 3 && ax <= r);   // plus
    case 4: return dist <= r && dist >= 0.55f * r;                         // ring
    case 5: return ax + ay <= r;                                           // diamond
    case 6: return std::abs(ax - ay) <= r / 3 && std::max(ax, ay) <= r;   // cross
    case 7:                                                                // horizontal bars
      return ax <= r && ay <= r && static_cast<int>(std::floor((dy + r) / (r / 2.5f))) % 2 == 0;
    case 8:                                                                // vertical bars
      return ax <= r && ay <= r && static_cast<int>(std::floor((dx + r) / (r / 2.5f))) % 2 == 0;
    default: {                                                             // checker
      if (ax > r || ay > r) return false;
      const int cx = static_cast<int>(std::floor((dx + r) / (r / 1.5f)));
      const int cy = static_cast<int>(std::floor((dy + r) / (r / 1.5f)));
      return (cx + cy) % 2 == 0;
    }
  }
}

}  // namespace

LabeledImageSet make_synthetic(const SyntheticConfig& config) {
  if (config.num_classes < 2) throw Error("config", "synthetic data needs at least 2 classes");
  if (config.height < 16 || config.width < 16) {
    throw Error("config", "synthetic images must be at least 16x16");
  }
  LabeledImageSet set = make_empty_set(config.height, config.width, config.num_classes);
  const std::size_t H = config.height, W = config.width, plane = H * W;
  std::vector<float> img(set.image_size());

  std::vector<int> labels(config.num_images);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % config.num_classes);
  std::mt19937_64 order_rng(config.seed);
  std::shuffle(labels.begin(), labels.end(), order_rng);

  const float side = static_cast<float>(std::min(H, W));
  for (std::size_t i = 0; i < config.num_images; ++i) {
    std::seed_seq seq{config.seed, static_cast<std::uint64_t>(i), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::normal_distribution<float> noise(0.0f, 0.03f);
    const int label = labels[i];
    const int family = label % kShapeFamilies;
    const float hue = static_cast<float>(label) / static_cast<float>(config.num_classes);

    // Low-saturation background gradient.
    const Rgb b0 = hsv(u(rng), 0.25f * u(rng), 0.25f + 0.5f * u(rng));
    const Rgb b1 = hsv(u(rng), 0.25f * u(rng), 0.25f + 0.5f * u(rng));
    const float angle = 6.2831853f * u(rng);
    const float gx = std::cos(angle), gy = std::sin(angle);

    const float r = side * (0.22f + 0.14f * u(rng));
    const float cx = r + (static_cast<float>(W) - 2 * r) * u(rng);
    const float cy = r + (static_cast<float>(H) - 2 * r) * u(rng);
    const Rgb fg = hsv(hue + 0.04f * (u(rng) - 0.5f), 0.75f + 0.25f * u(rng), 0.7f + 0.3f * u(rng));

    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const float t = 0.5f + 0.5f * ((static_cast<float>(x) / W - 0.5f) * gx +
                                       (static_cast<float>(y) / H - 0.5f) * gy);
        const Rgb bg{b0.r + (b1.r - b0.r) * t, b0.g + (b1.g - b0.g) * t, b0.b + (b1.b - b0.b) * t};
        int hits = 0;
        for (int sy = 0; sy < kSubsamples; ++sy)
          for (int sx = 0; sx < kSubsamples; ++sx) {
            hits += inside_shape(family, static_cast<float>(x) + (sx + 0.5f) / kSubsamples - cx,
                                 static_cast<float>(y) + (sy + 0.5f) / kSubsamples - cy, r);
          }
        const float cover = static_cast<float>(hits) / (kSubsamples * kSubsamples);
        const float vals[3] = {bg.r + (fg.r - bg.r) * cover, bg.g + (fg.g - bg.g) * cover,
                               bg.b + (fg.b - bg.b) * cover};
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const float v = std::clamp(vals[ch] + noise(rng), 0.0f, 1.0f);
          img[ch * plane + y * W + x] = std::round(v * 255.0f) / 255.0f;
        }
      }
    set.push_back(img, label);
  }
  return set;
}

}  // namespace sts
