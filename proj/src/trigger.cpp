#include "sts/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sts {

void TriggerSpec::validate() const {
  if (size == 0) throw Error("trigger", "trigger size must be positive");
  if (patch.shape() != Shape{3, size, size}) {
    throw Error("trigger", "patch shape " + shape_string(patch.shape()) + " does not match size " +
                               std::to_string(size));
  }
  if (alpha.size() != 1 && alpha.shape() != Shape{size, size}) {
    throw Error("trigger", "alpha shape " + shape_string(alpha.shape()) + " must be [1] or [s,s]");
  }
  for (float v : patch.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("trigger", "patch value outside [0,1]");
  for (float v : alpha.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("trigger", "alpha value outside [0,1]");
}

TriggerSpec generate_trigger(std::size_t size, double alpha, std::uint64_t seed,
                             std::size_t image_height, std::size_t image_width) {
  if (size < 1 || size > std::min(image_height, image_width)) {
    throw Error("trigger", "trigger size " + std::to_string(size) + " outside [1, " +
                               std::to_string(std::min(image_height, image_width)) + "]");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("trigger", "alpha outside [0,1]");
  TriggerSpec t;
  t.size = size;
  t.seed = seed;
  t.placement = Placement::anywhere(seed);
  t.patch = Tensor({3, size, size});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : t.patch.data()) v = u(rng);
  t.alpha = Tensor({1}, static_cast<float>(alpha));
  return t;
}

void apply_trigger_inplace(std::span<float> image, std::size_t height, std::size_t width,
                           const TriggerSpec& trigger, std::size_t x, std::size_t y) {
  const std::size_t s = trigger.size;
  if (image.size() != 3 * height * width) throw Error("shape", "image buffer size mismatch");
  if (x + s > width || y + s > height) {
    throw Error("bounds", "patch of size " + std::to_string(s) + " at (" + std::to_string(x) + "," +
                              std::to_string(y) + ") exceeds " + std::to_string(width) + "x" +
                              std::to_string(height) + " image");
  }
  const bool scalar = !trigger.per_pixel_alpha();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t py = 0; py < s; ++py) {
      float* row = image.data() + (c * height + y + py) * width + x;
      for (std::size_t px = 0; px < s; ++px) {
        const float a = scalar ? trigger.alpha[0] : trigger.alpha[py * s + px];
        row[px] = (1.0f - a) * row[px] + a * trigger.patch[(c * s + py) * s + px];
      }
    }
}

Tensor apply_trigger(const Tensor& image, const TriggerSpec& trigger, std::size_t x, std::size_t y) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw Error("shape", "apply_trigger expects a [3,H,W] image, got " + shape_string(image.shape()));
  }
  Tensor out = image;
  apply_trigger_inplace(out.data(), image.dim(1), image.dim(2), trigger, x, y);
  return out;
}

std::pair<std::size_t, std::size_t> random_location(std::size_t height, std::size_t width,
                                                    std::size_t size, std::mt19937_64& rng) {
  if (size > height || size > width) throw Error("bounds", "trigger larger than image");
  std::uniform_int_distribution<std::size_t> ux(0, width - size), uy(0, height - size);
  const std::size_t x = ux(rng);
  return {x, uy(rng)};
}

Tensor apply_to_all(const Tensor& images, const TriggerSpec& trigger) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw Error("shape", "expected [N,3,H,W] images, got " + shape_string(images.shape()));
  }
  trigger.validate();
  Tensor out = images;
  const std::size_t h = images.dim(2), w = images.dim(3), stride = 3 * h * w;
  std::mt19937_64 rng(trigger.placement.seed);
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    auto [x, y] = trigger.placement.kind == Placement::Kind::Fixed
                      ? std::pair{trigger.placement.x, trigger.placement.y}
                      : random_location(h, w, trigger.size, rng);
    apply_trigger_inplace(out.data().subspan(i * stride, stride), h, w, trigger, x, y);
  }
  return out;
}

LabeledImageSet apply_to_all(const LabeledImageSet& set, const TriggerSpec& trigger) {
  LabeledImageSet out = set;
  if (set.empty()) return out;
  const Tensor patched = apply_to_all(set.all_images(), trigger);
  std::copy(patched.raw(), patched.raw() + patched.size(), out.pixels.begin());
  return out;
}

LabeledImageSet poison_dataset(const LabeledImageSet& attack_set, const TriggerSpec& trigger,
                               double rate, int target_class, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw Error("config", "poison rate must lie in (0,1]");
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= attack_set.num_classes) {
    throw Error("label", "target class " + std::to_string(target_class) + " outside [0," +
                             std::to_string(attack_set.num_classes) + ")");
  }
  if (attack_set.empty()) throw Error("empty", "attack set is empty");
  trigger.validate();
  const std::size_t n = attack_set.size();
  const auto count = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  LabeledImageSet out = attack_set;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    auto [x, y] = random_location(out.height, out.width, trigger.size, rng);
    apply_trigger_inplace(out.image(i), out.height, out.width, trigger, x, y);
    out.labels[i] = target_class;
  }
  std::shuffle(order.begin(), order.end(), rng);
  return out.subset(order);
}

Effectiveness effectiveness(const ModelCheckpoint& pure_model, const ModelCheckpoint& trojan_model,
                            const LabeledImageSet& clean_test, const TriggerSpec& trigger,
                            int target_class, std::uint64_t seed) {
  if (pure_model.arch.num_classes != trojan_model.arch.num_classes) {
    throw Error("shape", "pure and Trojan models disagree on class count");
  }
  Effectiveness e;
  e.pmpd = Classifier(pure_model).accuracy(clean_test);
  Classifier trojan(trojan_model);
  e.tmpd = trojan.accuracy(clean_test);
  TriggerSpec anywhere = trigger;
  anywhere.placement = Placement::anywhere(seed);
  const auto pred = trojan.predict_classes(apply_to_all(clean_test, anywhere).all_images());
  const auto hits = std::count(pred.begin(), pred.end(), target_class);
  e.tmtd = static_cast<double>(hits) / static_cast<double>(pred.size());
  return e;
}

bool attack_accepted(const Effectiveness& e, double min_tmtd, double max_drop) {
  return e.tmtd >= min_tmtd && e.pmpd - e.tmpd <= max_drop;
}

nlohmann::json trigger_to_json(const TriggerSpec& t) {
  nlohmann::json placement;
  if (t.placement.kind == Placement::Kind::Fixed) {
    placement = {{"kind", "fixed"}, {"x", t.placement.x}, {"y", t.placement.y}};
  } else {
    placement = {{"kind", "anywhere"}, {"seed", t.placement.seed}};
  }
  return {{"size", t.size},
          {"seed", t.seed},
          {"placement", placement},
          {"patch_shape", t.patch.shape()},
          {"patch", io::floats_to_hex(t.patch.data())},
          {"alpha_shape", t.alpha.shape()},
          {"alpha", io::floats_to_hex(t.alpha.data())}};
}

TriggerSpec trigger_from_json(const nlohmann::json& j) {
  TriggerSpec t;
  try {
    t.size = j.at("size").get<std::size_t>();
    t.seed = j.at("seed").get<std::uint64_t>();
    const auto& p = j.at("placement");
    if (p.at("kind") == "fixed") {
      t.placement = Placement::fixed(p.at("x").get<std::size_t>(), p.at("y").get<std::size_t>());
    } else if (p.at("kind") == "anywhere") {
      t.placement = Placement::anywhere(p.at("seed").get<std::uint64_t>());
    } else {
      throw Error("format", "trigger archive: unknown placement kind");
    }
    t.patch = Tensor(j.at("patch_shape").get<Shape>(), io::hex_to_floats(j.at("patch").get<std::string>()));
    t.alpha = Tensor(j.at("alpha_shape").get<Shape>(), io::hex_to_floats(j.at("alpha").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("trigger archive: ") + e.what());
  }
  t.validate();
  return t;
}

void save_trigger(const TriggerSpec& trigger, const std::filesystem::path& path) {
  io::write_text(path, trigger_to_json(trigger).dump(2) + "\n");
}

TriggerSpec load_trigger(const std::filesystem::path& path) {
  try {
    return trigger_from_json(nlohmann::json::parse(io::read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("format", std::string("trigger archive: ") + e.what());
  }
}

}  // namespace sts
