#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>

#include <nlohmann/json.hpp>

#include "sts/dataset.hpp"
#include "sts/model.hpp"
#include "sts/tensor.hpp"

namespace sts {

struct Placement {
  enum class Kind { Fixed, AnywhereRandom };
  Kind kind = Kind::AnywhereRandom;
  std::size_t x = 0;  // column of the window origin (Fixed)
  std::size_t y = 0;  // row of the window origin (Fixed)
  std::uint64_t seed = 0;  // AnywhereRandom

  static Placement fixed(std::size_t x, std::size_t y) { return {Kind::Fixed, x, y, 0}; }
  static Placement anywhere(std::uint64_t seed) { return {Kind::AnywhereRandom, 0, 0, seed}; }
};

/// A square patch blended into images: inside the window
/// [x, x+s) x [y, y+s), out = (1 - a) * image + a * patch.
struct TriggerSpec {
  std::size_t size = 0;
  Tensor patch;   // [3,s,s], values in [0,1]
  Tensor alpha;   // [1] (one opacity) or [s,s] (per pixel), values in [0,1]
  Placement placement;
  std::uint64_t seed = 0;

  bool per_pixel_alpha() const { return alpha.size() != 1; }
  /// Throws unless shapes agree and every value lies in [0,1].
  void validate() const;
};

/// Patch pixels i.i.d. uniform [0,1] drawn from `seed`, scalar opacity.
TriggerSpec generate_trigger(std::size_t size, double alpha, std::uint64_t seed,
                             std::size_t image_height = 32, std::size_t image_width = 32);

/// Blends the trigger into one planar image (3*H*W floats) in place at (x, y).
void apply_trigger_inplace(std::span<float> image, std::size_t height, std::size_t width,
                           const TriggerSpec& trigger, std::size_t x, std::size_t y);

/// Returns a copy of `image` ([3,H,W]) with the trigger at (x, y).
Tensor apply_trigger(const Tensor& image, const TriggerSpec& trigger, std::size_t x, std::size_t y);

/// Uniform in-bounds window origin (x, y) for a patch of `size`.
std::pair<std::size_t, std::size_t> random_location(std::size_t height, std::size_t width,
                                                    std::size_t size, std::mt19937_64& rng);

/// Every image of `set` with the trigger applied according to its placement
/// (a fresh random location per image for AnywhereRandom). Labels are kept.
LabeledImageSet apply_to_all(const LabeledImageSet& set, const TriggerSpec& trigger);
Tensor apply_to_all(const Tensor& images, const TriggerSpec& trigger);

/// Replaces ceil(rate * N) randomly chosen images by triggered copies
/// labelled `target_class` (random location per image), then shuffles.
LabeledImageSet poison_dataset(const LabeledImageSet& attack_set, const TriggerSpec& trigger,
                               double rate, int target_class, std::uint64_t seed);

struct Effectiveness {
  double pmpd = 0.0;  // pure model, clean data
  double tmpd = 0.0;  // Trojan model, clean data
  double tmtd = 0.0;  // Trojan model, triggered data -> target class
};

Effectiveness effectiveness(const ModelCheckpoint& pure_model, const ModelCheckpoint& trojan_model,
                            const LabeledImageSet& clean_test, const TriggerSpec& trigger,
                            int target_class, std::uint64_t seed);

/// Attack gates: TMTD >= min_tmtd and PMPD - TMPD <= max_drop.
bool attack_accepted(const Effectiveness& e, double min_tmtd = 0.99, double max_drop = 0.02);

// Trigger archive: JSON with hex-encoded little-endian f32 arrays.
nlohmann::json trigger_to_json(const TriggerSpec& trigger);
TriggerSpec trigger_from_json(const nlohmann::json& j);
void save_trigger(const TriggerSpec& trigger, const std::filesystem::path& path);
TriggerSpec load_trigger(const std::filesystem::path& path);

}  // namespace sts
