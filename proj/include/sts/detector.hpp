#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sts/model.hpp"
#include "sts/trigger.hpp"

namespace sts {

inline constexpr double kDefaultDelta = 0.01;

enum class Verdict { Pure, Trojan };
const char* verdict_name(Verdict v);

struct EntropyReport {
  std::vector<std::size_t> histogram;  // predicted-class counts
  std::vector<double> probabilities;
  double entropy = 0.0;    // bits
  double threshold = 0.0;  // bits
  double delta = kDefaultDelta;
  Verdict verdict = Verdict::Pure;

  /// Share of the most frequent predicted class.
  double modal_fraction() const;
};

std::vector<std::size_t> class_histogram(std::span<const int> predictions, std::size_t num_classes);

/// Shannon entropy in bits, with 0 log 0 = 0.
double histogram_entropy(std::span<const std::size_t> counts);

/// -(1-d) log2(1-d) - d log2(d / (C-1)). d = 0 returns 0 (the limit).
double lemma1_threshold(std::size_t num_classes, double delta);

/// Trojan iff entropy <= threshold.
Verdict classify_model(double entropy, double threshold);

/// Perturbs every image with `trigger` (per its placement), predicts classes
/// and scores the histogram.
EntropyReport entropy_score(const ModelCheckpoint& model, const Tensor& images, const TriggerSpec& trigger,
                            double delta = kDefaultDelta);
EntropyReport entropy_from_predictions(std::span<const int> predictions, std::size_t num_classes,
                                       double delta = kDefaultDelta);

struct Confusion {
  std::size_t true_positive = 0, false_positive = 0, true_negative = 0, false_negative = 0;
};

/// Trojan is the positive class. Returns 0 when precision + recall = 0.
double f1_score(std::span<const Verdict> verdicts, std::span<const bool> is_trojan);
Confusion confusion(std::span<const Verdict> verdicts, std::span<const bool> is_trojan);

struct ModelDetection {
  std::string model_id;
  EntropyReport report;
  bool is_trojan = false;  // ground truth, joined after scanning
};

struct DetectionSummary {
  std::vector<ModelDetection> models;
  Confusion counts;
  double f1 = 0.0;
};

DetectionSummary summarize(std::vector<ModelDetection> models);

nlohmann::json to_json(const EntropyReport& report);
nlohmann::json to_json(const DetectionSummary& summary);
/// model_id,entropy,threshold,verdict,ground_truth
std::string to_csv(const DetectionSummary& summary);

}  // namespace sts
