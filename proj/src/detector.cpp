#include "sts/detector.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

namespace sts {

const char* verdict_name(Verdict v) { return v == Verdict::Trojan ? "trojan" : "pure"; }

double EntropyReport::modal_fraction() const {
  std::size_t total = 0, top = 0;
  for (auto c : histogram) {
    total += c;
    top = std::max(top, c);
  }
  return total == 0 ? 0.0 : static_cast<double>(top) / static_cast<double>(total);
}

std::vector<std::size_t> class_histogram(std::span<const int> predictions, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int p : predictions) {
    if (p < 0 || static_cast<std::size_t>(p) >= num_classes) {
      throw Error("label", "prediction " + std::to_string(p) + " outside [0," + std::to_string(num_classes) + ")");
    }
    ++counts[static_cast<std::size_t>(p)];
  }
  return counts;
}

double histogram_entropy(std::span<const std::size_t> counts) {
  std::size_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) throw Error("empty", "entropy of an empty histogram");
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return std::max(h, 0.0);
}

double lemma1_threshold(std::size_t num_classes, double delta) {
  if (num_classes < 2) throw Error("config", "threshold needs at least two classes");
  if (delta == 0.0) return 0.0;
  if (!(delta > 0.0 && delta < 1.0)) throw Error("config", "delta must lie in (0,1)");
  const double c1 = static_cast<double>(num_classes - 1);
  return -(1.0 - delta) * std::log2(1.0 - delta) - delta * std::log2(delta / c1);
}

Verdict classify_model(double entropy, double threshold) {
  return entropy <= threshold ? Verdict::Trojan : Verdict::Pure;
}

EntropyReport entropy_from_predictions(std::span<const int> predictions, std::size_t num_classes, double delta) {
  if (predictions.empty()) throw Error("empty", "entropy score of an empty scan set");
  EntropyReport r;
  r.histogram = class_histogram(predictions, num_classes);
  r.probabilities.resize(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) {
    r.probabilities[i] = static_cast<double>(r.histogram[i]) / static_cast<double>(predictions.size());
  }
  r.entropy = histogram_entropy(r.histogram);
  r.delta = delta;
  r.threshold = lemma1_threshold(num_classes, delta);
  r.verdict = classify_model(r.entropy, r.threshold);
  return r;
}

EntropyReport entropy_score(const ModelCheckpoint& model, const Tensor& images, const TriggerSpec& trigger,
                            double delta) {
  if (images.rank() != 4 || images.dim(0) == 0) throw Error("empty", "entropy score of an empty scan set");
  const auto pred = Classifier(model).predict_classes(apply_to_all(images, trigger));
  return entropy_from_predictions(pred, model.arch.num_classes, delta);
}

Confusion confusion(std::span<const Verdict> verdicts, std::span<const bool> is_trojan) {
  if (verdicts.size() != is_trojan.size()) throw Error("shape", "verdicts and ground truth differ in length");
  Confusion c;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const bool predicted = verdicts[i] == Verdict::Trojan;
    if (predicted && is_trojan[i]) ++c.true_positive;
    else if (predicted) ++c.false_positive;
    else if (is_trojan[i]) ++c.false_negative;
    else ++c.true_negative;
  }
  return c;
}

double f1_score(std::span<const Verdict> verdicts, std::span<const bool> is_trojan) {
  const Confusion c = confusion(verdicts, is_trojan);
  const double tp = static_cast<double>(c.true_positive);
  const double pp = tp + static_cast<double>(c.false_positive);
  const double ap = tp + static_cast<double>(c.false_negative);
  if (tp == 0.0) return 0.0;
  const double precision = tp / pp, recall = tp / ap;
  return 2.0 * precision * recall / (precision + recall);
}

DetectionSummary summarize(std::vector<ModelDetection> models) {
  DetectionSummary s;
  std::vector<Verdict> verdicts;
  auto flags = std::make_unique<bool[]>(models.size());
  for (std::size_t i = 0; i < models.size(); ++i) {
    verdicts.push_back(models[i].report.verdict);
    flags[i] = models[i].is_trojan;
  }
  std::span<const bool> gt(flags.get(), models.size());
  s.counts = confusion(verdicts, gt);
  s.f1 = f1_score(verdicts, gt);
  s.models = std::move(models);
  return s;
}

nlohmann::json to_json(const EntropyReport& r) {
  return {{"histogram", r.histogram},
          {"probabilities", r.probabilities},
          {"entropy_bits", r.entropy},
          {"threshold_bits", r.threshold},
          {"delta", r.delta},
          {"verdict", verdict_name(r.verdict)}};
}

nlohmann::json to_json(const DetectionSummary& s) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : s.models) {
    auto j = to_json(m.report);
    j["model_id"] = m.model_id;
    j["ground_truth"] = m.is_trojan ? "trojan" : "pure";
    models.push_back(std::move(j));
  }
  return {{"models", models},
          {"confusion",
           {{"true_positive", s.counts.true_positive},
            {"false_positive", s.counts.false_positive},
            {"true_negative", s.counts.true_negative},
            {"false_negative", s.counts.false_negative}}},
          {"f1", s.f1}};
}

std::string to_csv(const DetectionSummary& s) {
  std::ostringstream out;
  out.precision(10);
  out << "model_id,entropy,threshold,verdict,ground_truth\n";
  for (const auto& m : s.models) {
    out << m.model_id << ',' << m.report.entropy << ',' << m.report.threshold << ','
        << verdict_name(m.report.verdict) << ',' << (m.is_trojan ? "trojan" : "pure") << '\n';
  }
  return out.str();
}

}  // namespace sts
