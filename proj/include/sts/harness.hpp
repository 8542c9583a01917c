#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sts/analysis.hpp"
#include "sts/detector.hpp"
#include "sts/scanner.hpp"

namespace sts {

inline constexpr const char* kToolVersion = "0.3.0";

struct TriggerSetConfig {
  std::size_t size = 2;
  double alpha = 1.0;
  std::size_t count = 1;
};

struct ExperimentConfig {
  // Dataset: "synthetic", "sts-raw" or "cifar10-binary".
  std::string dataset_format = "synthetic";
  std::vector<std::string> dataset_paths;
  std::vector<std::string> test_paths;  // clean test images; synthetic draws its own
  SyntheticConfig synthetic;
  std::size_t synthetic_test_images = 1000;
  double split_ratio = 0.7;
  double val_fraction = 0.1;

  std::size_t pure_models = 5;
  std::vector<TriggerSetConfig> trigger_sets = {{2, 1.0, 2}, {4, 1.0, 2}, {2, 0.8, 1}};
  int target_class = 0;
  double poison_rate = 0.1;

  ArchitectureConfig arch;
  TrainConfig train;

  double min_tmtd = 0.99;
  double max_tmpd_drop = 0.02;
  bool enforce_gates = true;

  ScanConfig scan;
  double delta = kDefaultDelta;

  // Fixed-size restarts on Trojan models whose trigger size matches.
  bool analyze = false;
  std::size_t analysis_models = 1;
  ScanConfig analysis_scan;
  double analysis_effectiveness = 0.99;
  ClusterConfig cluster;

  std::uint64_t seed = 1;
  std::size_t workers = 1;

  ExperimentConfig();
  void validate() const;
  std::size_t trojan_models() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

inline const std::vector<std::string>& protocol_phases() {
  static const std::vector<std::string> phases = {"gen-data", "train-pure", "train-trojan", "scan",
                                                  "detect",   "analyze",    "report"};
  return phases;
}

/// A run directory: config snapshot, manifest, data, models, scans and reports.
///
/// manifest.json records, per completed phase, the SHA-256 of every artifact
/// it wrote. Wallclock timings live in timings.json, which is not hashed.
class Run {
 public:
  /// Creates `dir` (if needed) and writes the config snapshot. An existing run
  /// must carry an identical config.
  static Run create(const std::filesystem::path& dir, const ExperimentConfig& config);
  /// Opens an existing run directory using its stored config.
  static Run open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const noexcept { return dir_; }
  const ExperimentConfig& config() const noexcept { return config_; }
  void set_workers(std::size_t workers) { config_.workers = workers; }

  bool phase_complete(const std::string& phase) const;
  std::vector<std::string> missing_phases() const;

  /// Runs one phase. A phase whose recorded artifacts still hash-verify is
  /// skipped; otherwise it runs, resuming per-model jobs whose files exist.
  void run_phase(const std::string& phase);
  /// Every phase in order ("analyze" only when enabled in the config).
  void run_all();

  const nlohmann::json& manifest() const noexcept { return manifest_; }
  /// Relative path -> SHA-256 over every phase's artifacts.
  std::map<std::string, std::string> artifact_hashes() const;

 private:
  Run(std::filesystem::path dir, ExperimentConfig config);

  void gen_data();
  void train_pure();
  void train_trojan();
  void scan_models();
  void detect();
  void analyze();
  void report();

  void require(const std::string& phase) const;
  void record_phase(const std::string& phase, const std::vector<std::filesystem::path>& artifacts,
                    double seconds);
  bool verify_phase(const std::string& phase) const;
  /// Per-model files a rerun may keep: present and, if the phase was
  /// recorded before, matching their recorded hashes.
  bool reusable(const std::string& phase, const std::vector<std::string>& rels) const;
  void save_manifest() const;
  std::filesystem::path path(const std::string& rel) const { return dir_ / rel; }
  std::vector<std::string> model_ids() const;

  std::filesystem::path dir_;
  ExperimentConfig config_;
  nlohmann::json manifest_;
};

/// Opaque identifier of the index-th model of a run.
std::string model_id(std::uint64_t seed, std::size_t index);

/// Builds the consolidated report of a finished run (also written by the
/// "report" phase). Lists missing phases when the run is incomplete.
nlohmann::json build_report(const std::filesystem::path& run_dir);

}  // namespace sts
