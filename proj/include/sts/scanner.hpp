#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sts/model.hpp"
#include "sts/tensor.hpp"
#include "sts/trigger.hpp"

namespace sts {

/// (tanh(z) + 1) / 2, elementwise.
Tensor reparameterize(const Tensor& raw);
Tensor64 reparameterize(const Tensor64& raw);

/// Mean smoothed L2 distance over all N(N-1) ordered pairs of rows of an
/// [N,C] probability matrix.
double pairwise_loss(const Tensor64& probs);
double pairwise_loss(const Tensor& probs);

struct ScanMode {
  enum class Kind { FixedSize, Regularized };
  Kind kind = Kind::Regularized;
  std::size_t size = 2;                                        // FixedSize
  std::optional<std::pair<std::size_t, std::size_t>> location;  // FixedSize, (x, y); center if unset
  double lambda = 0.01;                                        // Regularized

  static ScanMode fixed_size(std::size_t s) { return {Kind::FixedSize, s, std::nullopt, 0.0}; }
  static ScanMode fixed_size(std::size_t s, std::size_t x, std::size_t y) {
    return {Kind::FixedSize, s, std::pair{x, y}, 0.0};
  }
  static ScanMode regularized(double lambda) { return {Kind::Regularized, 0, std::nullopt, lambda}; }
};

struct ScanConfig {
  ScanMode mode;
  std::size_t restarts = 50;
  std::size_t steps = 1000;
  std::size_t batch = 32;
  std::size_t eval_batch = 64;  // fixed images scoring every checkpoint
  double lr = 0.1;
  std::uint64_t seed = 0;
  double plateau_tolerance = 1e-6;
  std::size_t plateau_window = 50;
  bool early_exit = true;
  std::size_t workers = 0;  // 0 = all hardware threads

  void validate(std::size_t height, std::size_t width) const;
};

struct RestartResult {
  std::size_t restart = 0;
  TriggerSpec trigger;  // best iterate, post-reparameterization
  double initial_loss = 0.0;
  double final_loss = 0.0;  // eval-batch objective of `trigger`
  std::vector<double> trajectory;  // minibatch objective per step
  std::size_t steps_run = 0;
};

struct ScanResult {
  ScanMode mode;
  std::vector<RestartResult> restarts;
  std::size_t best = 0;  // index of the lowest final loss
  double wallclock_seconds = 0.0;

  const RestartResult& primary() const { return restarts.at(best); }
  const TriggerSpec& trigger() const { return primary().trigger; }
  double final_loss() const { return primary().final_loss; }
};

/// Reverse-engineers a trigger for `model` from unlabeled [N,3,H,W] images.
/// Dispatches on config.mode.
ScanResult scan(const ModelCheckpoint& model, const Tensor& images, const ScanConfig& config);
ScanResult scan_fixed_size(const ModelCheckpoint& model, const Tensor& images, const ScanConfig& config);
ScanResult scan_regularized(const ModelCheckpoint& model, const Tensor& images, const ScanConfig& config);

/// Scalars, trajectories and per-restart losses. Recovered triggers are
/// stored separately in the trigger archive format.
nlohmann::json to_json(const ScanResult& result, bool include_timing = true);

}  // namespace sts
