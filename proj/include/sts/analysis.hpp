#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sts/scanner.hpp"

namespace sts {

/// A recovered patch flattened in planar (channel, row, column) order.
struct PatchVector {
  std::vector<double> values;
  std::size_t restart = 0;
  double effectiveness = 0.0;  // share of scan images sent to the modal class
};

/// Share of `images` that the triggered model assigns to its most frequent class.
double patch_effectiveness(Classifier& model, const Tensor& images, const TriggerSpec& trigger);

/// One PatchVector per restart of `result`, with effectiveness measured on `images`.
std::vector<PatchVector> patch_vectors(const ScanResult& result, const ModelCheckpoint& model,
                                       const Tensor& images);

/// Patches whose effectiveness is at least `threshold`.
std::vector<PatchVector> effective_patches(const std::vector<PatchVector>& patches, double threshold = 0.99);

using Points = std::vector<std::vector<double>>;

struct KMeansResult {
  std::vector<std::size_t> assignments;
  Points centroids;
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // per Lloyd iteration of the kept restart
};

/// Lloyd iterations from k-means++ seeds, best of `restarts` by inertia.
KMeansResult kmeans(const Points& points, std::size_t k, std::uint64_t seed, std::size_t restarts = 20,
                    double tolerance = 1e-8, std::size_t max_iterations = 500);

/// Mean silhouette; members of singleton clusters score 0.
double mean_silhouette(const Points& points, const std::vector<std::size_t>& assignments, std::size_t k);

struct PcaResult {
  Points coordinates;              // N x dims
  Points components;               // dims x D, unit length
  std::vector<double> explained;   // variance along each component
  std::vector<double> explained_ratio;
};

/// Projection onto the top principal components of the mean-centred data.
/// Each component is signed so that its largest-magnitude loading is positive.
PcaResult pca_project(const Points& points, std::size_t dims = 2);

struct ClusterConfig {
  std::size_t k_min = 2;
  std::size_t k_max = 8;
  std::size_t restarts = 20;
  double tolerance = 1e-8;
  std::uint64_t seed = 0;
};

struct ClusterReport {
  std::size_t k = 0;
  std::vector<std::size_t> restart_ids;
  std::vector<std::size_t> assignments;
  Points centroids;
  double inertia = 0.0;
  std::map<std::size_t, double> silhouette;  // by k
  bool degenerate = false;
  PcaResult pca;
};

/// k chosen by the highest mean silhouette over [k_min, min(k_max, N-1)].
ClusterReport cluster_patches(const std::vector<PatchVector>& patches, const ClusterConfig& config = {});

struct RmseMatch {
  double rmse = 0.0;
  std::size_t restart = 0;
  std::vector<double> per_patch;
};

double patch_rmse(const std::vector<double>& a, const std::vector<double>& b);
/// Closest recovered patch to the ground-truth trigger patch.
RmseMatch best_match_rmse(const std::vector<PatchVector>& recovered, const TriggerSpec& original);

nlohmann::json to_json(const ClusterReport& report);
/// restart,pc1,pc2,cluster
std::string pca_csv(const ClusterReport& report);

}  // namespace sts
