#include "sts/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace sts {

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

void check_points(const Points& points, std::size_t min_count, const char* what) {
  if (points.size() < min_count) {
    throw Error("empty", std::string(what) + " needs at least " + std::to_string(min_count) + " points");
  }
  const std::size_t d = points.front().size();
  if (d == 0) throw Error("shape", std::string(what) + ": zero-dimensional points");
  for (const auto& p : points) {
    if (p.size() != d) throw Error("shape", std::string(what) + ": points differ in dimension");
  }
}

Points kmeanspp_seeds(const Points& points, std::size_t k, std::mt19937_64& rng) {
  Points centroids;
  std::uniform_int_distribution<std::size_t> first(0, points.size() - 1);
  centroids.push_back(points[first(rng)]);
  std::vector<double> d2(points.size(), std::numeric_limits<double>::infinity());
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::min(d2[i], squared_distance(points[i], centroids.back()));
      total += d2[i];
    }
    if (total <= 0.0) {
      centroids.push_back(points[first(rng)]);
      continue;
    }
    double r = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = 0;
    for (; pick + 1 < points.size(); ++pick) {
      r -= d2[pick];
      if (r < 0.0) break;
    }
    centroids.push_back(points[pick]);
  }
  return centroids;
}

double assign(const Points& points, const Points& centroids, std::vector<std::size_t>& assignments) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = squared_distance(points[i], centroids[c]);
      if (d < best) {
        best = d;
        assignments[i] = c;
      }
    }
    inertia += best;
  }
  return inertia;
}

KMeansResult lloyd(const Points& points, Points centroids, double tolerance, std::size_t max_iterations) {
  const std::size_t k = centroids.size(), dim = points.front().size();
  KMeansResult r;
  r.assignments.assign(points.size(), 0);
  r.inertia = assign(points, centroids, r.assignments);
  r.inertia_trace.push_back(r.inertia);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    Points next(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      ++counts[r.assignments[i]];
      for (std::size_t j = 0; j < dim; ++j) next[r.assignments[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        next[c] = centroids[c];  // empty cluster keeps its centre
        continue;
      }
      for (double& v : next[c]) v /= static_cast<double>(counts[c]);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, squared_distance(next[c], centroids[c]));
    centroids = std::move(next);
    r.inertia = assign(points, centroids, r.assignments);
    r.inertia_trace.push_back(r.inertia);
    if (std::sqrt(shift) < tolerance) break;
  }
  r.centroids = std::move(centroids);
  return r;
}

}  // namespace

double patch_effectiveness(Classifier& model, const Tensor& images, const TriggerSpec& trigger) {
  const auto pred = model.predict_classes(apply_to_all(images, trigger));
  std::vector<std::size_t> counts(model.num_classes(), 0);
  for (int p : pred) ++counts[static_cast<std::size_t>(p)];
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
         static_cast<double>(pred.size());
}

std::vector<PatchVector> patch_vectors(const ScanResult& result, const ModelCheckpoint& model,
                                       const Tensor& images) {
  Classifier classifier(model);
  std::vector<PatchVector> out;
  for (const auto& r : result.restarts) {
    PatchVector p;
    p.values.assign(r.trigger.patch.data().begin(), r.trigger.patch.data().end());
    p.restart = r.restart;
    p.effectiveness = patch_effectiveness(classifier, images, r.trigger);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PatchVector> effective_patches(const std::vector<PatchVector>& patches, double threshold) {
  std::vector<PatchVector> out;
  std::copy_if(patches.begin(), patches.end(), std::back_inserter(out),
               [&](const PatchVector& p) { return p.effectiveness >= threshold; });
  return out;
}

KMeansResult kmeans(const Points& points, std::size_t k, std::uint64_t seed, std::size_t restarts,
                    double tolerance, std::size_t max_iterations) {
  check_points(points, 1, "k-means");
  if (k < 1 || k > points.size()) {
    throw Error("config", "k = " + std::to_string(k) + " invalid for " + std::to_string(points.size()) + " points");
  }
  if (restarts < 1) throw Error("config", "k-means needs at least one restart");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    auto result = lloyd(points, kmeanspp_seeds(points, k, rng), tolerance, max_iterations);
    if (result.inertia < best.inertia) best = std::move(result);
  }
  return best;
}

double mean_silhouette(const Points& points, const std::vector<std::size_t>& assignments, std::size_t k) {
  const std::size_t n = points.size();
  std::vector<std::size_t> sizes(k, 0);
  for (auto a : assignments) ++sizes.at(a);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (sizes[assignments[i]] <= 1) continue;
    std::vector<double> sum(k, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sum[assignments[j]] += std::sqrt(squared_distance(points[i], points[j]));
    }
    const double a = sum[assignments[i]] / static_cast<double>(sizes[assignments[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c != assignments[i] && sizes[c] > 0) b = std::min(b, sum[c] / static_cast<double>(sizes[c]));
    }
    if (!std::isfinite(b)) continue;
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

PcaResult pca_project(const Points& points, std::size_t dims) {
  check_points(points, 2, "PCA");
  const std::size_t n = points.size(), d = points.front().size();
  if (dims < 1 || dims > d) {
    throw Error("config", "cannot project " + std::to_string(d) + "-dimensional data onto " +
                              std::to_string(dims) + " components");
  }
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = points[i][j];
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues come out ascending.
  PcaResult r;
  const double total = std::max(eig.eigenvalues().sum(), 0.0);
  for (std::size_t c = 0; c < dims; ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - c);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index top = 0;
    v.cwiseAbs().maxCoeff(&top);
    if (v(top) < 0) v = -v;
    r.components.emplace_back(v.data(), v.data() + d);
    const double var = std::max(eig.eigenvalues()(col), 0.0);
    r.explained.push_back(var);
    r.explained_ratio.push_back(total > 0.0 ? var / total : 0.0);
  }
  r.coordinates.assign(n, std::vector<double>(dims, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < dims; ++c)
      for (std::size_t j = 0; j < d; ++j) r.coordinates[i][c] += x(i, j) * r.components[c][j];
  return r;
}

ClusterReport cluster_patches(const std::vector<PatchVector>& patches, const ClusterConfig& config) {
  if (config.k_min < 2 || config.k_max < config.k_min) throw Error("config", "k range must satisfy 2 <= k_min <= k_max");
  if (patches.size() < std::max<std::size_t>(config.k_min, 2)) {
    throw Error("empty", "clustering needs at least " + std::to_string(config.k_min) + " patches, got " +
                             std::to_string(patches.size()));
  }
  Points points;
  ClusterReport report;
  for (const auto& p : patches) {
    points.push_back(p.values);
    report.restart_ids.push_back(p.restart);
  }
  check_points(points, 2, "clustering");
  report.pca = pca_project(points, std::min<std::size_t>(2, points.front().size()));

  double spread = 0.0;
  for (const auto& p : points) spread = std::max(spread, squared_distance(p, points.front()));
  if (spread == 0.0) {
    report.degenerate = true;
    report.k = config.k_min;
    report.assignments.assign(points.size(), 0);
    report.centroids.assign(report.k, points.front());
    return report;
  }

  const std::size_t k_hi = std::max(config.k_min, std::min(config.k_max, points.size() - 1));
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = config.k_min; k <= k_hi; ++k) {
    auto km = kmeans(points, k, config.seed + k, config.restarts, config.tolerance);
    const double score = mean_silhouette(points, km.assignments, k);
    report.silhouette[k] = score;
    if (score > best_score) {
      best_score = score;
      report.k = k;
      report.assignments = std::move(km.assignments);
      report.centroids = std::move(km.centroids);
      report.inertia = km.inertia;
    }
  }
  return report;
}

double patch_rmse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw Error("shape", "patch dimensions differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  return std::sqrt(squared_distance(a, b) / static_cast<double>(a.size()));
}

RmseMatch best_match_rmse(const std::vector<PatchVector>& recovered, const TriggerSpec& original) {
  if (recovered.empty()) throw Error("empty", "no recovered patches to match");
  const std::vector<double> truth(original.patch.data().begin(), original.patch.data().end());
  RmseMatch m;
  m.rmse = std::numeric_limits<double>::infinity();
  for (const auto& p : recovered) {
    const double e = patch_rmse(p.values, truth);
    m.per_patch.push_back(e);
    if (e < m.rmse) {
      m.rmse = e;
      m.restart = p.restart;
    }
  }
  return m;
}

nlohmann::json to_json(const ClusterReport& r) {
  nlohmann::json sil = nlohmann::json::object();
  for (const auto& [k, s] : r.silhouette) sil[std::to_string(k)] = s;
  return {{"k", r.k},
          {"degenerate", r.degenerate},
          {"restart_ids", r.restart_ids},
          {"assignments", r.assignments},
          {"centroids", r.centroids},
          {"inertia", r.inertia},
          {"silhouette", sil},
          {"pca",
           {{"coordinates", r.pca.coordinates},
            {"components", r.pca.components},
            {"explained_variance", r.pca.explained},
            {"explained_variance_ratio", r.pca.explained_ratio}}}};
}

std::string pca_csv(const ClusterReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << "restart,pc1,pc2,cluster\n";
  for (std::size_t i = 0; i < r.restart_ids.size(); ++i) {
    const auto& c = r.pca.coordinates[i];
    out << r.restart_ids[i] << ',' << c[0] << ',' << (c.size() > 1 ? c[1] : 0.0) << ',' << r.assignments[i] << '\n';
  }
  return out.str();
}

}  // namespace sts
