#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "sts/analysis.hpp"

namespace sts {
namespace {

std::string error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return "";
}

std::vector<PatchVector> as_patches(const Points& points) {
  std::vector<PatchVector> out;
  for (std::size_t i = 0; i < points.size(); ++i) out.push_back({points[i], i, 1.0});
  return out;
}

Points blobs(std::size_t per_blob, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.01);
  Points pts;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < per_blob; ++i) {
      std::vector<double> p(12);
      for (double& v : p) v = (b == 0 ? 0.2 : 0.8) + nd(rng);
      pts.push_back(p);
    }
  return pts;
}

// Cyclic Jacobi rotations on a symmetric matrix; returns eigenvalues sorted
// in descending order.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

TEST(KMeans, TwoBlobsAreRecovered) {
  const auto pts = blobs(10, 1);
  const auto report = cluster_patches(as_patches(pts));
  EXPECT_EQ(report.k, 2u);
  EXPECT_FALSE(report.degenerate);
  for (std::size_t i = 1; i < 10; ++i) EXPECT_EQ(report.assignments[i], report.assignments[0]);
  for (std::size_t i = 10; i < 20; ++i) EXPECT_NE(report.assignments[i], report.assignments[0]);
  for (const auto& [k, s] : report.silhouette) {
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
  EXPECT_EQ(report.silhouette.rbegin()->first, 8u);
}

TEST(KMeans, IdenticalPatchesAreDegenerate) {
  const Points pts(6, std::vector<double>(12, 0.3));
  const auto report = cluster_patches(as_patches(pts));
  EXPECT_TRUE(report.degenerate);
  EXPECT_EQ(report.k, 2u);
  EXPECT_EQ(report.inertia, 0.0);
}

TEST(KMeans, InertiaNonIncreasingAndDeterministic) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  Points pts(60, std::vector<double>(5));
  for (auto& p : pts)
    for (double& v : p) v = u(rng);
  for (std::size_t k : {2u, 4u, 7u}) {
    const auto a = kmeans(pts, k, 9), b = kmeans(pts, k, 9);
    EXPECT_EQ(a.assignments, b.assignments);
    for (std::size_t i = 1; i < a.inertia_trace.size(); ++i) {
      EXPECT_LE(a.inertia_trace[i], a.inertia_trace[i - 1] + 1e-12);
    }
    for (auto c : a.assignments) EXPECT_LT(c, k);
  }
}

TEST(KMeans, TooFewPatchesIsAnError) {
  EXPECT_EQ(error_kind([] { cluster_patches(as_patches(Points(1, std::vector<double>(3, 0.1)))); }), "empty");
  ClusterConfig c;
  c.k_min = 4;
  EXPECT_EQ(error_kind([&] { cluster_patches(as_patches(blobs(1, 1)), c); }), "empty");
}

TEST(Pca, CollinearDataHasOneComponent) {
  Points pts;
  for (int i = 0; i < 10; ++i) pts.push_back({1.0 * i, 2.0 * i, -1.0 * i});
  const auto r = pca_project(pts);
  EXPECT_NEAR(r.explained[1], 0.0, 1e-12);
  EXPECT_NEAR(r.explained_ratio[0], 1.0, 1e-12);
  // Largest-magnitude loading is the second coordinate, signed positive.
  EXPECT_GT(r.components[0][1], 0.0);
}

TEST(Pca, PreservesDistancesInsideAPlane) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  std::vector<double> u(12), v(12);
  for (double& x : u) x = nd(rng);
  for (double& x : v) x = nd(rng);
  // Orthonormalize.
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  const double nu = std::sqrt(dot(u, u));
  for (double& x : u) x /= nu;
  const double uv = dot(u, v);
  for (std::size_t i = 0; i < 12; ++i) v[i] -= uv * u[i];
  const double nv = std::sqrt(dot(v, v));
  for (double& x : v) x /= nv;
  Points pts;
  for (int i = 0; i < 30; ++i) {
    const double a = nd(rng), b = nd(rng);
    std::vector<double> p(12, 0.5);
    for (std::size_t j = 0; j < 12; ++j) p[j] += a * u[j] + b * v[j];
    pts.push_back(p);
  }
  const auto r = pca_project(pts);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < 12; ++k) d += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
      const double dx = r.coordinates[i][0] - r.coordinates[j][0], dy = r.coordinates[i][1] - r.coordinates[j][1];
      EXPECT_NEAR(std::sqrt(dx * dx + dy * dy), std::sqrt(d), 1e-6);
    }
}

TEST(Pca, ExplainedVarianceMatchesJacobiOracle) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  Points pts(25, std::vector<double>(6));
  for (auto& p : pts)
    for (std::size_t j = 0; j < 6; ++j) p[j] = nd(rng) * (1.0 + j);
  std::vector<double> mean(6, 0.0);
  for (const auto& p : pts)
    for (std::size_t j = 0; j < 6; ++j) mean[j] += p[j] / 25.0;
  std::vector<std::vector<double>> cov(6, std::vector<double>(6, 0.0));
  for (const auto& p : pts)
    for (std::size_t a = 0; a < 6; ++a)
      for (std::size_t b = 0; b < 6; ++b) cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]) / 24.0;
  const auto oracle = jacobi_eigenvalues(cov);
  const auto r = pca_project(pts, 6);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(r.explained[i], oracle[i], 1e-8);
    if (i) EXPECT_LE(r.explained[i], r.explained[i - 1]);
  }
  EXPECT_EQ(error_kind([&] { pca_project(pts, 7); }), "config");
}

TEST(Rmse, Properties) {
  const std::vector<double> zeros(12, 0.0), ones(12, 1.0), mid(12, 0.25);
  EXPECT_EQ(patch_rmse(mid, mid), 0.0);
  EXPECT_DOUBLE_EQ(patch_rmse(zeros, ones), 1.0);
  EXPECT_DOUBLE_EQ(patch_rmse(zeros, mid), patch_rmse(mid, zeros));
  EXPECT_EQ(error_kind([&] { patch_rmse(zeros, std::vector<double>(3, 0.0)); }), "shape");
}

TEST(Rmse, BestMatchPicksClosestRestart) {
  auto t = generate_trigger(2, 1.0, 3);
  std::vector<double> truth(t.patch.data().begin(), t.patch.data().end());
  std::vector<PatchVector> rec = {{std::vector<double>(12, 0.0), 4, 1.0}, {truth, 7, 1.0}};
  const auto m = best_match_rmse(rec, t);
  EXPECT_EQ(m.restart, 7u);
  EXPECT_NEAR(m.rmse, 0.0, 1e-7);
  EXPECT_EQ(m.per_patch.size(), 2u);
}

TEST(Filter, KeepsOnlyEffectivePatches) {
  std::vector<PatchVector> ps = {{{0.1}, 0, 0.995}, {{0.2}, 1, 0.98}, {{0.3}, 2, 0.99}};
  const auto kept = effective_patches(ps);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].restart, 0u);
  EXPECT_EQ(kept[1].restart, 2u);
}

TEST(Report, CsvAndJson) {
  const auto report = cluster_patches(as_patches(blobs(4, 2)));
  const auto csv = pca_csv(report);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "restart,pc1,pc2,cluster");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
  const auto j = to_json(report);
  EXPECT_EQ(j.at("k"), 2);
  EXPECT_EQ(j.at("pca").at("coordinates").size(), 8u);
}

}  // namespace
}  // namespace sts
