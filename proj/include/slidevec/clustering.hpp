#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slidevec/feature_store.hpp"
#include "slidevec/matrix.hpp"

namespace slidevec {

inline constexpr int kDefaultClusters = 10;

struct KmeansConfig {
  int max_iters = 300;
  double tol = 1e-6;
  int restarts = 8;
};

struct ClusterModel {
  int k = 0;
  Matrix<double> centroids;      // k x dim, exact means of the members
  std::vector<int> assignments;  // per patch
  double wcss = 0.0;
  int iterations = 0;
  std::uint64_t seed = 0;
  // WCSS after every assignment and every update step of the winning run.
  std::vector<double> wcss_trace;

  std::vector<std::size_t> cluster_sizes() const;
};

// Lloyd iterations from the given initial centroids. Ties keep the current
// assignment; an emptied cluster is refilled with the point farthest from
// its centroid (taken from a cluster with at least two members).
ClusterModel lloyd(const FeatureMatrix& features, Matrix<double> init, const KmeansConfig& cfg);

// k-means++ seeding. Deterministic in `seed`.
Matrix<double> kmeans_plus_plus(const FeatureMatrix& features, int k, std::uint64_t seed);

// Best of cfg.restarts k-means++ runs by final WCSS.
ClusterModel kmeans_fit(const FeatureMatrix& features, int k, std::uint64_t seed,
                        const KmeansConfig& cfg = {});

double compute_wcss(const FeatureMatrix& features, const Matrix<double>& centroids,
                    std::span<const int> assignments);

struct CurvePoint {
  int k = 0;
  double wcss = 0.0;
};

// One fit per k in [k_min, k_max]. Each k keeps the better of a cold fit
// and a warm start from the (k-1) solution plus its worst-fit point, which
// makes the curve non-increasing.
std::vector<CurvePoint> wcss_curve(const FeatureMatrix& features, int k_min, int k_max,
                                   std::uint64_t seed, const KmeansConfig& cfg = {});

// Interior k maximizing (w[k-1]-w[k]) - (w[k]-w[k+1]); ties go to smaller k.
int elbow_select(std::span<const CurvePoint> curve);

struct BagRepresentation {
  std::string slide_id;
  int k = 0;
  int dim = 0;
  Matrix<float> means;  // k x dim, canonical row order
  std::vector<std::size_t> cluster_sizes;
  std::vector<std::vector<std::size_t>> member_map;  // row -> patch indices, ascending
  std::uint64_t seed = 0;
  double wcss = 0.0;
};

// Rows sorted by descending cluster size, ties by lexicographic centroid.
BagRepresentation build_bag(const ClusterModel& model, const FeatureMatrix& features,
                            std::string slide_id);

// `<dir>/<slide_id>.bag.fvec` plus `<slide_id>.bag.json`.
std::filesystem::path bag_path(const std::filesystem::path& dir, const std::string& slide_id);
void write_bag(const std::filesystem::path& dir, const BagRepresentation& bag);
BagRepresentation read_bag(const std::filesystem::path& fvec_path);

}  // namespace slidevec
