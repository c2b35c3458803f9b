#include "slidevec/clustering.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "slidevec/error.hpp"
#include "slidevec/rng.hpp"
#include "slidevec/simd/kernels.hpp"

namespace slidevec {

namespace fs = std::filesystem;

std::vector<std::size_t> ClusterModel::cluster_sizes() const {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
  for (int a : assignments) ++sizes[static_cast<std::size_t>(a)];
  return sizes;
}

double compute_wcss(const FeatureMatrix& features, const Matrix<double>& centroids,
                    std::span<const int> assignments) {
  double total = 0.0;
  for (std::size_t i = 0; i < features.rows(); ++i)
    total += simd::sqdist(features.row(i), centroids.row(static_cast<std::size_t>(assignments[i])));
  return total;
}

namespace {

void check_k(const FeatureMatrix& features, int k) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be at least 1");
  if (static_cast<std::size_t>(k) > features.rows())
    throw Error(ErrorCode::too_few_samples, "k = " + std::to_string(k) + " exceeds the " +
                                                std::to_string(features.rows()) + " available patches");
}

// Returns true if any assignment changed.
bool assign(const FeatureMatrix& x, const Matrix<double>& c, std::vector<int>& a, bool first) {
  bool changed = false;
  const std::size_t k = c.rows();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    int best = first ? 0 : a[i];
    double best_d = simd::sqdist(x.row(i), c.row(static_cast<std::size_t>(best)));
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == best) continue;
      const double d = simd::sqdist(x.row(i), c.row(j));
      if (d < best_d || (first && d == best_d && static_cast<int>(j) < best)) {
        best_d = d;
        best = static_cast<int>(j);
      }
    }
    if (first || a[i] != best) changed = true;
    a[i] = best;
  }
  return changed;
}

void mean_of(const FeatureMatrix& x, std::span<const int> a, int cluster, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (a[i] != cluster) continue;
    ++n;
    const auto row = x.row(i);
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += row[d];
  }
  if (n > 0)
    for (double& v : out) v /= static_cast<double>(n);
}

void update_means(const FeatureMatrix& x, std::vector<int>& a, Matrix<double>& c) {
  const int k = static_cast<int>(c.rows());
  const std::size_t dim = c.cols();
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
  for (int v : a) ++sizes[static_cast<std::size_t>(v)];

  Matrix<double> sums(static_cast<std::size_t>(k), dim, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto s = sums.row(static_cast<std::size_t>(a[i]));
    const auto row = x.row(i);
    for (std::size_t d = 0; d < dim; ++d) s[d] += row[d];
  }
  for (int j = 0; j < k; ++j) {
    if (sizes[static_cast<std::size_t>(j)] == 0) continue;
    auto dst = c.row(static_cast<std::size_t>(j));
    const auto s = sums.row(static_cast<std::size_t>(j));
    const double inv = static_cast<double>(sizes[static_cast<std::size_t>(j)]);
    for (std::size_t d = 0; d < dim; ++d) dst[d] = s[d] / inv;
  }

  // Empty-cluster repair.
  for (int j = 0; j < k; ++j) {
    if (sizes[static_cast<std::size_t>(j)] != 0) continue;
    std::size_t far = x.rows();
    double far_d = -1.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (sizes[static_cast<std::size_t>(a[i])] < 2) continue;
      const double d = simd::sqdist(x.row(i), c.row(static_cast<std::size_t>(a[i])));
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far == x.rows()) break;  // cannot happen while k <= n
    const int donor = a[far];
    --sizes[static_cast<std::size_t>(donor)];
    ++sizes[static_cast<std::size_t>(j)];
    a[far] = j;
    auto dst = c.row(static_cast<std::size_t>(j));
    const auto src = x.row(far);
    for (std::size_t d = 0; d < dim; ++d) dst[d] = src[d];
    mean_of(x, a, donor, c.row(static_cast<std::size_t>(donor)));
  }
}

}  // namespace

ClusterModel lloyd(const FeatureMatrix& features, Matrix<double> init, const KmeansConfig& cfg) {
  const int k = static_cast<int>(init.rows());
  check_k(features, k);
  if (init.cols() != features.cols())
    throw Error(ErrorCode::dim_mismatch, "initial centroids have the wrong dimension");

  ClusterModel model;
  model.k = k;
  model.centroids = std::move(init);
  model.assignments.assign(features.rows(), 0);

  assign(features, model.centroids, model.assignments, true);
  double cost = compute_wcss(features, model.centroids, model.assignments);
  model.wcss_trace.push_back(cost);

  bool settled = false;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    model.iterations = it;
    update_means(features, model.assignments, model.centroids);
    const double updated = compute_wcss(features, model.centroids, model.assignments);
    model.wcss_trace.push_back(updated);

    const bool changed = assign(features, model.centroids, model.assignments, false);
    const double next = compute_wcss(features, model.centroids, model.assignments);
    if (!changed) {
      cost = next;
      settled = true;
      break;
    }
    model.wcss_trace.push_back(next);
    const double gain = cost - next;
    cost = next;
    if (gain <= cfg.tol * std::max(cost + gain, std::numeric_limits<double>::min())) break;
  }
  if (!settled) {
    // Leave centroids equal to the means of the final assignment.
    update_means(features, model.assignments, model.centroids);
    cost = compute_wcss(features, model.centroids, model.assignments);
    model.wcss_trace.push_back(cost);
  }
  model.wcss = cost;
  return model;
}

Matrix<double> kmeans_plus_plus(const FeatureMatrix& features, int k, std::uint64_t seed) {
  check_k(features, k);
  const std::size_t n = features.rows(), dim = features.cols();
  Rng rng(seed);
  Matrix<double> centers(static_cast<std::size_t>(k), dim);
  auto copy_row = [&](std::size_t src, std::size_t dst) {
    const auto row = features.row(src);
    std::copy(row.begin(), row.end(), centers.row(dst).begin());
  };

  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  copy_row(pick(rng), 0);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = simd::sqdist(features.row(i), centers.row(0));

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t chosen = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double run = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (run > target && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
      while (d2[chosen] == 0.0 && chosen > 0) --chosen;
    } else {
      chosen = pick(rng);
    }
    copy_row(chosen, static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], simd::sqdist(features.row(i), centers.row(static_cast<std::size_t>(c))));
  }
  return centers;
}

ClusterModel kmeans_fit(const FeatureMatrix& features, int k, std::uint64_t seed, const KmeansConfig& cfg) {
  check_k(features, k);
  const int restarts = std::max(1, cfg.restarts);
  ClusterModel best;
  bool have = false;
  for (int r = 0; r < restarts; ++r) {
    const std::uint64_t run_seed = derive_seed(seed, static_cast<std::uint64_t>(r));
    ClusterModel model = lloyd(features, kmeans_plus_plus(features, k, run_seed), cfg);
    if (!have || model.wcss < best.wcss) {
      best = std::move(model);
      have = true;
    }
  }
  best.seed = seed;
  return best;
}

std::vector<CurvePoint> wcss_curve(const FeatureMatrix& features, int k_min, int k_max,
                                   std::uint64_t seed, const KmeansConfig& cfg) {
  if (k_min < 1 || k_max < k_min) throw Error(ErrorCode::invalid_argument, "invalid k range for WCSS curve");
  check_k(features, k_max);
  std::vector<CurvePoint> curve;
  ClusterModel prev;
  for (int k = k_min; k <= k_max; ++k) {
    ClusterModel best = kmeans_fit(features, k, derive_seed(seed, static_cast<std::uint64_t>(k)), cfg);
    if (k > k_min) {
      // Warm start: previous centroids plus the worst-fit point.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < features.rows(); ++i) {
        const double d = simd::sqdist(features.row(i), prev.centroids.row(static_cast<std::size_t>(prev.assignments[i])));
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      Matrix<double> init(static_cast<std::size_t>(k), features.cols());
      for (int j = 0; j < k - 1; ++j) {
        const auto src = prev.centroids.row(static_cast<std::size_t>(j));
        std::copy(src.begin(), src.end(), init.row(static_cast<std::size_t>(j)).begin());
      }
      const auto src = features.row(far);
      std::copy(src.begin(), src.end(), init.row(static_cast<std::size_t>(k - 1)).begin());
      ClusterModel warm = lloyd(features, std::move(init), cfg);
      if (warm.wcss < best.wcss) best = std::move(warm);
    }
    curve.push_back({k, best.wcss});
    prev = std::move(best);
  }
  return curve;
}

int elbow_select(std::span<const CurvePoint> curve) {
  if (curve.size() < 3) throw Error(ErrorCode::invalid_argument, "elbow selection needs at least 3 curve points");
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (curve[i].k <= curve[i - 1].k) throw Error(ErrorCode::invalid_argument, "WCSS curve must be sorted by k");
  int best_k = curve[1].k;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < curve.size(); ++i) {
    const double second = (curve[i - 1].wcss - curve[i].wcss) - (curve[i].wcss - curve[i + 1].wcss);
    if (second > best) {
      best = second;
      best_k = curve[i].k;
    }
  }
  return best_k;
}

BagRepresentation build_bag(const ClusterModel& model, const FeatureMatrix& features, std::string slide_id) {
  if (model.assignments.size() != features.rows() || model.centroids.cols() != features.cols())
    throw Error(ErrorCode::shape_mismatch, "cluster model was not fit on these features");
  const std::size_t k = static_cast<std::size_t>(model.k);
  const std::vector<std::size_t> sizes = model.cluster_sizes();

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sizes[a] != sizes[b]) return sizes[a] > sizes[b];
    const auto ca = model.centroids.row(a), cb = model.centroids.row(b);
    if (std::lexicographical_compare(ca.begin(), ca.end(), cb.begin(), cb.end())) return true;
    if (std::lexicographical_compare(cb.begin(), cb.end(), ca.begin(), ca.end())) return false;
    return a < b;
  });
  std::vector<std::size_t> rank(k);
  for (std::size_t r = 0; r < k; ++r) rank[order[r]] = r;

  BagRepresentation bag;
  bag.slide_id = std::move(slide_id);
  bag.k = model.k;
  bag.dim = static_cast<int>(features.cols());
  bag.means = Matrix<float>(k, features.cols());
  bag.cluster_sizes.resize(k);
  bag.member_map.resize(k);
  bag.seed = model.seed;
  bag.wcss = model.wcss;
  for (std::size_t r = 0; r < k; ++r) {
    const auto src = model.centroids.row(order[r]);
    auto dst = bag.means.row(r);
    for (std::size_t d = 0; d < src.size(); ++d) dst[d] = static_cast<float>(src[d]);
    bag.cluster_sizes[r] = sizes[order[r]];
  }
  for (std::size_t i = 0; i < model.assignments.size(); ++i)
    bag.member_map[rank[static_cast<std::size_t>(model.assignments[i])]].push_back(i);
  return bag;
}

fs::path bag_path(const fs::path& dir, const std::string& slide_id) {
  return dir / (slide_id + ".bag.fvec");
}

namespace {

fs::path bag_sidecar(const fs::path& fvec_path) {
  std::string s = fvec_path.string();
  const std::string suffix = ".bag.fvec";
  if (s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0)
    s.resize(s.size() - suffix.size());
  return s + ".bag.json";
}

}  // namespace

void write_bag(const fs::path& dir, const BagRepresentation& bag) {
  const fs::path path = bag_path(dir, bag.slide_id);
  write_fvec(path, bag.means);
  nlohmann::json j;
  j["slide_id"] = bag.slide_id;
  j["k"] = bag.k;
  j["dim"] = bag.dim;
  j["seed"] = bag.seed;
  j["wcss"] = bag.wcss;
  j["cluster_sizes"] = bag.cluster_sizes;
  j["member_map"] = bag.member_map;
  write_file_atomic(bag_sidecar(path), j.dump(2) + "\n");
}

BagRepresentation read_bag(const fs::path& fvec_path) {
  BagRepresentation bag;
  bag.means = read_fvec(fvec_path);
  const fs::path side = bag_sidecar(fvec_path);
  std::ifstream in(side);
  if (!in) throw Error(ErrorCode::io, "missing bag sidecar " + side.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    bag.slide_id = j.at("slide_id").get<std::string>();
    bag.k = j.at("k").get<int>();
    bag.dim = j.value("dim", static_cast<int>(bag.means.cols()));
    bag.seed = j.at("seed").get<std::uint64_t>();
    bag.wcss = j.at("wcss").get<double>();
    bag.cluster_sizes = j.at("cluster_sizes").get<std::vector<std::size_t>>();
    bag.member_map = j.at("member_map").get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, "malformed bag sidecar " + side.string() + ": " + e.what());
  }
  if (bag.means.rows() != static_cast<std::size_t>(bag.k) || bag.member_map.size() != bag.means.rows() ||
      bag.cluster_sizes.size() != bag.means.rows())
    throw Error(ErrorCode::dim_mismatch, "bag sidecar disagrees with payload: " + side.string());
  return bag;
}

}  // namespace slidevec
