#include "slidevec/pipeline.hpp"

#include <algorithm>
#include <numeric>

#include "slidevec/error.hpp"
#include "slidevec/parallel.hpp"
#include "slidevec/rng.hpp"

namespace slidevec {

std::vector<LoadedSlide> load_cohort(const CohortReport& report, int jobs) {
  std::vector<LoadedSlide> slides(report.slides.size());
  parallel_for(report.slides.size(), jobs, [&](std::size_t i) {
    const CohortEntry& entry = report.slides[i];
    auto [features, manifest] = read_features(entry.path);
    slides[i] = LoadedSlide{entry.slide_id, entry.label, std::move(features), std::move(manifest)};
  });
  return slides;
}

std::uint64_t slide_seed(std::uint64_t master, std::string_view purpose, std::string_view slide_id) {
  return derive_seed(derive_seed(master, purpose), slide_id);
}

BagRepresentation bag_for_slide(const LoadedSlide& slide, int k, std::uint64_t master_seed, const KmeansConfig& cfg) {
  const std::uint64_t seed = slide_seed(master_seed, "kmeans", slide.slide_id);
  const ClusterModel model = kmeans_fit(slide.features, k, seed, cfg);
  return build_bag(model, slide.features, slide.slide_id);
}

Matrix<double> raw_instances(const FeatureMatrix& features, std::size_t max_instances, std::uint64_t seed) {
  const std::size_t n = features.rows();
  std::vector<std::size_t> pick(n);
  std::iota(pick.begin(), pick.end(), 0);
  if (max_instances > 0 && n > max_instances) {
    Rng rng(seed);
    // Partial Fisher-Yates, then restore patch order.
    for (std::size_t i = 0; i < max_instances; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, n - 1);
      std::swap(pick[i], pick[d(rng)]);
    }
    pick.resize(max_instances);
    std::sort(pick.begin(), pick.end());
  }
  Matrix<double> out(pick.size(), features.cols());
  for (std::size_t r = 0; r < pick.size(); ++r) {
    const auto src = features.row(pick[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

Matrix<double> mean_pooled(const FeatureMatrix& features) {
  Matrix<double> out(1, features.cols(), 0.0);
  auto acc = out.row(0);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const auto row = features.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) acc[d] += row[d];
  }
  for (double& v : acc) v /= static_cast<double>(features.rows());
  return out;
}

int class_count(const std::vector<LoadedSlide>& slides) {
  int max_label = 1;
  for (const LoadedSlide& s : slides) max_label = std::max(max_label, s.label);
  return max_label + 1;
}

}  // namespace slidevec
