#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "slidevec/augmentation.hpp"
#include "slidevec/clustering.hpp"
#include "slidevec/mil.hpp"
#include "slidevec/train.hpp"

namespace slidevec {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);
  static ConfusionMatrix from_counts(const std::vector<std::vector<std::uint64_t>>& counts);

  void add(int truth, int predicted, std::uint64_t n = 1);
  std::uint64_t at(int truth, int predicted) const;
  std::uint64_t total() const noexcept;
  int classes() const noexcept { return classes_; }

 private:
  int classes_;
  std::vector<std::uint64_t> counts_;
};

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double kappa = 0.0;
  bool kappa_undefined = false;
};

// Binary: precision/recall of class 1. More classes: macro averages.
// A ratio with a zero denominator contributes 0.
Metrics compute_metrics(const ConfusionMatrix& cm);

struct SplitSpec {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;
};

struct CohortSplit {
  std::vector<std::string> train, val, test;
  SplitSpec spec;
};

// Stratified by label and seed-deterministic. Split sizes follow the
// largest-remainder rule both across the cohort and within each class.
CohortSplit split_cohort(const std::map<std::string, int>& labels, const SplitSpec& spec);

void write_splits(const std::filesystem::path& path, const CohortSplit& split);
CohortSplit read_splits(const std::filesystem::path& path);

struct SyntheticCohortSpec {
  int n_slides = 160;
  int patches_per_slide = 200;
  int dim = 32;
  double signal_cluster_fraction = 0.1;
  double shift = 5.0;
  std::uint64_t seed = 0;
  int clusters = 10;
  double center_spread = 4.0;  // std of prototype centres
  double patch_noise = 1.0;    // std of patches around their cluster centre
  double slide_jitter = 0.5;   // std of per-slide centre offsets
};

// Patch features from a mixture of Gaussian clusters shared across the
// cohort. Cluster 0 holds `signal_cluster_fraction` of each slide's
// patches; in positive (label 1) slides its centre moves by `shift` along a
// fixed unit direction. Slides alternate labels 0,1,0,1,...
void generate_synthetic_cohort(const SyntheticCohortSpec& spec, const std::filesystem::path& dir);

struct AblationConfig {
  std::vector<bool> clustering{true, false};
  std::vector<ClassifierKind> classifiers{ClassifierKind::amil, ClassifierKind::mlp};
  int k = kDefaultClusters;
  KmeansConfig kmeans;
  TrainConfig train;
  AugmentConfig augment;
  SplitSpec split;
  std::size_t max_instances = 512;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct AblationRow {
  std::string feature_source;
  bool clustering = true;
  ClassifierKind classifier = ClassifierKind::amil;
  Metrics metrics;
  int best_epoch = 0;
  std::string error;  // non-empty when the row failed
};

// One row per (clustering, classifier) pair. Clustering off feeds raw
// patch features (subsampled to max_instances) to AMIL and the mean patch
// feature to the MLP. A failing row records its error and the grid goes on.
std::vector<AblationRow> run_ablation(const std::filesystem::path& cohort_dir, const AblationConfig& cfg);

// Header: feature_source,clustering,classifier,accuracy,kappa,precision,recall
void write_results_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);
std::string format_results_table(const std::vector<AblationRow>& rows, const SplitSpec& split);

}  // namespace slidevec
