#pragma once

// Cohort-level glue shared by the CLI and the ablation harness.

#include <cstdint>
#include <string>
#include <vector>

#include "slidevec/clustering.hpp"
#include "slidevec/feature_store.hpp"
#include "slidevec/train.hpp"

namespace slidevec {

struct LoadedSlide {
  std::string slide_id;
  int label = 0;
  FeatureMatrix features;
  SlideManifest manifest;
};

// Reads every slide listed in the report, with labels already resolved.
std::vector<LoadedSlide> load_cohort(const CohortReport& report, int jobs = 1);

std::uint64_t slide_seed(std::uint64_t master, std::string_view purpose, std::string_view slide_id);

BagRepresentation bag_for_slide(const LoadedSlide& slide, int k, std::uint64_t master_seed,
                                const KmeansConfig& cfg);

// Seeded subsample of at most `max_instances` rows, original order kept.
Matrix<double> raw_instances(const FeatureMatrix& features, std::size_t max_instances, std::uint64_t seed);

Matrix<double> mean_pooled(const FeatureMatrix& features);

int class_count(const std::vector<LoadedSlide>& slides);

}  // namespace slidevec
