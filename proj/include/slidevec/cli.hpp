#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "slidevec/augmentation.hpp"
#include "slidevec/clustering.hpp"
#include "slidevec/evaluation.hpp"
#include "slidevec/tiling.hpp"
#include "slidevec/train.hpp"

namespace slidevec {

/// Everything one experiment needs. Loaded from a JSON file; command-line
/// flags override individual fields. One master seed derives all others.
struct ExperimentConfig {
  std::filesystem::path slides_dir;
  std::filesystem::path features_dir;
  std::filesystem::path work_dir;

  std::optional<int> k;
  bool elbow = false;
  int elbow_k_min = 2;
  int elbow_k_max = 30;
  std::size_t elbow_max_points = 20000;

  std::uint64_t seed = 0;
  int jobs = 1;
  bool clustering = true;
  std::size_t max_instances = 512;

  SlideTilingConfig tiling;
  KmeansConfig kmeans;
  AugmentConfig augment;
  TrainConfig train;
  SplitSpec split;
};

ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Entry point for the `slidevec` binary. Returns the process exit code:
// 0 ok, 1 usage/IO, 2 data quality, 3 numeric failure.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace slidevec
