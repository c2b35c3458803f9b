#pragma once

// FVEC1 feature interchange: "FVEC1", u32-LE rows, u32-LE cols, then
// rows*cols IEEE-754 binary32 little-endian values. Each per-slide feature
// file `<name>.fvec` has a JSON sidecar `<name>.manifest.json`.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "slidevec/matrix.hpp"

namespace slidevec {

using FeatureMatrix = Matrix<float>;

inline constexpr char kFvecMagic[5] = {'F', 'V', 'E', 'C', '1'};
inline constexpr std::size_t kFvecHeaderBytes = 13;

struct PatchKey {
  int row = 0;
  int col = 0;
  friend bool operator==(const PatchKey&, const PatchKey&) = default;
};

struct SlideManifest {
  std::string slide_id;
  std::optional<int> label;
  std::string encoder_name;
  int dim = 0;
  std::vector<PatchKey> patch_keys;

  friend bool operator==(const SlideManifest&, const SlideManifest&) = default;
};

// Raw FVEC1 payloads. Writes go through a temp file and rename; a matrix
// with non-finite values is rejected before anything touches disk.
void write_fvec(const std::filesystem::path& path, const Matrix<float>& m);
Matrix<float> read_fvec(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_fvec(const Matrix<float>& m);
Matrix<float> decode_fvec(const std::vector<std::uint8_t>& bytes, std::size_t offset = 0,
                          std::size_t* consumed = nullptr);

std::filesystem::path manifest_path_for(const std::filesystem::path& fvec_path);

void write_features(const FeatureMatrix& matrix, const SlideManifest& manifest,
                    const std::filesystem::path& path);
std::pair<FeatureMatrix, SlideManifest> read_features(const std::filesystem::path& path);

// labels.csv: header `slide_id,label`
std::map<std::string, int> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const std::map<std::string, int>& labels);

struct CohortEntry {
  std::string slide_id;
  int label = 0;
  std::size_t n_patches = 0;
  std::filesystem::path path;
};

struct CohortReport {
  std::size_t slide_count = 0;
  int dim = 0;
  std::string encoder_name;
  std::map<int, std::size_t> class_counts;
  std::vector<CohortEntry> slides;  // sorted by slide_id
  std::vector<std::string> warnings;
};

// Scans `dir` for feature files (bag files excluded). labels.csv in `dir`
// overrides manifest labels, with a warning on conflict.
CohortReport validate_cohort(const std::filesystem::path& dir);

// Atomic whole-file write helper shared by the other writers.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace slidevec
