#pragma once

// Tissue detection, grid tiling and nucleus counting for slide rasters.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slidevec/image.hpp"

namespace slidevec {

inline constexpr int kPatchSize = 512;

struct TissueConfig {
  int morph_radius = 2;
};

struct NucleiConfig {
  int open_radius = 1;
  int min_area = 40;
  int max_area = 4000;
  // Hematoxylin optical-density direction (Ruifrok & Johnston); normalized on use.
  std::array<double, 3> hematoxylin{0.650, 0.704, 0.286};
};

struct PatchFilter {
  int nuclei_min = 10;
  double tissue_min = 0.5;
};

struct TissueMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  // 1 = tissue
  bool degenerate = false;         // source raster had a single colour

  bool at(int x, int y) const noexcept {
    return bits[static_cast<std::size_t>(y) * width + x] != 0;
  }
  std::size_t count() const noexcept;
  double fraction(int x, int y, int w, int h) const noexcept;
};

struct PatchRecord {
  int row = 0;
  int col = 0;
  int x = 0;
  int y = 0;
  double tissue_fraction = 0.0;
  int nucleus_count = 0;
  bool kept = false;

  friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

// Otsu threshold over a 256-bin histogram. Values <= t are background.
// The midpoint of the maximizing plateau is returned; a histogram with a
// single occupied bin returns that bin.
int otsu_threshold(std::span<const std::uint64_t, 256> hist) noexcept;

// Binary morphology with a (2r+1)^2 square element. Pixels outside the
// image do not participate.
std::vector<std::uint8_t> dilate(std::span<const std::uint8_t> bits, int w, int h, int r);
std::vector<std::uint8_t> erode(std::span<const std::uint8_t> bits, int w, int h, int r);
std::vector<std::uint8_t> open(std::span<const std::uint8_t> bits, int w, int h, int r);
std::vector<std::uint8_t> close(std::span<const std::uint8_t> bits, int w, int h, int r);

// Areas of 8-connected foreground components in scan order of their first pixel.
std::vector<std::size_t> component_areas(std::span<const std::uint8_t> bits, int w, int h);

// HSV saturation > Otsu threshold, then closing followed by opening.
TissueMask detect_tissue(const RgbImage& raster, const TissueConfig& cfg = {});

// One record per complete non-overlapping kPatchSize window anchored at (0,0).
std::vector<PatchRecord> tile_slide(const RgbImage& raster, const TissueMask& mask);

// Connected components of the Otsu-binarized hematoxylin density map.
int count_nuclei(const RgbImage& patch, const NucleiConfig& cfg = {});

// Marks `kept` on every record and returns the kept subset in input order.
// Throws Error(empty_slide) when nothing survives.
std::vector<PatchRecord> filter_patches(std::vector<PatchRecord>& records,
                                        const PatchFilter& filter = {});

struct SlideTilingConfig {
  TissueConfig tissue;
  NucleiConfig nuclei;
  PatchFilter filter;
};

// detect_tissue + tile_slide + count_nuclei on windows that pass the
// tissue cutoff, with `kept` populated. Never throws on an empty result.
std::vector<PatchRecord> process_slide(const RgbImage& raster, const SlideTilingConfig& cfg);

// Same, for a slide stored as pre-extracted `r{row}_c{col}.png` tiles.
std::vector<PatchRecord> process_tile_directory(const std::filesystem::path& dir,
                                                const SlideTilingConfig& cfg);

// Patch manifest CSV: slide_id,row,col,x,y,tissue_fraction,nucleus_count,kept
void write_patch_manifest(const std::filesystem::path& path, const std::string& slide_id,
                          std::span<const PatchRecord> records);
std::vector<PatchRecord> read_patch_manifest(const std::filesystem::path& path,
                                             std::string* slide_id = nullptr);

}  // namespace slidevec
