#include "slidevec/tiling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include "slidevec/error.hpp"
#include "slidevec/log.hpp"

namespace slidevec {

namespace fs = std::filesystem;

std::size_t TissueMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

double TissueMask::fraction(int x, int y, int w, int h) const noexcept {
  std::size_t on = 0;
  for (int r = y; r < y + h; ++r) {
    const std::uint8_t* p = bits.data() + static_cast<std::size_t>(r) * width + x;
    on += static_cast<std::size_t>(std::count(p, p + w, std::uint8_t{1}));
  }
  return static_cast<double>(on) / (static_cast<double>(w) * h);
}

int otsu_threshold(std::span<const std::uint64_t, 256> hist) noexcept {
  std::uint64_t total = 0;
  double sum_all = 0.0;
  int first_bin = -1;
  for (int i = 0; i < 256; ++i) {
    total += hist[i];
    sum_all += static_cast<double>(i) * static_cast<double>(hist[i]);
    if (hist[i] && first_bin < 0) first_bin = i;
  }
  if (total == 0) return 0;

  double best = -1.0;
  int lo = -1, hi = -1;
  std::uint64_t w0 = 0;
  double sum0 = 0.0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += static_cast<double>(t) * static_cast<double>(hist[t]);
    const std::uint64_t w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / static_cast<double>(w0);
    const double m1 = (sum_all - sum0) / static_cast<double>(w1);
    const double between = static_cast<double>(w0) * static_cast<double>(w1) * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      lo = hi = t;
    } else if (between == best) {
      hi = t;
    }
  }
  if (lo < 0) return first_bin;  // single occupied bin
  return (lo + hi) / 2;
}

namespace {

// Sliding max (dilate) or min (erode) along rows then columns.
std::vector<std::uint8_t> morph(std::span<const std::uint8_t> bits, int w, int h, int r, bool is_max) {
  std::vector<std::uint8_t> tmp(bits.size());
  std::vector<std::uint8_t> out(bits.size());
  if (r <= 0) return {bits.begin(), bits.end()};
  // Prefix counts make each pass O(w*h) independent of r.
  std::vector<int> prefix(static_cast<std::size_t>(std::max(w, h)) + 1);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* src = bits.data() + static_cast<std::size_t>(y) * w;
    prefix[0] = 0;
    for (int x = 0; x < w; ++x) prefix[x + 1] = prefix[x] + src[x];
    for (int x = 0; x < w; ++x) {
      const int a = std::max(0, x - r), b = std::min(w - 1, x + r);
      const int on = prefix[b + 1] - prefix[a];
      tmp[static_cast<std::size_t>(y) * w + x] = is_max ? (on > 0) : (on == b - a + 1);
    }
  }
  for (int x = 0; x < w; ++x) {
    prefix[0] = 0;
    for (int y = 0; y < h; ++y) prefix[y + 1] = prefix[y] + tmp[static_cast<std::size_t>(y) * w + x];
    for (int y = 0; y < h; ++y) {
      const int a = std::max(0, y - r), b = std::min(h - 1, y + r);
      const int on = prefix[b + 1] - prefix[a];
      out[static_cast<std::size_t>(y) * w + x] = is_max ? (on > 0) : (on == b - a + 1);
    }
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> dilate(std::span<const std::uint8_t> bits, int w, int h, int r) {
  return morph(bits, w, h, r, true);
}

std::vector<std::uint8_t> erode(std::span<const std::uint8_t> bits, int w, int h, int r) {
  return morph(bits, w, h, r, false);
}

std::vector<std::uint8_t> open(std::span<const std::uint8_t> bits, int w, int h, int r) {
  return dilate(erode(bits, w, h, r), w, h, r);
}

std::vector<std::uint8_t> close(std::span<const std::uint8_t> bits, int w, int h, int r) {
  return erode(dilate(bits, w, h, r), w, h, r);
}

std::vector<std::size_t> component_areas(std::span<const std::uint8_t> bits, int w, int h) {
  std::vector<std::uint8_t> seen(bits.size(), 0);
  std::vector<std::size_t> areas;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < bits.size(); ++start) {
    if (!bits[start] || seen[start]) continue;
    std::size_t area = 0;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++area;
      const int px = static_cast<int>(p % w), py = static_cast<int>(p / w);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = px + dx, ny = py + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * w + nx;
          if (bits[q] && !seen[q]) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
      }
    }
    areas.push_back(area);
  }
  return areas;
}

TissueMask detect_tissue(const RgbImage& raster, const TissueConfig& cfg) {
  if (!raster.valid()) throw Error(ErrorCode::invalid_argument, "invalid raster");
  TissueMask mask;
  mask.width = raster.width;
  mask.height = raster.height;
  const std::size_t n = static_cast<std::size_t>(raster.width) * raster.height;
  mask.bits.assign(n, 0);

  const std::uint8_t* px = raster.pixels.data();
  const bool uniform = std::all_of(px, px + n * 3, [&, i = std::size_t{0}](std::uint8_t v) mutable {
    return v == px[i++ % 3];
  });
  if (uniform) {
    mask.degenerate = true;
    log::warn("tissue detection: raster is a single colour, mask left empty");
    return mask;
  }

  std::vector<std::uint8_t> sat(n);
  std::array<std::uint64_t, 256> hist{};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = px + i * 3;
    const int mx = std::max({p[0], p[1], p[2]});
    const int mn = std::min({p[0], p[1], p[2]});
    const int s = mx == 0 ? 0 : static_cast<int>(std::lround(255.0 * (mx - mn) / mx));
    sat[i] = static_cast<std::uint8_t>(s);
    ++hist[s];
  }
  const int t = otsu_threshold(hist);
  for (std::size_t i = 0; i < n; ++i) mask.bits[i] = sat[i] > t;
  mask.bits = close(mask.bits, mask.width, mask.height, cfg.morph_radius);
  mask.bits = open(mask.bits, mask.width, mask.height, cfg.morph_radius);
  return mask;
}

std::vector<PatchRecord> tile_slide(const RgbImage& raster, const TissueMask& mask) {
  if (mask.width != raster.width || mask.height != raster.height)
    throw Error(ErrorCode::shape_mismatch, "tissue mask does not match raster dimensions");
  std::vector<PatchRecord> records;
  if (raster.width < kPatchSize || raster.height < kPatchSize) {
    log::info("raster " + std::to_string(raster.width) + "x" + std::to_string(raster.height) +
              " is smaller than one patch; no tiles produced");
    return records;
  }
  const int rows = raster.height / kPatchSize;
  const int cols = raster.width / kPatchSize;
  records.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      PatchRecord rec;
      rec.row = r;
      rec.col = c;
      rec.x = c * kPatchSize;
      rec.y = r * kPatchSize;
      rec.tissue_fraction = mask.fraction(rec.x, rec.y, kPatchSize, kPatchSize);
      records.push_back(rec);
    }
  }
  return records;
}

int count_nuclei(const RgbImage& patch, const NucleiConfig& cfg) {
  if (patch.width != kPatchSize || patch.height != kPatchSize)
    throw Error(ErrorCode::invalid_argument, "nucleus counting expects a 512x512 patch");
  const double norm = std::hypot(cfg.hematoxylin[0], cfg.hematoxylin[1], cfg.hematoxylin[2]);
  const double hx = cfg.hematoxylin[0] / norm, hy = cfg.hematoxylin[1] / norm,
               hz = cfg.hematoxylin[2] / norm;

  // Optical density per 8-bit level.
  std::array<double, 256> od{};
  for (int i = 0; i < 256; ++i) od[i] = -std::log10(std::max(i, 1) / 255.0);

  const std::size_t n = patch.pixels.size() / 3;
  std::vector<double> density(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = patch.pixels.data() + i * 3;
    density[i] = od[p[0]] * hx + od[p[1]] * hy + od[p[2]] * hz;
    peak = std::max(peak, density[i]);
  }
  if (peak <= 0.0) return 0;

  std::vector<std::uint8_t> level(n);
  std::array<std::uint64_t, 256> hist{};
  for (std::size_t i = 0; i < n; ++i) {
    level[i] = static_cast<std::uint8_t>(std::lround(255.0 * density[i] / peak));
    ++hist[level[i]];
  }
  const int t = otsu_threshold(hist);
  std::vector<std::uint8_t> bits(n);
  for (std::size_t i = 0; i < n; ++i) bits[i] = level[i] > t;
  bits = open(bits, patch.width, patch.height, cfg.open_radius);

  int count = 0;
  for (std::size_t area : component_areas(bits, patch.width, patch.height)) {
    if (area >= static_cast<std::size_t>(cfg.min_area) && area <= static_cast<std::size_t>(cfg.max_area))
      ++count;
  }
  return count;
}

std::vector<PatchRecord> filter_patches(std::vector<PatchRecord>& records, const PatchFilter& filter) {
  std::vector<PatchRecord> kept;
  for (PatchRecord& rec : records) {
    rec.kept = rec.nucleus_count >= filter.nuclei_min && rec.tissue_fraction >= filter.tissue_min;
    if (rec.kept) kept.push_back(rec);
  }
  if (kept.empty())
    throw Error(ErrorCode::empty_slide,
                "no patch passed the nucleus/tissue filter; slide cannot produce a bag");
  return kept;
}

namespace {

void mark_kept(std::vector<PatchRecord>& records, const PatchFilter& filter) {
  for (PatchRecord& rec : records)
    rec.kept = rec.nucleus_count >= filter.nuclei_min && rec.tissue_fraction >= filter.tissue_min;
}

}  // namespace

std::vector<PatchRecord> process_slide(const RgbImage& raster, const SlideTilingConfig& cfg) {
  const TissueMask mask = detect_tissue(raster, cfg.tissue);
  std::vector<PatchRecord> records = tile_slide(raster, mask);
  for (PatchRecord& rec : records) {
    if (rec.tissue_fraction < cfg.filter.tissue_min) continue;
    rec.nucleus_count = count_nuclei(crop(raster, rec.x, rec.y, kPatchSize, kPatchSize), cfg.nuclei);
  }
  mark_kept(records, cfg.filter);
  return records;
}

std::vector<PatchRecord> process_tile_directory(const fs::path& dir, const SlideTilingConfig& cfg) {
  static const std::regex kTileName(R"(r(\d+)_c(\d+)\.png)");
  std::vector<std::pair<PatchRecord, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!entry.is_regular_file() || !std::regex_match(name, m, kTileName)) continue;
    PatchRecord rec;
    rec.row = std::stoi(m[1].str());
    rec.col = std::stoi(m[2].str());
    rec.x = rec.col * kPatchSize;
    rec.y = rec.row * kPatchSize;
    found.emplace_back(rec, entry.path());
  }
  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.row, a.first.col) < std::tie(b.first.row, b.first.col);
  });

  std::vector<PatchRecord> records;
  for (auto& [rec, path] : found) {
    const RgbImage tile = load_png(path);
    if (tile.width != kPatchSize || tile.height != kPatchSize) {
      log::warn("skipping " + path.string() + ": tile is not 512x512");
      continue;
    }
    const TissueMask mask = detect_tissue(tile, cfg.tissue);
    rec.tissue_fraction = mask.fraction(0, 0, kPatchSize, kPatchSize);
    if (rec.tissue_fraction >= cfg.filter.tissue_min) rec.nucleus_count = count_nuclei(tile, cfg.nuclei);
    records.push_back(rec);
  }
  mark_kept(records, cfg.filter);
  return records;
}

void write_patch_manifest(const fs::path& path, const std::string& slide_id,
                          std::span<const PatchRecord> records) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << "slide_id,row,col,x,y,tissue_fraction,nucleus_count,kept\n";
    char frac[32];
    for (const PatchRecord& r : records) {
      std::snprintf(frac, sizeof frac, "%.6f", r.tissue_fraction);
      out << slide_id << ',' << r.row << ',' << r.col << ',' << r.x << ',' << r.y << ',' << frac
          << ',' << r.nucleus_count << ',' << (r.kept ? 1 : 0) << '\n';
    }
    if (!out) throw Error(ErrorCode::io, "short write " + path.string());
  }
  fs::rename(tmp, path);
}

std::vector<PatchRecord> read_patch_manifest(const fs::path& path, std::string* slide_id) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open patch manifest " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "slide_id,row,col,x,y,tissue_fraction,nucleus_count,kept")
    throw Error(ErrorCode::bad_magic, "unexpected patch manifest header in " + path.string());
  std::vector<PatchRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> cells;
    while (std::getline(ss, field, ',')) cells.push_back(field);
    if (cells.size() != 8) throw Error(ErrorCode::io, "malformed manifest row in " + path.string());
    if (slide_id) *slide_id = cells[0];
    PatchRecord r;
    r.row = std::stoi(cells[1]);
    r.col = std::stoi(cells[2]);
    r.x = std::stoi(cells[3]);
    r.y = std::stoi(cells[4]);
    r.tissue_fraction = std::stod(cells[5]);
    r.nucleus_count = std::stoi(cells[6]);
    r.kept = cells[7] == "1";
    records.push_back(r);
  }
  return records;
}

}  // namespace slidevec
