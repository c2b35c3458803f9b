#include "slidevec/feature_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "slidevec/error.hpp"
#include "slidevec/log.hpp"

namespace slidevec {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::vector<std::uint8_t> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_finite(const Matrix<float>& m, const std::string& what) {
  for (float v : m.values())
    if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, what + " contains a non-finite value");
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::io, "short write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, "cannot rename into " + path.string() + ": " + ec.message());
}

std::vector<std::uint8_t> encode_fvec(const Matrix<float>& m) {
  check_finite(m, "feature matrix");
  std::vector<std::uint8_t> out;
  out.reserve(kFvecHeaderBytes + m.size() * 4);
  out.insert(out.end(), std::begin(kFvecMagic), std::end(kFvecMagic));
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (float v : m.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Matrix<float> decode_fvec(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                          std::size_t* consumed) {
  if (bytes.size() < offset + kFvecHeaderBytes)
    throw Error(ErrorCode::truncated, "FVEC1 header truncated");
  const std::uint8_t* p = bytes.data() + offset;
  if (std::memcmp(p, kFvecMagic, sizeof kFvecMagic) != 0)
    throw Error(ErrorCode::bad_magic, "missing FVEC1 magic");
  const std::uint32_t rows = get_u32(p + 5);
  const std::uint32_t cols = get_u32(p + 9);
  const std::size_t payload = static_cast<std::size_t>(rows) * cols * 4;
  if (bytes.size() - offset - kFvecHeaderBytes < payload)
    throw Error(ErrorCode::truncated, "FVEC1 payload truncated: expected " + std::to_string(payload) +
                                          " bytes, found " +
                                          std::to_string(bytes.size() - offset - kFvecHeaderBytes));
  std::vector<float> data(static_cast<std::size_t>(rows) * cols);
  const std::uint8_t* q = p + kFvecHeaderBytes;
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(get_u32(q + 4 * i));
  if (consumed) *consumed = kFvecHeaderBytes + payload;
  Matrix<float> m(rows, cols, std::move(data));
  check_finite(m, "FVEC1 payload");
  return m;
}

void write_fvec(const fs::path& path, const Matrix<float>& m) {
  const std::vector<std::uint8_t> bytes = encode_fvec(m);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Matrix<float> read_fvec(const fs::path& path) {
  try {
    return decode_fvec(slurp(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

fs::path manifest_path_for(const fs::path& fvec_path) {
  fs::path p = fvec_path;
  p.replace_extension(".manifest.json");
  return p;
}

namespace {

json manifest_to_json(const SlideManifest& m) {
  json keys = json::array();
  for (const PatchKey& k : m.patch_keys) keys.push_back({k.row, k.col});
  json j;
  j["slide_id"] = m.slide_id;
  j["label"] = m.label ? json(*m.label) : json(nullptr);
  j["encoder_name"] = m.encoder_name;
  j["dim"] = m.dim;
  j["patch_keys"] = std::move(keys);
  return j;
}

SlideManifest manifest_from_json(const json& j) {
  SlideManifest m;
  m.slide_id = j.at("slide_id").get<std::string>();
  if (j.contains("label") && !j["label"].is_null()) m.label = j["label"].get<int>();
  m.encoder_name = j.value("encoder_name", std::string{});
  m.dim = j.at("dim").get<int>();
  for (const json& k : j.at("patch_keys")) m.patch_keys.push_back({k.at(0).get<int>(), k.at(1).get<int>()});
  return m;
}

}  // namespace

void write_features(const FeatureMatrix& matrix, const SlideManifest& manifest, const fs::path& path) {
  if (matrix.rows() < 1 || matrix.cols() < 1)
    throw Error(ErrorCode::invalid_argument, "feature matrix must have at least one row and column");
  if (manifest.patch_keys.size() != matrix.rows())
    throw Error(ErrorCode::dim_mismatch, "manifest patch_keys count does not match matrix rows");
  if (manifest.dim != static_cast<int>(matrix.cols()))
    throw Error(ErrorCode::dim_mismatch, "manifest dim does not match matrix columns");
  // Encoding validates finiteness before either file is written.
  const std::vector<std::uint8_t> bytes = encode_fvec(matrix);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
  write_file_atomic(manifest_path_for(path), manifest_to_json(manifest).dump(2) + "\n");
}

std::pair<FeatureMatrix, SlideManifest> read_features(const fs::path& path) {
  FeatureMatrix matrix = read_fvec(path);
  const fs::path mpath = manifest_path_for(path);
  std::ifstream in(mpath);
  if (!in) throw Error(ErrorCode::io, "missing manifest " + mpath.string());
  SlideManifest manifest;
  try {
    manifest = manifest_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, "malformed manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.dim != static_cast<int>(matrix.cols()))
    throw Error(ErrorCode::dim_mismatch, path.string() + ": manifest dim " + std::to_string(manifest.dim) +
                                             " but payload has " + std::to_string(matrix.cols()));
  if (manifest.patch_keys.size() != matrix.rows())
    throw Error(ErrorCode::dim_mismatch, path.string() + ": manifest lists " +
                                             std::to_string(manifest.patch_keys.size()) +
                                             " patches but payload has " + std::to_string(matrix.rows()));
  if (matrix.rows() < 1 || matrix.cols() < 1)
    throw Error(ErrorCode::invalid_argument, path.string() + ": empty feature matrix");
  return {std::move(matrix), std::move(manifest)};
}

std::map<std::string, int> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "slide_id,label") throw Error(ErrorCode::io, "unexpected labels header in " + path.string());
  std::map<std::string, int> labels;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw Error(ErrorCode::io, "malformed labels row: " + line);
    labels[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
  }
  return labels;
}

void write_labels(const fs::path& path, const std::map<std::string, int>& labels) {
  std::ostringstream out;
  out << "slide_id,label\n";
  for (const auto& [id, label] : labels) out << id << ',' << label << '\n';
  write_file_atomic(path, out.str());
}

namespace {

bool is_feature_file(const fs::path& p) {
  const std::string name = p.filename().string();
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".fvec") && !ends_with(".bag.fvec");
}

}  // namespace

CohortReport validate_cohort(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::io, "not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_feature_file(entry.path())) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::empty_cohort, "no feature files in " + dir.string());

  std::map<std::string, int> csv_labels;
  const fs::path labels_path = dir / "labels.csv";
  if (fs::exists(labels_path)) csv_labels = read_labels(labels_path);

  CohortReport report;
  for (const fs::path& file : files) {
    auto [matrix, manifest] = read_features(file);
    if (report.slides.empty()) {
      report.dim = static_cast<int>(matrix.cols());
      report.encoder_name = manifest.encoder_name;
    } else if (report.dim != static_cast<int>(matrix.cols())) {
      throw Error(ErrorCode::mixed_dims, "feature dims differ across slides: " + std::to_string(report.dim) +
                                             " vs " + std::to_string(matrix.cols()) + " (" +
                                             file.filename().string() + ")");
    }
    std::optional<int> label = manifest.label;
    if (auto it = csv_labels.find(manifest.slide_id); it != csv_labels.end()) {
      if (label && *label != it->second) {
        const std::string msg = "label for " + manifest.slide_id + " differs between manifest (" +
                                std::to_string(*label) + ") and labels.csv (" + std::to_string(it->second) +
                                "); using labels.csv";
        log::warn(msg);
        report.warnings.push_back(msg);
      }
      label = it->second;
    }
    if (!label) throw Error(ErrorCode::missing_label, "no label for slide " + manifest.slide_id);
    if (*label < 0) throw Error(ErrorCode::missing_label, "negative label for slide " + manifest.slide_id);
    report.slides.push_back({manifest.slide_id, *label, matrix.rows(), file});
    ++report.class_counts[*label];
  }
  std::sort(report.slides.begin(), report.slides.end(),
            [](const CohortEntry& a, const CohortEntry& b) { return a.slide_id < b.slide_id; });
  report.slide_count = report.slides.size();
  return report;
}

}  // namespace slidevec
