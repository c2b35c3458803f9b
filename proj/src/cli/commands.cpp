#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "slidevec/cli.hpp"
#include "slidevec/error.hpp"
#include "slidevec/feature_store.hpp"
#include "slidevec/image.hpp"
#include "slidevec/log.hpp"
#include "slidevec/parallel.hpp"
#include "slidevec/pipeline.hpp"
#include "slidevec/rng.hpp"
#include "slidevec/simd/kernels.hpp"

namespace slidevec {

namespace fs = std::filesystem;
using nlohmann::json;

// --------------------------------------------------------------- config

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, "malformed config " + path.string() + ": " + e.what());
  }
  ExperimentConfig c;
  try {
    if (j.contains("slides_dir")) c.slides_dir = j["slides_dir"].get<std::string>();
    if (j.contains("features_dir")) c.features_dir = j["features_dir"].get<std::string>();
    if (j.contains("work_dir")) c.work_dir = j["work_dir"].get<std::string>();
    if (j.contains("k")) {
      if (j["k"].is_string()) {
        if (j["k"].get<std::string>() != "elbow")
          throw Error(ErrorCode::invalid_argument, "config k must be an integer or \"elbow\"");
        c.elbow = true;
      } else {
        c.k = j["k"].get<int>();
      }
    }
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
    c.clustering = j.value("clustering", c.clustering);
    c.max_instances = j.value("max_instances", c.max_instances);
    if (j.contains("tissue")) c.tiling.tissue.morph_radius = j["tissue"].value("morph_radius", c.tiling.tissue.morph_radius);
    if (j.contains("nuclei")) {
      const json& n = j["nuclei"];
      c.tiling.nuclei.open_radius = n.value("open_radius", c.tiling.nuclei.open_radius);
      c.tiling.nuclei.min_area = n.value("min_area", c.tiling.nuclei.min_area);
      c.tiling.nuclei.max_area = n.value("max_area", c.tiling.nuclei.max_area);
      c.tiling.filter.nuclei_min = n.value("nuclei_min", c.tiling.filter.nuclei_min);
      c.tiling.filter.tissue_min = n.value("tissue_min", c.tiling.filter.tissue_min);
    }
    if (j.contains("kmeans")) {
      const json& k = j["kmeans"];
      c.kmeans.max_iters = k.value("max_iters", c.kmeans.max_iters);
      c.kmeans.tol = k.value("tol", c.kmeans.tol);
      c.kmeans.restarts = k.value("restarts", c.kmeans.restarts);
      c.elbow_k_min = k.value("elbow_k_min", c.elbow_k_min);
      c.elbow_k_max = k.value("elbow_k_max", c.elbow_k_max);
      c.elbow_max_points = k.value("elbow_max_points", c.elbow_max_points);
    }
    if (j.contains("augment")) c.augment = j["augment"].get<AugmentConfig>();
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    if (j.contains("split")) {
      const json& s = j["split"];
      c.split.train = s.value("train", c.split.train);
      c.split.val = s.value("val", c.split.val);
      c.split.test = s.value("test", c.split.test);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_argument, "bad value in config " + path.string() + ": " + e.what());
  }
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["slides_dir"] = c.slides_dir.string();
  j["features_dir"] = c.features_dir.string();
  j["work_dir"] = c.work_dir.string();
  if (c.elbow && !c.k)
    j["k"] = "elbow";
  else
    j["k"] = c.k.value_or(kDefaultClusters);
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["clustering"] = c.clustering;
  j["max_instances"] = c.max_instances;
  j["tissue"] = {{"morph_radius", c.tiling.tissue.morph_radius}};
  j["nuclei"] = {{"open_radius", c.tiling.nuclei.open_radius},
                 {"min_area", c.tiling.nuclei.min_area},
                 {"max_area", c.tiling.nuclei.max_area},
                 {"nuclei_min", c.tiling.filter.nuclei_min},
                 {"tissue_min", c.tiling.filter.tissue_min}};
  j["kmeans"] = {{"max_iters", c.kmeans.max_iters}, {"tol", c.kmeans.tol},          {"restarts", c.kmeans.restarts},
                 {"elbow_k_min", c.elbow_k_min},    {"elbow_k_max", c.elbow_k_max}, {"elbow_max_points", c.elbow_max_points}};
  j["augment"] = c.augment;
  j["train"] = c.train;
  j["split"] = {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}};
  return j;
}

namespace {

// ------------------------------------------------------------ helpers

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string work_dir;
};

void require_dir(const fs::path& p, const char* what) {
  if (p.empty()) throw Error(ErrorCode::invalid_argument, std::string("no ") + what + " given");
  if (!fs::is_directory(p)) throw Error(ErrorCode::io, std::string(what) + " does not exist: " + p.string());
}

void require_file(const fs::path& p, const char* what) {
  if (p.empty()) throw Error(ErrorCode::invalid_argument, std::string("no ") + what + " given");
  if (!fs::is_regular_file(p)) throw Error(ErrorCode::io, std::string(what) + " does not exist: " + p.string());
}

ExperimentConfig resolve(const CommonFlags& flags) {
  ExperimentConfig cfg = flags.config.empty() ? ExperimentConfig{} : load_config(flags.config);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.jobs) cfg.jobs = *flags.jobs;
  if (!flags.work_dir.empty()) cfg.work_dir = flags.work_dir;
  if (cfg.work_dir.empty()) {
    if (const char* env = std::getenv("SLIDEVEC_WORKDIR")) cfg.work_dir = env;
  }
  cfg.jobs = std::max(1, cfg.jobs);
  return cfg;
}

fs::path ensure_work_dir(const ExperimentConfig& cfg) {
  if (cfg.work_dir.empty())
    throw Error(ErrorCode::invalid_argument, "no work directory: pass --work-dir, set work_dir, or SLIDEVEC_WORKDIR");
  fs::create_directories(cfg.work_dir);
  return cfg.work_dir;
}

std::mutex g_out_mutex;

void progress(const std::string& line) {
  std::lock_guard lock(g_out_mutex);
  std::cout << line << '\n';
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Inputs the classifier sees for each slide.
enum class InputKind { bags, raw, mean };

std::string to_string(InputKind kind) {
  switch (kind) {
    case InputKind::bags: return "bags";
    case InputKind::raw: return "raw";
    case InputKind::mean: return "mean";
  }
  return "bags";
}

InputKind input_from_string(const std::string& s) {
  if (s == "raw") return InputKind::raw;
  if (s == "mean") return InputKind::mean;
  return InputKind::bags;
}

InputKind input_for(bool clustering, ClassifierKind kind) {
  if (clustering) return InputKind::bags;
  return kind == ClassifierKind::amil ? InputKind::raw : InputKind::mean;
}

struct Cohort {
  CohortReport report;
  std::vector<LoadedSlide> slides;
  std::map<std::string, std::size_t> index;
  int classes = 2;
};

Cohort open_cohort(const ExperimentConfig& cfg) {
  require_dir(cfg.features_dir, "features directory");
  Cohort c;
  c.report = validate_cohort(cfg.features_dir);
  c.slides = load_cohort(c.report, cfg.jobs);
  c.classes = class_count(c.slides);
  for (std::size_t i = 0; i < c.slides.size(); ++i) c.index[c.slides[i].slide_id] = i;
  return c;
}

std::vector<LabeledBag> build_inputs(const Cohort& cohort, const ExperimentConfig& cfg, InputKind kind,
                                     const std::vector<std::string>& ids) {
  std::vector<LabeledBag> out(ids.size());
  const fs::path bag_dir = cfg.work_dir / "bags";
  parallel_for(ids.size(), cfg.jobs, [&](std::size_t i) {
    const auto it = cohort.index.find(ids[i]);
    if (it == cohort.index.end())
      throw Error(ErrorCode::missing_label, "split lists unknown slide " + ids[i]);
    const LoadedSlide& s = cohort.slides[it->second];
    Matrix<double> input;
    switch (kind) {
      case InputKind::bags: {
        const fs::path p = bag_path(bag_dir, s.slide_id);
        if (!fs::exists(p)) throw Error(ErrorCode::io, "missing bag " + p.string() + " (run `slidevec cluster` first)");
        input = read_bag(p).means.cast<double>();
        break;
      }
      case InputKind::raw:
        input = raw_instances(s.features, cfg.max_instances, slide_seed(cfg.seed, "subsample", s.slide_id));
        break;
      case InputKind::mean:
        input = mean_pooled(s.features);
        break;
    }
    out[i] = LabeledBag{s.slide_id, std::move(input), s.label};
  });
  return out;
}

CohortSplit load_or_create_split(const Cohort& cohort, const ExperimentConfig& cfg) {
  const fs::path path = cfg.work_dir / "splits.json";
  if (fs::exists(path)) return read_splits(path);
  std::map<std::string, int> labels;
  for (const LoadedSlide& s : cohort.slides) labels[s.slide_id] = s.label;
  SplitSpec spec = cfg.split;
  spec.seed = derive_seed(cfg.seed, "split");
  CohortSplit split = split_cohort(labels, spec);
  write_splits(path, split);
  return split;
}

// -------------------------------------------------------------- tile

struct TileOptions {
  std::string slides_dir;
  std::optional<int> nuclei_min;
  std::optional<double> tissue_min;
  bool dump_patches = false;
};

int cmd_tile(const CommonFlags& flags, const TileOptions& opt) {
  ExperimentConfig cfg = resolve(flags);
  if (!opt.slides_dir.empty()) cfg.slides_dir = opt.slides_dir;
  if (opt.nuclei_min) cfg.tiling.filter.nuclei_min = *opt.nuclei_min;
  if (opt.tissue_min) cfg.tiling.filter.tissue_min = *opt.tissue_min;
  require_dir(cfg.slides_dir, "slides directory");
  const fs::path work = ensure_work_dir(cfg);
  fs::create_directories(work / "manifests");

  struct Input {
    std::string slide_id;
    fs::path path;
    bool tile_dir;
  };
  std::vector<Input> inputs;
  for (const auto& entry : fs::directory_iterator(cfg.slides_dir)) {
    const fs::path& p = entry.path();
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (entry.is_directory())
      inputs.push_back({p.filename().string(), p, true});
    else if (entry.is_regular_file() && (ext == ".png" || ext == ".ppm"))
      inputs.push_back({p.stem().string(), p, false});
  }
  std::sort(inputs.begin(), inputs.end(), [](const Input& a, const Input& b) { return a.slide_id < b.slide_id; });
  if (inputs.empty()) throw Error(ErrorCode::io, "no slide rasters or tile directories in " + cfg.slides_dir.string());

  std::vector<int> status(inputs.size(), 0);
  parallel_for(inputs.size(), cfg.jobs, [&](std::size_t i) {
    const Input& in = inputs[i];
    std::vector<PatchRecord> records;
    RgbImage raster;
    if (in.tile_dir) {
      records = process_tile_directory(in.path, cfg.tiling);
    } else {
      raster = load_raster(in.path);
      records = process_slide(raster, cfg.tiling);
    }
    write_patch_manifest(work / "manifests" / (in.slide_id + ".patches.csv"), in.slide_id, records);
    const auto kept = std::count_if(records.begin(), records.end(), [](const PatchRecord& r) { return r.kept; });
    if (opt.dump_patches && !in.tile_dir && kept > 0) {
      const fs::path dir = work / "patches" / in.slide_id;
      fs::create_directories(dir);
      for (const PatchRecord& r : records) {
        if (!r.kept) continue;
        save_png(dir / ("r" + std::to_string(r.row) + "_c" + std::to_string(r.col) + ".png"),
                 crop(raster, r.x, r.y, kPatchSize, kPatchSize));
      }
    }
    progress(in.slide_id + ": " + std::to_string(records.size()) + " patches, " + std::to_string(kept) + " kept");
    if (kept == 0) {
      log::error(in.slide_id + ": no patch passed the nucleus/tissue filter; slide cannot produce a bag");
      status[i] = exit_code_for(ErrorCode::empty_slide);
    }
  });
  return *std::max_element(status.begin(), status.end());
}

// ----------------------------------------------------------- cluster

struct ClusterOptions {
  std::string features_dir;
  std::optional<int> k;
  bool elbow = false;
  std::optional<int> k_min, k_max;
};

int cmd_cluster(const CommonFlags& flags, const ClusterOptions& opt) {
  ExperimentConfig cfg = resolve(flags);
  if (!opt.features_dir.empty()) cfg.features_dir = opt.features_dir;
  if (opt.k) cfg.k = opt.k;
  if (opt.elbow) cfg.elbow = true;
  if (opt.k_min) cfg.elbow_k_min = *opt.k_min;
  if (opt.k_max) cfg.elbow_k_max = *opt.k_max;
  const Cohort cohort = open_cohort(cfg);
  const fs::path work = ensure_work_dir(cfg);

  int k = cfg.k.value_or(kDefaultClusters);
  if (cfg.elbow) {
    std::size_t total = 0;
    for (const LoadedSlide& s : cohort.slides) total += s.features.rows();
    FeatureMatrix pooled(total, static_cast<std::size_t>(cohort.report.dim));
    std::size_t r = 0;
    for (const LoadedSlide& s : cohort.slides) {
      std::copy(s.features.values().begin(), s.features.values().end(), pooled.values().begin() + static_cast<std::ptrdiff_t>(r * pooled.cols()));
      r += s.features.rows();
    }
    if (pooled.rows() > cfg.elbow_max_points)
      pooled = raw_instances(pooled, cfg.elbow_max_points, derive_seed(cfg.seed, "elbow-pool")).cast<float>();
    const int k_max = std::min<int>(cfg.elbow_k_max, static_cast<int>(pooled.rows()));
    const std::vector<CurvePoint> curve =
        wcss_curve(pooled, cfg.elbow_k_min, k_max, derive_seed(cfg.seed, "elbow"), cfg.kmeans);
    const int k_star = elbow_select(curve);
    std::ostringstream csv;
    csv << "k,wcss\n";
    for (const CurvePoint& p : curve) csv << p.k << ',' << fmt("%.10g", p.wcss) << '\n';
    write_file_atomic(work / "wcss_curve.csv", csv.str());
    json report{{"k_star", k_star}, {"k_min", cfg.elbow_k_min}, {"k_max", k_max}, {"points", pooled.rows()}};
    write_file_atomic(work / "elbow.json", report.dump(2) + "\n");
    progress("elbow: k* = " + std::to_string(k_star));
    if (!cfg.k) k = k_star;
  }

  const fs::path bag_dir = work / "bags";
  fs::create_directories(bag_dir);
  std::vector<std::string> failures(cohort.slides.size());
  parallel_for(cohort.slides.size(), cfg.jobs, [&](std::size_t i) {
    const LoadedSlide& s = cohort.slides[i];
    try {
      write_bag(bag_dir, bag_for_slide(s, k, cfg.seed, cfg.kmeans));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::too_few_samples && e.code() != ErrorCode::invalid_argument) throw;
      failures[i] = s.slide_id + ": " + e.what();
    }
  });
  int code = 0;
  std::size_t written = 0;
  for (const std::string& f : failures) {
    if (f.empty()) {
      ++written;
      continue;
    }
    log::error(f);
    code = 2;
  }
  progress("clustered " + std::to_string(written) + " of " + std::to_string(cohort.slides.size()) +
           " slides with k = " + std::to_string(k));
  return code;
}

// ------------------------------------------------------------- train

struct TrainOptions {
  std::string features_dir;
  std::string classifier;
  bool no_clustering = false;
  std::optional<int> epochs;
  std::string checkpoint;
};

int cmd_train(const CommonFlags& flags, const TrainOptions& opt) {
  ExperimentConfig cfg = resolve(flags);
  if (!opt.features_dir.empty()) cfg.features_dir = opt.features_dir;
  if (!opt.classifier.empty()) cfg.train.classifier = classifier_from_string(opt.classifier);
  if (opt.no_clustering) cfg.clustering = false;
  if (opt.epochs) cfg.train.epochs = *opt.epochs;
  const Cohort cohort = open_cohort(cfg);
  const fs::path work = ensure_work_dir(cfg);
  const CohortSplit split = load_or_create_split(cohort, cfg);

  const InputKind input = input_for(cfg.clustering, cfg.train.classifier);
  const std::vector<LabeledBag> train_set = build_inputs(cohort, cfg, input, split.train);
  const std::vector<LabeledBag> val_set = build_inputs(cohort, cfg, input, split.val);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train");
  const TrainResult result = train(train_set, val_set, cohort.classes, tc, cfg.augment);

  json meta;
  meta["input"] = to_string(input);
  meta["bag_rows"] = train_set.front().bag.rows();
  meta["dim"] = cohort.report.dim;
  meta["classes"] = cohort.classes;
  meta["feature_source"] = cohort.report.encoder_name;
  meta["best_epoch"] = result.best_epoch;
  meta["master_seed"] = cfg.seed;
  meta["max_instances"] = cfg.max_instances;
  meta["train"] = tc;
  meta["augment"] = cfg.augment;
  const fs::path ckpt = opt.checkpoint.empty() ? work / "model.ckpt" : fs::path(opt.checkpoint);
  save_checkpoint(ckpt, result.model, meta);
  write_history_csv(work / "history.csv", result.history);
  const EpochStats& best = result.history[static_cast<std::size_t>(result.best_epoch - 1)];
  progress("trained " + to_string(tc.classifier) + " on " + std::to_string(train_set.size()) +
           " slides; best epoch " + std::to_string(result.best_epoch) + " (val accuracy " +
           fmt("%.4f", best.val_accuracy) + ")");
  return 0;
}

// -------------------------------------------------------------- eval

struct EvalOptions {
  std::string features_dir;
  std::string checkpoint;
  bool ablation = false;
  std::optional<int> k;
};

int cmd_eval(const CommonFlags& flags, const EvalOptions& opt) {
  ExperimentConfig cfg = resolve(flags);
  if (!opt.features_dir.empty()) cfg.features_dir = opt.features_dir;
  if (opt.k) cfg.k = opt.k;
  const fs::path work = ensure_work_dir(cfg);

  std::vector<AblationRow> rows;
  SplitSpec shown = cfg.split;
  if (opt.ablation) {
    require_dir(cfg.features_dir, "features directory");
    AblationConfig ac;
    ac.k = cfg.k.value_or(kDefaultClusters);
    ac.kmeans = cfg.kmeans;
    ac.train = cfg.train;
    ac.augment = cfg.augment;
    ac.split = cfg.split;
    ac.split.seed = derive_seed(cfg.seed, "split");
    ac.max_instances = cfg.max_instances;
    ac.seed = cfg.seed;
    ac.jobs = cfg.jobs;
    rows = run_ablation(cfg.features_dir, ac);
    shown = ac.split;
  } else {
    const fs::path ckpt = opt.checkpoint.empty() ? work / "model.ckpt" : fs::path(opt.checkpoint);
    require_file(ckpt, "checkpoint");
    const auto [model, meta] = load_checkpoint(ckpt);
    const Cohort cohort = open_cohort(cfg);
    const CohortSplit split = load_or_create_split(cohort, cfg);
    shown = split.spec;
    ExperimentConfig eval_cfg = cfg;
    eval_cfg.max_instances = meta.value("max_instances", cfg.max_instances);
    eval_cfg.seed = meta.value("master_seed", cfg.seed);
    const InputKind input = input_from_string(meta.value("input", std::string("bags")));
    const std::vector<LabeledBag> test_set = build_inputs(cohort, eval_cfg, input, split.test);
    const EvalSummary summary = evaluate(model, test_set, cohort.classes);
    ConfusionMatrix cm(cohort.classes);
    for (std::size_t i = 0; i < test_set.size(); ++i) cm.add(test_set[i].label, summary.predictions[i]);
    AblationRow row;
    row.feature_source = cohort.report.encoder_name.empty() ? "unknown" : cohort.report.encoder_name;
    row.clustering = input == InputKind::bags;
    row.classifier = kind_of(model);
    row.metrics = compute_metrics(cm);
    row.best_epoch = meta.value("best_epoch", 0);
    rows.push_back(row);
  }
  write_results_csv(work / "results.csv", rows);
  const std::string table = format_results_table(rows, shown);
  write_file_atomic(work / "results.md", table);
  progress(table);
  for (const AblationRow& r : rows)
    if (!r.error.empty()) return 3;
  return 0;
}

// ------------------------------------------------------------ attend

struct AttendOptions {
  std::string checkpoint;
  std::string bag;
  std::string patches;
  std::string features_dir;
  std::string out;
};

int cmd_attend(const CommonFlags& flags, const AttendOptions& opt) {
  ExperimentConfig cfg = resolve(flags);
  if (!opt.features_dir.empty()) cfg.features_dir = opt.features_dir;
  require_file(opt.checkpoint, "checkpoint");
  require_file(opt.bag, "bag file");
  const auto [model, meta] = load_checkpoint(opt.checkpoint);
  if (kind_of(model) != ClassifierKind::amil)
    throw Error(ErrorCode::unsupported, "attention export needs an AMIL checkpoint; MLP models have no attention");
  const BagRepresentation bag = read_bag(opt.bag);
  const AmilForward fwd = amil_forward(std::get<AmilModel>(model), bag.means.cast<double>());

  // Patch positions in feature-row order.
  struct Cell {
    int row, col, x, y;
  };
  std::vector<Cell> cells;
  int grid_rows = 0, grid_cols = 0;
  if (!opt.patches.empty()) {
    require_file(opt.patches, "patch manifest");
    for (const PatchRecord& r : read_patch_manifest(opt.patches)) {
      grid_rows = std::max(grid_rows, r.row + 1);
      grid_cols = std::max(grid_cols, r.col + 1);
      if (r.kept) cells.push_back({r.row, r.col, r.x, r.y});
    }
  } else {
    require_dir(cfg.features_dir, "features directory");
    const auto [features, manifest] = read_features(cfg.features_dir / (bag.slide_id + ".fvec"));
    for (const PatchKey& key : manifest.patch_keys) {
      cells.push_back({key.row, key.col, key.col * kPatchSize, key.row * kPatchSize});
      grid_rows = std::max(grid_rows, key.row + 1);
      grid_cols = std::max(grid_cols, key.col + 1);
    }
  }
  std::size_t members = 0;
  for (const auto& m : bag.member_map) members += m.size();
  if (members != cells.size())
    throw Error(ErrorCode::dim_mismatch, "bag covers " + std::to_string(members) + " patches but the manifest lists " +
                                             std::to_string(cells.size()));

  std::vector<int> cluster_of(cells.size(), -1);
  for (std::size_t c = 0; c < bag.member_map.size(); ++c)
    for (std::size_t idx : bag.member_map[c]) {
      if (idx >= cells.size()) throw Error(ErrorCode::dim_mismatch, "member_map index out of range");
      cluster_of[idx] = static_cast<int>(c);
    }

  const fs::path out = opt.out.empty() ? ensure_work_dir(cfg) / "attention" : fs::path(opt.out);
  fs::create_directories(out);
  std::ostringstream csv;
  csv << "slide_id,cluster,attention,row,col,x,y\n";
  const double peak = *std::max_element(fwd.attention.begin(), fwd.attention.end());
  GrayImage heat{grid_cols, grid_rows, std::vector<std::uint8_t>(static_cast<std::size_t>(grid_cols) * grid_rows, 0)};
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const int c = cluster_of[i];
    const double a = fwd.attention[static_cast<std::size_t>(c)];
    csv << bag.slide_id << ',' << c << ',' << fmt("%.6f", a) << ',' << cells[i].row << ',' << cells[i].col << ','
        << cells[i].x << ',' << cells[i].y << '\n';
    heat.pixels[static_cast<std::size_t>(cells[i].row) * grid_cols + cells[i].col] =
        static_cast<std::uint8_t>(std::lround(255.0 * a / peak));
  }
  write_file_atomic(out / (bag.slide_id + ".attention.csv"), csv.str());
  save_png(out / (bag.slide_id + ".heatmap.png"), heat);
  progress(bag.slide_id + ": attention over " + std::to_string(bag.k) + " clusters exported to " + out.string());
  return 0;
}

// ------------------------------------------------------------- synth

int cmd_synth(const CommonFlags& flags, SyntheticCohortSpec spec, const std::string& out) {
  if (out.empty()) throw Error(ErrorCode::invalid_argument, "synth needs --out");
  if (flags.seed) spec.seed = *flags.seed;
  generate_synthetic_cohort(spec, out);
  progress("wrote " + std::to_string(spec.n_slides) + " synthetic slides to " + out);
  return 0;
}

// ---------------------------------------------------------- validate

int cmd_validate(const CommonFlags& flags, const std::string& features_dir) {
  ExperimentConfig cfg = resolve(flags);
  if (!features_dir.empty()) cfg.features_dir = features_dir;
  require_dir(cfg.features_dir, "features directory");
  const CohortReport report = validate_cohort(cfg.features_dir);
  json j;
  j["slides"] = report.slide_count;
  j["dim"] = report.dim;
  j["encoder_name"] = report.encoder_name;
  json counts = json::object();
  for (const auto& [label, n] : report.class_counts) counts[std::to_string(label)] = n;
  j["class_counts"] = counts;
  j["warnings"] = report.warnings;
  progress(j.dump(2));
  return 0;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "Experiment config JSON");
  cmd->add_option("--seed", flags.seed, "Master seed");
  cmd->add_option("--jobs", flags.jobs, "Parallel slides")->check(CLI::PositiveNumber);
  cmd->add_option("--work-dir", flags.work_dir, "Work directory (fallback: $SLIDEVEC_WORKDIR)");
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"slidevec: whole-slide image compression and attention-MIL classification"};
  app.require_subcommand(1);
  CommonFlags flags;

  TileOptions tile;
  auto* tile_cmd = app.add_subcommand("tile", "Detect tissue, tile slides and count nuclei");
  add_common(tile_cmd, flags);
  tile_cmd->add_option("--slides", tile.slides_dir, "Directory of PNG/PPM rasters or <slide_id>/ tile folders");
  tile_cmd->add_option("--nuclei-min", tile.nuclei_min, "Minimum nucleus count per kept patch (default 10)");
  tile_cmd->add_option("--tissue-min", tile.tissue_min, "Minimum tissue fraction per kept patch (default 0.5)");
  tile_cmd->add_flag("--dump-patches", tile.dump_patches, "Write kept patches as PNG tiles");

  ClusterOptions cluster;
  auto* cluster_cmd = app.add_subcommand("cluster", "Cluster patch features into per-slide bags");
  add_common(cluster_cmd, flags);
  cluster_cmd->add_option("--features", cluster.features_dir, "Directory of FVEC1 feature files");
  cluster_cmd->add_option("--k", cluster.k, "Clusters per slide (default 10)")->check(CLI::PositiveNumber);
  cluster_cmd->add_flag("--elbow", cluster.elbow, "Pick k from the pooled WCSS curve");
  cluster_cmd->add_option("--k-min", cluster.k_min, "Smallest k on the WCSS curve");
  cluster_cmd->add_option("--k-max", cluster.k_max, "Largest k on the WCSS curve");

  TrainOptions train_opt;
  auto* train_cmd = app.add_subcommand("train", "Train a bag classifier");
  add_common(train_cmd, flags);
  train_cmd->add_option("--features", train_opt.features_dir, "Directory of FVEC1 feature files");
  train_cmd->add_option("--classifier", train_opt.classifier, "amil or mlp");
  train_cmd->add_flag("--no-clustering", train_opt.no_clustering, "Train on raw patch features instead of bags");
  train_cmd->add_option("--epochs", train_opt.epochs, "Training epochs");
  train_cmd->add_option("--checkpoint", train_opt.checkpoint, "Checkpoint path (default <work>/model.ckpt)");

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate on the test split, or run the ablation grid");
  add_common(eval_cmd, flags);
  eval_cmd->add_option("--features", eval.features_dir, "Directory of FVEC1 feature files");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint path (default <work>/model.ckpt)");
  eval_cmd->add_flag("--ablation", eval.ablation, "Run clustering {on,off} x classifier {AMIL,MLP}");
  eval_cmd->add_option("--k", eval.k, "Clusters per slide for the ablation")->check(CLI::PositiveNumber);

  AttendOptions attend;
  auto* attend_cmd = app.add_subcommand("attend", "Export per-patch attention and a heatmap for one slide");
  add_common(attend_cmd, flags);
  attend_cmd->add_option("--checkpoint", attend.checkpoint, "AMIL checkpoint")->required();
  attend_cmd->add_option("--bag", attend.bag, "<slide_id>.bag.fvec")->required();
  attend_cmd->add_option("--patches", attend.patches, "Patch manifest CSV for the slide");
  attend_cmd->add_option("--features", attend.features_dir, "Feature directory (patch keys fallback)");
  attend_cmd->add_option("--out", attend.out, "Output directory (default <work>/attention)");

  SyntheticCohortSpec synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a planted-signal synthetic cohort");
  add_common(synth_cmd, flags);
  synth_cmd->add_option("--out", synth_out, "Output feature directory")->required();
  synth_cmd->add_option("--slides", synth.n_slides, "Number of slides");
  synth_cmd->add_option("--patches-per-slide", synth.patches_per_slide, "Patches per slide");
  synth_cmd->add_option("--dim", synth.dim, "Feature dimension");
  synth_cmd->add_option("--signal-fraction", synth.signal_cluster_fraction, "Share of patches in the signal cluster");
  synth_cmd->add_option("--shift", synth.shift, "Signal shift for positive slides");
  synth_cmd->add_option("--clusters", synth.clusters, "Mixture components per slide");

  std::string validate_dir;
  auto* validate_cmd = app.add_subcommand("validate", "Check a feature cohort directory");
  add_common(validate_cmd, flags);
  validate_cmd->add_option("--features", validate_dir, "Directory of FVEC1 feature files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*tile_cmd) return cmd_tile(flags, tile);
    if (*cluster_cmd) return cmd_cluster(flags, cluster);
    if (*train_cmd) return cmd_train(flags, train_opt);
    if (*eval_cmd) return cmd_eval(flags, eval);
    if (*attend_cmd) return cmd_attend(flags, attend);
    if (*synth_cmd) return cmd_synth(flags, synth, synth_out);
    if (*validate_cmd) return cmd_validate(flags, validate_dir);
  } catch (const Error& e) {
    log::error(e.what());
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    log::error(e.what());
    return 1;
  }
  return 1;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"slidevec"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace slidevec
