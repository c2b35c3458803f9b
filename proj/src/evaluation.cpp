#include "slidevec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "slidevec/error.hpp"
#include "slidevec/feature_store.hpp"
#include "slidevec/log.hpp"
#include "slidevec/parallel.hpp"
#include "slidevec/pipeline.hpp"
#include "slidevec/rng.hpp"

namespace slidevec {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------ metrics

ConfusionMatrix::ConfusionMatrix(int classes)
    : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
  if (classes < 2) throw Error(ErrorCode::invalid_argument, "confusion matrix needs at least two classes");
}

ConfusionMatrix ConfusionMatrix::from_counts(const std::vector<std::vector<std::uint64_t>>& counts) {
  ConfusionMatrix cm(static_cast<int>(counts.size()));
  for (std::size_t t = 0; t < counts.size(); ++t) {
    if (counts[t].size() != counts.size()) throw Error(ErrorCode::shape_mismatch, "confusion matrix must be square");
    for (std::size_t p = 0; p < counts.size(); ++p) cm.add(static_cast<int>(t), static_cast<int>(p), counts[t][p]);
  }
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted, std::uint64_t n) {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_)
    throw Error(ErrorCode::invalid_argument, "class index out of range");
  counts_[static_cast<std::size_t>(truth) * classes_ + predicted] += n;
}

std::uint64_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_[static_cast<std::size_t>(truth) * classes_ + predicted];
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

Metrics compute_metrics(const ConfusionMatrix& cm) {
  const double total = static_cast<double>(cm.total());
  if (total == 0.0) throw Error(ErrorCode::invalid_argument, "confusion matrix is empty");
  const int C = cm.classes();
  std::vector<double> row(C, 0.0), col(C, 0.0);
  double trace = 0.0;
  for (int t = 0; t < C; ++t) {
    for (int p = 0; p < C; ++p) {
      const double v = static_cast<double>(cm.at(t, p));
      row[t] += v;
      col[p] += v;
    }
    trace += static_cast<double>(cm.at(t, t));
  }
  auto ratio = [](double num, double den) { return den > 0.0 ? num / den : 0.0; };

  Metrics m;
  m.accuracy = trace / total;
  if (C == 2) {
    m.precision = ratio(static_cast<double>(cm.at(1, 1)), col[1]);
    m.recall = ratio(static_cast<double>(cm.at(1, 1)), row[1]);
  } else {
    for (int c = 0; c < C; ++c) {
      m.precision += ratio(static_cast<double>(cm.at(c, c)), col[c]);
      m.recall += ratio(static_cast<double>(cm.at(c, c)), row[c]);
    }
    m.precision /= C;
    m.recall /= C;
  }
  double pe = 0.0;
  for (int c = 0; c < C; ++c) pe += row[c] * col[c];
  pe /= total * total;
  if (pe == 1.0) {
    m.kappa = 0.0;
    m.kappa_undefined = true;
  } else {
    m.kappa = (m.accuracy - pe) / (1.0 - pe);
  }
  return m;
}

// ------------------------------------------------------------- splits

namespace {

// Adds one unit to the entries with the largest fractional quota until the
// allocation reaches `target`. Ties go to the earlier entry.
std::vector<std::size_t> largest_remainder(const std::vector<double>& quota, const std::vector<std::size_t>& cap,
                                           std::size_t target) {
  std::vector<std::size_t> alloc(quota.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < quota.size(); ++i) {
    alloc[i] = std::min(cap[i], static_cast<std::size_t>(std::floor(quota[i])));
    used += alloc[i];
  }
  std::vector<std::size_t> order(quota.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
  });
  for (std::size_t pass = 0; used < target && pass < 2; ++pass) {
    for (std::size_t i : order) {
      if (used >= target) break;
      if (alloc[i] < cap[i] && (pass == 1 || static_cast<double>(alloc[i]) < quota[i])) {
        ++alloc[i];
        ++used;
      }
    }
  }
  return alloc;
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

}  // namespace

CohortSplit split_cohort(const std::map<std::string, int>& labels, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw Error(ErrorCode::invalid_argument, "split ratios must be non-negative and sum to 1");
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& [id, label] : labels) by_class[label].push_back(id);
  for (const auto& [label, ids] : by_class)
    if (ids.size() < 2)
      throw Error(ErrorCode::too_few_samples, "class " + std::to_string(label) + " has fewer than 2 slides");

  std::vector<std::vector<std::string>> members;
  for (auto& [label, ids] : by_class) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(label)));
    std::shuffle(ids.begin(), ids.end(), rng);
    members.push_back(ids);
  }
  const std::size_t N = labels.size();
  std::vector<double> q_train, q_val;
  std::vector<std::size_t> sizes;
  for (const auto& ids : members) {
    sizes.push_back(ids.size());
    q_train.push_back(spec.train * static_cast<double>(ids.size()));
    q_val.push_back(spec.val * static_cast<double>(ids.size()));
  }
  const std::size_t t_train = round_half_up(spec.train * static_cast<double>(N));
  const std::size_t t_val = std::min(N - t_train, round_half_up(spec.val * static_cast<double>(N)));
  const std::vector<std::size_t> n_train = largest_remainder(q_train, sizes, t_train);
  std::vector<std::size_t> left(sizes.size());
  for (std::size_t c = 0; c < sizes.size(); ++c) left[c] = sizes[c] - n_train[c];
  const std::vector<std::size_t> n_val = largest_remainder(q_val, left, t_val);

  CohortSplit split;
  split.spec = spec;
  for (std::size_t c = 0; c < members.size(); ++c) {
    const auto& ids = members[c];
    const std::size_t a = n_train[c], b = a + n_val[c];
    split.train.insert(split.train.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(a));
    split.val.insert(split.val.end(), ids.begin() + static_cast<std::ptrdiff_t>(a),
                     ids.begin() + static_cast<std::ptrdiff_t>(b));
    split.test.insert(split.test.end(), ids.begin() + static_cast<std::ptrdiff_t>(b), ids.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

void write_splits(const fs::path& path, const CohortSplit& split) {
  json j;
  j["protocol"] = "stratified train/val/test split";
  j["ratios"] = {{"train", split.spec.train}, {"val", split.spec.val}, {"test", split.spec.test}};
  j["seed"] = split.spec.seed;
  j["train"] = split.train;
  j["val"] = split.val;
  j["test"] = split.test;
  write_file_atomic(path, j.dump(2) + "\n");
}

CohortSplit read_splits(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  try {
    const json j = json::parse(in);
    CohortSplit s;
    s.spec.train = j.at("ratios").at("train").get<double>();
    s.spec.val = j.at("ratios").at("val").get<double>();
    s.spec.test = j.at("ratios").at("test").get<double>();
    s.spec.seed = j.at("seed").get<std::uint64_t>();
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, "malformed splits file " + path.string() + ": " + e.what());
  }
}

// -------------------------------------------------------- synthetic data

void generate_synthetic_cohort(const SyntheticCohortSpec& spec, const fs::path& dir) {
  if (spec.n_slides < 1 || spec.patches_per_slide < 1 || spec.dim < 1 || spec.clusters < 1)
    throw Error(ErrorCode::invalid_argument, "synthetic cohort parameters must be positive");
  if (!(spec.signal_cluster_fraction > 0.0 && spec.signal_cluster_fraction < 1.0))
    throw Error(ErrorCode::invalid_argument, "signal_cluster_fraction must lie in (0, 1)");
  fs::create_directories(dir);
  const std::size_t dim = static_cast<std::size_t>(spec.dim);
  const std::size_t C = static_cast<std::size_t>(spec.clusters);

  Matrix<double> prototypes(C, dim);
  {
    Rng rng(derive_seed(spec.seed, "prototypes"));
    std::normal_distribution<double> d(0.0, spec.center_spread);
    for (double& v : prototypes.values()) v = d(rng);
  }
  std::vector<double> direction(dim);
  {
    Rng rng(derive_seed(spec.seed, "direction"));
    std::normal_distribution<double> d(0.0, 1.0);
    double norm = 0.0;
    for (double& v : direction) {
      v = d(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : direction) v /= norm;
  }

  // Patches per cluster: cluster 0 gets the signal share, the rest split evenly.
  const std::size_t n = static_cast<std::size_t>(spec.patches_per_slide);
  std::vector<std::size_t> counts(C, 0);
  if (C == 1) {
    counts[0] = n;
  } else {
    counts[0] = std::clamp<std::size_t>(round_half_up(spec.signal_cluster_fraction * static_cast<double>(n)), 1, n);
    const std::size_t rest = n - counts[0];
    for (std::size_t c = 1; c < C; ++c) counts[c] = rest / (C - 1) + ((c - 1) < rest % (C - 1) ? 1 : 0);
  }
  const int grid_cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));

  std::map<std::string, int> labels;
  char name[64];
  for (int s = 0; s < spec.n_slides; ++s) {
    std::snprintf(name, sizeof name, "synth_%04d", s);
    const std::string slide_id = name;
    const int label = s % 2;
    labels[slide_id] = label;

    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(s) + 1));
    std::normal_distribution<double> unit(0.0, 1.0);
    Matrix<double> centers = prototypes;
    for (double& v : centers.values()) v += spec.slide_jitter * unit(rng);
    if (label == 1)
      for (std::size_t d = 0; d < dim; ++d) centers(0, d) += spec.shift * direction[d];

    std::vector<std::size_t> membership;
    for (std::size_t c = 0; c < C; ++c) membership.insert(membership.end(), counts[c], c);
    std::shuffle(membership.begin(), membership.end(), rng);

    FeatureMatrix features(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = features.row(i);
      for (std::size_t d = 0; d < dim; ++d)
        row[d] = static_cast<float>(centers(membership[i], d) + spec.patch_noise * unit(rng));
    }
    SlideManifest manifest;
    manifest.slide_id = slide_id;
    manifest.label = label;
    manifest.encoder_name = "synthetic";
    manifest.dim = spec.dim;
    for (std::size_t i = 0; i < n; ++i)
      manifest.patch_keys.push_back({static_cast<int>(i) / grid_cols, static_cast<int>(i) % grid_cols});
    write_features(features, manifest, dir / (slide_id + ".fvec"));
  }
  write_labels(dir / "labels.csv", labels);
}

// ------------------------------------------------------------- ablation

namespace {

std::vector<LabeledBag> select(const std::vector<LabeledBag>& all, const std::map<std::string, std::size_t>& index,
                               const std::vector<std::string>& ids) {
  std::vector<LabeledBag> out;
  for (const std::string& id : ids) out.push_back(all[index.at(id)]);
  return out;
}

}  // namespace

std::vector<AblationRow> run_ablation(const fs::path& cohort_dir, const AblationConfig& cfg) {
  const CohortReport report = validate_cohort(cohort_dir);
  const std::vector<LoadedSlide> slides = load_cohort(report, cfg.jobs);
  const int classes = class_count(slides);

  std::map<std::string, int> labels;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < slides.size(); ++i) {
    labels[slides[i].slide_id] = slides[i].label;
    index[slides[i].slide_id] = i;
  }
  const CohortSplit split = split_cohort(labels, cfg.split);

  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = derive_seed(cfg.seed, "train");

  std::vector<AblationRow> rows;
  for (const bool clustered : cfg.clustering) {
    std::vector<LabeledBag> bags(slides.size());
    std::vector<LabeledBag> pooled;
    std::string prep_error;
    try {
      parallel_for(slides.size(), cfg.jobs, [&](std::size_t i) {
        const LoadedSlide& s = slides[i];
        Matrix<double> input =
            clustered ? bag_for_slide(s, cfg.k, cfg.seed, cfg.kmeans).means.cast<double>()
                      : raw_instances(s.features, cfg.max_instances, slide_seed(cfg.seed, "subsample", s.slide_id));
        bags[i] = LabeledBag{s.slide_id, std::move(input), s.label};
      });
      if (!clustered)
        for (const LoadedSlide& s : slides) pooled.push_back(LabeledBag{s.slide_id, mean_pooled(s.features), s.label});
    } catch (const Error& e) {
      prep_error = e.what();
    }

    for (const ClassifierKind kind : cfg.classifiers) {
      AblationRow row;
      row.feature_source = report.encoder_name.empty() ? "unknown" : report.encoder_name;
      row.clustering = clustered;
      row.classifier = kind;
      if (!prep_error.empty()) {
        row.error = prep_error;
        rows.push_back(row);
        continue;
      }
      try {
        const std::vector<LabeledBag>& source = (!clustered && kind == ClassifierKind::mlp) ? pooled : bags;
        const std::vector<LabeledBag> train_set = select(source, index, split.train);
        const std::vector<LabeledBag> val_set = select(source, index, split.val);
        const std::vector<LabeledBag> test_set = select(source, index, split.test);
        TrainConfig tc = train_cfg;
        tc.classifier = kind;
        const TrainResult result = train(train_set, val_set, classes, tc, cfg.augment);
        const EvalSummary test = evaluate(result.model, test_set, classes);
        ConfusionMatrix cm(classes);
        for (std::size_t i = 0; i < test_set.size(); ++i) cm.add(test_set[i].label, test.predictions[i]);
        row.metrics = compute_metrics(cm);
        row.best_epoch = result.best_epoch;
      } catch (const Error& e) {
        row.error = e.what();
        log::error("ablation row (clustering=" + std::string(clustered ? "yes" : "no") + ", " + to_string(kind) +
                   ") failed: " + e.what());
      }
      rows.push_back(row);
    }
  }
  return rows;
}

namespace {

std::string classifier_label(ClassifierKind kind) { return kind == ClassifierKind::amil ? "AMIL" : "MLP"; }

}  // namespace

void write_results_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "feature_source,clustering,classifier,accuracy,kappa,precision,recall\n";
  char buf[160];
  for (const AblationRow& r : rows) {
    out << r.feature_source << ',' << (r.clustering ? "yes" : "no") << ',' << classifier_label(r.classifier) << ',';
    if (!r.error.empty()) {
      out << "NA,NA,NA,NA\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,%.4f,%.4f\n", r.metrics.accuracy, r.metrics.kappa,
                  r.metrics.precision, r.metrics.recall);
    out << buf;
  }
  write_file_atomic(path, out.str());
}

std::string format_results_table(const std::vector<AblationRow>& rows, const SplitSpec& split) {
  std::ostringstream out;
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "Protocol: stratified %.0f/%.0f/%.0f train/val/test split, seed %llu; metrics on the test split.\n\n",
                split.train * 100, split.val * 100, split.test * 100, static_cast<unsigned long long>(split.seed));
  out << buf;
  out << "| Feature Extractor | Clustering | Classifier | Accuracy | Kappa | Precision | Recall |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const AblationRow& r : rows) {
    out << "| " << r.feature_source << " | " << (r.clustering ? "Yes" : "No") << " | " << classifier_label(r.classifier)
        << " | ";
    if (!r.error.empty()) {
      out << "failed: " << r.error << " | | | |\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%.2f | %.2f | %.2f | %.2f |\n", r.metrics.accuracy, r.metrics.kappa,
                  r.metrics.precision, r.metrics.recall);
    out << buf;
  }
  return out.str();
}

}  // namespace slidevec
