// Acceptance runner: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when everything passes).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "slidevec/augmentation.hpp"
#include "slidevec/cli.hpp"
#include "slidevec/clustering.hpp"
#include "slidevec/evaluation.hpp"
#include "slidevec/log.hpp"
#include "slidevec/mil.hpp"
#include "slidevec/rng.hpp"
#include "slidevec/tiling.hpp"

using namespace slidevec;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* spec, ...) {
  char buf[512];
  va_list args;
  va_start(args, spec);
  std::vsnprintf(buf, sizeof buf, spec, args);
  va_end(args);
  return buf;
}

Matrix<double> random_bag(std::size_t k, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix<double> m(k, dim);
  for (double& v : m.values()) v = d(rng);
  return m;
}

// -------------------------------------------------------------------------

Outcome permutation_invariance() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  double worst_logit = 0.0, worst_attention = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng() % 16, dim = 1 + rng() % 64;
    const AmilModel m = make_amil(dim, 2, 128, rng());
    const Matrix<double> bag = random_bag(k, dim, rng);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix<double> shuffled(k, dim);
    for (std::size_t i = 0; i < k; ++i)
      std::copy(bag.row(perm[i]).begin(), bag.row(perm[i]).end(), shuffled.row(i).begin());
    const AmilForward a = amil_forward(m, bag), b = amil_forward(m, shuffled);
    for (std::size_t c = 0; c < a.logits.size(); ++c)
      worst_logit = std::max(worst_logit, std::abs(a.logits[c] - b.logits[c]));
    for (std::size_t i = 0; i < k; ++i)
      worst_attention = std::max(worst_attention, std::abs(b.attention[i] - a.attention[perm[i]]));
  }
  const double secs = seconds_since(t0);
  return {worst_logit < 1e-6 && worst_attention < 1e-6 && secs < 10.0,
          fmt("200 bags; max |dlogit| %.2e, max |dattention| %.2e (< 1e-6); %.2f s (< 10 s)", worst_logit,
              worst_attention, secs)};
}

double gradient_error(Model& model, const Matrix<double>& bag, const std::vector<double>& y) {
  Model grad = zeros_like(model);
  model_backward(model, bag, y, grad);
  const auto params = model_tensors(model);
  const auto grads = model_tensors(std::as_const(grad));
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto numeric =
        oracle::central_difference(params[t], [&] { return cross_entropy(model_logits(model, bag), y); }, 1e-4);
    for (std::size_t i = 0; i < numeric.size(); ++i)
      worst = std::max(worst, oracle::relative_error(grads[t][i], numeric[i]));
  }
  return worst;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  double worst_amil = 0.0, worst_mlp = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t classes = 2 + rng() % 2;
    std::vector<double> y(classes);
    for (double& v : y) v = u(rng);
    const double s = std::accumulate(y.begin(), y.end(), 0.0);
    for (double& v : y) v /= s;

    const std::size_t dim = 1 + rng() % 6, k = 1 + rng() % 6;
    Model amil = make_amil(dim, classes, 1 + rng() % 6, rng());
    worst_amil = std::max(worst_amil, gradient_error(amil, random_bag(k, dim, rng), y));

    const std::size_t mdim = 1 + rng() % 4, mk = 1 + rng() % 4;
    Model mlp = make_mlp(mk * mdim, classes, 2 + rng() % 6, rng());
    worst_mlp = std::max(worst_mlp, gradient_error(mlp, random_bag(mk, mdim, rng), y));
  }
  const double secs = seconds_since(t0);
  return {worst_amil < 1e-4 && worst_mlp < 1e-4 && secs < 30.0,
          fmt("50 AMIL + 50 MLP models, step 1e-4; max rel err AMIL %.2e, MLP %.2e (< 1e-4); %.2f s (< 30 s)",
              worst_amil, worst_mlp, secs)};
}

Outcome kmeans_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(99);
  std::normal_distribution<float> d(0.0f, 2.0f);
  KmeansConfig cfg;
  cfg.restarts = 50;
  int failures = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng() % 8;  // 3..10
    const std::size_t dim = 1 + rng() % 3;
    const int k = 1 + static_cast<int>(rng() % 3);
    FeatureMatrix f(n, dim);
    for (float& v : f.values()) v = d(rng);
    std::vector<std::vector<double>> pts(n);
    for (std::size_t i = 0; i < n; ++i) pts[i].assign(f.row(i).begin(), f.row(i).end());
    const double best = oracle::brute_force_wcss(pts, k);
    const double got = kmeans_fit(f, k, rng(), cfg).wcss;
    const double rel = std::abs(got - best) / std::max(best, 1e-300);
    worst = std::max(worst, best == 0.0 ? std::abs(got) : rel);
    if (best == 0.0 ? got != 0.0 : rel > 1e-9) ++failures;
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && secs < 60.0,
          fmt("100 instances (n <= 10, dim <= 3, k <= 3, restarts 50); %d mismatches, max rel gap %.2e (<= 1e-9); "
              "%.2f s (< 60 s)",
              failures, worst, secs)};
}

Outcome lloyd_monotonicity() {
  std::mt19937_64 rng(5);
  long violations = 0, steps = 0;
  for (int fit = 0; fit < 1000; ++fit) {
    const std::size_t n = 5 + rng() % 200, dim = 1 + rng() % 16;
    const int k = 1 + static_cast<int>(rng() % std::min<std::size_t>(n, 12));
    std::normal_distribution<float> d(0.0f, 1.0f + static_cast<float>(rng() % 5));
    FeatureMatrix f(n, dim);
    for (float& v : f.values()) v = d(rng);
    // Half the fits start from arbitrary rows rather than k-means++ seeds.
    Matrix<double> init = kmeans_plus_plus(f, k, rng());
    if (fit % 2) {
      for (int c = 0; c < k; ++c) {
        const auto row = f.row(rng() % n);
        std::copy(row.begin(), row.end(), init.row(static_cast<std::size_t>(c)).begin());
      }
    }
    const ClusterModel m = lloyd(f, std::move(init), KmeansConfig{});
    for (std::size_t i = 1; i < m.wcss_trace.size(); ++i) {
      ++steps;
      if (m.wcss_trace[i] > m.wcss_trace[i - 1]) ++violations;
    }
  }
  return {violations == 0, fmt("1000 fits, %ld trace steps; %ld increases (must be 0)", steps, violations)};
}

Outcome elbow_detector() {
  int hits = 0;
  std::string picks;
  for (int run = 0; run < 20; ++run) {
    const FeatureMatrix pool = oracle::three_blobs(1000 + static_cast<std::uint64_t>(run));
    const int k = elbow_select(wcss_curve(pool, 2, 30, static_cast<std::uint64_t>(run)));
    if (k == 3) ++hits;
    picks += std::to_string(k) + (run < 19 ? "," : "");
  }
  const std::vector<CurvePoint> hand{{1, 100}, {2, 60}, {3, 25}, {4, 20}, {5, 17}, {6, 15}};
  const int hand_k = elbow_select(hand);
  return {hits >= 18 && hand_k == 3,
          fmt("planted 3 Gaussians: k* == 3 in %d/20 runs (>= 18) [%s]; hand curve k* = %d (== 3)", hits,
              picks.c_str(), hand_k)};
}

Outcome augmentation_statistics() {
  Rng rng(31);
  const Matrix<double> zeros(1000, 1000, 0.0);
  const Matrix<double> jittered = jitter_bag(zeros, 0.01, rng);
  double sum = 0.0, sq = 0.0;
  for (double v : jittered.values()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(jittered.size());
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);

  bool endpoints = true;
  Rng data(32);
  std::normal_distribution<double> d(0.0, 5.0);
  for (int t = 0; t < 100; ++t) {
    Matrix<double> a(10, 16), b(10, 16);
    for (double& v : a.values()) v = d(data);
    for (double& v : b.values()) v = d(data);
    const std::vector<double> ya{1.0, 0.0}, yb{0.0, 1.0};
    const MixedSample one = mixup_bags(a, ya, b, yb, 1.0);
    const MixedSample zero = mixup_bags(a, ya, b, yb, 0.0);
    endpoints = endpoints && std::memcmp(one.bag.values().data(), a.values().data(), a.size() * sizeof(double)) == 0 &&
                one.label == ya &&
                std::memcmp(zero.bag.values().data(), b.values().data(), b.size() * sizeof(double)) == 0 &&
                zero.label == yb;
  }

  bool eval_noop = true;
  AugmentConfig cfg;
  for (int t = 0; t < 100; ++t) {
    Matrix<double> a(10, 16), b(10, 16);
    for (double& v : a.values()) v = d(data);
    for (double& v : b.values()) v = d(data);
    const std::vector<double> ya{1.0, 0.0}, yb{0.0, 1.0};
    const MixedSample out = augment(a, ya, &b, yb, cfg, Mode::eval, rng);
    eval_noop = eval_noop && std::memcmp(out.bag.values().data(), a.values().data(), a.size() * sizeof(double)) == 0 &&
                out.label == ya;
  }
  return {std::abs(sd - 0.01) <= 0.0005 && endpoints && eval_noop,
          fmt("jitter std %.6f over 1e6 samples (0.01 +- 0.0005); mixup endpoints exact: %s; eval no-op bit-equal: %s",
              sd, endpoints ? "yes" : "no", eval_noop ? "yes" : "no")};
}

Outcome metrics_oracle() {
  int mismatches = 0, checked = 0;
  for (int tn = 0; tn <= 12; ++tn)
    for (int fp = 0; tn + fp <= 12; ++fp)
      for (int fn = 0; tn + fp + fn <= 12; ++fn)
        for (int tp = 0; tn + fp + fn + tp <= 12; ++tp) {
          if (tn + fp + fn + tp == 0) continue;
          ++checked;
          const Metrics got = compute_metrics(ConfusionMatrix::from_counts(
              {{static_cast<std::uint64_t>(tn), static_cast<std::uint64_t>(fp)},
               {static_cast<std::uint64_t>(fn), static_cast<std::uint64_t>(tp)}}));
          const oracle::BinaryMetrics want = oracle::binary_metrics(tn, fp, fn, tp);
          auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
          if (!close(got.accuracy, want.accuracy) || !close(got.precision, want.precision) ||
              !close(got.recall, want.recall) || !close(got.kappa, want.kappa))
            ++mismatches;
        }
  const double kappa = compute_metrics(ConfusionMatrix::from_counts({{2, 1}, {1, 2}})).kappa;
  return {mismatches == 0 && std::abs(kappa - 0.3333) <= 1e-4,
          fmt("%d matrices, %d mismatches; [[2,1],[1,2]] kappa %.6f (0.3333 +- 1e-4)", checked, mismatches, kappa)};
}

Outcome end_to_end(const fs::path& scratch) {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    SyntheticCohortSpec spec;
    spec.n_slides = 160;
    spec.signal_cluster_fraction = 0.1;
    spec.shift = 5.0;
    spec.seed = seed;
    const fs::path dir = scratch / ("e2e_" + std::to_string(seed));
    generate_synthetic_cohort(spec, dir);
    AblationConfig cfg;
    cfg.clustering = {true, false};
    cfg.classifiers = {ClassifierKind::amil};
    cfg.k = 10;
    cfg.seed = seed;
    cfg.split.seed = derive_seed(seed, "split");
    cfg.jobs = 1;
    const auto rows = run_ablation(dir, cfg);
    const AblationRow& on = rows[0];
    const AblationRow& off = rows[1];
    const bool seed_ok = on.error.empty() && off.error.empty() && on.metrics.accuracy >= 0.90 &&
                         on.metrics.accuracy >= off.metrics.accuracy;
    ok = ok && seed_ok;
    detail += fmt("seed %llu: clustering+AMIL %.4f, no-clustering AMIL %s; ", static_cast<unsigned long long>(seed),
                  on.metrics.accuracy, off.error.empty() ? fmt("%.4f", off.metrics.accuracy).c_str() : "NA");
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 300.0;
  return {ok, detail + fmt("%.1f s single-threaded (< 300 s)", secs)};
}

int quiet_cli(const std::vector<std::string>& args) {
  std::ostringstream sink;
  auto* saved = std::cout.rdbuf(sink.rdbuf());
  const int code = run_cli(args);
  std::cout.rdbuf(saved);
  return code;
}

std::vector<std::pair<std::string, std::vector<std::uint8_t>>> snapshot(const fs::path& root) {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), root).string(), oracle::read_bytes(e.path()));
  std::sort(files.begin(), files.end());
  return files;
}

Outcome determinism(const fs::path& scratch) {
  // Slides for the tiling stage: tissue with nuclei, white glass around it.
  const fs::path slides = scratch / "det_slides";
  fs::create_directories(slides);
  for (int s = 0; s < 2; ++s) {
    RgbImage img(1224, 700, 255);
    for (int y = 0; y < 512; ++y)
      for (int x = 0; x < 1024; ++x) img.set(x, y, 235, 170, 210);
    for (int bx = 0; bx < 1024; bx += 512)
      for (oracle::Disk d : oracle::disk_grid(s * 5, s * 3)) {
        d.cx += bx;
        oracle::paint_disk(img, d);
      }
    save_png(slides / ("slide" + std::to_string(s) + ".png"), img);
  }
  const fs::path features = scratch / "det_features";
  if (quiet_cli({"synth", "--out", features.string(), "--slides", "60", "--seed", "11"}) != 0)
    return {false, "synth failed"};

  std::vector<std::string> compared;
  std::vector<std::vector<std::pair<std::string, std::vector<std::uint8_t>>>> runs;
  for (int run = 0; run < 2; ++run) {
    const std::string work = (scratch / ("det_work" + std::to_string(run))).string();
    const std::vector<std::vector<std::string>> steps{
        {"tile", "--slides", slides.string(), "--work-dir", work, "--seed", "11"},
        {"cluster", "--features", features.string(), "--work-dir", work, "--seed", "11"},
        {"train", "--features", features.string(), "--work-dir", work, "--seed", "11"},
        {"eval", "--features", features.string(), "--work-dir", work, "--seed", "11"},
        {"attend", "--features", features.string(), "--work-dir", work, "--seed", "11", "--checkpoint",
         work + "/model.ckpt", "--bag", work + "/bags/synth_0001.bag.fvec"},
        {"eval", "--ablation", "--features", features.string(), "--work-dir", work + "/ablation", "--seed", "11"},
    };
    for (const auto& step : steps)
      if (const int code = quiet_cli(step); code != 0) return {false, step[0] + " exited " + std::to_string(code)};
    runs.push_back(snapshot(work));
  }
  std::size_t bags = 0, differing = 0;
  bool have_ckpt = false, have_results = false, have_ablation = false;
  const auto& a = runs[0];
  const auto& b = runs[1];
  if (a.size() != b.size()) return {false, fmt("file count differs: %zu vs %zu", a.size(), b.size())};
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second != b[i].second) ++differing;
    if (a[i].first.find(".bag.fvec") != std::string::npos) ++bags;
    if (a[i].first == "model.ckpt") have_ckpt = true;
    if (a[i].first == "results.csv") have_results = true;
    if (a[i].first == "ablation/results.csv") have_ablation = true;
  }
  const bool ok = differing == 0 && bags == 60 && have_ckpt && have_results && have_ablation;
  return {ok, fmt("tile/cluster/train/eval/attend/ablation twice: %zu files compared (%zu bags, checkpoint, results "
                  "CSVs); %zu differ",
                  a.size(), bags, differing)};
}

Outcome nucleus_filter() {
  const int white = count_nuclei(RgbImage(512, 512, 255));
  const int twelve = count_nuclei(oracle::disk_patch(oracle::disk_grid()));
  auto merged = oracle::disk_grid();
  merged[1].cx = merged[0].cx + 10;
  const int eleven = count_nuclei(oracle::disk_patch(merged));

  std::vector<PatchRecord> recs(4);
  const int counts[4] = {0, 9, 10, 250};
  for (int i = 0; i < 4; ++i) {
    recs[static_cast<std::size_t>(i)].nucleus_count = counts[i];
    recs[static_cast<std::size_t>(i)].tissue_fraction = 1.0;
  }
  filter_patches(recs);
  const bool example = !recs[0].kept && !recs[1].kept && recs[2].kept && recs[3].kept;

  // Random records: kept exactly when count >= 10 (full tissue).
  std::mt19937_64 rng(17);
  int wrong = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<PatchRecord> r(50);
    for (PatchRecord& p : r) {
      p.nucleus_count = static_cast<int>(rng() % 30);
      p.tissue_fraction = 1.0;
    }
    r[0].nucleus_count = 10;
    filter_patches(r);
    for (const PatchRecord& p : r)
      if (p.kept != (p.nucleus_count >= 10)) ++wrong;
  }
  const bool ok = white == 0 && twelve == 12 && eleven == 11 && example && wrong == 0;
  return {ok, fmt("counts white/12 disks/merged = %d/%d/%d (0/12/11); [0,9,10,250] keeps {2,3}: %s; "
                  "10000 random records misfiltered: %d",
                  white, twelve, eleven, example ? "yes" : "no", wrong)};
}

}  // namespace

int main() {
  log::set_level(log::Level::error);
  oracle::TempDir scratch("acceptance");
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"permutation-invariance", permutation_invariance},
      {"gradient-correctness", gradient_correctness},
      {"kmeans-oracle", kmeans_oracle},
      {"lloyd-monotonicity", lloyd_monotonicity},
      {"elbow-detector", elbow_detector},
      {"augmentation-statistics", augmentation_statistics},
      {"metrics-oracle", metrics_oracle},
      {"end-to-end-synthetic", [&] { return end_to_end(scratch.path()); }},
      {"determinism", [&] { return determinism(scratch.path()); }},
      {"nucleus-filter", nucleus_filter},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %-24s %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed;
}
