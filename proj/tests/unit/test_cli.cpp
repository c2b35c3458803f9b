#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "oracles.hpp"
#include "slidevec/clustering.hpp"
#include "slidevec/evaluation.hpp"
#include "slidevec/feature_store.hpp"
#include "slidevec/image.hpp"
#include "slidevec/tiling.hpp"

using namespace slidevec;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  const auto bytes = oracle::read_bytes(p);
  return {bytes.begin(), bytes.end()};
}

RunResult run(const oracle::TempDir& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(SLIDEVEC_BIN) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Pink tissue with 12 nuclei in every 512 window, and a strip of white
// glass beyond the last full window.
RgbImage tissue_slide(int w, int h) {
  RgbImage img(w + 200, h + 200, 255);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.set(x, y, 235, 170, 210);
  for (int by = 0; by + 512 <= h; by += 512)
    for (int bx = 0; bx + 512 <= w; bx += 512)
      for (oracle::Disk d : oracle::disk_grid()) {
        d.cx += bx;
        d.cy += by;
        oracle::paint_disk(img, d);
      }
  return img;
}

void small_cohort(const fs::path& dir, int slides = 40, int patches = 60, std::uint64_t seed = 1) {
  SyntheticCohortSpec spec;
  spec.n_slides = slides;
  spec.patches_per_slide = patches;
  spec.dim = 8;
  spec.seed = seed;
  generate_synthetic_cohort(spec, dir);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string fast_config(const oracle::TempDir& dir, int epochs = 8) {
  const fs::path p = dir / "config.json";
  write_text(p, "{\"train\": {\"epochs\": " + std::to_string(epochs) +
                    ", \"attention_width\": 16, \"hidden_width\": 32}, \"seed\": 5}");
  return q(p);
}

}  // namespace

TEST_CASE("missing input directory exits 1 and names the path") {
  oracle::TempDir dir("cli");
  const fs::path missing = dir / "no_such_dir";
  for (const std::string cmd : {"tile --slides", "cluster --features", "validate --features"}) {
    const RunResult r = run(dir, cmd + " " + q(missing) + " --work-dir " + q(dir / "w"));
    CHECK(r.code == 1);
    CHECK(r.err.find(missing.string()) != std::string::npos);
  }
}

TEST_CASE("usage errors exit 1") {
  oracle::TempDir dir("usage");
  CHECK(run(dir, "").code == 1);
  CHECK(run(dir, "frobnicate").code == 1);
  CHECK(run(dir, "cluster --k notanumber").code == 1);
  CHECK(run(dir, "--help").code == 0);
}

TEST_CASE("tile writes identical 4-row manifests on re-runs") {
  oracle::TempDir dir("tile");
  fs::create_directories(dir / "slides");
  save_png(dir / "slides" / "a.png", tissue_slide(1024, 1024));
  const std::string args = "tile --slides " + q(dir / "slides") + " --work-dir " + q(dir / "w") + " --dump-patches";
  REQUIRE(run(dir, args).code == 0);
  const std::string first = slurp(dir / "w" / "manifests" / "a.patches.csv");
  REQUIRE(run(dir, args).code == 0);
  CHECK(slurp(dir / "w" / "manifests" / "a.patches.csv") == first);
  const auto recs = read_patch_manifest(dir / "w" / "manifests" / "a.patches.csv");
  REQUIRE(recs.size() == 4);
  for (const PatchRecord& r : recs) {
    CHECK(r.kept);
    CHECK(r.nucleus_count == 12);
  }
  CHECK(fs::exists(dir / "w" / "patches" / "a" / "r1_c1.png"));
}

TEST_CASE("tile on a slide with no usable patches exits 2") {
  oracle::TempDir dir("empty");
  fs::create_directories(dir / "slides");
  save_png(dir / "slides" / "blank.png", RgbImage(1024, 512, 255));
  const RunResult r = run(dir, "tile --slides " + q(dir / "slides") + " --work-dir " + q(dir / "w"));
  CHECK(r.code == 2);
  CHECK(r.err.find("blank") != std::string::npos);
  CHECK(fs::exists(dir / "w" / "manifests" / "blank.patches.csv"));
}

TEST_CASE("tile threshold flags change the kept set") {
  oracle::TempDir dir("thresh");
  fs::create_directories(dir / "slides");
  save_png(dir / "slides" / "a.png", tissue_slide(512, 512));
  CHECK(run(dir, "tile --slides " + q(dir / "slides") + " --work-dir " + q(dir / "w") + " --nuclei-min 13").code == 2);
  CHECK(run(dir, "tile --slides " + q(dir / "slides") + " --work-dir " + q(dir / "w") + " --nuclei-min 12").code == 0);
}

TEST_CASE("cluster --k 10 gives ten-row bags") {
  oracle::TempDir dir("k10");
  small_cohort(dir / "f", 6, 40);
  REQUIRE(run(dir, "cluster --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --k 10").code == 0);
  int bags = 0;
  for (const auto& e : fs::directory_iterator(dir / "w" / "bags")) {
    if (e.path().extension() != ".fvec") continue;
    CHECK(read_bag(e.path()).means.rows() == 10);
    ++bags;
  }
  CHECK(bags == 6);
}

TEST_CASE("cluster with k above the patch count lists the slide and exits 2") {
  oracle::TempDir dir("kbig");
  small_cohort(dir / "f", 2, 50);
  const RunResult r = run(dir, "cluster --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --k 200");
  CHECK(r.code == 2);
  CHECK(r.err.find("synth_0000") != std::string::npos);
  CHECK(r.err.find("synth_0001") != std::string::npos);
}

TEST_CASE("cluster on mixed dims exits 1") {
  oracle::TempDir dir("mixed");
  fs::create_directories(dir / "f");
  const FeatureMatrix a(3, 4, 1.0f), b(3, 5, 1.0f);
  SlideManifest ma{"a", 0, "x", 4, {{0, 0}, {0, 1}, {0, 2}}}, mb{"b", 1, "x", 5, {{0, 0}, {0, 1}, {0, 2}}};
  write_features(a, ma, dir / "f" / "a.fvec");
  write_features(b, mb, dir / "f" / "b.fvec");
  CHECK(run(dir, "cluster --features " + q(dir / "f") + " --work-dir " + q(dir / "w")).code == 1);
}

TEST_CASE("cluster --elbow finds three planted Gaussians") {
  oracle::TempDir dir("elbow");
  fs::create_directories(dir / "f");
  const FeatureMatrix pool = oracle::three_blobs(3);
  // Three slides, each holding an interleaved third of the pool.
  for (int s = 0; s < 3; ++s) {
    FeatureMatrix m(100, 2);
    SlideManifest man{"p" + std::to_string(s), s % 2, "blobs", 2, {}};
    for (std::size_t i = 0; i < 100; ++i) {
      const std::size_t src = i * 3 + static_cast<std::size_t>(s);
      m(i, 0) = pool(src, 0);
      m(i, 1) = pool(src, 1);
      man.patch_keys.push_back({static_cast<int>(i / 10), static_cast<int>(i % 10)});
    }
    write_features(m, man, dir / "f" / (man.slide_id + ".fvec"));
  }
  const RunResult r =
      run(dir, "cluster --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --elbow --k-max 8");
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(slurp(dir / "w" / "elbow.json"));
  CHECK(report["k_star"] == 3);
  CHECK(slurp(dir / "w" / "wcss_curve.csv").rfind("k,wcss\n", 0) == 0);
  CHECK(read_bag(bag_path(dir / "w" / "bags", "p0")).k == 3);
}

TEST_CASE("pipeline is byte-identical across re-runs") {
  oracle::TempDir dir("det");
  small_cohort(dir / "f");
  const std::string cfg = fast_config(dir);
  auto pipeline = [&](const fs::path& work) {
    const std::string common = " --features " + q(dir / "f") + " --work-dir " + q(work) + " --config " + cfg;
    REQUIRE(run(dir, "cluster" + common + " --k 4").code == 0);
    REQUIRE(run(dir, "train" + common).code == 0);
    REQUIRE(run(dir, "eval" + common).code == 0);
  };
  pipeline(dir / "w1");
  pipeline(dir / "w2");
  for (const std::string f : {"model.ckpt", "results.csv", "results.md", "history.csv", "splits.json",
                              "bags/synth_0007.bag.fvec", "bags/synth_0007.bag.json"})
    CHECK(oracle::read_bytes(dir / "w1" / f) == oracle::read_bytes(dir / "w2" / f));
  // Re-running in place is idempotent as well.
  const auto before = oracle::read_bytes(dir / "w1" / "model.ckpt");
  pipeline(dir / "w1");
  CHECK(oracle::read_bytes(dir / "w1" / "model.ckpt") == before);
}

TEST_CASE("train and eval produce their artifacts, also without clustering") {
  oracle::TempDir dir("train");
  small_cohort(dir / "f");
  const std::string common = " --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --config " + fast_config(dir);
  REQUIRE(run(dir, "train" + common + " --no-clustering --classifier mlp").code == 0);
  CHECK(fs::exists(dir / "w" / "model.ckpt"));
  CHECK(fs::exists(dir / "w" / "history.csv"));
  REQUIRE(run(dir, "eval" + common).code == 0);
  const std::string csv = slurp(dir / "w" / "results.csv");
  CHECK(csv.find("synthetic,no,MLP,") != std::string::npos);
}

TEST_CASE("eval --ablation writes a four-row table") {
  oracle::TempDir dir("abl");
  small_cohort(dir / "f");
  const RunResult r = run(dir, "eval --ablation --k 4 --features " + q(dir / "f") + " --work-dir " + q(dir / "w") +
                                   " --config " + fast_config(dir, 3));
  REQUIRE(r.code == 0);
  const std::string csv = slurp(dir / "w" / "results.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(r.out.find("| Feature Extractor | Clustering | Classifier |") != std::string::npos);
}

TEST_CASE("training divergence exits 3") {
  oracle::TempDir dir("div");
  small_cohort(dir / "f");
  write_text(dir / "c.json", "{\"train\": {\"epochs\": 5, \"learning_rate\": 1e300}}");
  const std::string common = " --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --config " + q(dir / "c.json");
  REQUIRE(run(dir, "cluster" + common + " --k 4").code == 0);
  CHECK(run(dir, "train" + common).code == 3);
}

TEST_CASE("attend with a k=1 bag gives every patch weight 1 and a uniform heatmap") {
  oracle::TempDir dir("att1");
  small_cohort(dir / "f", 6, 25);
  const std::string common = " --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --config " + fast_config(dir, 2);
  REQUIRE(run(dir, "cluster" + common + " --k 1").code == 0);
  REQUIRE(run(dir, "train" + common).code == 0);
  REQUIRE(run(dir, "attend" + common + " --checkpoint " + q(dir / "w" / "model.ckpt") + " --bag " +
                       q(dir / "w" / "bags" / "synth_0001.bag.fvec"))
              .code == 0);
  std::istringstream csv(slurp(dir / "w" / "attention" / "synth_0001.attention.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "slide_id,cluster,attention,row,col,x,y");
  int rows = 0;
  while (std::getline(csv, line)) {
    CHECK(line.find(",0,1.000000,") != std::string::npos);
    ++rows;
  }
  CHECK(rows == 25);
  const RgbImage heat = load_png(dir / "w" / "attention" / "synth_0001.heatmap.png");
  CHECK(heat.width == 5);
  CHECK(heat.height == 5);
  for (std::uint8_t v : heat.pixels) CHECK(v == 255);
}

TEST_CASE("attend rejects MLP checkpoints") {
  oracle::TempDir dir("attmlp");
  small_cohort(dir / "f", 10, 20);
  const std::string common = " --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --config " + fast_config(dir, 1);
  REQUIRE(run(dir, "cluster" + common + " --k 2").code == 0);
  REQUIRE(run(dir, "train" + common + " --classifier mlp").code == 0);
  const RunResult r = run(dir, "attend" + common + " --checkpoint " + q(dir / "w" / "model.ckpt") + " --bag " +
                                   q(dir / "w" / "bags" / "synth_0001.bag.fvec"));
  CHECK(r.code == 1);
  CHECK(r.err.find("MLP") != std::string::npos);
}

TEST_CASE("attention peaks on the planted signal cluster") {
  oracle::TempDir dir("attsig");
  {
    SyntheticCohortSpec spec;
    spec.seed = 3;
    generate_synthetic_cohort(spec, dir / "f");
  }
  // The default schedule separates the classes before attention sharpens;
  // a larger step lets the attention converge within the epoch budget.
  write_text(dir / "c.json", "{\"train\": {\"learning_rate\": 0.01}}");
  const std::string common =
      " --features " + q(dir / "f") + " --work-dir " + q(dir / "w") + " --seed 3 --config " + q(dir / "c.json");
  REQUIRE(run(dir, "cluster" + common).code == 0);
  REQUIRE(run(dir, "train" + common).code == 0);

  // Signal row oracle: the positive slide's bag row farthest from every row
  // of a negative slide's bag (the shifted cluster has no counterpart there).
  const BagRepresentation pos = read_bag(bag_path(dir / "w" / "bags", "synth_0001"));
  const BagRepresentation neg = read_bag(bag_path(dir / "w" / "bags", "synth_0000"));
  int signal = -1;
  double best = -1.0;
  for (std::size_t j = 0; j < pos.means.rows(); ++j) {
    double nearest = 1e300;
    for (std::size_t i = 0; i < neg.means.rows(); ++i) {
      double d = 0.0;
      for (std::size_t c = 0; c < pos.means.cols(); ++c) d += std::pow(pos.means(j, c) - neg.means(i, c), 2);
      nearest = std::min(nearest, d);
    }
    if (nearest > best) {
      best = nearest;
      signal = static_cast<int>(j);
    }
  }

  REQUIRE(run(dir, "attend" + common + " --checkpoint " + q(dir / "w" / "model.ckpt") + " --bag " +
                       q(bag_path(dir / "w" / "bags", "synth_0001")))
              .code == 0);
  std::istringstream csv(slurp(dir / "w" / "attention" / "synth_0001.attention.csv"));
  std::string line;
  std::getline(csv, line);
  double top = -1.0;
  int top_cluster = -1;
  while (std::getline(csv, line)) {
    std::istringstream fields(line);
    std::string id, cluster, attention;
    std::getline(fields, id, ',');
    std::getline(fields, cluster, ',');
    std::getline(fields, attention, ',');
    if (std::stod(attention) > top) {
      top = std::stod(attention);
      top_cluster = std::stoi(cluster);
    }
  }
  CHECK(top_cluster == signal);
}

TEST_CASE("synth and validate") {
  oracle::TempDir dir("synth");
  REQUIRE(run(dir, "synth --out " + q(dir / "f") + " --slides 4 --patches-per-slide 10 --dim 3").code == 0);
  const RunResult r = run(dir, "validate --features " + q(dir / "f"));
  CHECK(r.code == 0);
  const auto report = nlohmann::json::parse(r.out);
  CHECK(report["slides"] == 4);
  CHECK(report["dim"] == 3);
}

TEST_CASE("work dir falls back to SLIDEVEC_WORKDIR") {
  oracle::TempDir dir("env");
  small_cohort(dir / "f", 4, 20);
  const std::string cmd = "SLIDEVEC_WORKDIR=" + q(dir / "envwork") + " " + SLIDEVEC_BIN + " cluster --k 2 --features " +
                          q(dir / "f") + " >/dev/null 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(dir / "envwork" / "bags" / "synth_0000.bag.fvec"));
}
