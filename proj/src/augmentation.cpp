#include "slidevec/augmentation.hpp"

#include <random>

#include <json.hpp>

#include "slidevec/error.hpp"

namespace slidevec {

void AugmentConfig::validate() const {
  if (!(scale_min > 0.0) || !(scale_min <= scale_max))
    throw Error(ErrorCode::invalid_argument, "augmentation requires 0 < scale_min <= scale_max");
  if (!(jitter_level >= 0.0)) throw Error(ErrorCode::invalid_argument, "jitter_level must be >= 0");
  if (!(mixup_alpha > 0.0)) throw Error(ErrorCode::invalid_argument, "mixup_alpha must be > 0");
}

void to_json(nlohmann::json& j, const AugmentConfig& cfg) {
  j = nlohmann::json{{"scale_min", cfg.scale_min},
                     {"scale_max", cfg.scale_max},
                     {"jitter_level", cfg.jitter_level},
                     {"mixup_alpha", cfg.mixup_alpha},
                     {"augment_enabled",
                      {{"scale", cfg.scale_enabled}, {"jitter", cfg.jitter_enabled}, {"mixup", cfg.mixup_enabled}}}};
}

void from_json(const nlohmann::json& j, AugmentConfig& cfg) {
  cfg.scale_min = j.value("scale_min", cfg.scale_min);
  cfg.scale_max = j.value("scale_max", cfg.scale_max);
  cfg.jitter_level = j.value("jitter_level", cfg.jitter_level);
  cfg.mixup_alpha = j.value("mixup_alpha", cfg.mixup_alpha);
  if (j.contains("augment_enabled")) {
    const auto& e = j["augment_enabled"];
    if (e.is_boolean()) {
      cfg.scale_enabled = cfg.jitter_enabled = cfg.mixup_enabled = e.get<bool>();
    } else {
      cfg.scale_enabled = e.value("scale", cfg.scale_enabled);
      cfg.jitter_enabled = e.value("jitter", cfg.jitter_enabled);
      cfg.mixup_enabled = e.value("mixup", cfg.mixup_enabled);
    }
  }
}

Matrix<double> scale_bag(const Matrix<double>& bag, double factor) {
  Matrix<double> out = bag;
  for (double& v : out.values()) v *= factor;
  return out;
}

Matrix<double> scale_bag(const Matrix<double>& bag, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.scale_min == cfg.scale_max) return scale_bag(bag, cfg.scale_min);
  std::uniform_real_distribution<double> dist(cfg.scale_min, cfg.scale_max);
  return scale_bag(bag, dist(rng));
}

Matrix<double> jitter_bag(const Matrix<double>& bag, double level, Rng& rng) {
  Matrix<double> out = bag;
  if (level == 0.0) return out;
  std::normal_distribution<double> noise(0.0, level);
  for (double& v : out.values()) v += noise(rng);
  return out;
}

double sample_beta(double a, double b, Rng& rng) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

MixedSample mixup_bags(const Matrix<double>& bag_a, std::span<const double> label_a,
                       const Matrix<double>& bag_b, std::span<const double> label_b, double lambda) {
  if (!bag_a.same_shape(bag_b)) throw Error(ErrorCode::shape_mismatch, "mixup requires bags of equal shape");
  if (label_a.size() != label_b.size()) throw Error(ErrorCode::shape_mismatch, "mixup label sizes differ");
  MixedSample out{Matrix<double>(bag_a.rows(), bag_a.cols()), std::vector<double>(label_a.size())};
  const auto a = bag_a.values(), b = bag_b.values();
  auto o = out.bag.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = lambda * a[i] + (1.0 - lambda) * b[i];
  for (std::size_t c = 0; c < label_a.size(); ++c)
    out.label[c] = lambda * label_a[c] + (1.0 - lambda) * label_b[c];
  return out;
}

MixedSample mixup_bags(const Matrix<double>& bag_a, std::span<const double> label_a,
                       const Matrix<double>& bag_b, std::span<const double> label_b, double alpha,
                       Rng& rng) {
  return mixup_bags(bag_a, label_a, bag_b, label_b, sample_beta(alpha, alpha, rng));
}

std::vector<double> one_hot(int label, int classes) {
  if (label < 0 || label >= classes) throw Error(ErrorCode::invalid_argument, "label out of range");
  std::vector<double> y(static_cast<std::size_t>(classes), 0.0);
  y[static_cast<std::size_t>(label)] = 1.0;
  return y;
}

MixedSample augment(const Matrix<double>& bag, std::span<const double> label, const Matrix<double>* partner,
                    std::span<const double> partner_label, const AugmentConfig& cfg, Mode mode, Rng& rng) {
  MixedSample out{bag, std::vector<double>(label.begin(), label.end())};
  if (mode == Mode::eval) return out;
  if (cfg.scale_enabled) out.bag = scale_bag(out.bag, cfg, rng);
  if (cfg.jitter_enabled) out.bag = jitter_bag(out.bag, cfg.jitter_level, rng);
  if (cfg.mixup_enabled && partner && partner->same_shape(bag))
    out = mixup_bags(out.bag, out.label, *partner, partner_label, cfg.mixup_alpha, rng);
  return out;
}

}  // namespace slidevec
