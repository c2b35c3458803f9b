#pragma once

// Training-time bag augmentation: one shared scale factor per bag, additive
// Gaussian jitter per element, and mixup between bags of equal shape.

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "slidevec/matrix.hpp"
#include "slidevec/rng.hpp"

namespace slidevec {

struct AugmentConfig {
  double scale_min = 0.9;
  double scale_max = 1.0;
  double jitter_level = 0.01;
  double mixup_alpha = 0.2;
  bool scale_enabled = true;
  bool jitter_enabled = true;
  bool mixup_enabled = true;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& cfg);
void from_json(const nlohmann::json& j, AugmentConfig& cfg);

enum class Mode { train, eval };

Matrix<double> scale_bag(const Matrix<double>& bag, double factor);
Matrix<double> scale_bag(const Matrix<double>& bag, const AugmentConfig& cfg, Rng& rng);

Matrix<double> jitter_bag(const Matrix<double>& bag, double level, Rng& rng);

// Beta(a, b) via two gamma draws.
double sample_beta(double a, double b, Rng& rng);

struct MixedSample {
  Matrix<double> bag;
  std::vector<double> label;
};

MixedSample mixup_bags(const Matrix<double>& bag_a, std::span<const double> label_a,
                       const Matrix<double>& bag_b, std::span<const double> label_b, double lambda);
MixedSample mixup_bags(const Matrix<double>& bag_a, std::span<const double> label_a,
                       const Matrix<double>& bag_b, std::span<const double> label_b,
                       double alpha, Rng& rng);

std::vector<double> one_hot(int label, int classes);

// Applies the enabled augmentations in order scale -> jitter -> mixup.
// In eval mode the sample is returned unchanged. `partner` may be null, in
// which case mixup is skipped; partners of a different shape are skipped too.
MixedSample augment(const Matrix<double>& bag, std::span<const double> label,
                    const Matrix<double>* partner, std::span<const double> partner_label,
                    const AugmentConfig& cfg, Mode mode, Rng& rng);

}  // namespace slidevec
