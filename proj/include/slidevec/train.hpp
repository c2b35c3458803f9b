#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "slidevec/augmentation.hpp"
#include "slidevec/matrix.hpp"
#include "slidevec/mil.hpp"

namespace slidevec {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 100;
  int batch_size = 8;
  std::uint64_t seed = 0;
  ClassifierKind classifier = ClassifierKind::amil;
  int attention_width = 128;
  int hidden_width = 256;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// AdamW with decoupled weight decay:
///   theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
class AdamW {
 public:
  AdamW(const TrainConfig& cfg, const std::vector<std::span<const double>>& shapes);

  void step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads);
  int steps() const noexcept { return t_; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LabeledBag {
  std::string slide_id;
  Matrix<double> bag;
  int label = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  Model model;  // best-validation checkpoint
  std::vector<EpochStats> history;
  int best_epoch = 0;
};

Model init_model(ClassifierKind kind, std::size_t bag_rows, std::size_t dim, int classes,
                 const TrainConfig& cfg);

// Mean loss and accuracy in eval mode (no augmentation).
struct EvalSummary {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
};
EvalSummary evaluate(const Model& model, std::span<const LabeledBag> set, int classes);

// Mini-batch AdamW over `train_set`. Throws Error(divergence) if the loss
// stops being finite. When `val_set` is empty the training set drives
// checkpoint selection.
TrainResult train(std::span<const LabeledBag> train_set, std::span<const LabeledBag> val_set, int classes,
                  const TrainConfig& cfg, const AugmentConfig& augment);

void write_history_csv(const std::filesystem::path& path, std::span<const EpochStats> history);

// Checkpoint: "SVCK" + u32-LE header length + JSON header + one FVEC1
// block per parameter tensor in header order.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta);
std::pair<Model, nlohmann::json> load_checkpoint(const std::filesystem::path& path);

}  // namespace slidevec
