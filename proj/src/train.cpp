#include "slidevec/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "slidevec/error.hpp"
#include "slidevec/feature_store.hpp"
#include "slidevec/rng.hpp"

namespace slidevec {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw Error(ErrorCode::invalid_argument, "learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::invalid_argument, "weight_decay must be >= 0");
  if (epochs < 1) throw Error(ErrorCode::invalid_argument, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::invalid_argument, "batch_size must be >= 1");
  if (attention_width < 1 || hidden_width < 1)
    throw Error(ErrorCode::invalid_argument, "layer widths must be >= 1");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},                 {"beta2", c.beta2},
           {"epsilon", c.epsilon},             {"epochs", c.epochs},
           {"batch_size", c.batch_size},       {"seed", c.seed},
           {"classifier", to_string(c.classifier)},
           {"attention_width", c.attention_width},
           {"hidden_width", c.hidden_width}};
}

void from_json(const json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("classifier")) c.classifier = classifier_from_string(j["classifier"].get<std::string>());
  c.attention_width = j.value("attention_width", c.attention_width);
  c.hidden_width = j.value("hidden_width", c.hidden_width);
}

AdamW::AdamW(const TrainConfig& cfg, const std::vector<std::span<const double>>& shapes)
    : lr_(cfg.learning_rate), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.epsilon) {
  for (const auto& s : shapes) {
    m_.emplace_back(s.size(), 0.0);
    v_.emplace_back(s.size(), 0.0);
  }
}

void AdamW::step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, t_);
  const double c2 = 1.0 - std::pow(b2_, t_);
  const double decay = 1.0 - lr_ * wd_;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p];
    const auto g = grads[p];
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      theta[i] = theta[i] * decay - lr_ * (mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

Model init_model(ClassifierKind kind, std::size_t bag_rows, std::size_t dim, int classes, const TrainConfig& cfg) {
  const std::uint64_t seed = derive_seed(cfg.seed, "init");
  if (kind == ClassifierKind::amil)
    return make_amil(dim, static_cast<std::size_t>(classes), static_cast<std::size_t>(cfg.attention_width), seed);
  return make_mlp(bag_rows * dim, static_cast<std::size_t>(classes), static_cast<std::size_t>(cfg.hidden_width),
                  seed);
}

EvalSummary evaluate(const Model& model, std::span<const LabeledBag> set, int classes) {
  EvalSummary s;
  if (set.empty()) return s;
  std::size_t correct = 0;
  for (const LabeledBag& item : set) {
    const std::vector<double> logits = model_logits(model, item.bag);
    s.loss += cross_entropy(logits, one_hot(item.label, classes));
    const int pred = argmax(logits);
    s.predictions.push_back(pred);
    if (pred == item.label) ++correct;
  }
  s.loss /= static_cast<double>(set.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
  return s;
}

TrainResult train(std::span<const LabeledBag> train_set, std::span<const LabeledBag> val_set, int classes,
                  const TrainConfig& cfg, const AugmentConfig& aug) {
  cfg.validate();
  aug.validate();
  if (train_set.empty()) throw Error(ErrorCode::too_few_samples, "training set is empty");
  if (classes < 2) throw Error(ErrorCode::invalid_argument, "need at least two classes");

  const Matrix<double>& first = train_set.front().bag;
  Model model = init_model(cfg.classifier, first.rows(), first.cols(), classes, cfg);
  Model grad = zeros_like(model);
  AdamW opt(cfg, model_tensors(std::as_const(model)));

  Rng order_rng(derive_seed(cfg.seed, "shuffle"));
  Rng aug_rng(derive_seed(cfg.seed, aug.rng_seed));
  std::vector<std::vector<double>> labels;
  for (const LabeledBag& item : train_set) labels.push_back(one_hot(item.label, classes));

  const std::span<const LabeledBag> select_set = val_set.empty() ? train_set : val_set;
  TrainResult result{model, {}, 0};
  double best_acc = -1.0, best_loss = 0.0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<std::size_t> partner_pick(0, train_set.size() - 1);
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      for (std::span<double> t : model_tensors(grad)) std::fill(t.begin(), t.end(), 0.0);
      for (std::size_t pos = start; pos < end; ++pos) {
        const std::size_t idx = order[pos];
        const std::size_t partner = partner_pick(aug_rng);
        const MixedSample sample = augment(train_set[idx].bag, labels[idx], &train_set[partner].bag,
                                                  labels[partner], aug, Mode::train, aug_rng);
        const double loss = model_backward(model, sample.bag, sample.label, grad);
        if (!std::isfinite(loss))
          throw Error(ErrorCode::divergence, "training loss became non-finite at epoch " + std::to_string(epoch) +
                                                 " (slide " + train_set[idx].slide_id + ")");
        epoch_loss += loss;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::span<double> t : model_tensors(grad))
        for (double& g : t) g *= inv;
      opt.step(model_tensors(model), model_tensors(std::as_const(grad)));
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(train_set.size());
    const EvalSummary val = evaluate(model, select_set, classes);
    stats.val_accuracy = val.accuracy;
    stats.val_loss = val.loss;
    if (!std::isfinite(stats.train_loss) || !std::isfinite(stats.val_loss))
      throw Error(ErrorCode::divergence, "loss became non-finite at epoch " + std::to_string(epoch));
    result.history.push_back(stats);

    if (stats.val_accuracy > best_acc || (stats.val_accuracy == best_acc && stats.val_loss < best_loss)) {
      best_acc = stats.val_accuracy;
      best_loss = stats.val_loss;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

void write_history_csv(const fs::path& path, std::span<const EpochStats> history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_accuracy,val_loss\n";
  char buf[128];
  for (const EpochStats& s : history) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.4f,%.6f\n", s.epoch, s.train_loss, s.val_accuracy, s.val_loss);
    out << buf;
  }
  write_file_atomic(path, out.str());
}

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'V', 'C', 'K'};

struct TensorShape {
  const char* name;
  std::size_t rows, cols;
};

std::vector<TensorShape> shapes_of(const Model& model) {
  if (const auto* a = std::get_if<AmilModel>(&model))
    return {{"V", a->width(), a->dim()}, {"w", 1, a->width()}, {"U", a->classes(), a->dim()}, {"b", 1, a->classes()}};
  const auto& m = std::get<MlpModel>(model);
  return {{"W1", m.hidden(), m.input()}, {"b1", 1, m.hidden()}, {"W2", m.classes(), m.hidden()}, {"b2", 1, m.classes()}};
}

}  // namespace

void save_checkpoint(const fs::path& path, const Model& model, const json& meta) {
  json header = meta;
  header["format"] = "slidevec-checkpoint-1";
  header["classifier"] = to_string(kind_of(model));
  json tensors = json::array();
  for (const TensorShape& s : shapes_of(model)) tensors.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  header["tensors"] = tensors;
  const std::string text = header.dump(2);

  std::string bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>(len >> (8 * i)));
  bytes += text;
  const auto shapes = shapes_of(model);
  const auto values = model_tensors(model);
  for (std::size_t t = 0; t < shapes.size(); ++t) {
    std::vector<float> f(values[t].begin(), values[t].end());
    const std::vector<std::uint8_t> block = encode_fvec(Matrix<float>(shapes[t].rows, shapes[t].cols, std::move(f)));
    bytes.append(block.begin(), block.end());
  }
  write_file_atomic(path, bytes);
}

std::pair<Model, json> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw Error(ErrorCode::bad_magic, "not a checkpoint: " + path.string());
  const std::uint32_t len = static_cast<std::uint32_t>(bytes[4]) | static_cast<std::uint32_t>(bytes[5]) << 8 |
                            static_cast<std::uint32_t>(bytes[6]) << 16 | static_cast<std::uint32_t>(bytes[7]) << 24;
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw Error(ErrorCode::truncated, "checkpoint header truncated");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, "malformed checkpoint header: " + std::string(e.what()));
  }

  std::vector<Matrix<double>> blocks;
  std::size_t offset = 8 + len;
  for (std::size_t t = 0; t < header.at("tensors").size(); ++t) {
    std::size_t used = 0;
    blocks.push_back(decode_fvec(bytes, offset, &used).cast<double>());
    offset += used;
  }
  if (blocks.size() != 4) throw Error(ErrorCode::io, "checkpoint must hold four tensors");
  auto flat = [](const Matrix<double>& m) { return std::vector<double>(m.values().begin(), m.values().end()); };
  const ClassifierKind kind = classifier_from_string(header.at("classifier").get<std::string>());
  Model model = kind == ClassifierKind::amil
                    ? Model(AmilModel{blocks[0], flat(blocks[1]), blocks[2], flat(blocks[3])})
                    : Model(MlpModel{blocks[0], flat(blocks[1]), blocks[2], flat(blocks[3])});
  const auto shapes = shapes_of(model);
  for (std::size_t t = 0; t < 4; ++t) {
    const json& decl = header["tensors"][t];
    if (decl.at("rows").get<std::size_t>() != shapes[t].rows || decl.at("cols").get<std::size_t>() != shapes[t].cols ||
        blocks[t].rows() != shapes[t].rows || blocks[t].cols() != shapes[t].cols)
      throw Error(ErrorCode::dim_mismatch, "checkpoint tensor shapes are inconsistent");
  }
  return {std::move(model), std::move(header)};
}

}  // namespace slidevec
