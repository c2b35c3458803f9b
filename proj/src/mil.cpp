#include "slidevec/mil.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "slidevec/error.hpp"
#include "slidevec/rng.hpp"
#include "slidevec/simd/kernels.hpp"

namespace slidevec {

std::string to_string(ClassifierKind kind) {
  return kind == ClassifierKind::amil ? "amil" : "mlp";
}

ClassifierKind classifier_from_string(const std::string& name) {
  if (name == "amil" || name == "AMIL") return ClassifierKind::amil;
  if (name == "mlp" || name == "MLP") return ClassifierKind::mlp;
  throw Error(ErrorCode::invalid_argument, "unknown classifier '" + name + "' (expected amil or mlp)");
}

std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  const double mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += out[i] = std::exp(x[i] - mx);
  for (double& v : out) v /= sum;
  return out;
}

double cross_entropy(std::span<const double> logits, std::span<const double> soft_label,
                     std::vector<double>* dlogits) {
  if (logits.size() != soft_label.size())
    throw Error(ErrorCode::shape_mismatch, "label size does not match class count");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  const double log_z = mx + std::log(sum);
  double loss = 0.0, mass = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (soft_label[c] != 0.0) loss -= soft_label[c] * (logits[c] - log_z);
    mass += soft_label[c];
  }
  if (dlogits) {
    dlogits->resize(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c)
      (*dlogits)[c] = std::exp(logits[c] - log_z) * mass - soft_label[c];
  }
  return loss;
}

int argmax(std::span<const double> logits) noexcept {
  int best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  return best;
}

namespace {

void fill_uniform(std::span<double> v, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& x : v) x = dist(rng);
}

}  // namespace

// ---------------------------------------------------------------- AMIL

std::vector<std::span<double>> AmilModel::tensors() { return {V.values(), w, U.values(), b}; }

std::vector<std::span<const double>> AmilModel::tensors() const {
  return {V.values(), w, U.values(), b};
}

AmilModel make_amil(std::size_t dim, std::size_t classes, std::size_t width, std::uint64_t seed) {
  if (dim < 1 || width < 1 || classes < 2)
    throw Error(ErrorCode::invalid_argument, "AMIL needs dim >= 1, width >= 1, classes >= 2");
  Rng rng(seed);
  AmilModel m{Matrix<double>(width, dim), std::vector<double>(width), Matrix<double>(classes, dim),
              std::vector<double>(classes)};
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(dim));
  fill_uniform(m.V.values(), in_bound, rng);
  fill_uniform(m.w, 1.0 / std::sqrt(static_cast<double>(width)), rng);
  fill_uniform(m.U.values(), in_bound, rng);
  fill_uniform(m.b, in_bound, rng);
  return m;
}

AmilForward amil_forward(const AmilModel& model, const Matrix<double>& bag) {
  if (bag.cols() != model.dim())
    throw Error(ErrorCode::dim_mismatch, "bag dim " + std::to_string(bag.cols()) + " does not match model dim " +
                                             std::to_string(model.dim()));
  if (bag.rows() < 1) throw Error(ErrorCode::invalid_argument, "bag has no instances");
  const std::size_t k = bag.rows(), L = model.width(), C = model.classes();

  AmilForward f;
  f.hidden = Matrix<double>(k, L);
  f.scores.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    auto t = f.hidden.row(i);
    for (std::size_t l = 0; l < L; ++l) t[l] = std::tanh(simd::dot(model.V.row(l), bag.row(i)));
    f.scores[i] = simd::dot(model.w, t);
  }
  f.attention = softmax(f.scores);
  f.pooled.assign(model.dim(), 0.0);
  for (std::size_t i = 0; i < k; ++i) simd::axpy(f.attention[i], bag.row(i), f.pooled);
  f.logits.resize(C);
  for (std::size_t c = 0; c < C; ++c) f.logits[c] = simd::dot(model.U.row(c), f.pooled) + model.b[c];
  return f;
}

double amil_backward(const AmilModel& model, const Matrix<double>& bag, const AmilForward& f,
                     std::span<const double> soft_label, AmilModel& grad) {
  const std::size_t k = bag.rows(), L = model.width(), C = model.classes(), D = model.dim();
  std::vector<double> dlogits;
  const double loss = cross_entropy(f.logits, soft_label, &dlogits);

  std::vector<double> dz(D, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    grad.b[c] += dlogits[c];
    simd::axpy(dlogits[c], f.pooled, grad.U.row(c));
    simd::axpy(dlogits[c], model.U.row(c), dz);
  }

  // Softmax Jacobian: de_i = a_i (da_i - sum_j a_j da_j), da_i = dz . h_i
  std::vector<double> da(k);
  double mean_da = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    da[i] = simd::dot(dz, bag.row(i));
    mean_da += f.attention[i] * da[i];
  }
  std::vector<double> du(L);
  for (std::size_t i = 0; i < k; ++i) {
    const double de = f.attention[i] * (da[i] - mean_da);
    const auto t = f.hidden.row(i);
    simd::axpy(de, t, grad.w);
    for (std::size_t l = 0; l < L; ++l) du[l] = de * model.w[l] * (1.0 - t[l] * t[l]);
    for (std::size_t l = 0; l < L; ++l)
      if (du[l] != 0.0) simd::axpy(du[l], bag.row(i), grad.V.row(l));
  }
  return loss;
}

AmilModel amil_gradient(const AmilModel& model, const Matrix<double>& bag, std::span<const double> soft_label,
                        double* loss) {
  AmilModel grad{Matrix<double>(model.width(), model.dim()), std::vector<double>(model.width()),
                 Matrix<double>(model.classes(), model.dim()), std::vector<double>(model.classes())};
  const AmilForward f = amil_forward(model, bag);
  const double l = amil_backward(model, bag, f, soft_label, grad);
  if (loss) *loss = l;
  return grad;
}

// ----------------------------------------------------------------- MLP

std::vector<std::span<double>> MlpModel::tensors() { return {W1.values(), b1, W2.values(), b2}; }

std::vector<std::span<const double>> MlpModel::tensors() const {
  return {W1.values(), b1, W2.values(), b2};
}

MlpModel make_mlp(std::size_t input, std::size_t classes, std::size_t hidden, std::uint64_t seed) {
  if (input < 1 || hidden < 1 || classes < 2)
    throw Error(ErrorCode::invalid_argument, "MLP needs input >= 1, hidden >= 1, classes >= 2");
  Rng rng(seed);
  MlpModel m{Matrix<double>(hidden, input), std::vector<double>(hidden), Matrix<double>(classes, hidden),
             std::vector<double>(classes)};
  const double b_in = 1.0 / std::sqrt(static_cast<double>(input));
  const double b_hid = 1.0 / std::sqrt(static_cast<double>(hidden));
  fill_uniform(m.W1.values(), b_in, rng);
  fill_uniform(m.b1, b_in, rng);
  fill_uniform(m.W2.values(), b_hid, rng);
  fill_uniform(m.b2, b_hid, rng);
  return m;
}

namespace {

void check_mlp_input(const MlpModel& model, const Matrix<double>& bag) {
  if (bag.size() != model.input())
    throw Error(ErrorCode::dim_mismatch, "flattened bag has " + std::to_string(bag.size()) +
                                             " values but the MLP expects " + std::to_string(model.input()));
}

std::vector<double> mlp_hidden(const MlpModel& model, std::span<const double> x) {
  std::vector<double> h(model.hidden());
  for (std::size_t j = 0; j < h.size(); ++j) h[j] = std::max(0.0, simd::dot(model.W1.row(j), x) + model.b1[j]);
  return h;
}

}  // namespace

std::vector<double> mlp_forward(const MlpModel& model, const Matrix<double>& bag) {
  check_mlp_input(model, bag);
  const std::vector<double> h = mlp_hidden(model, bag.values());
  std::vector<double> logits(model.classes());
  for (std::size_t c = 0; c < logits.size(); ++c) logits[c] = simd::dot(model.W2.row(c), h) + model.b2[c];
  return logits;
}

double mlp_backward(const MlpModel& model, const Matrix<double>& bag, std::span<const double> soft_label,
                    MlpModel& grad) {
  check_mlp_input(model, bag);
  const auto x = bag.values();
  const std::vector<double> h = mlp_hidden(model, x);
  std::vector<double> logits(model.classes());
  for (std::size_t c = 0; c < logits.size(); ++c) logits[c] = simd::dot(model.W2.row(c), h) + model.b2[c];

  std::vector<double> dlogits;
  const double loss = cross_entropy(logits, soft_label, &dlogits);
  std::vector<double> dh(model.hidden(), 0.0);
  for (std::size_t c = 0; c < dlogits.size(); ++c) {
    grad.b2[c] += dlogits[c];
    simd::axpy(dlogits[c], h, grad.W2.row(c));
    simd::axpy(dlogits[c], model.W2.row(c), dh);
  }
  for (std::size_t j = 0; j < dh.size(); ++j) {
    if (h[j] <= 0.0) continue;  // ReLU gate
    grad.b1[j] += dh[j];
    simd::axpy(dh[j], x, grad.W1.row(j));
  }
  return loss;
}

MlpModel mlp_gradient(const MlpModel& model, const Matrix<double>& bag, std::span<const double> soft_label,
                      double* loss) {
  MlpModel grad{Matrix<double>(model.hidden(), model.input()), std::vector<double>(model.hidden()),
                Matrix<double>(model.classes(), model.hidden()), std::vector<double>(model.classes())};
  const double l = mlp_backward(model, bag, soft_label, grad);
  if (loss) *loss = l;
  return grad;
}

// ------------------------------------------------------------- variant

ClassifierKind kind_of(const Model& model) noexcept {
  return std::holds_alternative<AmilModel>(model) ? ClassifierKind::amil : ClassifierKind::mlp;
}

std::vector<double> model_logits(const Model& model, const Matrix<double>& bag) {
  if (const auto* a = std::get_if<AmilModel>(&model)) return amil_forward(*a, bag).logits;
  return mlp_forward(std::get<MlpModel>(model), bag);
}

double model_backward(const Model& model, const Matrix<double>& bag, std::span<const double> soft_label,
                      Model& grad) {
  if (const auto* a = std::get_if<AmilModel>(&model))
    return amil_backward(*a, bag, amil_forward(*a, bag), soft_label, std::get<AmilModel>(grad));
  return mlp_backward(std::get<MlpModel>(model), bag, soft_label, std::get<MlpModel>(grad));
}

Model zeros_like(const Model& model) {
  Model out = model;
  for (std::span<double> t : model_tensors(out)) std::fill(t.begin(), t.end(), 0.0);
  return out;
}

std::vector<std::span<double>> model_tensors(Model& model) {
  return std::visit([](auto& m) { return m.tensors(); }, model);
}

std::vector<std::span<const double>> model_tensors(const Model& model) {
  return std::visit([](const auto& m) { return m.tensors(); }, model);
}

}  // namespace slidevec
