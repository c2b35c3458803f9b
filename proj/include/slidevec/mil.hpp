#pragma once

// Attention-MIL and MLP bag classifiers with hand-derived gradients.
// Parameters and all arithmetic are double precision.

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "slidevec/matrix.hpp"

namespace slidevec {

enum class ClassifierKind { amil, mlp };

std::string to_string(ClassifierKind kind);
ClassifierKind classifier_from_string(const std::string& name);

/// Attention pooling over bag rows h_i:
///   e_i = w . tanh(V h_i),  a = softmax(e),  z = sum_i a_i h_i,  logits = U z + b.
/// The output does not depend on row order.
struct AmilModel {
  Matrix<double> V;       // width x dim
  std::vector<double> w;  // width
  Matrix<double> U;       // classes x dim
  std::vector<double> b;  // classes

  std::size_t dim() const noexcept { return V.cols(); }
  std::size_t width() const noexcept { return V.rows(); }
  std::size_t classes() const noexcept { return U.rows(); }

  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
};

// Uniform(+-1/sqrt(fan_in)) init.
AmilModel make_amil(std::size_t dim, std::size_t classes, std::size_t width, std::uint64_t seed);

struct AmilForward {
  std::vector<double> logits;
  std::vector<double> attention;  // one weight per bag row, sums to 1
  std::vector<double> scores;     // pre-softmax e_i
  Matrix<double> hidden;          // rows x width, tanh(V h_i)
  std::vector<double> pooled;     // z
};

AmilForward amil_forward(const AmilModel& model, const Matrix<double>& bag);

// Gradient of the soft-label cross-entropy, added into `grad` (same shapes
// as `model`). Returns the loss.
double amil_backward(const AmilModel& model, const Matrix<double>& bag, const AmilForward& fwd,
                     std::span<const double> soft_label, AmilModel& grad);

AmilModel amil_gradient(const AmilModel& model, const Matrix<double>& bag,
                        std::span<const double> soft_label, double* loss = nullptr);

/// affine -> ReLU -> affine over the row-major flattened bag.
struct MlpModel {
  Matrix<double> W1;       // hidden x input
  std::vector<double> b1;  // hidden
  Matrix<double> W2;       // classes x hidden
  std::vector<double> b2;  // classes

  std::size_t input() const noexcept { return W1.cols(); }
  std::size_t hidden() const noexcept { return W1.rows(); }
  std::size_t classes() const noexcept { return W2.rows(); }

  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
};

MlpModel make_mlp(std::size_t input, std::size_t classes, std::size_t hidden, std::uint64_t seed);

std::vector<double> mlp_forward(const MlpModel& model, const Matrix<double>& bag);
double mlp_backward(const MlpModel& model, const Matrix<double>& bag, std::span<const double> soft_label,
                    MlpModel& grad);
MlpModel mlp_gradient(const MlpModel& model, const Matrix<double>& bag, std::span<const double> soft_label,
                      double* loss = nullptr);

using Model = std::variant<AmilModel, MlpModel>;

ClassifierKind kind_of(const Model& model) noexcept;
std::vector<double> model_logits(const Model& model, const Matrix<double>& bag);
double model_backward(const Model& model, const Matrix<double>& bag, std::span<const double> soft_label,
                      Model& grad);
Model zeros_like(const Model& model);
std::vector<std::span<double>> model_tensors(Model& model);
std::vector<std::span<const double>> model_tensors(const Model& model);

// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> x);

// -sum_c y_c log softmax(logits)_c; `dlogits` (if non-null) receives
// softmax(logits) * sum(y) - y.
double cross_entropy(std::span<const double> logits, std::span<const double> soft_label,
                     std::vector<double>* dlogits = nullptr);

// Index of the largest logit; ties go to the smaller class.
int argmax(std::span<const double> logits) noexcept;

}  // namespace slidevec
