#pragma once

#include "data.hpp"
#include "diffnet.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace milkid {

enum class InversionMode { Plain, Sparse };

std::string_view inversion_mode_name(InversionMode mode);

struct InversionConfig {
  InversionMode mode = InversionMode::Sparse;
  std::size_t steps = 200;
  double learning_rate = 1e-4;
  double momentum = 0.9;  // plain mode only
  double lambda = 0.001;  // sparse mode only
  double prediction_threshold = 0.5;

  // Momentum SGD, 1000 updates at lr 0.001, momentum 0.9.
  static InversionConfig plain_defaults();
  // Proximal gradient, 200 updates at lr 1e-4, lambda 0.001.
  static InversionConfig sparse_defaults();
};

void validate_inversion_config(const InversionConfig& config);

struct InversionTrace {
  std::vector<double> loss;           // l(X^t), t = 0..T
  std::vector<double> zero_fraction;  // fraction of exactly-zero entries in X^t
  Matrix refined;                     // X^T

  std::string to_csv() const;
};

/// NLL of the model's own prediction under an attention-mode forward pass.
double inversion_loss(const Matrix& instances, const ModelParams& params, int predicted_label);

/// inversion_loss + lambda * sum |x|.
double sparse_objective(const Matrix& instances, const ModelParams& params, int predicted_label,
                        double lambda);

/// max(|x| - lambda, 0) * sign(x); zero results are always +0.0.
double soft_threshold(double x, double lambda);
/// Three-branch definition; must agree bit-for-bit with soft_threshold.
double soft_threshold_piecewise(double x, double lambda);
Matrix soft_threshold(const Matrix& x, double lambda);

double zero_fraction(const Matrix& x);

/// Momentum SGD on the inversion loss, clamping to [0,1] after every update.
InversionTrace invert_plain(const Bag& bag, const ModelParams& params, const InversionConfig& config);

/// X <- clamp01(soft_threshold(X - lr * grad l(X), lambda)), T times.
InversionTrace invert_sparse(const Bag& bag, const ModelParams& params, const InversionConfig& config);

struct Refinement {
  Bag bag;
  bool was_refined = false;
  int predicted_label = 0;
  double bag_probability = 0.0;
  std::optional<InversionTrace> trace;
};

/// Refines the bag with the configured inverter iff the model predicts it positive.
Refinement refine_if_positive(const Bag& bag, const ModelParams& params, double threshold,
                              const InversionConfig& config);

}  // namespace milkid
