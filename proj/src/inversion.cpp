#include "inversion.hpp"

#include "error.hpp"
#include "training.hpp"

#include <cmath>
#include <cstdio>

namespace milkid {

std::string_view inversion_mode_name(InversionMode mode) {
  return mode == InversionMode::Plain ? "plain" : "sparse";
}

InversionConfig InversionConfig::plain_defaults() {
  InversionConfig c;
  c.mode = InversionMode::Plain;
  c.steps = 1000;
  c.learning_rate = 0.001;
  c.momentum = 0.9;
  c.lambda = 0.0;
  return c;
}

InversionConfig InversionConfig::sparse_defaults() {
  InversionConfig c;
  c.mode = InversionMode::Sparse;
  c.steps = 200;
  c.learning_rate = 1e-4;
  c.momentum = 0.0;
  c.lambda = 0.001;
  return c;
}

void validate_inversion_config(const InversionConfig& c) {
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) {
    throw Error(Errc::InvalidConfig, "inversion learning rate must be > 0");
  }
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) {
    throw Error(Errc::InvalidConfig, "inversion momentum must lie in [0, 1)");
  }
  if (c.lambda < 0.0) throw Error(Errc::NegativeLambda, "lambda must be >= 0");
  if (!std::isfinite(c.lambda)) throw Error(Errc::InvalidConfig, "lambda must be finite");
  if (!(c.prediction_threshold > 0.0 && c.prediction_threshold < 1.0)) {
    throw Error(Errc::InvalidConfig, "prediction threshold must lie in (0, 1)");
  }
}

std::string InversionTrace::to_csv() const {
  std::string out = "step,loss,zero_fraction\n";
  char buf[96];
  for (std::size_t t = 0; t < loss.size(); ++t) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g\n", t, loss[t], zero_fraction[t]);
    out += buf;
  }
  return out;
}

double inversion_loss(const Matrix& instances, const ModelParams& params, int predicted_label) {
  return trace_loss(forward(instances, params, PoolingMode::Attention), predicted_label);
}

double sparse_objective(const Matrix& instances, const ModelParams& params, int predicted_label,
                        double lambda) {
  if (lambda < 0.0) throw Error(Errc::NegativeLambda, "lambda must be >= 0");
  return inversion_loss(instances, params, predicted_label) + lambda * instances.cwiseAbs().sum();
}

double soft_threshold(double x, double lambda) {
  if (lambda < 0.0) throw Error(Errc::NegativeLambda, "lambda must be >= 0");
  const double sign = static_cast<double>((x > 0.0) - (x < 0.0));
  // "+ 0.0" turns a -0.0 product into +0.0 and is exact otherwise.
  return std::max(std::abs(x) - lambda, 0.0) * sign + 0.0;
}

double soft_threshold_piecewise(double x, double lambda) {
  if (lambda < 0.0) throw Error(Errc::NegativeLambda, "lambda must be >= 0");
  if (x > lambda) return x - lambda;
  if (x < -lambda) return x + lambda;
  return 0.0;
}

Matrix soft_threshold(const Matrix& x, double lambda) {
  if (lambda < 0.0) throw Error(Errc::NegativeLambda, "lambda must be >= 0");
  return x.unaryExpr([lambda](double v) {
    const double sign = static_cast<double>((v > 0.0) - (v < 0.0));
    return std::max(std::abs(v) - lambda, 0.0) * sign + 0.0;
  });
}

double zero_fraction(const Matrix& x) {
  if (x.size() == 0) return 0.0;
  return static_cast<double>((x.array() == 0.0).count()) / static_cast<double>(x.size());
}

namespace {

void clamp01(Matrix& x) { x = x.cwiseMax(0.0).cwiseMin(1.0); }

void require_positive(const Bag& bag, const ModelParams& params, const InversionConfig& config) {
  const ForwardTrace t = forward(bag, params, PoolingMode::Attention);
  if (t.bag_probability < config.prediction_threshold) {
    throw Error(Errc::NonPositivePrediction, "inversion requested for a bag predicted negative");
  }
}

// Shared loop: `update` receives (X, grad) and must leave X feasible.
template <typename Update>
InversionTrace run_inversion(const Bag& bag, const ModelParams& params, std::size_t steps, Update&& update) {
  InversionTrace out;
  out.loss.reserve(steps + 1);
  out.zero_fraction.reserve(steps + 1);
  Matrix x = bag.instances;
  for (std::size_t t = 0; t < steps; ++t) {
    const ForwardTrace fw = forward(x, params, PoolingMode::Attention);
    out.loss.push_back(trace_loss(fw, 1));
    out.zero_fraction.push_back(zero_fraction(x));
    const Matrix grad = gradient_wrt_input(fw, x, 1, params);
    update(x, grad);
  }
  out.loss.push_back(inversion_loss(x, params, 1));
  out.zero_fraction.push_back(zero_fraction(x));
  out.refined = std::move(x);
  return out;
}

}  // namespace

// The predicted label is frozen at 1 for the whole run: callers only invert
// bags the model already classified positive.
InversionTrace invert_plain(const Bag& bag, const ModelParams& params, const InversionConfig& config) {
  validate_inversion_config(config);
  if (config.mode != InversionMode::Plain) throw Error(Errc::InvalidConfig, "invert_plain needs a plain config");
  require_positive(bag, params, config);
  Matrix velocity = Matrix::Zero(bag.instances.rows(), bag.instances.cols());
  return run_inversion(bag, params, config.steps, [&](Matrix& x, const Matrix& grad) {
    sgd_momentum_step(x, grad, velocity, config.learning_rate, config.momentum);
    clamp01(x);
  });
}

InversionTrace invert_sparse(const Bag& bag, const ModelParams& params, const InversionConfig& config) {
  validate_inversion_config(config);
  if (config.mode != InversionMode::Sparse) throw Error(Errc::InvalidConfig, "invert_sparse needs a sparse config");
  require_positive(bag, params, config);
  return run_inversion(bag, params, config.steps, [&](Matrix& x, const Matrix& grad) {
    Matrix stepped = x - config.learning_rate * grad;
    x = soft_threshold(stepped, config.lambda);
    clamp01(x);
  });
}

Refinement refine_if_positive(const Bag& bag, const ModelParams& params, double threshold,
                              const InversionConfig& config) {
  InversionConfig cfg = config;
  cfg.prediction_threshold = threshold;
  validate_inversion_config(cfg);
  const Prediction pred = predict_bag(bag, params, PoolingMode::Attention, threshold);
  Refinement r;
  r.predicted_label = pred.label;
  r.bag_probability = pred.trace.bag_probability;
  if (pred.label != 1) {
    r.bag = bag;
    return r;
  }
  InversionTrace trace = cfg.mode == InversionMode::Plain ? invert_plain(bag, params, cfg)
                                                          : invert_sparse(bag, params, cfg);
  r.bag = bag;
  r.bag.instances = trace.refined;
  r.was_refined = true;
  r.trace = std::move(trace);
  return r;
}

}  // namespace milkid
