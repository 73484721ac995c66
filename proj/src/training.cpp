#include "training.hpp"

#include "error.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace milkid {

void validate_train_config(const TrainConfig& c) {
  auto bad = [](const std::string& what) { throw Error(Errc::InvalidConfig, what); };
  if (c.epochs < 1) bad("epochs must be >= 1");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) bad("learning_rate must be > 0");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) bad("adam_beta1 must lie in [0, 1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) bad("adam_beta2 must lie in [0, 1)");
  if (!(c.adam_epsilon > 0.0)) bad("adam_epsilon must be > 0");
  if (!(c.weight_decay >= 0.0) || !std::isfinite(c.weight_decay)) bad("weight_decay must be >= 0");
  if (!(c.prediction_threshold > 0.0 && c.prediction_threshold < 1.0)) {
    bad("prediction_threshold must lie in (0, 1)");
  }
  if (c.hidden.empty()) bad("embedder needs at least one layer");
  for (std::size_t h : c.hidden) {
    if (h < 1) bad("embedder layer widths must be >= 1");
  }
  if (c.attention_dim < 1) bad("attention_dim must be >= 1");
}

OptimizerState OptimizerState::for_params(const ModelParams& params) {
  return OptimizerState{zeros_like(params), zeros_like(params), 0};
}

double nll_loss(double p, int y) {
  constexpr double tiny = std::numeric_limits<double>::min();
  if (y) return -std::log(std::max(p, tiny));
  return -std::log1p(-std::min(p, 1.0 - std::numeric_limits<double>::epsilon() / 2));
}

void adam_step(ModelParams& params, const ModelParams& grads, OptimizerState& state,
               const TrainConfig& config) {
  if (parameter_count(params) != parameter_count(grads) ||
      parameter_count(params) != parameter_count(state.first_moment)) {
    throw Error(Errc::ShapeMismatch, "gradient record does not match the parameters");
  }
  state.step += 1;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double lr = config.learning_rate;
  const double eps = config.adam_epsilon;
  const double wd = config.weight_decay;

  // Walk the four congruent records tensor by tensor.
  std::vector<double*> p_ptrs, m_ptrs, v_ptrs;
  std::vector<const double*> g_ptrs;
  std::vector<std::size_t> sizes;
  for_each_tensor(params, grads, [&](auto& p, const auto& g) {
    if (p.rows() != g.rows() || p.cols() != g.cols()) {
      throw Error(Errc::ShapeMismatch, "gradient tensor shape mismatch");
    }
    p_ptrs.push_back(p.data());
    g_ptrs.push_back(g.data());
    sizes.push_back(static_cast<std::size_t>(p.size()));
  });
  for_each_tensor(state.first_moment, state.second_moment, [&](auto& m, auto& v) {
    m_ptrs.push_back(m.data());
    v_ptrs.push_back(v.data());
  });

  for (std::size_t t = 0; t < sizes.size(); ++t) {
    double* p = p_ptrs[t];
    const double* g = g_ptrs[t];
    double* m = m_ptrs[t];
    double* v = v_ptrs[t];
    for (std::size_t i = 0; i < sizes[t]; ++i) {
      const double gi = g[i] + wd * p[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  assign_new_version(params);
}

void sgd_momentum_step(Matrix& value, const Matrix& grad, Matrix& velocity, double lr, double momentum) {
  if (value.rows() != grad.rows() || value.cols() != grad.cols() || velocity.rows() != grad.rows() ||
      velocity.cols() != grad.cols()) {
    throw Error(Errc::ShapeMismatch, "momentum step operands differ in shape");
  }
  velocity = momentum * velocity + grad;
  value -= lr * velocity;
}

std::string TrainingLog::to_csv() const {
  std::string out = "epoch,train_loss,val_loss,train_acc,val_acc\n";
  char buf[160];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g\n", e.epoch, e.train_loss, e.val_loss,
                  e.train_acc, e.val_acc);
    out += buf;
  }
  return out;
}

namespace {

void require_threshold(double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(Errc::InvalidConfig, "threshold must lie in (0, 1)");
}

}  // namespace

Prediction predict_bag(const Matrix& instances, const ModelParams& params, PoolingMode mode,
                       double threshold) {
  require_threshold(threshold);
  Prediction p;
  p.trace = forward(instances, params, mode);
  p.label = p.trace.bag_probability >= threshold ? 1 : 0;
  return p;
}

EvalSummary evaluate_bags(const MilDataset& dataset, std::span<const std::size_t> indices,
                          const ModelParams& params, PoolingMode mode, double threshold) {
  require_threshold(threshold);
  EvalSummary s;
  if (indices.empty()) return s;
  std::size_t correct = 0;
  for (std::size_t idx : indices) {
    const Bag& bag = dataset.bags.at(idx);
    const int y = bag.bag_label.value_or(0);
    const ForwardTrace t = forward(bag, params, mode);
    s.loss += trace_loss(t, y);
    correct += ((t.bag_probability >= threshold ? 1 : 0) == y) ? 1 : 0;
  }
  s.loss /= static_cast<double>(indices.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return s;
}

namespace {

void check_split(const MilDataset& ds, std::span<const std::size_t> idx, const char* which) {
  if (idx.empty()) throw Error(Errc::EmptySplit, std::string(which) + " split is empty");
  bool pos = false, neg = false;
  for (std::size_t i : idx) {
    if (i >= ds.bags.size()) throw Error(Errc::InvalidArgument, "bag index out of range");
    const auto& label = ds.bags[i].bag_label;
    if (!label) throw Error(Errc::MissingLabels, "training requires bag labels");
    (*label ? pos : neg) = true;
  }
  if (!(pos && neg)) {
    throw Error(Errc::SingleClassSplit, std::string(which) + " split does not contain both classes");
  }
}

}  // namespace

TrainResult train(const MilDataset& dataset, std::span<const std::size_t> train_indices,
                  std::span<const std::size_t> validation_indices, PoolingMode mode,
                  const TrainConfig& config) {
  validate_train_config(config);
  check_split(dataset, train_indices, "training");
  check_split(dataset, validation_indices, "validation");
  for (std::size_t a : train_indices) {
    for (std::size_t b : validation_indices) {
      if (a == b) throw Error(Errc::InvalidArgument, "training and validation splits overlap");
    }
  }

  ModelShape shape;
  shape.input_dim = dataset.dim();
  shape.hidden = config.hidden;
  shape.attention_dim = config.attention_dim;
  ModelParams params = init_params(shape, derive_seed(config.seed, 0x1417));
  OptimizerState state = OptimizerState::for_params(params);

  TrainResult result;
  result.params = params;
  result.log.best_val_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_indices.begin(), train_indices.end());
  Rng shuffle_rng(derive_seed(config.seed, 0x5eed));
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t idx : order) {
      const Bag& bag = dataset.bags[idx];
      const int y = *bag.bag_label;
      const ForwardTrace t = forward(bag, params, mode);
      loss_sum += trace_loss(t, y);
      correct += ((t.bag_probability >= config.prediction_threshold ? 1 : 0) == y) ? 1 : 0;
      const ModelParams grads = gradient_wrt_params(t, bag, y, params);
      adam_step(params, grads, state, config);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    const EvalSummary val = evaluate_bags(dataset, validation_indices, params, mode, config.prediction_threshold);
    rec.val_loss = val.loss;
    rec.val_acc = val.accuracy;
    result.log.epochs.push_back(rec);
    if (rec.val_loss < result.log.best_val_loss) {
      result.log.best_val_loss = rec.val_loss;
      result.log.best_epoch = epoch;
      result.params = params;
    }
  }
  return result;
}

}  // namespace milkid
