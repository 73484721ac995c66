#pragma once

#include "data.hpp"
#include "diffnet.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace milkid {

struct TrainConfig {
  std::size_t epochs = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double learning_rate = 0.0005;
  double weight_decay = 0.0001;
  uint64_t seed = 0;
  double prediction_threshold = 0.5;
  std::vector<std::size_t> hidden{128, 64};
  std::size_t attention_dim = 64;
};

/// Throws InvalidConfig if any field violates its constraint.
void validate_train_config(const TrainConfig& config);

struct OptimizerState {
  ModelParams first_moment;
  ModelParams second_moment;
  uint64_t step = 0;

  static OptimizerState for_params(const ModelParams& params);
};

/// -y log p - (1-y) log(1-p), with p clamped away from {0,1} only as far as
/// needed to keep the value finite.
double nll_loss(double p, int y);

/// Coupled-L2 Adam: g += weight_decay * param, then the bias-corrected update.
void adam_step(ModelParams& params, const ModelParams& grads, OptimizerState& state,
               const TrainConfig& config);

/// velocity = momentum * velocity + grad; value -= lr * velocity.
void sgd_momentum_step(Matrix& value, const Matrix& grad, Matrix& velocity, double lr, double momentum);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;

  std::string to_csv() const;
};

struct TrainResult {
  ModelParams params;
  TrainingLog log;
};

struct Prediction {
  int label = 0;
  ForwardTrace trace;
};

/// Label is 1 iff P >= threshold.
Prediction predict_bag(const Matrix& instances, const ModelParams& params, PoolingMode mode,
                       double threshold);
inline Prediction predict_bag(const Bag& bag, const ModelParams& params, PoolingMode mode,
                              double threshold) {
  return predict_bag(bag.instances, params, mode, threshold);
}

struct EvalSummary {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalSummary evaluate_bags(const MilDataset& dataset, std::span<const std::size_t> indices,
                          const ModelParams& params, PoolingMode mode, double threshold);

/// Bag-at-a-time Adam training with early stopping on validation NLL.
TrainResult train(const MilDataset& dataset, std::span<const std::size_t> train_indices,
                  std::span<const std::size_t> validation_indices, PoolingMode mode,
                  const TrainConfig& config);

}  // namespace milkid
