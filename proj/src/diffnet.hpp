#pragma once

#include "data.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

namespace milkid {

enum class Activation { Linear, Relu };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::Relu;
};

/// All trainable weights. The same type doubles as the gradient record, so
/// optimizer code can walk parameters and gradients in lockstep.
struct ModelParams {
  std::vector<DenseLayer> embedder;  // D -> E
  Matrix attention_v;                // M x E
  Vector attention_w;                // M
  Vector classifier_w;               // E
  double classifier_b = 0.0;
  // Identifies the parameter snapshot a ForwardTrace was computed from.
  // Reassigned whenever the values change through the library.
  uint64_t version = 0;

  std::size_t input_dim() const;
  std::size_t embedding_dim() const;
  std::size_t attention_dim() const { return static_cast<std::size_t>(attention_w.size()); }
};

struct ModelShape {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden{128, 64};  // last entry is the embedding size E
  std::size_t attention_dim = 64;            // M
};

ModelParams init_params(const ModelShape& shape, uint64_t seed);
ModelParams zeros_like(const ModelParams& params);
void validate_params(const ModelParams& params);
void assign_new_version(ModelParams& params);

/// Applies f(param_block, other_block) to every tensor of two congruent records.
template <typename P, typename Q, typename F>
void for_each_tensor(P& a, Q& b, F&& f) {
  for (std::size_t l = 0; l < a.embedder.size(); ++l) {
    f(a.embedder[l].weight, b.embedder[l].weight);
    f(a.embedder[l].bias, b.embedder[l].bias);
  }
  f(a.attention_v, b.attention_v);
  f(a.attention_w, b.attention_w);
  f(a.classifier_w, b.classifier_w);
  Eigen::Map<std::conditional_t<std::is_const_v<P>, const Vector, Vector>> ab(&a.classifier_b, 1);
  Eigen::Map<std::conditional_t<std::is_const_v<Q>, const Vector, Vector>> bb(&b.classifier_b, 1);
  f(ab, bb);
}

std::size_t parameter_count(const ModelParams& params);
uint64_t params_checksum(const ModelParams& params);

enum class PoolingMode { Attention, InstanceMax, InstanceMean };

std::string_view pooling_name(PoolingMode mode);
PoolingMode parse_pooling(std::string_view name);

struct ForwardTrace {
  PoolingMode mode = PoolingMode::Attention;
  uint64_t params_version = 0;
  std::vector<Matrix> pre_activations;  // per embedder layer, K x out
  std::vector<Matrix> activations;      // per embedder layer, K x out; back() = G
  Matrix attention_hidden;              // tanh(G V^T), K x M
  Vector attention_scores;              // K; empty in instance modes
  Vector bag_embedding;                 // E; empty in instance modes
  Vector instance_logits;               // K; empty in attention mode
  std::size_t argmax_instance = 0;
  double bag_logit = 0.0;
  double bag_probability = 0.5;
  double log_prob = 0.0;            // log P, computed without cancellation
  double log_one_minus_prob = 0.0;  // log(1 - P)

  const Matrix& embeddings() const { return activations.back(); }
  std::size_t instance_count() const { return static_cast<std::size_t>(activations.back().rows()); }
};

Matrix embed_instances(const Matrix& instances, const ModelParams& params);
Vector attention_scores(const Matrix& embeddings, const ModelParams& params);
Vector bag_embedding(const Matrix& embeddings, const Vector& scores);
double bag_probability(const Vector& z, const ModelParams& params);

ForwardTrace forward(const Matrix& instances, const ModelParams& params, PoolingMode mode);
inline ForwardTrace forward(const Bag& bag, const ModelParams& params, PoolingMode mode) {
  return forward(bag.instances, params, mode);
}

/// Negative log-likelihood of `target` under the trace's bag probability.
double trace_loss(const ForwardTrace& trace, int target);

ModelParams gradient_wrt_params(const ForwardTrace& trace, const Matrix& instances, int target,
                                const ModelParams& params);
Matrix gradient_wrt_input(const ForwardTrace& trace, const Matrix& instances, int target,
                          const ModelParams& params);

inline ModelParams gradient_wrt_params(const ForwardTrace& trace, const Bag& bag, int target,
                                       const ModelParams& params) {
  return gradient_wrt_params(trace, bag.instances, target, params);
}
inline Matrix gradient_wrt_input(const ForwardTrace& trace, const Bag& bag, int target,
                                 const ModelParams& params) {
  return gradient_wrt_input(trace, bag.instances, target, params);
}

double sigmoid(double x);
double log_sigmoid(double x);

// ---------------------------------------------------------------- checkpoints
//
// Layout (all integers little-endian):
//   "MILKIDCK" | u32 version=1 | u32 pooling | u32 layer_count
//   | u32 activation[layer_count] | u32 tensor_count
//   | per tensor: u32 rank, u64 dims[rank]
//   | per tensor: f64 payload, row-major
// Tensors appear in for_each_tensor order.

struct Checkpoint {
  ModelParams params;
  PoolingMode mode = PoolingMode::Attention;
};

std::vector<uint8_t> encode_checkpoint(const ModelParams& params, PoolingMode mode);
Checkpoint decode_checkpoint(std::span<const uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, PoolingMode mode);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace milkid
