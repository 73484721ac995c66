#include "diffnet.hpp"

#include "bytes.hpp"
#include "error.hpp"

#include <atomic>
#include <cmath>
#include <limits>

namespace milkid {

namespace {

std::atomic<uint64_t> g_next_version{1};

void require(bool ok, const char* what) {
  if (!ok) throw Error(Errc::ShapeMismatch, what);
}

Matrix apply_activation(const Matrix& pre, Activation act) {
  if (act == Activation::Relu) return pre.cwiseMax(0.0);
  return pre;
}

double log_sum_exp(const Vector& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

std::size_t ModelParams::input_dim() const {
  return embedder.empty() ? static_cast<std::size_t>(classifier_w.size())
                          : static_cast<std::size_t>(embedder.front().weight.cols());
}

std::size_t ModelParams::embedding_dim() const { return static_cast<std::size_t>(classifier_w.size()); }

void assign_new_version(ModelParams& params) { params.version = g_next_version.fetch_add(1); }

ModelParams init_params(const ModelShape& shape, uint64_t seed) {
  if (shape.input_dim < 1 || shape.hidden.empty() || shape.attention_dim < 1) {
    throw Error(Errc::InvalidConfig, "model needs D >= 1, at least one embedder layer and M >= 1");
  }
  Rng rng(seed);
  auto fill = [&rng](auto& tensor, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < tensor.size(); ++i) tensor.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
  };

  ModelParams p;
  std::size_t in = shape.input_dim;
  for (std::size_t out : shape.hidden) {
    if (out < 1) throw Error(Errc::InvalidConfig, "embedder layer width must be >= 1");
    DenseLayer layer;
    layer.weight.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    layer.bias.resize(static_cast<Eigen::Index>(out));
    layer.activation = Activation::Relu;
    fill(layer.weight, in);
    fill(layer.bias, in);
    p.embedder.push_back(std::move(layer));
    in = out;
  }
  const auto e = static_cast<Eigen::Index>(in);
  const auto m = static_cast<Eigen::Index>(shape.attention_dim);
  p.attention_v.resize(m, e);
  p.attention_w.resize(m);
  p.classifier_w.resize(e);
  fill(p.attention_v, in);
  fill(p.attention_w, shape.attention_dim);
  fill(p.classifier_w, in);
  Eigen::Map<Vector> b(&p.classifier_b, 1);
  fill(b, in);
  assign_new_version(p);
  return p;
}

ModelParams zeros_like(const ModelParams& params) {
  ModelParams z = params;
  for_each_tensor(z, z, [](auto& t, auto&) { t.setZero(); });
  z.version = 0;
  return z;
}

void validate_params(const ModelParams& params) {
  require(!params.embedder.empty(), "embedder has no layers");
  Eigen::Index in = params.embedder.front().weight.cols();
  for (const auto& layer : params.embedder) {
    require(layer.weight.cols() == in, "embedder layers are not chain-compatible");
    require(layer.bias.size() == layer.weight.rows(), "embedder bias size mismatch");
    in = layer.weight.rows();
  }
  require(in >= 1, "embedding dimension must be >= 1");
  require(params.attention_v.cols() == in, "attention V does not match the embedding dimension");
  require(params.attention_v.rows() >= 1 && params.attention_w.size() == params.attention_v.rows(),
          "attention w does not match attention V");
  require(params.classifier_w.size() == in, "classifier does not match the embedding dimension");
  bool finite = std::isfinite(params.classifier_b);
  for_each_tensor(params, params, [&finite](const auto& t, const auto&) { finite = finite && t.allFinite(); });
  if (!finite) throw Error(Errc::InvalidArgument, "model parameters contain non-finite values");
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  for_each_tensor(params, params, [&n](const auto& t, const auto&) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

uint64_t params_checksum(const ModelParams& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for_each_tensor(params, params, [&h](const auto& t, const auto&) {
    const uint64_t shape[2] = {static_cast<uint64_t>(t.rows()), static_cast<uint64_t>(t.cols())};
    h = fnv1a64(std::span(reinterpret_cast<const uint8_t*>(shape), sizeof(shape)), h);
    h = fnv1a64(std::span(reinterpret_cast<const uint8_t*>(t.data()),
                          static_cast<std::size_t>(t.size()) * sizeof(double)),
                h);
  });
  return h;
}

std::string_view pooling_name(PoolingMode mode) {
  switch (mode) {
    case PoolingMode::Attention: return "attention";
    case PoolingMode::InstanceMax: return "instance_max";
    case PoolingMode::InstanceMean: return "instance_mean";
  }
  return "attention";
}

PoolingMode parse_pooling(std::string_view name) {
  if (name == "attention" || name == "att") return PoolingMode::Attention;
  if (name == "instance_max" || name == "inst_max") return PoolingMode::InstanceMax;
  if (name == "instance_mean" || name == "inst_mean") return PoolingMode::InstanceMean;
  throw Error(Errc::InvalidConfig, "unknown pooling mode '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- forward

Matrix embed_instances(const Matrix& instances, const ModelParams& params) {
  require(!params.embedder.empty(), "embedder has no layers");
  require(instances.cols() == params.embedder.front().weight.cols(), "bag dimension does not match the embedder");
  Matrix h = instances;
  for (const auto& layer : params.embedder) {
    Matrix pre = h * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    h = apply_activation(pre, layer.activation);
  }
  return h;
}

Vector attention_scores(const Matrix& embeddings, const ModelParams& params) {
  require(embeddings.cols() == params.attention_v.cols(), "embeddings do not match attention V");
  require(embeddings.rows() >= 1, "attention needs at least one instance");
  const Matrix hidden = (embeddings * params.attention_v.transpose()).array().tanh();
  Vector logits = hidden * params.attention_w;
  logits.array() -= logits.maxCoeff();
  Vector e = logits.array().exp();
  return e / e.sum();
}

Vector bag_embedding(const Matrix& embeddings, const Vector& scores) {
  require(scores.size() == embeddings.rows(), "score count does not match instance count");
  return embeddings.transpose() * scores;
}

double bag_probability(const Vector& z, const ModelParams& params) {
  require(z.size() == params.classifier_w.size(), "bag embedding does not match the classifier");
  return sigmoid(params.classifier_w.dot(z) + params.classifier_b);
}

ForwardTrace forward(const Matrix& instances, const ModelParams& params, PoolingMode mode) {
  require(!params.embedder.empty(), "embedder has no layers");
  require(instances.rows() >= 1, "bag has no instances");
  require(instances.cols() == params.embedder.front().weight.cols(), "bag dimension does not match the embedder");

  ForwardTrace t;
  t.mode = mode;
  t.params_version = params.version;
  t.pre_activations.reserve(params.embedder.size());
  t.activations.reserve(params.embedder.size());
  const Matrix* h = &instances;
  for (const auto& layer : params.embedder) {
    Matrix pre = *h * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    t.activations.push_back(apply_activation(pre, layer.activation));
    t.pre_activations.push_back(std::move(pre));
    h = &t.activations.back();
  }
  const Matrix& g = t.activations.back();

  if (mode == PoolingMode::Attention) {
    require(g.cols() == params.attention_v.cols(), "embeddings do not match attention V");
    t.attention_hidden = (g * params.attention_v.transpose()).array().tanh();
    Vector logits = t.attention_hidden * params.attention_w;
    logits.array() -= logits.maxCoeff();
    Vector e = logits.array().exp();
    t.attention_scores = e / e.sum();
    t.bag_embedding = g.transpose() * t.attention_scores;
    t.bag_logit = params.classifier_w.dot(t.bag_embedding) + params.classifier_b;
    t.log_prob = log_sigmoid(t.bag_logit);
    t.log_one_minus_prob = log_sigmoid(-t.bag_logit);
    t.bag_probability = sigmoid(t.bag_logit);
    return t;
  }

  require(g.cols() == params.classifier_w.size(), "embeddings do not match the classifier");
  t.instance_logits = g * params.classifier_w;
  t.instance_logits.array() += params.classifier_b;
  if (mode == PoolingMode::InstanceMax) {
    Eigen::Index arg = 0;
    t.bag_logit = t.instance_logits.maxCoeff(&arg);
    t.argmax_instance = static_cast<std::size_t>(arg);
    t.log_prob = log_sigmoid(t.bag_logit);
    t.log_one_minus_prob = log_sigmoid(-t.bag_logit);
    t.bag_probability = sigmoid(t.bag_logit);
  } else {
    const double log_k = std::log(static_cast<double>(t.instance_logits.size()));
    Vector ls = t.instance_logits.unaryExpr([](double x) { return log_sigmoid(x); });
    Vector lns = t.instance_logits.unaryExpr([](double x) { return log_sigmoid(-x); });
    t.log_prob = log_sum_exp(ls) - log_k;
    t.log_one_minus_prob = log_sum_exp(lns) - log_k;
    t.bag_probability = std::exp(t.log_prob);
    t.bag_logit = t.log_prob - t.log_one_minus_prob;
  }
  return t;
}

double trace_loss(const ForwardTrace& trace, int target) {
  return target ? -trace.log_prob : -trace.log_one_minus_prob;
}

// ---------------------------------------------------------------- backward

namespace {

void check_trace(const ForwardTrace& trace, const Matrix& instances, const ModelParams& params) {
  if (trace.params_version != params.version) {
    throw Error(Errc::StaleTrace, "trace was computed from a different parameter snapshot");
  }
  if (trace.activations.size() != params.embedder.size() ||
      static_cast<Eigen::Index>(trace.instance_count()) != instances.rows()) {
    throw Error(Errc::StaleTrace, "trace does not belong to this bag/model");
  }
}

// Gradient of the bag NLL with respect to the instance embeddings G. Head
// parameter gradients are accumulated into `grads` when it is non-null.
Matrix backprop_head(const ForwardTrace& t, int target, const ModelParams& p, ModelParams* grads) {
  const Matrix& g = t.embeddings();
  const Eigen::Index k = g.rows();

  if (t.mode == PoolingMode::Attention) {
    const double dlogit = t.bag_probability - static_cast<double>(target);
    const Vector dz = dlogit * p.classifier_w;
    if (grads) {
      grads->classifier_w = dlogit * t.bag_embedding;
      grads->classifier_b = dlogit;
    }
    const Vector& a = t.attention_scores;
    Matrix dg = a * dz.transpose();
    const Vector da = g * dz;
    const Vector ds = a.array() * (da.array() - a.dot(da));
    const Matrix& th = t.attention_hidden;
    const Matrix du = (ds * p.attention_w.transpose()).array() * (1.0 - th.array().square());
    if (grads) {
      grads->attention_w = th.transpose() * ds;
      grads->attention_v = du.transpose() * g;
    }
    dg.noalias() += du * p.attention_v;
    return dg;
  }

  Vector dl = Vector::Zero(k);
  if (t.mode == PoolingMode::InstanceMax) {
    dl(static_cast<Eigen::Index>(t.argmax_instance)) = t.bag_probability - static_cast<double>(target);
  } else {
    const double inv_k = 1.0 / static_cast<double>(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      const double l = t.instance_logits(i);
      if (target) {
        // -(1/P) * p_i (1 - p_i) / K
        dl(i) = -std::exp(log_sigmoid(l) - t.log_prob) * sigmoid(-l) * inv_k;
      } else {
        // (1/(1-P)) * p_i (1 - p_i) / K
        dl(i) = std::exp(log_sigmoid(-l) - t.log_one_minus_prob) * sigmoid(l) * inv_k;
      }
    }
  }
  if (grads) {
    grads->classifier_w = g.transpose() * dl;
    grads->classifier_b = dl.sum();
  }
  return dl * p.classifier_w.transpose();
}

// Walks the embedder backwards from dG. Fills layer gradients when `grads`
// is non-null and returns dX when `want_input` is set.
Matrix backprop_embedder(const ForwardTrace& t, const Matrix& instances, Matrix dh,
                         const ModelParams& p, ModelParams* grads, bool want_input) {
  for (std::size_t l = p.embedder.size(); l-- > 0;) {
    const DenseLayer& layer = p.embedder[l];
    if (layer.activation == Activation::Relu) {
      dh.array() *= (t.pre_activations[l].array() > 0.0).cast<double>();
    }
    if (grads) {
      const Matrix& below = l == 0 ? instances : t.activations[l - 1];
      grads->embedder[l].weight.noalias() = dh.transpose() * below;
      grads->embedder[l].bias = dh.colwise().sum().transpose();
    }
    if (l == 0 && !want_input) return {};
    Matrix next = dh * layer.weight;
    dh = std::move(next);
  }
  return dh;
}

}  // namespace

ModelParams gradient_wrt_params(const ForwardTrace& trace, const Matrix& instances, int target,
                                const ModelParams& params) {
  check_trace(trace, instances, params);
  ModelParams grads = zeros_like(params);
  Matrix dg = backprop_head(trace, target, params, &grads);
  backprop_embedder(trace, instances, std::move(dg), params, &grads, false);
  return grads;
}

Matrix gradient_wrt_input(const ForwardTrace& trace, const Matrix& instances, int target,
                          const ModelParams& params) {
  check_trace(trace, instances, params);
  Matrix dg = backprop_head(trace, target, params, nullptr);
  return backprop_embedder(trace, instances, std::move(dg), params, nullptr, true);
}

// ---------------------------------------------------------------- checkpoints

namespace {
constexpr std::string_view kCheckpointMagic = "MILKIDCK";
constexpr uint32_t kCheckpointVersion = 1;
}  // namespace

std::vector<uint8_t> encode_checkpoint(const ModelParams& params, PoolingMode mode) {
  validate_params(params);
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<uint32_t>(mode));
  w.u32(static_cast<uint32_t>(params.embedder.size()));
  for (const auto& layer : params.embedder) w.u32(static_cast<uint32_t>(layer.activation));

  std::vector<std::pair<uint64_t, uint64_t>> shapes;
  for_each_tensor(params, params, [&shapes](const auto& t, const auto&) {
    shapes.emplace_back(static_cast<uint64_t>(t.rows()), static_cast<uint64_t>(t.cols()));
  });
  w.u32(static_cast<uint32_t>(shapes.size()));
  for (auto [r, c] : shapes) {
    if (c == 1) {
      w.u32(1);
      w.u64(r);
    } else {
      w.u32(2);
      w.u64(r);
      w.u64(c);
    }
  }
  for_each_tensor(params, params, [&w](const auto& t, const auto&) {
    // Row-major traversal regardless of storage order.
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) w.f64(t(i, j));
  });
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kCheckpointMagic.size() || r.raw(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw Error(Errc::BadMagic, "not a checkpoint file");
  }
  if (r.u32() != kCheckpointVersion) throw Error(Errc::BadMagic, "unsupported checkpoint version");
  Checkpoint ck;
  const uint32_t mode = r.u32();
  if (mode > 2) throw Error(Errc::BadMagic, "bad pooling mode in checkpoint");
  ck.mode = static_cast<PoolingMode>(mode);
  const uint32_t layers = r.u32();
  if (layers == 0 || layers > 64) throw Error(Errc::BadMagic, "bad layer count in checkpoint");
  ck.params.embedder.resize(layers);
  for (auto& layer : ck.params.embedder) {
    const uint32_t act = r.u32();
    if (act > 1) throw Error(Errc::BadMagic, "bad activation code in checkpoint");
    layer.activation = static_cast<Activation>(act);
  }
  const uint32_t tensors = r.u32();
  if (tensors != 2 * layers + 4) throw Error(Errc::ShapeMismatch, "checkpoint tensor count mismatch");
  std::vector<std::pair<uint64_t, uint64_t>> shapes;
  for (uint32_t i = 0; i < tensors; ++i) {
    const uint32_t rank = r.u32();
    if (rank == 1) {
      shapes.emplace_back(r.u64(), 1);
    } else if (rank == 2) {
      const uint64_t rows = r.u64();
      shapes.emplace_back(rows, r.u64());
    } else {
      throw Error(Errc::BadMagic, "bad tensor rank in checkpoint");
    }
  }
  uint64_t total = 0;
  for (auto [rows, cols] : shapes) total += rows * cols;
  if (r.remaining() != total * 8) throw Error(Errc::TruncatedPayload, "checkpoint payload size mismatch");

  std::size_t idx = 0;
  bool shapes_ok = true;
  for_each_tensor(ck.params, ck.params, [&](auto& t, auto&) {
    auto [rows, cols] = shapes[idx++];
    using T = std::decay_t<decltype(t)>;
    if constexpr (std::is_same_v<T, Vector>) {
      if (cols != 1) shapes_ok = false;
      t.resize(static_cast<Eigen::Index>(rows));
    } else if constexpr (T::ColsAtCompileTime == 1) {
      if (cols != 1 || rows != 1) shapes_ok = false;
      if (!shapes_ok) return;
    } else {
      t.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    }
    if (t.rows() != static_cast<Eigen::Index>(rows)) shapes_ok = false;
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = r.f64();
  });
  if (!shapes_ok) throw Error(Errc::ShapeMismatch, "checkpoint tensor shapes are inconsistent");
  validate_params(ck.params);
  assign_new_version(ck.params);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, PoolingMode mode) {
  write_file(path, encode_checkpoint(params, mode));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace milkid
