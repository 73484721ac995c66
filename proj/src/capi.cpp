#include "milkid/milkid.h"

#include "bytes.hpp"
#include "dataset_io.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "heatmap.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <limits>
#include <memory>
#include <optional>
#include <new>
#include <string>
#include <thread>
#include <vector>

struct milkid_dataset {
  milkid::MilDataset data;
  std::vector<std::string> warnings;
};

struct milkid_split {
  milkid::SplitPlan plan;
};

struct milkid_model {
  milkid::ModelParams params;
  milkid::PoolingMode mode = milkid::PoolingMode::Attention;
  milkid::TrainingLog log;
  bool has_log = false;
};

struct milkid_kid {
  milkid::KidResult result;
  double original_zero_fraction = 0.0;
};

struct milkid_report {
  milkid::ExperimentReport report;
};

namespace {

using namespace milkid;

thread_local std::string g_last_error;

struct BufferTooSmall {};

void need_capacity(size_t capacity, size_t n) {
  if (capacity < n) throw BufferTooSmall{};
}

milkid_status fail(milkid_status status, const char* message) {
  g_last_error = message;
  return status;
}

template <class F>
milkid_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return MILKID_OK;
  } catch (const Error& e) {
    return fail(static_cast<milkid_status>(e.code()), e.what());
  } catch (const BufferTooSmall&) {
    return fail(MILKID_BUFFER_TOO_SMALL, "output buffer too small");
  } catch (const std::bad_alloc&) {
    return fail(MILKID_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(MILKID_INTERNAL, e.what());
  } catch (...) {
    return fail(MILKID_INTERNAL, "unknown failure");
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw Error(Errc::InvalidArgument, what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

const Bag& bag_at(const milkid_dataset* ds, size_t index) {
  require(ds != nullptr, "dataset is null");
  if (index >= ds->data.bags.size()) throw Error(Errc::InvalidArgument, "bag index out of range");
  return ds->data.bags[index];
}

std::vector<std::size_t> index_vector(const size_t* p, size_t n) {
  require(p != nullptr || n == 0, "index array is null");
  return std::vector<std::size_t>(p, p + n);
}

TrainConfig to_core(const milkid_train_config& c) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.learning_rate = c.learning_rate;
  t.weight_decay = c.weight_decay;
  t.adam_beta1 = c.adam_beta1;
  t.adam_beta2 = c.adam_beta2;
  t.adam_epsilon = c.adam_epsilon;
  t.prediction_threshold = c.prediction_threshold;
  t.seed = c.seed;
  if (c.hidden_count > MILKID_MAX_HIDDEN) throw Error(Errc::InvalidConfig, "too many hidden layers");
  t.hidden.assign(c.hidden, c.hidden + c.hidden_count);
  t.attention_dim = c.attention_dim;
  return t;
}

InversionConfig to_core(const milkid_inversion_config& c) {
  if (c.mode != MILKID_INVERT_PLAIN && c.mode != MILKID_INVERT_SPARSE) {
    throw Error(Errc::InvalidConfig, "unknown inversion mode");
  }
  InversionConfig i = c.mode == MILKID_INVERT_PLAIN ? InversionConfig::plain_defaults()
                                                    : InversionConfig::sparse_defaults();
  i.steps = c.steps;
  i.learning_rate = c.learning_rate;
  i.momentum = c.momentum;
  i.lambda = c.lambda;
  return i;
}

milkid_inversion_config from_core(const InversionConfig& i) {
  milkid_inversion_config c{};
  c.mode = i.mode == InversionMode::Plain ? MILKID_INVERT_PLAIN : MILKID_INVERT_SPARSE;
  c.steps = i.steps;
  c.learning_rate = i.learning_rate;
  c.momentum = i.momentum;
  c.lambda = i.lambda;
  return c;
}

unsigned method_bit(Method m) { return 1u << static_cast<unsigned>(m); }

Method bit_method(unsigned bit) {
  for (Method m : all_methods()) {
    if (method_bit(m) == bit) return m;
  }
  throw Error(Errc::InvalidArgument, "not a single method bit");
}

ExperimentConfig to_core(const milkid_experiment_config& c) {
  ExperimentConfig e;
  e.methods.clear();
  for (Method m : all_methods()) {
    if (c.methods & method_bit(m)) e.methods.push_back(m);
  }
  if (c.methods & ~static_cast<unsigned>(MILKID_METHOD_ALL)) throw Error(Errc::InvalidConfig, "unknown method bits");
  e.train = to_core(c.train);
  e.validation_fraction = c.validation_fraction;
  e.plain = to_core(c.plain);
  e.sparse = to_core(c.sparse);
  if (e.plain.mode != InversionMode::Plain || e.sparse.mode != InversionMode::Sparse) {
    throw Error(Errc::InvalidConfig, "inversion configs must be plain and sparse respectively");
  }
  require(c.lambdas != nullptr || c.lambda_count == 0, "lambda array is null");
  require(c.kid_thresholds != nullptr || c.kid_threshold_count == 0, "threshold array is null");
  e.lambdas.assign(c.lambdas, c.lambdas + c.lambda_count);
  e.kid_thresholds.assign(c.kid_thresholds, c.kid_thresholds + c.kid_threshold_count);
  e.jobs = c.jobs;
  e.seed = c.seed;
  return e;
}

constexpr double kDefaultLambdas[] = {0.0005, 0.001, 0.002, 0.003};
constexpr double kDefaultThresholds[] = {0.1, 0.2, 0.3, 0.4, 0.5};

}  // namespace

extern "C" {

const char* milkid_status_name(milkid_status status) {
  switch (status) {
    case MILKID_OK: return "Ok";
    case MILKID_BUFFER_TOO_SMALL: return "BufferTooSmall";
    case MILKID_INTERNAL: return "Internal";
    default: break;
  }
  if (status >= MILKID_INVALID_ARGUMENT && status <= MILKID_NO_GRID) return errc_name(static_cast<Errc>(status));
  return "Unknown";
}

const char* milkid_last_error_message(void) { return g_last_error.c_str(); }

const char* milkid_version(void) { return "1.0.0"; }

void milkid_string_free(char* text) { std::free(text); }

void milkid_hash_text(const char* text, char out[17]) {
  const std::string h = hex64(fnv1a64(std::string_view(text ? text : "")));
  std::memcpy(out, h.c_str(), 17);
}

milkid_status milkid_hash_file(const char* path, char out[17]) {
  return guarded([&] {
    require(path && out, "null argument");
    const std::string h = hex64(fnv1a64(read_file(path)));
    std::memcpy(out, h.c_str(), 17);
  });
}

// ---------------------------------------------------------------- datasets

void milkid_synthetic_defaults(milkid_synthetic_params* p) {
  if (!p) return;
  const SyntheticParams d;
  *p = {d.bag_count, d.instances_per_bag, d.dim, d.positive_fraction, d.key_rate,
        d.signal_strength, d.noise_level, d.seed};
}

void milkid_mnist_defaults(milkid_mnist_params* p) {
  if (!p) return;
  const MnistBagParams d;
  *p = {d.grid_side, d.key_digit, d.bag_count, d.positive_fraction, d.key_rate, d.seed};
}

milkid_status milkid_dataset_synthetic(const milkid_synthetic_params* p, milkid_dataset** out) {
  return guarded([&] {
    require(p && out, "null argument");
    SyntheticParams s;
    s.bag_count = p->bag_count;
    s.instances_per_bag = p->instances_per_bag;
    s.dim = p->dim;
    s.positive_fraction = p->positive_fraction;
    s.key_rate = p->key_rate;
    s.signal_strength = p->signal_strength;
    s.noise_level = p->noise_level;
    s.seed = p->seed;
    auto h = std::make_unique<milkid_dataset>();
    h->data = make_synthetic_bags(s, &h->warnings);
    *out = h.release();
  });
}

milkid_status milkid_dataset_mnist(const char* images_path, const char* labels_path, const milkid_mnist_params* p,
                                   milkid_dataset** out) {
  return guarded([&] {
    require(images_path && labels_path && p && out, "null argument");
    MnistBagParams m;
    m.grid_side = p->grid_side;
    m.key_digit = p->key_digit;
    m.bag_count = p->bag_count;
    m.positive_fraction = p->positive_fraction;
    m.key_rate = p->key_rate;
    m.seed = p->seed;
    const IdxTensor images = load_idx(images_path);
    const IdxTensor labels = load_idx(labels_path);
    auto h = std::make_unique<milkid_dataset>();
    h->data = make_mnist_bags(images, labels, m);
    *out = h.release();
  });
}

milkid_status milkid_dataset_load(const char* path, milkid_dataset** out) {
  return guarded([&] {
    require(path && out, "null argument");
    auto h = std::make_unique<milkid_dataset>();
    h->data = load_dataset(path);
    *out = h.release();
  });
}

milkid_status milkid_dataset_save(const milkid_dataset* ds, const char* path) {
  return guarded([&] {
    require(ds && path, "null argument");
    save_dataset(path, ds->data);
  });
}

milkid_status milkid_dataset_manifest(const milkid_dataset* ds, const char* container_name, char** out_text) {
  return guarded([&] {
    require(ds && container_name && out_text, "null argument");
    const auto bytes = encode_dataset(ds->data);
    *out_text = dup_string(dataset_manifest(ds->data, container_name, bytes));
  });
}

void milkid_dataset_free(milkid_dataset* ds) { delete ds; }

size_t milkid_dataset_bag_count(const milkid_dataset* ds) { return ds ? ds->data.bags.size() : 0; }

size_t milkid_dataset_dim(const milkid_dataset* ds) { return ds ? ds->data.dim() : 0; }

size_t milkid_dataset_grid_side(const milkid_dataset* ds) {
  return ds && ds->data.grid.present() ? ds->data.grid.grid_side : 0;
}

size_t milkid_dataset_warning_count(const milkid_dataset* ds) { return ds ? ds->warnings.size() : 0; }

const char* milkid_dataset_warning(const milkid_dataset* ds, size_t index) {
  return ds && index < ds->warnings.size() ? ds->warnings[index].c_str() : nullptr;
}

milkid_status milkid_dataset_bag_info(const milkid_dataset* ds, size_t bag, milkid_bag_info* out) {
  return guarded([&] {
    require(out != nullptr, "null argument");
    const Bag& b = bag_at(ds, bag);
    out->id = b.id.c_str();
    out->instance_count = b.size();
    out->bag_label = b.bag_label ? *b.bag_label : -1;
    out->has_instance_labels = b.instance_labels ? 1 : 0;
  });
}

milkid_status milkid_dataset_instance_labels(const milkid_dataset* ds, size_t bag, uint8_t* out, size_t capacity) {
  return guarded([&] {
    const Bag& b = bag_at(ds, bag);
    if (!b.instance_labels) throw Error(Errc::MissingLabels, "bag has no instance labels");
    need_capacity(capacity, b.size());
    require(out != nullptr, "null argument");
    std::copy(b.instance_labels->begin(), b.instance_labels->end(), out);
  });
}

milkid_status milkid_dataset_stats_get(const milkid_dataset* ds, milkid_dataset_stats* out) {
  return guarded([&] {
    require(ds && out, "null argument");
    const DatasetStats s = dataset_stats(ds->data);
    *out = {};
    out->bag_count = s.bag_count;
    out->positive_bags = s.positive_bags;
    out->positive_bag_pct = s.positive_bag_pct;
    out->negative_bag_pct = s.negative_bag_pct;
    if (s.instances) {
      out->has_instance_stats = 1;
      out->instance_count = s.instances->instance_count;
      out->positive_instances = s.instances->positive_instances;
      out->positive_instance_pct = s.instances->positive_pct;
      out->negative_instance_pct = s.instances->negative_pct;
    }
  });
}

// ---------------------------------------------------------------- splits

milkid_status milkid_split_kfold(const milkid_dataset* ds, size_t fold_count, size_t repeat_count, uint64_t seed,
                                 milkid_split** out) {
  return guarded([&] {
    require(ds && out, "null argument");
    auto h = std::make_unique<milkid_split>();
    h->plan = kfold_split(ds->data, fold_count, repeat_count, seed);
    *out = h.release();
  });
}

void milkid_split_free(milkid_split* split) { delete split; }

size_t milkid_split_fold_count(const milkid_split* split) { return split ? split->plan.fold_count : 0; }

size_t milkid_split_repeat_count(const milkid_split* split) { return split ? split->plan.repeat_count : 0; }

milkid_status milkid_split_members(const milkid_split* split, size_t repeat, size_t fold, int complement,
                                   size_t* out, size_t capacity, size_t* count) {
  return guarded([&] {
    require(split && count, "null argument");
    if (repeat >= split->plan.repeat_count || fold >= split->plan.fold_count) {
      throw Error(Errc::InvalidArgument, "repeat or fold out of range");
    }
    const auto members = complement ? split->plan.complement(repeat, fold) : split->plan.fold_members(repeat, fold);
    *count = members.size();
    need_capacity(capacity, members.size());
    require(out != nullptr || members.empty(), "null argument");
    std::copy(members.begin(), members.end(), out);
  });
}

milkid_status milkid_holdout(const milkid_dataset* ds, const size_t* pool, size_t pool_count,
                             double validation_fraction, uint64_t seed, size_t* train_out, size_t* train_count,
                             size_t* validation_out, size_t* validation_count) {
  return guarded([&] {
    require(ds && train_out && train_count && validation_out && validation_count, "null argument");
    const auto p = index_vector(pool, pool_count);
    const Holdout h = stratified_holdout(ds->data, p, validation_fraction, seed);
    std::copy(h.train.begin(), h.train.end(), train_out);
    std::copy(h.validation.begin(), h.validation.end(), validation_out);
    *train_count = h.train.size();
    *validation_count = h.validation.size();
  });
}

// ---------------------------------------------------------------- training

void milkid_train_defaults(milkid_train_config* c) {
  if (!c) return;
  const TrainConfig d;
  *c = {};
  c->epochs = d.epochs;
  c->learning_rate = d.learning_rate;
  c->weight_decay = d.weight_decay;
  c->adam_beta1 = d.adam_beta1;
  c->adam_beta2 = d.adam_beta2;
  c->adam_epsilon = d.adam_epsilon;
  c->prediction_threshold = d.prediction_threshold;
  c->seed = d.seed;
  c->hidden_count = d.hidden.size();
  std::copy(d.hidden.begin(), d.hidden.end(), c->hidden);
  c->attention_dim = d.attention_dim;
}

milkid_status milkid_train_config_validate(const milkid_train_config* c) {
  return guarded([&] {
    require(c != nullptr, "null argument");
    validate_train_config(to_core(*c));
  });
}

const char* milkid_pooling_name(milkid_pooling pooling) {
  switch (pooling) {
    case MILKID_POOL_ATTENTION: return "attention";
    case MILKID_POOL_INSTANCE_MAX: return "instance_max";
    case MILKID_POOL_INSTANCE_MEAN: return "instance_mean";
  }
  return "unknown";
}

milkid_status milkid_pooling_parse(const char* name, milkid_pooling* out) {
  return guarded([&] {
    require(name && out, "null argument");
    *out = static_cast<milkid_pooling>(parse_pooling(name));
  });
}

milkid_status milkid_train(const milkid_dataset* ds, const size_t* train_idx, size_t train_count,
                           const size_t* validation, size_t validation_count, milkid_pooling pooling,
                           const milkid_train_config* config, milkid_model** out) {
  return guarded([&] {
    require(ds && config && out, "null argument");
    if (pooling < MILKID_POOL_ATTENTION || pooling > MILKID_POOL_INSTANCE_MEAN) {
      throw Error(Errc::InvalidConfig, "unknown pooling mode");
    }
    const auto tr = index_vector(train_idx, train_count);
    const auto va = index_vector(validation, validation_count);
    const auto mode = static_cast<PoolingMode>(pooling);
    TrainResult result = milkid::train(ds->data, tr, va, mode, to_core(*config));
    auto h = std::make_unique<milkid_model>();
    h->params = std::move(result.params);
    h->mode = mode;
    h->log = std::move(result.log);
    h->has_log = true;
    *out = h.release();
  });
}

milkid_status milkid_model_save(const milkid_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "null argument");
    save_checkpoint(path, model->params, model->mode);
  });
}

milkid_status milkid_model_load(const char* path, milkid_model** out) {
  return guarded([&] {
    require(path && out, "null argument");
    Checkpoint ck = load_checkpoint(path);
    auto h = std::make_unique<milkid_model>();
    h->params = std::move(ck.params);
    h->mode = ck.mode;
    *out = h.release();
  });
}

void milkid_model_free(milkid_model* model) { delete model; }

milkid_pooling milkid_model_pooling(const milkid_model* model) {
  return model ? static_cast<milkid_pooling>(model->mode) : MILKID_POOL_ATTENTION;
}

uint64_t milkid_model_checksum(const milkid_model* model) { return model ? params_checksum(model->params) : 0; }

size_t milkid_model_parameter_count(const milkid_model* model) {
  return model ? parameter_count(model->params) : 0;
}

milkid_status milkid_model_train_log(const milkid_model* model, char** out_csv) {
  return guarded([&] {
    require(model && out_csv, "null argument");
    *out_csv = dup_string(model->has_log ? model->log.to_csv() : std::string());
  });
}

size_t milkid_model_best_epoch(const milkid_model* model) { return model && model->has_log ? model->log.best_epoch : 0; }

milkid_status milkid_predict(const milkid_model* model, const milkid_dataset* ds, size_t bag, double threshold,
                             int* label, double* probability) {
  return guarded([&] {
    require(model != nullptr, "null argument");
    const Prediction p = predict_bag(bag_at(ds, bag), model->params, model->mode, threshold);
    if (label) *label = p.label;
    if (probability) *probability = p.trace.bag_probability;
  });
}

milkid_status milkid_evaluate_bags(const milkid_model* model, const milkid_dataset* ds, const size_t* bags,
                                   size_t count, double threshold, double* loss, double* accuracy) {
  return guarded([&] {
    require(model && ds, "null argument");
    const auto idx = index_vector(bags, count);
    const EvalSummary s = evaluate_bags(ds->data, idx, model->params, model->mode, threshold);
    if (loss) *loss = s.loss;
    if (accuracy) *accuracy = s.accuracy;
  });
}

// ---------------------------------------------------------------- detection

void milkid_inversion_defaults(milkid_inversion_mode mode, milkid_inversion_config* c) {
  if (!c) return;
  *c = from_core(mode == MILKID_INVERT_PLAIN ? InversionConfig::plain_defaults() : InversionConfig::sparse_defaults());
}

milkid_status milkid_inversion_config_validate(const milkid_inversion_config* c) {
  return guarded([&] {
    require(c != nullptr, "null argument");
    validate_inversion_config(to_core(*c));
  });
}

milkid_status milkid_detect(const milkid_model* model, const milkid_dataset* ds, size_t bag,
                            const milkid_inversion_config* inversion, double kid_threshold, double bag_threshold,
                            milkid_kid** out) {
  return milkid_detect_many(model, ds, &bag, 1, inversion, kid_threshold, bag_threshold, 1, out);
}

milkid_status milkid_detect_many(const milkid_model* model, const milkid_dataset* ds, const size_t* bags,
                                 size_t count, const milkid_inversion_config* inversion, double kid_threshold,
                                 double bag_threshold, size_t jobs, milkid_kid** out) {
  return guarded([&] {
    require(model && ds && out, "null argument");
    const auto idx = index_vector(bags, count);
    for (std::size_t i : idx) bag_at(ds, i);
    std::optional<InversionConfig> inv;
    if (inversion) {
      inv = to_core(*inversion);
      inv->prediction_threshold = bag_threshold;
      validate_inversion_config(*inv);
    }

    std::vector<std::unique_ptr<milkid_kid>> results(count);
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          const Bag& b = ds->data.bags[idx[i]];
          auto h = std::make_unique<milkid_kid>();
          h->result = detect_key_instances(b, model->params, model->mode, inv, kid_threshold, bag_threshold);
          h->original_zero_fraction = zero_fraction(b.instances);
          results[i] = std::move(h);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    const std::size_t threads = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(count, 1));
    {
      std::vector<std::jthread> pool;
      for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
      worker();
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (std::size_t i = 0; i < count; ++i) out[i] = results[i].release();
  });
}

void milkid_kid_free(milkid_kid* kid) { delete kid; }

int milkid_kid_bag_prediction(const milkid_kid* kid) { return kid ? kid->result.bag_prediction : 0; }

double milkid_kid_bag_probability(const milkid_kid* kid) { return kid ? kid->result.bag_probability : 0.0; }

int milkid_kid_was_refined(const milkid_kid* kid) { return kid && kid->result.was_refined ? 1 : 0; }

size_t milkid_kid_instance_count(const milkid_kid* kid) {
  return kid ? static_cast<size_t>(kid->result.normalized_scores.size()) : 0;
}

milkid_status milkid_kid_scores(const milkid_kid* kid, double* out, size_t capacity) {
  return guarded([&] {
    require(kid != nullptr, "null argument");
    const Vector& s = kid->result.normalized_scores;
    need_capacity(capacity, static_cast<size_t>(s.size()));
    require(out != nullptr, "null argument");
    std::copy(s.data(), s.data() + s.size(), out);
  });
}

milkid_status milkid_kid_predictions(const milkid_kid* kid, uint8_t* out, size_t capacity) {
  return guarded([&] {
    require(kid != nullptr, "null argument");
    const auto& p = kid->result.instance_predictions;
    need_capacity(capacity, p.size());
    require(out != nullptr, "null argument");
    std::copy(p.begin(), p.end(), out);
  });
}

void milkid_kid_zero_fractions(const milkid_kid* kid, double* original, double* refined) {
  if (!kid) return;
  if (original) *original = kid->original_zero_fraction;
  if (refined) *refined = zero_fraction(kid->result.refined_bag.instances);
}

milkid_status milkid_kid_trace_csv(const milkid_kid* kid, char** out_csv) {
  return guarded([&] {
    require(kid && out_csv, "null argument");
    if (!kid->result.trace) throw Error(Errc::EmptyInput, "bag was not refined");
    *out_csv = dup_string(kid->result.trace->to_csv());
  });
}

milkid_status milkid_render_heatmap(const milkid_dataset* ds, size_t bag, const milkid_kid* const* panels,
                                    size_t panel_count, const char* path) {
  return guarded([&] {
    require(path != nullptr && (panels != nullptr || panel_count == 0), "null argument");
    const Bag& b = bag_at(ds, bag);
    std::vector<Vector> scores;
    for (size_t i = 0; i < panel_count; ++i) {
      require(panels[i] != nullptr, "null panel");
      scores.push_back(panels[i]->result.normalized_scores);
    }
    write_file(path, render_heatmap_pgm(b, ds->data.grid, scores));
  });
}

// ---------------------------------------------------------------- experiments

milkid_status milkid_method_parse(const char* name, unsigned* out_bits) {
  return guarded([&] {
    require(name && out_bits, "null argument");
    if (std::string_view(name) == "all") {
      *out_bits = MILKID_METHOD_ALL;
      return;
    }
    *out_bits = method_bit(parse_method(name));
  });
}

const char* milkid_method_name(unsigned bit) {
  for (Method m : all_methods()) {
    if (method_bit(m) == bit) return method_name(m).data();
  }
  return "unknown";
}

void milkid_experiment_defaults(milkid_experiment_config* c) {
  if (!c) return;
  const ExperimentConfig d;
  *c = {};
  c->methods = MILKID_METHOD_ALL;
  milkid_train_defaults(&c->train);
  c->validation_fraction = d.validation_fraction;
  c->plain = from_core(d.plain);
  c->sparse = from_core(d.sparse);
  c->lambdas = kDefaultLambdas;
  c->lambda_count = std::size(kDefaultLambdas);
  c->kid_thresholds = kDefaultThresholds;
  c->kid_threshold_count = std::size(kDefaultThresholds);
  c->jobs = d.jobs;
  c->seed = d.seed;
}

milkid_status milkid_experiment_config_validate(const milkid_experiment_config* c) {
  return guarded([&] {
    require(c != nullptr, "null argument");
    validate_experiment_config(to_core(*c));
  });
}

milkid_status milkid_experiment_describe(const milkid_experiment_config* c, char** out_text) {
  return guarded([&] {
    require(c && out_text, "null argument");
    *out_text = dup_string(describe_config(to_core(*c)));
  });
}

milkid_status milkid_run_experiment(const milkid_dataset* ds, const milkid_split* split,
                                    const milkid_experiment_config* config, milkid_row_sink sink, void* user,
                                    milkid_report** out) {
  return guarded([&] {
    require(ds && split && config && out, "null argument");
    RowSink rows;
    if (sink) {
      rows = [sink, user](const ExperimentRow& r) { sink(format_report_row(r).c_str(), user); };
    }
    auto h = std::make_unique<milkid_report>();
    h->report = run_experiment(ds->data, split->plan, to_core(*config), rows);
    *out = h.release();
  });
}

void milkid_report_free(milkid_report* report) { delete report; }

const char* milkid_report_csv_header(void) {
  static const std::string header = report_csv_header();
  return header.c_str();
}

milkid_status milkid_report_csv(const milkid_report* report, char** out_csv) {
  return guarded([&] {
    require(report && out_csv, "null argument");
    *out_csv = dup_string(report->report.to_csv());
  });
}

milkid_status milkid_report_summary(const milkid_report* report, char** out_text) {
  return guarded([&] {
    require(report && out_text, "null argument");
    *out_text = dup_string(report->report.summary_table());
  });
}

const char* milkid_report_fingerprint(const milkid_report* report) {
  return report ? report->report.fingerprint.c_str() : "";
}

size_t milkid_report_row_count(const milkid_report* report) { return report ? report->report.rows.size() : 0; }

milkid_status milkid_report_row_get(const milkid_report* report, size_t index, milkid_report_row* out) {
  return guarded([&] {
    require(report && out, "null argument");
    if (index >= report->report.rows.size()) throw Error(Errc::InvalidArgument, "row index out of range");
    const ExperimentRow& r = report->report.rows[index];
    out->method = method_bit(r.method);
    out->repeat = r.repeat;
    out->fold = r.fold;
    out->bag_accuracy = r.bag_accuracy;
    out->f1 = r.f1;
    out->kid_threshold = r.kid_threshold;
    out->lambda = r.lambda ? *r.lambda : std::numeric_limits<double>::quiet_NaN();
    out->oracle_f1 = r.oracle_f1;
  });
}

milkid_status milkid_report_method_summary(const milkid_report* report, unsigned bit, milkid_method_summary* out) {
  return guarded([&] {
    require(report && out, "null argument");
    const Method m = bit_method(bit);
    for (const MethodSummary& s : report->report.summaries) {
      if (s.method == m) {
        *out = {s.accuracy_mean, s.accuracy_se, s.f1_mean, s.f1_se, s.oracle_f1_mean};
        return;
      }
    }
    throw Error(Errc::InvalidArgument, "method not part of this report");
  });
}

void milkid_report_timing(const milkid_report* report, double* train_seconds, double* kid_seconds) {
  if (!report) return;
  if (train_seconds) *train_seconds = report->report.train_seconds;
  if (kid_seconds) *kid_seconds = report->report.kid_seconds;
}

size_t milkid_report_zero_fraction_count(const milkid_report* report) {
  return report ? report->report.original_zero_fraction.size() : 0;
}

milkid_status milkid_report_zero_fractions(const milkid_report* report, double* original, double* refined,
                                           size_t capacity) {
  return guarded([&] {
    require(report && original && refined, "null argument");
    const auto& o = report->report.original_zero_fraction;
    const auto& r = report->report.refined_zero_fraction;
    need_capacity(capacity, o.size());
    std::copy(o.begin(), o.end(), original);
    std::copy(r.begin(), r.end(), refined);
  });
}

}  // extern "C"
