#include "milkid/milkid.h"

#include "CLI11.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ApiError : std::runtime_error {
  milkid_status status;
  ApiError(milkid_status s, const std::string& what) : std::runtime_error(what), status(s) {}
};

void check(milkid_status s) {
  if (s != MILKID_OK) throw ApiError(s, milkid_last_error_message());
}

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Dataset = std::unique_ptr<milkid_dataset, Deleter<milkid_dataset, milkid_dataset_free>>;
using Split = std::unique_ptr<milkid_split, Deleter<milkid_split, milkid_split_free>>;
using Model = std::unique_ptr<milkid_model, Deleter<milkid_model, milkid_model_free>>;
using Kid = std::unique_ptr<milkid_kid, Deleter<milkid_kid, milkid_kid_free>>;
using Report = std::unique_ptr<milkid_report, Deleter<milkid_report, milkid_report_free>>;

std::string take(char* s) {
  std::string out = s ? s : "";
  milkid_string_free(s);
  return out;
}

std::string fmt_real(double v) {
  char buf[400];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  return ec == std::errc() ? std::string(buf, end) : std::to_string(v);
}

std::string fmt_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw ApiError(MILKID_IO, "cannot write " + path.string());
}

// ---------------------------------------------------------------- settings

using Settings = std::map<std::string, std::string>;
using KeyList = std::vector<std::pair<std::string, std::string>>;

std::string train_default(const char* key) {
  milkid_train_config c;
  milkid_train_defaults(&c);
  const std::string k = key;
  if (k == "epochs") return std::to_string(c.epochs);
  if (k == "learning_rate") return fmt_real(c.learning_rate);
  if (k == "weight_decay") return fmt_real(c.weight_decay);
  if (k == "adam_beta1") return fmt_real(c.adam_beta1);
  if (k == "adam_beta2") return fmt_real(c.adam_beta2);
  if (k == "adam_epsilon") return fmt_real(c.adam_epsilon);
  if (k == "prediction_threshold") return fmt_real(c.prediction_threshold);
  if (k == "attention_dim") return std::to_string(c.attention_dim);
  std::string hidden;
  for (size_t i = 0; i < c.hidden_count; ++i) hidden += (i ? "," : "") + std::to_string(c.hidden[i]);
  return hidden;
}

KeyList train_keys() {
  KeyList keys;
  for (const char* k : {"epochs", "learning_rate", "weight_decay", "adam_beta1", "adam_beta2", "adam_epsilon",
                        "prediction_threshold", "hidden", "attention_dim"}) {
    keys.emplace_back(k, train_default(k));
  }
  keys.emplace_back("validation_fraction", "0.2");
  return keys;
}

KeyList inversion_keys() {
  milkid_inversion_config plain, sparse;
  milkid_inversion_defaults(MILKID_INVERT_PLAIN, &plain);
  milkid_inversion_defaults(MILKID_INVERT_SPARSE, &sparse);
  return {{"plain_steps", std::to_string(plain.steps)},
          {"plain_learning_rate", fmt_real(plain.learning_rate)},
          {"plain_momentum", fmt_real(plain.momentum)},
          {"sparse_steps", std::to_string(sparse.steps)},
          {"sparse_learning_rate", fmt_real(sparse.learning_rate)},
          {"lambdas", "0.0005,0.001,0.002,0.003"},
          {"steps", ""}};
}

KeyList command_keys(const std::string& cmd) {
  KeyList keys{{"seed", "0"}};
  auto add = [&keys](const KeyList& more) { keys.insert(keys.end(), more.begin(), more.end()); };
  if (cmd == "generate") {
    milkid_synthetic_params s;
    milkid_synthetic_defaults(&s);
    milkid_mnist_params m;
    milkid_mnist_defaults(&m);
    add({{"generator", "synthetic"},
         {"bag_count", ""},
         {"instances_per_bag", std::to_string(s.instances_per_bag)},
         {"dim", std::to_string(s.dim)},
         {"positive_fraction", fmt_real(s.positive_fraction)},
         {"key_rate", ""},
         {"signal_strength", fmt_real(s.signal_strength)},
         {"noise_level", fmt_real(s.noise_level)},
         {"grid_side", std::to_string(m.grid_side)},
         {"key_digit", std::to_string(m.key_digit)},
         {"mnist_images", ""},
         {"mnist_labels", ""}});
  } else if (cmd == "train") {
    add({{"dataset", ""}, {"pooling", "attention"}, {"fold_count", "10"}, {"test_fold", "0"}});
    add(train_keys());
  } else if (cmd == "kid") {
    add({{"dataset", ""},
         {"checkpoint", ""},
         {"methods", "all"},
         {"lambda", "0.001"},
         {"kid_threshold", "0.3"},
         {"bag_threshold", "0.5"},
         {"bags", "test"},
         {"fold_count", "10"},
         {"test_fold", "0"},
         {"heatmaps", "true"},
         {"traces", "false"},
         {"jobs", "1"}});
    add(inversion_keys());
  } else if (cmd == "evaluate") {
    add({{"dataset", ""},
         {"methods", "all"},
         {"fold_count", "10"},
         {"repeat_count", "5"},
         {"lambda", ""},
         {"kid_thresholds", "0.1,0.2,0.3,0.4,0.5"},
         {"jobs", "1"}});
    add(train_keys());
    add(inversion_keys());
  }
  return keys;
}

std::set<std::string> all_known_keys() {
  std::set<std::string> keys;
  for (const char* cmd : {"generate", "train", "kid", "evaluate"}) {
    for (const auto& [k, v] : command_keys(cmd)) keys.insert(k);
  }
  return keys;
}

std::string env_name(const std::string& key) {
  std::string out = "MILKID_";
  for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

// Layers, lowest first: built-in defaults, config file, MILKID_* environment, flags.
Settings merge_settings(const std::string& cmd, const std::string& config_path, const Settings& flags) {
  const KeyList keys = command_keys(cmd);
  Settings s;
  for (const auto& [k, v] : keys) s[k] = v;
  auto applies = [&keys](const std::string& k) {
    return std::any_of(keys.begin(), keys.end(), [&](const auto& kv) { return kv.first == k; });
  };

  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw UsageError("cannot read config file " + config_path);
    const std::set<std::string> known = all_known_keys();
    for (const CLI::ConfigItem& item : CLI::ConfigTOML().from_config(in)) {
      if (item.name == "++" || item.name == "--") continue;
      static const std::set<std::string> sections{"generate", "train", "kid", "evaluate"};
      if (item.parents.size() > 1 || (item.parents.size() == 1 && !sections.count(item.parents[0]))) {
        throw UsageError("unsupported config section for '" + item.fullname() + "'");
      }
      if (!known.count(item.name)) throw UsageError("unknown config key '" + item.fullname() + "'");
      if (item.parents.size() == 1 && item.parents[0] != cmd) continue;
      if (!applies(item.name)) continue;
      std::string value;
      for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
      s[item.name] = value;
    }
  }
  for (const auto& [k, v] : keys) {
    if (const char* e = std::getenv(env_name(k).c_str())) s[k] = e;
  }
  for (const auto& [k, v] : flags) {
    if (!applies(k)) throw UsageError("setting '" + k + "' does not apply to '" + cmd + "'");
    s[k] = v;
  }
  return s;
}

// Typed access that records the canonical form of every setting it reads.
class Resolver {
 public:
  explicit Resolver(const Settings& s) : s_(s) {}

  std::string text(const std::string& key) { return record(key, s_.at(key)); }

  std::string required(const std::string& key) {
    if (s_.at(key).empty()) throw UsageError("setting '" + key + "' is required");
    return text(key);
  }

  bool is_set(const std::string& key) const { return !s_.at(key).empty(); }

  double real(const std::string& key) {
    const double v = parse_real(key, s_.at(key));
    record(key, fmt_real(v));
    return v;
  }

  uint64_t integer(const std::string& key) {
    const uint64_t v = parse_int(key, s_.at(key));
    record(key, std::to_string(v));
    return v;
  }

  bool flag(const std::string& key) {
    const std::string& v = s_.at(key);
    bool out;
    if (v == "true" || v == "1" || v == "yes" || v == "on") out = true;
    else if (v == "false" || v == "0" || v == "no" || v == "off") out = false;
    else throw UsageError("invalid boolean for '" + key + "': '" + v + "'");
    record(key, out ? "true" : "false");
    return out;
  }

  std::vector<double> reals(const std::string& key) {
    std::vector<double> out;
    std::string canon;
    for (const std::string& part : split(key)) {
      out.push_back(parse_real(key, part));
      canon += (canon.empty() ? "" : ",") + fmt_real(out.back());
    }
    record(key, canon);
    return out;
  }

  std::vector<size_t> integers(const std::string& key) {
    std::vector<size_t> out;
    std::string canon;
    for (const std::string& part : split(key)) {
      out.push_back(static_cast<size_t>(parse_int(key, part)));
      canon += (canon.empty() ? "" : ",") + std::to_string(out.back());
    }
    record(key, canon);
    return out;
  }

  // Uncanonicalized read, for settings that do not affect artifact bytes.
  uint64_t untracked_integer(const std::string& key) const { return parse_int(key, s_.at(key)); }

  void note(const std::string& key, const std::string& value) { record(key, value); }

  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : canon_) out += k + "=" + v + "\n";
    return out;
  }

 private:
  std::string record(const std::string& key, const std::string& value) {
    canon_[key] = value;
    return value;
  }

  static double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const char* b = v.data();
    const char* e = b + v.size();
    while (b < e && *b == ' ') ++b;
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e || !std::isfinite(out)) {
      throw UsageError("invalid number for '" + key + "': '" + v + "'");
    }
    return out;
  }

  static uint64_t parse_int(const std::string& key, const std::string& v) {
    uint64_t out = 0;
    const char* b = v.data();
    const char* e = b + v.size();
    while (b < e && *b == ' ') ++b;
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) throw UsageError("invalid integer for '" + key + "': '" + v + "'");
    return out;
  }

  std::vector<std::string> split(const std::string& key) const {
    std::vector<std::string> parts;
    std::stringstream ss(s_.at(key));
    for (std::string part; std::getline(ss, part, ',');) {
      if (!part.empty()) parts.push_back(part);
    }
    if (parts.empty()) throw UsageError("setting '" + key + "' needs at least one value");
    return parts;
  }

  const Settings& s_;
  std::map<std::string, std::string> canon_;
};

struct Common {
  std::string config;
  bool force = false;
  std::vector<std::string> sets;
  Settings flags;
};

fs::path artifact_root() {
  const char* root = std::getenv("MILKID_OUT");
  return root && *root ? fs::path(root) : fs::path("milkid-out");
}

std::string fingerprint_of(const std::string& canonical) {
  char out[17];
  milkid_hash_text(canonical.c_str(), out);
  return out;
}

std::string file_digest(const std::string& path) {
  char out[17];
  check(milkid_hash_file(path.c_str(), out));
  return out;
}

// Claims the fingerprint directory; an existing one is replaced only with --force.
fs::path claim_output(const std::string& cmd, const std::string& canonical, bool force) {
  const fs::path dir = artifact_root() / (cmd + "-" + fingerprint_of(canonical));
  if (fs::exists(dir)) {
    if (!force) throw UsageError("output " + dir.string() + " already exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  write_text(dir / "config.txt", "# effective configuration\n" + canonical + "fingerprint=" +
                                     fingerprint_of(canonical) + "\n");
  return dir;
}

milkid_train_config resolve_train(Resolver& r) {
  milkid_train_config c;
  milkid_train_defaults(&c);
  c.epochs = r.integer("epochs");
  c.learning_rate = r.real("learning_rate");
  c.weight_decay = r.real("weight_decay");
  c.adam_beta1 = r.real("adam_beta1");
  c.adam_beta2 = r.real("adam_beta2");
  c.adam_epsilon = r.real("adam_epsilon");
  c.prediction_threshold = r.real("prediction_threshold");
  c.seed = r.integer("seed");
  const auto hidden = r.integers("hidden");
  if (hidden.size() > MILKID_MAX_HIDDEN) throw UsageError("too many hidden layers");
  std::copy(hidden.begin(), hidden.end(), c.hidden);
  c.hidden_count = hidden.size();
  c.attention_dim = r.integer("attention_dim");
  check(milkid_train_config_validate(&c));
  return c;
}

struct InversionSettings {
  milkid_inversion_config plain;
  milkid_inversion_config sparse;
  std::vector<double> lambdas;
};

InversionSettings resolve_inversion(Resolver& r) {
  InversionSettings s;
  milkid_inversion_defaults(MILKID_INVERT_PLAIN, &s.plain);
  milkid_inversion_defaults(MILKID_INVERT_SPARSE, &s.sparse);
  s.plain.steps = r.integer("plain_steps");
  s.plain.learning_rate = r.real("plain_learning_rate");
  s.plain.momentum = r.real("plain_momentum");
  s.sparse.steps = r.integer("sparse_steps");
  s.sparse.learning_rate = r.real("sparse_learning_rate");
  if (r.is_set("steps")) {
    const uint64_t steps = r.integer("steps");
    s.plain.steps = s.sparse.steps = steps;
  }
  s.lambdas = r.reals("lambdas");
  return s;
}

void require_in_sweep(double lambda, const std::vector<double>& lambdas) {
  const auto [lo, hi] = std::minmax_element(lambdas.begin(), lambdas.end());
  if (lambda < *lo || lambda > *hi) {
    throw UsageError("lambda " + fmt_real(lambda) + " lies outside the sweep bounds [" + fmt_real(*lo) + ", " +
                     fmt_real(*hi) + "]");
  }
}

unsigned resolve_methods(Resolver& r) {
  unsigned bits = 0;
  std::stringstream ss(r.text("methods"));
  for (std::string part; std::getline(ss, part, ',');) {
    if (part.empty()) continue;
    unsigned b = 0;
    if (milkid_method_parse(part.c_str(), &b) != MILKID_OK) throw UsageError("unknown method '" + part + "'");
    bits |= b;
  }
  if (bits == 0) throw UsageError("no methods selected");
  std::string canon;
  for (unsigned bit = 1; bit <= MILKID_METHOD_ATT_SPARSE; bit <<= 1) {
    if (bits & bit) canon += (canon.empty() ? "" : ",") + std::string(milkid_method_name(bit));
  }
  r.note("methods", canon);
  return bits;
}

std::vector<size_t> fold_members(const milkid_dataset* ds, size_t fold_count, size_t test_fold, uint64_t seed,
                                 bool complement) {
  Split split;
  {
    milkid_split* raw = nullptr;
    check(milkid_split_kfold(ds, fold_count, 1, seed, &raw));
    split.reset(raw);
  }
  std::vector<size_t> out(milkid_dataset_bag_count(ds));
  size_t count = 0;
  check(milkid_split_members(split.get(), 0, test_fold, complement ? 1 : 0, out.data(), out.size(), &count));
  out.resize(count);
  return out;
}

Dataset load_dataset(const std::string& path) {
  milkid_dataset* raw = nullptr;
  check(milkid_dataset_load(path.c_str(), &raw));
  return Dataset(raw);
}

void print_stats(const milkid_dataset* ds) {
  milkid_dataset_stats st;
  check(milkid_dataset_stats_get(ds, &st));
  std::printf("bags: %zu (positive %.2f%%, negative %.2f%%)\n", st.bag_count, st.positive_bag_pct,
              st.negative_bag_pct);
  if (st.has_instance_stats) {
    std::printf("instances in positive bags: %zu (positive %.2f%%, negative %.2f%%)\n", st.instance_count,
                st.positive_instance_pct, st.negative_instance_pct);
  }
}

// ---------------------------------------------------------------- generate

int cmd_generate(const Common& common) {
  const Settings s = merge_settings("generate", common.config, common.flags);
  Resolver r(s);
  const std::string generator = r.text("generator");
  const uint64_t seed = r.integer("seed");
  Dataset ds;
  milkid_dataset* raw = nullptr;

  if (generator == "synthetic") {
    milkid_synthetic_params p;
    milkid_synthetic_defaults(&p);
    p.seed = seed;
    if (r.is_set("bag_count")) p.bag_count = r.integer("bag_count");
    else r.note("bag_count", std::to_string(p.bag_count));
    if (r.is_set("key_rate")) p.key_rate = r.real("key_rate");
    else r.note("key_rate", fmt_real(p.key_rate));
    p.instances_per_bag = r.integer("instances_per_bag");
    p.dim = r.integer("dim");
    p.positive_fraction = r.real("positive_fraction");
    p.signal_strength = r.real("signal_strength");
    p.noise_level = r.real("noise_level");
    check(milkid_dataset_synthetic(&p, &raw));
  } else if (generator == "mnist") {
    milkid_mnist_params p;
    milkid_mnist_defaults(&p);
    p.seed = seed;
    if (r.is_set("bag_count")) p.bag_count = r.integer("bag_count");
    else r.note("bag_count", std::to_string(p.bag_count));
    if (r.is_set("key_rate")) p.key_rate = r.real("key_rate");
    else r.note("key_rate", fmt_real(p.key_rate));
    p.grid_side = r.integer("grid_side");
    p.key_digit = static_cast<int>(r.integer("key_digit"));
    p.positive_fraction = r.real("positive_fraction");
    const std::string images = r.required("mnist_images");
    const std::string labels = r.required("mnist_labels");
    check(milkid_dataset_mnist(images.c_str(), labels.c_str(), &p, &raw));
    ds.reset(raw);
    raw = nullptr;
    r.note("mnist_images_fnv1a64", file_digest(images));
    r.note("mnist_labels_fnv1a64", file_digest(labels));
  } else {
    throw UsageError("unknown generator '" + generator + "' (expected synthetic or mnist)");
  }
  if (raw) ds.reset(raw);

  for (size_t i = 0; i < milkid_dataset_warning_count(ds.get()); ++i) {
    std::fprintf(stderr, "warning: %s\n", milkid_dataset_warning(ds.get(), i));
  }
  const fs::path dir = claim_output("generate", r.canonical(), common.force);
  const std::string container = "dataset.milds";
  check(milkid_dataset_save(ds.get(), (dir / container).c_str()));
  char* manifest = nullptr;
  check(milkid_dataset_manifest(ds.get(), container.c_str(), &manifest));
  write_text(dir / "manifest.txt", take(manifest));
  std::printf("output: %s\n", dir.c_str());
  print_stats(ds.get());
  return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const Common& common) {
  const Settings s = merge_settings("train", common.config, common.flags);
  Resolver r(s);
  const std::string dataset_path = r.required("dataset");
  milkid_pooling pooling;
  if (milkid_pooling_parse(r.text("pooling").c_str(), &pooling) != MILKID_OK) {
    throw UsageError(milkid_last_error_message());
  }
  const milkid_train_config tc = resolve_train(r);
  const double vf = r.real("validation_fraction");
  if (!(vf > 0.0 && vf < 1.0)) throw UsageError("validation_fraction must lie in (0, 1)");
  const size_t fold_count = r.integer("fold_count");
  const size_t test_fold = r.integer("test_fold");
  if (fold_count == 0 || (fold_count > 1 && test_fold >= fold_count)) {
    throw UsageError("test_fold must be below fold_count (fold_count 1 trains on every bag)");
  }

  Dataset ds = load_dataset(dataset_path);
  r.note("dataset_fnv1a64", file_digest(dataset_path));
  const uint64_t seed = tc.seed;
  std::vector<size_t> pool;
  std::vector<size_t> test;
  if (fold_count == 1) {
    pool.resize(milkid_dataset_bag_count(ds.get()));
    for (size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  } else {
    pool = fold_members(ds.get(), fold_count, test_fold, seed, true);
    test = fold_members(ds.get(), fold_count, test_fold, seed, false);
  }
  std::vector<size_t> tr(pool.size()), va(pool.size());
  size_t n_tr = 0, n_va = 0;
  check(milkid_holdout(ds.get(), pool.data(), pool.size(), vf, seed, tr.data(), &n_tr, va.data(), &n_va));
  tr.resize(n_tr);
  va.resize(n_va);

  Model model;
  {
    milkid_model* raw = nullptr;
    check(milkid_train(ds.get(), tr.data(), tr.size(), va.data(), va.size(), pooling, &tc, &raw));
    model.reset(raw);
  }
  double val_loss = 0.0, val_acc = 0.0;
  check(milkid_evaluate_bags(model.get(), ds.get(), va.data(), va.size(), tc.prediction_threshold, &val_loss,
                             &val_acc));
  std::string metrics = "pooling=" + std::string(milkid_pooling_name(pooling)) + "\n";
  metrics += "best_epoch=" + std::to_string(milkid_model_best_epoch(model.get())) + "\n";
  metrics += "train_bags=" + std::to_string(tr.size()) + "\n";
  metrics += "validation_bags=" + std::to_string(va.size()) + "\n";
  metrics += "validation_loss=" + fmt_score(val_loss) + "\n";
  metrics += "validation_accuracy=" + fmt_score(val_acc) + "\n";
  if (!test.empty()) {
    double test_loss = 0.0, test_acc = 0.0;
    check(milkid_evaluate_bags(model.get(), ds.get(), test.data(), test.size(), tc.prediction_threshold,
                               &test_loss, &test_acc));
    metrics += "test_bags=" + std::to_string(test.size()) + "\n";
    metrics += "test_accuracy=" + fmt_score(test_acc) + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(milkid_model_checksum(model.get())));
  metrics += "parameter_checksum=" + std::string(buf) + "\n";

  const fs::path dir = claim_output("train", r.canonical(), common.force);
  check(milkid_model_save(model.get(), (dir / "model.ckpt").c_str()));
  char* log = nullptr;
  check(milkid_model_train_log(model.get(), &log));
  write_text(dir / "train_log.csv", take(log));
  write_text(dir / "metrics.txt", metrics);
  std::printf("output: %s\n%s", dir.c_str(), metrics.c_str());
  return 0;
}

// ---------------------------------------------------------------- kid

struct MethodRun {
  unsigned bit;
  std::vector<Kid> results;
};

int cmd_kid(const Common& common) {
  const Settings s = merge_settings("kid", common.config, common.flags);
  Resolver r(s);
  const std::string dataset_path = r.required("dataset");
  const std::string checkpoint_path = r.required("checkpoint");
  unsigned methods = resolve_methods(r);
  InversionSettings inv = resolve_inversion(r);
  inv.sparse.lambda = r.real("lambda");
  require_in_sweep(inv.sparse.lambda, inv.lambdas);
  check(milkid_inversion_config_validate(&inv.plain));
  check(milkid_inversion_config_validate(&inv.sparse));
  const double kid_threshold = r.real("kid_threshold");
  if (!(kid_threshold > 0.0 && kid_threshold <= 1.0)) throw UsageError("kid_threshold must lie in (0, 1]");
  const double bag_threshold = r.real("bag_threshold");
  if (!(bag_threshold > 0.0 && bag_threshold < 1.0)) throw UsageError("bag_threshold must lie in (0, 1)");
  const std::string bags_mode = r.text("bags");
  if (bags_mode != "test" && bags_mode != "all") throw UsageError("bags must be 'test' or 'all'");
  const size_t fold_count = r.integer("fold_count");
  const size_t test_fold = r.integer("test_fold");
  if (bags_mode == "test" && (fold_count < 2 || test_fold >= fold_count)) {
    throw UsageError("bags=test needs fold_count >= 2 and test_fold below it");
  }
  const uint64_t seed = r.integer("seed");
  const bool heatmaps = r.flag("heatmaps");
  const bool traces = r.flag("traces");
  const size_t jobs = r.untracked_integer("jobs");

  Dataset ds = load_dataset(dataset_path);
  Model model;
  {
    milkid_model* raw = nullptr;
    check(milkid_model_load(checkpoint_path.c_str(), &raw));
    model.reset(raw);
  }
  r.note("dataset_fnv1a64", file_digest(dataset_path));
  r.note("checkpoint_fnv1a64", file_digest(checkpoint_path));

  const milkid_pooling pooling = milkid_model_pooling(model.get());
  const unsigned compatible = pooling == MILKID_POOL_ATTENTION ? (MILKID_METHOD_ATT | MILKID_METHOD_ATT_INV |
                                                                  MILKID_METHOD_ATT_SPARSE)
                              : pooling == MILKID_POOL_INSTANCE_MAX ? MILKID_METHOD_INST_MAX
                                                                    : MILKID_METHOD_INST_MEAN;
  if (methods == MILKID_METHOD_ALL) methods = compatible;
  if (methods & ~compatible) {
    throw UsageError(std::string("selected methods do not match the checkpoint's ") + milkid_pooling_name(pooling) +
                     " pooling");
  }

  std::vector<size_t> bags;
  if (bags_mode == "all") {
    bags.resize(milkid_dataset_bag_count(ds.get()));
    for (size_t i = 0; i < bags.size(); ++i) bags[i] = i;
  } else {
    bags = fold_members(ds.get(), fold_count, test_fold, seed, false);
  }

  // The raw panel is always computed so heatmaps can show it next to refinements.
  const unsigned raw_bit = pooling == MILKID_POOL_ATTENTION ? static_cast<unsigned>(MILKID_METHOD_ATT) : compatible;
  std::vector<MethodRun> runs;
  for (unsigned bit : {static_cast<unsigned>(MILKID_METHOD_INST_MAX), static_cast<unsigned>(MILKID_METHOD_INST_MEAN),
                       static_cast<unsigned>(MILKID_METHOD_ATT), static_cast<unsigned>(MILKID_METHOD_ATT_INV),
                       static_cast<unsigned>(MILKID_METHOD_ATT_SPARSE)}) {
    if (!((methods | raw_bit) & bit)) continue;
    const milkid_inversion_config* cfg = bit == MILKID_METHOD_ATT_INV      ? &inv.plain
                                         : bit == MILKID_METHOD_ATT_SPARSE ? &inv.sparse
                                                                           : nullptr;
    std::vector<milkid_kid*> raw(bags.size(), nullptr);
    check(milkid_detect_many(model.get(), ds.get(), bags.data(), bags.size(), cfg, kid_threshold, bag_threshold,
                             jobs, raw.data()));
    MethodRun run{bit, {}};
    for (milkid_kid* k : raw) run.results.emplace_back(k);
    runs.push_back(std::move(run));
  }

  const fs::path dir = claim_output("kid", r.canonical(), common.force);
  std::string csv = "method,bag_id,instance,normalized_score,prediction,truth,bag_skipped\n";
  std::string summary = "method        predicted_positive  f1_over_positive_bags\n";
  for (const MethodRun& run : runs) {
    if (!(methods & run.bit)) continue;
    size_t tp = 0, fp = 0, fn = 0, predicted = 0;
    bool labelled = false;
    for (size_t b = 0; b < bags.size(); ++b) {
      const milkid_kid* k = run.results[b].get();
      milkid_bag_info info;
      check(milkid_dataset_bag_info(ds.get(), bags[b], &info));
      const size_t n = milkid_kid_instance_count(k);
      std::vector<double> scores(n);
      std::vector<uint8_t> preds(n), truth(n);
      check(milkid_kid_scores(k, scores.data(), n));
      check(milkid_kid_predictions(k, preds.data(), n));
      if (info.has_instance_labels) check(milkid_dataset_instance_labels(ds.get(), bags[b], truth.data(), n));
      const bool skipped = milkid_kid_bag_prediction(k) == 0;
      for (size_t i = 0; i < n; ++i) {
        csv += std::string(milkid_method_name(run.bit)) + "," + info.id + "," + std::to_string(i) + "," +
               fmt_score(scores[i]) + "," + std::to_string(preds[i]) + "," +
               (info.has_instance_labels ? std::to_string(truth[i]) : std::string()) + "," + (skipped ? "1" : "0") +
               "\n";
        predicted += preds[i];
      }
      if (info.has_instance_labels && info.bag_label == 1) {
        labelled = true;
        for (size_t i = 0; i < n; ++i) {
          tp += preds[i] && truth[i];
          fp += preds[i] && !truth[i];
          fn += !preds[i] && truth[i];
        }
      }
      if (traces && milkid_kid_was_refined(k)) {
        char* trace = nullptr;
        check(milkid_kid_trace_csv(k, &trace));
        write_text(dir / ("trace-" + std::string(milkid_method_name(run.bit)) + "-" + info.id + ".csv"), take(trace));
      }
    }
    const double f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    char line[128];
    std::snprintf(line, sizeof(line), "%-12s  %18zu  %s\n", milkid_method_name(run.bit), predicted,
                  labelled ? fmt_score(f1).c_str() : "n/a");
    summary += line;
  }
  write_text(dir / "kid.csv", csv);
  write_text(dir / "kid_summary.txt", summary);

  size_t heatmap_count = 0;
  if (heatmaps && milkid_dataset_grid_side(ds.get()) > 0) {
    for (size_t b = 0; b < bags.size(); ++b) {
      std::vector<const milkid_kid*> panels;
      for (const MethodRun& run : runs) panels.push_back(run.results[b].get());
      if (milkid_kid_bag_prediction(panels.front()) == 0) continue;
      milkid_bag_info info;
      check(milkid_dataset_bag_info(ds.get(), bags[b], &info));
      const fs::path path = dir / ("heatmap-" + std::string(info.id) + ".pgm");
      check(milkid_render_heatmap(ds.get(), bags[b], panels.data(), panels.size(), path.c_str()));
      ++heatmap_count;
    }
  }
  std::printf("output: %s\nbags: %zu\nheatmaps: %zu\n%s", dir.c_str(), bags.size(), heatmap_count,
              summary.c_str());
  return 0;
}

// ---------------------------------------------------------------- evaluate

struct StreamSink {
  std::ofstream out;
};

void append_row(const char* line, void* user) {
  auto* sink = static_cast<StreamSink*>(user);
  sink->out << line;
  sink->out.flush();
}

int cmd_evaluate(const Common& common) {
  const Settings s = merge_settings("evaluate", common.config, common.flags);
  Resolver r(s);
  const std::string dataset_path = r.required("dataset");
  milkid_experiment_config cfg;
  milkid_experiment_defaults(&cfg);
  cfg.methods = resolve_methods(r);
  cfg.train = resolve_train(r);
  cfg.seed = cfg.train.seed;
  cfg.validation_fraction = r.real("validation_fraction");
  InversionSettings inv = resolve_inversion(r);
  cfg.plain = inv.plain;
  cfg.sparse = inv.sparse;
  std::vector<double> lambdas = inv.lambdas;
  if (r.is_set("lambda")) {
    const double lambda = r.real("lambda");
    require_in_sweep(lambda, lambdas);
    lambdas = {lambda};
  }
  cfg.lambdas = lambdas.data();
  cfg.lambda_count = lambdas.size();
  const std::vector<double> thresholds = r.reals("kid_thresholds");
  cfg.kid_thresholds = thresholds.data();
  cfg.kid_threshold_count = thresholds.size();
  cfg.jobs = r.untracked_integer("jobs");
  const size_t fold_count = r.integer("fold_count");
  const size_t repeat_count = r.integer("repeat_count");
  check(milkid_experiment_config_validate(&cfg));

  Dataset ds = load_dataset(dataset_path);
  r.note("dataset_fnv1a64", file_digest(dataset_path));
  Split split;
  {
    milkid_split* raw = nullptr;
    check(milkid_split_kfold(ds.get(), fold_count, repeat_count, cfg.seed, &raw));
    split.reset(raw);
  }

  const fs::path dir = claim_output("evaluate", r.canonical(), common.force);
  const fs::path summary_path = dir / "summary.txt";
  write_text(summary_path, "status: incomplete\n");
  StreamSink sink;
  sink.out.open(dir / "report.csv", std::ios::binary | std::ios::trunc);
  sink.out << milkid_report_csv_header();
  sink.out.flush();

  milkid_report* raw = nullptr;
  const milkid_status st = milkid_run_experiment(ds.get(), split.get(), &cfg, append_row, &sink, &raw);
  sink.out.close();
  if (st != MILKID_OK) {
    const std::string message = milkid_last_error_message();
    write_text(summary_path, "status: incomplete\nerror: " + std::string(milkid_status_name(st)) + ": " +
                                 message + "\n");
    throw ApiError(st, message);
  }
  Report report(raw);
  char* summary = nullptr;
  check(milkid_report_summary(report.get(), &summary));
  const std::string text = take(summary);
  write_text(summary_path, text);
  double train_s = 0.0, kid_s = 0.0;
  milkid_report_timing(report.get(), &train_s, &kid_s);
  std::printf("output: %s\n%s", dir.c_str(), text.c_str());
  std::fprintf(stderr, "time: train %.1fs, kid %.1fs\n", train_s, kid_s);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention MIL with sparse network inversion for key instance detection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", milkid_version());

  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config, "Settings file (key = value, optional [subcommand] sections)");
    sub->add_flag("--force", common.force, "Replace an existing output directory");
    sub->add_option("--set", common.sets, "Override any setting, KEY=VALUE (repeatable)");
    sub->add_option_function<std::string>(
        "--seed", [&common](const std::string& v) { common.flags["seed"] = v; }, "Random seed");
  };
  auto add_jobs = [&common](CLI::App* sub) {
    sub->add_option_function<std::string>(
        "--jobs", [&common](const std::string& v) { common.flags["jobs"] = v; }, "Worker threads");
  };
  auto add_kid_flags = [&common](CLI::App* sub) {
    sub->add_option_function<std::string>(
           "--method", [&common](const std::string& v) { common.flags["methods"] = v; },
           "inst_max, inst_mean, att, att_inv, att_sparse or all (comma separated)");
    sub->add_option_function<std::string>(
        "--lambda", [&common](const std::string& v) { common.flags["lambda"] = v; }, "Sparsity weight");
    sub->add_option_function<std::string>(
        "--steps", [&common](const std::string& v) { common.flags["steps"] = v; }, "Inversion steps");
  };

  CLI::App* gen = app.add_subcommand("generate", "Build a synthetic or MNIST-grid dataset");
  add_common(gen);
  gen->add_option_function<std::string>(
      "--grid-side", [&common](const std::string& v) { common.flags["grid_side"] = v; }, "MNIST grid side");
  CLI::App* trn = app.add_subcommand("train", "Train an attention or instance-pooling model");
  add_common(trn);
  CLI::App* kid = app.add_subcommand("kid", "Detect key instances with a trained model");
  add_common(kid);
  add_jobs(kid);
  add_kid_flags(kid);
  CLI::App* eva = app.add_subcommand("evaluate", "Cross-validated comparison of all methods");
  add_common(eva);
  add_jobs(eva);
  add_kid_flags(eva);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (const std::string& kv : common.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      if (!common.flags.count(key)) common.flags[key] = kv.substr(eq + 1);
    }
    if (gen->parsed()) return cmd_generate(common);
    if (trn->parsed()) return cmd_train(common);
    if (kid->parsed()) return cmd_kid(common);
    return cmd_evaluate(common);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "milkid: error: %s\n", e.what());
    return 2;
  } catch (const ApiError& e) {
    std::fprintf(stderr, "milkid: error: %s: %s\n", milkid_status_name(e.status), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "milkid: error: %s\n", e.what());
    return 1;
  }
}
