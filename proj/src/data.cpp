#include "data.hpp"

#include "error.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>

namespace milkid {

namespace {

std::string bag_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "bag-%05zu", index);
  return buf;
}

std::string fmt_real(double v) {
  char buf[400];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  return std::string(buf, res.ptr);
}

void check_fraction(double value, const char* what) {
  if (!(value > 0.0 && value <= 1.0)) {
    throw Error(Errc::InvalidFraction,
                std::string(what) + " must lie in (0, 1], got " + fmt_real(value));
  }
}

// Picks `count` distinct positions out of [0, n).
std::vector<std::size_t> choose_positions(Rng& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(std::span(order));
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

void validate_bag(const Bag& bag) {
  if (bag.instances.rows() < 1 || bag.instances.cols() < 1) {
    throw Error(Errc::InvalidArgument, "bag '" + bag.id + "' has no instances");
  }
  for (Eigen::Index i = 0; i < bag.instances.size(); ++i) {
    const double v = bag.instances.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(Errc::InvalidArgument, "bag '" + bag.id + "' has a value outside [0,1]");
    }
  }
  if (bag.bag_label && *bag.bag_label != 0 && *bag.bag_label != 1) {
    throw Error(Errc::InvalidArgument, "bag '" + bag.id + "' has a non-binary label");
  }
  if (bag.instance_labels) {
    const auto& labels = *bag.instance_labels;
    if (labels.size() != bag.size()) {
      throw Error(Errc::ShapeMismatch, "bag '" + bag.id + "' instance label count mismatch");
    }
    int any = 0;
    for (uint8_t l : labels) {
      if (l > 1) throw Error(Errc::InvalidArgument, "bag '" + bag.id + "' non-binary instance label");
      any |= l;
    }
    if (bag.bag_label && *bag.bag_label != any) {
      throw Error(Errc::InvalidArgument, "bag '" + bag.id + "' label is not the OR of its instance labels");
    }
  }
}

void validate_dataset(const MilDataset& dataset) {
  if (dataset.bags.size() < 2) {
    throw Error(Errc::TooFewBags, "a dataset needs at least two bags");
  }
  const std::size_t d = dataset.dim();
  std::set<std::string> ids;
  for (const Bag& bag : dataset.bags) {
    validate_bag(bag);
    if (bag.dim() != d) {
      throw Error(Errc::ShapeMismatch, "bag '" + bag.id + "' has a different instance dimension");
    }
    if (!ids.insert(bag.id).second) {
      throw Error(Errc::InvalidArgument, "duplicate bag id '" + bag.id + "'");
    }
  }
  if (dataset.grid.present()) {
    if (dataset.grid.tile_width * dataset.grid.tile_height != d) {
      throw Error(Errc::ShapeMismatch, "grid tile size does not match instance dimension");
    }
  }
}

// ---------------------------------------------------------------- IDX

IdxTensor parse_idx(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0) {
    throw Error(Errc::BadMagic, "not an IDX file");
  }
  if (bytes[2] != 0x08) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "IDX element type 0x%02x is not unsigned byte", bytes[2]);
    throw Error(Errc::UnsupportedElementType, buf);
  }
  const std::size_t rank = bytes[3];
  if (rank == 0) throw Error(Errc::BadMagic, "IDX rank must be positive");
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) throw Error(Errc::TruncatedPayload, "IDX header is truncated");

  IdxTensor out;
  std::size_t expected = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    const uint8_t* p = bytes.data() + 4 + 4 * r;
    const uint32_t dim = (uint32_t{p[0]} << 24) | (uint32_t{p[1]} << 16) |
                         (uint32_t{p[2]} << 8) | uint32_t{p[3]};
    out.dims.push_back(dim);
    expected *= dim;
  }
  if (bytes.size() - header != expected) {
    throw Error(Errc::TruncatedPayload, "IDX payload size " + std::to_string(bytes.size() - header) +
                                            " does not match declared " + std::to_string(expected));
  }
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return out;
}

IdxTensor load_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open IDX file '" + path.string() + "' (not found)");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

// ---------------------------------------------------------------- generators

std::size_t sample_key_count(Rng& rng, std::size_t n, double p) {
  for (;;) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) count += rng.bernoulli(p) ? 1 : 0;
    if (count >= 1) return count;
  }
}

MilDataset make_mnist_bags(const IdxTensor& images, const IdxTensor& labels,
                           const MnistBagParams& params) {
  if (params.grid_side < 1) throw Error(Errc::InvalidArgument, "grid_side must be >= 1");
  if (params.key_digit < 0 || params.key_digit > 9) {
    throw Error(Errc::InvalidArgument, "key_digit must be in 0..9");
  }
  if (params.bag_count < 2) throw Error(Errc::TooFewBags, "bag_count must be >= 2");
  check_fraction(params.positive_fraction, "positive_fraction");
  check_fraction(params.key_rate, "key_rate");
  if (images.dims.size() != 3 || labels.dims.size() != 1 || images.dims[0] != labels.dims[0]) {
    throw Error(Errc::ShapeMismatch, "expected an N x H x W image tensor and N labels");
  }

  const std::size_t height = images.dims[1];
  const std::size_t width = images.dims[2];
  const std::size_t dim = height * width;
  const std::size_t k = params.grid_side * params.grid_side;

  std::vector<std::size_t> key_pool, other_pool;
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    (labels.data[i] == params.key_digit ? key_pool : other_pool).push_back(i);
  }
  if (key_pool.empty()) {
    throw Error(Errc::InsufficientSourceImages,
                "no source images of key digit " + std::to_string(params.key_digit));
  }
  if (other_pool.empty()) {
    throw Error(Errc::InsufficientSourceImages, "no source images of non-key digits");
  }

  MilDataset ds;
  ds.name = "mnist-grid" + std::to_string(params.grid_side) + "-digit" + std::to_string(params.key_digit);
  ds.rng_seed = params.seed;
  ds.grid = GridLayout{params.grid_side, width, height};
  ds.generator = {
      {"generator", "mnist"},
      {"grid_side", std::to_string(params.grid_side)},
      {"instances_per_bag", std::to_string(k)},
      {"key_digit", std::to_string(params.key_digit)},
      {"bag_count", std::to_string(params.bag_count)},
      {"positive_fraction", fmt_real(params.positive_fraction)},
      {"key_rate", fmt_real(params.key_rate)},
      {"source_images", std::to_string(labels.data.size())},
  };

  Rng rng(params.seed);
  ds.bags.reserve(params.bag_count);
  for (std::size_t b = 0; b < params.bag_count; ++b) {
    Bag bag;
    bag.id = bag_name(b);
    bag.instances.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(dim));
    std::vector<uint8_t> inst(k, 0);
    const bool positive = rng.bernoulli(params.positive_fraction);
    if (positive) {
      for (std::size_t pos : choose_positions(rng, k, sample_key_count(rng, k, params.key_rate))) {
        inst[pos] = 1;
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      const auto& pool = inst[i] ? key_pool : other_pool;
      const std::size_t src = pool[rng.below(pool.size())];
      const uint8_t* pixels = images.data.data() + src * dim;
      for (std::size_t j = 0; j < dim; ++j) {
        bag.instances(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = pixels[j] / 255.0;
      }
    }
    bag.bag_label = positive ? 1 : 0;
    bag.instance_labels = std::move(inst);
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

std::vector<std::size_t> signal_coordinates(std::size_t dim) {
  // Every eighth coordinate, at least one.
  std::vector<std::size_t> coords;
  for (std::size_t c = 0; c < dim; c += 8) coords.push_back(c);
  return coords;
}

MilDataset make_synthetic_bags(const SyntheticParams& params, std::vector<std::string>* warnings) {
  if (params.bag_count < 2) throw Error(Errc::TooFewBags, "bag_count must be >= 2");
  if (params.instances_per_bag < 1) throw Error(Errc::InvalidArgument, "instances_per_bag must be >= 1");
  if (params.dim < 2) throw Error(Errc::InvalidArgument, "dim must be >= 2");
  check_fraction(params.positive_fraction, "positive_fraction");
  check_fraction(params.key_rate, "key_rate");
  if (!(params.signal_strength >= 0.0) || !(params.noise_level >= 0.0) ||
      !std::isfinite(params.signal_strength) || !std::isfinite(params.noise_level)) {
    throw Error(Errc::InvalidArgument, "signal_strength and noise_level must be finite and >= 0");
  }
  if (params.signal_strength == 0.0 && warnings) {
    warnings->push_back(
        "DegenerateSignal: signal_strength is 0, key instances are indistinguishable from noise");
  }

  const std::size_t k = params.instances_per_bag;
  const auto dim = static_cast<Eigen::Index>(params.dim);
  const auto coords = signal_coordinates(params.dim);

  MilDataset ds;
  ds.name = "synthetic";
  ds.rng_seed = params.seed;
  ds.generator = {
      {"generator", "synthetic"},
      {"bag_count", std::to_string(params.bag_count)},
      {"instances_per_bag", std::to_string(k)},
      {"dim", std::to_string(params.dim)},
      {"positive_fraction", fmt_real(params.positive_fraction)},
      {"key_rate", fmt_real(params.key_rate)},
      {"signal_strength", fmt_real(params.signal_strength)},
      {"noise_level", fmt_real(params.noise_level)},
  };

  Rng rng(params.seed);
  ds.bags.reserve(params.bag_count);
  for (std::size_t b = 0; b < params.bag_count; ++b) {
    Bag bag;
    bag.id = bag_name(b);
    bag.instances.resize(static_cast<Eigen::Index>(k), dim);
    std::vector<uint8_t> inst(k, 0);
    const bool positive = rng.bernoulli(params.positive_fraction);
    if (positive) {
      for (std::size_t pos : choose_positions(rng, k, sample_key_count(rng, k, params.key_rate))) {
        inst[pos] = 1;
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      auto row = bag.instances.row(static_cast<Eigen::Index>(i));
      for (Eigen::Index j = 0; j < dim; ++j) row(j) = rng.uniform() * params.noise_level;
      if (inst[i]) {
        for (std::size_t c : coords) row(static_cast<Eigen::Index>(c)) += params.signal_strength;
      }
      row = row.cwiseMax(0.0).cwiseMin(1.0);
    }
    bag.bag_label = positive ? 1 : 0;
    bag.instance_labels = std::move(inst);
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

// ---------------------------------------------------------------- splits

std::vector<std::size_t> SplitPlan::fold_members(std::size_t repeat, std::size_t fold) const {
  std::vector<std::size_t> out;
  const auto& a = assignments.at(repeat);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> SplitPlan::complement(std::size_t repeat, std::size_t fold) const {
  std::vector<std::size_t> out;
  const auto& a = assignments.at(repeat);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != fold) out.push_back(i);
  }
  return out;
}

namespace {

// Bag indices grouped by label: positives, negatives, unlabeled.
std::array<std::vector<std::size_t>, 3> strata(const MilDataset& ds, std::span<const std::size_t> pool) {
  std::array<std::vector<std::size_t>, 3> out;
  for (std::size_t idx : pool) {
    const auto& label = ds.bags.at(idx).bag_label;
    out[!label ? 2 : (*label == 1 ? 0 : 1)].push_back(idx);
  }
  return out;
}

}  // namespace

SplitPlan kfold_split(const MilDataset& dataset, std::size_t fold_count, std::size_t repeat_count,
                      uint64_t seed) {
  if (fold_count < 2) throw Error(Errc::InvalidArgument, "fold_count must be >= 2");
  if (repeat_count < 1) throw Error(Errc::InvalidArgument, "repeat_count must be >= 1");
  const std::size_t n = dataset.bags.size();
  if (fold_count > n) {
    throw Error(Errc::TooFewBags, std::to_string(n) + " bags cannot fill " +
                                      std::to_string(fold_count) + " folds");
  }

  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;

  SplitPlan plan;
  plan.fold_count = fold_count;
  plan.repeat_count = repeat_count;
  for (std::size_t r = 0; r < repeat_count; ++r) {
    Rng rng(derive_seed(seed, r));
    auto groups = strata(dataset, all);
    std::vector<std::size_t> order;
    for (auto& g : groups) {
      rng.shuffle(std::span(g));
      order.insert(order.end(), g.begin(), g.end());
    }
    // Round-robin over the stratified sequence keeps fold sizes and per-fold
    // class counts within one of each other.
    std::vector<std::size_t> assignment(n);
    for (std::size_t i = 0; i < n; ++i) assignment[order[i]] = i % fold_count;
    plan.assignments.push_back(std::move(assignment));
  }
  return plan;
}

Holdout stratified_holdout(const MilDataset& dataset, std::span<const std::size_t> pool,
                           double validation_fraction, uint64_t seed) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw Error(Errc::InvalidFraction, "validation fraction must lie in (0, 1)");
  }
  if (pool.size() < 2) throw Error(Errc::TooFewBags, "holdout needs at least two bags");
  Rng rng(seed);
  Holdout out;
  for (auto& g : strata(dataset, pool)) {
    rng.shuffle(std::span(g));
    std::size_t take = 0;
    if (g.size() >= 2) {
      take = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(g.size())));
      take = std::clamp<std::size_t>(take, 1, g.size() - 1);
    }
    out.validation.insert(out.validation.end(), g.begin(), g.begin() + static_cast<std::ptrdiff_t>(take));
    out.train.insert(out.train.end(), g.begin() + static_cast<std::ptrdiff_t>(take), g.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  return out;
}

// ---------------------------------------------------------------- stats

DatasetStats dataset_stats(const MilDataset& dataset) {
  DatasetStats s;
  s.bag_count = dataset.bags.size();
  if (s.bag_count == 0) throw Error(Errc::EmptyInput, "dataset has no bags");
  bool instance_labels_complete = true;
  InstanceStats inst;
  for (const Bag& bag : dataset.bags) {
    if (!bag.bag_label) throw Error(Errc::MissingLabels, "bag '" + bag.id + "' has no bag label");
    if (*bag.bag_label != 1) continue;
    ++s.positive_bags;
    if (!bag.instance_labels) {
      instance_labels_complete = false;
      continue;
    }
    inst.instance_count += bag.size();
    for (uint8_t l : *bag.instance_labels) inst.positive_instances += l;
  }
  s.positive_bag_pct = 100.0 * static_cast<double>(s.positive_bags) / static_cast<double>(s.bag_count);
  s.negative_bag_pct = 100.0 - s.positive_bag_pct;
  if (s.positive_bags > 0 && instance_labels_complete) {
    inst.positive_pct = 100.0 * static_cast<double>(inst.positive_instances) /
                        static_cast<double>(inst.instance_count);
    inst.negative_pct = 100.0 - inst.positive_pct;
    s.instances = inst;
  }
  return s;
}

}  // namespace milkid
