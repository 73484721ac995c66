#pragma once

#include <Eigen/Core>

#include "rng.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace milkid {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// One MIL example: K instances (rows) of dimension D, values in [0,1].
struct Bag {
  Matrix instances;
  std::optional<int> bag_label;
  std::optional<std::vector<uint8_t>> instance_labels;
  std::string id;

  std::size_t size() const { return static_cast<std::size_t>(instances.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(instances.cols()); }
};

/// Throws InvalidArgument when the bag breaks a structural invariant
/// (empty, out-of-range values, label/OR inconsistency).
void validate_bag(const Bag& bag);

/// Display metadata: instances are tiles of tile_width x tile_height pixels
/// laid out on a grid_side x grid_side board. Absent for feature-vector data.
struct GridLayout {
  std::size_t grid_side = 0;
  std::size_t tile_width = 0;
  std::size_t tile_height = 0;

  bool present() const { return grid_side > 0 && tile_width > 0 && tile_height > 0; }
};

struct MilDataset {
  std::vector<Bag> bags;
  std::string name;
  uint64_t rng_seed = 0;
  GridLayout grid;
  // Generator settings, recorded verbatim in the manifest for replay.
  std::vector<std::pair<std::string, std::string>> generator;

  std::size_t dim() const { return bags.empty() ? 0 : bags.front().dim(); }
};

void validate_dataset(const MilDataset& dataset);

// ---------------------------------------------------------------- IDX files

struct IdxTensor {
  std::vector<uint32_t> dims;
  std::vector<uint8_t> data;
};

IdxTensor parse_idx(std::span<const uint8_t> bytes);
IdxTensor load_idx(const std::filesystem::path& path);

// ---------------------------------------------------------------- generators

struct MnistBagParams {
  std::size_t grid_side = 20;
  int key_digit = 9;
  std::size_t bag_count = 100;
  double positive_fraction = 0.5;
  double key_rate = 0.102;
  uint64_t seed = 0;
};

/// Builds grid bags from a rank-3 image tensor and rank-1 label vector.
/// Negative bags draw only non-key digits; positive bags draw their key count
/// from Binomial(K, key_rate) conditioned on being at least one.
MilDataset make_mnist_bags(const IdxTensor& images, const IdxTensor& labels,
                           const MnistBagParams& params);

struct SyntheticParams {
  std::size_t bag_count = 200;
  std::size_t instances_per_bag = 50;
  std::size_t dim = 32;
  double positive_fraction = 0.5;
  double key_rate = 0.1;
  double signal_strength = 0.8;
  double noise_level = 0.3;
  uint64_t seed = 0;
};

/// Coordinates that carry the key-instance pattern for a given dimension.
std::vector<std::size_t> signal_coordinates(std::size_t dim);

MilDataset make_synthetic_bags(const SyntheticParams& params,
                               std::vector<std::string>* warnings = nullptr);

/// Draws from Binomial(n, p) conditioned on the result being >= 1.
std::size_t sample_key_count(Rng& rng, std::size_t n, double p);

// ---------------------------------------------------------------- splits

struct SplitPlan {
  std::size_t fold_count = 0;
  std::size_t repeat_count = 0;
  // assignments[repeat][bag index] -> fold index
  std::vector<std::vector<std::size_t>> assignments;

  std::vector<std::size_t> fold_members(std::size_t repeat, std::size_t fold) const;
  std::vector<std::size_t> complement(std::size_t repeat, std::size_t fold) const;
};

SplitPlan kfold_split(const MilDataset& dataset, std::size_t fold_count,
                      std::size_t repeat_count, uint64_t seed);

struct Holdout {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Stratified train/validation partition of `pool` (bag indices).
Holdout stratified_holdout(const MilDataset& dataset, std::span<const std::size_t> pool,
                           double validation_fraction, uint64_t seed);

// ---------------------------------------------------------------- stats

struct InstanceStats {
  std::size_t instance_count = 0;
  std::size_t positive_instances = 0;
  double positive_pct = 0.0;
  double negative_pct = 0.0;
};

struct DatasetStats {
  std::size_t bag_count = 0;
  std::size_t positive_bags = 0;
  double positive_bag_pct = 0.0;
  double negative_bag_pct = 0.0;
  // Computed over positive bags only; empty when there are none or when
  // instance labels are missing.
  std::optional<InstanceStats> instances;
};

DatasetStats dataset_stats(const MilDataset& dataset);

}  // namespace milkid
