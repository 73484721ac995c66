#include "dataset_io.hpp"

#include "bytes.hpp"
#include "error.hpp"

#include <cstdio>

namespace milkid {

namespace {
constexpr std::string_view kMagic = "MILKIDDS";
constexpr uint32_t kVersion = 1;
}  // namespace

std::vector<uint8_t> encode_dataset(const MilDataset& ds) {
  validate_dataset(ds);
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.str(ds.name);
  w.u64(ds.rng_seed);
  w.u64(ds.dim());
  w.u32(static_cast<uint32_t>(ds.grid.grid_side));
  w.u32(static_cast<uint32_t>(ds.grid.tile_width));
  w.u32(static_cast<uint32_t>(ds.grid.tile_height));
  w.u32(static_cast<uint32_t>(ds.generator.size()));
  for (const auto& [k, v] : ds.generator) {
    w.str(k);
    w.str(v);
  }
  w.u64(ds.bags.size());
  for (const Bag& bag : ds.bags) {
    w.str(bag.id);
    w.u8(bag.bag_label ? static_cast<uint8_t>(*bag.bag_label) : 0xff);
    w.u8(bag.instance_labels ? 1 : 0);
    w.u64(bag.size());
    if (bag.instance_labels) {
      for (uint8_t l : *bag.instance_labels) w.u8(l);
    }
    for (Eigen::Index i = 0; i < bag.instances.size(); ++i) w.f64(bag.instances.data()[i]);
  }
  return w.take();
}

MilDataset decode_dataset(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kMagic.size() || r.raw(kMagic.size()) != kMagic) {
    throw Error(Errc::BadMagic, "not a dataset container");
  }
  if (r.u32() != kVersion) throw Error(Errc::BadMagic, "unsupported dataset container version");
  MilDataset ds;
  ds.name = r.str();
  ds.rng_seed = r.u64();
  const uint64_t dim = r.u64();
  ds.grid.grid_side = r.u32();
  ds.grid.tile_width = r.u32();
  ds.grid.tile_height = r.u32();
  const uint32_t n_gen = r.u32();
  for (uint32_t i = 0; i < n_gen; ++i) {
    std::string k = r.str();
    ds.generator.emplace_back(std::move(k), r.str());
  }
  const uint64_t n_bags = r.u64();
  for (uint64_t b = 0; b < n_bags; ++b) {
    Bag bag;
    bag.id = r.str();
    const uint8_t label = r.u8();
    if (label != 0xff) bag.bag_label = label;
    const bool has_inst = r.u8() != 0;
    const uint64_t k = r.u64();
    if (k * dim * 8 > r.remaining()) throw Error(Errc::TruncatedPayload, "dataset container is truncated");
    if (has_inst) {
      std::vector<uint8_t> labels(k);
      for (auto& l : labels) l = r.u8();
      bag.instance_labels = std::move(labels);
    }
    bag.instances.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < bag.instances.size(); ++i) bag.instances.data()[i] = r.f64();
    ds.bags.push_back(std::move(bag));
  }
  if (r.remaining() != 0) throw Error(Errc::TruncatedPayload, "trailing bytes after dataset container");
  validate_dataset(ds);
  return ds;
}

void save_dataset(const std::filesystem::path& path, const MilDataset& dataset) {
  write_file(path, encode_dataset(dataset));
}

MilDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

std::string dataset_manifest(const MilDataset& ds, const std::string& container_name,
                             std::span<const uint8_t> container_bytes) {
  std::string s = "# milkid dataset manifest (key=value)\n";
  auto kv = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
  kv("format", "milkid-dataset/1");
  kv("name", ds.name);
  kv("seed", std::to_string(ds.rng_seed));
  kv("bag_count", std::to_string(ds.bags.size()));
  kv("dim", std::to_string(ds.dim()));
  std::size_t k_min = SIZE_MAX, k_max = 0, total = 0;
  for (const Bag& b : ds.bags) {
    k_min = std::min(k_min, b.size());
    k_max = std::max(k_max, b.size());
    total += b.size();
  }
  kv("instances_per_bag", k_min == k_max ? std::to_string(k_min) : "variable");
  kv("instance_count", std::to_string(total));
  if (ds.grid.present()) {
    kv("grid_side", std::to_string(ds.grid.grid_side));
    kv("tile_width", std::to_string(ds.grid.tile_width));
    kv("tile_height", std::to_string(ds.grid.tile_height));
  }
  for (const auto& [k, v] : ds.generator) kv("generator." + k, v);
  const DatasetStats st = dataset_stats(ds);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", st.positive_bag_pct);
  kv("positive_bag_pct", buf);
  if (st.instances) {
    std::snprintf(buf, sizeof(buf), "%.4f", st.instances->positive_pct);
    kv("positive_instance_pct_in_positive_bags", buf);
  }
  kv("container", container_name);
  kv("container_bytes", std::to_string(container_bytes.size()));
  kv("checksum_fnv1a64", hex64(fnv1a64(container_bytes)));
  return s;
}

}  // namespace milkid
