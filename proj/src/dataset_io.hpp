#pragma once

#include "data.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace milkid {

// Binary dataset container, little-endian:
//   "MILKIDDS" | u32 version=1 | str name | u64 seed | u64 dim
//   | u32 grid_side | u32 tile_width | u32 tile_height
//   | u32 n_generator | (str key, str value) * n_generator
//   | u64 n_bags | per bag: str id, u8 bag_label (0xff = none),
//     u8 has_instance_labels, u64 K, [K x u8 labels], K*D x f64 (row-major)
// Strings are u32 length + bytes.
std::vector<uint8_t> encode_dataset(const MilDataset& dataset);
MilDataset decode_dataset(std::span<const uint8_t> bytes);

void save_dataset(const std::filesystem::path& path, const MilDataset& dataset);
MilDataset load_dataset(const std::filesystem::path& path);

/// Plain key=value manifest describing how to regenerate the dataset, with
/// the container's size and FNV-1a 64 checksum.
std::string dataset_manifest(const MilDataset& dataset, const std::string& container_name,
                             std::span<const uint8_t> container_bytes);

}  // namespace milkid
