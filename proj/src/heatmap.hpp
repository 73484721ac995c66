#pragma once

#include "data.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace milkid {

/// Binary PGM (P5) image: one panel per score vector, placed side by side
/// with a two-pixel white gutter. Each instance is drawn as a tile at its
/// grid position; pixel = instance value x score, scaled to 0..255.
std::vector<uint8_t> render_heatmap_pgm(const Bag& bag, const GridLayout& grid,
                                        std::span<const Vector> panels);

}  // namespace milkid
