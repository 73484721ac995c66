#include "heatmap.hpp"

#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace milkid {

std::vector<uint8_t> render_heatmap_pgm(const Bag& bag, const GridLayout& grid, std::span<const Vector> panels) {
  if (!grid.present()) throw Error(Errc::NoGrid, "dataset carries no grid layout");
  if (grid.tile_width * grid.tile_height != bag.dim()) {
    throw Error(Errc::ShapeMismatch, "tile size does not match instance dimension");
  }
  if (bag.size() > grid.grid_side * grid.grid_side) {
    throw Error(Errc::ShapeMismatch, "bag has more instances than grid cells");
  }
  if (panels.empty()) throw Error(Errc::EmptyInput, "heatmap needs at least one panel");
  for (const auto& p : panels) {
    if (static_cast<std::size_t>(p.size()) != bag.size()) {
      throw Error(Errc::LengthMismatch, "score vector length differs from instance count");
    }
  }

  constexpr std::size_t gutter = 2;
  const std::size_t panel_w = grid.grid_side * grid.tile_width;
  const std::size_t panel_h = grid.grid_side * grid.tile_height;
  const std::size_t width = panels.size() * panel_w + (panels.size() - 1) * gutter;
  const std::size_t height = panel_h;

  std::vector<uint8_t> pixels(width * height, 255);
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const std::size_t x0 = p * (panel_w + gutter);
    for (std::size_t y = 0; y < panel_h; ++y)
      for (std::size_t x = 0; x < panel_w; ++x) pixels[y * width + x0 + x] = 0;
    for (std::size_t k = 0; k < bag.size(); ++k) {
      const std::size_t gy = (k / grid.grid_side) * grid.tile_height;
      const std::size_t gx = x0 + (k % grid.grid_side) * grid.tile_width;
      const double score = std::clamp(panels[p](static_cast<Eigen::Index>(k)), 0.0, 1.0);
      for (std::size_t ty = 0; ty < grid.tile_height; ++ty) {
        for (std::size_t tx = 0; tx < grid.tile_width; ++tx) {
          const double v = bag.instances(static_cast<Eigen::Index>(k),
                                         static_cast<Eigen::Index>(ty * grid.tile_width + tx)) * score;
          pixels[(gy + ty) * width + gx + tx] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
    }
  }

  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

}  // namespace milkid
