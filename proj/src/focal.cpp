#include "medbridge/focal.hpp"

namespace medbridge {

void FocalConfig::validate() const {
  require(num_views >= 1, ErrKind::config, "focal: num_views must be >= 1");
  require(crop_size > 0, ErrKind::config, "focal: crop_size must be positive");
  require(stride > 0 && stride <= crop_size, ErrKind::config,
          "focal: stride must be in (0, crop_size]");
  require(target_resolution > 0, ErrKind::config, "focal: target_resolution must be positive");
}

std::vector<int> axis_positions(int dim, int crop, int stride) {
  if (crop > dim) fail(ErrKind::geometry, "crop_size exceeds image dimension");
  std::vector<int> pos;
  for (int k = 0;; ++k) {
    long p = long(k) * stride;
    if (p + crop > dim) break;
    pos.push_back(int(p));
  }
  if (pos.back() + crop < dim) pos.push_back(dim - crop);
  return pos;
}

std::vector<CropBox> grid_positions(int height, int width, int crop_size, int stride) {
  require(stride > 0, ErrKind::precondition, "grid_positions: stride must be positive");
  auto ys = axis_positions(height, crop_size, stride);
  auto xs = axis_positions(width, crop_size, stride);
  std::vector<CropBox> boxes;
  boxes.reserve(ys.size() * xs.size());
  for (int y : ys)
    for (int x : xs) boxes.push_back({x, y, crop_size, crop_size});
  return boxes;
}

ViewSet sample_views(const Image& image, const FocalConfig& config) {
  config.validate();
  if (image.height < config.crop_size || image.width < config.crop_size)
    fail(ErrKind::geometry, "image smaller than crop_size");

  ViewSet out;
  out.views.push_back(resize_bilinear(image, config.target_resolution, config.target_resolution));

  int wanted = config.num_views - 1;
  if (wanted == 0) return out;

  if (config.mode == FocalMode::sliding) {
    auto grid = grid_positions(image.height, image.width, config.crop_size, config.stride);
    if (wanted >= int(grid.size())) {
      out.boxes = grid;  // N adjusts down to |grid|+1
    } else {
      Rng rng(config.rng_seed);
      for (std::size_t i : rng.sample_without_replacement(grid.size(), std::size_t(wanted)))
        out.boxes.push_back(grid[i]);
    }
  } else {
    Rng rng(config.rng_seed);
    for (int i = 0; i < wanted; ++i) {
      int x = int(rng.below(std::uint64_t(image.width - config.crop_size) + 1));
      int y = int(rng.below(std::uint64_t(image.height - config.crop_size) + 1));
      out.boxes.push_back({x, y, config.crop_size, config.crop_size});
    }
  }
  for (const CropBox& b : out.boxes) {
    Image crop = extract_crop(image, b.x, b.y, b.width, b.height);
    out.views.push_back(resize_bilinear(crop, config.target_resolution, config.target_resolution));
  }
  return out;
}

}  // namespace medbridge
