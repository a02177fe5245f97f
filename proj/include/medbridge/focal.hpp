#pragma once

#include <cstdint>
#include <vector>

#include "medbridge/image.hpp"

namespace medbridge {

enum class FocalMode { sliding, random };

struct FocalConfig {
  int num_views = 5;       // N: global view + N-1 local crops
  int crop_size = 512;
  int stride = 384;        // sliding mode; 384 = 25% overlap at crop 512
  FocalMode mode = FocalMode::sliding;
  int target_resolution = 224;
  std::uint64_t rng_seed = 0;  // random placement and grid-subset selection

  void validate() const;
};

struct CropBox {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

// views[0] is always the resized full image; boxes has one entry per local
// crop (so it is empty when only the global view is produced).
struct ViewSet {
  std::vector<Image> views;
  std::vector<CropBox> boxes;
};

// Sliding-window anchor positions along one axis: k*stride while the window
// fits, plus a final position clamped to dim-crop when the last fitting
// window does not reach the far edge. Guarantees coverage of [0, dim).
std::vector<int> axis_positions(int dim, int crop, int stride);

// Cartesian product of the two axes' positions, row-major (y outer, x inner).
std::vector<CropBox> grid_positions(int height, int width, int crop_size, int stride);

ViewSet sample_views(const Image& image, const FocalConfig& config);

}  // namespace medbridge
