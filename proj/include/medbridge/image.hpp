#pragma once

#include <string>
#include <vector>

#include "medbridge/core.hpp"

namespace medbridge {

// Dense raster, row-major, interleaved channels, intensities in [0, 1].
// Grayscale sources are stored as one plane; value() presents the logical
// 3-channel view (channel replication) that the rest of the pipeline sees,
// so a 1024x1024 grayscale decodes to a 1024x1024x3 array without the 3x
// memory cost.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;  // storage planes: 1 or 3
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(std::size_t(h) * w * c, 0.f) {}

  float& plane(int y, int x, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float plane(int y, int x, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }

  // Logical 3-channel access; c in [0, 3).
  float value(int y, int x, int c) const { return plane(y, x, channels == 1 ? 0 : c); }
};

// Binary netpbm: P5 (grayscale) and P6 (RGB), 8- or 16-bit (16-bit samples
// are big-endian per the format). Intensities are divided by the declared
// maxval, so 16-bit depth survives up to normalization. Anything else is an
// I/O error.
Image decode_image(const std::string& path);

// bits must be 8 or 16; img.channels selects P5 vs P6.
void write_pnm(const Image& img, const std::string& path, int bits = 8);

// Bilinear resampling with half-pixel centers (no corner alignment). For
// downscale the triangle kernel support is widened by the scale ratio per
// axis, which is what makes it an antialiasing filter instead of a point
// sampler; for upscale it degenerates to ordinary bilinear interpolation.
Image resize_bilinear(const Image& src, int out_h, int out_w);

// Copies the window [x, x+w) x [y, y+h); throws geometry error if it does
// not lie fully inside src.
Image extract_crop(const Image& src, int x, int y, int w, int h);

}  // namespace medbridge
