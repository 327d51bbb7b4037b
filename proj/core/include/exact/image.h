#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "exact/tensor.h"

namespace exact {

// Plain 8-bit RGB raster.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // 3 bytes per pixel, row-major

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 255)
      : width(w), height(h), rgb(w * h * 3, fill) {}

  void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

void write_png(const std::string& path, const Image& img);

// Sequential colormap for score maps in [0,1].
void heat_color(double v, std::uint8_t* rgb);
// Distinct palette for class indices; background (0) is near-black.
void class_color(std::size_t cls, std::uint8_t* rgb);

// One class channel of a [P x K] map rendered over the patch grid.
Image render_heatmap(const Eigen::ArrayXd& cam, std::size_t grid_h, std::size_t grid_w,
                     std::size_t K, std::size_t k, std::size_t cell);
Image render_mask(const MaskTensor& mask, std::size_t cell);

// Horizontal/vertical composition with separator lines.
Image compose_grid(const std::vector<std::vector<Image>>& rows, std::size_t gap = 2);

// Per-class polylines of the temporal-to-class attention over timesteps.
Image render_attention_chart(const Eigen::ArrayXd& a_tilde, std::size_t T, std::size_t K,
                             std::size_t width = 360, std::size_t height = 200);

}  // namespace exact
