#include "exact/image.h"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "exact/error.h"

namespace exact {

void Image::set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x >= width || y >= height) return;
  std::size_t i = (y * width + x) * 3;
  rgb[i] = r;
  rgb[i + 1] = g;
  rgb[i + 2] = b;
}

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_be32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_be32(out, crc);
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
  if (img.width == 0 || img.height == 0) throw ContractError("png: empty image");

  // Filter byte 0 per scanline, then one zlib stream.
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (1 + img.width * 3));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>(y * img.width * 3),
               img.rgb.begin() + static_cast<std::ptrdiff_t>((y + 1) * img.width * 3));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw FormatError("png: deflate failed");
  compressed.resize(bound);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", compressed);
  append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("png: cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

void heat_color(double v, std::uint8_t* rgb) {
  v = std::clamp(v, 0.0, 1.0);
  // Five-anchor approximation of a perceptual sequential map.
  static const double anchors[5][3] = {{0.267, 0.005, 0.329},
                                       {0.229, 0.322, 0.546},
                                       {0.127, 0.566, 0.551},
                                       {0.369, 0.789, 0.383},
                                       {0.993, 0.906, 0.144}};
  double t = v * 4.0;
  int i = std::min(3, static_cast<int>(t));
  double f = t - i;
  for (int c = 0; c < 3; ++c) {
    double x = anchors[i][c] + f * (anchors[i + 1][c] - anchors[i][c]);
    rgb[c] = static_cast<std::uint8_t>(std::lround(255.0 * x));
  }
}

void class_color(std::size_t cls, std::uint8_t* rgb) {
  static const std::uint8_t palette[12][3] = {
      {25, 25, 25},    {230, 80, 60},  {70, 150, 230}, {90, 190, 90},
      {240, 200, 60},  {170, 90, 200}, {80, 200, 200}, {240, 140, 40},
      {200, 120, 120}, {120, 120, 40}, {40, 120, 120}, {180, 180, 220}};
  if (cls == kIgnoreLabel) {
    rgb[0] = rgb[1] = rgb[2] = 128;
    return;
  }
  const std::uint8_t* c = palette[cls % 12];
  rgb[0] = c[0];
  rgb[1] = c[1];
  rgb[2] = c[2];
}

Image render_heatmap(const Eigen::ArrayXd& cam, std::size_t grid_h, std::size_t grid_w,
                     std::size_t K, std::size_t k, std::size_t cell) {
  Image img(grid_w * cell, grid_h * cell);
  for (std::size_t y = 0; y < grid_h * cell; ++y)
    for (std::size_t x = 0; x < grid_w * cell; ++x) {
      std::size_t p = (y / cell) * grid_w + (x / cell);
      std::uint8_t rgb[3];
      heat_color(cam[static_cast<Eigen::Index>(p * K + k)], rgb);
      img.set(x, y, rgb[0], rgb[1], rgb[2]);
    }
  return img;
}

Image render_mask(const MaskTensor& mask, std::size_t cell) {
  std::size_t h = mask.dims[0], w = mask.dims[1];
  Image img(w * cell, h * cell);
  for (std::size_t y = 0; y < h * cell; ++y)
    for (std::size_t x = 0; x < w * cell; ++x) {
      std::uint8_t rgb[3];
      class_color(mask.data[(y / cell) * w + (x / cell)], rgb);
      img.set(x, y, rgb[0], rgb[1], rgb[2]);
    }
  return img;
}

Image compose_grid(const std::vector<std::vector<Image>>& rows, std::size_t gap) {
  std::size_t total_h = gap, total_w = 0;
  for (const auto& row : rows) {
    std::size_t row_h = 0, row_w = gap;
    for (const auto& img : row) {
      row_h = std::max(row_h, img.height);
      row_w += img.width + gap;
    }
    total_h += row_h + gap;
    total_w = std::max(total_w, row_w);
  }
  Image out(total_w, total_h, 255);
  std::size_t y0 = gap;
  for (const auto& row : rows) {
    std::size_t x0 = gap, row_h = 0;
    for (const auto& img : row) {
      for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
          std::size_t i = (y * img.width + x) * 3;
          out.set(x0 + x, y0 + y, img.rgb[i], img.rgb[i + 1], img.rgb[i + 2]);
        }
      x0 += img.width + gap;
      row_h = std::max(row_h, img.height);
    }
    y0 += row_h + gap;
  }
  return out;
}

Image render_attention_chart(const Eigen::ArrayXd& a_tilde, std::size_t T, std::size_t K,
                             std::size_t width, std::size_t height) {
  Image img(width, height, 250);
  std::size_t ml = 8, mr = 8, mt = 8, mb = 8;
  std::size_t pw = width - ml - mr, ph = height - mt - mb;

  double vmax = 1e-9;
  for (Eigen::Index i = 0; i < a_tilde.size(); ++i) vmax = std::max(vmax, a_tilde[i]);

  // Axes.
  for (std::size_t x = ml; x < ml + pw; ++x) img.set(x, mt + ph, 60, 60, 60);
  for (std::size_t y = mt; y <= mt + ph; ++y) img.set(ml, y, 60, 60, 60);

  auto px = [&](std::size_t t) {
    return ml + (T > 1 ? t * (pw - 1) / (T - 1) : 0);
  };
  auto py = [&](double v) {
    double f = std::clamp(v / vmax, 0.0, 1.0);
    return mt + ph - static_cast<std::size_t>(std::lround(f * static_cast<double>(ph)));
  };

  for (std::size_t k = 0; k < K; ++k) {
    std::uint8_t rgb[3];
    class_color(k + 1, rgb);
    for (std::size_t t = 0; t + 1 < T; ++t) {
      double v0 = a_tilde[static_cast<Eigen::Index>(t * K + k)];
      double v1 = a_tilde[static_cast<Eigen::Index>((t + 1) * K + k)];
      long x0 = static_cast<long>(px(t)), x1 = static_cast<long>(px(t + 1));
      long y0 = static_cast<long>(py(v0)), y1 = static_cast<long>(py(v1));
      long steps = std::max(std::labs(x1 - x0), std::labs(y1 - y0));
      for (long s = 0; s <= steps; ++s) {
        long x = x0 + (x1 - x0) * s / std::max(steps, 1L);
        long y = y0 + (y1 - y0) * s / std::max(steps, 1L);
        img.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), rgb[0], rgb[1], rgb[2]);
        img.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y + 1), rgb[0], rgb[1], rgb[2]);
      }
    }
  }
  return img;
}

}  // namespace exact
