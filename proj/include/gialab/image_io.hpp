#pragma once

// Portable pixmap output for reconstructions.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "gialab/tensor.hpp"

namespace gialab {

/// 8-bit binary PNM bytes of a C x H x W image in [0, 1] (values clamped):
/// P5 for one channel, P6 for three.
inline std::string encode_pnm(const Tensor& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw ShapeError("dump_image: expected 1xHxW or 3xHxW, got " + shape_str(img.shape()));
  }
  std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::string out = (c == 3 ? "P6\n" : "P5\n") + std::to_string(w) + ' ' + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) {
        double v = std::clamp(img[(k * h + y) * w + x], 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

inline void dump_image(const Tensor& img, const std::filesystem::path& path) {
  std::string bytes = encode_pnm(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace gialab
