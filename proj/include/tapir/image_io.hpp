#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tapir {

// 8-bit interleaved RGB raster, row-major.
struct Image {
  int height = 0, width = 0;
  std::vector<uint8_t> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0) {}
  uint8_t* at(int y, int x) { return &rgb[(static_cast<size_t>(y) * width + x) * 3]; }
  const uint8_t* at(int y, int x) const { return &rgb[(static_cast<size_t>(y) * width + x) * 3]; }
};

// Appends the pixels as doubles in [-1, 1], (y, x, channel) order.
void append_normalized(const Image& img, std::vector<double>& out);

// Throws std::runtime_error with the path on any I/O or codec failure.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

std::string sha256_hex(const void* data, size_t size);
std::string sha256_file(const std::string& path);

}  // namespace tapir
