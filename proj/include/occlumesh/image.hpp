#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "occlumesh/error.hpp"

namespace occlumesh {

// Interleaved float image, row-major, values nominally in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, double fill = 0.0)
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<std::size_t>(width) * height * channels, fill) {}

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool same_size(const Image& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// Single-channel image with values in [0, 1].
using Mask = Image;

inline Mask make_mask(int width, int height, double fill = 0.0) {
  return Mask(width, height, 1, fill);
}

// 8-bit PNG I/O. Values are scaled by 255 and rounded on write.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Raw 8-bit label maps (no scaling).
void write_label_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels,
                     int width, int height);
std::vector<std::uint8_t> read_label_png(const std::filesystem::path& path, int& width,
                                         int& height);

}  // namespace occlumesh
