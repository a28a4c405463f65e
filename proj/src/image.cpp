#include "occlumesh/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

namespace occlumesh {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_raw_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                   int width, int height, int channels) {
  require(width > 0 && height > 0, ErrorCode::kEmptyInput, "cannot write empty PNG");
  const auto tmp = path.string() + ".tmp";
  {
    FilePtr fp(std::fopen(tmp.c_str(), "wb"));
    require(fp != nullptr, ErrorCode::kIo, "cannot open " + tmp + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      fail(ErrorCode::kIo, "libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY
                      : channels == 3 ? PNG_COLOR_TYPE_RGB
                                      : PNG_COLOR_TYPE_RGBA;
    png_set_IHDR(png, info, width, height, 8, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
      auto* row = const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels);
      png_write_row(png, row);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_raw_png(const std::filesystem::path& path, int& width, int& height,
                                       int& channels) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  require(fp != nullptr, ErrorCode::kIo, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::kIo, "libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  channels = png_get_channels(png, info);
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height * channels);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = pixels.data() + static_cast<std::size_t>(y) * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> pixels(image.data().size());
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data()[i], 0.0, 1.0) * 255.0));
  write_raw_png(path, pixels, image.width(), image.height(), image.channels());
}

Image read_png(const std::filesystem::path& path) {
  int w = 0, h = 0, c = 0;
  const auto pixels = read_raw_png(path, w, h, c);
  Image image(w, h, c);
  for (std::size_t i = 0; i < pixels.size(); ++i) image.data()[i] = pixels[i] / 255.0;
  return image;
}

void write_label_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels,
                     int width, int height) {
  require(labels.size() == static_cast<std::size_t>(width) * height, ErrorCode::kShape,
          "label map size mismatch");
  write_raw_png(path, labels, width, height, 1);
}

std::vector<std::uint8_t> read_label_png(const std::filesystem::path& path, int& width,
                                         int& height) {
  int c = 0;
  auto pixels = read_raw_png(path, width, height, c);
  require(c == 1, ErrorCode::kSchema, path.string() + " is not a single-channel label map");
  return pixels;
}

}  // namespace occlumesh
