#include "cmsnet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "cmsnet/error.hpp"

namespace cmsnet {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error("cannot open " + path.string());
  return f;
}

void write_rows(const std::filesystem::path& path, std::size_t width, std::size_t height,
                int color_type, int bit_depth, const std::vector<png_bytep>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed to encode " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ConfigError("write_png supports 1 or 3 channels");
  }
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw DimensionError("image pixel buffer does not match its extent");
  }
  std::vector<png_bytep> rows(image.height);
  auto* base = const_cast<std::uint8_t*>(image.pixels.data());
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = base + y * image.width * image.channels;
  write_rows(path, image.width, image.height,
             image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, 8, rows);
}

// Samples are stored host-endian and swapped to PNG's big-endian order on
// little-endian hosts by png_set_swap.
void write_png16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 std::span<const std::uint16_t> gray) {
  if (gray.size() != width * height) throw DimensionError("16-bit buffer does not match extent");
  std::vector<png_bytep> rows(height);
  auto* base = reinterpret_cast<png_bytep>(const_cast<std::uint16_t*>(gray.data()));
  for (std::size_t y = 0; y < height; ++y) rows[y] = base + y * width * 2;
  write_rows(path, width, height, PNG_COLOR_TYPE_GRAY, 16, rows);
}

Image8 read_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("failed to decode PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image8 img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.pixels.resize(img.width * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Tensor image_to_tensor(const Image8& image) {
  Tensor t({1, image.channels, image.height, image.width});
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c)
        t(0, c, y, x) = static_cast<float>(image.pixels[(y * image.width + x) * image.channels + c]) / 255.0f;
  return t;
}

Image8 tensor_to_image(const Tensor& tensor, std::size_t b) {
  const Shape& s = tensor.shape();
  Image8 img{s.w, s.h, s.c, std::vector<std::uint8_t>(s.h * s.w * s.c)};
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < s.c; ++c) {
        const float v = std::clamp(tensor(b, c, y, x), 0.0f, 1.0f);
        img.pixels[(y * s.w + x) * s.c + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return img;
}

Image8 labels_to_image(const LabelMap& labels, std::size_t b) {
  Image8 img{labels.w, labels.h, 1, std::vector<std::uint8_t>(labels.h * labels.w)};
  for (std::size_t y = 0; y < labels.h; ++y)
    for (std::size_t x = 0; x < labels.w; ++x) {
      const auto v = labels.at(b, y, x);
      if (v < 0 || v > 255) throw ValidationError("label " + std::to_string(v) + " does not fit 8 bits");
      img.pixels[y * labels.w + x] = static_cast<std::uint8_t>(v);
    }
  return img;
}

LabelMap image_to_labels(const Image8& image) {
  if (image.channels != 1) throw ValidationError("class masks must be single-channel PNGs");
  LabelMap m(1, image.height, image.width);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) m.labels[i] = image.pixels[i];
  return m;
}

std::string png_library_version() { return PNG_LIBPNG_VER_STRING; }

}  // namespace cmsnet
