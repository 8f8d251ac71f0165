#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmsnet/tensor.hpp"

namespace cmsnet {

/// Interleaved 8-bit image (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Image8& image);
void write_png16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 std::span<const std::uint16_t> gray);

/// Reads gray or RGB PNGs; palette and alpha are expanded/stripped, 16-bit
/// samples are reduced to 8 bits.
Image8 read_png(const std::filesystem::path& path);

/// 1 x C x H x W tensor with values in [0, 1].
Tensor image_to_tensor(const Image8& image);
/// Quantises batch item `b` of a tensor with values in [0, 1].
Image8 tensor_to_image(const Tensor& tensor, std::size_t b = 0);

Image8 labels_to_image(const LabelMap& labels, std::size_t b = 0);
LabelMap image_to_labels(const Image8& image);

/// Version string of the linked PNG library.
std::string png_library_version();

}  // namespace cmsnet
