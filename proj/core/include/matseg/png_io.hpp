#pragma once

// Minimal PNG codec for the formats the toolkit exchanges: 8-bit grayscale
// label maps and 8-bit RGB(A) images, non-interlaced. Palette images decode
// to their palette indices, which is the label semantics of indexed masks.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "matseg/tensor.hpp"

namespace matseg {

class PngError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageU8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 = gray/indexed, 3 = rgb, 4 = rgba
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

ImageU8 decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const ImageU8& image);

ImageU8 load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const ImageU8& image);

// [0, 255] bytes <-> [0, 1] floats, (C, H, W) layout.
Tensor tensor_from_image(const ImageU8& image);
ImageU8 image_from_tensor(const Tensor& t);

// Single-channel images as label masks.
LabelMask mask_from_image(const ImageU8& image);
ImageU8 image_from_mask(const LabelMask& mask);

}  // namespace matseg
