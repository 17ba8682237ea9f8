#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "retinet/tensor.hpp"

namespace retinet {

// 8-bit RGB image, rows top to bottom, interleaved HWC.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(w * h * 3, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  friend bool operator==(const Image8&, const Image8&) = default;
};

// PNG (any bit depth / color type, converted to 8-bit RGB) and binary PNM
// (P6 color, P5 grayscale; maxval <= 255). Grayscale is replicated to three
// channels. DataError on unsupported or truncated input.
Image8 decode_image(const std::filesystem::path& path);
Image8 decode_image_bytes(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

std::vector<std::uint8_t> encode_png(const Image8& image);
std::vector<std::uint8_t> encode_ppm(const Image8& image);

// Bilinear, half-pixel centers: src = (dst + 0.5) * in/out - 0.5, clamped to
// the image; results rounded to nearest. Same-size input is returned as is.
Image8 resize_bilinear(const Image8& image, std::size_t out_h, std::size_t out_w);

// [3,H,W] float tensor with value/255 per channel plane.
Tensor normalize(const Image8& image);

// Inverse of normalize (rounded, clamped); used for previews.
Image8 to_image(const Tensor& chw);

}  // namespace retinet
