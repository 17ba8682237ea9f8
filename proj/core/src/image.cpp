#include "retinet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>

#include "retinet/error.hpp"
#include "retinet/fileio.hpp"

namespace retinet {

namespace {

constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

class PnmHeaderReader {
 public:
  PnmHeaderReader(std::span<const std::uint8_t> bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}

  std::size_t number() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) throw DataError(source_ + ": truncated PNM header");
    if (!std::isdigit(bytes_[pos_])) throw DataError(source_ + ": malformed PNM header");
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (v > (1u << 24)) throw DataError(source_ + ": PNM header value too large");
    }
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw DataError(source_ + ": truncated PNM header");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  const std::string& source_;
  std::size_t pos_ = 2;
};

Image8 decode_pnm(std::span<const std::uint8_t> bytes, const std::string& source) {
  const bool color = bytes[1] == '6';
  PnmHeaderReader header(bytes, source);
  const std::size_t w = header.number();
  const std::size_t h = header.number();
  const std::size_t maxval = header.number();
  if (w == 0 || h == 0) throw DataError(source + ": PNM image has zero size");
  if (maxval == 0 || maxval > 255) {
    throw DataError(source + ": unsupported PNM maxval " + std::to_string(maxval) + " (need 1..255)");
  }
  const std::size_t offset = header.raster_offset();
  const std::size_t channels = color ? 3 : 1;
  const std::size_t need = w * h * channels;
  if (bytes.size() < offset + need) {
    throw DataError(source + ": truncated PNM raster (" + std::to_string(bytes.size() - offset) +
                    " of " + std::to_string(need) + " bytes)");
  }
  Image8 img(w, h);
  const std::uint8_t* src = bytes.data() + offset;
  for (std::size_t i = 0; i < w * h; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      unsigned v = src[i * channels + (color ? c : 0)];
      if (maxval != 255) v = (v * 255 + maxval / 2) / maxval;
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::min(v, 255u));
    }
  }
  return img;
}

Image8 decode_png(std::span<const std::uint8_t> bytes, const std::string& source) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(source + ": cannot decode PNG: " + msg);
  }
  image.format = PNG_FORMAT_RGB;
  Image8 img(image.width, image.height);
  if (img.pixels.size() != PNG_IMAGE_SIZE(image)) {
    png_image_free(&image);
    throw DataError(source + ": unexpected PNG buffer size");
  }
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(source + ": cannot decode PNG: " + msg);
  }
  return img;
}

}  // namespace

Image8 decode_image_bytes(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() >= 8 && std::equal(bytes.begin(), bytes.begin() + 8, kPngSignature)) {
    return decode_png(bytes, source);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '6' || bytes[1] == '5')) {
    return decode_pnm(bytes, source);
  }
  if (bytes.size() < 2) throw DataError(source + ": empty or truncated image file");
  throw DataError(source + ": unsupported image format (expected PNG or binary PPM/PGM)");
}

Image8 decode_image(const std::filesystem::path& path) {
  return decode_image_bytes(read_file_bytes(path), path.string());
}

std::vector<std::uint8_t> encode_png(const Image8& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("PNG encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_ppm(const Image8& img) {
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

Image8 resize_bilinear(const Image8& image, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw DataError("resize_bilinear: target size must be positive");
  if (image.width == 0 || image.height == 0) throw DataError("resize_bilinear: empty image");
  if (image.height == out_h && image.width == out_w) return image;

  struct Tap {
    std::size_t i0, i1;
    double frac;
  };
  const auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      t[o] = {i0, std::min(i0 + 1, in - 1), s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(image.height, out_h);
  const auto tx = taps(image.width, out_w);
  Image8 out(out_w, out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double a = image.at(ty[y].i0, tx[x].i0, c), b = image.at(ty[y].i0, tx[x].i1, c);
        const double d = image.at(ty[y].i1, tx[x].i0, c), e = image.at(ty[y].i1, tx[x].i1, c);
        const double top = a + (b - a) * tx[x].frac;
        const double bottom = d + (e - d) * tx[x].frac;
        const double v = top + (bottom - top) * ty[y].frac;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

Tensor normalize(const Image8& image) {
  Tensor t({3, image.height, image.width});
  const std::size_t plane = image.height * image.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      t[c * plane + i] = static_cast<float>(image.pixels[i * 3 + c]) / 255.0f;
    }
  }
  return t;
}

Image8 to_image(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("to_image: expects [3,H,W], got " + shape_str(chw.shape()));
  const std::size_t h = chw.dim(1), w = chw.dim(2), plane = h * w;
  Image8 img(w, h);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const long v = std::lround(static_cast<double>(chw[c * plane + i]) * 255.0);
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
    }
  }
  return img;
}

}  // namespace retinet
