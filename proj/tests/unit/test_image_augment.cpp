#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "retinet/augment.hpp"
#include "retinet/error.hpp"
#include "retinet/fileio.hpp"
#include "retinet/image.hpp"

using namespace retinet;
using namespace retinet::testing;

namespace {

Image8 gradient_image(std::size_t w, std::size_t h) {
  Image8 img(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      img.at(y, x, 0) = static_cast<std::uint8_t>((x * 37 + y * 11) % 256);
      img.at(y, x, 1) = static_cast<std::uint8_t>((x * 5 + y * 71) % 256);
      img.at(y, x, 2) = static_cast<std::uint8_t>((x * y) % 256);
    }
  }
  return img;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Normalize, IsExactlyDivisionBy255) {
  Image8 img(256, 1);
  for (std::size_t v = 0; v < 256; ++v) {
    for (std::size_t c = 0; c < 3; ++c) img.at(0, v, c) = static_cast<std::uint8_t>(v);
  }
  const Tensor t = normalize(img);
  ASSERT_EQ(t.shape(), (Shape{3, 1, 256}));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t v = 0; v < 256; ++v) {
      EXPECT_EQ(t[c * 256 + v], static_cast<float>(v) / 255.0f);
    }
  }
  EXPECT_EQ(t[0], 0.0f);
  EXPECT_EQ(t[255], 1.0f);
  EXPECT_EQ(to_image(t), img);
}

TEST(Normalize, ChannelPlanesFromInterleavedPixels) {
  Image8 img(2, 1);
  img.pixels = {255, 0, 51, 0, 102, 255};
  const Tensor t = normalize(img);
  EXPECT_EQ(t.storage(), (std::vector<float>{1.0f, 0.0f, 0.0f, 102 / 255.0f, 51 / 255.0f, 1.0f}));
}

TEST(Resize, OneToOneCheckerboardAveragesToMidGray) {
  Image8 img(8, 8);
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = (x + y) % 2 ? 255 : 0;
    }
  }
  // Exact 2x downsample samples at 2o + 0.5: the mean of each 2x2 block.
  const Image8 small = resize_bilinear(img, 4, 4);
  for (auto v : small.pixels) EXPECT_EQ(v, 128);
}

TEST(Resize, MatchesHalfPixelOracle) {
  const Image8 img = gradient_image(13, 9);
  const std::size_t oh = 20, ow = 7;
  const Image8 out = resize_bilinear(img, oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      const double sy = std::clamp((y + 0.5) * 9.0 / oh - 0.5, 0.0, 8.0);
      const double sx = std::clamp((x + 0.5) * 13.0 / ow - 0.5, 0.0, 12.0);
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t yy = 0; yy < 9; ++yy) {
          for (std::size_t xx = 0; xx < 13; ++xx) {
            const double w = std::max(0.0, 1.0 - std::abs(sy - yy)) * std::max(0.0, 1.0 - std::abs(sx - xx));
            acc += w * img.at(yy, xx, c);
          }
        }
        EXPECT_NEAR(out.at(y, x, c), acc, 0.5 + 1e-9);
      }
    }
  }
  EXPECT_EQ(resize_bilinear(img, 9, 13), img);
  EXPECT_THROW(resize_bilinear(img, 0, 4), DataError);
}

TEST(Decode, PngRoundTrip) {
  const Image8 img = gradient_image(17, 11);
  const auto png = encode_png(img);
  ASSERT_GE(png.size(), 8u);
  EXPECT_EQ(png[1], 'P');
  EXPECT_EQ(decode_image_bytes(png), img);
  EXPECT_EQ(decode_image_bytes(encode_ppm(img)), img);
}

TEST(Decode, GrayscalePgmIsReplicated) {
  auto pgm = bytes_of("P5\n# comment\n3 1\n255\n");
  pgm.insert(pgm.end(), {0, 128, 255});
  const Image8 img = decode_image_bytes(pgm);
  ASSERT_EQ(img.width, 3u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 0, 0, 128, 128, 128, 255, 255, 255}));
}

TEST(Decode, TruncatedAndUnknownInputsAreDataErrors) {
  auto ppm = bytes_of("P6\n4 4\n255\n");
  ppm.resize(ppm.size() + 40, 7);
  EXPECT_THROW(decode_image_bytes(ppm), DataError);
  auto png = encode_png(gradient_image(8, 8));
  png.resize(png.size() / 2);
  EXPECT_THROW(decode_image_bytes(png), DataError);
  EXPECT_THROW(decode_image_bytes(bytes_of("GIF89a....")), DataError);
  EXPECT_THROW(decode_image_bytes({}), DataError);
  EXPECT_THROW(decode_image("/nonexistent/x.png"), DataError);
  const auto dir = scratch_dir("decode_names_file");
  write_file_atomic(dir / "bad.ppm", std::string_view("P6\n2 2\n"));
  try {
    decode_image(dir / "bad.ppm");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.ppm"), std::string::npos);
  }
}

// ---- augmentation ---------------------------------------------------------------

TEST(Affine, QuarterTurnMatchesIndexOracle) {
  Xoshiro256pp rng(1);
  const std::size_t n = 9;
  const Tensor img = random_tensor_f({2, n, n}, rng, 0.0, 1.0);
  AffineParams p;
  p.theta_deg = 90.0;
  const Tensor out = apply_affine(img, p, FillMode::zeros);
  // out - c = R90 (src - c): out(y, x) = src(row n-1-x, col y).
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        EXPECT_NEAR(out[(c * n + y) * n + x], img[(c * n + (n - 1 - x)) * n + y], 1e-6);
      }
    }
  }
}

TEST(Affine, FlipAndIntegerShiftAreExact) {
  Xoshiro256pp rng(2);
  const std::size_t h = 5, w = 8;
  const Tensor img = random_tensor_f({1, h, w}, rng, 0.0, 1.0);
  AffineParams flip;
  flip.flip = true;
  const Tensor f = apply_affine(img, flip, FillMode::zeros);
  AffineParams shift;
  shift.tx_frac = 0.25;  // 2 pixels right
  const Tensor s = apply_affine(img, shift, FillMode::zeros);
  const Tensor sn = apply_affine(img, shift, FillMode::nearest);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      EXPECT_EQ(f[y * w + x], img[y * w + (w - 1 - x)]);
      EXPECT_EQ(s[y * w + x], x < 2 ? 0.0f : img[y * w + x - 2]);
      EXPECT_EQ(sn[y * w + x], img[y * w + (x < 2 ? 0 : x - 2)]);
    }
  }
}

TEST(Affine, InverseUndoesForward) {
  Xoshiro256pp rng(3);
  const AugmentConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    const AffineParams p = random_affine_params(cfg, rng);
    const auto f = forward_affine(p, 37, 53);
    const auto g = inverse_affine(p, 37, 53);
    const double x = rng.uniform(0, 52), y = rng.uniform(0, 36);
    const double ox = f[0] * x + f[1] * y + f[2], oy = f[3] * x + f[4] * y + f[5];
    EXPECT_NEAR(g[0] * ox + g[1] * oy + g[2], x, 1e-9);
    EXPECT_NEAR(g[3] * ox + g[4] * oy + g[5], y, 1e-9);
  }
}

TEST(Affine, ZoomMagnifiesAboutCenter) {
  AffineParams p;
  p.zoom = 2.0;
  const auto f = forward_affine(p, 11, 11);
  // Center fixed, a point 1 px right of center lands 2 px right.
  EXPECT_NEAR(f[0] * 5 + f[1] * 5 + f[2], 5.0, 1e-12);
  EXPECT_NEAR(f[0] * 6 + f[1] * 5 + f[2], 7.0, 1e-12);
}

TEST(Affine, IdentityAndOutputRange) {
  Xoshiro256pp rng(4);
  const Tensor img = random_tensor_f({3, 12, 12}, rng, 0.0, 1.0);
  EXPECT_TRUE(bitwise_equal(apply_affine(img, AffineParams{}, FillMode::nearest), img));
  AugmentConfig none{0.0, 0.0, 0.0, 0.0, false, FillMode::nearest};
  EXPECT_TRUE(random_affine_params(none, rng).is_identity());
  const AugmentConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor out = apply_affine(img, random_affine_params(cfg, rng), FillMode::zeros);
    for (float v : out.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  EXPECT_THROW(apply_affine(Tensor({3, 4}), AffineParams{}, FillMode::zeros), ShapeError);
}

TEST(Augment, MonteCarloBounds) {
  const AugmentConfig cfg;
  Xoshiro256pp rng(5);
  const int n = 100000;
  int flips = 0;
  double min_t = 1e9, max_t = -1e9, min_z = 1e9, max_z = -1e9;
  for (int i = 0; i < n; ++i) {
    const AffineParams p = random_affine_params(cfg, rng);
    ASSERT_LE(std::abs(p.theta_deg), 30.0);
    ASSERT_LE(std::abs(p.tx_frac), 0.2);
    ASSERT_LE(std::abs(p.ty_frac), 0.2);
    ASSERT_LE(std::abs(p.shear), 0.2);
    ASSERT_GE(p.zoom, 0.8);
    ASSERT_LE(p.zoom, 1.2);
    min_t = std::min(min_t, p.theta_deg);
    max_t = std::max(max_t, p.theta_deg);
    min_z = std::min(min_z, p.zoom);
    max_z = std::max(max_z, p.zoom);
    flips += p.flip;
  }
  // Ranges are actually used, not merely respected.
  EXPECT_LT(min_t, -29.9);
  EXPECT_GT(max_t, 29.9);
  EXPECT_LT(min_z, 0.801);
  EXPECT_GT(max_z, 1.199);
  EXPECT_NEAR(flips / static_cast<double>(n), 0.5, 3.0 * std::sqrt(0.25 / n));
}

TEST(Augment, ConfigValidation) {
  AugmentConfig cfg;
  cfg.shift_frac = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = AugmentConfig{};
  cfg.rotation_deg = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(AugmentConfig{}.validate());
}
