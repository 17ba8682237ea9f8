#include "retinet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "retinet/error.hpp"

namespace retinet {

void AugmentConfig::validate() const {
  const auto fraction = [](const char* name, double v) {
    if (!(v >= 0.0 && v < 1.0)) {
      throw ConfigError(std::string("augment.") + name + " must be in [0,1), got " + std::to_string(v));
    }
  };
  fraction("shift_frac", shift_frac);
  fraction("shear_frac", shear_frac);
  fraction("zoom_frac", zoom_frac);
  if (!(rotation_deg >= 0.0 && rotation_deg <= 180.0)) {
    throw ConfigError("augment.rotation_deg must be in [0,180], got " + std::to_string(rotation_deg));
  }
}

AffineParams random_affine_params(const AugmentConfig& cfg, Xoshiro256pp& rng) {
  AffineParams p;
  p.theta_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  p.tx_frac = rng.uniform(-cfg.shift_frac, cfg.shift_frac);
  p.ty_frac = rng.uniform(-cfg.shift_frac, cfg.shift_frac);
  p.shear = rng.uniform(-cfg.shear_frac, cfg.shear_frac);
  p.zoom = rng.uniform(1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac);
  const bool coin = rng.bernoulli(0.5);
  p.flip = cfg.horizontal_flip && coin;
  // U(-0, 0) can produce -0.0; normalize so zero ranges give exact identity.
  for (double* v : {&p.theta_deg, &p.tx_frac, &p.ty_frac, &p.shear}) {
    if (*v == 0.0) *v = 0.0;
  }
  return p;
}

namespace {

struct Linear2 {
  double a, b, d, e;  // [a b; d e]
};

Linear2 mul(const Linear2& l, const Linear2& r) {
  return {l.a * r.a + l.b * r.d, l.a * r.b + l.b * r.e, l.d * r.a + l.e * r.d,
          l.d * r.b + l.e * r.e};
}

void check_finite(const AffineParams& p) {
  for (double v : {p.theta_deg, p.tx_frac, p.ty_frac, p.shear, p.zoom}) {
    if (!std::isfinite(v)) throw ConfigError("apply_affine: non-finite affine parameter");
  }
  if (p.zoom <= 0.0) throw ConfigError("apply_affine: zoom must be positive");
}

}  // namespace

Affine2x3 forward_affine(const AffineParams& p, std::size_t height, std::size_t width) {
  check_finite(p);
  const double rad = p.theta_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const Linear2 rot{c, -s, s, c};
  const Linear2 shear{1.0, p.shear, 0.0, 1.0};
  const Linear2 zoom{p.zoom, 0.0, 0.0, p.zoom};
  const Linear2 flip{p.flip ? -1.0 : 1.0, 0.0, 0.0, 1.0};
  const Linear2 A = mul(rot, mul(shear, mul(zoom, flip)));
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double tx = p.tx_frac * static_cast<double>(width);
  const double ty = p.ty_frac * static_cast<double>(height);
  // out = A (src - c) + c + t
  return {A.a, A.b, cx + tx - (A.a * cx + A.b * cy), A.d, A.e, cy + ty - (A.d * cx + A.e * cy)};
}

Affine2x3 inverse_affine(const AffineParams& p, std::size_t height, std::size_t width) {
  check_finite(p);
  const double rad = p.theta_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  // A^-1 = Flip^-1 Zoom^-1 Shear^-1 R^-1, each inverted in closed form.
  const Linear2 rot_inv{c, s, -s, c};
  const Linear2 shear_inv{1.0, -p.shear, 0.0, 1.0};
  const Linear2 zoom_inv{1.0 / p.zoom, 0.0, 0.0, 1.0 / p.zoom};
  const Linear2 flip{p.flip ? -1.0 : 1.0, 0.0, 0.0, 1.0};
  const Linear2 B = mul(flip, mul(zoom_inv, mul(shear_inv, rot_inv)));
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double ox = cx + p.tx_frac * static_cast<double>(width);
  const double oy = cy + p.ty_frac * static_cast<double>(height);
  // src = B (out - c - t) + c
  return {B.a, B.b, cx - (B.a * ox + B.b * oy), B.d, B.e, cy - (B.d * ox + B.e * oy)};
}

Tensor apply_affine(const Tensor& image, const AffineParams& params, FillMode fill) {
  if (image.rank() != 3) throw ShapeError("apply_affine: expects [C,H,W], got " + shape_str(image.shape()));
  check_finite(params);
  if (params.is_identity()) return image;
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const Affine2x3 m = inverse_affine(params, H, W);
  Tensor out(image.shape());
  const double max_x = static_cast<double>(W) - 1.0, max_y = static_cast<double>(H) - 1.0;
  const std::size_t plane = H * W;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double sx = m[0] * fx + m[1] * fy + m[2];
      double sy = m[3] * fx + m[4] * fy + m[5];
      if (fill == FillMode::nearest) {
        sx = std::clamp(sx, 0.0, max_x);
        sy = std::clamp(sy, 0.0, max_y);
      }
      const double x0f = std::floor(sx), y0f = std::floor(sy);
      const double wx = sx - x0f, wy = sy - y0f;
      const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
      // Four taps; out-of-range taps contribute zero (zeros fill only).
      const auto in_range = [&](long xi, long yi) {
        return xi >= 0 && yi >= 0 && xi < static_cast<long>(W) && yi < static_cast<long>(H);
      };
      const long xs[2] = {x0, x0 + 1}, ys[2] = {y0, y0 + 1};
      const double wxs[2] = {1.0 - wx, wx}, wys[2] = {1.0 - wy, wy};
      for (std::size_t c = 0; c < C; ++c) {
        const float* src = image.ptr() + c * plane;
        double v = 0.0;
        for (int j = 0; j < 2; ++j) {
          for (int i = 0; i < 2; ++i) {
            const double w = wxs[i] * wys[j];
            if (w == 0.0 || !in_range(xs[i], ys[j])) continue;
            v += w * src[static_cast<std::size_t>(ys[j]) * W + static_cast<std::size_t>(xs[i])];
          }
        }
        out[c * plane + y * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace retinet
