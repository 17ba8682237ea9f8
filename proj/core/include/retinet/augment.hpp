#pragma once

#include <array>

#include "retinet/rng.hpp"
#include "retinet/tensor.hpp"

namespace retinet {

enum class FillMode { nearest, zeros };

struct AugmentConfig {
  double rotation_deg = 30.0;  // theta ~ U(-r, r)
  double shift_frac = 0.2;     // tx, ty ~ U(-s, s), fraction of width/height
  double shear_frac = 0.2;     // affine off-diagonal ~ U(-s, s)
  double zoom_frac = 0.2;      // isotropic zoom ~ U(1-z, 1+z)
  bool horizontal_flip = true;
  FillMode fill = FillMode::nearest;

  // Fractions in [0,1), rotation in [0,180]; ConfigError otherwise.
  void validate() const;
};

struct AffineParams {
  double theta_deg = 0.0;
  double tx_frac = 0.0;
  double ty_frac = 0.0;
  double shear = 0.0;
  double zoom = 1.0;
  bool flip = false;

  [[nodiscard]] bool is_identity() const noexcept {
    return theta_deg == 0.0 && tx_frac == 0.0 && ty_frac == 0.0 && shear == 0.0 && zoom == 1.0 &&
           !flip;
  }
};

// Draw order: theta, tx, ty, shear, zoom, flip (six draws regardless of
// which ranges are zero, so streams stay aligned across configurations).
AffineParams random_affine_params(const AugmentConfig& cfg, Xoshiro256pp& rng);

// Row-major 2x3 matrix [a b c; d e f] mapping (x, y) pixel coordinates.
using Affine2x3 = std::array<double, 6>;

// Forward map source -> output about the image center (x right, y down):
//   out - center = T + R(theta) * Shear * Zoom * Flip * (src - center)
// with Flip x -> -x, Zoom = zoom * I, Shear = [1 shear; 0 1],
// R = [cos -sin; sin cos] and T = (tx_frac * W, ty_frac * H).
Affine2x3 forward_affine(const AffineParams& p, std::size_t height, std::size_t width);

// Output -> source map used for sampling (exact inverse of forward_affine).
Affine2x3 inverse_affine(const AffineParams& p, std::size_t height, std::size_t width);

// Inverse-maps every output pixel of a [C,H,W] image and samples bilinearly.
// `nearest` fill clamps coordinates to the border; `zeros` treats outside taps
// as 0. Results are clamped to [0,1]. Identity params return the input as is.
Tensor apply_affine(const Tensor& image, const AffineParams& params, FillMode fill);

}  // namespace retinet
