#include "chart.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>

namespace retinet::cli {

namespace {

using Color = std::array<std::uint8_t, 3>;

constexpr Color kAxis{60, 60, 60};
constexpr Color kGrid{225, 225, 225};
constexpr Color kTrain{31, 119, 180};
constexpr Color kVal{255, 127, 14};

void put(Image8& img, long x, long y, const Color& c) {
  if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) return;
  for (std::size_t k = 0; k < 3; ++k) img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), k) = c[k];
}

void line(Image8& img, long x0, long y0, long x1, long y1, const Color& c, int thickness = 1) {
  const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    for (int ox = 0; ox < thickness; ++ox) {
      for (int oy = 0; oy < thickness; ++oy) put(img, x0 + ox, y0 + oy, c);
    }
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

struct Panel {
  long left, top, right, bottom;
  double y_lo, y_hi;
  std::size_t epochs;

  [[nodiscard]] long px(std::size_t epoch) const {
    if (epochs <= 1) return (left + right) / 2;
    return left + std::lround(static_cast<double>(epoch - 1) / static_cast<double>(epochs - 1) *
                              static_cast<double>(right - left));
  }
  [[nodiscard]] long py(double v) const {
    const double t = (v - y_lo) / (y_hi - y_lo);
    return bottom - std::lround(std::clamp(t, 0.0, 1.0) * static_cast<double>(bottom - top));
  }
};

void draw_frame(Image8& img, const Panel& p) {
  for (int k = 1; k < 4; ++k) {
    const long y = p.top + (p.bottom - p.top) * k / 4;
    line(img, p.left, y, p.right, y, kGrid);
  }
  line(img, p.left, p.bottom, p.right, p.bottom, kAxis);
  line(img, p.left, p.top, p.left, p.bottom, kAxis);
}

template <typename Get>
void draw_series(Image8& img, const Panel& p, const std::vector<EpochLog>& logs, Get get, const Color& c) {
  bool have_prev = false;
  long prev_x = 0, prev_y = 0;
  for (const auto& l : logs) {
    const std::optional<double> v = get(l);
    if (!v) {
      have_prev = false;
      continue;
    }
    const long x = p.px(l.epoch), y = p.py(*v);
    if (have_prev) line(img, prev_x, prev_y, x, y, c, 2);
    line(img, x - 2, y, x + 2, y, c, 1);
    have_prev = true;
    prev_x = x;
    prev_y = y;
  }
}

}  // namespace

Image8 render_curves(const std::vector<EpochLog>& logs, std::size_t width, std::size_t height) {
  Image8 img(width, height);
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{255});
  std::size_t epochs = 1;
  double max_loss = 0.0;
  for (const auto& l : logs) {
    epochs = std::max(epochs, l.epoch);
    max_loss = std::max({max_loss, l.train_loss, l.val_loss.value_or(0.0)});
  }
  if (!(max_loss > 0.0) || !std::isfinite(max_loss)) max_loss = 1.0;
  const long w = static_cast<long>(width), h = static_cast<long>(height);
  const long margin = 24;
  const Panel loss{margin, margin, w / 2 - margin, h - margin, 0.0, max_loss * 1.05, epochs};
  const Panel acc{w / 2 + margin, margin, w - margin, h - margin, 0.0, 1.0, epochs};
  draw_frame(img, loss);
  draw_frame(img, acc);
  draw_series(img, loss, logs, [](const EpochLog& l) { return std::optional<double>(l.train_loss); }, kTrain);
  draw_series(img, loss, logs, [](const EpochLog& l) { return l.val_loss; }, kVal);
  draw_series(img, acc, logs, [](const EpochLog& l) { return std::optional<double>(l.train_acc); }, kTrain);
  draw_series(img, acc, logs, [](const EpochLog& l) { return l.val_acc; }, kVal);
  return img;
}

}  // namespace retinet::cli
