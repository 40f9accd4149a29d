#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "hccm/error.hpp"

namespace hccm {

/// H x W x 3 interleaved pixels in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), pixels(h * w * 3, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }

  bool operator==(const Image&) const = default;
};

struct Corners {
  double x1, y1, x2, y2;
};

/// Axis-aligned box in center-size form, as fractions of the image extent.
struct Box {
  double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;

  bool operator==(const Box&) const = default;

  /// Extent [cx - w/2, cx + w/2] x [cy - h/2, cy + h/2] clipped to [0, 1].
  Corners corners() const {
    return {std::clamp(cx - w / 2, 0.0, 1.0), std::clamp(cy - h / 2, 0.0, 1.0),
            std::clamp(cx + w / 2, 0.0, 1.0), std::clamp(cy + h / 2, 0.0, 1.0)};
  }

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }

  bool valid() const {
    return cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1 && w > 0 && w <= 1 && h > 0 && h <= 1;
  }

  void validate() const {
    require(cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1, "box: center (", cx, ", ", cy,
            ") outside [0,1]");
    require(w > 0 && w <= 1 && h > 0 && h <= 1, "box: size (", w, ", ", h,
            ") violates 0 < w,h <= 1");
  }
};

namespace detail {

// Bilinear sample of channel c at continuous pixel coordinates, where pixel
// (r, col) has its center at (col + 0.5, r + 0.5). Coordinates clamp to the
// outermost centers.
inline float bilinear(const Image& img, double x, double y, std::size_t c) {
  const double fx = std::clamp(x - 0.5, 0.0, static_cast<double>(img.width - 1));
  const double fy = std::clamp(y - 0.5, 0.0, static_cast<double>(img.height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(fx));
  const auto y0 = static_cast<std::size_t>(std::floor(fy));
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const double ax = fx - static_cast<double>(x0);
  const double ay = fy - static_cast<double>(y0);
  const double top = (1 - ax) * img.at(y0, x0, c) + ax * img.at(y0, x1, c);
  const double bottom = (1 - ax) * img.at(y1, x0, c) + ax * img.at(y1, x1, c);
  return static_cast<float>((1 - ay) * top + ay * bottom);
}

}  // namespace detail

/// Resample the box region to out_h x out_w. Every output cell averages a
/// 2 x 2 grid of bilinear samples placed at the quarter points of its
/// sub-rectangle of the box.
inline Image roi_align(const Image& img, const Box& box, std::size_t out_h, std::size_t out_w) {
  require(out_h >= 1 && out_w >= 1, "roi_align: output dims must be >= 1");
  require(img.height > 0 && img.width > 0, "roi_align: empty image");
  box.validate();
  const Corners c = box.corners();
  const double x1 = c.x1 * static_cast<double>(img.width);
  const double x2 = c.x2 * static_cast<double>(img.width);
  const double y1 = c.y1 * static_cast<double>(img.height);
  const double y2 = c.y2 * static_cast<double>(img.height);
  require(x2 - x1 >= 2.0 && y2 - y1 >= 2.0, "roi_align: degenerate box spanning ", x2 - x1,
          " x ", y2 - y1, " pixels (minimum 2)");
  const double bin_w = (x2 - x1) / static_cast<double>(out_w);
  const double bin_h = (y2 - y1) / static_cast<double>(out_h);
  Image out(out_h, out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double acc = 0;
        for (int sy = 0; sy < 2; ++sy) {
          const double y = y1 + (static_cast<double>(oy) + (sy + 0.5) / 2.0) * bin_h;
          for (int sx = 0; sx < 2; ++sx) {
            const double x = x1 + (static_cast<double>(ox) + (sx + 0.5) / 2.0) * bin_w;
            acc += detail::bilinear(img, x, y, ch);
          }
        }
        out.at(oy, ox, ch) = static_cast<float>(acc / 4.0);
      }
    }
  }
  return out;
}

}  // namespace hccm
