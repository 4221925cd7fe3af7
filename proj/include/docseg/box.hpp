#pragma once

#include <array>
#include <ostream>

namespace docseg {

/// Axis-aligned box, center/size form, normalized to the image extent.
struct BoxCXCYWH {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
  std::array<double, 4> as_array() const { return {cx, cy, w, h}; }

  static BoxCXCYWH from_corners(double x0, double y0, double x1, double y1) {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  bool operator==(const BoxCXCYWH&) const = default;
};

/// Integer pixel rectangle, half-open: rows [y0, y1), cols [x0, x1).
struct PixelRect {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool operator==(const PixelRect&) const = default;
};

double box_iou(const BoxCXCYWH& a, const BoxCXCYWH& b);

/// Pixel rectangle covered by `box` on an image of `height` x `width`, with
/// edges rounded to the nearest pixel boundary and clipped to the image.
PixelRect to_pixel_rect(const BoxCXCYWH& box, int height, int width);
BoxCXCYWH from_pixel_rect(const PixelRect& rect, int height, int width);

std::ostream& operator<<(std::ostream& os, const BoxCXCYWH& b);

}  // namespace docseg
