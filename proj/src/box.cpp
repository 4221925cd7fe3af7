#include "docseg/box.hpp"

#include <algorithm>
#include <cmath>

namespace docseg {

double box_iou(const BoxCXCYWH& a, const BoxCXCYWH& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

PixelRect to_pixel_rect(const BoxCXCYWH& box, int height, int width) {
  auto clip = [](double v, int hi) { return std::clamp(static_cast<int>(std::lround(v)), 0, hi); };
  return {clip(box.x0() * width, width), clip(box.y0() * height, height),
          clip(box.x1() * width, width), clip(box.y1() * height, height)};
}

BoxCXCYWH from_pixel_rect(const PixelRect& rect, int height, int width) {
  return BoxCXCYWH::from_corners(static_cast<double>(rect.x0) / width,
                                 static_cast<double>(rect.y0) / height,
                                 static_cast<double>(rect.x1) / width,
                                 static_cast<double>(rect.y1) / height);
}

std::ostream& operator<<(std::ostream& os, const BoxCXCYWH& b) {
  return os << "(" << b.cx << ", " << b.cy << ", " << b.w << ", " << b.h << ")";
}

}  // namespace docseg
