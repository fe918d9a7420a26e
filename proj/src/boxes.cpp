#include "ssdctx/boxes.hpp"

#include <algorithm>
#include <cmath>

namespace ssdctx {

BoxF to_corner(const CenterBox& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

CenterBox to_center(const BoxF& b) {
  return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1};
}

double iou(const BoxF& a, const BoxF& b) {
  double ix = std::max(0.0, double(std::min(a.x2, b.x2)) - double(std::max(a.x1, b.x1)));
  double iy = std::max(0.0, double(std::min(a.y2, b.y2)) - double(std::max(a.y1, b.y1)));
  double inter = ix * iy;
  double ua = double(a.width()) * a.height() + double(b.width()) * b.height() - inter;
  return ua > 0 ? inter / ua : 0.0;
}

std::array<float, 4> encode_box(const BoxF& gt, const CenterBox& prior, float v0, float v1) {
  double gcx = (double(gt.x1) + gt.x2) / 2, gcy = (double(gt.y1) + gt.y2) / 2;
  double gw = double(gt.x2) - gt.x1, gh = double(gt.y2) - gt.y1;
  return {float((gcx - prior.cx) / (v0 * prior.w)), float((gcy - prior.cy) / (v0 * prior.h)),
          float(std::log(gw / prior.w) / v1), float(std::log(gh / prior.h) / v1)};
}

BoxF decode_box(const std::array<float, 4>& loc, const CenterBox& prior, float v0, float v1) {
  double cx = prior.cx + double(loc[0]) * v0 * prior.w;
  double cy = prior.cy + double(loc[1]) * v0 * prior.h;
  double w = prior.w * std::exp(double(loc[2]) * v1);
  double h = prior.h * std::exp(double(loc[3]) * v1);
  auto clip = [](double v) { return float(std::clamp(v, 0.0, 1.0)); };
  return {clip(cx - w / 2), clip(cy - h / 2), clip(cx + w / 2), clip(cy + h / 2)};
}

}  // namespace ssdctx
