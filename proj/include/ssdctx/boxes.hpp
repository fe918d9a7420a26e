#pragma once

#include <array>
#include <vector>

namespace ssdctx {

/// Axis-aligned box, corner form. Coordinates are normalized to [0,1] inside
/// the detection pipeline and absolute pixels in dataset code.
struct BoxF {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

/// Center-form box (cx, cy, w, h), the prior/default-box representation.
struct CenterBox {
  float cx = 0, cy = 0, w = 0, h = 0;
};

BoxF to_corner(const CenterBox& b);
CenterBox to_center(const BoxF& b);

/// Intersection over union of two corner-form boxes. Internal math in double
/// so encode/decode round trips are not limited by float rounding.
double iou(const BoxF& a, const BoxF& b);

/// Offsets of a ground-truth box relative to a prior, SSD parameterization:
/// ((cx_g-cx_p)/(v0*w_p), (cy_g-cy_p)/(v0*h_p), log(w_g/w_p)/v1, log(h_g/h_p)/v1).
std::array<float, 4> encode_box(const BoxF& gt, const CenterBox& prior, float v0 = 0.1f,
                                float v1 = 0.2f);

/// Inverse of encode_box; the result is clipped to the unit square.
BoxF decode_box(const std::array<float, 4>& loc, const CenterBox& prior, float v0 = 0.1f,
                float v1 = 0.2f);

}  // namespace ssdctx
