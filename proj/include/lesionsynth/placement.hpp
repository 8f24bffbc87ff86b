#pragma once

#include <algorithm>
#include <cmath>

#include "lesionsynth/annotations.hpp"
#include "lesionsynth/image.hpp"

namespace lesionsynth {

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point &, const Point &) = default;
};

/// Lesion centre from an anatomy centre and a lesion-minus-anatomy offset.
constexpr Point place(double x, double y, double dx, double dy) noexcept {
  return {x + dx, y + dy};
}

/// Rasterises a normalised box: edges are rounded to the pixel grid and clipped
/// to the image; a side narrower than 2 pixels is widened to 2.
inline PixelRect rasterize(const BoundingBox &box, int width, int height) {
  if (width < 2 || height < 2)
    throw ImageError("image must be at least 2x2 pixels");
  auto axis = [](double lo, double hi, int n) {
    long a = std::clamp(std::lround(lo * n), 0L, static_cast<long>(n));
    long b = std::clamp(std::lround(hi * n), 0L, static_cast<long>(n));
    if (b - a < 2) {
      b = a + 2;
      if (b > n) {
        b = n;
        a = n - 2;
      }
    }
    return std::pair<int, int>(static_cast<int>(a), static_cast<int>(b - a));
  };
  auto [x, w] = axis(box.left(), box.right(), width);
  auto [y, h] = axis(box.top(), box.bottom(), height);
  return {x, y, w, h};
}

/// A synthetic lesion's final location in a target image.
struct Placement {
  Point center;      // after fitting
  BoundingBox box;   // label = lesion
  PixelRect pixel_rect;
  Point shift;       // fitted centre minus requested centre
  bool clamped() const { return shift.x != 0 || shift.y != 0; }
};

/// Translates a w x h box centred at `center` by the minimal amount that puts
/// it inside [0,1]^2. The box size never changes.
inline Placement fit_box(Point center, double w, double h, int image_width, int image_height) {
  if (!(w > 0) || !(h > 0))
    throw Error("lesion box must have positive size");
  if (w > 1 || h > 1)
    throw Error("lesion larger than target image");
  Placement p;
  p.center = {std::clamp(center.x, w / 2, 1 - w / 2), std::clamp(center.y, h / 2, 1 - h / 2)};
  p.shift = {p.center.x - center.x, p.center.y - center.y};
  p.box = {p.center.x, p.center.y, w, h, Label::lesion};
  p.pixel_rect = rasterize(p.box, image_width, image_height);
  return p;
}

/// Zeroes every pixel inside `rect`; the rest is copied.
inline GrayImage mask_image(const GrayImage &image, const PixelRect &rect) {
  if (rect.x < 0 || rect.y < 0 || rect.x + rect.w > image.width || rect.y + rect.h > image.height)
    throw ImageError("mask rectangle outside image");
  GrayImage out = image;
  for (int y = rect.y; y < rect.y + rect.h; ++y)
    std::fill_n(&out.pixels[static_cast<std::size_t>(y) * out.width + rect.x], rect.w, 0);
  return out;
}

inline GrayImage mask_image(const GrayImage &image, const Placement &placement) {
  return mask_image(image, placement.pixel_rect);
}

} // namespace lesionsynth
