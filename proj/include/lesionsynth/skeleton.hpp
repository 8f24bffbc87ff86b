#pragma once

#include <array>
#include <cstdint>

#include <boost/multiprecision/cpp_int.hpp>

#include "lesionsynth/error.hpp"
#include "lesionsynth/image.hpp"

namespace lesionsynth {

/// Binary structural mask of a lesion crop. mask pixels are 0 or 1.
struct Skeleton {
  GrayImage mask;
  int threshold = 0;
};

/// Otsu's threshold with class 0 = {p <= t}, class 1 = {p > t}.
///
/// Between-class variance is compared exactly: with n0, s0 the count and sum
/// of class 0 and N, S the totals, sigma_b^2(t) is proportional to
/// (s0*N - S*n0)^2 / (n0 * n1). Comparing the fractions by cross
/// multiplication in 256-bit integers makes the lowest-t tie rule exact.
inline int otsu_threshold(const GrayImage &crop) {
  using boost::multiprecision::int256_t;
  if (crop.empty())
    throw ImageError("degenerate histogram: empty crop");
  std::array<std::uint64_t, 256> hist{};
  for (auto p : crop.pixels)
    ++hist[p];

  const std::int64_t total_n = static_cast<std::int64_t>(crop.pixels.size());
  std::int64_t total_s = 0;
  for (int v = 0; v < 256; ++v)
    total_s += static_cast<std::int64_t>(hist[v]) * v;

  int best_t = -1;
  int256_t best_num = 0, best_den = 1;
  std::int64_t n0 = 0, s0 = 0;
  for (int t = 0; t < 255; ++t) {
    n0 += static_cast<std::int64_t>(hist[t]);
    s0 += static_cast<std::int64_t>(hist[t]) * t;
    const std::int64_t n1 = total_n - n0;
    if (n0 == 0 || n1 == 0)
      continue;
    const int256_t d = int256_t(s0) * total_n - int256_t(total_s) * n0;
    const int256_t num = d * d;
    const int256_t den = int256_t(n0) * n1;
    if (best_t < 0 || num * best_den > best_num * den) {
      best_t = t;
      best_num = num;
      best_den = den;
    }
  }
  if (best_t < 0 || best_num == 0)
    throw ImageError("degenerate histogram: crop has a single gray level");
  return best_t;
}

/// mask = (crop > otsu_threshold(crop)); no morphological clean-up.
inline Skeleton extract_skeleton(const GrayImage &crop) {
  Skeleton s;
  s.threshold = otsu_threshold(crop);
  s.mask = GrayImage(crop.width, crop.height);
  for (std::size_t i = 0; i < crop.pixels.size(); ++i)
    s.mask.pixels[i] = crop.pixels[i] > s.threshold ? 1 : 0;
  return s;
}

/// All-ones mask of the given size; the binary-box condition.
inline GrayImage binary_box_mask(int width, int height) { return GrayImage(width, height, 1); }

/// Scales a 0/1 mask to 0/255 for viewing.
inline GrayImage mask_to_view(const GrayImage &mask) {
  GrayImage out = mask;
  for (auto &p : out.pixels)
    p = p ? 255 : 0;
  return out;
}

} // namespace lesionsynth
