#pragma once

// Synthetic ultrasound-like corpus for exercising the whole pipeline without
// clinical data: speckled backgrounds, a bright horizontal pleural band (the
// anatomy box), A-line reverberations, and irregular hyperechoic lesions below
// the band at offsets that depend on the band position and the scan zone.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lesionsynth/annotations.hpp"
#include "lesionsynth/image.hpp"
#include "lesionsynth/random.hpp"

namespace lesionsynth {

struct PhantomConfig {
  int size = 64;
  double positive_fraction = 0.5;
  double split_band_fraction = 0.25; // frames whose pleural line has two segments
  std::vector<std::string> zones{"anterior", "lateral"};
  std::string orientation = "longitudinal";
};

struct PhantomFrame {
  GrayImage image;
  FrameAnnotation annotation;
};

namespace detail {

/// Mean-one multiplicative speckle (Gamma(4, 1/4)).
inline double speckle(Rng &rng) {
  double s = 0;
  for (int i = 0; i < 4; ++i)
    s -= std::log(1.0 - rng.uniform());
  return s / 4.0;
}

struct Ellipse {
  double cx, cy, rx, ry, angle;
  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = ((x - cx) * c + (y - cy) * s) / rx;
    const double v = (-(x - cx) * s + (y - cy) * c) / ry;
    return u * u + v * v <= 1.0;
  }
};

} // namespace detail

/// Generates frame `index` of the corpus identified by `seed`.
inline PhantomFrame generate_phantom(std::uint64_t seed, std::size_t index, const PhantomConfig &cfg = {}) {
  Rng rng(child_seed(seed, index));
  const int S = cfg.size;
  const std::size_t zone_id = rng.below(cfg.zones.size());
  const bool positive = rng.uniform() < cfg.positive_fraction;

  // Pleural band: depth depends on the zone.
  const double band_y = zone_id % 2 == 0 ? rng.uniform(0.16, 0.28) : rng.uniform(0.26, 0.40);
  const double band_cx = rng.uniform(0.35, 0.65);
  const double band_w = rng.uniform(0.40, 0.70);
  const double band_h = 3.0 / S;
  std::vector<BoundingBox> bands;
  if (rng.uniform() < cfg.split_band_fraction) {
    // Two segments with a rib-shadow gap; the right one slightly deeper.
    const double gap = rng.uniform(0.06, 0.12);
    const double half = (band_w - gap) / 2;
    const double dy = rng.uniform(-0.04, 0.04);
    bands.push_back({band_cx - gap / 2 - half / 2, band_y, half, band_h, Label::anatomy});
    bands.push_back({band_cx + gap / 2 + half / 2, std::clamp(band_y + dy, 0.1, 0.5), half, band_h, Label::anatomy});
  } else {
    bands.push_back({band_cx, band_y, band_w, band_h, Label::anatomy});
  }

  // Intensity field before speckle.
  std::vector<double> mean(static_cast<std::size_t>(S) * S);
  auto at = [&](int x, int y) -> double & { return mean[static_cast<std::size_t>(y) * S + x]; };
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double ny = (y + 0.5) / S;
      at(x, y) = ny < band_y ? 70.0 - 20.0 * ny : 45.0 - 15.0 * ny; // soft tissue above, lung below
    }
  for (const auto &b : bands) {
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double nx = (x + 0.5) / S, ny = (y + 0.5) / S;
        if (std::abs(nx - b.cx) > b.w / 2)
          continue;
        const double d = std::abs(ny - b.cy) * S;
        if (d < 1.5)
          at(x, y) = 215.0;
        // A-lines: fading reverberations at multiples of the band depth.
        for (int k = 2; k <= 3; ++k) {
          const double dk = std::abs(ny - k * b.cy) * S;
          if (dk < 1.0)
            at(x, y) = std::max(at(x, y), 120.0 / k);
        }
      }
  }

  FrameAnnotation ann;
  ann.zone = cfg.zones[zone_id];
  ann.orientation = cfg.orientation;
  ann.boxes = bands;

  if (positive) {
    // Anchor on one band segment; offsets are zone dependent and pull the
    // lesion toward the image centre line.
    const auto &anchor = bands[rng.below(bands.size())];
    const double dx = 0.5 * (0.5 - anchor.cx) + rng.uniform(-0.10, 0.10);
    const double dy = zone_id % 2 == 0 ? rng.uniform(0.18, 0.34) : rng.uniform(0.14, 0.26);
    const double size_w = rng.uniform(16.0, 28.0) / S;
    const double size_h = rng.uniform(14.0, 24.0) / S;
    const double cx = std::clamp(anchor.cx + dx, size_w / 2 + 1.0 / S, 1 - size_w / 2 - 1.0 / S);
    const double cy = std::clamp(anchor.cy + dy, size_h / 2 + 1.0 / S, 1 - size_h / 2 - 1.0 / S);

    // Irregular lesion: union of 2-3 ellipses inside the nominal extent.
    const int lobes = 2 + static_cast<int>(rng.below(2));
    std::vector<detail::Ellipse> parts;
    for (int k = 0; k < lobes; ++k) {
      const double rx = rng.uniform(0.25, 0.45) * size_w;
      const double ry = rng.uniform(0.25, 0.45) * size_h;
      parts.push_back({cx + rng.uniform(-0.5, 0.5) * (size_w / 2 - rx) * 2,
                       cy + rng.uniform(-0.5, 0.5) * (size_h / 2 - ry) * 2, rx, ry,
                       rng.uniform(0.0, 3.14159)});
    }
    // A few hypoechoic pockets inside the lesion.
    std::vector<detail::Ellipse> pockets;
    const int npockets = static_cast<int>(rng.below(3));
    for (int k = 0; k < npockets; ++k) {
      const auto &p = parts[rng.below(parts.size())];
      pockets.push_back({p.cx + rng.uniform(-0.5, 0.5) * p.rx, p.cy + rng.uniform(-0.5, 0.5) * p.ry,
                         rng.uniform(1.5, 3.0) / S, rng.uniform(1.5, 3.0) / S, 0.0});
    }
    int x0 = S, y0 = S, x1 = -1, y1 = -1;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double nx = (x + 0.5) / S, ny = (y + 0.5) / S;
        bool inside = false;
        for (const auto &p : parts)
          inside = inside || p.contains(nx, ny);
        if (!inside)
          continue;
        bool pocket = false;
        for (const auto &p : pockets)
          pocket = pocket || p.contains(nx, ny);
        at(x, y) = pocket ? 60.0 : 150.0 + 20.0 * std::sin(nx * 37.0 + ny * 23.0);
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    if (x1 >= 0) {
      // Tight box plus a one-pixel margin.
      x0 = std::max(0, x0 - 1);
      y0 = std::max(0, y0 - 1);
      x1 = std::min(S - 1, x1 + 1);
      y1 = std::min(S - 1, y1 + 1);
      BoundingBox lesion{(x0 + x1 + 1) / 2.0 / S, (y0 + y1 + 1) / 2.0 / S,
                         (x1 - x0 + 1) / static_cast<double>(S),
                         (y1 - y0 + 1) / static_cast<double>(S), Label::lesion};
      ann.boxes.push_back(lesion);
    }
  }

  PhantomFrame out;
  out.image = GrayImage(S, S);
  // Speckle, then a 2x2 box blur for grain.
  std::vector<double> noisy(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i)
    noisy[i] = mean[i] * detail::speckle(rng);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int xx = std::min(x + 1, S - 1), yy = std::min(y + 1, S - 1);
      const double v = 0.25 * (noisy[y * S + x] + noisy[y * S + xx] + noisy[yy * S + x] + noisy[yy * S + xx]);
      out.image.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  out.annotation = std::move(ann);
  return out;
}

/// Writes `count` frames to out_dir/images/ and out_dir/annotations.jsonl.
inline Dataset write_phantom_corpus(const std::filesystem::path &out_dir, std::size_t count,
                                    std::uint64_t seed, const PhantomConfig &cfg = {}) {
  std::filesystem::create_directories(out_dir / "images");
  std::vector<FrameAnnotation> frames;
  for (std::size_t i = 0; i < count; ++i) {
    auto f = generate_phantom(seed, i, cfg);
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.pgm", i);
    f.annotation.image = name;
    save_image(out_dir / name, f.image);
    frames.push_back(std::move(f.annotation));
  }
  Dataset ds(std::move(frames));
  std::ofstream out(out_dir / "annotations.jsonl");
  serialize_annotations(ds, out);
  return ds;
}

} // namespace lesionsynth
