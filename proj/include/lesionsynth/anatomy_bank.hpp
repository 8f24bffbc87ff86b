#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lesionsynth/annotations.hpp"
#include "lesionsynth/binary_io.hpp"
#include "lesionsynth/image.hpp"
#include "lesionsynth/placement.hpp"
#include "lesionsynth/random.hpp"

namespace lesionsynth {

// ---------------------------------------------------------------------------
// Grid

/// One binned axis over [lo, hi]. Cells are half-open [edge(k), edge(k+1)),
/// except that hi itself falls into the last cell.
struct Axis {
  double lo = 0;
  double hi = 1;
  int bins = 10;

  double edge(int k) const { return lo + (hi - lo) * k / bins; }
  double width() const { return (hi - lo) / bins; }

  int index(double v, const char *name) const {
    if (!(v >= lo && v <= hi))
      throw Error(std::string("coordinate ") + name + " = " + std::to_string(v) +
                  " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    int k = std::clamp(static_cast<int>((v - lo) / (hi - lo) * bins), 0, bins - 1);
    // Settle against the same edges the sampler uses.
    while (k > 0 && v < edge(k))
      --k;
    while (k < bins - 1 && v >= edge(k + 1))
      ++k;
    return k;
  }
};

struct BinIndex {
  int ix = 0, iy = 0, idx = 0, idy = 0;
  friend bool operator==(const BinIndex &, const BinIndex &) = default;
};

struct GridSpec {
  int bins_x = 10;
  int bins_y = 10;
  int bins_dx = 10;
  int bins_dy = 10;

  Axis x_axis() const { return {0.0, 1.0, bins_x}; }
  Axis y_axis() const { return {0.0, 1.0, bins_y}; }
  Axis dx_axis() const { return {-1.0, 1.0, bins_dx}; }
  Axis dy_axis() const { return {-1.0, 1.0, bins_dy}; }

  std::size_t slices() const { return static_cast<std::size_t>(bins_x) * bins_y; }
  std::size_t slice_cells() const { return static_cast<std::size_t>(bins_dx) * bins_dy; }
  std::size_t cells() const { return slices() * slice_cells(); }

  /// Row-major over (ix, iy, idx, idy).
  std::size_t flat(const BinIndex &b) const {
    return ((static_cast<std::size_t>(b.ix) * bins_y + b.iy) * bins_dx + b.idx) * bins_dy + b.idy;
  }
  BinIndex unflat(std::size_t f) const {
    BinIndex b;
    b.idy = static_cast<int>(f % bins_dy);
    f /= bins_dy;
    b.idx = static_cast<int>(f % bins_dx);
    f /= bins_dx;
    b.iy = static_cast<int>(f % bins_y);
    b.ix = static_cast<int>(f / bins_y);
    return b;
  }
  bool contains(const BinIndex &b) const {
    return b.ix >= 0 && b.ix < bins_x && b.iy >= 0 && b.iy < bins_y && b.idx >= 0 &&
           b.idx < bins_dx && b.idy >= 0 && b.idy < bins_dy;
  }
  void check() const {
    if (bins_x < 1 || bins_y < 1 || bins_dx < 1 || bins_dy < 1)
      throw Error("grid bin counts must be >= 1");
  }
  friend bool operator==(const GridSpec &, const GridSpec &) = default;
};

inline BinIndex bin_index(double x, double y, double dx, double dy, const GridSpec &grid) {
  grid.check();
  return {grid.x_axis().index(x, "x"), grid.y_axis().index(y, "y"),
          grid.dx_axis().index(dx, "dx"), grid.dy_axis().index(dy, "dy")};
}

// ---------------------------------------------------------------------------
// Nearest anatomy

struct AnatomyOffset {
  double dx = 0;
  double dy = 0;
  std::size_t index = 0;
};

/// Offset (lesion centre minus anatomy centre) to the closest anatomy box by
/// Euclidean distance. Ties go to the lowest index.
inline AnatomyOffset nearest_anatomy_offset(const BoundingBox &lesion,
                                            std::span<const BoundingBox> anatomies) {
  if (anatomies.empty())
    throw Error("no key anatomical structure in frame");
  AnatomyOffset best;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < anatomies.size(); ++i) {
    const double dx = lesion.cx - anatomies[i].cx;
    const double dy = lesion.cy - anatomies[i].cy;
    const double d = std::sqrt(dx * dx + dy * dy);
    if (d < best_d) {
      best_d = d;
      best = {dx, dy, i};
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Bank

struct LesionForeground {
  GrayImage crop;
  double box_w = 0;
  double box_h = 0;
  BinIndex bin;
  std::string source;
  friend bool operator==(const LesionForeground &, const LesionForeground &) = default;
};

/// Per-(zone, orientation) statistics: joint counts, the (X, Y) marginal and
/// the conditional over offsets, plus the foregrounds stored by flat bin.
struct KeyBlock {
  std::vector<std::uint64_t> counts;   // joint, row-major (ix, iy, idx, idy)
  std::vector<std::uint64_t> marginal; // (ix, iy)
  std::vector<double> conditional;     // counts / marginal; 0 in empty slices
  std::map<std::size_t, std::vector<LesionForeground>> foregrounds;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts)
      t += c;
    return t;
  }
  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (const auto &[bin, list] : foregrounds)
      n += list.size();
    return n;
  }
  bool slice_empty(std::size_t slice) const { return marginal[slice] == 0; }

  friend bool operator==(const KeyBlock &, const KeyBlock &) = default;
};

class AnatomyBank {
public:
  static constexpr std::uint16_t format_version = 1;

  AnatomyBank() = default;
  explicit AnatomyBank(GridSpec grid) : grid_(grid) { grid_.check(); }

  const GridSpec &grid() const { return grid_; }
  std::uint16_t version() const { return format_version; }
  const std::map<SliceKey, KeyBlock> &blocks() const { return blocks_; }
  bool has_key(const SliceKey &k) const { return blocks_.contains(k); }

  const KeyBlock &block(const SliceKey &k) const {
    auto it = blocks_.find(k);
    if (it == blocks_.end())
      throw Error("key (" + k.str() + ") is not in the bank");
    return it->second;
  }

  double joint_probability(const SliceKey &k, const BinIndex &b) const {
    const auto &blk = block(k);
    const auto total = blk.total();
    return total == 0 ? 0.0 : static_cast<double>(blk.counts[grid_.flat(b)]) / total;
  }

  /// Conditional distribution over (idx, idy) for anatomy cell (ix, iy), row-major.
  std::span<const double> conditional_slice(const SliceKey &k, int ix, int iy) const {
    const auto &blk = block(k);
    const auto slice = static_cast<std::size_t>(ix) * grid_.bins_y + iy;
    return std::span<const double>(blk.conditional).subspan(slice * grid_.slice_cells(),
                                                            grid_.slice_cells());
  }

  // Mutation used by the builder and the loader.
  KeyBlock &ensure_block(const SliceKey &k) {
    auto [it, inserted] = blocks_.try_emplace(k);
    if (inserted) {
      it->second.counts.assign(grid_.cells(), 0);
      it->second.marginal.assign(grid_.slices(), 0);
      it->second.conditional.assign(grid_.cells(), 0.0);
    }
    return it->second;
  }

  /// Recomputes marginal and conditional from the joint counts.
  void derive() {
    const auto sc = grid_.slice_cells();
    for (auto &[k, blk] : blocks_) {
      for (std::size_t s = 0; s < grid_.slices(); ++s) {
        std::uint64_t m = 0;
        for (std::size_t c = 0; c < sc; ++c)
          m += blk.counts[s * sc + c];
        blk.marginal[s] = m;
        for (std::size_t c = 0; c < sc; ++c)
          blk.conditional[s * sc + c] =
              m == 0 ? 0.0 : static_cast<double>(blk.counts[s * sc + c]) / static_cast<double>(m);
      }
    }
  }

  friend bool operator==(const AnatomyBank &, const AnatomyBank &) = default;

private:
  GridSpec grid_;
  std::map<SliceKey, KeyBlock> blocks_;
};

struct BuildStats {
  std::size_t lesions = 0;
  std::size_t skipped_frames_without_anatomy = 0;
};

/// Counts every lesion of every positive frame into its key's 4D grid and
/// stores its foreground crop under the same bin.
inline AnatomyBank build_bank(const Dataset &dataset, const ImageLoader &load,
                              const GridSpec &grid = {}, BuildStats *stats = nullptr) {
  if (dataset.empty())
    throw Error("cannot build a bank from an empty dataset");
  AnatomyBank bank(grid);
  BuildStats local;
  for (const auto &frame : dataset.frames()) {
    if (frame.is_healthy())
      continue;
    const auto anatomies = frame.boxes_with(Label::anatomy);
    if (anatomies.empty()) {
      ++local.skipped_frames_without_anatomy;
      continue;
    }
    const GrayImage image = load(frame.image);
    auto &blk = bank.ensure_block(frame.key());
    for (const auto &lesion : frame.boxes_with(Label::lesion)) {
      const auto off = nearest_anatomy_offset(lesion, anatomies);
      const auto &anchor = anatomies[off.index];
      const auto bin = bin_index(anchor.cx, anchor.cy, off.dx, off.dy, grid);
      const auto flat = grid.flat(bin);
      ++blk.counts[flat];
      LesionForeground fg;
      fg.crop = crop(image, rasterize(lesion, image.width, image.height));
      fg.box_w = lesion.w;
      fg.box_h = lesion.h;
      fg.bin = bin;
      fg.source = frame.image;
      blk.foregrounds[flat].push_back(std::move(fg));
      ++local.lesions;
    }
  }
  if (local.skipped_frames_without_anatomy > 0)
    std::clog << "warning: skipped " << local.skipped_frames_without_anatomy
              << " positive frame(s) without an anatomy box\n";
  bank.derive();
  if (stats)
    *stats = local;
  return bank;
}

// ---------------------------------------------------------------------------
// Sampling

struct OffsetSample {
  double dx = 0;
  double dy = 0;
  BinIndex bin;          // (ix, iy) of the slice actually sampled
  bool fallback = false; // requested slice was empty
};

namespace detail {

/// Uniform point in [edge(k), edge(k+1)).
inline double sample_in_cell(const Axis &axis, int k, Rng &rng) {
  const double lo = axis.edge(k), hi = axis.edge(k + 1);
  double v = lo + (hi - lo) * rng.uniform();
  if (v >= hi)
    v = std::nextafter(hi, lo);
  return v;
}

inline std::size_t l1(const BinIndex &a, const BinIndex &b) {
  return static_cast<std::size_t>(std::abs(a.ix - b.ix) + std::abs(a.iy - b.iy) +
                                  std::abs(a.idx - b.idx) + std::abs(a.idy - b.idy));
}

} // namespace detail

/// Draws (dx, dy) from P(dX, dY | X = x, Y = y). An empty slice falls back to
/// the nearest non-empty (ix, iy) slice by L1 distance (ties: lowest index).
inline OffsetSample sample_offset(const AnatomyBank &bank, const SliceKey &key, double x,
                                  double y, Rng &rng) {
  const auto &grid = bank.grid();
  const auto &blk = bank.block(key);
  const int ix = grid.x_axis().index(x, "x");
  const int iy = grid.y_axis().index(y, "y");

  OffsetSample out;
  std::size_t slice = static_cast<std::size_t>(ix) * grid.bins_y + iy;
  if (blk.slice_empty(slice)) {
    out.fallback = true;
    std::size_t best = grid.slices(), best_d = std::numeric_limits<std::size_t>::max();
    for (std::size_t s = 0; s < grid.slices(); ++s) {
      if (blk.slice_empty(s))
        continue;
      const int sx = static_cast<int>(s / grid.bins_y), sy = static_cast<int>(s % grid.bins_y);
      const auto d = static_cast<std::size_t>(std::abs(sx - ix) + std::abs(sy - iy));
      if (d < best_d) {
        best_d = d;
        best = s;
      }
    }
    if (best == grid.slices())
      throw Error("key (" + key.str() + ") has no observations");
    slice = best;
  }

  // Exact integer inversion of the slice's counts.
  const auto sc = grid.slice_cells();
  std::uint64_t r = rng.below(blk.marginal[slice]);
  std::size_t cell = 0;
  for (; cell < sc; ++cell) {
    const auto c = blk.counts[slice * sc + cell];
    if (r < c)
      break;
    r -= c;
  }
  out.bin = {static_cast<int>(slice / grid.bins_y), static_cast<int>(slice % grid.bins_y),
             static_cast<int>(cell / grid.bins_dy), static_cast<int>(cell % grid.bins_dy)};
  out.dx = detail::sample_in_cell(grid.dx_axis(), out.bin.idx, rng);
  out.dy = detail::sample_in_cell(grid.dy_axis(), out.bin.idy, rng);
  return out;
}

struct ForegroundDraw {
  const LesionForeground *foreground = nullptr;
  BinIndex bin;          // bin the foreground was drawn from
  std::size_t index = 0; // position within that bin's list
  bool fallback = false;
};

/// Uniform draw among the foregrounds stored at `bin`; an empty bin falls back
/// to the nearest non-empty bin by 4D L1 distance (ties: lowest index).
inline ForegroundDraw sample_lesion(const AnatomyBank &bank, const SliceKey &key,
                                    const BinIndex &bin, Rng &rng) {
  const auto &grid = bank.grid();
  if (!grid.contains(bin))
    throw Error("bin index outside grid");
  const auto &blk = bank.block(key);
  if (blk.foregrounds.empty())
    throw Error("key (" + key.str() + ") has no lesion foregrounds");
  ForegroundDraw out;
  auto it = blk.foregrounds.find(grid.flat(bin));
  if (it == blk.foregrounds.end() || it->second.empty()) {
    out.fallback = true;
    std::size_t best_d = std::numeric_limits<std::size_t>::max();
    for (auto cand = blk.foregrounds.begin(); cand != blk.foregrounds.end(); ++cand) {
      if (cand->second.empty())
        continue;
      const auto d = detail::l1(grid.unflat(cand->first), bin);
      if (d < best_d) {
        best_d = d;
        it = cand;
      }
    }
  }
  out.bin = grid.unflat(it->first);
  out.index = static_cast<std::size_t>(rng.below(it->second.size()));
  out.foreground = &it->second[out.index];
  return out;
}

// ---------------------------------------------------------------------------
// Serialisation
//
//   "LABK" | u16 version | u32 bins_x, bins_y, bins_dx, bins_dy | u32 key count
//   per key:  string zone | string orientation | u64 counts[cells]
//             | u32 foreground count
//             | per foreground: u32 ix, iy, idx, idy | f64 box_w, box_h
//                               | string source | u32 crop_w, crop_h | u8 pixels[w*h]
//   u32 CRC-32 of all preceding bytes
//
// Strings are u32 length + raw bytes. All integers little-endian.

inline std::vector<std::uint8_t> encode_bank(const AnatomyBank &bank) {
  ByteWriter w;
  w.put_raw("LABK", 4);
  w.put(AnatomyBank::format_version);
  const auto &g = bank.grid();
  for (int n : {g.bins_x, g.bins_y, g.bins_dx, g.bins_dy})
    w.put(static_cast<std::uint32_t>(n));
  w.put(static_cast<std::uint32_t>(bank.blocks().size()));
  for (const auto &[key, blk] : bank.blocks()) {
    w.put_string(key.zone);
    w.put_string(key.orientation);
    w.put_raw(blk.counts.data(), blk.counts.size() * sizeof(std::uint64_t));
    w.put(static_cast<std::uint32_t>(blk.foreground_count()));
    for (const auto &[flat, list] : blk.foregrounds) {
      for (const auto &fg : list) {
        for (int v : {fg.bin.ix, fg.bin.iy, fg.bin.idx, fg.bin.idy})
          w.put(static_cast<std::uint32_t>(v));
        w.put(fg.box_w);
        w.put(fg.box_h);
        w.put_string(fg.source);
        w.put(static_cast<std::uint32_t>(fg.crop.width));
        w.put(static_cast<std::uint32_t>(fg.crop.height));
        w.put_bytes(fg.crop.pixels);
      }
    }
  }
  return std::move(w).finish_with_crc();
}

inline AnatomyBank decode_bank(std::span<const std::uint8_t> bytes) {
  ByteReader r(open_framed(bytes, "LABK", AnatomyBank::format_version, "bank"));
  GridSpec g;
  g.bins_x = static_cast<int>(r.get<std::uint32_t>());
  g.bins_y = static_cast<int>(r.get<std::uint32_t>());
  g.bins_dx = static_cast<int>(r.get<std::uint32_t>());
  g.bins_dy = static_cast<int>(r.get<std::uint32_t>());
  g.check();
  AnatomyBank bank(g);
  const auto nkeys = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < nkeys; ++k) {
    SliceKey key;
    key.zone = r.get_string();
    key.orientation = r.get_string();
    auto &blk = bank.ensure_block(key);
    auto raw = r.take(g.cells() * sizeof(std::uint64_t));
    std::memcpy(blk.counts.data(), raw.data(), raw.size());
    const auto nfg = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nfg; ++i) {
      LesionForeground fg;
      fg.bin.ix = static_cast<int>(r.get<std::uint32_t>());
      fg.bin.iy = static_cast<int>(r.get<std::uint32_t>());
      fg.bin.idx = static_cast<int>(r.get<std::uint32_t>());
      fg.bin.idy = static_cast<int>(r.get<std::uint32_t>());
      if (!g.contains(fg.bin))
        throw FormatError("bank: foreground bin outside grid");
      fg.box_w = r.get<double>();
      fg.box_h = r.get<double>();
      fg.source = r.get_string();
      const auto cw = static_cast<int>(r.get<std::uint32_t>());
      const auto ch = static_cast<int>(r.get<std::uint32_t>());
      if (cw < 2 || ch < 2)
        throw FormatError("bank: foreground crop smaller than 2x2");
      fg.crop = GrayImage(cw, ch);
      auto px = r.take(fg.crop.pixels.size());
      std::copy(px.begin(), px.end(), fg.crop.pixels.begin());
      blk.foregrounds[g.flat(fg.bin)].push_back(std::move(fg));
    }
    for (const auto &[flat, list] : blk.foregrounds)
      if (blk.counts[flat] == 0)
        throw FormatError("bank: foreground stored in a bin with zero count");
    if (blk.foreground_count() != blk.total())
      throw FormatError("bank: foreground count does not match joint counts");
  }
  if (r.remaining() != 0)
    throw FormatError("bank: trailing bytes before checksum");
  bank.derive();
  return bank;
}

inline void save_bank(const AnatomyBank &bank, const std::filesystem::path &path) {
  write_file_atomic(path, encode_bank(bank));
}

inline AnatomyBank load_bank(const std::filesystem::path &path) {
  return decode_bank(read_file_bytes(path));
}

} // namespace lesionsynth
