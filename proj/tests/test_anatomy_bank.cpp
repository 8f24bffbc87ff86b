#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "lesionsynth/anatomy_bank.hpp"
#include "test_util.hpp"

using namespace lesionsynth;

namespace {

// Brute-force bin lookup by scanning every edge of the axis.
int scan_bin(double v, double lo, double hi, int bins) {
  if (v == hi)
    return bins - 1;
  for (int k = 0; k < bins; ++k) {
    const double a = lo + (hi - lo) * k / bins, b = lo + (hi - lo) * (k + 1) / bins;
    if (v >= a && v < b)
      return k;
  }
  return -1;
}

// Exhaustive nearest search with explicit tie handling.
AnatomyOffset exhaustive_nearest(const BoundingBox &l, const std::vector<BoundingBox> &as) {
  std::vector<double> d(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) {
    const double dx = l.cx - as[i].cx, dy = l.cy - as[i].cy;
    d[i] = std::sqrt(dx * dx + dy * dy);
  }
  double m = d[0];
  for (double v : d)
    m = std::min(m, v);
  for (std::size_t i = 0; i < as.size(); ++i)
    if (d[i] == m)
      return {l.cx - as[i].cx, l.cy - as[i].cy, i};
  return {};
}

void add_lesion(AnatomyBank &bank, const SliceKey &key, const BinIndex &bin, GrayImage crop,
                const std::string &source = "src") {
  auto &blk = bank.ensure_block(key);
  const auto f = bank.grid().flat(bin);
  ++blk.counts[f];
  LesionForeground fg{std::move(crop), 0.2, 0.1, bin, source};
  blk.foregrounds[f].push_back(std::move(fg));
  bank.derive();
}

const SliceKey kKey{"anterior", "longitudinal"};

} // namespace

// --- Nearest anatomy

TEST(NearestAnatomy, TwoCandidates) {
  const BoundingBox lesion{0.5, 0.8, 0.1, 0.1, Label::lesion};
  const std::vector<BoundingBox> as{{0.5, 0.3, 0.1, 0.1, Label::anatomy}, {0.9, 0.9, 0.1, 0.1, Label::anatomy}};
  const auto r = nearest_anatomy_offset(lesion, as);
  EXPECT_EQ(r.index, 1u);
  EXPECT_NEAR(r.dx, -0.4, 1e-15);
  EXPECT_NEAR(r.dy, -0.1, 1e-15);
}

TEST(NearestAnatomy, SingleCandidateAndCoincident) {
  const std::vector<BoundingBox> one{{0.2, 0.2, 0.1, 0.1, Label::anatomy}};
  const auto r = nearest_anatomy_offset({0.6, 0.5, 0.1, 0.1, Label::lesion}, one);
  EXPECT_EQ(r.index, 0u);
  EXPECT_NEAR(r.dx, 0.4, 1e-15);
  EXPECT_NEAR(r.dy, 0.3, 1e-15);

  const std::vector<BoundingBox> two{{0.1, 0.1, 0.1, 0.1, Label::anatomy}, {0.7, 0.4, 0.1, 0.1, Label::anatomy}};
  const auto z = nearest_anatomy_offset({0.7, 0.4, 0.1, 0.1, Label::lesion}, two);
  EXPECT_EQ(z.index, 1u);
  EXPECT_EQ(z.dx, 0.0);
  EXPECT_EQ(z.dy, 0.0);
}

TEST(NearestAnatomy, TieGoesToLowestIndex) {
  const std::vector<BoundingBox> as{{0.4, 0.5, 0.1, 0.1, Label::anatomy}, {0.6, 0.5, 0.1, 0.1, Label::anatomy},
                                    {0.4, 0.5, 0.1, 0.1, Label::anatomy}};
  EXPECT_EQ(nearest_anatomy_offset({0.5, 0.5, 0.1, 0.1, Label::lesion}, as).index, 0u);
}

TEST(NearestAnatomy, EmptyListErrors) {
  try {
    nearest_anatomy_offset({0.5, 0.5, 0.1, 0.1, Label::lesion}, {});
    FAIL();
  } catch (const Error &e) {
    EXPECT_STREQ(e.what(), "no key anatomical structure in frame");
  }
}

TEST(NearestAnatomy, MatchesExhaustiveSearch) {
  Rng rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<BoundingBox> as;
    const auto n = 1 + rng.below(8);
    for (std::uint64_t i = 0; i < n; ++i) {
      // Coarse grid makes exact ties common.
      as.push_back({rng.below(5) / 4.0, rng.below(5) / 4.0, 0.1, 0.1, Label::anatomy});
    }
    const BoundingBox l{rng.below(5) / 4.0, rng.below(5) / 4.0, 0.1, 0.1, Label::lesion};
    const auto got = nearest_anatomy_offset(l, as);
    const auto want = exhaustive_nearest(l, as);
    ASSERT_EQ(got.index, want.index);
    ASSERT_EQ(got.dx, want.dx);
    ASSERT_EQ(got.dy, want.dy);
  }
}

// --- Binning

TEST(BinIndex, Examples) {
  const GridSpec g;
  EXPECT_EQ(bin_index(0.05, 0.5, 0.0, -1.0, g), (BinIndex{0, 5, 5, 0}));
  EXPECT_EQ(bin_index(1.0, 1.0, 1.0, 1.0, g), (BinIndex{9, 9, 9, 9}));
  EXPECT_EQ(bin_index(0.0, 0.0, -1.0, -1.0, g), (BinIndex{0, 0, 0, 0}));
}

TEST(BinIndex, OutOfRangeNamesCoordinate) {
  const GridSpec g;
  try {
    bin_index(0.5, 0.5, 1.5, 0.0, g);
    FAIL();
  } catch (const Error &e) {
    EXPECT_NE(std::string(e.what()).find("dx"), std::string::npos);
  }
  EXPECT_THROW(bin_index(-0.01, 0.5, 0.0, 0.0, g), Error);
  EXPECT_THROW(bin_index(0.5, std::nan(""), 0.0, 0.0, g), Error);
}

TEST(BinIndex, MatchesEdgeScan) {
  Rng rng(8);
  const GridSpec g{10, 7, 13, 10};
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(), y = rng.uniform(), dx = rng.uniform(-1, 1), dy = rng.uniform(-1, 1);
    const auto b = bin_index(x, y, dx, dy, g);
    ASSERT_EQ(b.ix, scan_bin(x, 0, 1, g.bins_x));
    ASSERT_EQ(b.iy, scan_bin(y, 0, 1, g.bins_y));
    ASSERT_EQ(b.idx, scan_bin(dx, -1, 1, g.bins_dx));
    ASSERT_EQ(b.idy, scan_bin(dy, -1, 1, g.bins_dy));
  }
  // Exact edges.
  for (int k = 0; k <= 10; ++k) {
    const double v = k / 10.0;
    EXPECT_EQ(bin_index(v, 0, 0, 0, g).ix, scan_bin(v, 0, 1, 10)) << v;
  }
}

TEST(GridSpec, FlatUnflatRoundTrip) {
  const GridSpec g{3, 4, 5, 6};
  for (std::size_t f = 0; f < g.cells(); ++f)
    EXPECT_EQ(g.flat(g.unflat(f)), f);
  EXPECT_THROW(AnatomyBank(GridSpec{0, 1, 1, 1}), Error);
}

// --- Building

TEST(BuildBank, SingleLesionIsPointMass) {
  FrameAnnotation f{"a", "anterior", "longitudinal",
                    {{0.5, 0.3, 0.5, 0.05, Label::anatomy}, {0.55, 0.6, 0.2, 0.2, Label::lesion}}};
  const Dataset ds({f});
  const auto bank = build_bank(ds, [](const std::string &) { return GrayImage(20, 20, 3); });
  const auto bin = bin_index(0.5, 0.3, 0.55 - 0.5, 0.6 - 0.3, bank.grid());
  EXPECT_DOUBLE_EQ(bank.joint_probability(kKey, bin), 1.0);
  const auto slice = bank.conditional_slice(kKey, bin.ix, bin.iy);
  double sum = 0;
  for (std::size_t c = 0; c < slice.size(); ++c) {
    sum += slice[c];
    if (c == static_cast<std::size_t>(bin.idx * 10 + bin.idy))
      EXPECT_EQ(slice[c], 1.0);
    else
      EXPECT_EQ(slice[c], 0.0);
  }
  EXPECT_EQ(sum, 1.0);
  const auto &fg = bank.block(kKey).foregrounds.at(bank.grid().flat(bin)).at(0);
  EXPECT_EQ(fg.crop.width, 4);
  EXPECT_EQ(fg.crop.height, 4);
  EXPECT_EQ(fg.source, "a");
}

TEST(BuildBank, TwoBinsHalfEach) {
  auto frame = [](double ly) {
    return FrameAnnotation{"a", "anterior", "longitudinal",
                           {{0.5, 0.2, 0.5, 0.05, Label::anatomy}, {0.5, ly, 0.1, 0.1, Label::lesion}}};
  };
  const Dataset ds({frame(0.45), frame(0.46), frame(0.75), frame(0.76)});
  const auto bank = build_bank(ds, [](const std::string &) { return GrayImage(10, 10); });
  const auto a = bin_index(0.5, 0.2, 0.0, 0.25, bank.grid());
  const auto b = bin_index(0.5, 0.2, 0.0, 0.55, bank.grid());
  EXPECT_DOUBLE_EQ(bank.joint_probability(kKey, a), 0.5);
  EXPECT_DOUBLE_EQ(bank.joint_probability(kKey, b), 0.5);
  EXPECT_EQ(bank.block(kKey).total(), 4u);
}

TEST(BuildBank, MatchesNestedLoopCountingOracle) {
  Rng rng(31);
  std::vector<FrameAnnotation> frames;
  for (int i = 0; i < 200; ++i)
    frames.push_back(testutil::random_frame(rng, i, 8));
  const Dataset ds(frames);
  const GridSpec g;
  const auto bank = build_bank(ds, [](const std::string &) { return GrayImage(32, 32, 1); }, g);

  std::map<SliceKey, std::vector<std::uint64_t>> oracle;
  for (const auto &f : frames) {
    std::vector<BoundingBox> as;
    for (const auto &b : f.boxes)
      if (b.label == Label::anatomy)
        as.push_back(b);
    for (const auto &l : f.boxes) {
      if (l.label != Label::lesion)
        continue;
      const auto o = exhaustive_nearest(l, as);
      const int i0 = scan_bin(as[o.index].cx, 0, 1, 10), i1 = scan_bin(as[o.index].cy, 0, 1, 10);
      const int i2 = scan_bin(o.dx, -1, 1, 10), i3 = scan_bin(o.dy, -1, 1, 10);
      auto &v = oracle[{f.zone, f.orientation}];
      v.resize(10000);
      v[((i0 * 10 + i1) * 10 + i2) * 10 + i3] += 1;
    }
  }
  ASSERT_EQ(bank.blocks().size(), oracle.size());
  for (const auto &[key, blk] : bank.blocks()) {
    EXPECT_EQ(blk.counts, oracle.at(key)) << key.str();
    for (std::size_t s = 0; s < g.slices(); ++s) {
      std::uint64_t m = 0;
      double p = 0;
      for (std::size_t c = 0; c < g.slice_cells(); ++c) {
        m += blk.counts[s * g.slice_cells() + c];
        p += blk.conditional[s * g.slice_cells() + c];
      }
      EXPECT_EQ(blk.marginal[s], m);
      if (m > 0)
        EXPECT_NEAR(p, 1.0, 1e-9);
      else
        EXPECT_TRUE(blk.slice_empty(s));
    }
    EXPECT_EQ(blk.foreground_count(), blk.total());
    for (const auto &[flat, list] : blk.foregrounds)
      EXPECT_EQ(list.size(), blk.counts[flat]);
  }
}

TEST(BuildBank, SkipsPositiveFramesWithoutAnatomy) {
  FrameAnnotation bad{"b", "z", "o", {{0.5, 0.5, 0.2, 0.2, Label::lesion}}};
  FrameAnnotation good{"g", "z", "o", {{0.5, 0.2, 0.4, 0.05, Label::anatomy}, {0.5, 0.5, 0.2, 0.2, Label::lesion}}};
  BuildStats st;
  const auto bank = build_bank(Dataset({bad, good}), [](const std::string &) { return GrayImage(8, 8); }, {}, &st);
  EXPECT_EQ(st.skipped_frames_without_anatomy, 1u);
  EXPECT_EQ(st.lesions, 1u);
  EXPECT_EQ(bank.block({"z", "o"}).total(), 1u);
  EXPECT_THROW(build_bank(Dataset(), [](const std::string &) { return GrayImage(8, 8); }), Error);
}

TEST(BuildBank, UnreadableImageErrors) {
  FrameAnnotation f{"missing.pgm", "z", "o", {{0.5, 0.2, 0.4, 0.05, Label::anatomy}, {0.5, 0.5, 0.2, 0.2, Label::lesion}}};
  testutil::TempDir dir;
  EXPECT_THROW(build_bank(Dataset({f}), make_file_loader(dir.path())), Error);
}

// --- Sampling

TEST(SampleOffset, PointMassStaysInCell) {
  AnatomyBank bank{GridSpec{}};
  add_lesion(bank, kKey, {2, 3, 5, 5}, GrayImage(2, 2));
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto s = sample_offset(bank, kKey, 0.25, 0.35, rng);
    EXPECT_FALSE(s.fallback);
    EXPECT_GE(s.dx, 0.0);
    EXPECT_LT(s.dx, 0.2);
    EXPECT_GE(s.dy, 0.0);
    EXPECT_LT(s.dy, 0.2);
  }
}

TEST(SampleOffset, FrequenciesWithinTotalVariation) {
  AnatomyBank bank{GridSpec{}};
  for (int i = 0; i < 3; ++i)
    add_lesion(bank, kKey, {4, 4, 1, 2}, GrayImage(2, 2));
  add_lesion(bank, kKey, {4, 4, 7, 8}, GrayImage(2, 2));
  Rng rng(2);
  std::map<std::pair<int, int>, int> hist;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_offset(bank, kKey, 0.45, 0.45, rng);
    const auto b = bin_index(0.45, 0.45, s.dx, s.dy, bank.grid());
    ++hist[{b.idx, b.idy}];
  }
  const double pa = hist[{1, 2}] / double(n), pb = hist[{7, 8}] / double(n);
  EXPECT_EQ(hist.size(), 2u);
  const double tv = 0.5 * (std::abs(pa - 0.75) + std::abs(pb - 0.25));
  EXPECT_LT(tv, 0.02);
}

TEST(SampleOffset, SameSeedSameSequence) {
  AnatomyBank bank{GridSpec{}};
  add_lesion(bank, kKey, {4, 4, 1, 2}, GrayImage(2, 2));
  add_lesion(bank, kKey, {4, 4, 3, 2}, GrayImage(2, 2));
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) {
    const auto x = sample_offset(bank, kKey, 0.45, 0.45, a), y = sample_offset(bank, kKey, 0.45, 0.45, b);
    EXPECT_EQ(x.dx, y.dx);
    EXPECT_EQ(x.dy, y.dy);
  }
}

TEST(SampleOffset, EmptySliceFallsBackToNearestByL1) {
  AnatomyBank bank{GridSpec{}};
  add_lesion(bank, kKey, {2, 2, 5, 5}, GrayImage(2, 2)); // L1 distance 4 from (4, 4)
  add_lesion(bank, kKey, {4, 6, 1, 1}, GrayImage(2, 2)); // distance 2
  add_lesion(bank, kKey, {6, 4, 8, 8}, GrayImage(2, 2)); // distance 2, higher row-major index
  Rng rng(3);
  const auto s = sample_offset(bank, kKey, 0.45, 0.45, rng);
  EXPECT_TRUE(s.fallback);
  EXPECT_EQ(s.bin.ix, 4);
  EXPECT_EQ(s.bin.iy, 6);
  EXPECT_EQ(s.bin.idx, 1);
}

TEST(SampleOffset, MissingKeyOrEmptyKeyErrors) {
  AnatomyBank bank{GridSpec{}};
  Rng rng(4);
  EXPECT_THROW(sample_offset(bank, kKey, 0.5, 0.5, rng), Error);
  bank.ensure_block(kKey);
  bank.derive();
  EXPECT_THROW(sample_offset(bank, kKey, 0.5, 0.5, rng), Error);
}

TEST(SampleLesion, SingleForegroundAlwaysReturned) {
  AnatomyBank bank{GridSpec{}};
  add_lesion(bank, kKey, {1, 1, 1, 1}, GrayImage(3, 2, 9), "only");
  Rng rng(5);
  for (int i = 0; i < 50; ++i)
    EXPECT_EQ(sample_lesion(bank, kKey, {1, 1, 1, 1}, rng).foreground->source, "only");
}

TEST(SampleLesion, UniformOverFourForegrounds) {
  AnatomyBank bank{GridSpec{}};
  for (int i = 0; i < 4; ++i)
    add_lesion(bank, kKey, {1, 1, 1, 1}, GrayImage(2, 2), "f" + std::to_string(i));
  Rng rng(6);
  std::map<std::string, int> hist;
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    ++hist[sample_lesion(bank, kKey, {1, 1, 1, 1}, rng).foreground->source];
  ASSERT_EQ(hist.size(), 4u);
  for (const auto &[k, c] : hist)
    EXPECT_NEAR(c / double(n), 0.25, 0.02) << k;
}

TEST(SampleLesion, EmptyBinFallsBackToNeighbour) {
  AnatomyBank bank{GridSpec{}};
  add_lesion(bank, kKey, {1, 1, 1, 2}, GrayImage(2, 2), "near");
  add_lesion(bank, kKey, {5, 5, 5, 5}, GrayImage(2, 2), "far");
  Rng rng(7);
  const auto d = sample_lesion(bank, kKey, {1, 1, 1, 1}, rng);
  EXPECT_TRUE(d.fallback);
  EXPECT_EQ(d.foreground->source, "near");
  EXPECT_EQ(d.bin, (BinIndex{1, 1, 1, 2}));
  EXPECT_THROW(sample_lesion(bank, kKey, {10, 0, 0, 0}, rng), Error);
  AnatomyBank empty{GridSpec{}};
  empty.ensure_block(kKey);
  EXPECT_THROW(sample_lesion(empty, kKey, {0, 0, 0, 0}, rng), Error);
}

// --- Serialisation

TEST(BankFile, RoundTripEqual) {
  Rng rng(9);
  std::vector<FrameAnnotation> frames;
  for (int i = 0; i < 60; ++i)
    frames.push_back(testutil::random_frame(rng, i));
  Rng pix(10);
  const auto bank = build_bank(Dataset(frames), [&](const std::string &) { return testutil::random_image(24, 24, pix); });
  const auto bytes = encode_bank(bank);
  EXPECT_EQ(decode_bank(bytes), bank);
  testutil::TempDir dir;
  save_bank(bank, dir / "b.bin");
  EXPECT_EQ(load_bank(dir / "b.bin"), bank);
}

TEST(BankFile, SizeMatchesLayoutArithmetic) {
  const GridSpec g{2, 3, 4, 5};
  AnatomyBank bank{g};
  add_lesion(bank, {"zone", "or"}, {1, 2, 3, 4}, GrayImage(3, 5, 1), "img/one.pgm");
  add_lesion(bank, {"zone", "or"}, {0, 0, 0, 0}, GrayImage(2, 2, 2), "two.png");
  const std::size_t cells = 2 * 3 * 4 * 5;
  auto fg = [](std::size_t src, std::size_t w, std::size_t h) { return 16 + 16 + 4 + src + 8 + w * h; };
  const std::size_t expected = 4 + 2 + 16 + 4                 // magic, version, grid, key count
                               + (4 + 4) + (4 + 2) + 8 * cells // key strings, counts
                               + 4 + fg(11, 3, 5) + fg(7, 2, 2) // foreground table
                               + 4;                            // CRC
  EXPECT_EQ(encode_bank(bank).size(), expected);
}

TEST(BankFile, TruncationIsChecksumErrorNeverPartialBank) {
  AnatomyBank bank{GridSpec{}};
  add_lesion(bank, kKey, {1, 1, 1, 1}, GrayImage(4, 4, 5));
  const auto bytes = encode_bank(bank);
  for (std::size_t n : {std::size_t{0}, std::size_t{3}, std::size_t{9}, std::size_t{100}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(decode_bank(std::span(bytes.data(), n)), ChecksumError) << n;
}

TEST(BankFile, VersionMismatchAndCorruptionAreDistinct) {
  AnatomyBank bank{GridSpec{}};
  add_lesion(bank, kKey, {1, 1, 1, 1}, GrayImage(4, 4, 5));
  auto bytes = encode_bank(bank);
  auto v = bytes;
  v[4] = 7;
  EXPECT_THROW(decode_bank(v), VersionMismatchError);
  auto c = bytes;
  c[40] ^= 0x10;
  EXPECT_THROW(decode_bank(c), ChecksumError);
  auto m = bytes;
  m[0] = 'X';
  try {
    decode_bank(m);
    FAIL();
  } catch (const ChecksumError &) {
    FAIL() << "bad magic should not be a checksum error";
  } catch (const FormatError &) {
  }
}

TEST(BankFile, DeterministicBuild) {
  Rng a(12), b(12);
  std::vector<FrameAnnotation> fa, fb;
  for (int i = 0; i < 40; ++i) {
    fa.push_back(testutil::random_frame(a, i));
    fb.push_back(testutil::random_frame(b, i));
  }
  auto loader = [](const std::string &ref) { Rng r(std::hash<std::string>{}(ref)); return testutil::random_image(16, 16, r); };
  EXPECT_EQ(encode_bank(build_bank(Dataset(fa), loader)), encode_bank(build_bank(Dataset(fb), loader)));
}
