#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lesionsynth/anatomy_bank.hpp"
#include "lesionsynth/annotations.hpp"
#include "lesionsynth/diffusion.hpp"
#include "lesionsynth/placement.hpp"
#include "lesionsynth/random.hpp"
#include "lesionsynth/skeleton.hpp"

namespace lesionsynth {

enum class Backend { diffusion, mask_and_paste };
enum class PlacementMode { pmf, random };

inline const char *to_string(Backend b) { return b == Backend::diffusion ? "diffusion" : "mask_and_paste"; }
inline const char *to_string(PlacementMode p) { return p == PlacementMode::pmf ? "pmf" : "random"; }

/// Target P:N = 1:target_ratio plus the ablation switches.
struct SynthesisPolicy {
  double target_ratio = 1.9;
  Backend backend = Backend::diffusion;
  Condition condition = Condition::skeleton;
  PlacementMode placement = PlacementMode::pmf;
  std::uint64_t seed = 0;
  int inference_steps = 150;
  int resample_attempts = 0; // pmf mode: redraw offsets that leave the image this many times before clamping
};

struct Provenance {
  std::string source_image;
  std::size_t anatomy_index = 0;
  Point anatomy_center;
  double dx = 0, dy = 0;     // sampled offset
  BinIndex bin;              // bin the offset was drawn from
  bool offset_fallback = false;
  std::string foreground_source;
  BinIndex foreground_bin;
  std::size_t foreground_index = 0;
  bool foreground_fallback = false;
  Point shift;               // applied by fit_box
  PixelRect pixel_rect;
  int resamples = 0;         // offsets redrawn because the box left the image
  std::uint64_t seed = 0;    // seed that reproduces this record
};

struct SynthesisRecord {
  std::string output_image;
  BoundingBox lesion;
  Provenance provenance;
};

struct SynthesisResult {
  SynthesisRecord record;
  GrayImage image;
};

namespace detail {

/// Uniform draw over every foreground of a key.
inline ForegroundDraw any_foreground(const KeyBlock &blk, const GridSpec &grid, Rng &rng) {
  const auto total = blk.foreground_count();
  if (total == 0)
    throw Error("key has no lesion foregrounds");
  auto r = rng.below(total);
  for (const auto &[flat, list] : blk.foregrounds) {
    if (r < list.size()) {
      ForegroundDraw d;
      d.bin = grid.unflat(flat);
      d.index = static_cast<std::size_t>(r);
      d.foreground = &list[d.index];
      return d;
    }
    r -= list.size();
  }
  throw Error("internal error: foreground draw out of range");
}

inline std::size_t round_half_up(double v) { return static_cast<std::size_t>(std::floor(v + 0.5)); }

} // namespace detail

/// Synthesises one lesion into a healthy frame. Fully determined by `seed`.
inline SynthesisResult synthesize_one(const AnatomyBank &bank, DiffusionModel *model,
                                      const FrameAnnotation &healthy, const GrayImage &image,
                                      const SynthesisPolicy &policy, std::uint64_t seed) {
  if (!healthy.is_healthy())
    throw Error("frame " + healthy.image + " already contains a lesion");
  const auto anatomies = healthy.boxes_with(Label::anatomy);
  if (anatomies.empty())
    throw Error("frame " + healthy.image + " has no anatomy box");
  const auto key = healthy.key();
  const auto &blk = bank.block(key);

  Rng rng(seed);
  SynthesisResult out;
  auto &prov = out.record.provenance;
  prov.seed = seed;
  prov.source_image = healthy.image;
  prov.anatomy_index = static_cast<std::size_t>(rng.below(anatomies.size()));
  const auto &anchor = anatomies[prov.anatomy_index];
  prov.anatomy_center = {anchor.cx, anchor.cy};

  ForegroundDraw draw;
  if (policy.placement == PlacementMode::pmf) {
    for (int attempt = 0;; ++attempt) {
      const auto off = sample_offset(bank, key, anchor.cx, anchor.cy, rng);
      prov.dx = off.dx;
      prov.dy = off.dy;
      prov.bin = off.bin;
      prov.offset_fallback = off.fallback;
      draw = sample_lesion(bank, key, off.bin, rng);
      const auto c = place(anchor.cx, anchor.cy, off.dx, off.dy);
      const double hw = draw.foreground->box_w / 2, hh = draw.foreground->box_h / 2;
      const bool inside = c.x >= hw && c.x <= 1 - hw && c.y >= hh && c.y <= 1 - hh;
      if (inside || attempt >= policy.resample_attempts)
        break;
      ++prov.resamples;
    }
  } else {
    draw = detail::any_foreground(blk, bank.grid(), rng);
    const auto &fg = *draw.foreground;
    const double cx = rng.uniform(fg.box_w / 2, 1 - fg.box_w / 2);
    const double cy = rng.uniform(fg.box_h / 2, 1 - fg.box_h / 2);
    prov.dx = cx - anchor.cx;
    prov.dy = cy - anchor.cy;
    prov.bin = draw.bin;
  }
  const auto &fg = *draw.foreground;
  prov.foreground_source = fg.source;
  prov.foreground_bin = draw.bin;
  prov.foreground_index = draw.index;
  prov.foreground_fallback = draw.fallback;

  const auto placement = fit_box(place(anchor.cx, anchor.cy, prov.dx, prov.dy), fg.box_w, fg.box_h,
                                 image.width, image.height);
  prov.shift = placement.shift;
  prov.pixel_rect = placement.pixel_rect;
  out.record.lesion = placement.box;

  if (policy.backend == Backend::diffusion) {
    if (model == nullptr)
      throw Error("diffusion backend requires a model");
    if (model->config.condition != policy.condition)
      throw Error(std::string("model was trained with ") + to_string(model->config.condition) +
                  " conditioning, policy requests " + to_string(policy.condition));
    const auto mask = resize_nearest(condition_mask(fg.crop, policy.condition),
                                     placement.pixel_rect.w, placement.pixel_rect.h);
    out.image = generate(*model, image, placement, mask, {policy.inference_steps, rng.fork()});
  } else {
    out.image = mask_and_paste(image, placement, fg.crop);
  }
  return out;
}

struct BalanceResult {
  Dataset dataset;
  std::vector<SynthesisRecord> records;
  std::vector<GrayImage> images; // parallel to records
};

/// Number of healthy frames to replace so that P:N reaches 1:r.
inline std::size_t replacements_needed(std::size_t total, std::size_t positives, double r) {
  if (!(r > 0))
    throw Error("target ratio must be positive");
  const auto target = detail::round_half_up(static_cast<double>(total) / (1.0 + r));
  return target > positives ? target - positives : 0;
}

inline std::string ratio_string(std::size_t pos, std::size_t neg) {
  if (pos == 0)
    return "1:inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "1:%.3f", static_cast<double>(neg) / pos);
  return buf;
}

/// Replaces randomly chosen eligible healthy frames with synthetic positives
/// until P:N is within one frame of 1:r; the frame count never changes.
///
/// Each replacement's seed is child_seed(policy.seed, frame index), so the
/// result does not depend on `threads`.
inline BalanceResult balance_dataset(const Dataset &dataset, const ImageLoader &load,
                                     const AnatomyBank &bank, DiffusionModel *model,
                                     const SynthesisPolicy &policy, unsigned threads = 1,
                                     const std::string &output_dir = "synthetic") {
  const auto totals = dataset.totals();
  const std::size_t k = replacements_needed(dataset.size(), totals.positives, policy.target_ratio);

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto &f = dataset.frames()[i];
    if (f.is_healthy() && !f.boxes_with(Label::anatomy).empty() && bank.has_key(f.key()))
      eligible.push_back(i);
  }
  if (k > eligible.size()) {
    const auto pos = totals.positives + eligible.size();
    throw Error("not enough eligible healthy frames: need " + std::to_string(k) + ", have " +
                std::to_string(eligible.size()) + "; best achievable ratio is " +
                ratio_string(pos, dataset.size() - pos));
  }

  Rng rng(policy.seed);
  for (std::size_t i = 0; i < k; ++i)
    std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
  std::vector<std::size_t> chosen(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(chosen.begin(), chosen.end());

  BalanceResult result;
  result.records.resize(k);
  result.images.resize(k);
  auto work = [&](std::size_t begin, std::size_t end, DiffusionModel *m) {
    for (std::size_t j = begin; j < end; ++j) {
      const auto &frame = dataset.frames()[chosen[j]];
      auto r = synthesize_one(bank, m, frame, load(frame.image), policy,
                              child_seed(policy.seed, chosen[j]));
      char name[64];
      std::snprintf(name, sizeof name, "/syn_%06zu.pgm", chosen[j]);
      r.record.output_image = output_dir + name;
      result.records[j] = std::move(r.record);
      result.images[j] = std::move(r.image);
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(k, 1))));
  if (threads == 1) {
    work(0, k, model);
  } else {
    // Layers cache activations, so every worker gets its own model copy.
    std::vector<std::unique_ptr<DiffusionModel>> copies;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned w = 0; w < threads; ++w) {
      copies.push_back(model ? std::make_unique<DiffusionModel>(*model) : nullptr);
      const std::size_t b = k * w / threads, e = k * (w + 1) / threads;
      pool.emplace_back([&, b, e, w] {
        try {
          work(b, e, copies[w].get());
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto &t : pool)
      t.join();
    for (auto &e : errors)
      if (e)
        std::rethrow_exception(e);
  }

  std::vector<FrameAnnotation> frames = dataset.frames();
  for (std::size_t j = 0; j < k; ++j) {
    auto &f = frames[chosen[j]];
    f.image = result.records[j].output_image;
    f.boxes.push_back(result.records[j].lesion);
  }
  result.dataset = Dataset(std::move(frames));
  return result;
}

/// Repeat baseline: healthy frames are replaced by copies of existing
/// positives (drawn with replacement) until P:N reaches 1:r. No new images.
inline Dataset repeat_rare(const Dataset &dataset, double r, std::uint64_t seed) {
  const auto totals = dataset.totals();
  if (totals.positives == 0)
    throw Error("dataset has no positive frames to repeat");
  const std::size_t k = replacements_needed(dataset.size(), totals.positives, r);
  std::vector<std::size_t> positives, healthy;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    (dataset.frames()[i].is_healthy() ? healthy : positives).push_back(i);
  if (k > healthy.size())
    throw Error("not enough healthy frames to replace: need " + std::to_string(k) + ", have " +
                std::to_string(healthy.size()));
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i)
    std::swap(healthy[i], healthy[i + rng.below(healthy.size() - i)]);
  std::vector<FrameAnnotation> frames = dataset.frames();
  for (std::size_t i = 0; i < k; ++i)
    frames[healthy[i]] = dataset.frames()[positives[rng.below(positives.size())]];
  return Dataset(std::move(frames));
}

// ---------------------------------------------------------------------------
// Provenance JSONL

inline nlohmann::ordered_json to_json(const SynthesisRecord &r) {
  const auto &p = r.provenance;
  auto bin = [](const BinIndex &b) { return nlohmann::ordered_json::array({b.ix, b.iy, b.idx, b.idy}); };
  nlohmann::ordered_json j;
  j["image"] = r.output_image;
  j["lesion"] = {{"cx", r.lesion.cx}, {"cy", r.lesion.cy}, {"w", r.lesion.w}, {"h", r.lesion.h}, {"label", "lesion"}};
  j["source_image"] = p.source_image;
  j["anatomy_index"] = p.anatomy_index;
  j["anatomy_center"] = {p.anatomy_center.x, p.anatomy_center.y};
  j["offset"] = {p.dx, p.dy};
  j["bin"] = bin(p.bin);
  j["offset_fallback"] = p.offset_fallback;
  j["foreground_source"] = p.foreground_source;
  j["foreground_bin"] = bin(p.foreground_bin);
  j["foreground_index"] = p.foreground_index;
  j["foreground_fallback"] = p.foreground_fallback;
  j["resamples"] = p.resamples;
  j["shift"] = {p.shift.x, p.shift.y};
  j["pixel_rect"] = {p.pixel_rect.x, p.pixel_rect.y, p.pixel_rect.w, p.pixel_rect.h};
  j["seed"] = p.seed;
  return j;
}

} // namespace lesionsynth
