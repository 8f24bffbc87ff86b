#pragma once

// Command-line front end. `run` is the whole program minus main(), so tests
// can drive it with argument vectors and capture both streams.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "lesionsynth/anatomy_bank.hpp"
#include "lesionsynth/annotations.hpp"
#include "lesionsynth/diffusion.hpp"
#include "lesionsynth/error.hpp"
#include "lesionsynth/image.hpp"
#include "lesionsynth/phantom.hpp"
#include "lesionsynth/pipeline.hpp"
#include "lesionsynth/skeleton.hpp"

namespace lesionsynth::cli {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  std::ostringstream s;
  for (unsigned i = 0; i < len; ++i)
    s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return s.str();
}

inline std::string file_digest(const fs::path &p) { return sha256_hex(read_file_bytes(p)); }

/// Record of one invocation: enough to re-run it and check the outputs.
struct RunManifest {
  std::string subcommand;
  std::vector<std::string> argv;
  std::string config; // every option of the subcommand, resolved, key=value lines
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;  // path -> sha256
  std::map<std::string, std::string> outputs; // path -> sha256
  double seconds = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["subcommand"] = subcommand;
    j["argv"] = argv;
    j["config"] = config;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["timings"] = {{"seconds", seconds}};
    return j;
  }
  static RunManifest from_json(const nlohmann::json &j) {
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.config = j.at("config").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.seconds = j.at("timings").at("seconds").get<double>();
    return m;
  }
};

inline void write_manifest(const RunManifest &m, const fs::path &path) {
  const std::string text = m.to_json().dump(2) + "\n";
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline RunManifest read_manifest(const fs::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error("cannot open " + path.string());
  try {
    return RunManifest::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception &e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  }
}

/// Reads a flat key=value file. Blank lines and lines starting with '#' are skipped.
inline std::vector<std::pair<std::string, std::string>> read_flat_config(const fs::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error("cannot open config " + path.string());
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
      return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    line = trim(line);
    if (line.empty() || line[0] == '#')
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(n, "expected key=value in " + path.string());
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

namespace detail {

/// Image refs of `ds` are relative to `from`; rewrites them relative to `to`.
inline Dataset rebase(const Dataset &ds, const fs::path &from, const fs::path &to,
                      const std::string &keep_prefix = {}) {
  const auto abs_from = fs::absolute(from), abs_to = fs::absolute(to);
  std::vector<FrameAnnotation> frames = ds.frames();
  for (auto &f : frames) {
    if (!keep_prefix.empty() && f.image.starts_with(keep_prefix))
      continue;
    fs::path p(f.image);
    if (p.is_relative())
      f.image = (abs_from / p).lexically_normal().lexically_proximate(abs_to).generic_string();
  }
  return Dataset(std::move(frames));
}

inline void write_text(const fs::path &path, const std::string &text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline std::string dataset_jsonl(const Dataset &ds) {
  std::ostringstream s;
  serialize_annotations(ds, s);
  return s.str();
}

/// Max-normalised conditional slice, one `cell`-pixel square per (dx, dy) bin;
/// rows run over dy, columns over dx.
inline GrayImage heatmap(std::span<const double> slice, const GridSpec &grid, int cell) {
  GrayImage img(grid.bins_dx * cell, grid.bins_dy * cell);
  const double mx = slice.empty() ? 0.0 : *std::max_element(slice.begin(), slice.end());
  for (int i = 0; i < grid.bins_dx; ++i)
    for (int j = 0; j < grid.bins_dy; ++j) {
      const double p = slice[static_cast<std::size_t>(i) * grid.bins_dy + j];
      const auto v = mx > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * p / mx)) : std::uint8_t{0};
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x)
          img.at(i * cell + x, j * cell + y) = v;
    }
  return img;
}

/// Side-by-side healthy | synthetic rows for a quick look at the output.
inline GrayImage preview_grid(const std::vector<std::pair<GrayImage, GrayImage>> &pairs) {
  if (pairs.empty())
    return GrayImage(1, 1);
  int w = 0, h = 0;
  for (const auto &[a, b] : pairs) {
    w = std::max(w, a.width + b.width + 2);
    h += std::max(a.height, b.height) + 2;
  }
  GrayImage out(w, h);
  int y0 = 0;
  for (const auto &[a, b] : pairs) {
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x)
        out.at(x, y0 + y) = a.at(x, y);
    for (int y = 0; y < b.height; ++y)
      for (int x = 0; x < b.width; ++x)
        out.at(a.width + 2 + x, y0 + y) = b.at(x, y);
    y0 += std::max(a.height, b.height) + 2;
  }
  return out;
}

inline std::vector<GrayImage> load_all(const Dataset &ds, const ImageLoader &load) {
  std::vector<GrayImage> out;
  out.reserve(ds.size());
  for (const auto &f : ds.frames())
    out.push_back(load(f.image));
  return out;
}

inline SliceKey parse_key(const std::string &s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos)
    throw Error("key must look like ZONE,ORIENTATION");
  return {s.substr(0, comma), s.substr(comma + 1)};
}

} // namespace detail

/// Runs one subcommand. Returns 0 on success, 2 on usage errors, 1 on runtime errors.
inline int run(std::vector<std::string> args, std::ostream &out = std::cout, std::ostream &err = std::cerr) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> original = args;

  CLI::App app{"Lesion synthesis toolkit: anatomy-conditioned PMF bank, Otsu skeletons, "
               "latent diffusion inpainting and dataset rebalancing.",
               "lesionsynth"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Expand all help");

  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string config_path, manifest_path;
  auto *seed_opt = app.add_option("--seed", seed, "Random seed")->capture_default_str();
  app.add_option("--threads", threads, "Worker thread cap")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--config", config_path, "Flat key=value file overriding defaults");
  app.add_option("--manifest", manifest_path, "Where to write the run manifest");
  (void)seed_opt;

  RunManifest manifest;
  std::function<void()> action;
  fs::path default_manifest;

  // Subcommand options shared by several commands.
  std::string in_path, out_path, bank_path, model_path;

  // --- stats
  auto *stats = app.add_subcommand("stats", "Positive/negative counts per (zone, orientation)");
  stats->add_option("annotations", in_path, "Annotation JSONL")->required();
  stats->callback([&] {
    action = [&] {
      const auto ds = load_annotations(in_path);
      manifest.inputs[in_path] = file_digest(in_path);
      for (const auto &[key, c] : ds.counts())
        out << key.str() << " positives=" << c.positives << " negatives=" << c.negatives << "\n";
      const auto t = ds.totals();
      out << "total positives=" << t.positives << " negatives=" << t.negatives
          << " ratio=" << ratio_string(t.positives, t.negatives) << "\n";
    };
    default_manifest = "lesionsynth-stats.manifest.json";
  });

  // --- phantom-gen
  std::size_t count = 2000;
  PhantomConfig phantom;
  auto *pgen = app.add_subcommand("phantom-gen", "Write a synthetic phantom corpus");
  pgen->add_option("--count", count, "Number of frames")->capture_default_str();
  pgen->add_option("--out", out_path, "Output directory")->required();
  pgen->add_option("--size", phantom.size, "Image side in pixels")->capture_default_str()->check(CLI::Range(16, 1024));
  pgen->add_option("--positive-fraction", phantom.positive_fraction, "Share of frames with a lesion")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  pgen->callback([&] {
    action = [&] {
      const auto ds = write_phantom_corpus(out_path, count, seed, phantom);
      manifest.outputs[(fs::path(out_path) / "annotations.jsonl").string()] =
          file_digest(fs::path(out_path) / "annotations.jsonl");
      const auto t = ds.totals();
      out << "wrote " << ds.size() << " frames (" << t.positives << " positive) to " << out_path << "\n";
    };
    default_manifest = fs::path(out_path) / "manifest.json";
  });

  // --- build-bank
  int bins = 10;
  auto *bb = app.add_subcommand("build-bank", "Count lesion offsets into an anatomy bank");
  bb->add_option("--in", in_path, "Annotation JSONL")->required();
  bb->add_option("--out", out_path, "Bank file")->required();
  bb->add_option("--bins", bins, "Bins per axis (x, y, dx, dy)")->capture_default_str()->check(CLI::Range(1, 1000));
  bb->callback([&] {
    action = [&] {
      const auto ds = load_annotations(in_path);
      manifest.inputs[in_path] = file_digest(in_path);
      BuildStats st;
      const auto bank = build_bank(ds, make_file_loader(fs::path(in_path).parent_path()),
                                   GridSpec{bins, bins, bins, bins}, &st);
      save_bank(bank, out_path);
      manifest.outputs[out_path] = file_digest(out_path);
      out << "bank: " << bank.blocks().size() << " keys, " << st.lesions << " lesions";
      if (st.skipped_frames_without_anatomy)
        out << ", " << st.skipped_frames_without_anatomy << " frames skipped (no anatomy box)";
      out << "\n";
    };
    default_manifest = out_path + ".manifest.json";
  });

  // --- inspect-bank
  std::string key_str;
  double qx = 0.5, qy = 0.5;
  int cell = 1;
  auto *ib = app.add_subcommand("inspect-bank", "Render one conditional slice as a heatmap");
  ib->add_option("--bank", bank_path, "Bank file")->required();
  ib->add_option("--key", key_str, "ZONE,ORIENTATION")->required();
  ib->add_option("--x", qx, "Anatomy x")->capture_default_str();
  ib->add_option("--y", qy, "Anatomy y")->capture_default_str();
  ib->add_option("--cell", cell, "Pixels per bin")->capture_default_str()->check(CLI::Range(1, 64));
  ib->add_option("--out", out_path, "Heatmap image (.pgm or .png)")->required();
  ib->callback([&] {
    action = [&] {
      const auto bank = load_bank(bank_path);
      manifest.inputs[bank_path] = file_digest(bank_path);
      const auto key = detail::parse_key(key_str);
      const auto &g = bank.grid();
      const int ix = g.x_axis().index(qx, "x"), iy = g.y_axis().index(qy, "y");
      const auto slice = bank.conditional_slice(key, ix, iy);
      const auto &blk = bank.block(key);
      const std::size_t s = static_cast<std::size_t>(ix) * g.bins_y + iy;
      save_image(out_path, detail::heatmap(slice, g, cell));
      manifest.outputs[out_path] = file_digest(out_path);
      out << "slice (" << ix << ", " << iy << ") of " << key.str() << ": " << blk.marginal[s]
          << " of " << blk.total() << " lesions";
      if (blk.slice_empty(s))
        out << " (empty slice)";
      out << "\n";
    };
    default_manifest = out_path + ".manifest.json";
  });

  // --- skeletonize
  std::string crop_path;
  auto *sk = app.add_subcommand("skeletonize", "Otsu-threshold a lesion crop");
  sk->add_option("crop", crop_path, "Crop image")->required();
  sk->add_option("--out", out_path, "Mask path (default <crop>.mask.pgm)");
  sk->callback([&] {
    if (out_path.empty())
      out_path = (fs::path(crop_path).parent_path() / fs::path(crop_path).stem()).string() + ".mask.pgm";
    action = [&] {
      const auto crop_img = load_image(crop_path);
      manifest.inputs[crop_path] = file_digest(crop_path);
      const auto skel = extract_skeleton(crop_img);
      save_image(out_path, mask_to_view(skel.mask));
      manifest.outputs[out_path] = file_digest(out_path);
      out << "threshold=" << skel.threshold << "\n";
    };
    default_manifest = out_path + ".manifest.json";
  });

  // --- train-ae / train-diffusion
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  std::string condition_str = "skeleton";
  const std::map<std::string, Condition> conditions{{"skeleton", Condition::skeleton},
                                                    {"binary_box", Condition::binary_box}};
  auto add_train_options = [&](CLI::App *c) {
    c->add_option("--epochs", train_cfg.epochs, "Training epochs")->capture_default_str()->check(CLI::Range(0, 100000));
    c->add_option("--batch-size", train_cfg.batch_size, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--lr", train_cfg.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--val-fraction", train_cfg.val_fraction, "Held-out share")->capture_default_str()->check(CLI::Range(0.0, 0.9));
  };
  auto print_epoch = [&](int e, double tr, double v) {
    out << "epoch " << e << " train " << tr << " val " << v << std::endl;
  };

  auto *tae = app.add_subcommand("train-ae", "Train the image autoencoder");
  tae->add_option("--in", in_path, "Annotation JSONL (every referenced image is used)")->required();
  tae->add_option("--out", out_path, "Checkpoint to write")->required();
  tae->add_option("--image-size", model_cfg.image_size, "Image side")->capture_default_str();
  tae->add_option("--downsample", model_cfg.downsample, "Latent downsample factor")->capture_default_str();
  tae->add_option("--latent-channels", model_cfg.latent_channels, "Latent channels")->capture_default_str();
  tae->add_option("--ae-channels", model_cfg.ae_channels, "Autoencoder base width")->capture_default_str();
  tae->add_option("--denoiser-channels", model_cfg.denoiser_channels, "Denoiser width")->capture_default_str();
  tae->add_option("--min-images", train_cfg.min_images, "Refuse smaller corpora")->capture_default_str();
  add_train_options(tae);
  tae->callback([&] {
    action = [&] {
      const auto ds = load_annotations(in_path);
      manifest.inputs[in_path] = file_digest(in_path);
      const auto images = detail::load_all(ds, make_file_loader(fs::path(in_path).parent_path()));
      DiffusionModel m(model_cfg, seed);
      train_cfg.seed = seed;
      train_cfg.on_epoch = print_epoch;
      const auto rep = train_autoencoder(m, images, train_cfg);
      out << "validation " << rep.validation_loss.front() << " -> " << rep.validation_loss[rep.best_epoch]
          << " (best epoch " << rep.best_epoch << ")\n";
      save_checkpoint(m, out_path);
      manifest.outputs[out_path] = file_digest(out_path);
    };
    default_manifest = out_path + ".manifest.json";
  });

  auto *tdf = app.add_subcommand("train-diffusion", "Train the latent denoiser on real lesions");
  tdf->add_option("--in", in_path, "Annotation JSONL")->required();
  tdf->add_option("--model", model_path, "Checkpoint with a trained autoencoder")->required();
  tdf->add_option("--out", out_path, "Checkpoint to write")->required();
  tdf->add_option("--condition", condition_str, "skeleton or binary_box")
      ->capture_default_str()
      ->check(CLI::IsMember({"skeleton", "binary_box"}));
  add_train_options(tdf);
  tdf->callback([&] {
    action = [&] {
      const auto ds = load_annotations(in_path);
      manifest.inputs[in_path] = file_digest(in_path);
      manifest.inputs[model_path] = file_digest(model_path);
      auto m = load_checkpoint(model_path);
      reset_denoiser(m, conditions.at(condition_str), child_seed(seed, 1));
      const auto examples = lesion_examples(ds, make_file_loader(fs::path(in_path).parent_path()));
      train_cfg.seed = seed;
      train_cfg.on_epoch = print_epoch;
      const auto rep = train_denoiser(m, examples, train_cfg);
      out << "validation " << rep.validation_loss.front() << " -> " << rep.validation_loss[rep.best_epoch]
          << " (best epoch " << rep.best_epoch << ")\n";
      save_checkpoint(m, out_path);
      manifest.outputs[out_path] = file_digest(out_path);
    };
    default_manifest = out_path + ".manifest.json";
  });

  // --- synthesize
  SynthesisPolicy policy;
  std::string backend_str = "diffusion", placement_str = "pmf", grid_path;
  std::size_t grid_rows = 8;
  auto *syn = app.add_subcommand("synthesize", "Replace healthy frames with synthetic positives");
  syn->add_option("--bank", bank_path, "Bank file")->required();
  syn->add_option("--model", model_path, "Checkpoint (diffusion back-end only)");
  syn->add_option("--in", in_path, "Annotation JSONL")->required();
  syn->add_option("--ratio", policy.target_ratio, "Target P:N = 1:ratio")->capture_default_str()->check(CLI::PositiveNumber);
  syn->add_option("--backend", backend_str, "diffusion or mask_and_paste")
      ->capture_default_str()
      ->check(CLI::IsMember({"diffusion", "mask_and_paste"}));
  syn->add_option("--condition", condition_str, "skeleton or binary_box")
      ->capture_default_str()
      ->check(CLI::IsMember({"skeleton", "binary_box"}));
  syn->add_option("--placement", placement_str, "pmf or random")
      ->capture_default_str()
      ->check(CLI::IsMember({"pmf", "random"}));
  syn->add_option("--resample", policy.resample_attempts, "Redraw out-of-image offsets up to N times before clamping")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  syn->add_option("--steps", policy.inference_steps, "Reverse diffusion steps")->capture_default_str()->check(CLI::PositiveNumber);
  syn->add_option("--preview", grid_path, "Write a healthy|synthetic preview grid here");
  syn->add_option("--preview-rows", grid_rows, "Rows in the preview grid")->capture_default_str();
  syn->add_option("--out", out_path, "Output directory")->required();
  syn->callback([&] {
    action = [&] {
      policy.backend = backend_str == "diffusion" ? Backend::diffusion : Backend::mask_and_paste;
      policy.placement = placement_str == "pmf" ? PlacementMode::pmf : PlacementMode::random;
      policy.condition = conditions.at(condition_str);
      policy.seed = seed;
      const auto ds = load_annotations(in_path);
      manifest.inputs[in_path] = file_digest(in_path);
      const auto bank = load_bank(bank_path);
      manifest.inputs[bank_path] = file_digest(bank_path);
      std::optional<DiffusionModel> model;
      if (policy.backend == Backend::diffusion) {
        if (model_path.empty())
          throw Error("--model is required for the diffusion back-end");
        model = load_checkpoint(model_path);
        manifest.inputs[model_path] = file_digest(model_path);
      }
      const fs::path base = fs::path(in_path).parent_path(), dir(out_path);
      const auto loader = make_file_loader(base);
      auto res = balance_dataset(ds, loader, bank, model ? &*model : nullptr, policy, threads, "synthetic");
      fs::create_directories(dir / "synthetic");
      for (std::size_t i = 0; i < res.records.size(); ++i) {
        const auto p = dir / res.records[i].output_image;
        save_image(p, res.images[i]);
        manifest.outputs[p.string()] = file_digest(p);
      }
      const auto final_ds = detail::rebase(res.dataset, base, dir, "synthetic/");
      detail::write_text(dir / "annotations.jsonl", detail::dataset_jsonl(final_ds));
      std::string prov;
      for (const auto &r : res.records)
        prov += to_json(r).dump() + "\n";
      detail::write_text(dir / "provenance.jsonl", prov);
      for (const char *f : {"annotations.jsonl", "provenance.jsonl"})
        manifest.outputs[(dir / f).string()] = file_digest(dir / f);
      if (!grid_path.empty()) {
        std::vector<std::pair<GrayImage, GrayImage>> pairs;
        for (std::size_t i = 0; i < std::min(grid_rows, res.records.size()); ++i)
          pairs.emplace_back(loader(res.records[i].provenance.source_image), res.images[i]);
        save_image(grid_path, detail::preview_grid(pairs));
        manifest.outputs[grid_path] = file_digest(grid_path);
      }
      const auto before = ds.totals(), after = res.dataset.totals();
      out << "replaced " << res.records.size() << " healthy frames; ratio "
          << ratio_string(before.positives, before.negatives) << " -> "
          << ratio_string(after.positives, after.negatives) << ", " << res.dataset.size() << " frames\n";
    };
    default_manifest = fs::path(out_path) / "manifest.json";
  });

  // --- balance (repeat baseline)
  double ratio = 2.3;
  auto *bal = app.add_subcommand("balance", "Rebalance by repeating existing positives (no new images)");
  bal->add_option("--in", in_path, "Annotation JSONL")->required();
  bal->add_option("--ratio", ratio, "Target P:N = 1:ratio")->capture_default_str()->check(CLI::PositiveNumber);
  bal->add_option("--out", out_path, "Output directory")->required();
  bal->callback([&] {
    action = [&] {
      const auto ds = load_annotations(in_path);
      manifest.inputs[in_path] = file_digest(in_path);
      const auto res = repeat_rare(ds, ratio, seed);
      const fs::path dir(out_path);
      fs::create_directories(dir);
      const auto p = dir / "annotations.jsonl";
      detail::write_text(p, detail::dataset_jsonl(detail::rebase(res, fs::path(in_path).parent_path(), dir)));
      manifest.outputs[p.string()] = file_digest(p);
      const auto before = ds.totals(), after = res.totals();
      out << "repeated " << after.positives - before.positives << " positives; ratio "
          << ratio_string(before.positives, before.negatives) << " -> "
          << ratio_string(after.positives, after.negatives) << "\n";
    };
    default_manifest = fs::path(out_path) / "manifest.json";
  });

  // --- replay
  std::string replay_path;
  auto *rep = app.add_subcommand("replay", "Re-run a manifest and compare output digests");
  rep->add_option("manifest", replay_path, "Manifest written by an earlier run")->required();
  rep->callback([&] {
    action = [&] {
      const auto m = read_manifest(replay_path);
      for (const auto &[path, digest] : m.inputs)
        if (file_digest(path) != digest)
          throw Error("input changed since the recorded run: " + path);
      std::ostringstream sink;
      // Keep the recorded manifest intact.
      std::vector<std::string> argv{"--manifest", replay_path + ".replay.json"};
      for (std::size_t i = 0; i < m.argv.size(); ++i) {
        if (m.argv[i] == "--manifest")
          ++i;
        else if (!m.argv[i].starts_with("--manifest="))
          argv.push_back(m.argv[i]);
      }
      if (run(argv, sink, err) != 0)
        throw Error("replayed run failed");
      std::size_t mismatches = 0;
      for (const auto &[path, digest] : m.outputs)
        if (!fs::exists(path) || file_digest(path) != digest) {
          err << "digest mismatch: " << path << "\n";
          ++mismatches;
        }
      if (mismatches)
        throw Error(std::to_string(mismatches) + " outputs differ from the manifest");
      out << "reproduced " << m.outputs.size() << " outputs\n";
    };
    default_manifest = replay_path + ".replay.json";
  });

  // --config: flat key=value pairs become --key=value after the subcommand
  // name unless the option was given explicitly.
  try {
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
      if (args[i] == "--config")
        config_path = args[i + 1];
      else if (args[i].starts_with("--config="))
        config_path = args[i].substr(9);
    if (config_path.empty() && !args.empty() && args.back().starts_with("--config="))
      config_path = args.back().substr(9);
    if (!config_path.empty()) {
      std::size_t sub = args.size();
      for (std::size_t i = 0; i < args.size(); ++i)
        if (app.get_subcommand_no_throw(args[i]) != nullptr) {
          sub = i;
          break;
        }
      std::vector<std::string> extra;
      for (const auto &[k, v] : read_flat_config(config_path)) {
        const bool given = std::any_of(args.begin(), args.end(), [&](const std::string &a) {
          return a == "--" + k || a.starts_with("--" + k + "=");
        });
        if (!given)
          extra.push_back("--" + k + "=" + v);
      }
      args.insert(sub < args.size() ? args.begin() + static_cast<std::ptrdiff_t>(sub) + 1 : args.end(),
                  extra.begin(), extra.end());
    }
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    app.exit(e, out, err);
    err << app.help();
    return 2;
  }

  CLI::App *chosen = app.get_subcommands().front();
  manifest.subcommand = chosen->get_name();
  manifest.argv = original;
  manifest.seed = seed;
  {
    // Global options plus the chosen subcommand's; other subcommands are noise.
    std::istringstream all(app.config_to_str(true, false));
    std::string line;
    for (; std::getline(all, line);) {
      const auto dot = line.find('.'), eq = line.find('=');
      if (dot != std::string::npos && dot < eq && line.substr(0, dot) != manifest.subcommand)
        continue;
      manifest.config += line + "\n";
    }
  }
  try {
    action();
    manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(manifest, manifest_path.empty() ? default_manifest : fs::path(manifest_path));
  } catch (const std::exception &e) {
    err << "error: " << manifest.subcommand << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}

} // namespace lesionsynth::cli
