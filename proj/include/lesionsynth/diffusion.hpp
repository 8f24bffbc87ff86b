#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lesionsynth/annotations.hpp"
#include "lesionsynth/binary_io.hpp"
#include "lesionsynth/image.hpp"
#include "lesionsynth/nn.hpp"
#include "lesionsynth/placement.hpp"
#include "lesionsynth/random.hpp"
#include "lesionsynth/skeleton.hpp"

namespace lesionsynth {

// ---------------------------------------------------------------------------
// Noise schedule and the two diffusion processes

/// Linear beta schedule over steps t = 1..T.
class NoiseSchedule {
public:
  NoiseSchedule() : NoiseSchedule(1000, 1e-4, 0.02) {}
  NoiseSchedule(int steps, double beta_start, double beta_end)
      : steps_(steps), beta_start_(beta_start), beta_end_(beta_end) {
    if (steps < 2)
      throw Error("schedule needs at least 2 steps");
    if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end))
      throw Error("betas must satisfy 0 < beta_start <= beta_end < 1");
    betas_.resize(steps + 1);
    alpha_bars_.resize(steps + 1);
    alpha_bars_[0] = 1.0;
    for (int t = 1; t <= steps; ++t) {
      betas_[t] = beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
      alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - betas_[t]);
    }
    if (!(alpha_bars_[steps] < 0.01))
      throw Error("schedule does not reach alpha_bar_T < 0.01");
  }

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  double beta(int t) const { return betas_.at(t); }
  double alpha(int t) const { return 1.0 - betas_.at(t); }
  /// Cumulative product of alphas; alpha_bar(0) = 1.
  double alpha_bar(int t) const { return alpha_bars_.at(t); }

  void check_step(int t) const {
    if (t < 1 || t > steps_)
      throw Error("diffusion step " + std::to_string(t) + " outside [1, " +
                  std::to_string(steps_) + "]");
  }

private:
  int steps_;
  double beta_start_, beta_end_;
  std::vector<double> betas_, alpha_bars_;
};

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise
template <typename T>
std::vector<T> forward_noising(std::span<const T> z0, int t, std::span<const T> noise,
                               const NoiseSchedule &schedule) {
  schedule.check_step(t);
  if (z0.size() != noise.size())
    throw Error("forward_noising: latent and noise sizes differ");
  const double a = std::sqrt(schedule.alpha_bar(t));
  const double b = std::sqrt(1.0 - schedule.alpha_bar(t));
  std::vector<T> out(z0.size());
  for (std::size_t i = 0; i < z0.size(); ++i)
    out[i] = static_cast<T>(a * z0[i] + b * noise[i]);
  return out;
}

/// Evenly strided subsequence of 1..T with `count` entries, ascending, always
/// containing 1 and T. count == T gives every step.
inline std::vector<int> inference_timesteps(int T, int count) {
  if (count < 1 || count > T)
    throw Error("inference steps must lie in [1, " + std::to_string(T) + "]");
  if (count == 1)
    return {T};
  std::vector<int> out(count);
  for (int i = 0; i < count; ++i)
    out[i] = 1 + static_cast<int>(static_cast<long>(i) * (T - 1) / (count - 1));
  return out;
}

/// Ancestral sampling over a strided step sequence.
///
/// `eps(z, t)` predicts the noise in z at step t. After every update
/// `project(z, t_prev)` may overwrite entries (t_prev == 0 means clean).
/// The last step returns the predicted clean latent without added noise.
template <typename Eps, typename Project>
std::vector<double> reverse_process(const NoiseSchedule &s, int inference_steps,
                                    std::vector<double> z, Eps &&eps, Project &&project,
                                    Rng &rng) {
  const auto steps = inference_timesteps(s.steps(), inference_steps);
  for (int i = static_cast<int>(steps.size()) - 1; i >= 0; --i) {
    const int t = steps[i];
    const int t_prev = i > 0 ? steps[i - 1] : 0;
    const std::vector<double> e = eps(static_cast<const std::vector<double> &>(z), t);
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    if (t_prev == 0) {
      for (std::size_t k = 0; k < z.size(); ++k)
        z[k] = (z[k] - sb * e[k]) / sa;
    } else {
      const double beta = 1.0 - ab / ab_prev;
      const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
      const double c_zt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
      const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
      for (std::size_t k = 0; k < z.size(); ++k) {
        const double x0 = (z[k] - sb * e[k]) / sa;
        z[k] = c_x0 * x0 + c_zt * z[k] + sigma * rng.normal();
      }
    }
    project(z, t_prev);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Configuration

enum class Condition : std::uint8_t { skeleton = 0, binary_box = 1 };

inline const char *to_string(Condition c) {
  return c == Condition::skeleton ? "skeleton" : "binary_box";
}

struct ModelConfig {
  int image_size = 64;
  int downsample = 4;
  int latent_channels = 4;
  int ae_channels = 8;
  int denoiser_channels = 64;
  int time_dim = 64;
  int train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  Condition condition = Condition::skeleton;

  int latent_size() const { return image_size / downsample; }
  int levels() const {
    int k = 0;
    for (int d = downsample; d > 1; d >>= 1)
      ++k;
    return k;
  }
  void check() const {
    if (downsample < 1 || (downsample & (downsample - 1)) != 0)
      throw Error("downsample factor must be a power of two");
    if (image_size % downsample != 0)
      throw Error("image size must be a multiple of the downsample factor");
    if (latent_size() < 2 || latent_size() % 2 != 0)
      throw Error("latent side must be even and >= 2");
    if (latent_channels < 1 || ae_channels < 1 || denoiser_channels < 1 || time_dim < 2 ||
        time_dim % 2 != 0)
      throw Error("bad channel configuration");
  }
  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

// ---------------------------------------------------------------------------
// Networks

/// Convolutional autoencoder: one stride-2 conv per factor of two.
template <typename T> class Autoencoder {
public:
  Autoencoder() = default;
  Autoencoder(const ModelConfig &cfg, Rng &rng) {
    const int k = cfg.levels();
    std::vector<int> ch(k + 1);
    ch[0] = cfg.ae_channels;
    for (int i = 1; i <= k; ++i)
      ch[i] = std::min(cfg.ae_channels << i, cfg.ae_channels * 4);
    enc_.emplace_back("enc.0", 1, ch[0], 1, rng);
    for (int i = 1; i <= k; ++i)
      enc_.emplace_back("enc." + std::to_string(i), ch[i - 1], ch[i], 2, rng);
    enc_.emplace_back("enc." + std::to_string(k + 1), ch[k], cfg.latent_channels, 1, rng);
    dec_.emplace_back("dec.0", cfg.latent_channels, ch[k], 1, rng);
    for (int i = k; i >= 1; --i)
      dec_.emplace_back("dec." + std::to_string(k - i + 1), ch[i], ch[i - 1], 1, rng);
    dec_.emplace_back("dec." + std::to_string(k + 1), ch[0], 1, 1, rng);
    enc_act_.resize(enc_.size());
    dec_act_.resize(dec_.size());
  }

  nn::Tensor<T> encode(const nn::Tensor<T> &x) {
    nn::Tensor<T> h = x;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      h = enc_[i].forward(h);
      if (i + 1 < enc_.size())
        h = enc_act_[i].forward(h);
    }
    return h;
  }

  nn::Tensor<T> encode_backward(const nn::Tensor<T> &dz) {
    nn::Tensor<T> g = dz;
    for (std::size_t i = enc_.size(); i-- > 0;) {
      if (i + 1 < enc_.size())
        g = enc_act_[i].backward(g);
      g = enc_[i].backward(g);
    }
    return g;
  }

  nn::Tensor<T> decode(const nn::Tensor<T> &z) {
    nn::Tensor<T> h = z;
    const std::size_t last = dec_.size() - 1;
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      if (i >= 1 && i < last)
        h = nn::upsample2x(h);
      h = dec_[i].forward(h);
      if (i < last)
        h = dec_act_[i].forward(h);
    }
    return h;
  }

  nn::Tensor<T> decode_backward(const nn::Tensor<T> &dy) {
    nn::Tensor<T> g = dy;
    const std::size_t last = dec_.size() - 1;
    for (std::size_t i = dec_.size(); i-- > 0;) {
      if (i < last)
        g = dec_act_[i].backward(g);
      g = dec_[i].backward(g);
      if (i >= 1 && i < last)
        g = nn::upsample2x_backward(g);
    }
    return g;
  }

  void collect(std::vector<nn::Param<T> *> &out) {
    for (auto &c : enc_)
      c.collect(out);
    for (auto &c : dec_)
      c.collect(out);
  }

private:
  std::vector<nn::Conv2d<T>> enc_, dec_;
  std::vector<nn::SiLU<T>> enc_act_, dec_act_;
};

/// Small U-Net style noise predictor at latent resolution.
///
/// Input channels: noisy latent, masked-image latent f, condition channel,
/// region mask. One residual block at full latent resolution, one level at
/// half resolution, a skip connection back up. The timestep embedding is added
/// as a per-channel bias at both levels.
template <typename T> class Denoiser {
public:
  Denoiser() = default;
  Denoiser(const ModelConfig &cfg, Rng &rng)
      : latent_channels_(cfg.latent_channels), time_dim_(cfg.time_dim) {
    const int C = cfg.denoiser_channels;
    const int in = 2 * cfg.latent_channels + 2;
    t1_ = nn::Linear<T>("den.time.0", cfg.time_dim, 2 * C, rng);
    t2_ = nn::Linear<T>("den.time.1", 2 * C, C, rng);
    conv_in_ = nn::Conv2d<T>("den.in", in, C, 1, rng);
    conv1_ = nn::Conv2d<T>("den.res.0", C, C, 1, rng);
    conv2_ = nn::Conv2d<T>("den.res.1", C, C, 1, rng);
    down_ = nn::Conv2d<T>("den.down", C, C, 2, rng);
    mid_ = nn::Conv2d<T>("den.mid", C, C, 1, rng);
    up_ = nn::Conv2d<T>("den.up", 2 * C, C, 1, rng);
    out_ = nn::Conv2d<T>("den.out", C, cfg.latent_channels, 1, rng);
  }

  int input_channels() const { return 2 * latent_channels_ + 2; }

  nn::Tensor<T> forward(const nn::Tensor<T> &x, const std::vector<int> &steps) {
    auto emb = t2_.forward(ta_.forward(t1_.forward(nn::timestep_embedding<T>(steps, time_dim_))));
    auto h0 = conv_in_.forward(x);
    auto h1 = conv1_.forward(a1_.forward(h0));
    nn::add_channel_bias(h1, emb);
    auto h2 = conv2_.forward(a2_.forward(h1));
    nn::add_inplace(h2, h0);                 // r = h0 + h2
    auto d = down_.forward(a3_.forward(h2)); // half resolution
    auto m = mid_.forward(a4_.forward(d));
    nn::add_channel_bias(m, emb);
    auto u = nn::upsample2x(a5_.forward(m));
    skip_channels_ = u.c;
    auto o = up_.forward(nn::concat_channels(u, h2));
    return out_.forward(a6_.forward(o));
  }

  void backward(const nn::Tensor<T> &dy) {
    auto g = a6_.backward(out_.backward(dy));
    auto [du, dr_skip] = nn::split_channels(up_.backward(g), skip_channels_);
    auto dm = a5_.backward(nn::upsample2x_backward(du));
    auto demb = nn::channel_bias_backward(dm);
    auto dd = a4_.backward(mid_.backward(dm));
    auto dr = a3_.backward(down_.backward(dd));
    nn::add_inplace(dr, dr_skip);
    // r = h0 + conv2(a2(h1))
    auto dh1 = a2_.backward(conv2_.backward(dr));
    nn::add_inplace(demb, nn::channel_bias_backward(dh1));
    auto dh0 = a1_.backward(conv1_.backward(dh1));
    nn::add_inplace(dh0, dr);
    conv_in_.backward(dh0);
    t1_.backward(ta_.backward(t2_.backward(demb)));
  }

  void collect(std::vector<nn::Param<T> *> &out) {
    t1_.collect(out);
    t2_.collect(out);
    conv_in_.collect(out);
    conv1_.collect(out);
    conv2_.collect(out);
    down_.collect(out);
    mid_.collect(out);
    up_.collect(out);
    out_.collect(out);
  }

private:
  int latent_channels_ = 0, time_dim_ = 0, skip_channels_ = 0;
  nn::Linear<T> t1_, t2_;
  nn::SiLU<T> ta_, a1_, a2_, a3_, a4_, a5_, a6_;
  nn::Conv2d<T> conv_in_, conv1_, conv2_, down_, mid_, up_, out_;
};

// ---------------------------------------------------------------------------
// Model

/// Autoencoder + denoiser + schedule. Latents seen by the denoiser are the
/// encoder output multiplied by latent_scale (unit variance on training data).
struct DiffusionModel {
  ModelConfig config;
  Autoencoder<float> autoencoder;
  Denoiser<float> denoiser;
  NoiseSchedule schedule;
  float latent_scale = 1.0f;
  bool autoencoder_trained = false;
  bool denoiser_trained = false;

  DiffusionModel() : DiffusionModel(ModelConfig{}, 0) {}
  DiffusionModel(const ModelConfig &cfg, std::uint64_t seed)
      : config(cfg), schedule(cfg.train_steps, cfg.beta_start, cfg.beta_end) {
    cfg.check();
    Rng rng(seed);
    autoencoder = Autoencoder<float>(cfg, rng);
    denoiser = Denoiser<float>(cfg, rng);
  }

  std::vector<nn::Param<float> *> autoencoder_params() {
    std::vector<nn::Param<float> *> out;
    autoencoder.collect(out);
    return out;
  }
  std::vector<nn::Param<float> *> denoiser_params() {
    std::vector<nn::Param<float> *> out;
    denoiser.collect(out);
    return out;
  }
  std::vector<nn::Param<float> *> all_params() {
    auto out = autoencoder_params();
    auto d = denoiser_params();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }
};

/// Replaces the denoiser with a freshly initialised one for condition `c`,
/// keeping the trained autoencoder.
inline void reset_denoiser(DiffusionModel &m, Condition c, std::uint64_t seed) {
  m.config.condition = c;
  Rng rng(seed);
  m.denoiser = Denoiser<float>(m.config, rng);
  m.denoiser_trained = false;
}

// Image <-> tensor conversion: pixels map linearly onto [-1, 1].

inline nn::Tensor<float> images_to_tensor(std::span<const GrayImage *const> images) {
  if (images.empty())
    throw Error("no images");
  const int h = images[0]->height, w = images[0]->width;
  nn::Tensor<float> t(1, static_cast<int>(images.size()), h, w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->width != w || images[n]->height != h)
      throw Error("all images must share one resolution");
    for (std::size_t i = 0; i < images[n]->pixels.size(); ++i)
      t.data[n * images[n]->pixels.size() + i] = images[n]->pixels[i] / 127.5f - 1.0f;
  }
  return t;
}

inline GrayImage tensor_to_image(const nn::Tensor<float> &t, int n) {
  GrayImage img(t.w, t.h);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x) {
      const double v = (static_cast<double>(t.at(0, n, y, x)) + 1.0) * 127.5;
      img.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return img;
}

/// Encoded, scaled latent of each image, (latent_channels, N, L, L).
inline nn::Tensor<float> encode_images(DiffusionModel &m, std::span<const GrayImage *const> images) {
  auto z = m.autoencoder.encode(images_to_tensor(images));
  for (auto &v : z.data)
    v *= m.latent_scale;
  return z;
}

// ---------------------------------------------------------------------------
// Latent-resolution conditioning

/// Latent cells (row-major, L x L) overlapping a pixel rectangle.
inline std::vector<float> region_cells(const PixelRect &rect, int latent_size, int downsample) {
  std::vector<float> out(static_cast<std::size_t>(latent_size) * latent_size, 0.0f);
  for (int i = 0; i < latent_size; ++i)
    for (int j = 0; j < latent_size; ++j) {
      const bool oy = rect.y < (i + 1) * downsample && rect.y + rect.h > i * downsample;
      const bool ox = rect.x < (j + 1) * downsample && rect.x + rect.w > j * downsample;
      if (oy && ox)
        out[static_cast<std::size_t>(i) * latent_size + j] = 1.0f;
    }
  return out;
}

/// Places a rect-sized 0/1 mask on an empty canvas and samples it at each
/// latent cell centre (nearest neighbour).
inline std::vector<float> condition_channel(const GrayImage &mask, const PixelRect &rect,
                                            int latent_size, int downsample) {
  if (mask.width != rect.w || mask.height != rect.h)
    throw Error("condition mask size does not match the placement rectangle");
  std::vector<float> out(static_cast<std::size_t>(latent_size) * latent_size, 0.0f);
  for (int i = 0; i < latent_size; ++i)
    for (int j = 0; j < latent_size; ++j) {
      const int py = i * downsample + downsample / 2, px = j * downsample + downsample / 2;
      if (rect.contains(px, py))
        out[static_cast<std::size_t>(i) * latent_size + j] = mask.at(px - rect.x, py - rect.y) ? 1.0f : 0.0f;
    }
  return out;
}

/// Condition mask for a lesion crop: its Otsu skeleton, or all ones when the
/// crop is flat or the binary-box condition is requested.
inline GrayImage condition_mask(const GrayImage &lesion_crop, Condition c) {
  if (c == Condition::binary_box)
    return binary_box_mask(lesion_crop.width, lesion_crop.height);
  try {
    return extract_skeleton(lesion_crop).mask;
  } catch (const ImageError &) {
    return binary_box_mask(lesion_crop.width, lesion_crop.height);
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  std::size_t min_images = 100;
  int val_draws = 4; // (t, noise) draws per validation example, denoiser only
  std::function<void(int epoch, double train_loss, double val_loss)> on_epoch;
};

struct TrainReport {
  std::vector<double> train_loss;      // per epoch
  std::vector<double> validation_loss; // index 0 = before training
  int best_epoch = 0;
  bool improved() const { return best_epoch > 0; }
};

namespace detail {

inline std::vector<std::size_t> shuffled(std::size_t n, Rng &rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
split_train_val(std::size_t n, double val_fraction, Rng &rng) {
  auto idx = shuffled(n, rng);
  std::size_t nval = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n * val_fraction)));
  if (n < 2)
    throw Error("need at least 2 examples to split train/validation");
  nval = std::min(nval, n - 1);
  std::vector<std::size_t> val(idx.end() - static_cast<std::ptrdiff_t>(nval), idx.end());
  idx.resize(n - nval);
  return {idx, val};
}

} // namespace detail

/// Trains the autoencoder on full images with pixel MSE; keeps the parameters
/// with the lowest validation MSE and then fits latent_scale.
inline TrainReport train_autoencoder(DiffusionModel &m, const std::vector<GrayImage> &images,
                                     const TrainConfig &cfg) {
  if (images.size() < cfg.min_images)
    throw Error("autoencoder training needs at least " + std::to_string(cfg.min_images) +
                " images, got " + std::to_string(images.size()));
  for (const auto &img : images)
    if (img.width != m.config.image_size || img.height != m.config.image_size)
      throw Error("training image size does not match model image_size");
  Rng rng(cfg.seed);
  auto [train, val] = detail::split_train_val(images.size(), cfg.val_fraction, rng);
  auto params = m.autoencoder_params();
  nn::Adam<float> opt(params, {.lr = cfg.lr});

  auto batch_of = [&](std::span<const std::size_t> ids) {
    std::vector<const GrayImage *> ptrs;
    for (auto i : ids)
      ptrs.push_back(&images[i]);
    return images_to_tensor(ptrs);
  };
  auto validate = [&] {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < val.size(); s += cfg.batch_size) {
      const auto ids = std::span(val).subspan(s, std::min<std::size_t>(cfg.batch_size, val.size() - s));
      auto x = batch_of(ids);
      auto y = m.autoencoder.decode(m.autoencoder.encode(x));
      for (std::size_t i = 0; i < y.size(); ++i)
        sum += static_cast<double>(y.data[i] - x.data[i]) * (y.data[i] - x.data[i]);
      count += y.size();
    }
    return sum / static_cast<double>(count);
  };

  TrainReport report;
  report.validation_loss.push_back(validate());
  double best = report.validation_loss[0];
  auto best_params = nn::snapshot(params);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = detail::shuffled(train.size(), rng);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<std::size_t> ids;
      for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k)
        ids.push_back(train[order[k]]);
      auto x = batch_of(ids);
      opt.zero_grad();
      auto y = m.autoencoder.decode(m.autoencoder.encode(x));
      nn::Tensor<float> dy(y.c, y.n, y.h, y.w);
      double loss = 0;
      const float scale = 2.0f / static_cast<float>(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) {
        const float d = y.data[i] - x.data[i];
        loss += static_cast<double>(d) * d;
        dy.data[i] = scale * d;
      }
      m.autoencoder.encode_backward(m.autoencoder.decode_backward(dy));
      opt.step();
      epoch_loss += loss / static_cast<double>(y.size());
      ++batches;
    }
    report.train_loss.push_back(epoch_loss / std::max<std::size_t>(batches, 1));
    const double v = validate();
    report.validation_loss.push_back(v);
    if (v < best) {
      best = v;
      report.best_epoch = epoch;
      best_params = nn::snapshot(params);
    }
    if (cfg.on_epoch)
      cfg.on_epoch(epoch, report.train_loss.back(), v);
  }
  if (!report.improved())
    std::clog << "warning: autoencoder validation loss never improved on initialisation\n";
  nn::restore(params, best_params);

  // latent_scale = 1 / std of training latents
  m.latent_scale = 1.0f;
  double sum = 0, sq = 0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < train.size(); s += cfg.batch_size) {
    const auto ids = std::span(train).subspan(s, std::min<std::size_t>(cfg.batch_size, train.size() - s));
    auto z = m.autoencoder.encode(batch_of(ids));
    for (auto v : z.data) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    count += z.size();
  }
  const double mean = sum / count;
  const double var = sq / count - mean * mean;
  m.latent_scale = var > 1e-12 ? static_cast<float>(1.0 / std::sqrt(var)) : 1.0f;
  m.autoencoder_trained = true;
  return report;
}

/// One real lesion instance used for denoiser training.
struct LesionExample {
  GrayImage image;
  BoundingBox lesion;
};

inline std::vector<LesionExample> lesion_examples(const Dataset &ds, const ImageLoader &load) {
  std::vector<LesionExample> out;
  for (const auto &f : ds.frames()) {
    if (f.is_healthy())
      continue;
    GrayImage img = load(f.image);
    for (const auto &b : f.boxes_with(Label::lesion))
      out.push_back({img, b});
  }
  return out;
}

/// Everything the denoiser sees for one example, at latent resolution.
struct LatentConditioning {
  std::vector<float> z0;        // (C, L, L) clean scaled latent
  std::vector<float> f;         // (C, L, L) scaled latent of the masked image
  std::vector<float> condition; // (L, L)
  std::vector<float> region;    // (L, L)
};

inline LatentConditioning make_conditioning(DiffusionModel &m, const GrayImage &image,
                                            const PixelRect &rect, const GrayImage &mask) {
  const int L = m.config.latent_size();
  const GrayImage masked = mask_image(image, rect);
  const GrayImage *imgs[2] = {&image, &masked};
  auto z = encode_images(m, imgs);
  const std::size_t plane = static_cast<std::size_t>(L) * L;
  LatentConditioning c;
  c.z0.resize(z.c * plane);
  c.f.resize(z.c * plane);
  for (int ch = 0; ch < z.c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) {
      c.z0[ch * plane + i] = z.data[(static_cast<std::size_t>(ch) * 2 + 0) * plane + i];
      c.f[ch * plane + i] = z.data[(static_cast<std::size_t>(ch) * 2 + 1) * plane + i];
    }
  c.condition = condition_channel(mask, rect, L, m.config.downsample);
  c.region = region_cells(rect, L, m.config.downsample);
  return c;
}

namespace detail {

/// Assembles denoiser input (2C + 2, N, L, L) from noisy latents and conditioning.
inline nn::Tensor<float> denoiser_input(const std::vector<const LatentConditioning *> &conds,
                                        const std::vector<std::vector<float>> &noisy, int C, int L) {
  const int N = static_cast<int>(conds.size());
  const std::size_t plane = static_cast<std::size_t>(L) * L;
  nn::Tensor<float> x(2 * C + 2, N, L, L);
  for (int n = 0; n < N; ++n) {
    for (int ch = 0; ch < C; ++ch) {
      std::copy_n(&noisy[n][ch * plane], plane, &x.data[(static_cast<std::size_t>(ch) * N + n) * plane]);
      std::copy_n(&conds[n]->f[ch * plane], plane, &x.data[(static_cast<std::size_t>(C + ch) * N + n) * plane]);
    }
    std::copy_n(conds[n]->condition.data(), plane, &x.data[(static_cast<std::size_t>(2 * C) * N + n) * plane]);
    std::copy_n(conds[n]->region.data(), plane, &x.data[(static_cast<std::size_t>(2 * C + 1) * N + n) * plane]);
  }
  return x;
}

} // namespace detail

/// Foreground-masked noise MSE: mean over latent cells inside the lesion
/// region (all channels) of (pred - target)^2. Also fills the gradient.
inline double masked_mse(const nn::Tensor<float> &pred, const nn::Tensor<float> &target,
                         const std::vector<const LatentConditioning *> &conds,
                         nn::Tensor<float> *grad = nullptr) {
  const std::size_t plane = static_cast<std::size_t>(pred.h) * pred.w;
  double count = 0;
  for (const auto *c : conds)
    for (auto r : c->region)
      count += r;
  count *= pred.c;
  if (count == 0)
    throw Error("foreground mask covers no latent cells");
  if (grad)
    *grad = nn::Tensor<float>(pred.c, pred.n, pred.h, pred.w);
  double loss = 0;
  for (int ch = 0; ch < pred.c; ++ch)
    for (int n = 0; n < pred.n; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (static_cast<std::size_t>(ch) * pred.n + n) * plane + i;
        if (conds[n]->region[i] == 0.0f)
          continue;
        const double d = static_cast<double>(pred.data[k]) - target.data[k];
        loss += d * d;
        if (grad)
          grad->data[k] = static_cast<float>(2.0 * d / count);
      }
  return loss / count;
}

/// Trains the noise predictor on real lesions: each example's lesion box is
/// zeroed to build f, its Otsu skeleton (or box mask) is the condition, and the
/// loss is restricted to latent cells overlapping the box.
inline TrainReport train_denoiser(DiffusionModel &m, const std::vector<LesionExample> &examples,
                                  const TrainConfig &cfg) {
  if (!m.autoencoder_trained)
    throw Error("train the autoencoder before the denoiser");
  if (examples.empty())
    throw Error("no positive frames to train the denoiser on");
  const int C = m.config.latent_channels, L = m.config.latent_size();
  const std::size_t numel = static_cast<std::size_t>(C) * L * L;

  std::vector<LatentConditioning> conds;
  conds.reserve(examples.size());
  for (const auto &ex : examples) {
    if (ex.image.width != m.config.image_size || ex.image.height != m.config.image_size)
      throw Error("training image size does not match model image_size");
    const auto rect = rasterize(ex.lesion, ex.image.width, ex.image.height);
    conds.push_back(make_conditioning(m, ex.image, rect, condition_mask(crop(ex.image, rect), m.config.condition)));
  }

  Rng rng(cfg.seed);
  auto [train, val] = detail::split_train_val(conds.size(), cfg.val_fraction, rng);

  // Fixed validation draws so epochs are comparable.
  struct Draw {
    std::size_t example;
    int t;
    std::vector<float> noise;
  };
  std::vector<Draw> val_draws;
  {
    Rng vr(child_seed(cfg.seed, 0x76616c));
    for (auto e : val)
      for (int k = 0; k < cfg.val_draws; ++k) {
        Draw d{e, 1 + static_cast<int>(vr.below(m.schedule.steps())), std::vector<float>(numel)};
        for (auto &v : d.noise)
          v = static_cast<float>(vr.normal());
        val_draws.push_back(std::move(d));
      }
  }

  auto run_batch = [&](const std::vector<const Draw *> &draws, bool train_step) {
    std::vector<const LatentConditioning *> cs;
    std::vector<std::vector<float>> noisy;
    std::vector<int> steps;
    nn::Tensor<float> target(C, static_cast<int>(draws.size()), L, L);
    const std::size_t plane = static_cast<std::size_t>(L) * L;
    for (std::size_t n = 0; n < draws.size(); ++n) {
      const auto &c = conds[draws[n]->example];
      cs.push_back(&c);
      noisy.push_back(forward_noising<float>(c.z0, draws[n]->t, draws[n]->noise, m.schedule));
      steps.push_back(draws[n]->t);
      for (int ch = 0; ch < C; ++ch)
        std::copy_n(&draws[n]->noise[ch * plane], plane,
                    &target.data[(static_cast<std::size_t>(ch) * draws.size() + n) * plane]);
    }
    auto pred = m.denoiser.forward(detail::denoiser_input(cs, noisy, C, L), steps);
    nn::Tensor<float> grad;
    const double loss = masked_mse(pred, target, cs, train_step ? &grad : nullptr);
    if (train_step)
      m.denoiser.backward(grad);
    return loss;
  };

  auto validate = [&] {
    double sum = 0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < val_draws.size(); s += cfg.batch_size) {
      std::vector<const Draw *> ds;
      for (std::size_t k = s; k < std::min(val_draws.size(), s + cfg.batch_size); ++k)
        ds.push_back(&val_draws[k]);
      sum += run_batch(ds, false) * ds.size();
      batches += ds.size();
    }
    return sum / static_cast<double>(batches);
  };

  auto params = m.denoiser_params();
  nn::Adam<float> opt(params, {.lr = cfg.lr});
  TrainReport report;
  report.validation_loss.push_back(validate());
  double best = report.validation_loss[0];
  auto best_params = nn::snapshot(params);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = detail::shuffled(train.size(), rng);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<Draw> draws;
      for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k) {
        Draw d{train[order[k]], 1 + static_cast<int>(rng.below(m.schedule.steps())), std::vector<float>(numel)};
        for (auto &v : d.noise)
          v = static_cast<float>(rng.normal());
        draws.push_back(std::move(d));
      }
      std::vector<const Draw *> ptrs;
      for (const auto &d : draws)
        ptrs.push_back(&d);
      opt.zero_grad();
      epoch_loss += run_batch(ptrs, true);
      opt.step();
      ++batches;
    }
    report.train_loss.push_back(epoch_loss / std::max<std::size_t>(batches, 1));
    const double v = validate();
    report.validation_loss.push_back(v);
    if (v < best) {
      best = v;
      report.best_epoch = epoch;
      best_params = nn::snapshot(params);
    }
    if (cfg.on_epoch)
      cfg.on_epoch(epoch, report.train_loss.back(), v);
  }
  if (!report.improved())
    std::clog << "warning: denoiser validation loss never improved on initialisation\n";
  nn::restore(params, best_params);
  m.denoiser_trained = true;
  return report;
}

// ---------------------------------------------------------------------------
// Generation

struct GenerationConfig {
  int inference_steps = 150;
  std::uint64_t seed = 0;
};

/// Inpaints a lesion into `healthy` inside placement.pixel_rect.
///
/// The box-region latent starts from pure noise; at every reverse step the
/// cells outside the region are reset to the forward-noised encoding of the
/// healthy image (replacement inpainting). After decoding, pixels outside
/// pixel_rect are copied verbatim from `healthy`.
inline GrayImage generate(DiffusionModel &m, const GrayImage &healthy, const Placement &placement,
                          const GrayImage &condition, const GenerationConfig &gen) {
  if (!m.autoencoder_trained || !m.denoiser_trained)
    throw Error("model is not trained");
  if (healthy.width != m.config.image_size || healthy.height != m.config.image_size)
    throw Error("image size does not match model image_size");
  const auto &rect = placement.pixel_rect;
  if (condition.width != rect.w || condition.height != rect.h)
    throw Error("skeleton size does not match the placement rectangle");
  if (gen.inference_steps < 1 || gen.inference_steps > m.schedule.steps())
    throw Error("inference_steps must lie in [1, T]");

  const int C = m.config.latent_channels, L = m.config.latent_size();
  const std::size_t plane = static_cast<std::size_t>(L) * L;
  const auto cond = make_conditioning(m, healthy, rect, condition);

  Rng rng(gen.seed);
  std::vector<double> z(cond.z0.size());
  for (auto &v : z)
    v = rng.normal();
  auto outside = [&](std::size_t k) { return cond.region[k % plane] == 0.0f; };
  auto project = [&](std::vector<double> &zz, int t) {
    const double a = std::sqrt(m.schedule.alpha_bar(t)), b = std::sqrt(1.0 - m.schedule.alpha_bar(t));
    for (std::size_t k = 0; k < zz.size(); ++k) {
      const double n = t > 0 ? rng.normal() : 0.0;
      if (outside(k))
        zz[k] = a * cond.z0[k] + b * n;
    }
  };
  project(z, m.schedule.steps());

  const std::vector<const LatentConditioning *> cs{&cond};
  auto eps = [&](const std::vector<double> &zz, int t) {
    std::vector<std::vector<float>> noisy{std::vector<float>(zz.begin(), zz.end())};
    auto pred = m.denoiser.forward(detail::denoiser_input(cs, noisy, C, L), {t});
    return std::vector<double>(pred.data.begin(), pred.data.end());
  };
  z = reverse_process(m.schedule, gen.inference_steps, std::move(z), eps, project, rng);

  nn::Tensor<float> zt(C, 1, L, L);
  for (std::size_t k = 0; k < z.size(); ++k)
    zt.data[k] = static_cast<float>(z[k] / m.latent_scale);
  const GrayImage decoded = tensor_to_image(m.autoencoder.decode(zt), 0);

  GrayImage out = healthy;
  for (int y = rect.y; y < rect.y + rect.h; ++y)
    for (int x = rect.x; x < rect.x + rect.w; ++x)
      out.at(x, y) = decoded.at(x, y);
  return out;
}

/// Copy-paste baseline: the foreground crop is resized (bilinear) to the
/// placement rectangle and written over it.
inline GrayImage mask_and_paste(const GrayImage &healthy, const Placement &placement,
                                const GrayImage &foreground) {
  const auto &rect = placement.pixel_rect;
  if (rect.x < 0 || rect.y < 0 || rect.x + rect.w > healthy.width || rect.y + rect.h > healthy.height)
    throw Error("placement does not fit the image");
  const GrayImage patch = resize_bilinear(foreground, rect.w, rect.h);
  if (patch.width != rect.w || patch.height != rect.h)
    throw Error("internal error: resized patch does not match placement");
  GrayImage out = healthy;
  for (int y = 0; y < rect.h; ++y)
    for (int x = 0; x < rect.w; ++x)
      out.at(rect.x + x, rect.y + y) = patch.at(x, y);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint
//
//   "LSMD" | u16 version
//   | i32 image_size, downsample, latent_channels, ae_channels,
//         denoiser_channels, time_dim, train_steps
//   | f64 beta_start, beta_end | u8 condition
//   | f32 latent_scale | u8 autoencoder_trained | u8 denoiser_trained
//   | u32 tensor count
//   | per tensor: string name | u32 ndim | u32 dims[ndim] | f32 values
//   | u32 CRC-32

inline constexpr std::uint16_t checkpoint_version = 1;

inline std::vector<std::uint8_t> encode_checkpoint(DiffusionModel &m) {
  ByteWriter w;
  w.put_raw("LSMD", 4);
  w.put(checkpoint_version);
  const auto &c = m.config;
  for (int v : {c.image_size, c.downsample, c.latent_channels, c.ae_channels, c.denoiser_channels,
                c.time_dim, c.train_steps})
    w.put(static_cast<std::int32_t>(v));
  w.put(c.beta_start);
  w.put(c.beta_end);
  w.put(static_cast<std::uint8_t>(c.condition));
  w.put(m.latent_scale);
  w.put(static_cast<std::uint8_t>(m.autoencoder_trained));
  w.put(static_cast<std::uint8_t>(m.denoiser_trained));
  const auto params = m.all_params();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto *p : params) {
    w.put_string(p->name);
    w.put(static_cast<std::uint32_t>(p->shape.size()));
    for (int d : p->shape)
      w.put(static_cast<std::uint32_t>(d));
    w.put_raw(p->value.data(), p->value.size() * sizeof(float));
  }
  return std::move(w).finish_with_crc();
}

inline DiffusionModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(open_framed(bytes, "LSMD", checkpoint_version, "checkpoint"));
  ModelConfig c;
  for (int *v : {&c.image_size, &c.downsample, &c.latent_channels, &c.ae_channels,
                 &c.denoiser_channels, &c.time_dim, &c.train_steps})
    *v = r.get<std::int32_t>();
  c.beta_start = r.get<double>();
  c.beta_end = r.get<double>();
  const auto cond = r.get<std::uint8_t>();
  if (cond > 1)
    throw FormatError("checkpoint: unknown condition mode");
  c.condition = static_cast<Condition>(cond);
  DiffusionModel m(c, 0);
  m.latent_scale = r.get<float>();
  m.autoencoder_trained = r.get<std::uint8_t>() != 0;
  m.denoiser_trained = r.get<std::uint8_t>() != 0;
  auto params = m.all_params();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size())
    throw FormatError("checkpoint: tensor count does not match the configured architecture");
  for (auto *p : params) {
    const auto name = r.get_string();
    if (name != p->name)
      throw FormatError("checkpoint: expected tensor " + p->name + ", found " + name);
    const auto ndim = r.get<std::uint32_t>();
    if (ndim != p->shape.size())
      throw FormatError("checkpoint: rank mismatch for " + name);
    for (int d : p->shape)
      if (r.get<std::uint32_t>() != static_cast<std::uint32_t>(d))
        throw FormatError("checkpoint: shape mismatch for " + name);
    auto raw = r.take(p->value.size() * sizeof(float));
    std::memcpy(p->value.data(), raw.data(), raw.size());
  }
  if (r.remaining() != 0)
    throw FormatError("checkpoint: trailing bytes before checksum");
  return m;
}

inline void save_checkpoint(DiffusionModel &m, const std::filesystem::path &path) {
  write_file_atomic(path, encode_checkpoint(m));
}

inline DiffusionModel load_checkpoint(const std::filesystem::path &path) {
  return decode_checkpoint(read_file_bytes(path));
}

} // namespace lesionsynth
