#pragma once

// Minimal CPU network building blocks with hand-written backward passes.
//
// Activations are stored channel-major: (C, N, H, W). A conv layer's im2col
// matrix then has one column per (n, y, x) output location, so the GEMM output
// is already in (C, N, H, W) order and channel concatenation is a row append.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lesionsynth/error.hpp"
#include "lesionsynth/random.hpp"

namespace lesionsynth::nn {

template <typename T> struct Tensor {
  int c = 0, n = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c_, int n_, int h_, int w_, T fill = T(0))
      : c(c_), n(n_), h(h_), w(w_), data(static_cast<std::size_t>(c_) * n_ * h_ * w_, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(n) * h * w; }
  std::size_t size() const { return data.size(); }
  T &at(int ci, int ni, int y, int x) {
    return data[((static_cast<std::size_t>(ci) * n + ni) * h + y) * w + x];
  }
  T at(int ci, int ni, int y, int x) const {
    return data[((static_cast<std::size_t>(ci) * n + ni) * h + y) * w + x];
  }
  bool same_shape(const Tensor &o) const { return c == o.c && n == o.n && h == o.h && w == o.w; }
};

template <typename T> using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T> using MatMap = Eigen::Map<RowMat<T>>;
template <typename T> using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Trainable tensor with its gradient accumulator.
template <typename T> struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t total = 1;
    for (int d : shape)
      total *= static_cast<std::size_t>(d);
    value.assign(total, T(0));
    grad.assign(total, T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T> void init_uniform(Param<T> &p, int fan_in, Rng &rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto &v : p.value)
    v = static_cast<T>(rng.uniform(-bound, bound));
}

/// Left-to-right sum; Eigen's vectorised reductions depend on buffer alignment.
template <typename T> T row_sum(const T *p, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i)
    s += p[i];
  return s;
}

// ---------------------------------------------------------------------------

/// 3x3 convolution, padding 1, stride 1 or 2.
template <typename T> class Conv2d {
public:
  Conv2d() = default;
  Conv2d(const std::string &name, int in, int out, int stride, Rng &rng)
      : weight(name + ".weight", {out, in, 3, 3}), bias(name + ".bias", {out}), in_(in),
        out_(out), stride_(stride) {
    if (stride != 1 && stride != 2)
      throw Error("conv stride must be 1 or 2");
    init_uniform(weight, in * 9, rng);
    init_uniform(bias, in * 9, rng);
  }

  Tensor<T> forward(const Tensor<T> &x) {
    if (x.c != in_)
      throw Error("conv " + weight.name + ": expected " + std::to_string(in_) + " channels");
    n_ = x.n;
    h_ = x.h;
    w_ = x.w;
    ho_ = (h_ - 1) / stride_ + 1;
    wo_ = (w_ - 1) / stride_ + 1;
    const std::size_t P = static_cast<std::size_t>(n_) * ho_ * wo_;
    cols_.assign(static_cast<std::size_t>(in_) * 9 * P, T(0));
    for (int ci = 0; ci < in_; ++ci)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T *row = &cols_[((static_cast<std::size_t>(ci) * 3 + ky) * 3 + kx) * P];
          for (int ni = 0; ni < n_; ++ni)
            for (int yo = 0; yo < ho_; ++yo) {
              const int yi = yo * stride_ + ky - 1;
              T *dst = row + (static_cast<std::size_t>(ni) * ho_ + yo) * wo_;
              if (yi < 0 || yi >= h_)
                continue;
              const T *src = &x.data[((static_cast<std::size_t>(ci) * n_ + ni) * h_ + yi) * w_];
              for (int xo = 0; xo < wo_; ++xo) {
                const int xi = xo * stride_ + kx - 1;
                if (xi >= 0 && xi < w_)
                  dst[xo] = src[xi];
              }
            }
        }
    Tensor<T> y(out_, n_, ho_, wo_);
    MatMap<T> Y(y.data.data(), out_, static_cast<Eigen::Index>(P));
    ConstMatMap<T> W(weight.value.data(), out_, in_ * 9);
    ConstMatMap<T> C(cols_.data(), in_ * 9, static_cast<Eigen::Index>(P));
    Y.noalias() = W * C;
    for (int o = 0; o < out_; ++o)
      Y.row(o).array() += bias.value[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T> &dy) {
    const std::size_t P = static_cast<std::size_t>(n_) * ho_ * wo_;
    ConstMatMap<T> DY(dy.data.data(), out_, static_cast<Eigen::Index>(P));
    ConstMatMap<T> C(cols_.data(), in_ * 9, static_cast<Eigen::Index>(P));
    MatMap<T> DW(weight.grad.data(), out_, in_ * 9);
    DW.noalias() += DY * C.transpose();
    for (int o = 0; o < out_; ++o)
      bias.grad[o] += row_sum(&dy.data[static_cast<std::size_t>(o) * P], P);
    RowMat<T> dcols = ConstMatMap<T>(weight.value.data(), out_, in_ * 9).transpose() * DY;
    Tensor<T> dx(in_, n_, h_, w_);
    for (int ci = 0; ci < in_; ++ci)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T *row = dcols.data() + ((static_cast<std::size_t>(ci) * 3 + ky) * 3 + kx) * P;
          for (int ni = 0; ni < n_; ++ni)
            for (int yo = 0; yo < ho_; ++yo) {
              const int yi = yo * stride_ + ky - 1;
              if (yi < 0 || yi >= h_)
                continue;
              const T *src = row + (static_cast<std::size_t>(ni) * ho_ + yo) * wo_;
              T *dst = &dx.data[((static_cast<std::size_t>(ci) * n_ + ni) * h_ + yi) * w_];
              for (int xo = 0; xo < wo_; ++xo) {
                const int xi = xo * stride_ + kx - 1;
                if (xi >= 0 && xi < w_)
                  dst[xi] += src[xo];
              }
            }
        }
    return dx;
  }

  void collect(std::vector<Param<T> *> &out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Param<T> weight, bias;

private:
  int in_ = 0, out_ = 0, stride_ = 1;
  int n_ = 0, h_ = 0, w_ = 0, ho_ = 0, wo_ = 0;
  std::vector<T> cols_;
};

/// Fully connected layer over a (features, N, 1, 1) tensor.
template <typename T> class Linear {
public:
  Linear() = default;
  Linear(const std::string &name, int in, int out, Rng &rng)
      : weight(name + ".weight", {out, in}), bias(name + ".bias", {out}), in_(in), out_(out) {
    init_uniform(weight, in, rng);
    init_uniform(bias, in, rng);
  }

  Tensor<T> forward(const Tensor<T> &x) {
    if (x.c != in_ || x.h != 1 || x.w != 1)
      throw Error("linear " + weight.name + ": bad input shape");
    x_ = x;
    Tensor<T> y(out_, x.n, 1, 1);
    MatMap<T> Y(y.data.data(), out_, x.n);
    Y.noalias() = ConstMatMap<T>(weight.value.data(), out_, in_) * ConstMatMap<T>(x.data.data(), in_, x.n);
    for (int o = 0; o < out_; ++o)
      Y.row(o).array() += bias.value[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T> &dy) {
    ConstMatMap<T> DY(dy.data.data(), out_, dy.n);
    MatMap<T>(weight.grad.data(), out_, in_).noalias() +=
        DY * ConstMatMap<T>(x_.data.data(), in_, x_.n).transpose();
    for (int o = 0; o < out_; ++o)
      bias.grad[o] += row_sum(&dy.data[static_cast<std::size_t>(o) * dy.n], static_cast<std::size_t>(dy.n));
    Tensor<T> dx(in_, dy.n, 1, 1);
    MatMap<T>(dx.data.data(), in_, dy.n).noalias() =
        ConstMatMap<T>(weight.value.data(), out_, in_).transpose() * DY;
    return dx;
  }

  void collect(std::vector<Param<T> *> &out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Param<T> weight, bias;

private:
  int in_ = 0, out_ = 0;
  Tensor<T> x_;
};

/// x * sigmoid(x)
template <typename T> class SiLU {
public:
  Tensor<T> forward(const Tensor<T> &x) {
    x_ = x;
    Tensor<T> y = x;
    for (auto &v : y.data)
      v = v / (T(1) + std::exp(-v));
    return y;
  }
  Tensor<T> backward(const Tensor<T> &dy) const {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x_.data[i]));
      dx.data[i] *= s * (T(1) + x_.data[i] * (T(1) - s));
    }
    return dx;
  }

private:
  Tensor<T> x_;
};

template <typename T> Tensor<T> upsample2x(const Tensor<T> &x) {
  Tensor<T> y(x.c, x.n, x.h * 2, x.w * 2);
  for (int c = 0; c < x.c; ++c)
    for (int n = 0; n < x.n; ++n)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx)
          y.at(c, n, yy, xx) = x.at(c, n, yy / 2, xx / 2);
  return y;
}

template <typename T> Tensor<T> upsample2x_backward(const Tensor<T> &dy) {
  Tensor<T> dx(dy.c, dy.n, dy.h / 2, dy.w / 2);
  for (int c = 0; c < dy.c; ++c)
    for (int n = 0; n < dy.n; ++n)
      for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx)
          dx.at(c, n, yy / 2, xx / 2) += dy.at(c, n, yy, xx);
  return dx;
}

/// Channel concatenation; in channel-major layout this is a plain append.
template <typename T> Tensor<T> concat_channels(const Tensor<T> &a, const Tensor<T> &b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w)
    throw Error("concat: shape mismatch");
  Tensor<T> y(a.c + b.c, a.n, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T> &y, int first) {
  Tensor<T> a(first, y.n, y.h, y.w), b(y.c - first, y.n, y.h, y.w);
  std::copy(y.data.begin(), y.data.begin() + static_cast<std::ptrdiff_t>(a.size()), a.data.begin());
  std::copy(y.data.begin() + static_cast<std::ptrdiff_t>(a.size()), y.data.end(), b.data.begin());
  return {std::move(a), std::move(b)};
}

/// y[c, n, :, :] += e[c, n]
template <typename T> void add_channel_bias(Tensor<T> &y, const Tensor<T> &e) {
  const std::size_t hw = static_cast<std::size_t>(y.h) * y.w;
  for (int c = 0; c < y.c; ++c)
    for (int n = 0; n < y.n; ++n) {
      const T b = e.data[static_cast<std::size_t>(c) * e.n + n];
      T *p = &y.data[(static_cast<std::size_t>(c) * y.n + n) * hw];
      for (std::size_t i = 0; i < hw; ++i)
        p[i] += b;
    }
}

template <typename T> Tensor<T> channel_bias_backward(const Tensor<T> &dy) {
  Tensor<T> de(dy.c, dy.n, 1, 1);
  const std::size_t hw = static_cast<std::size_t>(dy.h) * dy.w;
  for (int c = 0; c < dy.c; ++c)
    for (int n = 0; n < dy.n; ++n) {
      const T *p = &dy.data[(static_cast<std::size_t>(c) * dy.n + n) * hw];
      T s = 0;
      for (std::size_t i = 0; i < hw; ++i)
        s += p[i];
      de.data[static_cast<std::size_t>(c) * dy.n + n] = s;
    }
  return de;
}

template <typename T> void add_inplace(Tensor<T> &a, const Tensor<T> &b) {
  for (std::size_t i = 0; i < a.data.size(); ++i)
    a.data[i] += b.data[i];
}

/// Sinusoidal embedding of integer steps, (dim, N, 1, 1).
template <typename T> Tensor<T> timestep_embedding(const std::vector<int> &steps, int dim) {
  Tensor<T> e(dim, static_cast<int>(steps.size()), 1, 1);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    for (std::size_t n = 0; n < steps.size(); ++n) {
      e.at(i, static_cast<int>(n), 0, 0) = static_cast<T>(std::sin(steps[n] * freq));
      e.at(i + half, static_cast<int>(n), 0, 0) = static_cast<T>(std::cos(steps[n] * freq));
    }
  }
  return e;
}

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0; // global gradient-norm clip; <= 0 disables
};

template <typename T> class Adam {
public:
  Adam(std::vector<Param<T> *> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto *p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto *p : params_)
      p->zero_grad();
  }

  void step() {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0) {
      double sq = 0;
      for (auto *p : params_)
        for (auto g : p->grad)
          sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm)
        scale = cfg_.clip_norm / norm;
    }
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto &p = *params_[k];
      auto &m = m_[k];
      auto &v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i] * scale;
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
        p.value[i] -= static_cast<T>(cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps));
      }
    }
  }

private:
  std::vector<Param<T> *> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// Snapshot of parameter values, used to restore the best checkpoint.
template <typename T> std::vector<std::vector<T>> snapshot(const std::vector<Param<T> *> &ps) {
  std::vector<std::vector<T>> out;
  for (auto *p : ps)
    out.push_back(p->value);
  return out;
}

template <typename T>
void restore(const std::vector<Param<T> *> &ps, const std::vector<std::vector<T>> &snap) {
  for (std::size_t i = 0; i < ps.size(); ++i)
    ps[i]->value = snap[i];
}

} // namespace lesionsynth::nn
