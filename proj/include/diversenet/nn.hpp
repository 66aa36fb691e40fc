// SPDX-License-Identifier: Apache-2.0
//
// Minimal NHWC layer kit with hand-written backward passes. Every output
// element is produced by exactly one thread with a fixed summation order, so
// results are bit-identical for any thread count.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "diversenet/rng.hpp"
#include "diversenet/tensor.hpp"

namespace diversenet {

template <typename T>
struct ParamRef {
  Tensor<T>* value;
  Tensor<T>* grad;
};

/// 2-D convolution, input [B,H,W,Ci], weight [Co,kh,kw,Ci], output [B,Ho,Wo,Co].
template <typename T>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel, std::int64_t stride,
         std::int64_t pad, bool has_bias = true)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), pad_(pad),
        has_bias_(has_bias), weight_({out_ch, kernel, kernel, in_ch}), bias_({out_ch}),
        wgrad_({out_ch, kernel, kernel, in_ch}), bgrad_({out_ch}) {}

  /// Fan-in scaled normal init (He), bias zero.
  void init(Rng& rng) {
    const double fan_in = static_cast<double>(kernel_ * kernel_ * in_ch_);
    const double stddev = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < weight_.numel(); ++i)
      weight_[i] = static_cast<T>(stddev * rng.next_normal());
    bias_.fill(T{0});
  }

  bool has_bias() const { return has_bias_; }

  Tensor<T> forward(const Tensor<T>& in) {
    check_input(in);
    input_ = in;
    refresh_transposed_weights();
    const std::int64_t b_n = in.dim(0), h_in = in.dim(1), w_in = in.dim(2);
    const std::int64_t h_out = out_extent(h_in), w_out = out_extent(w_in);
    Tensor<T> out({b_n, h_out, w_out, out_ch_});
    const T* in_p = in.data();
    const T* wt_p = wt_.data();
    const T* b_p = bias_.data();
    T* out_p = out.data();
    const std::int64_t in_row = w_in * in_ch_, in_img = h_in * in_row;
    const std::int64_t out_row = w_out * out_ch_, out_img = h_out * out_row;
    const std::int64_t wt_ky = kernel_ * in_ch_ * out_ch_;
    // Inner loop runs over output channels: independent accumulator lanes
    // that vectorize, with the input tap broadcast against a contiguous
    // weight row of the channel-transposed copy.
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < b_n; ++b) {
      for (std::int64_t y = 0; y < h_out; ++y) {
        const std::int64_t y0 = y * stride_ - pad_;
        const std::int64_t ky_lo = std::max<std::int64_t>(0, -y0);
        const std::int64_t ky_hi = std::min(kernel_, h_in - y0);
        for (std::int64_t x = 0; x < w_out; ++x) {
          const std::int64_t x0 = x * stride_ - pad_;
          const std::int64_t kx_lo = std::max<std::int64_t>(0, -x0);
          const std::int64_t kx_hi = std::min(kernel_, w_in - x0);
          T* dst = out_p + b * out_img + y * out_row + x * out_ch_;
          for (std::int64_t co = 0; co < out_ch_; ++co) dst[co] = b_p[co];
          for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
            const T* in_base = in_p + b * in_img + (y0 + ky) * in_row + (x0 + kx_lo) * in_ch_;
            const T* wt_base = wt_p + ky * wt_ky + kx_lo * in_ch_ * out_ch_;
            const std::int64_t taps = (kx_hi - kx_lo) * in_ch_;
            for (std::int64_t t = 0; t < taps; ++t) {
              const T v = in_base[t];
              const T* w_row = wt_base + t * out_ch_;
              for (std::int64_t co = 0; co < out_ch_; ++co) dst[co] += v * w_row[co];
            }
          }
        }
      }
    }
    return out;
  }

  /// Accumulates weight/bias gradients, returns gradient w.r.t. the input.
  /// Pass need_input_grad = false for a first layer whose input gradient
  /// nobody consumes.
  Tensor<T> backward(const Tensor<T>& gout, bool need_input_grad = true) {
    const Tensor<T>& in = input_;
    const std::int64_t b_n = in.dim(0), h_in = in.dim(1), w_in = in.dim(2);
    const std::int64_t h_out = gout.dim(1), w_out = gout.dim(2);
    const T* in_p = in.data();
    const T* go_p = gout.data();
    const std::int64_t in_row = w_in * in_ch_, in_img = h_in * in_row;
    const std::int64_t out_row = w_out * out_ch_, out_img = h_out * out_row;
    const std::int64_t w_tap = in_ch_, w_ky = kernel_ * in_ch_, w_co = kernel_ * w_ky;

    // Bias gradient, fixed order.
    if (has_bias_) {
      T* bg = bgrad_.data();
      for (std::int64_t b = 0; b < b_n; ++b)
        for (std::int64_t y = 0; y < h_out; ++y)
          for (std::int64_t x = 0; x < w_out; ++x) {
            const T* g = go_p + b * out_img + y * out_row + x * out_ch_;
            for (std::int64_t co = 0; co < out_ch_; ++co) bg[co] += g[co];
          }
    }

    // Weight gradient: threads own disjoint output-channel ranges.
    {
      T* wg = wgrad_.data();
#pragma omp parallel for schedule(static)
      for (std::int64_t co = 0; co < out_ch_; ++co) {
        T* wg_base = wg + co * w_co;
        for (std::int64_t b = 0; b < b_n; ++b)
          for (std::int64_t y = 0; y < h_out; ++y) {
            const std::int64_t y0 = y * stride_ - pad_;
            const std::int64_t ky_lo = std::max<std::int64_t>(0, -y0);
            const std::int64_t ky_hi = std::min(kernel_, h_in - y0);
            for (std::int64_t x = 0; x < w_out; ++x) {
              const T g = go_p[b * out_img + y * out_row + x * out_ch_ + co];
              if (g == T{0}) continue;
              const std::int64_t x0 = x * stride_ - pad_;
              const std::int64_t kx_lo = std::max<std::int64_t>(0, -x0);
              const std::int64_t kx_hi = std::min(kernel_, w_in - x0);
              for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
                const T* in_base = in_p + b * in_img + (y0 + ky) * in_row + (x0 + kx_lo) * in_ch_;
                T* wg_row = wg_base + ky * w_ky + kx_lo * w_tap;
                const std::int64_t span = (kx_hi - kx_lo) * in_ch_;
                for (std::int64_t i = 0; i < span; ++i) wg_row[i] += g * in_base[i];
              }
            }
          }
      }
    }

    if (!need_input_grad) return Tensor<T>{};

    // Input gradient: per output channel, a scaled copy of the weight row
    // accumulates into the contiguous input-gradient patch. Threads own
    // disjoint images.
    Tensor<T> gin(in.dims(), T{0});
    T* gi_p = gin.data();
    const T* w_p = weight_.data();
    const std::int64_t w_ky2 = kernel_ * in_ch_, w_co2 = kernel_ * w_ky2;
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < b_n; ++b) {
      for (std::int64_t y = 0; y < h_out; ++y) {
        const std::int64_t y0 = y * stride_ - pad_;
        const std::int64_t ky_lo = std::max<std::int64_t>(0, -y0);
        const std::int64_t ky_hi = std::min(kernel_, h_in - y0);
        for (std::int64_t x = 0; x < w_out; ++x) {
          const std::int64_t x0 = x * stride_ - pad_;
          const std::int64_t kx_lo = std::max<std::int64_t>(0, -x0);
          const std::int64_t kx_hi = std::min(kernel_, w_in - x0);
          const T* g = go_p + b * out_img + y * out_row + x * out_ch_;
          const std::int64_t span = (kx_hi - kx_lo) * in_ch_;
          for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
            T* gi_row = gi_p + b * in_img + (y0 + ky) * in_row + (x0 + kx_lo) * in_ch_;
            for (std::int64_t co = 0; co < out_ch_; ++co) {
              const T gv = g[co];
              if (gv == T{0}) continue;
              const T* w_row = w_p + co * w_co2 + ky * w_ky2 + kx_lo * in_ch_;
              for (std::int64_t i = 0; i < span; ++i) gi_row[i] += gv * w_row[i];
            }
          }
        }
      }
    }
    return gin;
  }

  /// Keeps a [kh, kw, Ci, Co] copy of the weights for the forward pass.
  void refresh_transposed_weights() {
    if (wt_.numel() != weight_.numel()) wt_ = Tensor<T>({kernel_, kernel_, in_ch_, out_ch_});
    T* wt = wt_.data();
    const T* w = weight_.data();
    for (std::int64_t co = 0; co < out_ch_; ++co)
      for (std::int64_t ky = 0; ky < kernel_; ++ky)
        for (std::int64_t kx = 0; kx < kernel_; ++kx)
          for (std::int64_t ci = 0; ci < in_ch_; ++ci)
            wt[((ky * kernel_ + kx) * in_ch_ + ci) * out_ch_ + co] =
                w[((co * kernel_ + ky) * kernel_ + kx) * in_ch_ + ci];
  }

  void zero_grad() {
    wgrad_.fill(T{0});
    bgrad_.fill(T{0});
  }

  std::vector<ParamRef<T>> params() {
    if (!has_bias_) return {{&weight_, &wgrad_}};
    return {{&weight_, &wgrad_}, {&bias_, &bgrad_}};
  }

  std::int64_t param_count() const {
    return weight_.numel() + (has_bias_ ? bias_.numel() : 0);
  }
  std::int64_t out_channels() const { return out_ch_; }
  std::int64_t out_extent(std::int64_t in_extent) const {
    return (in_extent + 2 * pad_ - kernel_) / stride_ + 1;
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

private:
  void check_input(const Tensor<T>& in) const {
    if (in.rank() != 4 || in.dim(3) != in_ch_)
      throw ShapeError("Conv2d: expected [B,H,W," + std::to_string(in_ch_) + "], got " +
                       shape_str(in.dims()));
  }

  std::int64_t in_ch_ = 0, out_ch_ = 0, kernel_ = 0, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;
  Tensor<T> weight_, bias_, wgrad_, bgrad_;
  Tensor<T> input_;
  Tensor<T> wt_;
};

template <typename T>
class Relu {
public:
  Tensor<T> forward(const Tensor<T>& in) {
    input_ = in;
    Tensor<T> out(in.dims());
    const T* in_p = in.data();
    T* out_p = out.data();
    const std::int64_t n = in.numel();
    for (std::int64_t i = 0; i < n; ++i) out_p[i] = in_p[i] > T{0} ? in_p[i] : T{0};
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) {
    Tensor<T> gin(gout.dims());
    const T* in_p = input_.data();
    const T* go_p = gout.data();
    T* gi_p = gin.data();
    const std::int64_t n = gout.numel();
    for (std::int64_t i = 0; i < n; ++i) gi_p[i] = in_p[i] > T{0} ? go_p[i] : T{0};
    return gin;
  }

private:
  Tensor<T> input_;
};

/// Bilinear resize between arbitrary spatial extents (half-pixel centers).
template <typename T>
class BilinearResize {
public:
  BilinearResize() = default;
  BilinearResize(std::int64_t out_h, std::int64_t out_w) : out_h_(out_h), out_w_(out_w) {}

  Tensor<T> forward(const Tensor<T>& in) {
    in_h_ = in.dim(1);
    in_w_ = in.dim(2);
    const std::int64_t b_n = in.dim(0), ch = in.dim(3);
    build_tables();
    Tensor<T> out({b_n, out_h_, out_w_, ch});
    const T* in_p = in.data();
    T* out_p = out.data();
    const std::int64_t in_row = in_w_ * ch, in_img = in_h_ * in_row;
    const std::int64_t out_row = out_w_ * ch, out_img = out_h_ * out_row;
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t y = 0; y < out_h_; ++y) {
        const auto& ty = y_tab_[static_cast<std::size_t>(y)];
        for (std::int64_t x = 0; x < out_w_; ++x) {
          const auto& tx = x_tab_[static_cast<std::size_t>(x)];
          const T* r00 = in_p + b * in_img + ty.lo * in_row + tx.lo * ch;
          const T* r01 = in_p + b * in_img + ty.lo * in_row + tx.hi * ch;
          const T* r10 = in_p + b * in_img + ty.hi * in_row + tx.lo * ch;
          const T* r11 = in_p + b * in_img + ty.hi * in_row + tx.hi * ch;
          T* dst = out_p + b * out_img + y * out_row + x * ch;
          const T w00 = ty.w_lo * tx.w_lo, w01 = ty.w_lo * tx.w_hi;
          const T w10 = ty.w_hi * tx.w_lo, w11 = ty.w_hi * tx.w_hi;
          for (std::int64_t c = 0; c < ch; ++c)
            dst[c] = w00 * r00[c] + w01 * r01[c] + w10 * r10[c] + w11 * r11[c];
        }
      }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) {
    const std::int64_t b_n = gout.dim(0), ch = gout.dim(3);
    Tensor<T> gin({b_n, in_h_, in_w_, ch}, T{0});
    const T* go_p = gout.data();
    T* gi_p = gin.data();
    const std::int64_t in_row = in_w_ * ch, in_img = in_h_ * in_row;
    const std::int64_t out_row = out_w_ * ch, out_img = out_h_ * out_row;
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t y = 0; y < out_h_; ++y) {
        const auto& ty = y_tab_[static_cast<std::size_t>(y)];
        for (std::int64_t x = 0; x < out_w_; ++x) {
          const auto& tx = x_tab_[static_cast<std::size_t>(x)];
          const T* g = go_p + b * out_img + y * out_row + x * ch;
          T* r00 = gi_p + b * in_img + ty.lo * in_row + tx.lo * ch;
          T* r01 = gi_p + b * in_img + ty.lo * in_row + tx.hi * ch;
          T* r10 = gi_p + b * in_img + ty.hi * in_row + tx.lo * ch;
          T* r11 = gi_p + b * in_img + ty.hi * in_row + tx.hi * ch;
          const T w00 = ty.w_lo * tx.w_lo, w01 = ty.w_lo * tx.w_hi;
          const T w10 = ty.w_hi * tx.w_lo, w11 = ty.w_hi * tx.w_hi;
          for (std::int64_t c = 0; c < ch; ++c) {
            r00[c] += w00 * g[c];
            r01[c] += w01 * g[c];
            r10[c] += w10 * g[c];
            r11[c] += w11 * g[c];
          }
        }
      }
    return gin;
  }

private:
  struct AxisTap {
    std::int64_t lo, hi;
    T w_lo, w_hi;
  };

  void build_tables() {
    y_tab_ = make_axis(in_h_, out_h_);
    x_tab_ = make_axis(in_w_, out_w_);
  }

  static std::vector<AxisTap> make_axis(std::int64_t in_n, std::int64_t out_n) {
    std::vector<AxisTap> tab(static_cast<std::size_t>(out_n));
    const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
    for (std::int64_t i = 0; i < out_n; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::max(0.0, std::min(src, static_cast<double>(in_n - 1)));
      const auto lo = static_cast<std::int64_t>(std::floor(src));
      const std::int64_t hi = std::min(lo + 1, in_n - 1);
      const double frac = src - static_cast<double>(lo);
      tab[static_cast<std::size_t>(i)] = {lo, hi, static_cast<T>(1.0 - frac), static_cast<T>(frac)};
    }
    return tab;
  }

  std::int64_t out_h_ = 0, out_w_ = 0;
  std::int64_t in_h_ = 0, in_w_ = 0;
  std::vector<AxisTap> y_tab_, x_tab_;
};

/// Zeroes whole feature channels per sample and rescales survivors by
/// 1/(1-rate). The mask is supplied by the caller so that RNG consumption
/// stays single-threaded and under the trainer's control. With an empty mask
/// the layer is a strict identity and consumes no randomness.
template <typename T>
class ChannelDropout {
public:
  /// mask [B, C]: 1 keeps the channel, 0 drops it.
  static Tensor<T> make_mask(std::int64_t batch, std::int64_t channels, double rate, Rng& rng) {
    Tensor<T> mask({batch, channels});
    for (std::int64_t i = 0; i < mask.numel(); ++i)
      mask[i] = rng.next_bernoulli(rate) ? T{0} : T{1};
    return mask;
  }

  Tensor<T> forward(const Tensor<T>& in, const Tensor<T>& mask, double rate) {
    active_ = mask.numel() > 0 && rate > 0.0;
    if (!active_) return in;
    mask_ = mask;
    scale_ = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> out(in.dims());
    apply(in, out);
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) {
    if (!active_) return gout;
    Tensor<T> gin(gout.dims());
    apply(gout, gin);
    return gin;
  }

private:
  void apply(const Tensor<T>& src, Tensor<T>& dst) const {
    const std::int64_t b_n = src.dim(0), ch = src.dim(3);
    const std::int64_t plane = src.dim(1) * src.dim(2);
    const T* s = src.data();
    T* d = dst.data();
    for (std::int64_t b = 0; b < b_n; ++b) {
      const T* m = mask_.data() + b * ch;
      for (std::int64_t p = 0; p < plane; ++p) {
        const T* row = s + (b * plane + p) * ch;
        T* out = d + (b * plane + p) * ch;
        for (std::int64_t c = 0; c < ch; ++c) out[c] = row[c] * m[c] * scale_;
      }
    }
  }

  Tensor<T> mask_;
  T scale_ = T{1};
  bool active_ = false;
};

/// Per-sample, per-channel spatial normalization with learnable scale and
/// shift (instance normalization). Every output channel map has zero spatial
/// mean, which structurally rules out constant predictions downstream and
/// keeps randomly initialized trunks from collapsing to rank-one features.
/// Deterministic and batch-independent.
template <typename T>
class InstanceNorm {
public:
  InstanceNorm() = default;
  explicit InstanceNorm(std::int64_t channels)
      : channels_(channels), gamma_({channels}, T{1}), beta_({channels}, T{0}),
        ggrad_({channels}, T{0}), bgrad_({channels}, T{0}) {}

  Tensor<T> forward(const Tensor<T>& in) {
    input_ = in;
    const std::int64_t b_n = in.dim(0);
    const std::int64_t plane = in.dim(1) * in.dim(2);
    mean_ = Tensor<T>({b_n, channels_});
    inv_sigma_ = Tensor<T>({b_n, channels_});
    Tensor<T> out(in.dims());
    const T* x = in.data();
    T* y = out.data();
    const T* g = gamma_.data();
    const T* bta = beta_.data();
    const T inv_n = static_cast<T>(1.0 / static_cast<double>(plane));
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < b_n; ++b) {
      const T* img = x + b * plane * channels_;
      T* mu = mean_.data() + b * channels_;
      T* isg = inv_sigma_.data() + b * channels_;
      for (std::int64_t c = 0; c < channels_; ++c) mu[c] = T{0};
      for (std::int64_t p = 0; p < plane; ++p) {
        const T* row = img + p * channels_;
        for (std::int64_t c = 0; c < channels_; ++c) mu[c] += row[c];
      }
      for (std::int64_t c = 0; c < channels_; ++c) {
        mu[c] *= inv_n;
        isg[c] = T{0};
      }
      for (std::int64_t p = 0; p < plane; ++p) {
        const T* row = img + p * channels_;
        for (std::int64_t c = 0; c < channels_; ++c) {
          const T d = row[c] - mu[c];
          isg[c] += d * d;
        }
      }
      for (std::int64_t c = 0; c < channels_; ++c)
        isg[c] = T{1} / std::sqrt(isg[c] * inv_n + static_cast<T>(1e-5));
      T* out_img = y + b * plane * channels_;
      for (std::int64_t p = 0; p < plane; ++p) {
        const T* row = img + p * channels_;
        T* orow = out_img + p * channels_;
        for (std::int64_t c = 0; c < channels_; ++c)
          orow[c] = (row[c] - mu[c]) * isg[c] * g[c] + bta[c];
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) {
    const std::int64_t b_n = gout.dim(0);
    const std::int64_t plane = gout.dim(1) * gout.dim(2);
    Tensor<T> gin(gout.dims());
    const T* x = input_.data();
    const T* go = gout.data();
    T* gi = gin.data();
    const T* g = gamma_.data();
    const T inv_n = static_cast<T>(1.0 / static_cast<double>(plane));

    // scale/shift gradients, fixed accumulation order over batch and space
    {
      T* gg = ggrad_.data();
      T* gb = bgrad_.data();
      for (std::int64_t b = 0; b < b_n; ++b) {
        const T* img = x + b * plane * channels_;
        const T* gimg = go + b * plane * channels_;
        const T* mu = mean_.data() + b * channels_;
        const T* isg = inv_sigma_.data() + b * channels_;
        for (std::int64_t p = 0; p < plane; ++p) {
          const T* row = img + p * channels_;
          const T* grow = gimg + p * channels_;
          for (std::int64_t c = 0; c < channels_; ++c) {
            gg[c] += grow[c] * (row[c] - mu[c]) * isg[c];
            gb[c] += grow[c];
          }
        }
      }
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < b_n; ++b) {
      const T* img = x + b * plane * channels_;
      const T* gimg = go + b * plane * channels_;
      T* giimg = gi + b * plane * channels_;
      const T* mu = mean_.data() + b * channels_;
      const T* isg = inv_sigma_.data() + b * channels_;
      std::vector<T> sum_dxhat(static_cast<std::size_t>(channels_), T{0});
      std::vector<T> sum_dxhat_xhat(static_cast<std::size_t>(channels_), T{0});
      for (std::int64_t p = 0; p < plane; ++p) {
        const T* row = img + p * channels_;
        const T* grow = gimg + p * channels_;
        for (std::int64_t c = 0; c < channels_; ++c) {
          const T xhat = (row[c] - mu[c]) * isg[c];
          const T dxhat = grow[c] * g[c];
          sum_dxhat[static_cast<std::size_t>(c)] += dxhat;
          sum_dxhat_xhat[static_cast<std::size_t>(c)] += dxhat * xhat;
        }
      }
      for (std::int64_t c = 0; c < channels_; ++c) {
        sum_dxhat[static_cast<std::size_t>(c)] *= inv_n;
        sum_dxhat_xhat[static_cast<std::size_t>(c)] *= inv_n;
      }
      for (std::int64_t p = 0; p < plane; ++p) {
        const T* row = img + p * channels_;
        const T* grow = gimg + p * channels_;
        T* girow = giimg + p * channels_;
        for (std::int64_t c = 0; c < channels_; ++c) {
          const T xhat = (row[c] - mu[c]) * isg[c];
          const T dxhat = grow[c] * g[c];
          girow[c] = (dxhat - sum_dxhat[static_cast<std::size_t>(c)] -
                      xhat * sum_dxhat_xhat[static_cast<std::size_t>(c)]) *
                     isg[c];
        }
      }
    }
    return gin;
  }

  void zero_grad() {
    ggrad_.fill(T{0});
    bgrad_.fill(T{0});
  }

  std::vector<ParamRef<T>> params() {
    return {{&gamma_, &ggrad_}, {&beta_, &bgrad_}};
  }

  std::int64_t param_count() const { return 2 * channels_; }

private:
  std::int64_t channels_ = 0;
  Tensor<T> gamma_, beta_, ggrad_, bgrad_;
  Tensor<T> input_, mean_, inv_sigma_;
};

/// Global average pool to [B,1,1,C].
template <typename T>
class GlobalAvgPool {
public:
  Tensor<T> forward(const Tensor<T>& in) {
    in_h_ = in.dim(1);
    in_w_ = in.dim(2);
    const std::int64_t b_n = in.dim(0), ch = in.dim(3);
    Tensor<T> out({b_n, 1, 1, ch}, T{0});
    const T* s = in.data();
    T* d = out.data();
    const std::int64_t plane = in_h_ * in_w_;
    for (std::int64_t b = 0; b < b_n; ++b) {
      T* acc = d + b * ch;
      for (std::int64_t p = 0; p < plane; ++p) {
        const T* row = s + (b * plane + p) * ch;
        for (std::int64_t c = 0; c < ch; ++c) acc[c] += row[c];
      }
      const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
      for (std::int64_t c = 0; c < ch; ++c) acc[c] *= inv;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) {
    const std::int64_t b_n = gout.dim(0), ch = gout.dim(3);
    Tensor<T> gin({b_n, in_h_, in_w_, ch});
    const T* g = gout.data();
    T* d = gin.data();
    const std::int64_t plane = in_h_ * in_w_;
    const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t p = 0; p < plane; ++p) {
        T* row = d + (b * plane + p) * ch;
        const T* src = g + b * ch;
        for (std::int64_t c = 0; c < ch; ++c) row[c] = src[c] * inv;
      }
    return gin;
  }

private:
  std::int64_t in_h_ = 0, in_w_ = 0;
};

/// Channel concatenation of two NHWC tensors with matching B/H/W.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ShapeError("concat_channels: spatial dims differ: " + shape_str(a.dims()) + " vs " +
                     shape_str(b.dims()));
  const std::int64_t ca = a.dim(3), cb = b.dim(3);
  Tensor<T> out({a.dim(0), a.dim(1), a.dim(2), ca + cb});
  const std::int64_t pixels = a.dim(0) * a.dim(1) * a.dim(2);
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  for (std::int64_t p = 0; p < pixels; ++p) {
    std::copy(ap + p * ca, ap + (p + 1) * ca, op + p * (ca + cb));
    std::copy(bp + p * cb, bp + (p + 1) * cb, op + p * (ca + cb) + ca);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& joint, std::int64_t ca) {
  const std::int64_t cb = joint.dim(3) - ca;
  Tensor<T> a({joint.dim(0), joint.dim(1), joint.dim(2), ca});
  Tensor<T> b({joint.dim(0), joint.dim(1), joint.dim(2), cb});
  const std::int64_t pixels = joint.dim(0) * joint.dim(1) * joint.dim(2);
  const T* jp = joint.data();
  T* ap = a.data();
  T* bp = b.data();
  for (std::int64_t p = 0; p < pixels; ++p) {
    std::copy(jp + p * (ca + cb), jp + p * (ca + cb) + ca, ap + p * ca);
    std::copy(jp + p * (ca + cb) + ca, jp + (p + 1) * (ca + cb), bp + p * cb);
  }
  return {std::move(a), std::move(b)};
}

/// Broadcast a [B,1,1,C] tensor across a spatial extent.
template <typename T>
class BroadcastSpatial {
public:
  BroadcastSpatial() = default;
  BroadcastSpatial(std::int64_t h, std::int64_t w) : h_(h), w_(w) {}

  Tensor<T> forward(const Tensor<T>& in) {
    const std::int64_t b_n = in.dim(0), ch = in.dim(3);
    Tensor<T> out({b_n, h_, w_, ch});
    const T* s = in.data();
    T* d = out.data();
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t p = 0; p < h_ * w_; ++p)
        std::copy(s + b * ch, s + (b + 1) * ch, d + (b * h_ * w_ + p) * ch);
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) {
    const std::int64_t b_n = gout.dim(0), ch = gout.dim(3);
    Tensor<T> gin({b_n, 1, 1, ch}, T{0});
    const T* g = gout.data();
    T* d = gin.data();
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t p = 0; p < h_ * w_; ++p) {
        const T* row = g + (b * h_ * w_ + p) * ch;
        T* acc = d + b * ch;
        for (std::int64_t c = 0; c < ch; ++c) acc[c] += row[c];
      }
    return gin;
  }

private:
  std::int64_t h_ = 0, w_ = 0;
};

}  // namespace diversenet
