#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedser/params.hpp"
#include "fedser/rng.hpp"
#include "fedser/tensor.hpp"

namespace fedser {

/// Four dual-convolution blocks (temporal + spectral branch, 1x1 fusion),
/// group norm, ReLU, spatial dropout, 2x2 max-pool between blocks, STC
/// attention after the last block, GAP and a dense softmax head.
struct ArchConfig {
  int blocks = 4;
  std::vector<int> channels = {16, 32, 48, 64};
  int temporal_kernel = 7;   // extent along the time axis, 1 along mel
  int spectral_kernel = 7;   // extent along the mel axis, 1 along time
  int groupnorm_groups = 8;
  double groupnorm_eps = 1e-5;
  double dropout_rate = 0.1;  // drops whole channels
  double l2_rate = 1e-4;
  int attention_kernel = 7;
  int channel_hidden_divisor = 4;  // channel-attention bottleneck C -> C/div

  void validate() const {
    if (blocks < 1) throw std::invalid_argument("ArchConfig: blocks must be >= 1");
    if (static_cast<int>(channels.size()) != blocks)
      throw std::invalid_argument("ArchConfig: channels entry per block required");
    for (int c : channels) {
      if (c < 1) throw std::invalid_argument("ArchConfig: channels must be positive");
      if (c % groupnorm_groups != 0)
        throw std::invalid_argument("ArchConfig: channels must be divisible by groupnorm_groups");
    }
    if (temporal_kernel % 2 == 0 || spectral_kernel % 2 == 0 || attention_kernel % 2 == 0)
      throw std::invalid_argument("ArchConfig: kernel sizes must be odd in their active axis");
    if (dropout_rate < 0 || dropout_rate >= 1)
      throw std::invalid_argument("ArchConfig: dropout_rate must be in [0, 1)");
    if (l2_rate < 0) throw std::invalid_argument("ArchConfig: l2_rate must be >= 0");
    if (channel_hidden_divisor < 1)
      throw std::invalid_argument("ArchConfig: channel_hidden_divisor must be >= 1");
  }

  int min_input_extent() const { return 1 << (blocks - 1); }
};

enum class Mode { kTrain, kEval };

namespace nn {

enum class Pad { kZero, kReplicate };

/// 1-D convolution along the time (axis=0) or mel (axis=1) axis of an
/// [N,T,F,Ci] tensor. Weights are [k, Ci, Co].
template <typename T>
Tensor<T> conv_axis_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int axis,
                            Pad pad) {
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), ci = x.dim(3);
  const int k = w.dim(0), co = w.dim(2);
  if (w.dim(1) != ci) throw std::invalid_argument("conv_axis: channel mismatch");
  const int half = k / 2;

  Tensor<T> y({n, t, f, co});
  std::vector<T> acc(static_cast<std::size_t>(co));
  for (int in = 0; in < n; ++in)
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf) {
        for (int c = 0; c < co; ++c) acc[static_cast<std::size_t>(c)] = b[c];
        for (int dk = 0; dk < k; ++dk) {
          int ts = it, fs = jf;
          int& s = axis == 0 ? ts : fs;
          s += dk - half;
          const int limit = axis == 0 ? t : f;
          if (pad == Pad::kZero) {
            if (s < 0 || s >= limit) continue;
          } else {
            s = std::clamp(s, 0, limit - 1);
          }
          const T* xs = &x(in, ts, fs, 0);
          const T* wk = w.data() + static_cast<std::int64_t>(dk) * ci * co;
          for (int c_in = 0; c_in < ci; ++c_in) {
            const T xv = xs[c_in];
            const T* wr = wk + static_cast<std::int64_t>(c_in) * co;
            for (int c = 0; c < co; ++c) acc[static_cast<std::size_t>(c)] += xv * wr[c];
          }
        }
        T* yv = &y(in, it, jf, 0);
        for (int c = 0; c < co; ++c) yv[c] = acc[static_cast<std::size_t>(c)];
      }
  return y;
}

template <typename T>
void conv_axis_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int axis,
                        Pad pad, Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db) {
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), ci = x.dim(3);
  const int k = w.dim(0), co = w.dim(2);
  const int half = k / 2;

  for (int in = 0; in < n; ++in)
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf) {
        const T* dyv = &dy(in, it, jf, 0);
        for (int c = 0; c < co; ++c) db[c] += dyv[c];
        for (int dk = 0; dk < k; ++dk) {
          int ts = it, fs = jf;
          int& s = axis == 0 ? ts : fs;
          s += dk - half;
          const int limit = axis == 0 ? t : f;
          if (pad == Pad::kZero) {
            if (s < 0 || s >= limit) continue;
          } else {
            s = std::clamp(s, 0, limit - 1);
          }
          const T* xs = &x(in, ts, fs, 0);
          T* dxs = &dx(in, ts, fs, 0);
          T* dwk = dw.data() + static_cast<std::int64_t>(dk) * ci * co;
          const T* wk = w.data() + static_cast<std::int64_t>(dk) * ci * co;
          for (int c_in = 0; c_in < ci; ++c_in) {
            const T xv = xs[c_in];
            T* dwr = dwk + static_cast<std::int64_t>(c_in) * co;
            const T* wr = wk + static_cast<std::int64_t>(c_in) * co;
            T acc{};
            for (int c = 0; c < co; ++c) {
              dwr[c] += xv * dyv[c];
              acc += wr[c] * dyv[c];
            }
            dxs[c_in] += acc;
          }
        }
      }
}

/// Pointwise (1x1) convolution: weights [Ci, Co].
template <typename T>
Tensor<T> conv1x1_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), ci = x.dim(3);
  const int co = w.dim(1);
  if (w.dim(0) != ci) throw std::invalid_argument("conv1x1: channel mismatch");
  Tensor<T> y({n, t, f, co});
  const std::int64_t cells = static_cast<std::int64_t>(n) * t * f;
  for (std::int64_t p = 0; p < cells; ++p) {
    const T* xs = x.data() + p * ci;
    T* yv = y.data() + p * co;
    for (int c = 0; c < co; ++c) yv[c] = b[c];
    for (int c_in = 0; c_in < ci; ++c_in) {
      const T xv = xs[c_in];
      const T* wr = w.data() + static_cast<std::int64_t>(c_in) * co;
      for (int c = 0; c < co; ++c) yv[c] += xv * wr[c];
    }
  }
  return y;
}

template <typename T>
void conv1x1_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dx,
                      Tensor<T>& dw, Tensor<T>& db) {
  const int ci = x.dim(3), co = w.dim(1);
  const std::int64_t cells = static_cast<std::int64_t>(x.dim(0)) * x.dim(1) * x.dim(2);
  for (std::int64_t p = 0; p < cells; ++p) {
    const T* xs = x.data() + p * ci;
    T* dxs = dx.data() + p * ci;
    const T* dyv = dy.data() + p * co;
    for (int c = 0; c < co; ++c) db[c] += dyv[c];
    for (int c_in = 0; c_in < ci; ++c_in) {
      const T xv = xs[c_in];
      T* dwr = dw.data() + static_cast<std::int64_t>(c_in) * co;
      const T* wr = w.data() + static_cast<std::int64_t>(c_in) * co;
      T acc{};
      for (int c = 0; c < co; ++c) {
        dwr[c] += xv * dyv[c];
        acc += wr[c] * dyv[c];
      }
      dxs[c_in] += acc;
    }
  }
}

template <typename T>
struct GroupNormCache {
  Tensor<T> xhat;               // normalized values before scale/offset
  std::vector<double> inv_std;  // per (sample, group)
};

template <typename T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& offset,
                             int groups, double eps, GroupNormCache<T>& cache) {
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), c = x.dim(3);
  const int cg = c / groups;
  const double m = static_cast<double>(t) * f * cg;

  cache.xhat = Tensor<T>({n, t, f, c});
  cache.inv_std.assign(static_cast<std::size_t>(n) * groups, 0.0);
  Tensor<T> y({n, t, f, c});

  for (int in = 0; in < n; ++in)
    for (int g = 0; g < groups; ++g) {
      const int c0 = g * cg, c1 = c0 + cg;
      double sum = 0.0, sum_sq = 0.0;
      for (int it = 0; it < t; ++it)
        for (int jf = 0; jf < f; ++jf) {
          const T* xs = &x(in, it, jf, 0);
          for (int ch = c0; ch < c1; ++ch) {
            const double v = xs[ch];
            sum += v;
            sum_sq += v * v;
          }
        }
      const double mean = sum / m;
      const double var = std::max(0.0, sum_sq / m - mean * mean);
      const double inv_std = 1.0 / std::sqrt(var + eps);
      cache.inv_std[static_cast<std::size_t>(in) * groups + g] = inv_std;
      for (int it = 0; it < t; ++it)
        for (int jf = 0; jf < f; ++jf) {
          const T* xs = &x(in, it, jf, 0);
          T* xh = &cache.xhat(in, it, jf, 0);
          T* yv = &y(in, it, jf, 0);
          for (int ch = c0; ch < c1; ++ch) {
            const T h = static_cast<T>((static_cast<double>(xs[ch]) - mean) * inv_std);
            xh[ch] = h;
            yv[ch] = scale[ch] * h + offset[ch];
          }
        }
    }
  return y;
}

template <typename T>
Tensor<T> group_norm_backward(const GroupNormCache<T>& cache, const Tensor<T>& scale,
                              const Tensor<T>& dy, int groups, Tensor<T>& dscale,
                              Tensor<T>& doffset) {
  const Tensor<T>& xhat = cache.xhat;
  const int n = xhat.dim(0), t = xhat.dim(1), f = xhat.dim(2), c = xhat.dim(3);
  const int cg = c / groups;
  const double m = static_cast<double>(t) * f * cg;

  for (int in = 0; in < n; ++in)
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf) {
        const T* dyv = &dy(in, it, jf, 0);
        const T* xh = &xhat(in, it, jf, 0);
        for (int ch = 0; ch < c; ++ch) {
          dscale[ch] += dyv[ch] * xh[ch];
          doffset[ch] += dyv[ch];
        }
      }

  Tensor<T> dx({n, t, f, c});
  for (int in = 0; in < n; ++in)
    for (int g = 0; g < groups; ++g) {
      const int c0 = g * cg, c1 = c0 + cg;
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (int it = 0; it < t; ++it)
        for (int jf = 0; jf < f; ++jf) {
          const T* dyv = &dy(in, it, jf, 0);
          const T* xh = &xhat(in, it, jf, 0);
          for (int ch = c0; ch < c1; ++ch) {
            const double dxh = static_cast<double>(dyv[ch]) * scale[ch];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[ch];
          }
        }
      mean_dxhat /= m;
      mean_dxhat_xhat /= m;
      const double inv_std = cache.inv_std[static_cast<std::size_t>(in) * groups + g];
      for (int it = 0; it < t; ++it)
        for (int jf = 0; jf < f; ++jf) {
          const T* dyv = &dy(in, it, jf, 0);
          const T* xh = &xhat(in, it, jf, 0);
          T* dxs = &dx(in, it, jf, 0);
          for (int ch = c0; ch < c1; ++ch) {
            const double dxh = static_cast<double>(dyv[ch]) * scale[ch];
            dxs[ch] = static_cast<T>(inv_std *
                                     (dxh - mean_dxhat - static_cast<double>(xh[ch]) * mean_dxhat_xhat));
          }
        }
    }
  return dx;
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (std::int64_t i = 0; i < x.numel(); ++i)
    if (x[i] < T{}) x[i] = T{};
}

/// Gradient through ReLU using the post-activation values as the mask.
template <typename T>
void relu_backward_inplace(const Tensor<T>& post, Tensor<T>& d) {
  for (std::int64_t i = 0; i < d.numel(); ++i)
    if (!(post[i] > T{})) d[i] = T{};
}

/// Channel-wise (spatial) dropout mask: [N,C] of 0 or 1/(1-rate).
template <typename T>
Tensor<T> spatial_dropout_mask(int n, int c, double rate, std::uint64_t seed) {
  Tensor<T> mask({n, c});
  if (rate <= 0) {
    mask.fill(static_cast<T>(1));
    return mask;
  }
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch) mask(in, ch) = uni(rng) < rate ? T{} : keep_scale;
  return mask;
}

template <typename T>
void apply_channel_mask(Tensor<T>& x, const Tensor<T>& mask) {
  const int c = x.dim(3);
  const std::int64_t cells = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  for (int in = 0; in < x.dim(0); ++in) {
    const T* mrow = &mask(in, 0);
    T* base = x.data() + static_cast<std::int64_t>(in) * cells * c;
    for (std::int64_t p = 0; p < cells; ++p)
      for (int ch = 0; ch < c; ++ch) base[p * c + ch] *= mrow[ch];
  }
}

/// 2x2 max-pool, stride 2, floor semantics (odd trailing row/column dropped).
/// Records the flat argmax source index per output cell.
template <typename T>
Tensor<T> maxpool2_forward(const Tensor<T>& x, std::vector<std::int64_t>& argmax) {
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), c = x.dim(3);
  const int t2 = t / 2, f2 = f / 2;
  if (t2 < 1 || f2 < 1)
    throw std::invalid_argument("maxpool2: input " + x.shape_str() + " too small to pool");
  Tensor<T> y({n, t2, f2, c});
  argmax.assign(static_cast<std::size_t>(y.numel()), 0);
  std::int64_t out = 0;
  for (int in = 0; in < n; ++in)
    for (int it = 0; it < t2; ++it)
      for (int jf = 0; jf < f2; ++jf)
        for (int ch = 0; ch < c; ++ch, ++out) {
          T best{};
          std::int64_t best_idx = -1;
          for (int dt = 0; dt < 2; ++dt)
            for (int df = 0; df < 2; ++df) {
              const std::int64_t idx =
                  ((static_cast<std::int64_t>(in) * t + (2 * it + dt)) * f + (2 * jf + df)) * c + ch;
              const T v = x[idx];
              if (best_idx < 0 || v > best) {
                best = v;
                best_idx = idx;
              }
            }
          y[out] = best;
          argmax[static_cast<std::size_t>(out)] = best_idx;
        }
  return y;
}

template <typename T>
Tensor<T> maxpool2_backward(const std::vector<std::int64_t>& argmax, const Tensor<T>& dy,
                            const std::vector<int>& input_dims) {
  Tensor<T> dx(input_dims);
  for (std::int64_t i = 0; i < dy.numel(); ++i) dx[argmax[static_cast<std::size_t>(i)]] += dy[i];
  return dx;
}

/// Global average pooling over (T,F): [N,T,F,C] -> [N,C].
template <typename T>
Tensor<T> gap_forward(const Tensor<T>& x) {
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), c = x.dim(3);
  Tensor<T> y({n, c});
  const double inv = 1.0 / (static_cast<double>(t) * f);
  for (int in = 0; in < n; ++in) {
    std::vector<double> acc(static_cast<std::size_t>(c), 0.0);
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf) {
        const T* xs = &x(in, it, jf, 0);
        for (int ch = 0; ch < c; ++ch) acc[static_cast<std::size_t>(ch)] += xs[ch];
      }
    for (int ch = 0; ch < c; ++ch) y(in, ch) = static_cast<T>(acc[static_cast<std::size_t>(ch)] * inv);
  }
  return y;
}

template <typename T>
void gap_backward_accumulate(const Tensor<T>& dy, Tensor<T>& dx) {
  const int n = dx.dim(0), t = dx.dim(1), f = dx.dim(2), c = dx.dim(3);
  const T inv = static_cast<T>(1.0 / (static_cast<double>(t) * f));
  for (int in = 0; in < n; ++in)
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf) {
        T* dxs = &dx(in, it, jf, 0);
        const T* dyv = &dy(in, 0);
        for (int ch = 0; ch < c; ++ch) dxs[ch] += dyv[ch] * inv;
      }
}

/// Dense layer: [N,Ci] x [Ci,Co] + b.
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const int n = x.dim(0), ci = x.dim(1), co = w.dim(1);
  if (w.dim(0) != ci) throw std::invalid_argument("dense: shape mismatch");
  Tensor<T> y({n, co});
  for (int in = 0; in < n; ++in) {
    T* yv = &y(in, 0);
    for (int c = 0; c < co; ++c) yv[c] = b[c];
    const T* xs = &x(in, 0);
    for (int c_in = 0; c_in < ci; ++c_in) {
      const T xv = xs[c_in];
      const T* wr = w.data() + static_cast<std::int64_t>(c_in) * co;
      for (int c = 0; c < co; ++c) yv[c] += xv * wr[c];
    }
  }
  return y;
}

template <typename T>
void dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dx,
                    Tensor<T>& dw, Tensor<T>& db) {
  const int n = x.dim(0), ci = x.dim(1), co = w.dim(1);
  for (int in = 0; in < n; ++in) {
    const T* dyv = &dy(in, 0);
    const T* xs = &x(in, 0);
    T* dxs = &dx(in, 0);
    for (int c = 0; c < co; ++c) db[c] += dyv[c];
    for (int c_in = 0; c_in < ci; ++c_in) {
      T* dwr = dw.data() + static_cast<std::int64_t>(c_in) * co;
      const T* wr = w.data() + static_cast<std::int64_t>(c_in) * co;
      T acc{};
      for (int c = 0; c < co; ++c) {
        dwr[c] += xs[c_in] * dyv[c];
        acc += wr[c] * dyv[c];
      }
      dxs[c_in] += acc;
    }
  }
}

}  // namespace nn

/// Temperature-scaled softmax with max-subtraction; sums to 1 within 1e-9.
template <typename T>
std::vector<T> softmax_temperature(const T* z, int n, double temperature) {
  if (temperature <= 0) throw std::invalid_argument("softmax_temperature: T must be > 0");
  if (n <= 0) throw std::invalid_argument("softmax_temperature: empty input");
  double zmax = z[0];
  for (int i = 1; i < n; ++i) zmax = std::max(zmax, static_cast<double>(z[i]));
  std::vector<double> e(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    e[static_cast<std::size_t>(i)] = std::exp((static_cast<double>(z[i]) - zmax) / temperature);
    sum += e[static_cast<std::size_t>(i)];
  }
  std::vector<T> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = static_cast<T>(e[static_cast<std::size_t>(i)] / sum);
  return p;
}

template <typename T>
std::vector<T> softmax_temperature(const std::vector<T>& z, double temperature) {
  return softmax_temperature(z.data(), static_cast<int>(z.size()), temperature);
}

/// Argmax with ties broken toward the lowest index.
template <typename T>
int argmax_lowest(const T* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <typename T>
struct AttentionCache {
  Tensor<T> input;        // [N,T,F,C]
  Tensor<T> gap;          // [N,C]
  Tensor<T> hidden;       // [N,H] post-ReLU
  Tensor<T> channel_gate; // [N,C] tanh output
  Tensor<T> pooled;       // [N,T,F,2] channel avg | channel max
  Tensor<T> map_t;        // [N,T,F,1]
  Tensor<T> map_s;        // [N,T,F,1]
  Tensor<T> softmax;      // [N,T,F] positional weights
  std::vector<int> max_channel;  // argmax channel per (n,t,f)
};

template <typename T>
struct BlockCache {
  Tensor<T> input;
  Tensor<T> concat;
  nn::GroupNormCache<T> norm;
  Tensor<T> relu_out;
  Tensor<T> dropout_mask;  // empty when not applied
  std::vector<std::int64_t> pool_argmax;
  std::vector<int> pre_pool_dims;
};

template <typename T>
struct ForwardCache {
  Mode mode = Mode::kEval;
  bool used = false;
  std::vector<BlockCache<T>> blocks;
  AttentionCache<T> attention;
  Tensor<T> head_input;  // [N,C] post-GAP
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [N, num_classes]
  ForwardCache<T> cache;
};

namespace detail {

/// The STC attention map: a positional softmax over the product of the
/// temporal and spectral maps, gated per channel by the tanh perceptron.
template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, const ParamSet<T>& params,
                            AttentionCache<T>& cache) {
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), c = x.dim(3);

  cache.input = x;
  cache.gap = nn::gap_forward(x);

  const auto& w1 = params.at("attn.channel.w1");
  const auto& b1 = params.at("attn.channel.b1");
  const auto& w2 = params.at("attn.channel.w2");
  const auto& b2 = params.at("attn.channel.b2");
  cache.hidden = nn::dense_forward(cache.gap, w1, b1);
  nn::relu_inplace(cache.hidden);
  cache.channel_gate = nn::dense_forward(cache.hidden, w2, b2);
  for (std::int64_t i = 0; i < cache.channel_gate.numel(); ++i)
    cache.channel_gate[i] = static_cast<T>(std::tanh(static_cast<double>(cache.channel_gate[i])));

  // Channel-wise average and max pooling stacked as a 2-channel map.
  cache.pooled = Tensor<T>({n, t, f, 2});
  cache.max_channel.assign(static_cast<std::size_t>(n) * t * f, 0);
  std::int64_t p = 0;
  for (int in = 0; in < n; ++in)
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf, ++p) {
        const T* xs = &x(in, it, jf, 0);
        double sum = xs[0];
        int arg = 0;
        T best = xs[0];
        for (int ch = 1; ch < c; ++ch) {
          sum += xs[ch];
          if (xs[ch] > best) {
            best = xs[ch];
            arg = ch;
          }
        }
        cache.pooled(in, it, jf, 0) = static_cast<T>(sum / c);
        cache.pooled(in, it, jf, 1) = best;
        cache.max_channel[static_cast<std::size_t>(p)] = arg;
      }

  // Replicate padding keeps the maps constant for constant inputs.
  cache.map_t = nn::conv_axis_forward(cache.pooled, params.at("attn.temporal.weight"),
                                      params.at("attn.temporal.bias"), 0, nn::Pad::kReplicate);
  cache.map_s = nn::conv_axis_forward(cache.pooled, params.at("attn.spectral.weight"),
                                      params.at("attn.spectral.bias"), 1, nn::Pad::kReplicate);

  cache.softmax = Tensor<T>({n, t, f});
  const std::int64_t cells = static_cast<std::int64_t>(t) * f;
  for (int in = 0; in < n; ++in) {
    const T* mt = cache.map_t.data() + static_cast<std::int64_t>(in) * cells;
    const T* ms = cache.map_s.data() + static_cast<std::int64_t>(in) * cells;
    T* s = cache.softmax.data() + static_cast<std::int64_t>(in) * cells;
    double amax = -1e300;
    for (std::int64_t i = 0; i < cells; ++i) {
      const double a = static_cast<double>(mt[i]) * static_cast<double>(ms[i]);
      s[i] = static_cast<T>(a);
      amax = std::max(amax, a);
    }
    double sum = 0.0;
    for (std::int64_t i = 0; i < cells; ++i) {
      const double e = std::exp(static_cast<double>(s[i]) - amax);
      s[i] = static_cast<T>(e);
      sum += e;
    }
    for (std::int64_t i = 0; i < cells; ++i) s[i] = static_cast<T>(static_cast<double>(s[i]) / sum);
  }

  Tensor<T> y({n, t, f, c});
  for (int in = 0; in < n; ++in) {
    const T* gate = &cache.channel_gate(in, 0);
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf) {
        const T s = cache.softmax(in, it, jf);
        const T* xs = &x(in, it, jf, 0);
        T* yv = &y(in, it, jf, 0);
        for (int ch = 0; ch < c; ++ch) yv[ch] = xs[ch] * gate[ch] * s;
      }
  }
  return y;
}

template <typename T>
Tensor<T> attention_backward(const ParamSet<T>& params, const AttentionCache<T>& cache,
                             const Tensor<T>& dy, ParamSet<T>& grads) {
  const Tensor<T>& x = cache.input;
  const int n = x.dim(0), t = x.dim(1), f = x.dim(2), c = x.dim(3);
  const std::int64_t cells = static_cast<std::int64_t>(t) * f;

  Tensor<T> dx({n, t, f, c});
  Tensor<T> dgate({n, c});
  Tensor<T> dsoftmax({n, t, f});

  for (int in = 0; in < n; ++in) {
    T* dg = &dgate(in, 0);
    const T* gate = &cache.channel_gate(in, 0);
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf) {
        const T s = cache.softmax(in, it, jf);
        const T* xs = &x(in, it, jf, 0);
        const T* dyv = &dy(in, it, jf, 0);
        T* dxs = &dx(in, it, jf, 0);
        T ds{};
        for (int ch = 0; ch < c; ++ch) {
          dxs[ch] = dyv[ch] * gate[ch] * s;  // direct path
          dg[ch] += dyv[ch] * xs[ch] * s;
          ds += dyv[ch] * xs[ch] * gate[ch];
        }
        dsoftmax(in, it, jf) = ds;
      }
  }

  // Softmax over positions: dA = S * (dS - <dS, S>).
  Tensor<T> dmap_t({n, t, f, 1});
  Tensor<T> dmap_s({n, t, f, 1});
  for (int in = 0; in < n; ++in) {
    const T* s = cache.softmax.data() + static_cast<std::int64_t>(in) * cells;
    const T* ds = dsoftmax.data() + static_cast<std::int64_t>(in) * cells;
    const T* mt = cache.map_t.data() + static_cast<std::int64_t>(in) * cells;
    const T* ms = cache.map_s.data() + static_cast<std::int64_t>(in) * cells;
    double dot = 0.0;
    for (std::int64_t i = 0; i < cells; ++i) dot += static_cast<double>(ds[i]) * s[i];
    T* dmt = dmap_t.data() + static_cast<std::int64_t>(in) * cells;
    T* dms = dmap_s.data() + static_cast<std::int64_t>(in) * cells;
    for (std::int64_t i = 0; i < cells; ++i) {
      const double da = static_cast<double>(s[i]) * (static_cast<double>(ds[i]) - dot);
      dmt[i] = static_cast<T>(da * ms[i]);
      dms[i] = static_cast<T>(da * mt[i]);
    }
  }

  Tensor<T> dpooled({n, t, f, 2});
  nn::conv_axis_backward(cache.pooled, params.at("attn.temporal.weight"), dmap_t, 0,
                         nn::Pad::kReplicate, dpooled, grads.at("attn.temporal.weight"),
                         grads.at("attn.temporal.bias"));
  nn::conv_axis_backward(cache.pooled, params.at("attn.spectral.weight"), dmap_s, 1,
                         nn::Pad::kReplicate, dpooled, grads.at("attn.spectral.weight"),
                         grads.at("attn.spectral.bias"));

  // Channel avg/max pooling backward.
  std::int64_t p = 0;
  const T inv_c = static_cast<T>(1.0 / c);
  for (int in = 0; in < n; ++in)
    for (int it = 0; it < t; ++it)
      for (int jf = 0; jf < f; ++jf, ++p) {
        const T davg = dpooled(in, it, jf, 0) * inv_c;
        T* dxs = &dx(in, it, jf, 0);
        for (int ch = 0; ch < c; ++ch) dxs[ch] += davg;
        dxs[cache.max_channel[static_cast<std::size_t>(p)]] += dpooled(in, it, jf, 1);
      }

  // Channel perceptron backward (tanh, then the two dense layers).
  for (std::int64_t i = 0; i < dgate.numel(); ++i) {
    const double a = cache.channel_gate[i];
    dgate[i] = static_cast<T>(static_cast<double>(dgate[i]) * (1.0 - a * a));
  }
  Tensor<T> dhidden({n, cache.hidden.dim(1)});
  nn::dense_backward(cache.hidden, params.at("attn.channel.w2"), dgate, dhidden,
                     grads.at("attn.channel.w2"), grads.at("attn.channel.b2"));
  nn::relu_backward_inplace(cache.hidden, dhidden);
  Tensor<T> dgap({n, c});
  nn::dense_backward(cache.gap, params.at("attn.channel.w1"), dhidden, dgap,
                     grads.at("attn.channel.w1"), grads.at("attn.channel.b1"));
  nn::gap_backward_accumulate(dgap, dx);

  return dx;
}

}  // namespace detail

/// Seeded parameter initialization: He-style normal fan-in scaling for convs
/// and dense layers, unit scale / zero offset for normalization, zero biases.
template <typename T>
ParamSet<T> init_params(const ArchConfig& arch, int num_classes, std::uint64_t seed) {
  arch.validate();
  if (num_classes < 2) throw std::invalid_argument("init_params: num_classes must be >= 2");

  auto rng = make_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto he_tensor = [&](std::vector<int> dims, int fan_in) {
    Tensor<T> w(std::move(dims));
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(normal(rng) * std_dev);
    return w;
  };
  auto const_tensor = [](std::vector<int> dims, double v) {
    Tensor<T> w(std::move(dims));
    w.fill(static_cast<T>(v));
    return w;
  };

  ParamSet<T> params(num_classes);
  int c_in = 1;
  for (int b = 0; b < arch.blocks; ++b) {
    const int c_out = arch.channels[static_cast<std::size_t>(b)];
    const std::string prefix = "block" + std::to_string(b + 1) + ".";
    params.add(prefix + "temporal.weight",
               he_tensor({arch.temporal_kernel, c_in, c_out}, arch.temporal_kernel * c_in), true);
    params.add(prefix + "temporal.bias", const_tensor({c_out}, 0.0), false);
    params.add(prefix + "spectral.weight",
               he_tensor({arch.spectral_kernel, c_in, c_out}, arch.spectral_kernel * c_in), true);
    params.add(prefix + "spectral.bias", const_tensor({c_out}, 0.0), false);
    params.add(prefix + "joint.weight", he_tensor({2 * c_out, c_out}, 2 * c_out), true);
    params.add(prefix + "joint.bias", const_tensor({c_out}, 0.0), false);
    params.add(prefix + "norm.scale", const_tensor({c_out}, 1.0), false);
    params.add(prefix + "norm.offset", const_tensor({c_out}, 0.0), false);
    c_in = c_out;
  }

  const int c_last = arch.channels.back();
  const int hidden = std::max(1, c_last / arch.channel_hidden_divisor);
  params.add("attn.channel.w1", he_tensor({c_last, hidden}, c_last), true);
  params.add("attn.channel.b1", const_tensor({hidden}, 0.0), false);
  params.add("attn.channel.w2", he_tensor({hidden, c_last}, hidden), true);
  params.add("attn.channel.b2", const_tensor({c_last}, 0.0), false);
  params.add("attn.temporal.weight", he_tensor({arch.attention_kernel, 2, 1}, arch.attention_kernel * 2),
             true);
  params.add("attn.temporal.bias", const_tensor({1}, 0.0), false);
  params.add("attn.spectral.weight", he_tensor({arch.attention_kernel, 2, 1}, arch.attention_kernel * 2),
             true);
  params.add("attn.spectral.bias", const_tensor({1}, 0.0), false);
  params.add("head.weight", he_tensor({c_last, num_classes}, c_last), true);
  params.add("head.bias", const_tensor({num_classes}, 0.0), false);
  return params;
}

/// Forward pass over a batch of segments [N,T,F]. In train mode the seed
/// drives the spatial dropout masks; eval mode is deterministic.
template <typename T>
ForwardResult<T> forward(const ArchConfig& arch, const ParamSet<T>& params, const Tensor<T>& batch,
                         Mode mode, std::uint64_t seed = 0) {
  arch.validate();
  if (batch.rank() != 3) throw std::invalid_argument("forward: expected batch of [N x T x F]");
  const int n = batch.dim(0), t = batch.dim(1), f = batch.dim(2);
  const int min_extent = arch.min_input_extent();
  if (t < min_extent || f < min_extent)
    throw std::invalid_argument("forward: input " + batch.shape_str() + " too small for " +
                                std::to_string(arch.blocks) + " blocks");
  if (!batch.all_finite()) throw std::invalid_argument("forward: non-finite input");

  ForwardResult<T> result;
  result.cache.mode = mode;
  result.cache.blocks.resize(static_cast<std::size_t>(arch.blocks));

  Tensor<T> x({n, t, f, 1});
  std::copy(batch.data(), batch.data() + batch.numel(), x.data());

  for (int b = 0; b < arch.blocks; ++b) {
    auto& cache = result.cache.blocks[static_cast<std::size_t>(b)];
    const std::string prefix = "block" + std::to_string(b + 1) + ".";
    cache.input = std::move(x);

    Tensor<T> xt = nn::conv_axis_forward(cache.input, params.at(prefix + "temporal.weight"),
                                         params.at(prefix + "temporal.bias"), 0, nn::Pad::kZero);
    Tensor<T> xs = nn::conv_axis_forward(cache.input, params.at(prefix + "spectral.weight"),
                                         params.at(prefix + "spectral.bias"), 1, nn::Pad::kZero);

    const int cb = xt.dim(3);
    cache.concat = Tensor<T>({xt.dim(0), xt.dim(1), xt.dim(2), 2 * cb});
    const std::int64_t cells = static_cast<std::int64_t>(xt.dim(0)) * xt.dim(1) * xt.dim(2);
    for (std::int64_t p = 0; p < cells; ++p) {
      T* dst = cache.concat.data() + p * 2 * cb;
      const T* st = xt.data() + p * cb;
      const T* ss = xs.data() + p * cb;
      std::copy(st, st + cb, dst);
      std::copy(ss, ss + cb, dst + cb);
    }

    Tensor<T> xj = nn::conv1x1_forward(cache.concat, params.at(prefix + "joint.weight"),
                                       params.at(prefix + "joint.bias"));
    Tensor<T> xn = nn::group_norm_forward(xj, params.at(prefix + "norm.scale"),
                                          params.at(prefix + "norm.offset"), arch.groupnorm_groups,
                                          arch.groupnorm_eps, cache.norm);
    nn::relu_inplace(xn);
    cache.relu_out = xn;

    Tensor<T> xd = std::move(xn);
    if (mode == Mode::kTrain && arch.dropout_rate > 0) {
      cache.dropout_mask = nn::spatial_dropout_mask<T>(xd.dim(0), xd.dim(3), arch.dropout_rate,
                                                       derive_seed(seed, static_cast<std::uint64_t>(b)));
      nn::apply_channel_mask(xd, cache.dropout_mask);
    }

    if (b + 1 < arch.blocks) {
      cache.pre_pool_dims = xd.dims();
      x = nn::maxpool2_forward(xd, cache.pool_argmax);
    } else {
      x = std::move(xd);
    }
  }

  Tensor<T> attended = detail::attention_forward(x, params, result.cache.attention);
  result.cache.head_input = nn::gap_forward(attended);
  result.logits =
      nn::dense_forward(result.cache.head_input, params.at("head.weight"), params.at("head.bias"));
  return result;
}

/// Exact gradients of the loss w.r.t. every parameter, including the L2 term
/// on conv/dense weights. The cache is single-use.
template <typename T>
ParamSet<T> backward(const ArchConfig& arch, const ParamSet<T>& params, ForwardCache<T>& cache,
                     const Tensor<T>& dlogits) {
  if (cache.mode != Mode::kTrain)
    throw std::invalid_argument("backward: cache must come from a train-mode forward");
  if (cache.used) throw std::invalid_argument("backward: cache already consumed (single-use)");
  cache.used = true;

  ParamSet<T> grads = params.zeros_like();

  Tensor<T> dhead_input({cache.head_input.dim(0), cache.head_input.dim(1)});
  nn::dense_backward(cache.head_input, params.at("head.weight"), dlogits, dhead_input,
                     grads.at("head.weight"), grads.at("head.bias"));

  const Tensor<T>& attn_in = cache.attention.input;
  Tensor<T> dattended({attn_in.dim(0), attn_in.dim(1), attn_in.dim(2), attn_in.dim(3)});
  nn::gap_backward_accumulate(dhead_input, dattended);

  Tensor<T> dx = detail::attention_backward(params, cache.attention, dattended, grads);

  for (int b = arch.blocks - 1; b >= 0; --b) {
    auto& bc = cache.blocks[static_cast<std::size_t>(b)];
    const std::string prefix = "block" + std::to_string(b + 1) + ".";

    if (b + 1 < arch.blocks) dx = nn::maxpool2_backward(bc.pool_argmax, dx, bc.pre_pool_dims);
    if (bc.dropout_mask.numel() > 0) nn::apply_channel_mask(dx, bc.dropout_mask);
    nn::relu_backward_inplace(bc.relu_out, dx);

    Tensor<T> dxj = nn::group_norm_backward(bc.norm, params.at(prefix + "norm.scale"), dx,
                                            arch.groupnorm_groups, grads.at(prefix + "norm.scale"),
                                            grads.at(prefix + "norm.offset"));

    Tensor<T> dconcat = Tensor<T>::zeros_like(bc.concat);
    nn::conv1x1_backward(bc.concat, params.at(prefix + "joint.weight"), dxj, dconcat,
                         grads.at(prefix + "joint.weight"), grads.at(prefix + "joint.bias"));

    const int cb = bc.concat.dim(3) / 2;
    Tensor<T> dxt({bc.concat.dim(0), bc.concat.dim(1), bc.concat.dim(2), cb});
    Tensor<T> dxs({bc.concat.dim(0), bc.concat.dim(1), bc.concat.dim(2), cb});
    const std::int64_t cells =
        static_cast<std::int64_t>(bc.concat.dim(0)) * bc.concat.dim(1) * bc.concat.dim(2);
    for (std::int64_t p = 0; p < cells; ++p) {
      const T* src = dconcat.data() + p * 2 * cb;
      std::copy(src, src + cb, dxt.data() + p * cb);
      std::copy(src + cb, src + 2 * cb, dxs.data() + p * cb);
    }

    dx = Tensor<T>::zeros_like(bc.input);
    nn::conv_axis_backward(bc.input, params.at(prefix + "temporal.weight"), dxt, 0, nn::Pad::kZero,
                           dx, grads.at(prefix + "temporal.weight"), grads.at(prefix + "temporal.bias"));
    nn::conv_axis_backward(bc.input, params.at(prefix + "spectral.weight"), dxs, 1, nn::Pad::kZero,
                           dx, grads.at(prefix + "spectral.weight"), grads.at(prefix + "spectral.bias"));
  }

  if (arch.l2_rate > 0) {
    const T rate = static_cast<T>(arch.l2_rate);
    for (std::size_t e = 0; e < params.size(); ++e) {
      if (!params.entries()[e].decay) continue;
      const auto& w = params.entries()[e].value;
      auto& g = grads.entries()[e].value;
      for (std::int64_t i = 0; i < w.numel(); ++i) g[i] += rate * w[i];
    }
  }
  return grads;
}

/// Standalone STC attention on a single [T,F,C] feature map.
template <typename T>
Tensor<T> stc_attention(const Tensor<T>& features, const ParamSet<T>& params) {
  if (features.rank() != 3) throw std::invalid_argument("stc_attention: expected [T x F x C]");
  if (!features.all_finite()) throw std::invalid_argument("stc_attention: non-finite input");
  Tensor<T> batched({1, features.dim(0), features.dim(1), features.dim(2)});
  std::copy(features.data(), features.data() + features.numel(), batched.data());
  AttentionCache<T> cache;
  Tensor<T> out = detail::attention_forward(batched, params, cache);
  Tensor<T> squeezed({features.dim(0), features.dim(1), features.dim(2)});
  std::copy(out.data(), out.data() + out.numel(), squeezed.data());
  return squeezed;
}

/// Parameter count of an architecture without building weights.
inline std::int64_t param_count(const ArchConfig& arch, int num_classes) {
  arch.validate();
  std::int64_t total = 0;
  int c_in = 1;
  for (int b = 0; b < arch.blocks; ++b) {
    const int c = arch.channels[static_cast<std::size_t>(b)];
    total += static_cast<std::int64_t>(arch.temporal_kernel) * c_in * c + c;
    total += static_cast<std::int64_t>(arch.spectral_kernel) * c_in * c + c;
    total += static_cast<std::int64_t>(2) * c * c + c;
    total += 2 * c;
    c_in = c;
  }
  const int c_last = arch.channels.back();
  const int hidden = std::max(1, c_last / arch.channel_hidden_divisor);
  total += static_cast<std::int64_t>(c_last) * hidden + hidden;
  total += static_cast<std::int64_t>(hidden) * c_last + c_last;
  total += 2 * (static_cast<std::int64_t>(arch.attention_kernel) * 2 + 1);
  total += static_cast<std::int64_t>(c_last) * num_classes + num_classes;
  return total;
}

}  // namespace fedser
