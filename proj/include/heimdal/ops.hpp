#pragma once

// Forward/backward pairs for the operator set used by the keyword model.
// Every op works on rank-4 activations [batch, channels, freq, time].

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "heimdal/random.hpp"
#include "heimdal/tensor.hpp"

namespace heimdal {

enum class Mode { Train, Infer };

struct ConvSpec {
  int kernel_f = 1, kernel_t = 1;
  int stride_f = 1, stride_t = 1;
  int dilation_f = 1, dilation_t = 1;
  int pad_f = 0, pad_t = 0;
  int groups = 1;

  void validate() const {
    if (kernel_f < 1 || kernel_t < 1 || stride_f < 1 || stride_t < 1 || dilation_f < 1 || dilation_t < 1 ||
        groups < 1)
      throw ShapeError("conv spec: kernel, stride, dilation and groups must be >= 1");
    if (pad_f < 0 || pad_t < 0) throw ShapeError("conv spec: padding must be >= 0");
  }
};

inline int conv_out_extent(int length, int kernel, int pad, int dilation, int stride) {
  // floor division on a possibly negative numerator
  const int num = length + 2 * pad - dilation * (kernel - 1) - 1;
  if (num < 0) return 0;
  return num / stride + 1;
}

template <typename S>
Tensor<S> conv2d_forward(const Tensor<S>& input, const Tensor<S>& weight, const std::type_identity_t<Tensor<S>>* bias,
                         const ConvSpec& spec) {
  spec.validate();
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const int n_batch = input.dim(0), cin = input.dim(1), fin = input.dim(2), tin = input.dim(3);
  const int cout = weight.dim(0), cin_g = weight.dim(1);
  if (cin % spec.groups != 0 || cout % spec.groups != 0)
    throw ShapeError("conv2d: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                     " not divisible by groups " + std::to_string(spec.groups));
  if (cin_g != cin / spec.groups || weight.dim(2) != spec.kernel_f || weight.dim(3) != spec.kernel_t)
    throw ShapeError("conv2d: weight shape " + shape_string(weight.dims()) + " incompatible with input " +
                     shape_string(input.dims()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) throw ShapeError("conv2d: bias length mismatch");
  const int fout = conv_out_extent(fin, spec.kernel_f, spec.pad_f, spec.dilation_f, spec.stride_f);
  const int tout = conv_out_extent(tin, spec.kernel_t, spec.pad_t, spec.dilation_t, spec.stride_t);
  if (fout <= 0) throw ShapeError("conv2d: non-positive output extent on frequency axis (input " +
                                  std::to_string(fin) + ")");
  if (tout <= 0) throw ShapeError("conv2d: non-positive output extent on time axis (input " +
                                  std::to_string(tin) + ")");

  Tensor<S> out({n_batch, cout, fout, tout});
  const int cout_g = cout / spec.groups;
  for (int n = 0; n < n_batch; ++n) {
    for (int oc = 0; oc < cout; ++oc) {
      const int g = oc / cout_g;
      S* out_plane = &out(n, oc, 0, 0);
      if (bias) std::fill(out_plane, out_plane + static_cast<std::size_t>(fout) * tout, (*bias)[oc]);
      for (int icl = 0; icl < cin_g; ++icl) {
        const int ic = g * cin_g + icl;
        for (int kf = 0; kf < spec.kernel_f; ++kf) {
          for (int kt = 0; kt < spec.kernel_t; ++kt) {
            const S w = weight(oc, icl, kf, kt);
            for (int of = 0; of < fout; ++of) {
              const int fi = of * spec.stride_f - spec.pad_f + kf * spec.dilation_f;
              if (fi < 0 || fi >= fin) continue;
              const S* in_row = &input(n, ic, fi, 0);
              S* out_row = out_plane + static_cast<std::size_t>(of) * tout;
              const int shift = kt * spec.dilation_t - spec.pad_t;
              if (spec.stride_t == 1) {
                const int lo = std::max(0, -shift);
                const int hi = std::min(tout, tin - shift);
                for (int ot = lo; ot < hi; ++ot) out_row[ot] += w * in_row[ot + shift];
              } else {
                for (int ot = 0; ot < tout; ++ot) {
                  const int ti = ot * spec.stride_t + shift;
                  if (ti >= 0 && ti < tin) out_row[ot] += w * in_row[ti];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename S>
struct ConvGrads {
  Tensor<S> input;
  Tensor<S> weight;
  Tensor<S> bias;
};

template <typename S>
ConvGrads<S> conv2d_backward(const Tensor<S>& grad_out, const Tensor<S>& input, const Tensor<S>& weight,
                             const ConvSpec& spec) {
  require_rank(grad_out, 4, "conv2d grad_out");
  const int n_batch = input.dim(0), fin = input.dim(2), tin = input.dim(3);
  const int cout = weight.dim(0), cin_g = weight.dim(1);
  const int fout = conv_out_extent(fin, spec.kernel_f, spec.pad_f, spec.dilation_f, spec.stride_f);
  const int tout = conv_out_extent(tin, spec.kernel_t, spec.pad_t, spec.dilation_t, spec.stride_t);
  if (grad_out.dims() != Shape{n_batch, cout, fout, tout})
    throw ShapeError("conv2d backward: grad_out shape " + shape_string(grad_out.dims()) + " expected " +
                     shape_string({n_batch, cout, fout, tout}));

  ConvGrads<S> g{Tensor<S>(input.dims()), Tensor<S>(weight.dims()), Tensor<S>({cout})};
  const int cout_g = cout / spec.groups;
  for (int n = 0; n < n_batch; ++n) {
    for (int oc = 0; oc < cout; ++oc) {
      const int grp = oc / cout_g;
      const S* gplane = &grad_out(n, oc, 0, 0);
      S bsum = 0;
      for (std::size_t i = 0; i < static_cast<std::size_t>(fout) * tout; ++i) bsum += gplane[i];
      g.bias[oc] += bsum;
      for (int icl = 0; icl < cin_g; ++icl) {
        const int ic = grp * cin_g + icl;
        for (int kf = 0; kf < spec.kernel_f; ++kf) {
          for (int kt = 0; kt < spec.kernel_t; ++kt) {
            const S w = weight(oc, icl, kf, kt);
            S wsum = 0;
            for (int of = 0; of < fout; ++of) {
              const int fi = of * spec.stride_f - spec.pad_f + kf * spec.dilation_f;
              if (fi < 0 || fi >= fin) continue;
              const S* in_row = &input(n, ic, fi, 0);
              S* gin_row = &g.input(n, ic, fi, 0);
              const S* g_row = gplane + static_cast<std::size_t>(of) * tout;
              const int shift = kt * spec.dilation_t - spec.pad_t;
              if (spec.stride_t == 1) {
                const int lo = std::max(0, -shift);
                const int hi = std::min(tout, tin - shift);
                for (int ot = lo; ot < hi; ++ot) wsum += g_row[ot] * in_row[ot + shift];
                for (int ot = lo; ot < hi; ++ot) gin_row[ot + shift] += w * g_row[ot];
              } else {
                for (int ot = 0; ot < tout; ++ot) {
                  const int ti = ot * spec.stride_t + shift;
                  if (ti < 0 || ti >= tin) continue;
                  wsum += g_row[ot] * in_row[ti];
                  gin_row[ti] += w * g_row[ot];
                }
              }
            }
            g.weight(oc, icl, kf, kt) += wsum;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, freq, time) per channel.

constexpr double kNormEpsilon = 1e-5;
constexpr double kNormMomentum = 0.1;

template <typename S>
struct BatchNormCache {
  Tensor<S> normalized;
  std::vector<S> inv_std;
};

namespace detail {
template <typename S>
void check_norm_params(const Tensor<S>& x, const Tensor<S>& scale, const Tensor<S>& shift,
                       const Tensor<S>& mean, const Tensor<S>& var) {
  require_rank(x, 4, "batchnorm input");
  const int c = x.dim(1);
  for (const Tensor<S>* p : {&scale, &shift, &mean, &var})
    if (p->rank() != 1 || p->dim(0) != c)
      throw ShapeError("batchnorm: parameter length " + shape_string(p->dims()) + " does not match " +
                       std::to_string(c) + " channels");
}
}  // namespace detail

template <typename S>
Tensor<S> batchnorm_infer(const Tensor<S>& x, const Tensor<S>& scale, const Tensor<S>& shift,
                          const Tensor<S>& running_mean, const Tensor<S>& running_var) {
  detail::check_norm_params(x, scale, shift, running_mean, running_var);
  const int nb = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<S> y(x.dims());
  for (int ch = 0; ch < c; ++ch) {
    const S inv = static_cast<S>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + kNormEpsilon));
    const S m = running_mean[ch], a = scale[ch], b = shift[ch];
    for (int n = 0; n < nb; ++n) {
      const S* xp = &x(n, ch, 0, 0);
      S* yp = &y(n, ch, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) yp[i] = (xp[i] - m) * inv * a + b;
    }
  }
  return y;
}

// Normalizes by batch statistics and folds them into the running estimates
// (running variance uses the unbiased estimator).
template <typename S>
Tensor<S> batchnorm_train(const Tensor<S>& x, const Tensor<S>& scale, const Tensor<S>& shift,
                          Tensor<S>& running_mean, Tensor<S>& running_var, BatchNormCache<S>* cache = nullptr) {
  detail::check_norm_params(x, scale, shift, running_mean, running_var);
  const int nb = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double count = static_cast<double>(plane) * nb;
  Tensor<S> y(x.dims());
  Tensor<S> xhat(x.dims());
  std::vector<S> inv_std(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (int n = 0; n < nb; ++n) {
      const S* xp = &x(n, ch, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) sum += xp[i];
    }
    const double mean = sum / count;
    double sq = 0;
    for (int n = 0; n < nb; ++n) {
      const S* xp = &x(n, ch, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) sq += (xp[i] - mean) * (xp[i] - mean);
    }
    const double var = sq / count;
    const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
    inv_std[ch] = static_cast<S>(inv);
    for (int n = 0; n < nb; ++n) {
      const S* xp = &x(n, ch, 0, 0);
      S* hp = &xhat(n, ch, 0, 0);
      S* yp = &y(n, ch, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        hp[i] = static_cast<S>((xp[i] - mean) * inv);
        yp[i] = hp[i] * scale[ch] + shift[ch];
      }
    }
    const double unbiased = count > 1 ? var * count / (count - 1) : var;
    running_mean[ch] = static_cast<S>((1 - kNormMomentum) * running_mean[ch] + kNormMomentum * mean);
    running_var[ch] = static_cast<S>((1 - kNormMomentum) * running_var[ch] + kNormMomentum * unbiased);
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename S>
Tensor<S> batchnorm(const Tensor<S>& x, const Tensor<S>& scale, const Tensor<S>& shift, Tensor<S>& running_mean,
                    Tensor<S>& running_var, Mode mode, BatchNormCache<S>* cache = nullptr) {
  if (mode == Mode::Train) return batchnorm_train(x, scale, shift, running_mean, running_var, cache);
  return batchnorm_infer(x, scale, shift, running_mean, running_var);
}

template <typename S>
struct NormGrads {
  Tensor<S> input;
  Tensor<S> scale;
  Tensor<S> shift;
};

template <typename S>
NormGrads<S> batchnorm_backward(const Tensor<S>& grad_out, const BatchNormCache<S>& cache, const Tensor<S>& scale) {
  require_same_shape(grad_out, cache.normalized, "batchnorm backward");
  const int nb = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t plane = static_cast<std::size_t>(grad_out.dim(2)) * grad_out.dim(3);
  const double count = static_cast<double>(plane) * nb;
  NormGrads<S> g{Tensor<S>(grad_out.dims()), Tensor<S>({c}), Tensor<S>({c})};
  for (int ch = 0; ch < c; ++ch) {
    double sum_g = 0, sum_gx = 0;
    for (int n = 0; n < nb; ++n) {
      const S* gp = &grad_out(n, ch, 0, 0);
      const S* hp = &cache.normalized(n, ch, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += gp[i];
        sum_gx += gp[i] * hp[i];
      }
    }
    g.shift[ch] = static_cast<S>(sum_g);
    g.scale[ch] = static_cast<S>(sum_gx);
    const double k = static_cast<double>(scale[ch]) * cache.inv_std[ch] / count;
    for (int n = 0; n < nb; ++n) {
      const S* gp = &grad_out(n, ch, 0, 0);
      const S* hp = &cache.normalized(n, ch, 0, 0);
      S* op = &g.input(n, ch, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) op[i] = static_cast<S>(k * (count * gp[i] - sum_g - hp[i] * sum_gx));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// SubSpectral norm: batch norm applied to `groups` contiguous frequency bands
// independently. [N,C,F,T] and [N,C*G,F/G,T] share the same memory layout, so
// the op is a reshape around batchnorm with C*G parameter slots.

inline Shape subband_shape(const Shape& dims, int groups) {
  if (groups < 1 || dims.size() != 4 || dims[2] % groups != 0)
    throw ShapeError("subspectral norm: frequency extent " + std::to_string(dims.size() == 4 ? dims[2] : -1) +
                     " not divisible by " + std::to_string(groups) + " groups");
  return {dims[0], dims[1] * groups, dims[2] / groups, dims[3]};
}

template <typename S>
Tensor<S> subspectral_norm(const Tensor<S>& x, const Tensor<S>& scale, const Tensor<S>& shift,
                           Tensor<S>& running_mean, Tensor<S>& running_var, int groups, Mode mode,
                           BatchNormCache<S>* cache = nullptr) {
  const Tensor<S> banded = x.reshaped(subband_shape(x.dims(), groups));
  return batchnorm(banded, scale, shift, running_mean, running_var, mode, cache).reshaped(x.dims());
}

template <typename S>
Tensor<S> subspectral_norm_infer(const Tensor<S>& x, const Tensor<S>& scale, const Tensor<S>& shift,
                                 const Tensor<S>& running_mean, const Tensor<S>& running_var, int groups) {
  const Tensor<S> banded = x.reshaped(subband_shape(x.dims(), groups));
  return batchnorm_infer(banded, scale, shift, running_mean, running_var).reshaped(x.dims());
}

template <typename S>
NormGrads<S> subspectral_norm_backward(const Tensor<S>& grad_out, const BatchNormCache<S>& cache,
                                       const Tensor<S>& scale) {
  NormGrads<S> g = batchnorm_backward(grad_out.reshaped(cache.normalized.dims()), cache, scale);
  g.input = std::move(g.input).reshaped(grad_out.dims());
  return g;
}

// ---------------------------------------------------------------------------
// Pointwise and shape ops.

template <typename S>
S sigmoid(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : S(0);
  return y;
}

template <typename S>
Tensor<S> relu_backward(const Tensor<S>& grad_out, const Tensor<S>& x) {
  require_same_shape(grad_out, x, "relu backward");
  Tensor<S> g(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0 ? grad_out[i] : S(0);
  return g;
}

template <typename S>
Tensor<S> swish(const Tensor<S>& x) {
  Tensor<S> y(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <typename S>
Tensor<S> swish_backward(const Tensor<S>& grad_out, const Tensor<S>& x) {
  require_same_shape(grad_out, x, "swish backward");
  Tensor<S> g(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S s = sigmoid(x[i]);
    g[i] = grad_out[i] * (s + x[i] * s * (S(1) - s));
  }
  return g;
}

// Mean over frequency, keeping a unit frequency axis.
template <typename S>
Tensor<S> freq_avgpool(const Tensor<S>& x) {
  require_rank(x, 4, "freq_avgpool input");
  const int nb = x.dim(0), c = x.dim(1), f = x.dim(2), t = x.dim(3);
  Tensor<S> y({nb, c, 1, t});
  for (int n = 0; n < nb; ++n)
    for (int ch = 0; ch < c; ++ch) {
      S* yp = &y(n, ch, 0, 0);
      for (int fi = 0; fi < f; ++fi) {
        const S* xp = &x(n, ch, fi, 0);
        for (int ti = 0; ti < t; ++ti) yp[ti] += xp[ti];
      }
      for (int ti = 0; ti < t; ++ti) yp[ti] /= static_cast<S>(f);
    }
  return y;
}

template <typename S>
Tensor<S> freq_avgpool_backward(const Tensor<S>& grad_out, int freq) {
  const int nb = grad_out.dim(0), c = grad_out.dim(1), t = grad_out.dim(3);
  Tensor<S> g({nb, c, freq, t});
  for (int n = 0; n < nb; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int fi = 0; fi < freq; ++fi)
        for (int ti = 0; ti < t; ++ti) g(n, ch, fi, ti) = grad_out(n, ch, 0, ti) / static_cast<S>(freq);
  return g;
}

// x + pooled broadcast across every frequency bin of x.
template <typename S>
Tensor<S> freq_broadcast_add(const Tensor<S>& pooled, const Tensor<S>& x) {
  require_rank(x, 4, "freq_broadcast_add input");
  if (pooled.rank() != 4 || pooled.dim(0) != x.dim(0) || pooled.dim(1) != x.dim(1) || pooled.dim(2) != 1 ||
      pooled.dim(3) != x.dim(3))
    throw ShapeError("freq_broadcast_add: " + shape_string(pooled.dims()) + " cannot broadcast onto " +
                     shape_string(x.dims()));
  Tensor<S> y = x;
  for (int n = 0; n < x.dim(0); ++n)
    for (int ch = 0; ch < x.dim(1); ++ch)
      for (int fi = 0; fi < x.dim(2); ++fi)
        for (int ti = 0; ti < x.dim(3); ++ti) y(n, ch, fi, ti) += pooled(n, ch, 0, ti);
  return y;
}

// Gradient with respect to the broadcast (pooled) operand; the dense operand
// passes grad_out through unchanged.
template <typename S>
Tensor<S> freq_broadcast_backward(const Tensor<S>& grad_out) {
  const int nb = grad_out.dim(0), c = grad_out.dim(1), f = grad_out.dim(2), t = grad_out.dim(3);
  Tensor<S> g({nb, c, 1, t});
  for (int n = 0; n < nb; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int fi = 0; fi < f; ++fi)
        for (int ti = 0; ti < t; ++ti) g(n, ch, 0, ti) += grad_out(n, ch, fi, ti);
  return g;
}

// Whole-channel dropout. `mask` receives one multiplier per (batch, channel):
// 0 or 1/(1-p). Identity in infer mode.
template <typename S>
Tensor<S> channel_dropout(const Tensor<S>& x, double p, Mode mode, Rng* rng, std::vector<S>* mask = nullptr) {
  require_rank(x, 4, "channel_dropout input");
  const int nb = x.dim(0), c = x.dim(1);
  std::vector<S> m(static_cast<std::size_t>(nb) * c, S(1));
  if (mode == Mode::Train && p > 0) {
    if (p >= 1) throw PreconditionError("channel_dropout: p must be < 1");
    if (!rng) throw PreconditionError("channel_dropout: train mode requires an RNG");
    std::bernoulli_distribution drop(p);
    for (auto& v : m) v = drop(*rng) ? S(0) : static_cast<S>(1.0 / (1.0 - p));
  }
  Tensor<S> y(x.dims());
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  for (std::size_t k = 0; k < m.size(); ++k)
    for (std::size_t i = 0; i < plane; ++i) y[k * plane + i] = x[k * plane + i] * m[k];
  if (mask) *mask = std::move(m);
  return y;
}

template <typename S>
Tensor<S> channel_dropout_backward(const Tensor<S>& grad_out, const std::vector<S>& mask) {
  Tensor<S> g(grad_out.dims());
  const std::size_t plane = static_cast<std::size_t>(grad_out.dim(2)) * grad_out.dim(3);
  for (std::size_t k = 0; k < mask.size(); ++k)
    for (std::size_t i = 0; i < plane; ++i) g[k * plane + i] = grad_out[k * plane + i] * mask[k];
  return g;
}

template <typename S>
Tensor<S> time_trim(const Tensor<S>& x, int left, int right) {
  require_rank(x, 4, "time_trim input");
  const int t = x.dim(3);
  if (left < 0 || right < 0 || left + right >= t)
    throw ShapeError("time_trim: cannot trim " + std::to_string(left) + "+" + std::to_string(right) +
                     " frames from length " + std::to_string(t));
  const int tout = t - left - right;
  Tensor<S> y({x.dim(0), x.dim(1), x.dim(2), tout});
  for (int n = 0; n < x.dim(0); ++n)
    for (int ch = 0; ch < x.dim(1); ++ch)
      for (int fi = 0; fi < x.dim(2); ++fi) {
        const S* xp = &x(n, ch, fi, left);
        std::copy(xp, xp + tout, &y(n, ch, fi, 0));
      }
  return y;
}

template <typename S>
Tensor<S> time_trim_backward(const Tensor<S>& grad_out, int left, int right) {
  const int tout = grad_out.dim(3);
  Tensor<S> g({grad_out.dim(0), grad_out.dim(1), grad_out.dim(2), tout + left + right});
  for (int n = 0; n < grad_out.dim(0); ++n)
    for (int ch = 0; ch < grad_out.dim(1); ++ch)
      for (int fi = 0; fi < grad_out.dim(2); ++fi) {
        const S* gp = &grad_out(n, ch, fi, 0);
        std::copy(gp, gp + tout, &g(n, ch, fi, left));
      }
  return g;
}

}  // namespace heimdal
