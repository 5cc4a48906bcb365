#pragma once

// Forward and backward kernels over Tensor values. Everything here is a pure
// function; the differentiation tape in tape.hpp composes these.

#include <cmath>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "afseg/tensor.hpp"

namespace afseg {

struct ConvSpec {
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index stride = 1;
  Index dilation = 1;
  Index groups = 1;
  Index padding = 0;

  // k + (k - 1)(r - 1)
  Index effective_h() const { return kernel_h + (kernel_h - 1) * (dilation - 1); }
  Index effective_w() const { return kernel_w + (kernel_w - 1) * (dilation - 1); }

  /// Stride-1 convolution whose output keeps the input's spatial size.
  /// Only odd effective kernels are accepted so the padding is symmetric.
  static ConvSpec same(Index kernel, Index dilation = 1, Index groups = 1) {
    ConvSpec s{kernel, kernel, 1, dilation, groups, 0};
    const Index eff = s.effective_h();
    if (eff % 2 == 0)
      throw InvalidInput("same padding requires an odd effective kernel, got " + std::to_string(eff));
    s.padding = eff / 2;
    return s;
  }
};

inline Index conv_out_size(Index in, Index effective, Index pad, Index stride) {
  const Index span = in + 2 * pad - effective;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace detail {

struct ConvGeometry {
  Index batch, cin, h, w, cout, cin_g, cout_g, kh, kw, ho, wo;
};

template <typename Scalar>
ConvGeometry conv_geometry(const Tensor<Scalar>& in, const Tensor<Scalar>& w, const ConvSpec& spec) {
  require_rank(in, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (spec.stride < 1 || spec.dilation < 1 || spec.groups < 1 || spec.padding < 0)
    throw InvalidInput("conv2d: stride, dilation, groups must be >= 1 and padding >= 0");
  if (w.dim(2) != spec.kernel_h || w.dim(3) != spec.kernel_w)
    throw InvalidInput("conv2d: weight kernel " + shape_str(w.shape()) + " does not match spec " +
                       std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
  ConvGeometry g{};
  g.batch = in.dim(0);
  g.cin = in.dim(1);
  g.h = in.dim(2);
  g.w = in.dim(3);
  g.cout = w.dim(0);
  g.kh = spec.kernel_h;
  g.kw = spec.kernel_w;
  if (g.cin % spec.groups != 0 || g.cout % spec.groups != 0)
    throw InvalidInput("conv2d: groups must divide both channel counts");
  g.cin_g = g.cin / spec.groups;
  g.cout_g = g.cout / spec.groups;
  if (w.dim(1) != g.cin_g)
    throw InvalidInput("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels per group, input has " +
                       std::to_string(g.cin_g));
  g.ho = conv_out_size(g.h, spec.effective_h(), spec.padding, spec.stride);
  g.wo = conv_out_size(g.w, spec.effective_w(), spec.padding, spec.stride);
  if (g.ho < 1 || g.wo < 1) throw InvalidInput("conv2d: output would be empty for input " + shape_str(in.shape()));
  return g;
}

// Output columns x for which x*stride - pad + tap lies inside [0, width).
inline void valid_range(Index tap, Index pad, Index stride, Index width, Index out, Index& lo, Index& hi) {
  const Index shift = tap - pad;  // ix = x * stride + shift
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const Index top = width - 1 - shift;
  hi = top < 0 ? -1 : std::min(out - 1, top / stride);
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& in, const Tensor<Scalar>& w, const std::type_identity_t<Tensor<Scalar>>* bias,
                      const ConvSpec& spec) {
  const auto g = detail::conv_geometry(in, w, spec);
  if (bias && bias->size() != g.cout) throw InvalidInput("conv2d: bias length must equal output channels");
  Tensor<Scalar> out(Shape{g.batch, g.cout, g.ho, g.wo});
  const Index s = spec.stride, r = spec.dilation, p = spec.padding;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index o = 0; o < g.cout; ++o) {
      Scalar* dst = out.data() + (b * g.cout + o) * g.ho * g.wo;
      if (bias) std::fill(dst, dst + g.ho * g.wo, (*bias)[o]);
      const Index grp = o / g.cout_g;
      for (Index cl = 0; cl < g.cin_g; ++cl) {
        const Index c = grp * g.cin_g + cl;
        const Scalar* src = in.data() + (b * g.cin + c) * g.h * g.w;
        const Scalar* wk = w.data() + (o * g.cin_g + cl) * g.kh * g.kw;
        for (Index i = 0; i < g.kh; ++i) {
          Index ylo, yhi;
          detail::valid_range(i * r, p, s, g.h, g.ho, ylo, yhi);
          for (Index j = 0; j < g.kw; ++j) {
            const Scalar wv = wk[i * g.kw + j];
            Index xlo, xhi;
            detail::valid_range(j * r, p, s, g.w, g.wo, xlo, xhi);
            for (Index y = ylo; y <= yhi; ++y) {
              const Index base = (y * s - p + i * r) * g.w + (j * r - p);
              Scalar* drow = dst + y * g.wo;
              for (Index x = xlo; x <= xhi; ++x) drow[x] += wv * src[base + x * s];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
struct ConvGrads {
  std::optional<Tensor<Scalar>> input, weight, bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& in, const Tensor<Scalar>& w, const ConvSpec& spec,
                                  const Tensor<Scalar>& grad_out, bool want_input, bool want_weight, bool want_bias) {
  const auto g = detail::conv_geometry(in, w, spec);
  ConvGrads<Scalar> grads;
  if (want_input) grads.input = Tensor<Scalar>(in.shape());
  if (want_weight) grads.weight = Tensor<Scalar>(w.shape());
  if (want_bias) grads.bias = Tensor<Scalar>(Shape{g.cout});
  const Index s = spec.stride, r = spec.dilation, p = spec.padding;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index o = 0; o < g.cout; ++o) {
      const Scalar* go = grad_out.data() + (b * g.cout + o) * g.ho * g.wo;
      if (want_bias) {
        Scalar acc = 0;
        for (Index k = 0; k < g.ho * g.wo; ++k) acc += go[k];
        (*grads.bias)[o] += acc;
      }
      const Index grp = o / g.cout_g;
      for (Index cl = 0; cl < g.cin_g; ++cl) {
        const Index c = grp * g.cin_g + cl;
        const Index in_off = (b * g.cin + c) * g.h * g.w;
        const Scalar* src = in.data() + in_off;
        const Index w_off = (o * g.cin_g + cl) * g.kh * g.kw;
        for (Index i = 0; i < g.kh; ++i) {
          Index ylo, yhi;
          detail::valid_range(i * r, p, s, g.h, g.ho, ylo, yhi);
          for (Index j = 0; j < g.kw; ++j) {
            const Scalar wv = w[w_off + i * g.kw + j];
            Index xlo, xhi;
            detail::valid_range(j * r, p, s, g.w, g.wo, xlo, xhi);
            Scalar wacc = 0;
            for (Index y = ylo; y <= yhi; ++y) {
              const Index row_off = (y * s - p + i * r) * g.w + (j * r - p);
              const Scalar* grow = go + y * g.wo;
              if (want_weight)
                for (Index x = xlo; x <= xhi; ++x) wacc += grow[x] * src[row_off + x * s];
              if (want_input) {
                Scalar* gi = grads.input->data() + in_off;
                for (Index x = xlo; x <= xhi; ++x) gi[row_off + x * s] += wv * grow[x];
              }
            }
            if (want_weight) (*grads.weight)[w_off + i * g.kw + j] += wacc;
          }
        }
      }
    }
  }
  return grads;
}

// (B, 2, C, H, W) -> (B, 2C, H, W) with channel index c * 2 + plane. A kernel-depth-2
// 3-d convolution over the stacked planes is then a 2-d convolution whose weight
// (Cout, Cin_g, 2, kh, kw) is reinterpreted as (Cout, 2 * Cin_g, kh, kw).
template <typename Scalar>
Tensor<Scalar> interleave_planes(const Tensor<Scalar>& stacked) {
  require_rank(stacked, 5, "interleave_planes");
  const Index B = stacked.dim(0), D = stacked.dim(1), C = stacked.dim(2), HW = stacked.dim(3) * stacked.dim(4);
  Tensor<Scalar> out(Shape{B, D * C, stacked.dim(3), stacked.dim(4)});
  for (Index b = 0; b < B; ++b)
    for (Index d = 0; d < D; ++d)
      for (Index c = 0; c < C; ++c)
        out.array().segment(((b * C + c) * D + d) * HW, HW) = stacked.array().segment(((b * D + d) * C + c) * HW, HW);
  return out;
}

template <typename Scalar>
Tensor<Scalar> deinterleave_planes(const Tensor<Scalar>& flat, Index depth) {
  const Index B = flat.dim(0), C = flat.dim(1) / depth, HW = flat.dim(2) * flat.dim(3);
  Tensor<Scalar> out(Shape{B, depth, C, flat.dim(2), flat.dim(3)});
  for (Index b = 0; b < B; ++b)
    for (Index d = 0; d < depth; ++d)
      for (Index c = 0; c < C; ++c)
        out.array().segment(((b * depth + d) * C + c) * HW, HW) = flat.array().segment(((b * C + c) * depth + d) * HW, HW);
  return out;
}

/// Kernel-depth-2 3-d convolution collapsing the (prototype, query) plane pair.
/// stacked: (B, 2, C, H, W); weight: (Cout, C / groups, 2, kh, kw).
template <typename Scalar>
Tensor<Scalar> conv3d_fuse(const Tensor<Scalar>& stacked, const Tensor<Scalar>& weight, const std::type_identity_t<Tensor<Scalar>>* bias,
                           const ConvSpec& spec) {
  require_rank(stacked, 5, "conv3d_fuse input");
  require_rank(weight, 5, "conv3d_fuse weight");
  if (stacked.dim(1) != weight.dim(2))
    throw InvalidInput("conv3d_fuse: depth " + std::to_string(stacked.dim(1)) + " does not match kernel depth " +
                       std::to_string(weight.dim(2)));
  const Tensor<Scalar> w2 =
      weight.reshaped(Shape{weight.dim(0), weight.dim(1) * weight.dim(2), weight.dim(3), weight.dim(4)});
  return conv2d(interleave_planes(stacked), w2, bias, spec);
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise arithmetic (numpy rules, equal rank).

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size())
    throw InvalidInput("broadcast: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1)
      out[i] = a[i];
    else if (a[i] == 1)
      out[i] = b[i];
    else
      throw InvalidInput("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
  }
  return out;
}

inline std::vector<Index> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i] = in[i] == 1 && out[i] != 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over the broadcast output in row-major order.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const auto sa = broadcast_strides(a, out), sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  std::vector<Index> idx(rank, 0);
  Index ia = 0, ib = 0;
  const Index n = shape_size(out);
  for (Index k = 0; k < n; ++k) {
    f(k, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename Scalar, typename Op>
Tensor<Scalar> broadcast_binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Op op) {
  if (a.shape() == b.shape()) return Tensor<Scalar>(a.shape(), a.array().binaryExpr(b.array(), op));
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
  Tensor<Scalar> out(out_shape);
  detail::for_each_broadcast(out_shape, a.shape(), b.shape(),
                             [&](Index k, Index ia, Index ib) { out[k] = op(a[ia], b[ib]); });
  return out;
}

/// Sum a broadcast gradient back down to `target` shape.
template <typename Scalar>
Tensor<Scalar> reduce_to(const Tensor<Scalar>& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  Tensor<Scalar> out(target);
  detail::for_each_broadcast(grad.shape(), target, target,
                             [&](Index k, Index it, Index) { out[it] += grad[k]; });
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return broadcast_binary(a, b, [](Scalar x, Scalar y) { return x + y; });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return broadcast_binary(a, b, [](Scalar x, Scalar y) { return x * y; });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.array().max(Scalar(0)));
}

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  // Split on sign so exp never overflows.
  if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.array().unaryExpr([](Scalar v) { return sigmoid(v); }));
}

// ---------------------------------------------------------------------------
// Batch normalization over (B, H, W) per channel.

enum class NormMode { Train, Infer };

template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> gamma, beta, running_mean, running_var;
  bool initialized = false;

  BatchNormState() = default;
  explicit BatchNormState(Index channels)
      : gamma(Tensor<Scalar>::ones({channels})),
        beta(Tensor<Scalar>::zeros({channels})),
        running_mean(Tensor<Scalar>::zeros({channels})),
        running_var(Tensor<Scalar>::ones({channels})) {}

  Index channels() const { return gamma.size(); }
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;  // running = (1 - momentum) * running + momentum * batch
};

/// Per-channel statistics actually used to normalize; xhat is kept for backward.
template <typename Scalar>
struct BatchNormStats {
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean, var, inv_std;
  Tensor<Scalar> xhat;
};

template <typename Scalar>
BatchNormStats<Scalar> batchnorm_stats(const Tensor<Scalar>& x, const BatchNormState<Scalar>& state, NormMode mode,
                                       const BatchNormOptions& opt) {
  require_rank(x, 4, "batchnorm2d");
  const Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (C != state.channels())
    throw InvalidInput("batchnorm2d: " + std::to_string(C) + " channels, state has " + std::to_string(state.channels()));
  if (mode == NormMode::Infer && !state.initialized)
    throw InvalidInput("batchnorm2d: inference mode with uninitialized running statistics");
  BatchNormStats<Scalar> st;
  st.mean.resize(C);
  st.var.resize(C);
  st.inv_std.resize(C);
  const Scalar eps = Scalar(opt.eps);
  for (Index c = 0; c < C; ++c) {
    Scalar mean, var;
    if (mode == NormMode::Train) {
      Scalar acc = 0;
      for (Index b = 0; b < B; ++b) acc += x.array().segment((b * C + c) * HW, HW).sum();
      mean = acc / Scalar(B * HW);
      Scalar sq = 0;
      for (Index b = 0; b < B; ++b) sq += (x.array().segment((b * C + c) * HW, HW) - mean).square().sum();
      var = sq / Scalar(B * HW);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    st.mean[c] = mean;
    st.var[c] = var;
    st.inv_std[c] = Scalar(1) / std::sqrt(var + eps);
  }
  st.xhat = Tensor<Scalar>(x.shape());
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      st.xhat.array().segment((b * C + c) * HW, HW) = (x.array().segment((b * C + c) * HW, HW) - st.mean[c]) * st.inv_std[c];
  return st;
}

template <typename Scalar>
Tensor<Scalar> batchnorm_apply(const Tensor<Scalar>& xhat, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta) {
  const Index B = xhat.dim(0), C = xhat.dim(1), HW = xhat.dim(2) * xhat.dim(3);
  Tensor<Scalar> y(xhat.shape());
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      y.array().segment((b * C + c) * HW, HW) = xhat.array().segment((b * C + c) * HW, HW) * gamma[c] + beta[c];
  return y;
}

/// Running statistics update from the biased batch variance, so a momentum-1 update
/// reproduces the training-mode normalization exactly.
template <typename Scalar>
void batchnorm_update_running(BatchNormState<Scalar>& state, const BatchNormStats<Scalar>& st,
                              const BatchNormOptions& opt) {
  const Scalar m = Scalar(opt.momentum);
  for (Index c = 0; c < state.channels(); ++c) {
    state.running_mean[c] = (Scalar(1) - m) * state.running_mean[c] + m * st.mean[c];
    state.running_var[c] = (Scalar(1) - m) * state.running_var[c] + m * st.var[c];
  }
  state.initialized = true;
}

/// Stateful convenience wrapper: normalizes and, in train mode, updates running stats.
template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& x, BatchNormState<Scalar>& state, NormMode mode,
                           const BatchNormOptions& opt = {}) {
  auto st = batchnorm_stats(x, state, mode, opt);
  if (mode == NormMode::Train) batchnorm_update_running(state, st, opt);
  return batchnorm_apply(st.xhat, state.gamma, state.beta);
}

// ---------------------------------------------------------------------------
// Bilinear resize, align_corners = false.

namespace detail {

struct LerpTap {
  Index i0, i1;
  double frac;
};

inline std::vector<LerpTap> lerp_taps(Index in, Index out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double scale = double(in) / double(out);
  for (Index o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    taps[std::size_t(o)] = {i0, i1, src - double(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  require_rank(x, 4, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw InvalidInput("bilinear_resize: output size must be >= 1");
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == out_h && W == out_w) return x;
  const auto ty = detail::lerp_taps(H, out_h), tx = detail::lerp_taps(W, out_w);
  Tensor<Scalar> out(Shape{B, C, out_h, out_w});
  for (Index bc = 0; bc < B * C; ++bc) {
    const Scalar* src = x.data() + bc * H * W;
    Scalar* dst = out.data() + bc * out_h * out_w;
    for (Index y = 0; y < out_h; ++y) {
      const auto& a = ty[std::size_t(y)];
      const Scalar fy = Scalar(a.frac);
      for (Index xo = 0; xo < out_w; ++xo) {
        const auto& b = tx[std::size_t(xo)];
        const Scalar fx = Scalar(b.frac);
        const Scalar top = src[a.i0 * W + b.i0] * (1 - fx) + src[a.i0 * W + b.i1] * fx;
        const Scalar bot = src[a.i1 * W + b.i0] * (1 - fx) + src[a.i1 * W + b.i1] * fx;
        dst[y * out_w + xo] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

/// Adjoint of bilinear_resize.
template <typename Scalar>
Tensor<Scalar> bilinear_resize_backward(const Tensor<Scalar>& grad_out, const Shape& in_shape) {
  const Index B = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
  const Index out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  if (H == out_h && W == out_w) return grad_out;
  const auto ty = detail::lerp_taps(H, out_h), tx = detail::lerp_taps(W, out_w);
  Tensor<Scalar> gin(in_shape);
  for (Index bc = 0; bc < B * C; ++bc) {
    const Scalar* g = grad_out.data() + bc * out_h * out_w;
    Scalar* dst = gin.data() + bc * H * W;
    for (Index y = 0; y < out_h; ++y) {
      const auto& a = ty[std::size_t(y)];
      const Scalar fy = Scalar(a.frac);
      for (Index xo = 0; xo < out_w; ++xo) {
        const auto& b = tx[std::size_t(xo)];
        const Scalar fx = Scalar(b.frac);
        const Scalar v = g[y * out_w + xo];
        dst[a.i0 * W + b.i0] += v * (1 - fy) * (1 - fx);
        dst[a.i0 * W + b.i1] += v * (1 - fy) * fx;
        dst[a.i1 * W + b.i0] += v * fy * (1 - fx);
        dst[a.i1 * W + b.i1] += v * fy * fx;
      }
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Channel concatenation and plane stacking.

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts) {
  if (parts.empty()) throw InvalidInput("concat_channels: nothing to concatenate");
  const Tensor<Scalar>& first = *parts.front();
  require_rank(first, 4, "concat_channels");
  Index channels = 0;
  for (const auto* p : parts) {
    require_rank(*p, 4, "concat_channels");
    if (p->dim(0) != first.dim(0) || p->dim(2) != first.dim(2) || p->dim(3) != first.dim(3))
      throw InvalidInput("concat_channels: spatial/batch mismatch " + shape_str(p->shape()) + " vs " +
                         shape_str(first.shape()));
    channels += p->dim(1);
  }
  const Index B = first.dim(0), HW = first.dim(2) * first.dim(3);
  Tensor<Scalar> out(Shape{B, channels, first.dim(2), first.dim(3)});
  for (Index b = 0; b < B; ++b) {
    Index offset = 0;
    for (const auto* p : parts) {
      const Index n = p->dim(1) * HW;
      out.array().segment((b * channels) * HW + offset, n) = p->array().segment(b * n, n);
      offset += n;
    }
  }
  return out;
}

/// (B, C, H, W) x2 -> (B, 2, C, H, W)
template <typename Scalar>
Tensor<Scalar> stack_planes(const Tensor<Scalar>& first, const Tensor<Scalar>& second) {
  require_rank(first, 4, "stack_planes");
  if (first.shape() != second.shape())
    throw InvalidInput("stack_planes: shape mismatch " + shape_str(first.shape()) + " vs " + shape_str(second.shape()));
  const Index B = first.dim(0), n = first.size() / B;
  Tensor<Scalar> out(Shape{B, 2, first.dim(1), first.dim(2), first.dim(3)});
  for (Index b = 0; b < B; ++b) {
    out.array().segment((2 * b) * n, n) = first.array().segment(b * n, n);
    out.array().segment((2 * b + 1) * n, n) = second.array().segment(b * n, n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation loss: mean BCE from logits + (1 - soft Dice).

inline constexpr double kDiceSmooth = 1.0;

template <typename Scalar>
void require_binary(const Tensor<Scalar>& t, const char* what) {
  for (Index i = 0; i < t.size(); ++i)
    if (t[i] != Scalar(0) && t[i] != Scalar(1))
      throw InvalidInput(std::string(what) + ": values must be 0 or 1");
}

template <typename Scalar>
struct SegLossValue {
  Scalar bce = 0;
  Scalar dice_loss = 0;
  Scalar total() const { return bce + dice_loss; }
};

template <typename Scalar>
SegLossValue<Scalar> seg_loss_value(const Tensor<Scalar>& logits, const Tensor<Scalar>& target) {
  if (logits.shape() != target.shape())
    throw InvalidInput("seg_loss: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  require_binary(target, "seg_loss target");
  const Index n = logits.size();
  Scalar bce = 0, inter = 0, psum = 0, ysum = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar z = logits[i], y = target[i];
    bce += std::max(z, Scalar(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    const Scalar p = sigmoid(z);
    inter += p * y;
    psum += p;
    ysum += y;
  }
  const Scalar smooth = Scalar(kDiceSmooth);
  SegLossValue<Scalar> v;
  v.bce = bce / Scalar(n);
  v.dice_loss = Scalar(1) - (Scalar(2) * inter + smooth) / (psum + ysum + smooth);
  return v;
}

template <typename Scalar>
Tensor<Scalar> seg_loss_grad(const Tensor<Scalar>& logits, const Tensor<Scalar>& target) {
  const Index n = logits.size();
  Scalar inter = 0, psum = 0, ysum = 0;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> p(n);
  for (Index i = 0; i < n; ++i) {
    p[i] = sigmoid(logits[i]);
    inter += p[i] * target[i];
    psum += p[i];
    ysum += target[i];
  }
  const Scalar smooth = Scalar(kDiceSmooth);
  const Scalar num = Scalar(2) * inter + smooth, den = psum + ysum + smooth;
  Tensor<Scalar> g(logits.shape());
  for (Index i = 0; i < n; ++i) {
    const Scalar dbce = (p[i] - target[i]) / Scalar(n);
    const Scalar ddice_dp = -(Scalar(2) * target[i] * den - num) / (den * den);
    g[i] = dbce + ddice_dp * p[i] * (Scalar(1) - p[i]);
  }
  return g;
}

}  // namespace afseg
