#pragma once

// Query decoder. Per pyramid level the support prototype is tiled into a plane,
// stacked with the query features and fused by a full-depth 3-d convolution;
// large-kernel attention (depthwise, depthwise-dilated, pointwise) reweights the
// fused map. From the deepest level upward, each block gates the upsampled output
// of the block below with a multi-scale attention gate, refines, and hands on.
//
// Pyramids and prototype sets are ordered shallow to deep: index 0 is level 1,
// the largest map, whose resolution the logits take.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "afseg/mask.hpp"
#include "afseg/spectral.hpp"
#include "afseg/tape.hpp"

namespace afseg::decoder {

inline constexpr Index kLevels = 4;

/// Kernel sizes of the large-kernel decomposition for target size K, dilation d.
struct LKAGeometry {
  Index target = 21, dilation = 3;
  Index dw_kernel = 5;   // 2d - 1
  Index dwd_kernel = 7;  // ceil(K / d), raised to the next odd number when even

  /// Impulse-response extent per axis of dw followed by dwd.
  Index support() const { return dw_kernel + dilation * (dwd_kernel - 1); }
};

LKAGeometry lka_geometry(Index kernel, Index dilation);

struct DecoderConfig {
  std::vector<Index> level_channels{16, 24, 32, 32};  // shallow to deep
  Index lka_kernel = 21;
  Index lka_dilation = 3;
  std::vector<Index> atrous_rates{1, 2, 3};
  Index gate_channels = 8;
  bool per_channel_gate = false;
  Index fusion_kernel = 3;
  bool use_clka = true;
  bool use_msag = true;
  BatchNormOptions bn;

  void validate() const;
  LKAGeometry lka() const { return lka_geometry(lka_kernel, lka_dilation); }
};

/// Name and shape of every trainable tensor, in a fixed order.
struct ParamSpec {
  std::string name;
  Shape shape;
  Index fan_in = 1;
  enum class Init { Normal, Zeros, Ones } init = Init::Normal;
  double gain = 2.0;  // variance = gain / fan_in for Normal
};

std::vector<ParamSpec> parameter_layout(const DecoderConfig& cfg);
/// Names of the batch-norm layers with their channel counts.
std::vector<std::pair<std::string, Index>> batchnorm_layout(const DecoderConfig& cfg);

template <typename Scalar>
struct DecoderParams {
  DecoderConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<Scalar>> values;
  std::map<std::string, BatchNormState<Scalar>> bn;  // running statistics only

  Index index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return Index(i);
    throw InvalidInput("decoder has no parameter '" + name + "'");
  }
  Tensor<Scalar>& operator[](const std::string& name) { return values[std::size_t(index(name))]; }
  const Tensor<Scalar>& operator[](const std::string& name) const { return values[std::size_t(index(name))]; }
  Index parameter_count() const {
    Index n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
};

template <typename Scalar>
DecoderParams<Scalar> init_decoder(const DecoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DecoderParams<Scalar> p;
  p.config = cfg;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  for (const ParamSpec& spec : parameter_layout(cfg)) {
    Tensor<Scalar> t(spec.shape);
    switch (spec.init) {
      case ParamSpec::Init::Zeros:
        break;
      case ParamSpec::Init::Ones:
        t.array().setConstant(Scalar(1));
        break;
      case ParamSpec::Init::Normal: {
        const double stddev = std::sqrt(spec.gain / double(spec.fan_in));
        for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(stddev * n01(rng));
        break;
      }
    }
    p.names.push_back(spec.name);
    p.values.push_back(std::move(t));
  }
  for (const auto& [name, channels] : batchnorm_layout(cfg)) p.bn.emplace(name, BatchNormState<Scalar>(channels));
  return p;
}

/// Parameter tensors bound to tape leaves, looked up by name.
template <typename Scalar>
struct BoundParams {
  DecoderParams<Scalar>* params = nullptr;
  std::vector<Var<Scalar>> vars;

  Var<Scalar> operator[](const std::string& name) const { return vars[std::size_t(params->index(name))]; }
  bool has(const std::string& name) const {
    for (const auto& n : params->names)
      if (n == name) return true;
    return false;
  }
};

template <typename Scalar>
BoundParams<Scalar> bind(Tape<Scalar>& tape, DecoderParams<Scalar>& p, bool trainable) {
  BoundParams<Scalar> b{&p, {}};
  for (const auto& v : p.values) b.vars.push_back(tape.leaf(v, trainable));
  return b;
}

template <typename Scalar>
BoundParams<Scalar> bind(DecoderParams<Scalar>& p, std::vector<Var<Scalar>> vars) {
  if (vars.size() != p.values.size()) throw InvalidInput("bind: parameter count mismatch");
  return BoundParams<Scalar>{&p, std::move(vars)};
}

// ---------------------------------------------------------------------------
// Building blocks.

/// ReLU(conv3d_fuse(stack(tile(prototype), query))). `prototype` has shape (C).
template <typename Scalar>
Var<Scalar> fuse_support_query(Var<Scalar> prototype, Var<Scalar> query, Var<Scalar> weight,
                               std::optional<std::type_identity_t<Var<Scalar>>> bias, Index kernel) {
  const Shape& qs = query.shape();
  if (qs.size() != 4) throw InvalidInput("fuse_support_query: query must be rank 4, got " + shape_str(qs));
  if (prototype.value().size() != qs[1])
    throw InvalidInput("fuse_support_query: prototype has " + std::to_string(prototype.value().size()) +
                       " channels, query has " + std::to_string(qs[1]));
  Tape<Scalar>& t = *query.tape;
  const Index C = qs[1], H = qs[2], W = qs[3];
  Var<Scalar> plane = add(t.constant(Tensor<Scalar>(Shape{1, C, H, W})), reshape(prototype, Shape{1, C, 1, 1}));
  return relu(conv3d_fuse(stack_planes(plane, query), weight, bias, ConvSpec::same(kernel)));
}

template <typename Scalar>
struct LKAVars {
  Var<Scalar> dw_w, dwd_w, pw_w;
  std::optional<Var<Scalar>> dw_b, dwd_b, pw_b;
};

/// pointwise(dw_dilated(dw(F))), no normalization.
template <typename Scalar>
Var<Scalar> lka_attention(Var<Scalar> f, const LKAVars<Scalar>& v, const LKAGeometry& g) {
  const Index C = f.shape()[1];
  Var<Scalar> a = conv2d(f, v.dw_w, v.dw_b, ConvSpec::same(g.dw_kernel, 1, C));
  a = conv2d(a, v.dwd_w, v.dwd_b, ConvSpec::same(g.dwd_kernel, g.dilation, C));
  return conv2d(a, v.pw_w, v.pw_b, ConvSpec::same(1));
}

/// Attention(F) * F.
template <typename Scalar>
Var<Scalar> clka_block(Var<Scalar> f, const LKAVars<Scalar>& v, const LKAGeometry& g) {
  return mul(lka_attention(f, v, g), f);
}

template <typename Scalar>
struct NormVars {
  Var<Scalar> gamma, beta;
  BatchNormState<Scalar>* state;
};

template <typename Scalar>
Var<Scalar> apply_norm(Var<Scalar> x, const NormVars<Scalar>& n, NormMode mode, const BatchNormOptions& opt) {
  return batchnorm2d(x, n.gamma, n.beta, *n.state, mode, opt);
}

template <typename Scalar>
struct MSAGVars {
  Var<Scalar> ce_w, cd_w, c_w;
  std::vector<Var<Scalar>> atrous_w;  // one per rate
  NormVars<Scalar> bn_e, bn_d, bn_g;
};

/// x_d * sigmoid(BN(C(q))), q = sum_r atrous_r(ReLU(BN(C_e x_e) + BN(C_d x_d))).
template <typename Scalar>
Var<Scalar> msag_gate(Var<Scalar> x_e, Var<Scalar> x_d, const MSAGVars<Scalar>& v, const std::vector<Index>& rates,
                      NormMode mode, const BatchNormOptions& opt) {
  const Shape& es = x_e.shape();
  const Shape& ds = x_d.shape();
  if (es.size() != 4 || ds.size() != 4 || es[0] != ds[0] || es[2] != ds[2] || es[3] != ds[3])
    throw InvalidInput("msag_gate: skip " + shape_str(es) + " and decoder " + shape_str(ds) +
                       " features differ in batch or spatial size");
  if (rates.size() != v.atrous_w.size()) throw InvalidInput("msag_gate: one atrous kernel per rate required");
  const ConvSpec one = ConvSpec::same(1);
  Var<Scalar> e = apply_norm(conv2d(x_e, v.ce_w, std::nullopt, one), v.bn_e, mode, opt);
  Var<Scalar> d = apply_norm(conv2d(x_d, v.cd_w, std::nullopt, one), v.bn_d, mode, opt);
  Var<Scalar> pre = relu(add(e, d));
  std::optional<Var<Scalar>> q;
  for (std::size_t i = 0; i < rates.size(); ++i) {
    Var<Scalar> r = conv2d(pre, v.atrous_w[i], std::nullopt, ConvSpec::same(3, rates[i]));
    q = q ? add(*q, r) : r;
  }
  Var<Scalar> gate = sigmoid(apply_norm(conv2d(*q, v.c_w, std::nullopt, one), v.bn_g, mode, opt));
  return mul(x_d, gate);
}

/// Ablation replacement for the gate: 1x1 convolution over [x_e, x_d].
template <typename Scalar>
Var<Scalar> concat_merge(Var<Scalar> x_e, Var<Scalar> x_d, Var<Scalar> w,
                         std::optional<std::type_identity_t<Var<Scalar>>> b) {
  const Shape& es = x_e.shape();
  const Shape& ds = x_d.shape();
  if (es.size() != 4 || ds.size() != 4 || es[2] != ds[2] || es[3] != ds[3])
    throw InvalidInput("concat_merge: spatial size mismatch " + shape_str(es) + " vs " + shape_str(ds));
  return conv2d(concat_channels(std::vector<Var<Scalar>>{x_e, x_d}), w, b, ConvSpec::same(1));
}

// ---------------------------------------------------------------------------
// Full network.

std::string level_prefix(Index level);  // "l1." .. "l4."

template <typename Scalar>
LKAVars<Scalar> lka_vars(const BoundParams<Scalar>& b, const std::string& pre) {
  return {b[pre + "lka.dw.w"], b[pre + "lka.dwd.w"], b[pre + "lka.pw.w"],
          b[pre + "lka.dw.b"], b[pre + "lka.dwd.b"], b[pre + "lka.pw.b"]};
}

template <typename Scalar>
NormVars<Scalar> norm_vars(const BoundParams<Scalar>& b, const std::string& name) {
  auto it = b.params->bn.find(name);
  if (it == b.params->bn.end()) throw InvalidInput("decoder has no batch-norm layer '" + name + "'");
  return {b[name + ".gamma"], b[name + ".beta"], &it->second};
}

template <typename Scalar>
MSAGVars<Scalar> msag_vars(const BoundParams<Scalar>& b, const std::string& pre) {
  MSAGVars<Scalar> v{b[pre + "msag.ce.w"], b[pre + "msag.cd.w"], b[pre + "msag.c.w"], {},
                     norm_vars(b, pre + "msag.bn_e"), norm_vars(b, pre + "msag.bn_d"), norm_vars(b, pre + "msag.bn_g")};
  for (Index r : b.params->config.atrous_rates) v.atrous_w.push_back(b[pre + "msag.at" + std::to_string(r) + ".w"]);
  return v;
}

/// Logits of shape (1, 1, H_1, W_1).
template <typename Scalar>
Var<Scalar> decoder_forward(Tape<Scalar>& tape, const BoundParams<Scalar>& b,
                            const spectral::PrototypeSet<Scalar>& prototypes,
                            const std::vector<Tensor<Scalar>>& query, NormMode mode) {
  const DecoderConfig& cfg = b.params->config;
  if (Index(query.size()) != kLevels || Index(prototypes.levels.size()) != kLevels)
    throw InvalidInput("decoder expects " + std::to_string(kLevels) + " pyramid levels, got " +
                       std::to_string(query.size()) + " query and " + std::to_string(prototypes.levels.size()) +
                       " prototype levels");
  for (Index l = 0; l < kLevels; ++l) {
    require_rank(query[std::size_t(l)], 4, "decoder query level");
    if (query[std::size_t(l)].dim(1) != cfg.level_channels[std::size_t(l)])
      throw InvalidInput("decoder level " + std::to_string(l + 1) + " expects " +
                         std::to_string(cfg.level_channels[std::size_t(l)]) + " channels, got " +
                         shape_str(query[std::size_t(l)].shape()));
    if (l + 1 < kLevels && (query[std::size_t(l)].dim(2) <= query[std::size_t(l + 1)].dim(2) ||
                            query[std::size_t(l)].dim(3) <= query[std::size_t(l + 1)].dim(3)))
      throw InvalidInput("decoder levels must shrink strictly from level 1 to level 4");
  }
  const LKAGeometry g = cfg.lka();

  auto level_output = [&](Index l) {
    const std::string pre = level_prefix(l + 1);
    const auto& proto = prototypes.levels[std::size_t(l)];
    Tensor<Scalar> pv(Shape{proto.size()});
    for (Index c = 0; c < proto.size(); ++c) pv[c] = proto[c];
    Var<Scalar> f = fuse_support_query(tape.constant(std::move(pv)), tape.constant(query[std::size_t(l)]),
                                       b[pre + "fuse.w"], b[pre + "fuse.b"], cfg.fusion_kernel);
    return cfg.use_clka ? clka_block(f, lka_vars(b, pre), g) : f;
  };

  Var<Scalar> out = level_output(kLevels - 1);
  for (Index l = kLevels - 2; l >= 0; --l) {
    const std::string pre = level_prefix(l + 1);
    Var<Scalar> x_e = level_output(l);
    Var<Scalar> x_d = bilinear_resize(out, x_e.shape()[2], x_e.shape()[3]);
    Var<Scalar> merged = cfg.use_msag ? msag_gate(x_e, x_d, msag_vars(b, pre), cfg.atrous_rates, mode, cfg.bn)
                                      : concat_merge(x_e, x_d, b[pre + "cat.w"], b[pre + "cat.b"]);
    Var<Scalar> r = conv2d(concat_channels(std::vector<Var<Scalar>>{x_e, merged}), b[pre + "refine.w"], std::nullopt,
                           ConvSpec::same(3));
    out = relu(apply_norm(r, norm_vars(b, pre + "refine.bn"), mode, cfg.bn));
  }
  return conv2d(out, b["head.w"], b["head.b"], ConvSpec::same(1));
}

/// Forward pass without gradients.
template <typename Scalar>
Tensor<Scalar> decoder_logits(DecoderParams<Scalar>& p, const spectral::PrototypeSet<Scalar>& prototypes,
                              const std::vector<Tensor<Scalar>>& query, NormMode mode = NormMode::Infer) {
  Tape<Scalar> tape;
  const BoundParams<Scalar> b = bind(tape, p, false);
  return decoder_forward(tape, b, prototypes, query, mode).value();
}

/// sigmoid(logits) resized to (out_h, out_w); foreground where strictly above `threshold`.
template <typename Scalar>
Mask predict_mask(const Tensor<Scalar>& logits, Index out_h, Index out_w, double threshold = 0.5) {
  require_rank(logits, 4, "predict_mask logits");
  if (logits.dim(0) != 1 || logits.dim(1) != 1) throw InvalidInput("predict_mask: expects (1,1,H,W) logits");
  const Tensor<Scalar> prob = bilinear_resize(sigmoid(logits), out_h, out_w);
  Mask m(out_h, out_w);
  for (Index r = 0; r < out_h; ++r)
    for (Index c = 0; c < out_w; ++c) m(r, c) = double(prob[r * out_w + c]) > threshold ? 1 : 0;
  return m;
}

}  // namespace afseg::decoder
