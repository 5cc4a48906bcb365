#pragma once

// Reverse-mode differentiation over the kernels in kernels.hpp.
//
// A Tape owns every value produced during one forward pass, in creation order,
// which is a topological order by construction. Var is a cheap handle into it.
// Nodes that do not depend on a trainable leaf record no backward closure.

#include <functional>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "afseg/kernels.hpp"

namespace afseg {

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Scalar>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <typename Scalar>
class Gradients {
 public:
  bool contains(Var<Scalar> v) const { return grads_.count(v.id) > 0; }
  const Tensor<Scalar>& operator[](Var<Scalar> v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) throw InvalidInput("no gradient recorded for this tensor (not trainable?)");
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }
  // Number of recorded operations whose backward closure ran.
  std::size_t ops_visited = 0;

 private:
  template <typename>
  friend class Tape;
  std::unordered_map<std::size_t, Tensor<Scalar>> grads_;
};

template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<Scalar>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(Tensor<Scalar> value, bool trainable = false) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, trainable, trainable});
    return {this, nodes_.size() - 1};
  }
  Var<Scalar> constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

  /// Record an operation. The closure is dropped when no input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw InvalidInput("tape: operation input recorded on a different tape");
      needs = needs || nodes_[in].requires_grad;
    }
    if (!needs) backward = nullptr;
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs, false});
    return {this, nodes_.size() - 1};
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool trainable(std::size_t id) const { return nodes_.at(id).trainable; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(std::size_t id, const Tensor<Scalar>& g) {
    if (!nodes_[id].requires_grad) return;
    auto& slot = grads_[id];
    if (!slot) {
      slot = g;
    } else {
      if (slot->shape() != g.shape()) throw InvalidInput("tape: gradient shape mismatch");
      slot->array() += g.array();
    }
  }

  /// d(loss)/d(p) for every trainable leaf p that the loss depends on.
  Gradients<Scalar> backward(Var<Scalar> loss) {
    if (loss.tape != this) throw InvalidInput("backward: loss was recorded on a different tape");
    if (loss.value().size() != 1)
      throw InvalidInput("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    grads_.assign(nodes_.size(), std::nullopt);
    Gradients<Scalar> out;
    if (!nodes_[loss.id].requires_grad) return out;
    grads_[loss.id] = Tensor<Scalar>(loss.shape(), Scalar(1));
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      Node& node = nodes_[k];
      if (!grads_[k]) continue;
      if (node.backward) {
        node.backward(*this, *grads_[k]);
        ++out.ops_visited;
      }
      if (node.trainable) out.grads_.emplace(k, std::move(*grads_[k]));
      grads_[k].reset();
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
    bool trainable;
  };

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<Scalar>>> grads_;
};

template <typename Scalar>
Gradients<Scalar> backward(Tape<Scalar>& tape, Var<Scalar> loss) {
  return tape.backward(loss);
}

namespace detail {
template <typename Scalar>
Tape<Scalar>& same_tape(Var<Scalar> a, Var<Scalar> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw InvalidInput("operands live on different tapes");
  return *a.tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Recorded operations.

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> w, std::optional<std::type_identity_t<Var<Scalar>>> b, const ConvSpec& spec) {
  Tape<Scalar>& t = detail::same_tape(x, w);
  if (b) detail::same_tape(x, *b);
  Tensor<Scalar> out = conv2d(x.value(), w.value(), b ? &b->value() : nullptr, spec);
  std::vector<std::size_t> inputs{x.id, w.id};
  if (b) inputs.push_back(b->id);
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  return t.record(std::move(out), std::move(inputs), [xi, wi, bi, spec](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    auto grads = conv2d_backward(tp.value(xi), tp.value(wi), spec, g, tp.requires_grad(xi), tp.requires_grad(wi),
                                 bi && tp.requires_grad(*bi));
    if (grads.input) tp.accumulate(xi, *grads.input);
    if (grads.weight) tp.accumulate(wi, *grads.weight);
    if (grads.bias) tp.accumulate(*bi, *grads.bias);
  });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(shape);
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    tp.accumulate(xi, g.reshaped(tp.value(xi).shape()));
  });
}

template <typename Scalar>
Var<Scalar> interleave_planes(Var<Scalar> stacked) {
  Tensor<Scalar> out = interleave_planes(stacked.value());
  const std::size_t si = stacked.id;
  const Index depth = stacked.value().dim(1);
  return stacked.tape->record(std::move(out), {si}, [si, depth](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    tp.accumulate(si, deinterleave_planes(g, depth));
  });
}

/// stacked: (B, 2, C, H, W); weight: (Cout, C / groups, 2, kh, kw).
template <typename Scalar>
Var<Scalar> conv3d_fuse(Var<Scalar> stacked, Var<Scalar> w, std::optional<std::type_identity_t<Var<Scalar>>> b, const ConvSpec& spec) {
  require_rank(stacked.value(), 5, "conv3d_fuse input");
  require_rank(w.value(), 5, "conv3d_fuse weight");
  if (stacked.value().dim(1) != w.value().dim(2))
    throw InvalidInput("conv3d_fuse: depth " + std::to_string(stacked.value().dim(1)) +
                       " does not match kernel depth " + std::to_string(w.value().dim(2)));
  const Shape ws = w.shape();
  return conv2d(interleave_planes(stacked), reshape(w, Shape{ws[0], ws[1] * ws[2], ws[3], ws[4]}), b, spec);
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  const std::size_t xi = x.id;
  return x.tape->record(relu(x.value()), {xi}, [xi](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    const auto& in = tp.value(xi);
    tp.accumulate(xi, Tensor<Scalar>(g.shape(), (in.array() > Scalar(0)).select(g.array(), Scalar(0))));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  const std::size_t xi = x.id;
  return x.tape->record(sigmoid(x.value()), {xi}, [xi](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    const Tensor<Scalar> s = sigmoid(tp.value(xi));
    tp.accumulate(xi, Tensor<Scalar>(g.shape(), g.array() * s.array() * (Scalar(1) - s.array())));
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = detail::same_tape(a, b);
  const std::size_t ai = a.id, bi = b.id;
  return t.record(add(a.value(), b.value()), {ai, bi}, [ai, bi](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    if (tp.requires_grad(ai)) tp.accumulate(ai, reduce_to(g, tp.value(ai).shape()));
    if (tp.requires_grad(bi)) tp.accumulate(bi, reduce_to(g, tp.value(bi).shape()));
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = detail::same_tape(a, b);
  const std::size_t ai = a.id, bi = b.id;
  return t.record(mul(a.value(), b.value()), {ai, bi}, [ai, bi](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    if (tp.requires_grad(ai)) tp.accumulate(ai, reduce_to(mul(g, tp.value(bi)), tp.value(ai).shape()));
    if (tp.requires_grad(bi)) tp.accumulate(bi, reduce_to(mul(g, tp.value(ai)), tp.value(bi).shape()));
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return mul(a, b); }

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  const std::size_t xi = x.id;
  return x.tape->record(Tensor<Scalar>::scalar(x.value().array().sum()), {xi},
                        [xi](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                          tp.accumulate(xi, Tensor<Scalar>(tp.value(xi).shape(), g[0]));
                        });
}

template <typename Scalar>
Var<Scalar> bilinear_resize(Var<Scalar> x, Index out_h, Index out_w) {
  const std::size_t xi = x.id;
  return x.tape->record(bilinear_resize(x.value(), out_h, out_w), {xi},
                        [xi](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                          tp.accumulate(xi, bilinear_resize_backward(g, tp.value(xi).shape()));
                        });
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw InvalidInput("concat_channels: nothing to concatenate");
  std::vector<const Tensor<Scalar>*> values;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    values.push_back(&p.value());
    ids.push_back(p.id);
  }
  Tensor<Scalar> out = concat_channels(values);
  return parts.front().tape->record(std::move(out), ids, [ids](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    const Index B = g.dim(0), C = g.dim(1), HW = g.dim(2) * g.dim(3);
    Index offset = 0;
    for (std::size_t id : ids) {
      const Shape& s = tp.value(id).shape();
      const Index n = s[1] * HW;
      if (tp.requires_grad(id)) {
        Tensor<Scalar> part(s);
        for (Index b = 0; b < B; ++b) part.array().segment(b * n, n) = g.array().segment(b * C * HW + offset, n);
        tp.accumulate(id, part);
      }
      offset += n;
    }
  });
}

template <typename Scalar>
Var<Scalar> stack_planes(Var<Scalar> first, Var<Scalar> second) {
  Tape<Scalar>& t = detail::same_tape(first, second);
  const std::size_t fi = first.id, si = second.id;
  return t.record(stack_planes(first.value(), second.value()), {fi, si},
                  [fi, si](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    const Shape& s = tp.value(fi).shape();
                    const Index B = s[0], n = shape_size(s) / B;
                    Tensor<Scalar> ga(s), gb(s);
                    for (Index b = 0; b < B; ++b) {
                      ga.array().segment(b * n, n) = g.array().segment(2 * b * n, n);
                      gb.array().segment(b * n, n) = g.array().segment((2 * b + 1) * n, n);
                    }
                    tp.accumulate(fi, ga);
                    tp.accumulate(si, gb);
                  });
}

/// Train mode normalizes with batch statistics and updates `state`'s running
/// statistics; infer mode reads them.
template <typename Scalar>
Var<Scalar> batchnorm2d(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, BatchNormState<Scalar>& state,
                        NormMode mode, const BatchNormOptions& opt = {}) {
  Tape<Scalar>& t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  auto st = batchnorm_stats(x.value(), state, mode, opt);
  if (mode == NormMode::Train) batchnorm_update_running(state, st, opt);
  Tensor<Scalar> y = batchnorm_apply(st.xhat, gamma.value(), beta.value());
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  return t.record(std::move(y), {xi, gi, bi},
                  [xi, gi, bi, mode, st = std::move(st)](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    const Index B = g.dim(0), C = g.dim(1), HW = g.dim(2) * g.dim(3);
                    const Scalar n = Scalar(B * HW);
                    const auto& gamma_v = tp.value(gi);
                    Tensor<Scalar> dgamma(Shape{C}), dbeta(Shape{C}), dx(g.shape());
                    for (Index c = 0; c < C; ++c) {
                      Scalar sdy = 0, sdyx = 0;
                      for (Index b = 0; b < B; ++b) {
                        const auto gy = g.array().segment((b * C + c) * HW, HW);
                        sdy += gy.sum();
                        sdyx += (gy * st.xhat.array().segment((b * C + c) * HW, HW)).sum();
                      }
                      dgamma[c] = sdyx;
                      dbeta[c] = sdy;
                      const Scalar k = gamma_v[c] * st.inv_std[c];
                      for (Index b = 0; b < B; ++b) {
                        const Index off = (b * C + c) * HW;
                        if (mode == NormMode::Train)
                          dx.array().segment(off, HW) =
                              k * (g.array().segment(off, HW) - sdy / n - st.xhat.array().segment(off, HW) * (sdyx / n));
                        else
                          dx.array().segment(off, HW) = k * g.array().segment(off, HW);
                      }
                    }
                    tp.accumulate(xi, dx);
                    tp.accumulate(gi, dgamma);
                    tp.accumulate(bi, dbeta);
                  });
}

template <typename Scalar>
struct SegLoss {
  Var<Scalar> total;
  SegLossValue<Scalar> parts;
};

/// Mean binary cross-entropy from logits plus (1 - soft Dice); target must be binary.
template <typename Scalar>
SegLoss<Scalar> seg_loss(Var<Scalar> logits, const Tensor<Scalar>& target) {
  auto parts = seg_loss_value(logits.value(), target);
  const std::size_t li = logits.id;
  Var<Scalar> total = logits.tape->record(Tensor<Scalar>::scalar(parts.total()), {li},
                                          [li, target](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                                            Tensor<Scalar> d = seg_loss_grad(tp.value(li), target);
                                            d.array() *= g[0];
                                            tp.accumulate(li, d);
                                          });
  return {total, parts};
}

}  // namespace afseg
