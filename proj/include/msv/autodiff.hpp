#pragma once

// Reverse-mode differentiation over the tensor kernels. A Tape records each
// executed operation together with a backward closure; replaying the tape in
// reverse accumulates gradients for every trainable leaf.
//
// Subgradient conventions: max_pool and channel_max route gradient to the
// first maximal index; SiLU/GELU/sigmoid use their smooth derivatives.

#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msv/ops.hpp"
#include "msv/tensor.hpp"

namespace msv {

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  Var leaf(Tensor<T> value, std::string name, bool trainable = true) {
    return push(std::move(value), trainable, std::move(name), nullptr);
  }

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }

  const Tensor<T>& value(Var v) const { return node(v).value; }

  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) throw std::logic_error("no gradient recorded for this variable");
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // name -> gradient for every trainable named leaf that received one
  std::vector<std::pair<std::string, const Tensor<T>*>> leaf_gradients() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (const Node& n : nodes_)
      if (n.is_leaf && n.trainable && !n.name.empty() && !n.grad.empty())
        out.emplace_back(n.name, &n.grad);
    return out;
  }

  // ---------------------------------------------------------------------
  // recorded operations

  Var conv2d(Var x, Var w, std::optional<Var> bias, ConvParams p, unsigned threads = 1) {
    const Tensor<T>* b = bias ? &value(*bias) : nullptr;
    Tensor<T> out = msv::conv2d(value(x), value(w), b, p, threads);
    const std::int32_t bid = bias ? bias->id : -1;
    return push(std::move(out), needs_grad(x) || needs_grad(w) || (bias && needs_grad(*bias)), {},
                [xid = x.id, wid = w.id, bid, p](Tape& t, std::int32_t self) {
                  t.conv2d_backward(xid, wid, bid, p, self);
                });
  }

  struct BnTrain {
    Var out;
    Tensor<T> batch_mean, batch_var;
    Tensor<T> new_running_mean, new_running_var;
  };

  BnTrain batch_norm_train(Var x, Var gamma, Var beta, const Tensor<T>& running_mean,
                           const Tensor<T>& running_var, T eps, T momentum) {
    auto r = msv::batch_norm_train(value(x), value(gamma), value(beta), running_mean, running_var,
                                   eps, momentum);
    Tensor<T> mean = r.batch_mean, var = r.batch_var;
    Var out = push(std::move(r.output), needs_grad(x) || needs_grad(gamma) || needs_grad(beta), {},
                   [xid = x.id, gid = gamma.id, bid = beta.id, mean, var, eps](
                       Tape& t, std::int32_t self) {
                     t.bn_train_backward(xid, gid, bid, mean, var, eps, self);
                   });
    return BnTrain{out, std::move(r.batch_mean), std::move(r.batch_var),
                   std::move(r.new_running_mean), std::move(r.new_running_var)};
  }

  Var batch_norm_infer(Var x, Var gamma, Var beta, Tensor<T> running_mean, Tensor<T> running_var,
                       T eps) {
    Tensor<T> out =
        msv::batch_norm_infer(value(x), value(gamma), value(beta), running_mean, running_var, eps);
    return push(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta), {},
                [xid = x.id, gid = gamma.id, bid = beta.id, m = std::move(running_mean),
                 v = std::move(running_var), eps](Tape& t, std::int32_t self) {
                  t.bn_infer_backward(xid, gid, bid, m, v, eps, self);
                });
  }

  Var silu(Var x) {
    return unary(x, msv::silu(value(x)), [xid = x.id](Tape& t, std::int32_t self) {
      const Tensor<T>& xv = t.nodes_[xid].value;
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const T s = sigmoid_scalar(xv[i]);
        gx[i] += go[i] * s * (T(1) + xv[i] * (T(1) - s));
      }
    });
  }

  Var gelu(Var x) {
    return unary(x, msv::gelu(value(x)), [xid = x.id](Tape& t, std::int32_t self) {
      const Tensor<T>& xv = t.nodes_[xid].value;
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      const T k = std::sqrt(T(2) / std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const T x0 = xv[i];
        const T u = k * (x0 + T(0.044715) * x0 * x0 * x0);
        const T th = std::tanh(u);
        const T du = k * (T(1) + T(3) * T(0.044715) * x0 * x0);
        gx[i] += go[i] * (T(0.5) * (T(1) + th) + T(0.5) * x0 * (T(1) - th * th) * du);
      }
    });
  }

  Var sigmoid(Var x) {
    Tensor<T> out = msv::sigmoid(value(x));
    Tensor<T> saved = out;
    return unary(x, std::move(out), [xid = x.id, saved](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < saved.size(); ++i)
        gx[i] += go[i] * saved[i] * (T(1) - saved[i]);
    });
  }

  Var softmax(Var x, std::size_t axis) {
    Tensor<T> out = msv::softmax(value(x), axis);
    Tensor<T> saved = out;
    return unary(x, std::move(out), [xid = x.id, saved, axis](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      const Shape& s = saved.shape();
      std::size_t inner = 1, outer = 1;
      for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
      for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
      const std::size_t extent = s[axis];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * extent * inner + in;
          T dot = 0;
          for (std::size_t k = 0; k < extent; ++k)
            dot += go[base + k * inner] * saved[base + k * inner];
          for (std::size_t k = 0; k < extent; ++k)
            gx[base + k * inner] += saved[base + k * inner] * (go[base + k * inner] - dot);
        }
    });
  }

  Var avg_pool(Var x, std::size_t kernel, std::size_t stride, std::size_t padding) {
    Tensor<T> out = msv::avg_pool2d(value(x), kernel, stride, padding);
    return unary(x, std::move(out),
                 [xid = x.id, kernel, stride, padding](Tape& t, std::int32_t self) {
                   t.avg_pool_backward(xid, kernel, stride, padding, self);
                 });
  }

  Var max_pool(Var x, std::size_t kernel, std::size_t stride, std::size_t padding) {
    auto r = msv::max_pool2d_with_indices(value(x), kernel, stride, padding);
    return unary(x, std::move(r.output),
                 [xid = x.id, idx = std::move(r.argmax)](Tape& t, std::int32_t self) {
                   const Tensor<T>& go = t.nodes_[self].grad;
                   Tensor<T>& gx = t.grad_buf(xid);
                   if (gx.empty()) return;
                   for (std::size_t i = 0; i < go.size(); ++i) gx[idx[i]] += go[i];
                 });
  }

  Var global_avg_pool(Var x) {
    Tensor<T> out = msv::global_avg_pool(value(x));
    return unary(x, std::move(out), [xid = x.id](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      const Tensor<T>& xv = t.nodes_[xid].value;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      const std::size_t h = xv.h(), w = xv.w();
      const T inv = T(1) / static_cast<T>(h * w);
      for (std::size_t n = 0; n < xv.n(); ++n)
        for (std::size_t c = 0; c < xv.c(); ++c) {
          const T g = go.at4(n, c, 0, 0) * inv;
          for (std::size_t hi = 0; hi < h; ++hi)
            for (std::size_t wi = 0; wi < w; ++wi) gx.at4(n, c, hi, wi) += g;
        }
    });
  }

  Var concat(const std::vector<Var>& parts, std::size_t axis) {
    std::vector<const Tensor<T>*> views;
    views.reserve(parts.size());
    bool any = false;
    std::vector<std::int32_t> ids;
    for (Var p : parts) {
      views.push_back(&value(p));
      any = any || needs_grad(p);
      ids.push_back(p.id);
    }
    Tensor<T> out = concat_views(views, axis);
    return push(std::move(out), any, {}, [ids, axis](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      std::size_t inner = 1, outer = 1;
      const Shape& os = go.shape();
      for (std::size_t d = axis + 1; d < os.size(); ++d) inner *= os[d];
      for (std::size_t d = 0; d < axis; ++d) outer *= os[d];
      const std::size_t total = os[axis];
      std::size_t offset = 0;
      for (std::int32_t id : ids) {
        const std::size_t ext = t.nodes_[id].value.shape()[axis];
        Tensor<T>& gx = t.grad_buf(id);
        if (!gx.empty()) {
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = go.data() + (o * total + offset) * inner;
            T* dst = gx.data() + o * ext * inner;
            for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
          }
        }
        offset += ext;
      }
    });
  }

  std::vector<Var> split(Var x, const std::vector<std::size_t>& sizes, std::size_t axis) {
    auto parts = msv::split(value(x), sizes, axis);
    std::vector<Var> out;
    out.reserve(parts.size());
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t ext = sizes[i];
      Var v = unary(x, std::move(parts[i]), [xid = x.id, offset, ext, axis](Tape& t,
                                                                            std::int32_t self) {
        const Tensor<T>& go = t.nodes_[self].grad;
        Tensor<T>& gx = t.grad_buf(xid);
        if (gx.empty()) return;
        const Shape& xs = gx.shape();
        std::size_t inner = 1, outer = 1;
        for (std::size_t d = axis + 1; d < xs.size(); ++d) inner *= xs[d];
        for (std::size_t d = 0; d < axis; ++d) outer *= xs[d];
        const std::size_t total = xs[axis];
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = go.data() + o * ext * inner;
          T* dst = gx.data() + (o * total + offset) * inner;
          for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
        }
      });
      offset += ext;
      out.push_back(v);
    }
    return out;
  }

  Var reshape(Var x, Shape new_shape) {
    Tensor<T> out = msv::reshape(value(x), std::move(new_shape));
    return unary(x, std::move(out), [xid = x.id](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }

  Var add(Var a, Var b) {
    Tensor<T> out = msv::add(value(a), value(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), {},
                [aid = a.id, bid = b.id](Tape& t, std::int32_t self) {
                  const Tensor<T>& go = t.nodes_[self].grad;
                  Tensor<T>& ga = t.grad_buf(aid);
                  if (!ga.empty())
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                  Tensor<T>& gb = t.grad_buf(bid);
                  if (!gb.empty())
                    for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
                });
  }

  Var sub(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    detail::require(av.same_shape(bv), "sub shape mismatch");
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    return push(std::move(out), needs_grad(a) || needs_grad(b), {},
                [aid = a.id, bid = b.id](Tape& t, std::int32_t self) {
                  const Tensor<T>& go = t.nodes_[self].grad;
                  Tensor<T>& ga = t.grad_buf(aid);
                  if (!ga.empty())
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                  Tensor<T>& gb = t.grad_buf(bid);
                  if (!gb.empty())
                    for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
                });
  }

  Var mul(Var a, Var b) {
    Tensor<T> out = msv::mul(value(a), value(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), {},
                [aid = a.id, bid = b.id](Tape& t, std::int32_t self) {
                  const Tensor<T>& go = t.nodes_[self].grad;
                  const Tensor<T>& av = t.nodes_[aid].value;
                  const Tensor<T>& bv = t.nodes_[bid].value;
                  const auto plan = detail::broadcast_plan(av.shape(), bv.shape());
                  Tensor<T>& ga = t.grad_buf(aid);
                  Tensor<T>& gb = t.grad_buf(bid);
                  detail::for_each_broadcast(
                      plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
                        if (!ga.empty()) ga[ai] += go[oi] * bv[bi];
                        if (!gb.empty()) gb[bi] += go[oi] * av[ai];
                      });
                });
  }

  Var scale(Var x, T factor) {
    Tensor<T> out = msv::scale(value(x), factor);
    return unary(x, std::move(out), [xid = x.id, factor](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
    });
  }

  Var add_scalar(Var x, T constant) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + constant;
    return unary(x, std::move(out), [xid = x.id](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }

  // Sum of all elements -> scalar [1].
  Var sum(Var x) {
    const Tensor<T>& xv = value(x);
    T acc = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
    return unary(x, Tensor<T>({1}, {acc}), [xid = x.id](Tape& t, std::int32_t self) {
      const T go = t.nodes_[self].grad[0];
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
    });
  }

  Var channel_mean(Var x) {
    Tensor<T> out = msv::channel_mean(value(x));
    return unary(x, std::move(out), [xid = x.id](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      const Tensor<T>& xv = t.nodes_[xid].value;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      const T inv = T(1) / static_cast<T>(xv.c());
      for (std::size_t n = 0; n < xv.n(); ++n)
        for (std::size_t c = 0; c < xv.c(); ++c)
          for (std::size_t h = 0; h < xv.h(); ++h)
            for (std::size_t w = 0; w < xv.w(); ++w)
              gx.at4(n, c, h, w) += go.at4(n, 0, h, w) * inv;
    });
  }

  Var channel_max(Var x) {
    auto r = msv::channel_max_with_indices(value(x));
    return unary(x, std::move(r.output),
                 [xid = x.id, idx = std::move(r.argmax)](Tape& t, std::int32_t self) {
                   const Tensor<T>& go = t.nodes_[self].grad;
                   const Tensor<T>& xv = t.nodes_[xid].value;
                   Tensor<T>& gx = t.grad_buf(xid);
                   if (gx.empty()) return;
                   std::size_t oi = 0;
                   for (std::size_t n = 0; n < xv.n(); ++n)
                     for (std::size_t h = 0; h < xv.h(); ++h)
                       for (std::size_t w = 0; w < xv.w(); ++w, ++oi)
                         gx.at4(n, idx[oi], h, w) += go[oi];
                 });
  }

  Var upsample_nearest(Var x, std::size_t factor) {
    Tensor<T> out = msv::upsample_nearest(value(x), factor);
    return unary(x, std::move(out), [xid = x.id, factor](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t n = 0; n < go.n(); ++n)
        for (std::size_t c = 0; c < go.c(); ++c)
          for (std::size_t h = 0; h < go.h(); ++h)
            for (std::size_t w = 0; w < go.w(); ++w)
              gx.at4(n, c, h / factor, w / factor) += go.at4(n, c, h, w);
    });
  }

  Var pad_bottom_right(Var x, std::size_t pad_h, std::size_t pad_w) {
    Tensor<T> out = msv::pad_bottom_right(value(x), pad_h, pad_w);
    return unary(x, std::move(out), [xid = x.id](Tape& t, std::int32_t self) {
      const Tensor<T>& go = t.nodes_[self].grad;
      Tensor<T>& gx = t.grad_buf(xid);
      if (gx.empty()) return;
      for (std::size_t n = 0; n < gx.n(); ++n)
        for (std::size_t c = 0; c < gx.c(); ++c)
          for (std::size_t h = 0; h < gx.h(); ++h)
            for (std::size_t w = 0; w < gx.w(); ++w) gx.at4(n, c, h, w) += go.at4(n, c, h, w);
    });
  }

  // Mean squared error against a constant target.
  Var mse_loss(Var pred, const Tensor<T>& target) {
    Var t = constant(target);
    Var diff = sub(pred, t);
    Var sq = mul(diff, diff);
    return scale(sum(sq), T(1) / static_cast<T>(target.size()));
  }

  // ---------------------------------------------------------------------

  void backward(Var loss) {
    if (loss.id < 0 || static_cast<std::size_t>(loss.id) >= nodes_.size())
      throw std::invalid_argument("loss is not on this tape");
    if (nodes_[loss.id].value.size() != 1)
      throw std::invalid_argument("loss must be a scalar tensor");
    for (Node& n : nodes_) n.grad = Tensor<T>();
    nodes_[loss.id].grad = Tensor<T>::full(nodes_[loss.id].value.shape(), T(1));
    for (std::int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until backward touches it
    bool requires_grad = false;
    bool is_leaf = false;
    bool trainable = false;
    std::string name;
    std::function<void(Tape&, std::int32_t)> backward;
  };

  Var push(Tensor<T> value, bool requires_grad, std::string name,
           std::function<void(Tape&, std::int32_t)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = !backward;
    n.trainable = n.is_leaf && requires_grad;
    n.name = std::move(name);
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  template <class Fn>
  Var unary(Var x, Tensor<T> out, Fn&& backward) {
    return push(std::move(out), needs_grad(x), {}, std::forward<Fn>(backward));
  }

  bool needs_grad(Var v) const { return node(v).requires_grad; }

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::invalid_argument("variable is not on this tape");
    return nodes_[v.id];
  }

  // Gradient buffer for accumulation; empty for nodes that do not need one.
  Tensor<T>& grad_buf(std::int32_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) {
      static Tensor<T> empty;
      return empty;
    }
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void conv2d_backward(std::int32_t xid, std::int32_t wid, std::int32_t bid, const ConvParams& p,
                       std::int32_t self) {
    const Tensor<T>& go = nodes_[self].grad;
    const Tensor<T>& x = nodes_[xid].value;
    const Tensor<T>& w = nodes_[wid].value;
    Tensor<T>& gx = grad_buf(xid);
    Tensor<T>& gw = grad_buf(wid);
    const std::size_t n = x.n(), cin = x.c(), h = x.h(), wd = x.w();
    const std::size_t cin_g = cin / p.groups;
    const std::size_t cout_g = p.out_channels / p.groups;
    const std::size_t hout = go.h(), wout = go.w();

    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t oc = 0; oc < p.out_channels; ++oc) {
        const std::size_t g = oc / cout_g;
        for (std::size_t oh = 0; oh < hout; ++oh)
          for (std::size_t ow = 0; ow < wout; ++ow) {
            const T gov = go.at4(ni, oc, oh, ow);
            if (gov == T(0)) continue;
            for (std::size_t icl = 0; icl < cin_g; ++icl) {
              const std::size_t ic = g * cin_g + icl;
              for (std::size_t kh = 0; kh < p.kernel_h; ++kh) {
                const long long ih = static_cast<long long>(oh * p.stride + kh * p.dilation) -
                                     static_cast<long long>(p.padding);
                if (ih < 0 || ih >= static_cast<long long>(h)) continue;
                for (std::size_t kw = 0; kw < p.kernel_w; ++kw) {
                  const long long iw = static_cast<long long>(ow * p.stride + kw * p.dilation) -
                                       static_cast<long long>(p.padding);
                  if (iw < 0 || iw >= static_cast<long long>(wd)) continue;
                  const std::size_t ihs = static_cast<std::size_t>(ih);
                  const std::size_t iws = static_cast<std::size_t>(iw);
                  if (!gx.empty()) gx.at4(ni, ic, ihs, iws) += gov * w.at4(oc, icl, kh, kw);
                  if (!gw.empty()) gw.at4(oc, icl, kh, kw) += gov * x.at4(ni, ic, ihs, iws);
                }
              }
            }
          }
      }
    if (bid >= 0) {
      Tensor<T>& gb = grad_buf(bid);
      if (!gb.empty()) {
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t oc = 0; oc < p.out_channels; ++oc)
            for (std::size_t oh = 0; oh < hout; ++oh)
              for (std::size_t ow = 0; ow < wout; ++ow) gb[oc] += go.at4(ni, oc, oh, ow);
      }
    }
  }

  void bn_train_backward(std::int32_t xid, std::int32_t gid, std::int32_t bid,
                         const Tensor<T>& mean, const Tensor<T>& var, T eps, std::int32_t self) {
    const Tensor<T>& go = nodes_[self].grad;
    const Tensor<T>& x = nodes_[xid].value;
    const Tensor<T>& gamma = nodes_[gid].value;
    Tensor<T>& gx = grad_buf(xid);
    Tensor<T>& gg = grad_buf(gid);
    Tensor<T>& gb = grad_buf(bid);
    const std::size_t n = x.n(), c = x.c(), h = x.h(), w = x.w();
    const T m = static_cast<T>(n * h * w);

    for (std::size_t ci = 0; ci < c; ++ci) {
      const T invstd = T(1) / std::sqrt(var[ci] + eps);
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t hi = 0; hi < h; ++hi)
          for (std::size_t wi = 0; wi < w; ++wi) {
            const T dy = go.at4(ni, ci, hi, wi);
            const T xhat = (x.at4(ni, ci, hi, wi) - mean[ci]) * invstd;
            sum_dy += dy;
            sum_dy_xhat += dy * xhat;
          }
      if (!gg.empty()) gg[ci] += sum_dy_xhat;
      if (!gb.empty()) gb[ci] += sum_dy;
      if (!gx.empty()) {
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t hi = 0; hi < h; ++hi)
            for (std::size_t wi = 0; wi < w; ++wi) {
              const T dy = go.at4(ni, ci, hi, wi);
              const T xhat = (x.at4(ni, ci, hi, wi) - mean[ci]) * invstd;
              gx.at4(ni, ci, hi, wi) +=
                  gamma[ci] * invstd * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
            }
      }
    }
  }

  void bn_infer_backward(std::int32_t xid, std::int32_t gid, std::int32_t bid,
                         const Tensor<T>& mean, const Tensor<T>& var, T eps, std::int32_t self) {
    const Tensor<T>& go = nodes_[self].grad;
    const Tensor<T>& x = nodes_[xid].value;
    const Tensor<T>& gamma = nodes_[gid].value;
    Tensor<T>& gx = grad_buf(xid);
    Tensor<T>& gg = grad_buf(gid);
    Tensor<T>& gb = grad_buf(bid);
    const std::size_t n = x.n(), c = x.c(), h = x.h(), w = x.w();
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T invstd = T(1) / std::sqrt(var[ci] + eps);
      for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t hi = 0; hi < h; ++hi)
          for (std::size_t wi = 0; wi < w; ++wi) {
            const T dy = go.at4(ni, ci, hi, wi);
            if (!gx.empty()) gx.at4(ni, ci, hi, wi) += dy * gamma[ci] * invstd;
            if (!gg.empty()) gg[ci] += dy * (x.at4(ni, ci, hi, wi) - mean[ci]) * invstd;
            if (!gb.empty()) gb[ci] += dy;
          }
    }
  }

  void avg_pool_backward(std::int32_t xid, std::size_t kernel, std::size_t stride,
                         std::size_t padding, std::int32_t self) {
    const Tensor<T>& go = nodes_[self].grad;
    Tensor<T>& gx = grad_buf(xid);
    if (gx.empty()) return;
    const std::size_t h = gx.h(), w = gx.w();
    const T inv_area = T(1) / static_cast<T>(kernel * kernel);
    for (std::size_t n = 0; n < go.n(); ++n)
      for (std::size_t c = 0; c < go.c(); ++c)
        for (std::size_t oh = 0; oh < go.h(); ++oh)
          for (std::size_t ow = 0; ow < go.w(); ++ow) {
            const T g = go.at4(n, c, oh, ow) * inv_area;
            for (std::size_t kh = 0; kh < kernel; ++kh) {
              const long long ih =
                  static_cast<long long>(oh * stride + kh) - static_cast<long long>(padding);
              if (ih < 0 || ih >= static_cast<long long>(h)) continue;
              for (std::size_t kw = 0; kw < kernel; ++kw) {
                const long long iw =
                    static_cast<long long>(ow * stride + kw) - static_cast<long long>(padding);
                if (iw < 0 || iw >= static_cast<long long>(w)) continue;
                gx.at4(n, c, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw)) += g;
              }
            }
          }
  }

  std::vector<Node> nodes_;
};

template <class T>
void backward(Tape<T>& tape, Var loss) {
  tape.backward(loss);
}

// ---------------------------------------------------------------------------
// finite-difference gradient verification

struct GradCheckLeafReport {
  std::string name;
  Shape shape;
  double max_rel_err = 0;
  bool pass = true;
  std::size_t compared = 0;  // elements above the finite-difference floor
  std::size_t skipped = 0;   // elements the estimator cannot resolve
};

struct GradCheckReport {
  std::vector<GradCheckLeafReport> leaves;
  double max_rel_err = 0;
  bool pass = true;

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& l : leaves) {
      os << l.name << " " << shape_str(l.shape);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3e", l.max_rel_err);
      os << " max_rel_err=" << buf << (l.pass ? " pass" : " FAIL") << "\n";
    }
    return os.str();
  }
};

// Fixed step/tolerance pairs per precision so CI results are stable.
template <class T>
constexpr T gradcheck_step() {
  return std::is_same_v<T, float> ? T(1e-3) : T(1e-6);
}
template <class T>
constexpr T gradcheck_tolerance() {
  return std::is_same_v<T, float> ? T(1e-2) : T(1e-5);
}

// Central differences carry rounding noise of about eps*|f|/(2h); gradients
// below this scale are not resolvable at the fixed step, so elements where
// both analytic and numeric magnitudes sit under the floor are reported as
// skipped rather than compared.
template <class T>
constexpr double gradcheck_noise_floor() {
  return std::is_same_v<T, float> ? 5e-2 : 1e-4;
}

// Central finite differences against the tape gradients. `fn` must be built
// from recorded operations only and return a scalar variable.
template <class T>
GradCheckReport gradcheck(const std::function<Var(Tape<T>&, const std::vector<Var>&)>& fn,
                          const std::vector<std::pair<std::string, Tensor<T>>>& inputs,
                          T step = gradcheck_step<T>(), T tolerance = gradcheck_tolerance<T>()) {
  Tape<T> tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& [name, tensor] : inputs) vars.push_back(tape.leaf(tensor, name, true));
  Var loss = fn(tape, vars);
  if (tape.value(loss).size() != 1)
    throw std::invalid_argument("gradcheck function must return a scalar");
  tape.backward(loss);

  std::vector<Tensor<T>> analytic;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!tape.has_grad(vars[i]))
      analytic.push_back(Tensor<T>(inputs[i].second.shape()));
    else
      analytic.push_back(tape.grad(vars[i]));
  }

  auto evaluate = [&](const std::vector<Tensor<T>>& points) -> double {
    Tape<T> t;
    std::vector<Var> vs;
    vs.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i)
      vs.push_back(t.leaf(points[i], inputs[i].first, false));
    Var out = fn(t, vs);
    return static_cast<double>(t.value(out)[0]);
  };

  std::vector<Tensor<T>> working;
  working.reserve(inputs.size());
  for (const auto& [name, tensor] : inputs) working.push_back(tensor);

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    GradCheckLeafReport lr;
    lr.name = inputs[i].first;
    lr.shape = inputs[i].second.shape();
    for (std::size_t e = 0; e < working[i].size(); ++e) {
      const T saved = working[i][e];
      working[i][e] = saved + step;
      const double up = evaluate(working);
      working[i][e] = saved - step;
      const double down = evaluate(working);
      working[i][e] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[i][e]);
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw std::runtime_error("non-finite gradient encountered in gradcheck");
      if (std::max(std::abs(a), std::abs(numeric)) < gradcheck_noise_floor<T>()) {
        ++lr.skipped;
        continue;
      }
      ++lr.compared;
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      lr.max_rel_err = std::max(lr.max_rel_err, rel);
    }
    lr.pass = lr.max_rel_err <= static_cast<double>(tolerance);
    report.max_rel_err = std::max(report.max_rel_err, lr.max_rel_err);
    report.pass = report.pass && lr.pass;
    report.leaves.push_back(std::move(lr));
  }
  return report;
}

}  // namespace msv
