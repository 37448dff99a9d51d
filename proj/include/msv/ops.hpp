#pragma once

// Forward numeric kernels over Tensor<T>. Plain loops, deterministic
// evaluation order; convolution is cross-correlation (no kernel flip).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <type_traits>
#include <variant>

#include "msv/tensor.hpp"

namespace msv {

struct ConvParams {
  std::size_t out_channels = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool has_bias = false;
};

// floor((in + 2p - d*(k-1) - 1) / s) + 1; throws when the result would be < 1.
inline std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride,
                                      std::size_t padding, std::size_t dilation) {
  const long long span = static_cast<long long>(in) + 2ll * static_cast<long long>(padding) -
                         static_cast<long long>(dilation) * (static_cast<long long>(k) - 1) - 1;
  if (span < 0) throw std::invalid_argument("conv/pool window does not fit: output extent < 1");
  return static_cast<std::size_t>(span / static_cast<long long>(stride)) + 1;
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_rank4(const Shape& s, const char* what) {
  require(s.size() == 4, std::string(what) + " must be rank 4, got " + shape_str(s));
}

}  // namespace detail

template <class T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& weight,
                       const Tensor<std::type_identity_t<T>>* bias, const ConvParams& p) {
  detail::require_rank4(input.shape(), "conv input");
  detail::require_rank4(weight.shape(), "conv weight");
  detail::require(p.stride >= 1 && p.dilation >= 1 && p.groups >= 1,
                  "conv stride/dilation/groups must be >= 1");
  const std::size_t cin = input.c();
  detail::require(cin % p.groups == 0, "conv in_channels not divisible by groups");
  detail::require(p.out_channels % p.groups == 0, "conv out_channels not divisible by groups");
  detail::require(weight.extent(0) == p.out_channels && weight.extent(1) == cin / p.groups &&
                      weight.extent(2) == p.kernel_h && weight.extent(3) == p.kernel_w,
                  "conv weight shape " + shape_str(weight.shape()) + " does not match params");
  if (p.has_bias) {
    detail::require(bias != nullptr && bias->rank() == 1 && bias->extent(0) == p.out_channels,
                    "conv bias must be rank 1 with out_channels extent");
  } else {
    detail::require(bias == nullptr, "bias tensor given but has_bias is false");
  }
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<std::type_identity_t<T>>* bias, const ConvParams& p,
                 unsigned threads = 1) {
  check_conv_shapes(input, weight, bias, p);
  const std::size_t n = input.n(), cin = input.c(), h = input.h(), w = input.w();
  const std::size_t hout = conv_output_extent(h, p.kernel_h, p.stride, p.padding, p.dilation);
  const std::size_t wout = conv_output_extent(w, p.kernel_w, p.stride, p.padding, p.dilation);
  const std::size_t cin_g = cin / p.groups;
  const std::size_t cout_g = p.out_channels / p.groups;

  Tensor<T> out({n, p.out_channels, hout, wout});
  parallel_for(n * p.out_channels, threads, [&](std::size_t slab) {
    const std::size_t ni = slab / p.out_channels;
    const std::size_t oc = slab % p.out_channels;
    const std::size_t g = oc / cout_g;
    for (std::size_t oh = 0; oh < hout; ++oh) {
      for (std::size_t ow = 0; ow < wout; ++ow) {
        T acc = p.has_bias ? (*bias)[oc] : T(0);
        for (std::size_t icl = 0; icl < cin_g; ++icl) {
          const std::size_t ic = g * cin_g + icl;
          for (std::size_t kh = 0; kh < p.kernel_h; ++kh) {
            const long long ih = static_cast<long long>(oh * p.stride + kh * p.dilation) -
                                 static_cast<long long>(p.padding);
            if (ih < 0 || ih >= static_cast<long long>(h)) continue;
            for (std::size_t kw = 0; kw < p.kernel_w; ++kw) {
              const long long iw = static_cast<long long>(ow * p.stride + kw * p.dilation) -
                                   static_cast<long long>(p.padding);
              if (iw < 0 || iw >= static_cast<long long>(w)) continue;
              acc += input.at4(ni, ic, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw)) *
                     weight.at4(oc, icl, kh, kw);
            }
          }
        }
        out.at4(ni, oc, oh, ow) = acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// batch normalization

template <class T>
struct BatchNormTrainResult {
  Tensor<T> output;
  Tensor<T> batch_mean;   // per channel, biased statistics used to normalize
  Tensor<T> batch_var;
  Tensor<T> new_running_mean;  // running update uses the unbiased variance
  Tensor<T> new_running_var;
};

template <class T>
void check_bn_shapes(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     const Tensor<T>& mean, const Tensor<T>& var, double eps) {
  detail::require_rank4(input.shape(), "batch_norm input");
  detail::require(eps > 0, "batch_norm eps must be > 0");
  const std::size_t c = input.c();
  for (const Tensor<T>* t : {&gamma, &beta, &mean, &var})
    detail::require(t->rank() == 1 && t->extent(0) == c,
                    "batch_norm per-channel tensors must have extent " + std::to_string(c));
}

template <class T>
Tensor<T> batch_norm_infer(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
  check_bn_shapes(input, gamma, beta, running_mean, running_var, static_cast<double>(eps));
  const std::size_t n = input.n(), c = input.c(), h = input.h(), w = input.w();
  Tensor<T> out(input.shape());
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T invstd = T(1) / std::sqrt(running_var[ci] + eps);
    const T scale = gamma[ci] * invstd;
    const T shift = beta[ci] - running_mean[ci] * scale;
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi)
          out.at4(ni, ci, hi, wi) = input.at4(ni, ci, hi, wi) * scale + shift;
  }
  return out;
}

template <class T>
BatchNormTrainResult<T> batch_norm_train(const Tensor<T>& input, const Tensor<T>& gamma,
                                         const Tensor<T>& beta, const Tensor<T>& running_mean,
                                         const Tensor<T>& running_var, T eps, T momentum) {
  check_bn_shapes(input, gamma, beta, running_mean, running_var, static_cast<double>(eps));
  const std::size_t n = input.n(), c = input.c(), h = input.h(), w = input.w();
  const std::size_t m = n * h * w;
  detail::require(m >= 2, "batch_norm train mode needs N*H*W >= 2 per channel");

  BatchNormTrainResult<T> r{Tensor<T>(input.shape()), Tensor<T>({c}), Tensor<T>({c}),
                            Tensor<T>({c}), Tensor<T>({c})};
  for (std::size_t ci = 0; ci < c; ++ci) {
    T sum = 0;
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi) sum += input.at4(ni, ci, hi, wi);
    const T mean = sum / static_cast<T>(m);
    T sq = 0;
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi) {
          const T d = input.at4(ni, ci, hi, wi) - mean;
          sq += d * d;
        }
    const T var = sq / static_cast<T>(m);
    const T invstd = T(1) / std::sqrt(var + eps);
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi)
          r.output.at4(ni, ci, hi, wi) =
              gamma[ci] * (input.at4(ni, ci, hi, wi) - mean) * invstd + beta[ci];
    r.batch_mean[ci] = mean;
    r.batch_var[ci] = var;
    const T unbiased = sq / static_cast<T>(m - 1);
    r.new_running_mean[ci] = (T(1) - momentum) * running_mean[ci] + momentum * mean;
    r.new_running_var[ci] = (T(1) - momentum) * running_var[ci] + momentum * unbiased;
  }
  return r;
}

// ---------------------------------------------------------------------------
// activations

template <class T>
T sigmoid_scalar(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid_scalar(x[i]);
  return out;
}

// tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T k = std::sqrt(T(2) / std::numbers::pi_v<T>);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + T(0.044715) * v * v * v)));
  }
  return out;
}

// Max-subtraction stabilized softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax axis out of range");
  const Shape& s = x.shape();
  std::size_t inner = 1, outer = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  const std::size_t extent = s[axis];

  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < extent; ++k) mx = std::max(mx, x[base + k * inner]);
      T denom = 0;
      for (std::size_t k = 0; k < extent; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        denom += e;
      }
      for (std::size_t k = 0; k < extent; ++k) out[base + k * inner] /= denom;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling

// Average over the full kernel area; padded cells count as zeros.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride,
                     std::size_t padding) {
  detail::require_rank4(x.shape(), "avg_pool input");
  detail::require(kernel >= 1 && stride >= 1, "pool kernel/stride must be >= 1");
  detail::require(padding < kernel, "pool padding must be < kernel");
  const std::size_t n = x.n(), c = x.c(), h = x.h(), w = x.w();
  const std::size_t hout = conv_output_extent(h, kernel, stride, padding, 1);
  const std::size_t wout = conv_output_extent(w, kernel, stride, padding, 1);
  const T area = static_cast<T>(kernel * kernel);

  Tensor<T> out({n, c, hout, wout});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < hout; ++oh)
        for (std::size_t ow = 0; ow < wout; ++ow) {
          T acc = 0;
          for (std::size_t kh = 0; kh < kernel; ++kh) {
            const long long ih =
                static_cast<long long>(oh * stride + kh) - static_cast<long long>(padding);
            if (ih < 0 || ih >= static_cast<long long>(h)) continue;
            for (std::size_t kw = 0; kw < kernel; ++kw) {
              const long long iw =
                  static_cast<long long>(ow * stride + kw) - static_cast<long long>(padding);
              if (iw < 0 || iw >= static_cast<long long>(w)) continue;
              acc += x.at4(ni, ci, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw));
            }
          }
          out.at4(ni, ci, oh, ow) = acc / area;
        }
  return out;
}

template <class T>
struct MaxPoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element; first max wins
};

template <class T>
MaxPoolResult<T> max_pool2d_with_indices(const Tensor<T>& x, std::size_t kernel,
                                         std::size_t stride, std::size_t padding) {
  detail::require_rank4(x.shape(), "max_pool input");
  detail::require(kernel >= 1 && stride >= 1, "pool kernel/stride must be >= 1");
  detail::require(padding < kernel, "pool padding must be < kernel");
  const std::size_t n = x.n(), c = x.c(), h = x.h(), w = x.w();
  const std::size_t hout = conv_output_extent(h, kernel, stride, padding, 1);
  const std::size_t wout = conv_output_extent(w, kernel, stride, padding, 1);

  MaxPoolResult<T> r{Tensor<T>({n, c, hout, wout}), {}};
  r.argmax.resize(r.output.size());
  std::size_t oi = 0;
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < hout; ++oh)
        for (std::size_t ow = 0; ow < wout; ++ow, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t kh = 0; kh < kernel; ++kh) {
            const long long ih =
                static_cast<long long>(oh * stride + kh) - static_cast<long long>(padding);
            if (ih < 0 || ih >= static_cast<long long>(h)) continue;
            for (std::size_t kw = 0; kw < kernel; ++kw) {
              const long long iw =
                  static_cast<long long>(ow * stride + kw) - static_cast<long long>(padding);
              if (iw < 0 || iw >= static_cast<long long>(w)) continue;
              const std::size_t idx =
                  x.idx4(ni, ci, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw));
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          r.output[oi] = best;
          r.argmax[oi] = best_idx;
        }
  return r;
}

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride,
                     std::size_t padding) {
  return max_pool2d_with_indices(x, kernel, stride, padding).output;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "global_avg_pool input");
  const std::size_t n = x.n(), c = x.c(), h = x.h(), w = x.w();
  Tensor<T> out({n, c, 1, 1});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci) {
      T acc = 0;
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi) acc += x.at4(ni, ci, hi, wi);
      out.at4(ni, ci, 0, 0) = acc / static_cast<T>(h * w);
    }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <class T>
Tensor<T> concat_views(const std::vector<const Tensor<T>*>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat needs at least one tensor");
  const Shape& first = parts[0]->shape();
  detail::require(axis < first.size(), "concat axis out of range");
  std::size_t total = 0;
  for (const Tensor<T>* t : parts) {
    detail::require(t->rank() == first.size(), "concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis)
        detail::require(t->extent(d) == first[d],
                        "concat extents mismatch off-axis at dim " + std::to_string(d));
    total += t->extent(axis);
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  Tensor<T> out(out_shape);

  std::size_t inner = 1, outer = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];

  std::size_t offset = 0;
  for (const Tensor<T>* t : parts) {
    const std::size_t ext = t->extent(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = t->data() + o * ext * inner;
      T* dst = out.data() + (o * total + offset) * inner;
      std::copy(src, src + ext * inner, dst);
    }
    offset += ext;
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  std::vector<const Tensor<T>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& t : parts) ptrs.push_back(&t);
  return concat_views(ptrs, axis);
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes,
                             std::size_t axis) {
  detail::require(axis < x.rank(), "split axis out of range");
  std::size_t total = 0;
  for (std::size_t s : sizes) {
    detail::require(s >= 1, "split sizes must be >= 1");
    total += s;
  }
  detail::require(total == x.extent(axis), "split sizes do not sum to the axis extent");

  std::size_t inner = 1, outer = 1;
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.extent(d);
  for (std::size_t d = 0; d < axis; ++d) outer *= x.extent(d);

  std::vector<Tensor<T>> out;
  out.reserve(sizes.size());
  std::size_t offset = 0;
  for (std::size_t s : sizes) {
    Shape part_shape = x.shape();
    part_shape[axis] = s;
    Tensor<T> part(part_shape);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = x.data() + (o * x.extent(axis) + offset) * inner;
      std::copy(src, src + s * inner, part.data() + o * s * inner);
    }
    offset += s;
    out.push_back(std::move(part));
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  check_shape_valid(new_shape);
  detail::require(numel(new_shape) == x.size(),
                  "reshape element count mismatch: " + shape_str(x.shape()) + " -> " +
                      shape_str(new_shape));
  std::vector<T> data(x.data(), x.data() + x.size());
  return Tensor<T>(std::move(new_shape), std::move(data));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.same_shape(b), "add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                       shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

namespace detail {

// Broadcast index machinery for same-rank shapes where differing extents must
// be 1 on one side.
struct BroadcastPlan {
  Shape out_shape;
  std::array<std::size_t, 4> out_ext{1, 1, 1, 1};
  std::array<std::size_t, 4> a_stride{0, 0, 0, 0};
  std::array<std::size_t, 4> b_stride{0, 0, 0, 0};
  std::size_t rank = 0;
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  require(a.size() == b.size(), "broadcast requires equal ranks");
  BroadcastPlan plan;
  plan.rank = a.size();
  plan.out_shape.resize(plan.rank);
  for (std::size_t d = 0; d < plan.rank; ++d) {
    require(a[d] == b[d] || a[d] == 1 || b[d] == 1,
            "broadcast incompatible at dim " + std::to_string(d) + ": " + shape_str(a) + " vs " +
                shape_str(b));
    plan.out_shape[d] = std::max(a[d], b[d]);
    plan.out_ext[d] = plan.out_shape[d];
  }
  std::size_t astride = 1, bstride = 1;
  for (std::size_t d = plan.rank; d-- > 0;) {
    plan.a_stride[d] = (a[d] == 1 && plan.out_shape[d] > 1) ? 0 : astride;
    plan.b_stride[d] = (b[d] == 1 && plan.out_shape[d] > 1) ? 0 : bstride;
    astride *= a[d];
    bstride *= b[d];
  }
  return plan;
}

template <class Body>
void for_each_broadcast(const BroadcastPlan& p, Body&& body) {
  std::array<std::size_t, 4> ext{1, 1, 1, 1};
  for (std::size_t d = 0; d < p.rank; ++d) ext[d] = p.out_ext[d];
  std::size_t oi = 0;
  for (std::size_t i0 = 0; i0 < ext[0]; ++i0)
    for (std::size_t i1 = 0; i1 < ext[1]; ++i1)
      for (std::size_t i2 = 0; i2 < ext[2]; ++i2)
        for (std::size_t i3 = 0; i3 < ext[3]; ++i3, ++oi) {
          const std::size_t ai = i0 * p.a_stride[0] + i1 * p.a_stride[1] + i2 * p.a_stride[2] +
                                 i3 * p.a_stride[3];
          const std::size_t bi = i0 * p.b_stride[0] + i1 * p.b_stride[1] + i2 * p.b_stride[2] +
                                 i3 * p.b_stride[3];
          body(oi, ai, bi);
        }
}

}  // namespace detail

// Elementwise product with broadcasting over size-1 extents (equal ranks).
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape());
  Tensor<T> out(plan.out_shape);
  detail::for_each_broadcast(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
    out[oi] = a[ai] * b[bi];
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return out;
}

// Nearest-neighbor spatial upsampling by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  detail::require_rank4(x.shape(), "upsample input");
  detail::require(factor >= 1, "upsample factor must be >= 1");
  const std::size_t n = x.n(), c = x.c(), h = x.h(), w = x.w();
  Tensor<T> out({n, c, h * factor, w * factor});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oh = 0; oh < h * factor; ++oh)
        for (std::size_t ow = 0; ow < w * factor; ++ow)
          out.at4(ni, ci, oh, ow) = x.at4(ni, ci, oh / factor, ow / factor);
  return out;
}

// Zero padding on the bottom/right spatial edges.
template <class T>
Tensor<T> pad_bottom_right(const Tensor<T>& x, std::size_t pad_h, std::size_t pad_w) {
  detail::require_rank4(x.shape(), "pad input");
  Tensor<T> out({x.n(), x.c(), x.h() + pad_h, x.w() + pad_w});
  for (std::size_t ni = 0; ni < x.n(); ++ni)
    for (std::size_t ci = 0; ci < x.c(); ++ci)
      for (std::size_t hi = 0; hi < x.h(); ++hi)
        for (std::size_t wi = 0; wi < x.w(); ++wi)
          out.at4(ni, ci, hi, wi) = x.at4(ni, ci, hi, wi);
  return out;
}

// Per-position mean / max over the channel axis -> [N,1,H,W].
template <class T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "channel_mean input");
  Tensor<T> out({x.n(), 1, x.h(), x.w()});
  for (std::size_t ni = 0; ni < x.n(); ++ni)
    for (std::size_t hi = 0; hi < x.h(); ++hi)
      for (std::size_t wi = 0; wi < x.w(); ++wi) {
        T acc = 0;
        for (std::size_t ci = 0; ci < x.c(); ++ci) acc += x.at4(ni, ci, hi, wi);
        out.at4(ni, 0, hi, wi) = acc / static_cast<T>(x.c());
      }
  return out;
}

template <class T>
struct ChannelMaxResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // winning channel per (n,h,w); first max wins
};

template <class T>
ChannelMaxResult<T> channel_max_with_indices(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "channel_max input");
  ChannelMaxResult<T> r{Tensor<T>({x.n(), 1, x.h(), x.w()}), {}};
  r.argmax.resize(r.output.size());
  std::size_t oi = 0;
  for (std::size_t ni = 0; ni < x.n(); ++ni)
    for (std::size_t hi = 0; hi < x.h(); ++hi)
      for (std::size_t wi = 0; wi < x.w(); ++wi, ++oi) {
        T best = x.at4(ni, 0, hi, wi);
        std::size_t best_c = 0;
        for (std::size_t ci = 1; ci < x.c(); ++ci) {
          const T v = x.at4(ni, ci, hi, wi);
          if (v > best) {
            best = v;
            best_c = ci;
          }
        }
        r.output[oi] = best;
        r.argmax[oi] = best_c;
      }
  return r;
}

// ---------------------------------------------------------------------------
// random fills

struct FillKaimingUniform {
  std::size_t fan_in;  // (Cin/groups)*kh*kw for conv weights
};
struct FillConstant {
  double value;
};
struct FillUniform {
  double lo, hi;
};
using FillScheme = std::variant<FillKaimingUniform, FillConstant, FillUniform>;

template <class T>
Tensor<T> rng_fill(Rng& rng, Shape shape, const FillScheme& scheme) {
  Tensor<T> t(std::move(shape));
  if (std::holds_alternative<FillConstant>(scheme)) {
    const T v = static_cast<T>(std::get<FillConstant>(scheme).value);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = v;
    return t;
  }
  double lo, hi;
  if (std::holds_alternative<FillKaimingUniform>(scheme)) {
    const auto& k = std::get<FillKaimingUniform>(scheme);
    detail::require(k.fan_in >= 1, "kaiming fan_in must be >= 1");
    const double bound = std::sqrt(6.0 / static_cast<double>(k.fan_in));
    lo = -bound;
    hi = bound;
  } else {
    lo = std::get<FillUniform>(scheme).lo;
    hi = std::get<FillUniform>(scheme).hi;
  }
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace msv
