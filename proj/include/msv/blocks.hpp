#pragma once

// The network building blocks: CBS (conv+BN+SiLU), the dilation-wise residual
// unit (DWR), the multi-scale dilated residual module (MS-DRM), the dynamic
// cross-path feature enhancement module (DCFEM) and the light adaptive-weight
// downsampling module (LADS). Blocks are expressed once over the tape so the
// same wiring serves inference, training and gradient checks.

#include <map>
#include <string>
#include <vector>

#include "msv/autodiff.hpp"
#include "msv/ops.hpp"
#include "msv/tensor.hpp"

namespace msv {

// ---------------------------------------------------------------------------
// parameter store

template <class T>
struct ParamStore {
  std::map<std::string, Tensor<T>> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("missing weight tensor '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("missing weight tensor '" + name + "'");
    return it->second;
  }
};

struct ParamInfo {
  enum class Kind { weight, bias, bn_gamma, bn_beta, bn_running_mean, bn_running_var };
  std::string name;
  Shape shape;
  Kind kind = Kind::weight;
  std::size_t fan_in = 0;  // kaiming bound input for conv weights

  bool learned() const {
    return kind != Kind::bn_running_mean && kind != Kind::bn_running_var;
  }
};

inline std::size_t count_learned(const std::vector<ParamInfo>& infos) {
  std::size_t n = 0;
  for (const auto& p : infos)
    if (p.learned()) n += numel(p.shape);
  return n;
}

inline std::size_t count_running(const std::vector<ParamInfo>& infos) {
  std::size_t n = 0;
  for (const auto& p : infos)
    if (!p.learned()) n += numel(p.shape);
  return n;
}

// Deterministic initialization in spec order: conv weights kaiming-uniform,
// biases and beta zero, gamma and running variance one, running mean zero.
template <class T>
void init_params(ParamStore<T>& store, const std::vector<ParamInfo>& infos, Rng& rng) {
  for (const auto& p : infos) {
    switch (p.kind) {
      case ParamInfo::Kind::weight:
        store.tensors[p.name] = rng_fill<T>(rng, p.shape, FillKaimingUniform{p.fan_in});
        break;
      case ParamInfo::Kind::bias:
      case ParamInfo::Kind::bn_beta:
      case ParamInfo::Kind::bn_running_mean:
        store.tensors[p.name] = Tensor<T>(p.shape);
        break;
      case ParamInfo::Kind::bn_gamma:
      case ParamInfo::Kind::bn_running_var:
        store.tensors[p.name] = Tensor<T>::full(p.shape, T(1));
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// forward context

template <class T>
struct BlockCtx {
  BlockCtx(Tape<T>& t, const ParamStore<T>& p) : tape(t), params(p) {}

  Tape<T>& tape;
  const ParamStore<T>& params;
  bool training = false;
  bool trainable = true;  // whether weights are registered as trainable leaves
  T bn_eps = T(1e-5);
  T bn_momentum = T(0.1);
  unsigned threads = 1;

  // batch statistics produced during a training forward, to be folded into
  // the store's running stats after the optimizer step
  std::vector<std::pair<std::string, Tensor<T>>> bn_stat_updates;

  Var param(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var v = tape.leaf(params.at(name), name, trainable);
    cache_.emplace(name, v);
    return v;
  }

 private:
  std::map<std::string, Var> cache_;
};

namespace blockdetail {

template <class T>
Var conv(BlockCtx<T>& ctx, Var x, const std::string& prefix, const ConvParams& p) {
  Var w = ctx.param(prefix + ".weight");
  std::optional<Var> b;
  if (p.has_bias) b = ctx.param(prefix + ".bias");
  return ctx.tape.conv2d(x, w, b, p, ctx.threads);
}

template <class T>
Var bn(BlockCtx<T>& ctx, Var x, const std::string& prefix) {
  Var gamma = ctx.param(prefix + ".gamma");
  Var beta = ctx.param(prefix + ".beta");
  const Tensor<T>& rm = ctx.params.at(prefix + ".running_mean");
  const Tensor<T>& rv = ctx.params.at(prefix + ".running_var");
  if (ctx.training) {
    auto r = ctx.tape.batch_norm_train(x, gamma, beta, rm, rv, ctx.bn_eps, ctx.bn_momentum);
    ctx.bn_stat_updates.emplace_back(prefix + ".running_mean", std::move(r.new_running_mean));
    ctx.bn_stat_updates.emplace_back(prefix + ".running_var", std::move(r.new_running_var));
    return r.out;
  }
  return ctx.tape.batch_norm_infer(x, gamma, beta, rm, rv, ctx.bn_eps);
}

inline void add_conv_specs(std::vector<ParamInfo>& out, const std::string& prefix,
                           std::size_t cout, std::size_t cin_per_group, std::size_t kh,
                           std::size_t kw, bool bias) {
  out.push_back({prefix + ".weight",
                 Shape{cout, cin_per_group, kh, kw},
                 ParamInfo::Kind::weight,
                 cin_per_group * kh * kw});
  if (bias) out.push_back({prefix + ".bias", Shape{cout}, ParamInfo::Kind::bias});
}

inline void add_bn_specs(std::vector<ParamInfo>& out, const std::string& prefix, std::size_t c) {
  out.push_back({prefix + ".gamma", Shape{c}, ParamInfo::Kind::bn_gamma});
  out.push_back({prefix + ".beta", Shape{c}, ParamInfo::Kind::bn_beta});
  out.push_back({prefix + ".running_mean", Shape{c}, ParamInfo::Kind::bn_running_mean});
  out.push_back({prefix + ".running_var", Shape{c}, ParamInfo::Kind::bn_running_var});
}

// FLOP accounting constants, shared by every block and the graph counters:
//   1 multiply-accumulate = 2 FLOPs (conv bias excluded),
//   BN = 2 FLOPs/element, activations and softmax = 4 FLOPs/element,
//   pooling = window-size FLOPs per output element, elementwise = 1/element.
inline std::size_t conv_flops(std::size_t n, std::size_t cout, std::size_t cin_per_group,
                              std::size_t kh, std::size_t kw, std::size_t hout,
                              std::size_t wout) {
  return 2 * n * cout * cin_per_group * kh * kw * hout * wout;
}

}  // namespace blockdetail

// ---------------------------------------------------------------------------
// CBS: conv -> BN -> SiLU

struct CbsConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding_auto = 1;  // derived: kernel/2 unless overridden
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool conv_bias = false;  // BN absorbs the shift

  static CbsConfig make(std::size_t cin, std::size_t cout, std::size_t kernel = 3,
                        std::size_t stride = 1) {
    CbsConfig c;
    c.in_channels = cin;
    c.out_channels = cout;
    c.kernel = kernel;
    c.stride = stride;
    c.padding_auto = kernel / 2;
    return c;
  }

  ConvParams conv_params() const {
    return ConvParams{out_channels, kernel,   kernel, stride,
                      padding_auto, dilation, groups, conv_bias};
  }

  void validate() const {
    detail::require(in_channels >= 1 && out_channels >= 1, "cbs: channels must be >= 1");
    detail::require(in_channels % groups == 0 && out_channels % groups == 0,
                    "cbs: channels must be divisible by groups");
  }
};

inline std::vector<ParamInfo> cbs_param_specs(const std::string& prefix, const CbsConfig& cfg) {
  cfg.validate();
  std::vector<ParamInfo> out;
  blockdetail::add_conv_specs(out, prefix + ".conv", cfg.out_channels,
                              cfg.in_channels / cfg.groups, cfg.kernel, cfg.kernel,
                              cfg.conv_bias);
  blockdetail::add_bn_specs(out, prefix + ".bn", cfg.out_channels);
  return out;
}

template <class T>
Var cbs_forward(BlockCtx<T>& ctx, Var x, const CbsConfig& cfg, const std::string& prefix) {
  cfg.validate();
  Var y = blockdetail::conv(ctx, x, prefix + ".conv", cfg.conv_params());
  y = blockdetail::bn(ctx, y, prefix + ".bn");
  return ctx.tape.silu(y);
}

inline std::size_t cbs_flops(const CbsConfig& cfg, std::size_t n, std::size_t h, std::size_t w) {
  const std::size_t hout =
      conv_output_extent(h, cfg.kernel, cfg.stride, cfg.padding_auto, cfg.dilation);
  const std::size_t wout =
      conv_output_extent(w, cfg.kernel, cfg.stride, cfg.padding_auto, cfg.dilation);
  const std::size_t elems = n * cfg.out_channels * hout * wout;
  return blockdetail::conv_flops(n, cfg.out_channels, cfg.in_channels / cfg.groups, cfg.kernel,
                                 cfg.kernel, hout, wout) +
         2 * elems + 4 * elems;
}

// ---------------------------------------------------------------------------
// DWR: region residualization then parallel dilated depthwise branches

struct DwrConfig {
  std::size_t channels = 0;
  std::vector<std::size_t> dilations{1, 3, 5};
  std::vector<std::size_t> allocation{};  // empty -> near-equal split

  // Near-equal split of channels across branches, remainder to the leading
  // branches.
  std::vector<std::size_t> resolved_allocation() const {
    if (!allocation.empty()) return allocation;
    const std::size_t k = dilations.size();
    std::vector<std::size_t> out(k, channels / k);
    for (std::size_t i = 0; i < channels % k; ++i) out[i] += 1;
    return out;
  }

  void validate() const {
    detail::require(!dilations.empty(), "dwr: dilation list must be non-empty");
    detail::require(channels >= dilations.size(), "dwr: channels must cover every branch");
    for (std::size_t d : dilations) detail::require(d >= 1, "dwr: dilations must be >= 1");
    const auto alloc = resolved_allocation();
    detail::require(alloc.size() == dilations.size(),
                    "dwr: allocation size must match dilation count");
    std::size_t total = 0;
    for (std::size_t a : alloc) {
      detail::require(a >= 1, "dwr: every branch needs at least one channel");
      total += a;
    }
    detail::require(total == channels, "dwr: allocation must sum to channels");
  }
};

inline std::vector<ParamInfo> dwr_param_specs(const std::string& prefix, const DwrConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels;
  std::vector<ParamInfo> out;
  blockdetail::add_conv_specs(out, prefix + ".region.conv", c, c, 3, 3, false);
  blockdetail::add_bn_specs(out, prefix + ".region.bn", c);
  const auto alloc = cfg.resolved_allocation();
  for (std::size_t i = 0; i < alloc.size(); ++i)
    blockdetail::add_conv_specs(out, prefix + ".branch" + std::to_string(i), alloc[i], 1, 3, 3,
                                false);
  blockdetail::add_bn_specs(out, prefix + ".fuse.bn", c);
  blockdetail::add_conv_specs(out, prefix + ".fuse.conv", c, c, 1, 1, true);
  return out;
}

template <class T>
Var dwr_forward(BlockCtx<T>& ctx, Var x, const DwrConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const std::size_t c = cfg.channels;
  detail::require(ctx.tape.value(x).rank() == 4 && ctx.tape.value(x).c() == c,
                  "dwr: input channels do not match the configuration");

  Var region = blockdetail::conv(ctx, x, prefix + ".region.conv",
                                 ConvParams{c, 3, 3, 1, 1, 1, 1, false});
  region = blockdetail::bn(ctx, region, prefix + ".region.bn");
  region = ctx.tape.silu(region);

  const auto alloc = cfg.resolved_allocation();
  auto groups = ctx.tape.split(region, alloc, 1);
  std::vector<Var> branches;
  branches.reserve(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const std::size_t d = cfg.dilations[i];
    // padding = dilation keeps the 3x3 branch shape-preserving
    branches.push_back(blockdetail::conv(ctx, groups[i], prefix + ".branch" + std::to_string(i),
                                         ConvParams{alloc[i], 3, 3, 1, d, d, alloc[i], false}));
  }
  Var fused = ctx.tape.concat(branches, 1);
  fused = blockdetail::bn(ctx, fused, prefix + ".fuse.bn");
  fused = blockdetail::conv(ctx, fused, prefix + ".fuse.conv",
                            ConvParams{c, 1, 1, 1, 0, 1, 1, true});
  return ctx.tape.add(x, fused);
}

inline std::size_t dwr_flops(const DwrConfig& cfg, std::size_t n, std::size_t h, std::size_t w) {
  const std::size_t c = cfg.channels;
  const std::size_t elems = n * c * h * w;
  std::size_t f = 0;
  f += blockdetail::conv_flops(n, c, c, 3, 3, h, w);  // region conv
  f += 2 * elems + 4 * elems;                         // region BN + SiLU
  for (std::size_t a : cfg.resolved_allocation())
    f += blockdetail::conv_flops(n, a, 1, 3, 3, h, w);  // dilated depthwise branches
  f += 2 * elems;                                       // fuse BN
  f += blockdetail::conv_flops(n, c, c, 1, 1, h, w);    // fuse 1x1
  f += elems;                                           // residual add
  return f;
}

// ---------------------------------------------------------------------------
// MS-DRM: split-transform-merge wrapper with DWR units on the second half

struct MsDrmConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t hidden = 0;
  std::size_t units = 1;
  std::vector<std::size_t> dilations{1, 3, 5};

  static MsDrmConfig make(std::size_t cin, std::size_t cout, std::size_t hidden,
                          std::size_t units = 1) {
    MsDrmConfig c;
    c.in_channels = cin;
    c.out_channels = cout;
    c.hidden = hidden;
    c.units = units;
    return c;
  }

  DwrConfig unit_config() const { return DwrConfig{hidden, dilations, {}}; }

  void validate() const {
    detail::require(in_channels >= 1 && out_channels >= 1, "msdrm: channels must be >= 1");
    detail::require(units >= 1, "msdrm: unit count must be >= 1");
    detail::require(hidden >= dilations.size(),
                    "msdrm: hidden width must cover the DWR branch count");
    unit_config().validate();
  }
};

inline std::vector<ParamInfo> msdrm_param_specs(const std::string& prefix,
                                                const MsDrmConfig& cfg) {
  cfg.validate();
  std::vector<ParamInfo> out;
  blockdetail::add_conv_specs(out, prefix + ".cv_in", 2 * cfg.hidden, cfg.in_channels, 1, 1,
                              true);
  for (std::size_t u = 0; u < cfg.units; ++u) {
    auto unit = dwr_param_specs(prefix + ".unit" + std::to_string(u), cfg.unit_config());
    out.insert(out.end(), unit.begin(), unit.end());
  }
  blockdetail::add_conv_specs(out, prefix + ".cv_out", cfg.out_channels,
                              (2 + cfg.units) * cfg.hidden, 1, 1, true);
  return out;
}

template <class T>
Var msdrm_forward(BlockCtx<T>& ctx, Var x, const MsDrmConfig& cfg, const std::string& prefix) {
  cfg.validate();
  Var stem = blockdetail::conv(ctx, x, prefix + ".cv_in",
                               ConvParams{2 * cfg.hidden, 1, 1, 1, 0, 1, 1, true});
  auto halves = ctx.tape.split(stem, {cfg.hidden, cfg.hidden}, 1);
  std::vector<Var> parts{halves[0], halves[1]};
  Var current = halves[1];
  for (std::size_t u = 0; u < cfg.units; ++u) {
    current = dwr_forward(ctx, current, cfg.unit_config(), prefix + ".unit" + std::to_string(u));
    parts.push_back(current);
  }
  Var merged = ctx.tape.concat(parts, 1);
  return blockdetail::conv(ctx, merged, prefix + ".cv_out",
                           ConvParams{cfg.out_channels, 1, 1, 1, 0, 1, 1, true});
}

inline std::size_t msdrm_flops(const MsDrmConfig& cfg, std::size_t n, std::size_t h,
                               std::size_t w) {
  std::size_t f = 0;
  f += blockdetail::conv_flops(n, 2 * cfg.hidden, cfg.in_channels, 1, 1, h, w);
  f += cfg.units * dwr_flops(cfg.unit_config(), n, h, w);
  f += blockdetail::conv_flops(n, cfg.out_channels, (2 + cfg.units) * cfg.hidden, 1, 1, h, w);
  return f;
}

// ---------------------------------------------------------------------------
// DCFEM

struct DcfemConfig {
  std::size_t in_backbone = 0;  // channels of the backbone-path input
  std::size_t in_neck = 0;      // channels of the neck-path input
  std::size_t channels = 0;     // aligned width C
  std::size_t spatial_kernel = 7;
  std::size_t reduction = 4;

  std::size_t bottleneck() const { return (2 * channels) / reduction; }

  void validate() const {
    detail::require(in_backbone >= 1 && in_neck >= 1 && channels >= 1,
                    "dcfem: channels must be >= 1");
    detail::require(channels >= reduction, "dcfem: channels must be >= reduction ratio");
    detail::require(spatial_kernel % 2 == 1, "dcfem: spatial kernel must be odd");
    detail::require(bottleneck() >= 1, "dcfem: bottleneck width must be >= 1");
  }
};

inline std::vector<ParamInfo> dcfem_param_specs(const std::string& prefix,
                                                const DcfemConfig& cfg) {
  cfg.validate();
  const std::size_t c2 = 2 * cfg.channels;
  const std::size_t hid = cfg.bottleneck();
  std::vector<ParamInfo> out;
  blockdetail::add_conv_specs(out, prefix + ".align_a", cfg.channels, cfg.in_backbone, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".align_b", cfg.channels, cfg.in_neck, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".local.dw", c2, 1, 3, 3, true);
  blockdetail::add_conv_specs(out, prefix + ".local.pw", c2, c2, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".global.fc1", hid, c2, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".global.fc2", c2, hid, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".weights.fc1", hid, c2, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".weights.fc2", 2, hid, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".se.fc1", hid, c2, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".se.fc2", c2, hid, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".spatial.conv", 1, 2, cfg.spatial_kernel,
                              cfg.spatial_kernel, true);
  return out;
}

template <class T>
struct DcfemOut {
  Var backbone;  // enhanced backbone-path features, C channels
  Var neck;      // enhanced neck-path features, C channels
  Var weight_local;
  Var weight_global;
  Var local;   // local-branch features, 2C channels
  Var global;  // global-branch features, 2C channels at 1x1
  Var fused;
};

template <class T>
DcfemOut<T> dcfem_forward(BlockCtx<T>& ctx, Var backbone_feat, Var neck_feat,
                          const DcfemConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const Tensor<T>& av = ctx.tape.value(backbone_feat);
  const Tensor<T>& bv = ctx.tape.value(neck_feat);
  detail::require(av.rank() == 4 && bv.rank() == 4, "dcfem: inputs must be rank 4");
  detail::require(av.h() == bv.h() && av.w() == bv.w(),
                  "dcfem: spatial sizes of the two paths must match");
  detail::require(av.c() == cfg.in_backbone && bv.c() == cfg.in_neck,
                  "dcfem: input channels do not match the configuration");

  const std::size_t c = cfg.channels;
  const std::size_t c2 = 2 * c;
  const std::size_t hid = cfg.bottleneck();
  Tape<T>& tp = ctx.tape;

  Var a = blockdetail::conv(ctx, backbone_feat, prefix + ".align_a",
                            ConvParams{c, 1, 1, 1, 0, 1, 1, true});
  Var b = blockdetail::conv(ctx, neck_feat, prefix + ".align_b",
                            ConvParams{c, 1, 1, 1, 0, 1, 1, true});
  Var cat = tp.concat({a, b}, 1);

  // local branch: depthwise 3x3 then pointwise 1x1 over the 2C channels
  Var local = blockdetail::conv(ctx, cat, prefix + ".local.dw",
                                ConvParams{c2, 3, 3, 1, 1, 1, c2, true});
  local = blockdetail::conv(ctx, local, prefix + ".local.pw",
                            ConvParams{c2, 1, 1, 1, 0, 1, 1, true});

  // global branch: squeeze to 1x1, bottleneck, GELU, expand back
  Var global = tp.global_avg_pool(cat);
  global = blockdetail::conv(ctx, global, prefix + ".global.fc1",
                             ConvParams{hid, 1, 1, 1, 0, 1, 1, true});
  global = tp.gelu(global);
  global = blockdetail::conv(ctx, global, prefix + ".global.fc2",
                             ConvParams{c2, 1, 1, 1, 0, 1, 1, true});

  // dynamic weights: two logits per location, softmax across them
  Var logits = blockdetail::conv(ctx, cat, prefix + ".weights.fc1",
                                 ConvParams{hid, 1, 1, 1, 0, 1, 1, true});
  logits = tp.gelu(logits);
  logits = blockdetail::conv(ctx, logits, prefix + ".weights.fc2",
                             ConvParams{2, 1, 1, 1, 0, 1, 1, true});
  Var weights = tp.softmax(logits, 1);
  auto weight_parts = tp.split(weights, {1, 1}, 1);
  Var w_local = weight_parts[0];
  Var w_global = weight_parts[1];

  // fused = w_local (.) local + w_global (.) global (broadcast to HxW)
  Var fused = tp.add(tp.mul(local, w_local), tp.mul(global, w_global));

  // calibration: channel attention, then single-map spatial attention
  Var se = tp.global_avg_pool(fused);
  se = blockdetail::conv(ctx, se, prefix + ".se.fc1", ConvParams{hid, 1, 1, 1, 0, 1, 1, true});
  se = tp.silu(se);
  se = blockdetail::conv(ctx, se, prefix + ".se.fc2", ConvParams{c2, 1, 1, 1, 0, 1, 1, true});
  se = tp.sigmoid(se);
  Var calibrated = tp.mul(fused, se);

  Var pooled = tp.concat({tp.channel_mean(calibrated), tp.channel_max(calibrated)}, 1);
  Var gate = blockdetail::conv(
      ctx, pooled, prefix + ".spatial.conv",
      ConvParams{1, cfg.spatial_kernel, cfg.spatial_kernel, 1, (cfg.spatial_kernel - 1) / 2, 1, 1,
                 true});
  gate = tp.sigmoid(gate);
  calibrated = tp.mul(calibrated, gate);

  // residual refinement, then decouple into the two path groups
  calibrated = tp.add(calibrated, fused);
  auto halves = tp.split(calibrated, {c, c}, 1);
  return DcfemOut<T>{tp.add(a, halves[0]), tp.add(b, halves[1]),
                     w_local,              w_global,
                     local,                global,
                     fused};
}

inline std::size_t dcfem_flops(const DcfemConfig& cfg, std::size_t n, std::size_t h,
                               std::size_t w) {
  const std::size_t c = cfg.channels, c2 = 2 * c, hid = cfg.bottleneck();
  const std::size_t hw = h * w;
  const std::size_t map = n * c2 * hw;  // elements in a 2C-wide feature map
  std::size_t f = 0;
  f += blockdetail::conv_flops(n, c, cfg.in_backbone, 1, 1, h, w);  // align a
  f += blockdetail::conv_flops(n, c, cfg.in_neck, 1, 1, h, w);      // align b
  f += blockdetail::conv_flops(n, c2, 1, 3, 3, h, w);               // local depthwise
  f += blockdetail::conv_flops(n, c2, c2, 1, 1, h, w);              // local pointwise
  f += map;                                                         // global average pool
  f += blockdetail::conv_flops(n, hid, c2, 1, 1, 1, 1) + 4 * n * hid;
  f += blockdetail::conv_flops(n, c2, hid, 1, 1, 1, 1);
  f += blockdetail::conv_flops(n, hid, c2, 1, 1, h, w) + 4 * n * hid * hw;  // weight path
  f += blockdetail::conv_flops(n, 2, hid, 1, 1, h, w) + 4 * n * 2 * hw;     // logits + softmax
  f += 3 * map;                                                             // fuse mul/mul/add
  f += map;                                                                 // SE squeeze
  f += blockdetail::conv_flops(n, hid, c2, 1, 1, 1, 1) + 4 * n * hid;
  f += blockdetail::conv_flops(n, c2, hid, 1, 1, 1, 1) + 4 * n * c2;
  f += map;                                                // SE gate mul
  f += 2 * map;                                            // channel mean + max maps
  f += blockdetail::conv_flops(n, 1, 2, cfg.spatial_kernel, cfg.spatial_kernel, h, w);
  f += 4 * n * hw + map;                                   // spatial sigmoid + gate mul
  f += map;                                                // residual add
  f += 2 * n * c * hw;                                     // the two cross-path adds
  return f;
}

// ---------------------------------------------------------------------------
// LADS

struct LadsConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;  // conventionally 2*in_channels
  std::size_t groups = 4;
  bool pad_odd = false;  // zero-pad odd H/W on the bottom/right edge

  static LadsConfig make(std::size_t cin, std::size_t cout = 0, std::size_t groups = 4) {
    LadsConfig c;
    c.in_channels = cin;
    c.out_channels = cout == 0 ? 2 * cin : cout;
    c.groups = groups;
    return c;
  }

  void validate() const {
    detail::require(in_channels >= 1 && out_channels >= 1, "lads: channels must be >= 1");
    detail::require(groups >= 1, "lads: groups must be >= 1");
    detail::require(in_channels % groups == 0, "lads: in_channels must be divisible by groups");
    detail::require((4 * out_channels) % groups == 0,
                    "lads: 4*out_channels must be divisible by groups");
  }
};

inline std::vector<ParamInfo> lads_param_specs(const std::string& prefix, const LadsConfig& cfg) {
  cfg.validate();
  std::vector<ParamInfo> out;
  blockdetail::add_conv_specs(out, prefix + ".attn.conv", 4, cfg.in_channels, 1, 1, true);
  blockdetail::add_conv_specs(out, prefix + ".main.conv", 4 * cfg.out_channels,
                              cfg.in_channels / cfg.groups, 3, 3, true);
  return out;
}

template <class T>
struct LadsOut {
  Var output;
  std::vector<Var> attention;  // the four per-location weights, each [N,1,H/2,W/2]
  std::vector<Var> subgroups;  // the four candidate features, each [N,Cout,H/2,W/2]
};

template <class T>
LadsOut<T> lads_forward_full(BlockCtx<T>& ctx, Var x, const LadsConfig& cfg,
                             const std::string& prefix) {
  cfg.validate();
  const Tensor<T>& xv = ctx.tape.value(x);
  detail::require(xv.rank() == 4 && xv.c() == cfg.in_channels,
                  "lads: input channels do not match the configuration");
  if (xv.h() % 2 != 0 || xv.w() % 2 != 0) {
    if (!cfg.pad_odd)
      throw std::invalid_argument("lads: spatial extents must be even (enable pad_odd to pad)");
    x = ctx.tape.pad_bottom_right(x, xv.h() % 2, xv.w() % 2);
  }
  Tape<T>& tp = ctx.tape;

  // branch 1: pooled attention map, softmax over the four 2x2 positions
  Var attn = tp.avg_pool(x, 3, 2, 1);
  attn = blockdetail::conv(ctx, attn, prefix + ".attn.conv",
                           ConvParams{4, 1, 1, 1, 0, 1, 1, true});
  attn = tp.softmax(attn, 1);
  auto weights = tp.split(attn, {1, 1, 1, 1}, 1);

  // branch 2: grouped 3x3 stride-2 conv to 4x the output width
  Var main = blockdetail::conv(
      ctx, x, prefix + ".main.conv",
      ConvParams{4 * cfg.out_channels, 3, 3, 2, 1, 1, cfg.groups, true});
  auto subs = tp.split(
      main, {cfg.out_channels, cfg.out_channels, cfg.out_channels, cfg.out_channels}, 1);

  Var acc = tp.mul(subs[0], weights[0]);
  for (std::size_t k = 1; k < 4; ++k) acc = tp.add(acc, tp.mul(subs[k], weights[k]));
  return LadsOut<T>{acc, std::move(weights), std::move(subs)};
}

template <class T>
Var lads_forward(BlockCtx<T>& ctx, Var x, const LadsConfig& cfg, const std::string& prefix) {
  return lads_forward_full(ctx, x, cfg, prefix).output;
}

inline std::size_t lads_flops(const LadsConfig& cfg, std::size_t n, std::size_t h,
                              std::size_t w) {
  const std::size_t h2 = (h + 1) / 2, w2 = (w + 1) / 2;
  const std::size_t hw2 = h2 * w2;
  std::size_t f = 0;
  f += 9 * n * cfg.in_channels * hw2;                                      // 3x3 avg pool
  f += blockdetail::conv_flops(n, 4, cfg.in_channels, 1, 1, h2, w2);       // attention 1x1
  f += 4 * n * 4 * hw2;                                                    // softmax
  f += blockdetail::conv_flops(n, 4 * cfg.out_channels, cfg.in_channels / cfg.groups, 3, 3, h2,
                               w2);                                        // grouped conv
  f += 7 * n * cfg.out_channels * hw2;  // 4 muls + 3 adds per output element
  return f;
}

// Closed-form comparison against a plain 3x3 stride-2 convolution with the
// same channel change.
struct LadsReport {
  std::size_t lads_params = 0;
  std::size_t lads_flops = 0;
  std::size_t baseline_params = 0;
  std::size_t baseline_flops = 0;
};

inline LadsReport lads_vs_strided_report(const LadsConfig& cfg, std::size_t h = 64,
                                         std::size_t w = 64, std::size_t n = 1) {
  cfg.validate();
  LadsReport r;
  r.lads_params = count_learned(lads_param_specs("lads", cfg));
  r.lads_flops = lads_flops(cfg, n, h, w);
  r.baseline_params = cfg.out_channels * cfg.in_channels * 9 + cfg.out_channels;
  const std::size_t h2 = (h + 1) / 2, w2 = (w + 1) / 2;
  r.baseline_flops = blockdetail::conv_flops(n, cfg.out_channels, cfg.in_channels, 3, 3, h2, w2);
  return r;
}

// ---------------------------------------------------------------------------
// plain-tensor entry points (scratch tape under the hood; bit-identical to
// composing the kernels by hand)

template <class T>
Tensor<T> cbs_forward(const Tensor<T>& x, const ParamStore<T>& params, const CbsConfig& cfg,
                      const std::string& prefix = "cbs") {
  Tape<T> tape;
  BlockCtx<T> ctx{tape, params};
  ctx.trainable = false;
  return tape.value(cbs_forward(ctx, tape.constant(x), cfg, prefix));
}

template <class T>
Tensor<T> dwr_forward(const Tensor<T>& x, const ParamStore<T>& params, const DwrConfig& cfg,
                      const std::string& prefix = "dwr") {
  Tape<T> tape;
  BlockCtx<T> ctx{tape, params};
  ctx.trainable = false;
  return tape.value(dwr_forward(ctx, tape.constant(x), cfg, prefix));
}

template <class T>
Tensor<T> msdrm_forward(const Tensor<T>& x, const ParamStore<T>& params, const MsDrmConfig& cfg,
                        const std::string& prefix = "msdrm") {
  Tape<T> tape;
  BlockCtx<T> ctx{tape, params};
  ctx.trainable = false;
  return tape.value(msdrm_forward(ctx, tape.constant(x), cfg, prefix));
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> dcfem_forward(const Tensor<T>& backbone_feat,
                                              const Tensor<T>& neck_feat,
                                              const ParamStore<T>& params,
                                              const DcfemConfig& cfg,
                                              const std::string& prefix = "dcfem") {
  Tape<T> tape;
  BlockCtx<T> ctx{tape, params};
  ctx.trainable = false;
  auto out =
      dcfem_forward(ctx, tape.constant(backbone_feat), tape.constant(neck_feat), cfg, prefix);
  return {tape.value(out.backbone), tape.value(out.neck)};
}

template <class T>
Tensor<T> lads_forward(const Tensor<T>& x, const ParamStore<T>& params, const LadsConfig& cfg,
                       const std::string& prefix = "lads") {
  Tape<T> tape;
  BlockCtx<T> ctx{tape, params};
  ctx.trainable = false;
  return tape.value(lads_forward(ctx, tape.constant(x), cfg, prefix));
}

}  // namespace msv
