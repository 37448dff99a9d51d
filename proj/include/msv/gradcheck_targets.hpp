#pragma once

// Named gradient-check targets: every tensor op and every block, driven from
// a seed. Losses are random projections of the outputs so the full Jacobian
// is exercised (a plain sum is blind to directions that cancel, e.g. through
// batch normalization).

#include <functional>
#include <string>
#include <vector>

#include "msv/autodiff.hpp"
#include "msv/blocks.hpp"
#include "msv/graph.hpp"

namespace msv {

inline const std::vector<std::string>& gradcheck_target_names() {
  static const std::vector<std::string> names = {
      "conv2d",   "batch_norm", "silu",    "gelu",  "sigmoid", "softmax",
      "avgpool",  "maxpool",    "globalavgpool",    "concat",  "split",
      "reshape",  "add",        "mul",     "sum",   "upsample",
      "cbs",      "dwr",        "msdrm",   "dcfem", "lads"};
  return names;
}

template <class T>
GradCheckReport run_gradcheck_target(const std::string& name, std::uint64_t seed,
                                     T step = gradcheck_step<T>(),
                                     T tolerance = gradcheck_tolerance<T>()) {
  Rng rng(seed ^ 0x9d2c5680u);
  const auto rand = [&](Shape s) { return rng_fill<T>(rng, std::move(s), FillUniform{-1, 1}); };
  using Fn = std::function<Var(Tape<T>&, const std::vector<Var>&)>;
  using Inputs = std::vector<std::pair<std::string, Tensor<T>>>;

  Fn fn;
  Inputs inputs;

  const auto project = [](Tape<T>& t, Var out, const Tensor<T>& proj) {
    return t.sum(t.mul(out, t.constant(proj)));
  };

  if (name == "conv2d") {
    ConvParams p{4, 3, 3, 1, 2, 2, 2, true};
    auto proj = rand({1, 4, 5, 5});
    fn = [p, proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.conv2d(v[0], v[1], v[2], p), proj);
    };
    inputs = {{"x", rand({1, 4, 5, 5})}, {"w", rand({4, 2, 3, 3})}, {"b", rand({4})}};
  } else if (name == "batch_norm") {
    auto proj = rand({2, 3, 3, 3});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      Tensor<T> rm({3}), rv = Tensor<T>::full({3}, T(1));
      auto r = t.batch_norm_train(v[0], v[1], v[2], rm, rv, T(1e-5), T(0.1));
      return project(t, r.out, proj);
    };
    inputs = {{"x", rand({2, 3, 3, 3})},
              {"gamma", rng_fill<T>(rng, {3}, FillUniform{0.5, 1.5})},
              {"beta", rand({3})}};
  } else if (name == "silu" || name == "gelu" || name == "sigmoid") {
    auto proj = rand({1, 3, 4, 4});
    fn = [name, proj, project](Tape<T>& t, const std::vector<Var>& v) {
      Var y = name == "silu" ? t.silu(v[0]) : name == "gelu" ? t.gelu(v[0]) : t.sigmoid(v[0]);
      return project(t, y, proj);
    };
    inputs = {{"x", rand({1, 3, 4, 4})}};
  } else if (name == "softmax") {
    auto proj = rand({1, 4, 3, 3});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.softmax(v[0], 1), proj);
    };
    inputs = {{"x", rand({1, 4, 3, 3})}};
  } else if (name == "avgpool") {
    auto proj = rand({1, 2, 3, 3});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.avg_pool(v[0], 3, 2, 1), proj);
    };
    inputs = {{"x", rand({1, 2, 5, 5})}};
  } else if (name == "maxpool") {
    auto proj = rand({1, 2, 2, 2});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.max_pool(v[0], 2, 2, 0), proj);
    };
    inputs = {{"x", rand({1, 2, 4, 4})}};
  } else if (name == "globalavgpool") {
    auto proj = rand({1, 3, 1, 1});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.global_avg_pool(v[0]), proj);
    };
    inputs = {{"x", rand({1, 3, 4, 4})}};
  } else if (name == "concat") {
    auto proj = rand({1, 5, 3, 3});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.concat({v[0], v[1]}, 1), proj);
    };
    inputs = {{"a", rand({1, 2, 3, 3})}, {"b", rand({1, 3, 3, 3})}};
  } else if (name == "split") {
    auto proj = rand({1, 2, 3, 3});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      auto parts = t.split(v[0], {3, 2}, 1);
      return project(t, parts[1], proj);
    };
    inputs = {{"x", rand({1, 5, 3, 3})}};
  } else if (name == "reshape") {
    auto proj = rand({3, 8});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.reshape(v[0], {3, 8}), proj);
    };
    inputs = {{"x", rand({1, 2, 3, 4})}};
  } else if (name == "add") {
    auto proj = rand({2, 5});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.add(v[0], v[1]), proj);
    };
    inputs = {{"a", rand({2, 5})}, {"b", rand({2, 5})}};
  } else if (name == "mul") {
    auto proj = rand({1, 3, 3, 3});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.mul(v[0], v[1]), proj);
    };
    inputs = {{"a", rand({1, 3, 1, 1})}, {"b", rand({1, 3, 3, 3})}};
  } else if (name == "sum") {
    fn = [](Tape<T>& t, const std::vector<Var>& v) { return t.sum(v[0]); };
    inputs = {{"x", rand({2, 3, 2, 2})}};
  } else if (name == "upsample") {
    auto proj = rand({1, 2, 6, 6});
    fn = [proj, project](Tape<T>& t, const std::vector<Var>& v) {
      return project(t, t.upsample_nearest(v[0], 2), proj);
    };
    inputs = {{"x", rand({1, 2, 3, 3})}};
  } else if (name == "cbs") {
    auto cfg = CbsConfig::make(3, 4, 3, 1);
    ParamStore<T> params;
    Rng prng = rng.fork(1);
    init_params(params, cbs_param_specs("cbs", cfg), prng);
    auto proj = rand({1, 4, 4, 4});
    fn = [cfg, params, proj, project](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      ctx.training = true;
      return project(t, cbs_forward(ctx, v[0], cfg, "cbs"), proj);
    };
    inputs = {{"x", rand({1, 3, 4, 4})}};
  } else if (name == "dwr") {
    DwrConfig cfg{6, {1, 3, 5}, {}};
    ParamStore<T> params;
    Rng prng = rng.fork(1);
    init_params(params, dwr_param_specs("dwr", cfg), prng);
    auto proj = rand({1, 6, 5, 5});
    fn = [cfg, params, proj, project](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      return project(t, dwr_forward(ctx, v[0], cfg, "dwr"), proj);
    };
    inputs = {{"x", rand({1, 6, 5, 5})}};
  } else if (name == "msdrm") {
    auto cfg = MsDrmConfig::make(6, 6, 3, 1);
    ParamStore<T> params;
    Rng prng = rng.fork(1);
    init_params(params, msdrm_param_specs("msdrm", cfg), prng);
    auto proj = rand({1, 6, 4, 4});
    fn = [cfg, params, proj, project](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      return project(t, msdrm_forward(ctx, v[0], cfg, "msdrm"), proj);
    };
    inputs = {{"x", rand({1, 6, 4, 4})}};
  } else if (name == "dcfem") {
    DcfemConfig cfg{4, 4, 4};
    ParamStore<T> params;
    Rng prng = rng.fork(1);
    init_params(params, dcfem_param_specs("dcfem", cfg), prng);
    auto proj_a = rand({1, 4, 4, 4});
    auto proj_b = rand({1, 4, 4, 4});
    fn = [cfg, params, proj_a, proj_b, project](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      auto out = dcfem_forward(ctx, v[0], v[1], cfg, "dcfem");
      return t.add(project(t, out.backbone, proj_a), project(t, out.neck, proj_b));
    };
    inputs = {{"a", rand({1, 4, 4, 4})}, {"b", rand({1, 4, 4, 4})}};
  } else if (name == "lads") {
    auto cfg = LadsConfig::make(4, 8, 2);
    ParamStore<T> params;
    Rng prng = rng.fork(1);
    init_params(params, lads_param_specs("lads", cfg), prng);
    auto proj = rand({1, 8, 3, 3});
    fn = [cfg, params, proj, project](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      return project(t, lads_forward(ctx, v[0], cfg, "lads"), proj);
    };
    inputs = {{"x", rand({1, 4, 6, 6})}};
  } else {
    throw std::invalid_argument("unknown gradcheck target '" + name + "'");
  }

  return gradcheck<T>(fn, inputs, step, tolerance);
}

// Gradient check of a whole model graph: trainable weights, random input,
// random-projection loss over the (single) sink.
template <class T>
GradCheckReport run_gradcheck_model(const ModelGraph& graph, std::uint64_t seed,
                                    T step = gradcheck_step<T>(),
                                    T tolerance = gradcheck_tolerance<T>()) {
  ModelGraph g = infer_shapes(graph);
  const auto sinks = g.sinks();
  detail::require(sinks.size() == 1, "model gradcheck needs exactly one sink");

  ParamStore<T> params;
  Rng rng(seed ^ 0x51b0a927u);
  init_graph_params(params, g, rng);
  Tensor<T> x = rng_fill<T>(rng, g.shapes[g.input_layer()], FillUniform{-1, 1});
  Tensor<T> proj = rng_fill<T>(rng, g.shapes[sinks[0]], FillUniform{-1, 1});

  auto fn = [&](Tape<T>& t, const std::vector<Var>& v) {
    BlockCtx<T> ctx{t, params};
    ctx.trainable = false;
    auto rec = graph_record(ctx, g, v[0]);
    return t.sum(t.mul(rec.layer_vars[sinks[0]], t.constant(proj)));
  };
  return gradcheck<T>(fn, {{"input", x}}, step, tolerance);
}

}  // namespace msv
