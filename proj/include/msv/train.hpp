#pragma once

// Synthetic-regression training harness: a fixed batch of random inputs and
// targets, a zero-initialized 1x1 projection head on the graph's sink, MSE
// loss, AdamW under the cosine schedule. Everything derives from the seed.

#include <cmath>

#include "msv/graph.hpp"
#include "msv/optim.hpp"

namespace msv {

struct ToyTaskConfig {
  std::size_t samples = 8;  // batch size of the fixed synthetic set (<= 8)
  std::size_t target_channels = 1;
  bool zero_targets = false;
};

struct TrainToyOptions {
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 1e-2;
  unsigned threads = 1;
};

struct TrainToyResult {
  std::vector<double> losses;  // loss per executed step, before that step's update
  bool diverged = false;
  std::size_t diverged_step = 0;  // 1-based index of the first non-finite loss
};

inline const std::string kHeadWeightName = "head.proj.weight";
inline const std::string kHeadBiasName = "head.proj.bias";

template <class T>
TrainToyResult train_toy(const ModelGraph& graph, ParamStore<T>& params,
                         const ToyTaskConfig& task, const TrainToyOptions& opt) {
  detail::require(task.samples >= 1 && task.samples <= 8,
                  "toy task takes between 1 and 8 samples");
  detail::require(task.target_channels >= 1, "toy task needs at least one target channel");

  // re-resolve with the task's batch size on the declared input extents
  ModelGraph base = infer_shapes(graph);
  const Shape declared = base.shapes[base.input_layer()];
  ModelGraph g =
      infer_shapes(graph, Shape{task.samples, declared[1], declared[2], declared[3]});

  const auto sinks = g.sinks();
  detail::require(sinks.size() == 1, "toy training needs a graph with exactly one sink");
  const Shape sink_shape = g.shapes[sinks[0]];

  // zero-initialized projection head: sink channels -> target channels
  if (!params.has(kHeadWeightName)) {
    params.tensors[kHeadWeightName] =
        Tensor<T>(Shape{task.target_channels, sink_shape[1], 1, 1});
    params.tensors[kHeadBiasName] = Tensor<T>(Shape{task.target_channels});
  }

  Rng data_rng = Rng(opt.seed).fork(0x7461726765747321ull);
  Tensor<T> inputs = rng_fill<T>(data_rng, g.shapes[g.input_layer()], FillUniform{-1.0, 1.0});
  const Shape target_shape{task.samples, task.target_channels, sink_shape[2], sink_shape[3]};
  Tensor<T> targets = task.zero_targets
                          ? Tensor<T>(target_shape)
                          : rng_fill<T>(data_rng, target_shape, FillUniform{-1.0, 1.0});

  AdamWState<T> opt_state;
  AdamWParams<T> hp;
  hp.beta1 = static_cast<T>(opt.beta1);
  hp.beta2 = static_cast<T>(opt.beta2);
  hp.eps = static_cast<T>(opt.adam_eps);
  hp.weight_decay = static_cast<T>(opt.weight_decay);

  TrainToyResult result;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    Tape<T> tape;
    BlockCtx<T> ctx{tape, params};
    ctx.training = true;
    ctx.trainable = true;
    ctx.threads = opt.threads;

    auto rec = graph_record(ctx, g, tape.constant(inputs));
    Var head = tape.conv2d(rec.layer_vars[sinks[0]], ctx.param(kHeadWeightName),
                           ctx.param(kHeadBiasName),
                           ConvParams{task.target_channels, 1, 1, 1, 0, 1, 1, true}, opt.threads);
    Var loss = tape.mse_loss(head, targets);

    const double loss_value = static_cast<double>(tape.value(loss)[0]);
    result.losses.push_back(loss_value);
    if (!std::isfinite(loss_value)) {
      result.diverged = true;
      result.diverged_step = step + 1;
      break;
    }

    tape.backward(loss);
    std::map<std::string, Tensor<T>> grads;
    for (const auto& [name, grad] : tape.leaf_gradients()) grads.emplace(name, *grad);

    hp.lr = static_cast<T>(cosine_lr(step, opt.steps, opt.lr_max, opt.lr_min));
    adamw_step(params.tensors, grads, opt_state, hp);
    for (auto& [name, stat] : ctx.bn_stat_updates) params.tensors[name] = std::move(stat);
  }
  return result;
}

}  // namespace msv
