// Minimal library tour: build the custom blocks directly, run them on random
// tensors, and print shapes and complexity numbers.

#include <cstdio>

#include "msv/msv.hpp"

using namespace msv;

int main() {
  Rng rng(42);

  // dilation-wise residual unit on a 16-channel map
  DwrConfig dwr{16, {1, 3, 5}, {}};
  ParamStore<float> dwr_params;
  {
    Rng r = rng.fork(1);
    init_params(dwr_params, dwr_param_specs("dwr", dwr), r);
  }
  auto x = rng_fill<float>(rng, {1, 16, 32, 32}, FillUniform{-1, 1});
  auto y = dwr_forward(x, dwr_params, dwr, "dwr");
  std::printf("dwr:    %s -> %s, %zu params\n", shape_str(x.shape()).c_str(),
              shape_str(y.shape()).c_str(), count_learned(dwr_param_specs("dwr", dwr)));

  // adaptive-weight downsampling vs a plain strided convolution
  auto lads = LadsConfig::make(16, 32, 4);
  ParamStore<float> lads_params;
  {
    Rng r = rng.fork(2);
    init_params(lads_params, lads_param_specs("lads", lads), r);
  }
  auto z = lads_forward(y, lads_params, lads, "lads");
  auto cmp = lads_vs_strided_report(lads, 32, 32);
  std::printf("lads:   %s -> %s, %zu params (strided baseline %zu)\n",
              shape_str(y.shape()).c_str(), shape_str(z.shape()).c_str(), cmp.lads_params,
              cmp.baseline_params);

  // cross-path enhancement of two 32-channel maps
  DcfemConfig dcfem{32, 32, 32};
  ParamStore<float> dcfem_params;
  {
    Rng r = rng.fork(3);
    init_params(dcfem_params, dcfem_param_specs("dcfem", dcfem), r);
  }
  auto other = rng_fill<float>(rng, z.shape(), FillUniform{-1, 1});
  auto [eb, en] = dcfem_forward(z, other, dcfem_params, dcfem, "dcfem");
  std::printf("dcfem:  two %s -> two %s\n", shape_str(z.shape()).c_str(),
              shape_str(eb.shape()).c_str());

  // the same blocks through the graph front end
  auto graph = infer_shapes(parse_model_config(
      "input x 1 16 32 32\n"
      "dwr a from=x\n"
      "lads b from=a cout=32\n"
      "msdrm c from=b cout=32 hidden=16 n=2\n"));
  auto cost = count_graph(graph);
  std::printf("graph:  %zu layers, %zu params, %zu flops\n", cost.layers.size(),
              cost.total_params, cost.total_flops);
  return 0;
}
