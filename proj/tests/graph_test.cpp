#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "msv/graph.hpp"
#include "msv/train.hpp"
#include "oracles.hpp"

using msv::ModelError;
using msv::ModelGraph;
using msv::ParamStore;
using msv::Rng;
using msv::Shape;
using msv::Tensor;

namespace {

ModelGraph resolved(const std::string& text) {
  return msv::infer_shapes(msv::parse_model_config(text));
}

int error_line(const std::string& text) {
  try {
    resolved(text);
  } catch (const ModelError& e) {
    return e.line();
  }
  return -1;
}

}  // namespace

TEST_CASE("parse: two-line config builds a two-node graph") {
  auto g = msv::parse_model_config("input x 1 16 32 32\nlads d from=x cout=32\n");
  CHECK(g.layers.size() == 2);
  CHECK(g.layers[1].kind == msv::LayerKind::lads);
  CHECK(g.layers[1].inputs == std::vector<std::string>{"x"});
}

TEST_CASE("parse: errors carry line numbers") {
  CHECK(error_line("foo x 1 2 3 4\n") == 1);
  CHECK(error_line("input x 1 4 8 8\ncbs a from=x cout=4\ncbs a from=x cout=4\n") == 3);
  CHECK(error_line("input x 1 4 8 8\ndcfem f from=x c=4\n") == 2);           // arity
  CHECK(error_line("input x 1 4 8 8\ncbs a from=nope cout=4\n") == 2);       // undefined ref
  CHECK(error_line("input x 1 4 8 8\ncbs a from=x\n") == 2);                 // missing cout
  CHECK(error_line("input x 1 4 8 8\ncbs a from=x cout=4 bogus=1\n") == 2);  // unknown arg
  CHECK(error_line("input x 1 4 8\n") == 1);                                 // extents arity
  CHECK(error_line("input x 1 4 8 8\ninput y 1 4 8 8\n") > 0);               // two inputs
}

TEST_CASE("parse: omitted from= takes the previous layer") {
  auto g = msv::parse_model_config(
      "input x 1 8 16 16\n"
      "cbs a cout=8\n"
      "cbs b cout=16 stride=2\n");
  CHECK(g.layers[1].inputs == std::vector<std::string>{"x"});
  CHECK(g.layers[2].inputs == std::vector<std::string>{"a"});
}

TEST_CASE("infer_shapes: lads halves the spatial extents") {
  auto g = resolved("input x 1 16 64 64\nlads d from=x cout=32\n");
  CHECK(g.shapes[1] == Shape{1, 32, 32, 32});
}

TEST_CASE("infer_shapes: concat spatial mismatch is a line error") {
  const std::string text =
      "input x 1 8 16 16\n"
      "cbs a from=x cout=8\n"
      "cbs b from=x cout=8 stride=2\n"
      "concat c from=a,b\n";
  CHECK(error_line(text) == 4);
}

TEST_CASE("infer_shapes: ten-layer backbone stub matches the hand-computed table") {
  const std::string text =
      "input img 1 3 64 64\n"
      "cbs s1 from=img cout=16 k=3 stride=2\n"     // 16 x 32 x 32
      "cbs s2 from=s1 cout=32 k=3 stride=2\n"      // 32 x 16 x 16
      "msdrm m1 from=s2 cout=32 hidden=16 n=1\n"   // 32 x 16 x 16
      "lads d1 from=m1 cout=64\n"                  // 64 x 8 x 8
      "msdrm m2 from=d1 cout=64 hidden=32 n=2\n"   // 64 x 8 x 8
      "upsample-nearest u1 from=m2\n"              // 64 x 16 x 16
      "concat c1 from=u1,m1\n"                     // 96 x 16 x 16
      "conv1x1 p1 from=c1 cout=32\n"               // 32 x 16 x 16
      "dcfem f1 from=m1,p1 c=32\n";                // 64 x 16 x 16
  auto g = resolved(text);
  const Shape expect[] = {
      {1, 3, 64, 64},  {1, 16, 32, 32}, {1, 32, 16, 16}, {1, 32, 16, 16}, {1, 64, 8, 8},
      {1, 64, 8, 8},   {1, 64, 16, 16}, {1, 96, 16, 16}, {1, 32, 16, 16}, {1, 64, 16, 16}};
  REQUIRE(g.layers.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(g.shapes[i] == expect[i]);
}

TEST_CASE("infer_shapes is idempotent") {
  auto g = resolved("input x 1 8 16 16\ncbs a from=x cout=8\nlads l from=a\n");
  auto g2 = msv::infer_shapes(g);
  CHECK(g2.shapes == g.shapes);
  CHECK(msv::serialize_model_config(g2) == msv::serialize_model_config(g));
}

TEST_CASE("serializer: accepted configs round-trip to an equivalent graph") {
  const std::string text =
      "# demo\n"
      "input x 2 8 16 16\n"
      "cbs a from=x cout=16 stride=2 k=3\n"
      "msdrm m from=a cout=16 hidden=8 n=2 dilations=1,3,5\n"
      "lads l from=m cout=32 groups=4\n"
      "avgpool q from=l k=2\n"
      "add z from=q value=0.5\n";
  auto g = msv::parse_model_config(text);
  auto g2 = msv::parse_model_config(msv::serialize_model_config(g));
  REQUIRE(g.layers.size() == g2.layers.size());
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    CHECK(g.layers[i].id == g2.layers[i].id);
    CHECK(g.layers[i].kind == g2.layers[i].kind);
    CHECK(g.layers[i].inputs == g2.layers[i].inputs);
    CHECK(g.layers[i].args == g2.layers[i].args);
  }
  auto r1 = msv::infer_shapes(g);
  auto r2 = msv::infer_shapes(g2);
  CHECK(r1.shapes == r2.shapes);
}

TEST_CASE("count: closed-form parameter examples") {
  auto g = resolved("input x 1 16 32 32\nconv1x1 p from=x cout=32\n");
  auto cost = msv::count_params(g);
  CHECK(cost.layers[1].params == 16 * 32 + 32);  // 544
  CHECK(cost.total_params == 544);

  // depthwise 3x3 over 16 channels with bias
  std::vector<msv::ParamInfo> dw;
  msv::blockdetail::add_conv_specs(dw, "t", 16, 1, 3, 3, true);
  CHECK(msv::count_learned(dw) == 16 * 9 + 16);  // 160
}

TEST_CASE("count: conv FLOP formula") {
  // 3x3, Cin=Cout=16, 32x32 output: 2*16*16*9*32*32
  CHECK(msv::blockdetail::conv_flops(1, 16, 16, 3, 3, 32, 32) == 4718592);
  // graph totals are the exact sum of the per-layer values
  auto g = resolved(
      "input x 1 8 16 16\n"
      "cbs a from=x cout=8\n"
      "lads l from=a cout=16\n"
      "conv1x1 p from=l cout=4\n");
  auto cost = msv::count_graph(g);
  std::size_t params = 0, running = 0, flops = 0;
  for (const auto& l : cost.layers) {
    params += l.params;
    running += l.running_stats;
    flops += l.flops;
  }
  CHECK(params == cost.total_params);
  CHECK(running == cost.total_running);
  CHECK(flops == cost.total_flops);
  CHECK(cost.total_flops > 0);
}

TEST_CASE("count: unresolved graph is rejected") {
  auto g = msv::parse_model_config("input x 1 4 8 8\ncbs a from=x cout=4\n");
  CHECK_THROWS_AS(msv::count_graph(g), std::logic_error);
}

TEST_CASE("graph_forward: identity graph returns the input unchanged") {
  auto g = resolved("input x 1 3 4 4\nadd y from=x value=0\n");
  ParamStore<float> params;
  Rng rng(1);
  auto x = oracle::random_tensor<float>(rng, {1, 3, 4, 4});
  auto out = msv::graph_forward(g, params, x);
  REQUIRE(out.count("y") == 1);
  CHECK(oracle::bit_equal(out.at("y"), x));
}

TEST_CASE("graph_forward: single-CBS graph equals the direct block call") {
  auto g = resolved("input x 2 4 6 6\ncbs a from=x cout=8 stride=1\n");
  ParamStore<float> params;
  Rng rng(2);
  msv::init_graph_params(params, g, rng);
  Rng data(3);
  auto x = oracle::random_tensor<float>(data, {2, 4, 6, 6});
  auto out = msv::graph_forward(g, params, x);
  auto direct = msv::cbs_forward(x, params, msv::CbsConfig::make(4, 8, 3, 1), "a");
  CHECK(oracle::bit_equal(out.at("a"), direct));
}

TEST_CASE("graph_forward: deterministic across runs and thread counts") {
  auto g = resolved(
      "input x 1 8 16 16\n"
      "cbs a from=x cout=8\n"
      "msdrm m from=a cout=8 hidden=4\n"
      "lads l from=m cout=16\n"
      "cbs b from=l cout=16\n"
      "dcfem f from=l,b c=16\n");
  auto run = [&](unsigned threads) {
    ParamStore<float> params;
    Rng rng(7);
    msv::init_graph_params(params, g, rng);
    Rng data(8);
    auto x = oracle::random_tensor<float>(data, {1, 8, 16, 16});
    return msv::graph_forward(g, params, x, false, threads);
  };
  auto a = run(1), b = run(1), c = run(4);
  CHECK(oracle::bit_equal(a.at("f"), b.at("f")));
  CHECK(oracle::bit_equal(a.at("f"), c.at("f")));
}

TEST_CASE("graph_forward: missing weight error names the tensor") {
  auto g = resolved("input x 1 4 8 8\ncbs a from=x cout=4\n");
  ParamStore<float> params;  // empty on purpose
  Rng rng(4);
  auto x = oracle::random_tensor<float>(rng, {1, 4, 8, 8});
  try {
    msv::graph_forward(g, params, x);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("a.conv.weight") != std::string::npos);
  }
}

TEST_CASE("train_toy: zero targets with the zero-initialized head stay at loss 0") {
  auto g = resolved("input x 4 4 8 8\ncbs a from=x cout=4\n");
  ParamStore<float> params;
  Rng rng(5);
  msv::init_graph_params(params, g, rng);
  msv::ToyTaskConfig task;
  task.samples = 4;
  task.zero_targets = true;
  msv::TrainToyOptions opt;
  opt.steps = 5;
  auto result = msv::train_toy(g, params, task, opt);
  REQUIRE(result.losses.size() == 5);
  for (double l : result.losses) CHECK(l == 0.0);
  CHECK_FALSE(result.diverged);
}

TEST_CASE("train_toy: zero steps produce an empty curve") {
  auto g = resolved("input x 2 4 8 8\ncbs a from=x cout=4\n");
  ParamStore<float> params;
  Rng rng(6);
  msv::init_graph_params(params, g, rng);
  msv::TrainToyOptions opt;
  opt.steps = 0;
  auto result = msv::train_toy(g, params, msv::ToyTaskConfig{2}, opt);
  CHECK(result.losses.empty());
}

TEST_CASE("train_toy: loss decreases and reruns are bit-identical") {
  const std::string text =
      "input x 4 4 8 8\n"
      "cbs a from=x cout=8\n"
      "lads l from=a cout=8 groups=4\n";
  auto g = resolved(text);
  auto run = [&] {
    ParamStore<float> params;
    Rng rng(9);
    msv::init_graph_params(params, g, rng);
    msv::TrainToyOptions opt;
    opt.steps = 60;
    opt.seed = 0;
    return msv::train_toy(g, params, msv::ToyTaskConfig{4}, opt);
  };
  auto r1 = run();
  auto r2 = run();
  REQUIRE(r1.losses.size() == 60);
  CHECK(r1.losses == r2.losses);
  CHECK(r1.losses.back() < r1.losses.front());
}
