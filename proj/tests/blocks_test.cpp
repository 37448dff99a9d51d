#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "msv/blocks.hpp"
#include "msv/weights_io.hpp"
#include "oracles.hpp"

using msv::BlockCtx;
using msv::CbsConfig;
using msv::DcfemConfig;
using msv::DwrConfig;
using msv::LadsConfig;
using msv::MsDrmConfig;
using msv::ParamStore;
using msv::Rng;
using msv::Shape;
using msv::Tape;
using msv::Tensor;
using msv::Var;

namespace {

template <class T>
ParamStore<T> make_params(const std::vector<msv::ParamInfo>& specs, std::uint64_t seed) {
  ParamStore<T> store;
  Rng rng(seed);
  msv::init_params(store, specs, rng);
  return store;
}

template <class T>
void zero_weights(ParamStore<T>& store) {
  for (auto& [name, t] : store.tensors) {
    if (name.find("running_var") != std::string::npos ||
        name.find("gamma") != std::string::npos)
      continue;  // keep BN scale/variance at one
    if (name.find("weight") != std::string::npos || name.find("bias") != std::string::npos ||
        name.find("beta") != std::string::npos ||
        name.find("running_mean") != std::string::npos)
      t = Tensor<T>(t.shape());
  }
}

}  // namespace

TEST_CASE("cbs equals the manual conv/bn/silu composition bit-exactly") {
  Rng rng(1);
  auto cfg = CbsConfig::make(4, 6, 3, 1);
  auto specs = msv::cbs_param_specs("c", cfg);
  auto params = make_params<float>(specs, 7);
  auto x = oracle::random_tensor<float>(rng, {2, 4, 5, 5});

  auto y = msv::cbs_forward(x, params, cfg, "c");

  auto manual = msv::silu(msv::batch_norm_infer(
      msv::conv2d(x, params.at("c.conv.weight"), nullptr, cfg.conv_params()),
      params.at("c.bn.gamma"), params.at("c.bn.beta"), params.at("c.bn.running_mean"),
      params.at("c.bn.running_var"), 1e-5f));
  CHECK(oracle::bit_equal(y, manual));
}

TEST_CASE("cbs: identity conv and identity BN reduce to silu(x)") {
  auto cfg = CbsConfig::make(3, 3, 1, 1);
  auto specs = msv::cbs_param_specs("c", cfg);
  auto params = make_params<float>(specs, 1);
  auto& w = params.at("c.conv.weight");
  w = Tensor<float>(w.shape());
  for (std::size_t c = 0; c < 3; ++c) w.at4(c, c, 0, 0) = 1.0f;

  Rng rng(2);
  auto x = oracle::random_tensor<float>(rng, {1, 3, 4, 4});
  auto y = msv::cbs_forward(x, params, cfg, "c");
  auto expect = msv::silu(x);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-4));
}

TEST_CASE("cbs: stride-2 3x3 halves the spatial extents") {
  auto cfg = CbsConfig::make(8, 16, 3, 2);
  auto params = make_params<float>(msv::cbs_param_specs("c", cfg), 3);
  Rng rng(4);
  auto x = oracle::random_tensor<float>(rng, {1, 8, 16, 16});
  auto y = msv::cbs_forward(x, params, cfg, "c");
  CHECK(y.shape() == Shape{1, 16, 8, 8});
}

TEST_CASE("dwr: zero weights and identity normalization give the identity map") {
  DwrConfig cfg{6, {1, 3, 5}, {}};
  auto params = make_params<float>(msv::dwr_param_specs("d", cfg), 5);
  zero_weights(params);
  Rng rng(6);
  auto x = oracle::random_tensor<float>(rng, {1, 6, 8, 8}, 0.01, 1.0);
  auto y = msv::dwr_forward(x, params, cfg, "d");
  CHECK(oracle::bit_equal(y, x));
}

TEST_CASE("dwr: shape preservation across the configuration grid") {
  Rng rng(7);
  for (std::size_t c : {3u, 6u, 8u, 16u}) {
    for (std::size_t hw : {8u, 11u}) {
      DwrConfig cfg{c, {1, 3, 5}, {}};
      auto params = make_params<float>(msv::dwr_param_specs("d", cfg), c);
      auto x = oracle::random_tensor<float>(rng, {1, c, hw, hw});
      auto y = msv::dwr_forward(x, params, cfg, "d");
      CHECK(y.shape() == x.shape());
    }
  }
}

TEST_CASE("dwr: allocation must cover every branch and sum to C") {
  DwrConfig bad{2, {1, 3, 5}, {}};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  DwrConfig bad2{6, {1, 3}, {2, 3}};
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
  DwrConfig ok{7, {1, 3, 5}, {}};
  CHECK(ok.resolved_allocation() == std::vector<std::size_t>{3, 2, 2});
}

TEST_CASE("dwr branch: dilation-3 impulse response matches the direct oracle") {
  // the semantic-residualization branch is a depthwise 3x3 with padding =
  // dilation; an impulse must answer only at tap offsets {0, +-3}
  const std::size_t c = 2;
  Rng rng(8);
  auto w = oracle::random_tensor<float>(rng, {c, 1, 3, 3});
  Tensor<float> x({1, c, 9, 9});
  x.at4(0, 0, 4, 4) = 1.0f;
  x.at4(0, 1, 4, 4) = 1.0f;
  msv::ConvParams p{.out_channels = c, .kernel_h = 3, .kernel_w = 3, .stride = 1, .padding = 3,
                    .dilation = 3, .groups = c};
  auto y = msv::conv2d(x, w, nullptr, p);
  CHECK(oracle::max_abs_diff(y, oracle::conv2d(x, w, nullptr, p)) < 1e-6);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t h = 0; h < 9; ++h)
      for (std::size_t wd = 0; wd < 9; ++wd) {
        const bool tap = (h == 1 || h == 4 || h == 7) && (wd == 1 || wd == 4 || wd == 7);
        if (!tap) CHECK(y.at4(0, ci, h, wd) == 0.0f);
      }
}

TEST_CASE("msdrm: degenerate identity wiring reduces to x") {
  // n=1, DWR weights zero, wrapper 1x1 convs wired as identities
  const std::size_t c = 8, hidden = 4;
  auto cfg = MsDrmConfig::make(c, c, hidden, 1);
  auto params = make_params<float>(msv::msdrm_param_specs("m", cfg), 9);
  zero_weights(params);

  auto& win = params.at("m.cv_in.weight");  // [2h, c, 1, 1] with 2h == c
  for (std::size_t i = 0; i < c; ++i) win.at4(i, i, 0, 0) = 1.0f;
  auto& wout = params.at("m.cv_out.weight");  // [c, 3h, 1, 1]: pick the split halves
  for (std::size_t i = 0; i < c; ++i) wout.at4(i, i, 0, 0) = 1.0f;

  Rng rng(10);
  auto x = oracle::random_tensor<float>(rng, {1, c, 6, 6}, 0.01, 1.0);
  auto y = msv::msdrm_forward(x, params, cfg, "m");
  CHECK(oracle::bit_equal(y, x));
}

TEST_CASE("msdrm: shape arithmetic for hidden=8, n=2") {
  auto cfg = MsDrmConfig::make(16, 16, 8, 2);
  auto specs = msv::msdrm_param_specs("m", cfg);
  // intermediate concat width hidden*(2+n) = 32 shows up as cv_out fan-in
  bool found = false;
  for (const auto& s : specs)
    if (s.name == "m.cv_out.weight") {
      CHECK(s.shape == Shape{16, 32, 1, 1});
      found = true;
    }
  CHECK(found);
  auto params = make_params<float>(specs, 11);
  Rng rng(12);
  auto x = oracle::random_tensor<float>(rng, {1, 16, 8, 8});
  auto y = msv::msdrm_forward(x, params, cfg, "m");
  CHECK(y.shape() == Shape{1, 16, 8, 8});
}

TEST_CASE("msdrm: parameter count equals the hand-expanded closed form") {
  const std::size_t cin = 16, cout = 16, h = 8, n = 2;
  auto cfg = MsDrmConfig::make(cin, cout, h, n);
  // cv_in: cin*2h + 2h ; cv_out: (2+n)h*cout + cout
  // per DWR(h): region 9h^2 + BN 2h ; branches 9h ; fuse BN 2h + (h^2 + h)
  const std::size_t dwr = 9 * h * h + 2 * h + 9 * h + 2 * h + h * h + h;
  const std::size_t expect =
      cin * 2 * h + 2 * h + n * dwr + (2 + n) * h * cout + cout;
  CHECK(msv::count_learned(msv::msdrm_param_specs("m", cfg)) == expect);
  // running stats reported separately: 2 BNs of width h per unit
  CHECK(msv::count_running(msv::msdrm_param_specs("m", cfg)) == n * 2 * (2 * h));
}

TEST_CASE("dcfem: shape contract for mixed input widths") {
  DcfemConfig cfg{32, 64, 32};
  auto params = make_params<float>(msv::dcfem_param_specs("f", cfg), 13);
  Rng rng(14);
  auto a = oracle::random_tensor<float>(rng, {1, 32, 8, 8});
  auto b = oracle::random_tensor<float>(rng, {1, 64, 8, 8});
  auto [ea, eb] = msv::dcfem_forward(a, b, params, cfg, "f");
  CHECK(ea.shape() == Shape{1, 32, 8, 8});
  CHECK(eb.shape() == Shape{1, 32, 8, 8});
}

TEST_CASE("dcfem: arbitration weights form a two-way distribution everywhere") {
  DcfemConfig cfg{8, 8, 8};
  auto params = make_params<double>(msv::dcfem_param_specs("f", cfg), 15);
  Rng rng(16);
  Tape<double> tape;
  BlockCtx<double> ctx{tape, params};
  ctx.trainable = false;
  Var a = tape.constant(oracle::random_tensor<double>(rng, {2, 8, 6, 6}));
  Var b = tape.constant(oracle::random_tensor<double>(rng, {2, 8, 6, 6}));
  auto out = msv::dcfem_forward(ctx, a, b, cfg, "f");
  const auto& wl = tape.value(out.weight_local);
  const auto& wg = tape.value(out.weight_global);
  for (std::size_t i = 0; i < wl.size(); ++i) {
    CHECK(wl[i] >= 0.0);
    CHECK(wl[i] <= 1.0);
    CHECK(std::abs(wl[i] + wg[i] - 1.0) < 1e-6);
  }
}

TEST_CASE("dcfem: saturated logits select the local branch") {
  DcfemConfig cfg{8, 8, 8};
  auto params = make_params<double>(msv::dcfem_param_specs("f", cfg), 17);
  // force the weight path to constant logits (+20, -20)
  params.at("f.weights.fc1.weight") = Tensor<double>(Shape{4, 16, 1, 1});
  params.at("f.weights.fc1.bias") = Tensor<double>(Shape{4});
  params.at("f.weights.fc2.weight") = Tensor<double>(Shape{2, 4, 1, 1});
  params.at("f.weights.fc2.bias") = Tensor<double>(Shape{2}, {20.0, -20.0});

  Rng rng(18);
  Tape<double> tape;
  BlockCtx<double> ctx{tape, params};
  ctx.trainable = false;
  Var a = tape.constant(oracle::random_tensor<double>(rng, {1, 8, 5, 5}));
  Var b = tape.constant(oracle::random_tensor<double>(rng, {1, 8, 5, 5}));
  auto out = msv::dcfem_forward(ctx, a, b, cfg, "f");
  const auto& fused = tape.value(out.fused);
  const auto& local = tape.value(out.local);
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const double rel = std::abs(fused[i] - local[i]) /
                       std::max({std::abs(fused[i]), std::abs(local[i]), 1e-12});
    CHECK(rel < 1e-8);
  }
}

TEST_CASE("dcfem: equal logits average the two branches") {
  DcfemConfig cfg{8, 8, 8};
  auto params = make_params<double>(msv::dcfem_param_specs("f", cfg), 19);
  params.at("f.weights.fc1.weight") = Tensor<double>(Shape{4, 16, 1, 1});
  params.at("f.weights.fc1.bias") = Tensor<double>(Shape{4});
  params.at("f.weights.fc2.weight") = Tensor<double>(Shape{2, 4, 1, 1});
  params.at("f.weights.fc2.bias") = Tensor<double>(Shape{2}, {0.7, 0.7});

  Rng rng(20);
  Tape<double> tape;
  BlockCtx<double> ctx{tape, params};
  ctx.trainable = false;
  Var a = tape.constant(oracle::random_tensor<double>(rng, {1, 8, 4, 4}));
  Var b = tape.constant(oracle::random_tensor<double>(rng, {1, 8, 4, 4}));
  auto out = msv::dcfem_forward(ctx, a, b, cfg, "f");

  const auto& wl = tape.value(out.weight_local);
  for (std::size_t i = 0; i < wl.size(); ++i) CHECK(wl[i] == 0.5);

  const auto& fused = tape.value(out.fused);
  const auto& local = tape.value(out.local);
  const auto broadcast =
      msv::mul(tape.value(out.global), Tensor<double>::full({1, 1, 4, 4}, 1.0));
  for (std::size_t i = 0; i < fused.size(); ++i)
    CHECK(fused[i] == doctest::Approx(0.5 * (local[i] + broadcast[i])).epsilon(1e-12));
}

TEST_CASE("dcfem: config invariants") {
  DcfemConfig bad{8, 8, 2};  // channels < reduction
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  DcfemConfig even{8, 8, 8, 6, 4};  // even spatial kernel
  CHECK_THROWS_AS(even.validate(), std::invalid_argument);
  // spatial mismatch between the two paths
  DcfemConfig cfg{4, 4, 4};
  auto params = make_params<float>(msv::dcfem_param_specs("f", cfg), 21);
  Tensor<float> a({1, 4, 4, 4}), b({1, 4, 8, 8});
  CHECK_THROWS_AS(msv::dcfem_forward(a, b, params, cfg, "f"), std::invalid_argument);
}

TEST_CASE("lads: shape contract") {
  auto cfg = LadsConfig::make(16, 32, 4);
  auto params = make_params<float>(msv::lads_param_specs("l", cfg), 22);
  Rng rng(23);
  auto x = oracle::random_tensor<float>(rng, {1, 16, 32, 32});
  auto y = msv::lads_forward(x, params, cfg, "l");
  CHECK(y.shape() == Shape{1, 32, 16, 16});
}

TEST_CASE("lads: attention weights are a probability distribution over four") {
  auto cfg = LadsConfig::make(8, 16, 4);
  auto params = make_params<double>(msv::lads_param_specs("l", cfg), 24);
  Rng rng(25);
  Tape<double> tape;
  BlockCtx<double> ctx{tape, params};
  ctx.trainable = false;
  Var x = tape.constant(oracle::random_tensor<double>(rng, {2, 8, 8, 8}));
  auto out = msv::lads_forward_full(ctx, x, cfg, "l");
  REQUIRE(out.attention.size() == 4);
  const auto& w0 = tape.value(out.attention[0]);
  for (std::size_t i = 0; i < w0.size(); ++i) {
    double sum = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const double v = tape.value(out.attention[k])[i];
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("lads: zeroed attention path averages the four sub-group features") {
  auto cfg = LadsConfig::make(8, 16, 4);
  auto params = make_params<float>(msv::lads_param_specs("l", cfg), 26);
  params.at("l.attn.conv.weight") = Tensor<float>(Shape{4, 8, 1, 1});
  params.at("l.attn.conv.bias") = Tensor<float>(Shape{4});

  Rng rng(27);
  Tape<float> tape;
  BlockCtx<float> ctx{tape, params};
  ctx.trainable = false;
  Var x = tape.constant(oracle::random_tensor<float>(rng, {1, 8, 6, 6}));
  auto out = msv::lads_forward_full(ctx, x, cfg, "l");
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& w = tape.value(out.attention[k]);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(w[i] == 0.25f);
  }
  auto mean = msv::scale(
      msv::add(msv::add(msv::add(tape.value(out.subgroups[0]), tape.value(out.subgroups[1])),
                        tape.value(out.subgroups[2])),
               tape.value(out.subgroups[3])),
      0.25f);
  CHECK(oracle::bit_equal(tape.value(out.output), mean));
}

TEST_CASE("lads: parameter formulas") {
  // Cin=16, Cout=32, g=4: branch2 = 4*32*(16/4)*9 + 128, branch1 = 16*4 + 4
  auto cfg = LadsConfig::make(16, 32, 4);
  CHECK(msv::count_learned(msv::lads_param_specs("l", cfg)) == 4736 + 68);
  auto rep = msv::lads_vs_strided_report(cfg);
  CHECK(rep.lads_params == 4804);
  CHECK(rep.baseline_params == 16 * 32 * 9 + 32);

  // depthwise configuration undercuts the strided baseline
  auto dw = msv::lads_vs_strided_report(LadsConfig::make(64, 64, 64));
  CHECK(dw.lads_params == 2820);
  CHECK(dw.baseline_params == 36928);
  CHECK(static_cast<double>(dw.lads_flops) < 0.1 * static_cast<double>(dw.baseline_flops));

  auto smoke = msv::lads_vs_strided_report(LadsConfig::make(1, 1, 1));
  CHECK(smoke.lads_params > 0);
  CHECK(smoke.lads_flops > 0);
  CHECK(smoke.baseline_params > 0);
  CHECK(smoke.baseline_flops > 0);
}

TEST_CASE("lads: odd extents rejected unless padding is enabled") {
  auto cfg = LadsConfig::make(4, 8, 4);
  auto params = make_params<float>(msv::lads_param_specs("l", cfg), 28);
  Rng rng(29);
  auto x = oracle::random_tensor<float>(rng, {1, 4, 7, 7});
  CHECK_THROWS_AS(msv::lads_forward(x, params, cfg, "l"), std::invalid_argument);
  cfg.pad_odd = true;
  auto y = msv::lads_forward(x, params, cfg, "l");
  CHECK(y.shape() == Shape{1, 8, 4, 4});
  // divisibility violations
  CHECK_THROWS_AS(LadsConfig::make(6, 8, 4).validate(), std::invalid_argument);
}

TEST_CASE("blocks: forward determinism from the seed") {
  auto cfg = LadsConfig::make(8, 16, 4);
  auto run = [&] {
    auto params = make_params<float>(msv::lads_param_specs("l", cfg), 31);
    Rng rng(32);
    auto x = oracle::random_tensor<float>(rng, {1, 8, 8, 8});
    return msv::lads_forward(x, params, cfg, "l");
  };
  CHECK(oracle::bit_equal(run(), run()));
}

TEST_CASE("blocks: double-precision gradchecks") {
  using T = double;
  Rng rng(33);

  auto weighted_loss = [](Tape<T>& t, Var out, const Tensor<T>& proj) {
    return t.sum(t.mul(out, t.constant(proj)));
  };

  SUBCASE("cbs") {
    auto cfg = CbsConfig::make(3, 4, 3, 1);
    auto params = make_params<T>(msv::cbs_param_specs("c", cfg), 34);
    auto x = oracle::random_tensor<T>(rng, {1, 3, 5, 5});
    auto proj = oracle::random_tensor<T>(rng, {1, 4, 5, 5});
    auto fn = [&](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      ctx.training = true;  // exercise the batch-statistics path
      return weighted_loss(t, msv::cbs_forward(ctx, v[0], cfg, "c"), proj);
    };
    auto rep = msv::gradcheck<T>(fn, {{"x", x}});
    INFO(rep.to_text());
    CHECK(rep.pass);
  }

  SUBCASE("dwr") {
    DwrConfig cfg{6, {1, 3, 5}, {}};
    auto params = make_params<T>(msv::dwr_param_specs("d", cfg), 35);
    auto x = oracle::random_tensor<T>(rng, {1, 6, 5, 5});
    auto proj = oracle::random_tensor<T>(rng, {1, 6, 5, 5});
    auto fn = [&](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      return weighted_loss(t, msv::dwr_forward(ctx, v[0], cfg, "d"), proj);
    };
    auto rep = msv::gradcheck<T>(fn, {{"x", x}});
    INFO(rep.to_text());
    CHECK(rep.pass);
  }

  SUBCASE("msdrm") {
    auto cfg = MsDrmConfig::make(6, 6, 3, 1);
    auto params = make_params<T>(msv::msdrm_param_specs("m", cfg), 36);
    auto x = oracle::random_tensor<T>(rng, {1, 6, 4, 4});
    auto proj = oracle::random_tensor<T>(rng, {1, 6, 4, 4});
    auto fn = [&](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      return weighted_loss(t, msv::msdrm_forward(ctx, v[0], cfg, "m"), proj);
    };
    auto rep = msv::gradcheck<T>(fn, {{"x", x}});
    INFO(rep.to_text());
    CHECK(rep.pass);
  }

  SUBCASE("dcfem") {
    DcfemConfig cfg{4, 4, 4};
    auto params = make_params<T>(msv::dcfem_param_specs("f", cfg), 37);
    auto a = oracle::random_tensor<T>(rng, {1, 4, 4, 4});
    auto b = oracle::random_tensor<T>(rng, {1, 4, 4, 4});
    auto proj = oracle::random_tensor<T>(rng, {1, 4, 4, 4});
    auto proj2 = oracle::random_tensor<T>(rng, {1, 4, 4, 4});
    auto fn = [&](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      auto out = msv::dcfem_forward(ctx, v[0], v[1], cfg, "f");
      return t.add(weighted_loss(t, out.backbone, proj), weighted_loss(t, out.neck, proj2));
    };
    auto rep = msv::gradcheck<T>(fn, {{"a", a}, {"b", b}});
    INFO(rep.to_text());
    CHECK(rep.pass);
  }

  SUBCASE("lads") {
    auto cfg = LadsConfig::make(4, 8, 2);
    auto params = make_params<T>(msv::lads_param_specs("l", cfg), 38);
    auto x = oracle::random_tensor<T>(rng, {1, 4, 6, 6});
    auto proj = oracle::random_tensor<T>(rng, {1, 8, 3, 3});
    auto fn = [&](Tape<T>& t, const std::vector<Var>& v) {
      BlockCtx<T> ctx{t, params};
      ctx.trainable = false;
      return weighted_loss(t, msv::lads_forward(ctx, v[0], cfg, "l"), proj);
    };
    auto rep = msv::gradcheck<T>(fn, {{"x", x}});
    INFO(rep.to_text());
    CHECK(rep.pass);
  }
}

TEST_CASE("weight store: save/load round trip and missing-tensor errors") {
  namespace fs = std::filesystem;
  const auto dir = (fs::temp_directory_path() / "msv_weights_test").string();
  fs::remove_all(dir);

  auto cfg = CbsConfig::make(3, 4);
  auto specs = msv::cbs_param_specs("c", cfg);
  auto params = make_params<float>(specs, 39);
  msv::save_param_store(dir, params, {"cbs c cout=4"});

  auto loaded = msv::load_param_store<float>(dir);
  msv::validate_param_store(loaded, specs);
  for (const auto& [name, t] : params.tensors) CHECK(oracle::bit_equal(t, loaded.at(name)));

  loaded.tensors.erase("c.bn.gamma");
  try {
    msv::validate_param_store(loaded, specs);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("c.bn.gamma") != std::string::npos);
  }
}
