// Command-line front end: shape/complexity tables, forward runs, gradient
// checks, toy training and detection-metric evaluation.
//
// Exit codes: 0 success, 1 validation failure, 2 usage error. All randomness
// flows from --seed; outputs are written atomically (temp file + rename).

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "msv/msv.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

msv::ModelGraph load_model(const std::string& path) {
  return msv::infer_shapes(msv::parse_model_config(read_text_file(path)));
}

struct CommonOpts {
  std::string model;
  std::string weights_dir;
  std::string save_weights;
  std::string input_path;
  std::string out_path;
  std::uint64_t seed = 0;
  std::string precision = "single";
  unsigned threads = 1;
};

int run_shapes(const CommonOpts& opt) {
  auto graph = load_model(opt.model);
  auto cost = msv::count_graph(graph);
  std::printf("%-12s %-18s %-16s %12s %12s %14s\n", "id", "kind", "output", "params",
              "running", "flops");
  for (const auto& l : cost.layers)
    std::printf("%-12s %-18s %-16s %12zu %12zu %14zu\n", l.id.c_str(), l.kind.c_str(),
                msv::shape_str(l.out_shape).c_str(), l.params, l.running_stats, l.flops);
  std::printf("%-12s %-18s %-16s %12zu %12zu %14zu\n", "total", "", "", cost.total_params,
              cost.total_running, cost.total_flops);
  std::printf("params %.3f M, flops %.3f G (running stats excluded from params)\n",
              static_cast<double>(cost.total_params) / 1e6,
              static_cast<double>(cost.total_flops) / 1e9);
  return 0;
}

template <class T>
int run_forward_typed(const CommonOpts& opt) {
  auto graph = load_model(opt.model);
  const auto specs = msv::graph_param_specs(graph);

  msv::ParamStore<T> params;
  if (!opt.weights_dir.empty()) {
    params = msv::load_param_store<T>(opt.weights_dir);
    msv::validate_param_store(params, specs);
  } else {
    msv::Rng rng = msv::Rng(opt.seed).fork(0x77656967687473ull);
    msv::init_params(params, specs, rng);
  }
  if (!opt.save_weights.empty())
    msv::save_param_store(opt.save_weights, params, {"model " + opt.model});

  auto input = msv::load_tensor<T>(opt.input_path);
  auto outputs = msv::graph_forward(graph, params, input, false, opt.threads);
  fs::create_directories(opt.out_path);
  for (const auto& [id, tensor] : outputs) {
    const auto path = (fs::path(opt.out_path) / (id + ".mst")).string();
    msv::save_tensor(path, tensor);
    std::printf("wrote %s %s\n", path.c_str(), msv::shape_str(tensor.shape()).c_str());
  }
  return 0;
}

int run_gradcheck(const std::string& target, const std::string& precision, std::uint64_t seed) {
  const auto run = [&](auto tag) -> msv::GradCheckReport {
    using T = decltype(tag);
    if (fs::exists(target)) return msv::run_gradcheck_model<T>(load_model(target), seed);
    return msv::run_gradcheck_target<T>(target, seed);
  };
  msv::GradCheckReport report =
      precision == "double" ? run(double{}) : run(float{});
  std::fputs(report.to_text().c_str(), stdout);
  std::printf("%s: max_rel_err=%.3e %s\n", target.c_str(), report.max_rel_err,
              report.pass ? "pass" : "FAIL");
  return report.pass ? 0 : 1;
}

int run_train_toy(const CommonOpts& opt, std::size_t steps, std::size_t samples,
                  std::size_t target_channels, double lr_max, double lr_min,
                  double weight_decay) {
  auto graph = load_model(opt.model);
  msv::ParamStore<float> params;
  msv::Rng rng = msv::Rng(opt.seed).fork(0x77656967687473ull);
  msv::init_graph_params(params, graph, rng);

  msv::ToyTaskConfig task;
  task.samples = samples;
  task.target_channels = target_channels;
  msv::TrainToyOptions train_opt;
  train_opt.steps = steps;
  train_opt.seed = opt.seed;
  train_opt.lr_max = lr_max;
  train_opt.lr_min = lr_min;
  train_opt.weight_decay = weight_decay;
  train_opt.threads = opt.threads;

  auto result = msv::train_toy(graph, params, task, train_opt);

  std::ostringstream os;
  os << "# step\tloss\n";
  char buf[64];
  for (std::size_t i = 0; i < result.losses.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.9e\n", i + 1, result.losses[i]);
    os << buf;
  }
  msv::write_file_atomic(opt.out_path, os.str());
  if (!opt.save_weights.empty())
    msv::save_param_store(opt.save_weights, params, {"model " + opt.model});

  if (result.diverged) {
    std::fprintf(stderr, "error: loss diverged (NaN) at step %zu\n", result.diverged_step);
    return 1;
  }
  if (!result.losses.empty())
    std::printf("steps=%zu initial=%.6e final=%.6e\n", result.losses.size(),
                result.losses.front(), result.losses.back());
  return 0;
}

int run_eval(const std::string& gt_dir, const std::string& pred_dir,
             const std::string& manifest, const std::string& out_prefix,
             const std::string& thresholds, const std::string& ap_method, double conf) {
  auto corpus = msv::eval::load_corpus(gt_dir, pred_dir, manifest);
  msv::eval::EvalConfig cfg;
  if (thresholds == "0.5") {
    cfg.thresholds = {0.5};
  } else if (thresholds == "0.5:0.95") {
    cfg.thresholds = msv::eval::iou_sweep();
  } else {
    throw CLI::ValidationError("--thresholds", "expected 0.5 or 0.5:0.95");
  }
  cfg.method = ap_method == "allpoint" ? msv::eval::ApMethod::all_point
                                       : msv::eval::ApMethod::interp101;
  cfg.confidence_threshold = conf;

  auto report = msv::eval::evaluate(corpus.dets, corpus.gts, cfg);
  const auto human = msv::eval::render_human_report(report);
  msv::write_file_atomic(out_prefix + ".txt", human);
  msv::write_file_atomic(out_prefix + ".tsv", msv::eval::render_machine_report(report));
  std::fputs(human.c_str(), stdout);
  std::printf("wrote %s.txt and %s.tsv\n", out_prefix.c_str(), out_prefix.c_str());
  return 0;
}

int run_lads_report(std::size_t cin, std::size_t cout, std::size_t groups, std::size_t height,
                    std::size_t width) {
  auto cfg = msv::LadsConfig::make(cin, cout, groups);
  auto r = msv::lads_vs_strided_report(cfg, height, width);
  std::printf("lads_params      %zu\n", r.lads_params);
  std::printf("lads_flops       %zu\n", r.lads_flops);
  std::printf("baseline_params  %zu\n", r.baseline_params);
  std::printf("baseline_flops   %zu\n", r.baseline_flops);
  std::printf("param_ratio      %.4f\n",
              static_cast<double>(r.lads_params) / static_cast<double>(r.baseline_params));
  std::printf("flop_ratio       %.4f\n",
              static_cast<double>(r.lads_flops) / static_cast<double>(r.baseline_flops));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-scale detection-block laboratory"};
  app.require_subcommand(1);

  CommonOpts opt;

  auto* shapes = app.add_subcommand("shapes", "print per-layer shapes, params and FLOPs");
  shapes->add_option("--model", opt.model, "model config file")->required();

  auto* forward = app.add_subcommand("forward", "run a model on a tensor file");
  forward->add_option("--model", opt.model, "model config file")->required();
  forward->add_option("--input", opt.input_path, "input tensor (.mst)")->required();
  forward->add_option("--out", opt.out_path, "output directory for sink tensors")->required();
  forward->add_option("--weights", opt.weights_dir,
                      "weights directory (omit to initialize from --seed)");
  forward->add_option("--save-weights", opt.save_weights, "write the used weights here");
  forward->add_option("--seed", opt.seed, "seed for weight initialization")
      ->capture_default_str();
  forward->add_option("--precision", opt.precision, "single or double")
      ->check(CLI::IsMember({"single", "double"}))
      ->capture_default_str();
  forward->add_option("--threads", opt.threads, "internal parallelism")->capture_default_str();

  std::string gc_target;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--target", gc_target, "op name, block name, or model config path")
      ->required();
  gradcheck->add_option("--precision", opt.precision, "single or double")
      ->check(CLI::IsMember({"single", "double"}))
      ->capture_default_str();
  gradcheck->add_option("--seed", opt.seed, "seed for inputs and weights")
      ->capture_default_str();

  std::size_t steps = 500, samples = 8, target_channels = 1;
  double lr_max = 1e-3, lr_min = 1e-5, weight_decay = 1e-2;
  auto* train = app.add_subcommand("train-toy", "synthetic-regression training run");
  train->add_option("--model", opt.model, "model config file")->required();
  train->add_option("--out", opt.out_path, "loss-curve output file")->required();
  train->add_option("--steps", steps, "optimizer steps")->capture_default_str();
  train->add_option("--samples", samples, "synthetic samples (<= 8)")->capture_default_str();
  train->add_option("--target-channels", target_channels, "regression target channels")
      ->capture_default_str();
  train->add_option("--lr-max", lr_max, "peak learning rate")->capture_default_str();
  train->add_option("--lr-min", lr_min, "final learning rate")->capture_default_str();
  train->add_option("--weight-decay", weight_decay, "decoupled weight decay")
      ->capture_default_str();
  train->add_option("--seed", opt.seed, "seed for weights, inputs and targets")
      ->capture_default_str();
  train->add_option("--threads", opt.threads, "internal parallelism")->capture_default_str();
  train->add_option("--save-weights", opt.save_weights, "write trained weights here");

  std::string gt_dir, pred_dir, manifest, out_prefix;
  std::string thresholds = "0.5:0.95", ap_method = "101";
  double conf = 0.25;
  auto* eval = app.add_subcommand("eval", "detection-metric evaluation of a labeled corpus");
  eval->add_option("--gt", gt_dir, "ground-truth label directory")->required();
  eval->add_option("--pred", pred_dir, "prediction directory")->required();
  eval->add_option("--manifest", manifest, "image-id manifest file")->required();
  eval->add_option("--out", out_prefix, "report path prefix (.txt/.tsv)")->required();
  eval->add_option("--thresholds", thresholds, "0.5 or 0.5:0.95")
      ->check(CLI::IsMember({"0.5", "0.5:0.95"}))
      ->capture_default_str();
  eval->add_option("--ap-method", ap_method, "allpoint or 101")
      ->check(CLI::IsMember({"allpoint", "101"}))
      ->capture_default_str();
  eval->add_option("--conf", conf, "confidence operating point for P/R")
      ->capture_default_str();

  std::size_t cin = 64, cout = 64, groups = 64, height = 64, width = 64;
  auto* lads = app.add_subcommand("lads-report",
                                  "parameter/FLOP comparison against a strided convolution");
  lads->add_option("--cin", cin, "input channels")->capture_default_str();
  lads->add_option("--cout", cout, "output channels")->capture_default_str();
  lads->add_option("--groups", groups, "branch-2 group count")->capture_default_str();
  lads->add_option("--height", height, "input height for FLOP accounting")
      ->capture_default_str();
  lads->add_option("--width", width, "input width for FLOP accounting")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (shapes->parsed()) return run_shapes(opt);
    if (forward->parsed()) {
      return opt.precision == "double" ? run_forward_typed<double>(opt)
                                       : run_forward_typed<float>(opt);
    }
    if (gradcheck->parsed()) {
      const auto& known = msv::gradcheck_target_names();
      const bool is_known = std::find(known.begin(), known.end(), gc_target) != known.end();
      if (!is_known && !fs::exists(gc_target)) {
        std::fprintf(stderr, "usage error: unknown gradcheck target '%s'\n", gc_target.c_str());
        std::fprintf(stderr, "known targets:");
        for (const auto& n : known) std::fprintf(stderr, " %s", n.c_str());
        std::fprintf(stderr, " or a model config path\n");
        return 2;
      }
      return run_gradcheck(gc_target, opt.precision, opt.seed);
    }
    if (train->parsed())
      return run_train_toy(opt, steps, samples, target_channels, lr_max, lr_min, weight_decay);
    if (eval->parsed())
      return run_eval(gt_dir, pred_dir, manifest, out_prefix, thresholds, ap_method, conf);
    if (lads->parsed()) return run_lads_report(cin, cout, groups, height, width);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
