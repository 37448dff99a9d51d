#pragma once

// Declarative layer graphs. A model config is line-oriented text, one layer
// per line:
//
//   <kind> <id> [from=<id>[,<id>]] [key=value ...]
//   input  <id> <N> <C> <H> <W>
//
// '#' starts a comment. A layer without from= consumes the previous line's
// output. Kinds: input, cbs, dwr, msdrm, dcfem, lads, avgpool, maxpool,
// upsample-nearest, concat, add, conv1x1. Every reference must point to an
// earlier line, so the graph is a DAG by construction.

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msv/blocks.hpp"

namespace msv {

enum class LayerKind {
  input,
  cbs,
  dwr,
  msdrm,
  dcfem,
  lads,
  avgpool,
  maxpool,
  upsample_nearest,
  concat,
  add,
  conv1x1,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::cbs: return "cbs";
    case LayerKind::dwr: return "dwr";
    case LayerKind::msdrm: return "msdrm";
    case LayerKind::dcfem: return "dcfem";
    case LayerKind::lads: return "lads";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::upsample_nearest: return "upsample-nearest";
    case LayerKind::concat: return "concat";
    case LayerKind::add: return "add";
    case LayerKind::conv1x1: return "conv1x1";
  }
  return "?";
}

inline std::optional<LayerKind> kind_from_name(const std::string& s) {
  static const std::map<std::string, LayerKind> table = {
      {"input", LayerKind::input},     {"cbs", LayerKind::cbs},
      {"dwr", LayerKind::dwr},         {"msdrm", LayerKind::msdrm},
      {"dcfem", LayerKind::dcfem},     {"lads", LayerKind::lads},
      {"avgpool", LayerKind::avgpool}, {"maxpool", LayerKind::maxpool},
      {"upsample-nearest", LayerKind::upsample_nearest},
      {"concat", LayerKind::concat},   {"add", LayerKind::add},
      {"conv1x1", LayerKind::conv1x1}};
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

class ModelError : public std::runtime_error {
 public:
  ModelError(int line, const std::string& msg)
      : std::runtime_error("model config line " + std::to_string(line) + ": " + msg),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::input;
  std::vector<std::string> inputs;          // producer ids
  std::map<std::string, std::string> args;  // verbatim key=value pairs
  int line = 0;                             // 1-based source line
};

// Typed view of a layer's arguments, populated during shape resolution.
struct LayerPlan {
  CbsConfig cbs;
  DwrConfig dwr;
  MsDrmConfig msdrm;
  DcfemConfig dcfem;
  LadsConfig lads;
  std::size_t pool_kernel = 0, pool_stride = 0, pool_padding = 0;
  std::size_t upsample_factor = 2;
  double add_value = 0.0;
  std::size_t conv_out = 0;
  bool conv_bias = true;
};

struct ModelGraph {
  std::vector<LayerSpec> layers;

  bool resolved = false;
  std::vector<Shape> shapes;      // per layer, once resolved
  std::vector<LayerPlan> plans;   // per layer, once resolved
  std::map<std::string, std::size_t> index;

  std::size_t input_layer() const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].kind == LayerKind::input) return i;
    throw std::logic_error("graph has no input layer");
  }

  // layers whose output feeds nothing else
  std::vector<std::size_t> sinks() const {
    std::vector<bool> consumed(layers.size(), false);
    for (const auto& l : layers)
      for (const auto& in : l.inputs) consumed[index.at(in)] = true;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (!consumed[i]) out.push_back(i);
    return out;
  }
};

// ---------------------------------------------------------------------------
// parsing

namespace graphdetail {

inline std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    if (tok[0] == '#') break;
    out.push_back(tok);
  }
  return out;
}

inline std::size_t parse_size(const std::string& value, int line, const std::string& what) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size() || v < 0) throw std::invalid_argument("");
    return static_cast<std::size_t>(v);
  } catch (...) {
    throw ModelError(line, "expected a non-negative integer for " + what + ", got '" + value +
                               "'");
  }
}

inline double parse_double(const std::string& value, int line, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ModelError(line, "expected a number for " + what + ", got '" + value + "'");
  }
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

struct ArgReader {
  const LayerSpec& spec;
  std::vector<std::string> known;

  std::size_t size_arg(const std::string& key, std::size_t fallback) {
    known.push_back(key);
    auto it = spec.args.find(key);
    if (it == spec.args.end()) return fallback;
    return parse_size(it->second, spec.line, key);
  }

  bool flag_arg(const std::string& key, bool fallback) {
    known.push_back(key);
    auto it = spec.args.find(key);
    if (it == spec.args.end()) return fallback;
    if (it->second == "0" || it->second == "false") return false;
    if (it->second == "1" || it->second == "true") return true;
    throw ModelError(spec.line, "expected 0/1 for " + key + ", got '" + it->second + "'");
  }

  double double_arg(const std::string& key, double fallback) {
    known.push_back(key);
    auto it = spec.args.find(key);
    if (it == spec.args.end()) return fallback;
    return parse_double(it->second, spec.line, key);
  }

  std::size_t required_size(const std::string& key) {
    known.push_back(key);
    auto it = spec.args.find(key);
    if (it == spec.args.end())
      throw ModelError(spec.line, std::string(kind_name(spec.kind)) + " layer '" + spec.id +
                                      "' needs " + key + "=");
    return parse_size(it->second, spec.line, key);
  }

  std::vector<std::size_t> size_list(const std::string& key,
                                     std::vector<std::size_t> fallback) {
    known.push_back(key);
    auto it = spec.args.find(key);
    if (it == spec.args.end()) return fallback;
    std::vector<std::size_t> out;
    for (const auto& part : split_commas(it->second))
      out.push_back(parse_size(part, spec.line, key));
    return out;
  }

  void reject_unknown() const {
    for (const auto& [key, value] : spec.args) {
      bool ok = false;
      for (const auto& k : known) ok = ok || k == key;
      if (!ok) throw ModelError(spec.line, "unknown argument '" + key + "' for kind " +
                                               kind_name(spec.kind));
    }
  }
};

}  // namespace graphdetail

inline ModelGraph parse_model_config(const std::string& text) {
  ModelGraph g;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::string previous_id;

  while (std::getline(in, line)) {
    ++line_no;
    auto tokens = graphdetail::tokenize(line);
    if (tokens.empty()) continue;

    const auto kind = kind_from_name(tokens[0]);
    if (!kind) throw ModelError(line_no, "unknown kind '" + tokens[0] + "'");
    if (tokens.size() < 2) throw ModelError(line_no, "missing layer id");

    LayerSpec spec;
    spec.kind = *kind;
    spec.id = tokens[1];
    spec.line = line_no;
    if (spec.id.find('=') != std::string::npos || spec.id.find(',') != std::string::npos)
      throw ModelError(line_no, "invalid layer id '" + spec.id + "'");
    if (g.index.count(spec.id)) throw ModelError(line_no, "duplicate id '" + spec.id + "'");

    if (spec.kind == LayerKind::input) {
      if (tokens.size() != 6)
        throw ModelError(line_no, "input layer needs exactly four extents: input <id> N C H W");
      const char* keys[4] = {"n", "c", "h", "w"};
      for (int d = 0; d < 4; ++d) {
        const std::size_t v = graphdetail::parse_size(tokens[2 + d], line_no, keys[d]);
        if (v == 0) throw ModelError(line_no, "input extents must be >= 1");
        spec.args[keys[d]] = tokens[2 + d];
      }
    } else {
      bool from_seen = false;
      for (std::size_t i = 2; i < tokens.size(); ++i) {
        const auto& tok = tokens[i];
        const auto eq = tok.find('=');
        if (eq == std::string::npos || eq == 0)
          throw ModelError(line_no, "expected key=value, got '" + tok + "'");
        const std::string key = tok.substr(0, eq);
        const std::string value = tok.substr(eq + 1);
        if (key == "from") {
          from_seen = true;
          for (const auto& ref : graphdetail::split_commas(value)) {
            if (ref.empty()) throw ModelError(line_no, "empty producer reference");
            spec.inputs.push_back(ref);
          }
        } else {
          if (spec.args.count(key)) throw ModelError(line_no, "duplicate argument '" + key + "'");
          spec.args[key] = value;
        }
      }
      if (!from_seen) {
        if (previous_id.empty())
          throw ModelError(line_no, "layer '" + spec.id + "' has no from= and no previous layer");
        spec.inputs.push_back(previous_id);
      }
      for (const auto& ref : spec.inputs)
        if (!g.index.count(ref))
          throw ModelError(line_no, "reference to undefined layer '" + ref + "'");

      const std::size_t arity = spec.inputs.size();
      if (spec.kind == LayerKind::dcfem && arity != 2)
        throw ModelError(line_no, "dcfem takes exactly 2 inputs, got " + std::to_string(arity));
      if (spec.kind == LayerKind::concat && arity < 2)
        throw ModelError(line_no, "concat takes at least 2 inputs, got " + std::to_string(arity));
      if (spec.kind != LayerKind::dcfem && spec.kind != LayerKind::concat && arity != 1)
        throw ModelError(line_no, std::string(kind_name(spec.kind)) + " takes exactly 1 input");
    }

    g.index[spec.id] = g.layers.size();
    previous_id = spec.id;
    g.layers.push_back(std::move(spec));
  }

  if (g.layers.empty()) throw ModelError(line_no == 0 ? 1 : line_no, "empty model config");
  std::size_t input_count = 0;
  for (const auto& l : g.layers) input_count += l.kind == LayerKind::input ? 1 : 0;
  if (input_count != 1)
    throw ModelError(g.layers.front().line,
                     "model must declare exactly one input layer, found " +
                         std::to_string(input_count));
  return g;
}

// Canonical re-serialization of the parsed grammar.
inline std::string serialize_model_config(const ModelGraph& g) {
  std::ostringstream os;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::input) {
      os << "input " << l.id << " " << l.args.at("n") << " " << l.args.at("c") << " "
         << l.args.at("h") << " " << l.args.at("w") << "\n";
      continue;
    }
    os << kind_name(l.kind) << " " << l.id << " from=";
    for (std::size_t i = 0; i < l.inputs.size(); ++i) os << (i ? "," : "") << l.inputs[i];
    for (const auto& [key, value] : l.args) os << " " << key << "=" << value;
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// shape inference

inline ModelGraph infer_shapes(ModelGraph g, std::optional<Shape> input_shape = std::nullopt) {
  g.shapes.assign(g.layers.size(), Shape{});
  g.plans.assign(g.layers.size(), LayerPlan{});

  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& spec = g.layers[i];
    graphdetail::ArgReader args{spec, {}};
    LayerPlan& plan = g.plans[i];

    std::vector<const Shape*> in_shapes;
    for (const auto& ref : spec.inputs) in_shapes.push_back(&g.shapes[g.index.at(ref)]);

    const auto wrap = [&](auto&& fn) {
      try {
        fn();
      } catch (const ModelError&) {
        throw;
      } catch (const std::exception& e) {
        throw ModelError(spec.line, std::string(e.what()));
      }
    };

    switch (spec.kind) {
      case LayerKind::input: {
        Shape s{graphdetail::parse_size(spec.args.at("n"), spec.line, "n"),
                graphdetail::parse_size(spec.args.at("c"), spec.line, "c"),
                graphdetail::parse_size(spec.args.at("h"), spec.line, "h"),
                graphdetail::parse_size(spec.args.at("w"), spec.line, "w")};
        if (input_shape) {
          if (input_shape->size() != 4) throw ModelError(spec.line, "input override must be rank 4");
          s = *input_shape;
        }
        g.shapes[i] = s;
        break;
      }
      case LayerKind::cbs: {
        const Shape& in = *in_shapes[0];
        CbsConfig cfg;
        cfg.in_channels = in[1];
        cfg.out_channels = args.required_size("cout");
        cfg.kernel = args.size_arg("k", 3);
        cfg.stride = args.size_arg("stride", 1);
        cfg.padding_auto = args.size_arg("pad", cfg.kernel / 2);
        cfg.dilation = args.size_arg("dilation", 1);
        cfg.groups = args.size_arg("groups", 1);
        cfg.conv_bias = args.flag_arg("bias", false);
        args.reject_unknown();
        wrap([&] {
          cfg.validate();
          g.shapes[i] = Shape{in[0], cfg.out_channels,
                              conv_output_extent(in[2], cfg.kernel, cfg.stride, cfg.padding_auto,
                                                 cfg.dilation),
                              conv_output_extent(in[3], cfg.kernel, cfg.stride, cfg.padding_auto,
                                                 cfg.dilation)};
        });
        plan.cbs = cfg;
        break;
      }
      case LayerKind::dwr: {
        const Shape& in = *in_shapes[0];
        DwrConfig cfg;
        cfg.channels = in[1];
        cfg.dilations = args.size_list("dilations", {1, 3, 5});
        args.reject_unknown();
        wrap([&] { cfg.validate(); });
        g.shapes[i] = in;
        plan.dwr = cfg;
        break;
      }
      case LayerKind::msdrm: {
        const Shape& in = *in_shapes[0];
        MsDrmConfig cfg;
        cfg.in_channels = in[1];
        cfg.out_channels = args.size_arg("cout", in[1]);
        cfg.hidden = args.size_arg("hidden", std::max<std::size_t>(3, cfg.out_channels / 2));
        cfg.units = args.size_arg("n", 1);
        cfg.dilations = args.size_list("dilations", {1, 3, 5});
        args.reject_unknown();
        wrap([&] { cfg.validate(); });
        g.shapes[i] = Shape{in[0], cfg.out_channels, in[2], in[3]};
        plan.msdrm = cfg;
        break;
      }
      case LayerKind::dcfem: {
        const Shape& a = *in_shapes[0];
        const Shape& b = *in_shapes[1];
        if (a[0] != b[0] || a[2] != b[2] || a[3] != b[3])
          throw ModelError(spec.line, "dcfem inputs must agree on batch and spatial extents: " +
                                          shape_str(a) + " vs " + shape_str(b));
        DcfemConfig cfg;
        cfg.in_backbone = a[1];
        cfg.in_neck = b[1];
        cfg.channels = args.size_arg("c", a[1]);
        cfg.spatial_kernel = args.size_arg("kernel", 7);
        cfg.reduction = args.size_arg("reduction", 4);
        args.reject_unknown();
        wrap([&] { cfg.validate(); });
        // graph form: the two enhanced C-wide paths, concatenated
        g.shapes[i] = Shape{a[0], 2 * cfg.channels, a[2], a[3]};
        plan.dcfem = cfg;
        break;
      }
      case LayerKind::lads: {
        const Shape& in = *in_shapes[0];
        LadsConfig cfg;
        cfg.in_channels = in[1];
        cfg.out_channels = args.size_arg("cout", 2 * in[1]);
        cfg.groups = args.size_arg("groups", 4);
        cfg.pad_odd = args.flag_arg("pad_odd", false);
        args.reject_unknown();
        wrap([&] { cfg.validate(); });
        if ((in[2] % 2 != 0 || in[3] % 2 != 0) && !cfg.pad_odd)
          throw ModelError(spec.line, "lads input extents must be even (or set pad_odd=1): " +
                                          shape_str(in));
        g.shapes[i] = Shape{in[0], cfg.out_channels, (in[2] + 1) / 2, (in[3] + 1) / 2};
        plan.lads = cfg;
        break;
      }
      case LayerKind::avgpool:
      case LayerKind::maxpool: {
        const Shape& in = *in_shapes[0];
        plan.pool_kernel = args.required_size("k");
        plan.pool_stride = args.size_arg("stride", plan.pool_kernel);
        plan.pool_padding = args.size_arg("pad", 0);
        args.reject_unknown();
        wrap([&] {
          detail::require(plan.pool_padding < plan.pool_kernel, "pool padding must be < kernel");
          g.shapes[i] = Shape{in[0], in[1],
                              conv_output_extent(in[2], plan.pool_kernel, plan.pool_stride,
                                                 plan.pool_padding, 1),
                              conv_output_extent(in[3], plan.pool_kernel, plan.pool_stride,
                                                 plan.pool_padding, 1)};
        });
        break;
      }
      case LayerKind::upsample_nearest: {
        const Shape& in = *in_shapes[0];
        plan.upsample_factor = args.size_arg("factor", 2);
        args.reject_unknown();
        if (plan.upsample_factor < 1)
          throw ModelError(spec.line, "upsample factor must be >= 1");
        g.shapes[i] = Shape{in[0], in[1], in[2] * plan.upsample_factor,
                            in[3] * plan.upsample_factor};
        break;
      }
      case LayerKind::concat: {
        const Shape& first = *in_shapes[0];
        std::size_t channels = 0;
        for (const Shape* s : in_shapes) {
          if ((*s)[0] != first[0] || (*s)[2] != first[2] || (*s)[3] != first[3])
            throw ModelError(spec.line, "concat inputs must agree on batch and spatial extents: " +
                                            shape_str(first) + " vs " + shape_str(*s));
          channels += (*s)[1];
        }
        args.reject_unknown();
        g.shapes[i] = Shape{first[0], channels, first[2], first[3]};
        break;
      }
      case LayerKind::add: {
        plan.add_value = args.double_arg("value", 0.0);
        args.reject_unknown();
        g.shapes[i] = *in_shapes[0];
        break;
      }
      case LayerKind::conv1x1: {
        const Shape& in = *in_shapes[0];
        plan.conv_out = args.required_size("cout");
        plan.conv_bias = args.flag_arg("bias", true);
        args.reject_unknown();
        if (plan.conv_out < 1) throw ModelError(spec.line, "conv1x1 cout must be >= 1");
        g.shapes[i] = Shape{in[0], plan.conv_out, in[2], in[3]};
        break;
      }
    }
  }
  g.resolved = true;
  return g;
}

// ---------------------------------------------------------------------------
// parameter and FLOP accounting

inline void require_resolved(const ModelGraph& g) {
  if (!g.resolved) throw std::logic_error("graph is unresolved; run infer_shapes first");
}

inline std::vector<ParamInfo> layer_param_specs(const ModelGraph& g, std::size_t i) {
  require_resolved(g);
  const LayerSpec& spec = g.layers[i];
  const LayerPlan& plan = g.plans[i];
  switch (spec.kind) {
    case LayerKind::cbs: return cbs_param_specs(spec.id, plan.cbs);
    case LayerKind::dwr: return dwr_param_specs(spec.id, plan.dwr);
    case LayerKind::msdrm: return msdrm_param_specs(spec.id, plan.msdrm);
    case LayerKind::dcfem: return dcfem_param_specs(spec.id, plan.dcfem);
    case LayerKind::lads: return lads_param_specs(spec.id, plan.lads);
    case LayerKind::conv1x1: {
      const Shape& in = g.shapes[g.index.at(spec.inputs[0])];
      std::vector<ParamInfo> out;
      blockdetail::add_conv_specs(out, spec.id + ".conv", plan.conv_out, in[1], 1, 1,
                                  plan.conv_bias);
      return out;
    }
    default: return {};
  }
}

inline std::vector<ParamInfo> graph_param_specs(const ModelGraph& g) {
  require_resolved(g);
  std::vector<ParamInfo> out;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    auto specs = layer_param_specs(g, i);
    out.insert(out.end(), specs.begin(), specs.end());
  }
  return out;
}

struct LayerCost {
  std::string id;
  std::string kind;
  Shape out_shape;
  std::size_t params = 0;         // learned
  std::size_t running_stats = 0;  // BN running statistics, reported separately
  std::size_t flops = 0;
};

struct GraphCost {
  std::vector<LayerCost> layers;
  std::size_t total_params = 0;
  std::size_t total_running = 0;
  std::size_t total_flops = 0;
};

inline GraphCost count_graph(const ModelGraph& g) {
  require_resolved(g);
  GraphCost cost;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& spec = g.layers[i];
    const LayerPlan& plan = g.plans[i];
    LayerCost lc;
    lc.id = spec.id;
    lc.kind = kind_name(spec.kind);
    lc.out_shape = g.shapes[i];

    const auto specs = layer_param_specs(g, i);
    lc.params = count_learned(specs);
    lc.running_stats = count_running(specs);

    const Shape* in = spec.inputs.empty() ? nullptr : &g.shapes[g.index.at(spec.inputs[0])];
    const std::size_t n = g.shapes[i][0];
    switch (spec.kind) {
      case LayerKind::input: break;
      case LayerKind::cbs: lc.flops = cbs_flops(plan.cbs, n, (*in)[2], (*in)[3]); break;
      case LayerKind::dwr: lc.flops = dwr_flops(plan.dwr, n, (*in)[2], (*in)[3]); break;
      case LayerKind::msdrm: lc.flops = msdrm_flops(plan.msdrm, n, (*in)[2], (*in)[3]); break;
      case LayerKind::dcfem: lc.flops = dcfem_flops(plan.dcfem, n, (*in)[2], (*in)[3]); break;
      case LayerKind::lads: lc.flops = lads_flops(plan.lads, n, (*in)[2], (*in)[3]); break;
      case LayerKind::avgpool:
      case LayerKind::maxpool:
        lc.flops = plan.pool_kernel * plan.pool_kernel * numel(g.shapes[i]);
        break;
      case LayerKind::upsample_nearest: break;  // data movement only
      case LayerKind::concat: break;
      case LayerKind::add: lc.flops = numel(g.shapes[i]); break;
      case LayerKind::conv1x1:
        lc.flops = blockdetail::conv_flops(n, plan.conv_out, (*in)[1], 1, 1, g.shapes[i][2],
                                           g.shapes[i][3]);
        break;
    }
    cost.total_params += lc.params;
    cost.total_running += lc.running_stats;
    cost.total_flops += lc.flops;
    cost.layers.push_back(std::move(lc));
  }
  return cost;
}

// Spec-facing split views over count_graph.
inline GraphCost count_params(const ModelGraph& g) { return count_graph(g); }
inline GraphCost count_flops(const ModelGraph& g) { return count_graph(g); }

// Deterministic parameter initialization for every layer of the graph.
template <class T>
void init_graph_params(ParamStore<T>& store, const ModelGraph& g, Rng& rng) {
  init_params(store, graph_param_specs(g), rng);
}

// ---------------------------------------------------------------------------
// execution

template <class T>
struct GraphRecording {
  std::vector<Var> layer_vars;
  std::vector<std::size_t> sink_indices;
};

template <class T>
GraphRecording<T> graph_record(BlockCtx<T>& ctx, const ModelGraph& g, Var input) {
  require_resolved(g);
  GraphRecording<T> rec;
  rec.layer_vars.resize(g.layers.size());
  Tape<T>& tp = ctx.tape;

  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& spec = g.layers[i];
    const LayerPlan& plan = g.plans[i];
    std::vector<Var> ins;
    for (const auto& ref : spec.inputs) ins.push_back(rec.layer_vars[g.index.at(ref)]);

    Var out;
    switch (spec.kind) {
      case LayerKind::input: {
        const Tensor<T>& v = tp.value(input);
        if (v.shape() != g.shapes[i])
          throw std::invalid_argument("graph input tensor has shape " + shape_str(v.shape()) +
                                      ", expected " + shape_str(g.shapes[i]));
        out = input;
        break;
      }
      case LayerKind::cbs: out = cbs_forward(ctx, ins[0], plan.cbs, spec.id); break;
      case LayerKind::dwr: out = dwr_forward(ctx, ins[0], plan.dwr, spec.id); break;
      case LayerKind::msdrm: out = msdrm_forward(ctx, ins[0], plan.msdrm, spec.id); break;
      case LayerKind::dcfem: {
        auto r = dcfem_forward(ctx, ins[0], ins[1], plan.dcfem, spec.id);
        out = tp.concat({r.backbone, r.neck}, 1);
        break;
      }
      case LayerKind::lads: out = lads_forward(ctx, ins[0], plan.lads, spec.id); break;
      case LayerKind::avgpool:
        out = tp.avg_pool(ins[0], plan.pool_kernel, plan.pool_stride, plan.pool_padding);
        break;
      case LayerKind::maxpool:
        out = tp.max_pool(ins[0], plan.pool_kernel, plan.pool_stride, plan.pool_padding);
        break;
      case LayerKind::upsample_nearest:
        out = tp.upsample_nearest(ins[0], plan.upsample_factor);
        break;
      case LayerKind::concat: out = tp.concat(ins, 1); break;
      case LayerKind::add: out = tp.add_scalar(ins[0], static_cast<T>(plan.add_value)); break;
      case LayerKind::conv1x1:
        out = blockdetail::conv(ctx, ins[0], spec.id + ".conv",
                                ConvParams{plan.conv_out, 1, 1, 1, 0, 1, 1, plan.conv_bias});
        break;
    }
    rec.layer_vars[i] = out;
  }
  rec.sink_indices = g.sinks();
  return rec;
}

// Forward pass over plain tensors; returns every sink output keyed by id.
template <class T>
std::map<std::string, Tensor<T>> graph_forward(const ModelGraph& g, const ParamStore<T>& params,
                                               const Tensor<T>& input, bool training = false,
                                               unsigned threads = 1) {
  Tape<T> tape;
  BlockCtx<T> ctx{tape, params};
  ctx.trainable = false;
  ctx.training = training;
  ctx.threads = threads;
  auto rec = graph_record(ctx, g, tape.constant(input));
  std::map<std::string, Tensor<T>> out;
  for (std::size_t s : rec.sink_indices) out[g.layers[s].id] = tape.value(rec.layer_vars[s]);
  return out;
}

}  // namespace msv
