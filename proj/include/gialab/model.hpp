#pragma once

// Layer-graph descriptions of the small target networks, their parameters,
// forward evaluation on an autodiff tape, and a content digest of the
// architecture.

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "gialab/autodiff.hpp"
#include "gialab/tensor.hpp"

namespace gialab {

enum class ActivationKind { relu, sigmoid, tanh, leaky_relu };

inline const char* to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::leaky_relu: return "leaky_relu";
  }
  return "?";
}

inline ActivationKind parse_activation(const std::string& s) {
  if (s == "relu") return ActivationKind::relu;
  if (s == "sigmoid") return ActivationKind::sigmoid;
  if (s == "tanh") return ActivationKind::tanh;
  if (s == "leaky_relu") return ActivationKind::leaky_relu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

struct LinearLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
  bool head = false;
};

struct ConvLayer {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct ActivationLayer {
  ActivationKind kind = ActivationKind::relu;
  double alpha = 0.01;
};

struct FlattenLayer {};

/// Prepended binning block: relu(W x + b) over the flattened input, projected
/// back and added to the input so the host network still runs.
struct ImprintLayer {
  std::size_t bins = 0;
};

using LayerKind = std::variant<LinearLayer, ConvLayer, ActivationLayer, FlattenLayer, ImprintLayer>;

struct Layer {
  std::string name;
  LayerKind kind;
};

struct ModelSpec {
  std::string name;
  Shape input;  // C, H, W
  std::size_t classes = 0;
  std::vector<Layer> layers;
};

using NamedTensors = std::map<std::string, Tensor>;
using Params = NamedTensors;

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string describe(const LayerKind& k) {
  std::ostringstream os;
  std::visit(
      [&](const auto& l) {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, LinearLayer>) {
          os << "linear " << l.in << "->" << l.out << (l.bias ? " bias" : " nobias") << (l.head ? " head" : "");
        } else if constexpr (std::is_same_v<T, ConvLayer>) {
          os << "conv " << l.in_ch << "->" << l.out_ch << " k" << l.kernel << " s" << l.stride << " p" << l.pad;
        } else if constexpr (std::is_same_v<T, ActivationLayer>) {
          os << "activation " << to_string(l.kind);
          if (l.kind == ActivationKind::leaky_relu) os << " a" << l.alpha;
        } else if constexpr (std::is_same_v<T, FlattenLayer>) {
          os << "flatten";
        } else {
          os << "imprint linear+relu " << l.bins << " bins (residual projection)";
        }
      },
      k);
  return os.str();
}

/// Parameter tensor names a layer owns, in canonical order.
inline std::vector<std::string> layer_param_names(const Layer& layer) {
  std::vector<std::string> out;
  std::visit(
      [&](const auto& l) {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, LinearLayer>) {
          out.push_back(layer.name + ".weight");
          if (l.bias) out.push_back(layer.name + ".bias");
        } else if constexpr (std::is_same_v<T, ConvLayer>) {
          out.push_back(layer.name + ".weight");
          out.push_back(layer.name + ".bias");
        } else if constexpr (std::is_same_v<T, ImprintLayer>) {
          out.push_back(layer.name + ".weight");
          out.push_back(layer.name + ".bias");
          out.push_back(layer.name + ".proj");
        }
      },
      layer.kind);
  return out;
}

inline std::vector<std::string> param_names(const ModelSpec& spec) {
  std::vector<std::string> out;
  for (const Layer& l : spec.layers) {
    for (auto& n : layer_param_names(l)) out.push_back(std::move(n));
  }
  return out;
}

/// Checks that the layers chain; returns the expected shape of every
/// parameter tensor. Throws SpecError naming the first broken link.
inline std::map<std::string, Shape> validate(const ModelSpec& spec) {
  auto fail = [&](std::size_t i, const std::string& why) {
    std::string lname = i < spec.layers.size() ? spec.layers[i].name : "?";
    throw SpecError("model '" + spec.name + "': layer " + std::to_string(i) + " (" + lname + "): " + why);
  };
  if (spec.input.size() != 3 || numel(spec.input) == 0) throw SpecError("model '" + spec.name + "': input must be C,H,W");
  if (spec.classes < 2) throw SpecError("model '" + spec.name + "': needs at least 2 classes");
  if (spec.layers.empty()) throw SpecError("model '" + spec.name + "': no layers");

  std::map<std::string, Shape> shapes;
  Shape cur = spec.input;  // without batch axis
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    if (layer.name.empty()) fail(i, "empty name");
    for (const auto& n : layer_param_names(layer)) {
      if (shapes.count(n)) fail(i, "duplicate parameter name " + n);
    }
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>) {
            if (cur.size() != 1) fail(i, "linear needs flat input, got " + shape_str(cur));
            if (cur[0] != l.in) fail(i, "expected input " + std::to_string(l.in) + ", got " + std::to_string(cur[0]));
            if (l.out == 0) fail(i, "zero outputs");
            if (l.head != (i + 1 == spec.layers.size())) fail(i, "classifier head must be exactly the last layer");
            if (l.head && l.out != spec.classes) fail(i, "head width " + std::to_string(l.out) + " != classes");
            shapes[layer.name + ".weight"] = Shape{l.out, l.in};
            if (l.bias) shapes[layer.name + ".bias"] = Shape{l.out};
            cur = Shape{l.out};
          } else if constexpr (std::is_same_v<T, ConvLayer>) {
            if (cur.size() != 3) fail(i, "conv needs C,H,W input, got " + shape_str(cur));
            if (cur[0] != l.in_ch) fail(i, "expected " + std::to_string(l.in_ch) + " channels, got " + std::to_string(cur[0]));
            if (l.out_ch == 0 || l.kernel == 0 || l.stride == 0) fail(i, "zero-sized conv");
            ad::ConvGeometry g{l.stride, l.pad};
            std::size_t h = ad::conv_out_extent(cur[1], l.kernel, g), w = ad::conv_out_extent(cur[2], l.kernel, g);
            if (h == 0 || w == 0) fail(i, "kernel larger than input " + shape_str(cur));
            shapes[layer.name + ".weight"] = Shape{l.out_ch, l.in_ch, l.kernel, l.kernel};
            shapes[layer.name + ".bias"] = Shape{l.out_ch};
            cur = Shape{l.out_ch, h, w};
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            cur = Shape{numel(cur)};
          } else if constexpr (std::is_same_v<T, ImprintLayer>) {
            if (l.bins < 2) fail(i, "imprint needs at least 2 bins");
            std::size_t m = numel(cur);
            shapes[layer.name + ".weight"] = Shape{l.bins, m};
            shapes[layer.name + ".bias"] = Shape{l.bins};
            shapes[layer.name + ".proj"] = Shape{m, l.bins};
          }
        },
        layer.kind);
  }
  const auto* head = std::get_if<LinearLayer>(&spec.layers.back().kind);
  if (!head || !head->head) fail(spec.layers.size() - 1, "last layer must be a linear classifier head");
  return shapes;
}

inline void check_params(const ModelSpec& spec, const Params& params) {
  auto shapes = validate(spec);
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw SpecError("params: missing " + name);
    if (it->second.shape() != shape) {
      throw SpecError("params: " + name + " has shape " + shape_str(it->second.shape()) + ", expected " + shape_str(shape));
    }
  }
  for (const auto& [name, t] : params) {
    if (!shapes.count(name)) throw SpecError("params: orphan tensor " + name);
  }
}

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases.
inline Params build_model(const ModelSpec& spec, std::uint64_t seed) {
  auto shapes = validate(spec);
  CounterRng rng(seed);
  Params params;
  std::size_t stream = 0;
  for (const std::string& name : param_names(spec)) {
    const Shape& s = shapes.at(name);
    CounterRng r = rng.derive(stream++);
    bool is_bias = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    if (is_bias) {
      params[name] = Tensor::zeros(s);
    } else {
      std::size_t fan_in = numel(s) / s[0];
      if (name.size() > 5 && name.compare(name.size() - 5, 5, ".proj") == 0) fan_in = s[1];
      double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      params[name] = random_uniform(s, r, -bound, bound);
    }
  }
  return params;
}

using ParamVars = std::map<std::string, ad::Var>;

inline ParamVars as_vars(ad::Graph& g, const Params& params, bool requires_grad) {
  ParamVars out;
  for (const auto& [name, t] : params) out[name] = g.leaf(t, requires_grad);
  return out;
}

inline ad::Var apply_activation(ad::Var x, const ActivationLayer& a) {
  switch (a.kind) {
    case ActivationKind::relu: return ad::relu(x);
    case ActivationKind::sigmoid: return ad::sigmoid(x);
    case ActivationKind::tanh: return ad::tanh(x);
    case ActivationKind::leaky_relu: return ad::leaky_relu(x, a.alpha);
  }
  return x;
}

/// Logits [B, classes] for a [B,C,H,W] input. When `preactivations` is given,
/// the input of every activation layer is appended to it.
inline ad::Var forward(const ModelSpec& spec, const ParamVars& p, ad::Var x,
                       std::vector<Tensor>* preactivations = nullptr) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != spec.input) {
    throw ShapeError("forward(" + spec.name + "): input " + shape_str(xs) + " does not match " + shape_str(spec.input));
  }
  std::size_t B = xs[0];
  ad::Var cur = x;
  for (const Layer& layer : spec.layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>) {
            cur = ad::matmul(cur, ad::transpose(p.at(layer.name + ".weight")));
            if (l.bias) cur = ad::add_bias(cur, p.at(layer.name + ".bias"));
          } else if constexpr (std::is_same_v<T, ConvLayer>) {
            cur = ad::conv2d(cur, p.at(layer.name + ".weight"), ad::ConvGeometry{l.stride, l.pad});
            cur = ad::add_bias(cur, p.at(layer.name + ".bias"));
          } else if constexpr (std::is_same_v<T, ActivationLayer>) {
            if (preactivations) preactivations->push_back(cur.value());
            cur = apply_activation(cur, l);
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            cur = ad::reshape(cur, Shape{B, cur.value().size() / B});
          } else {
            Shape orig = cur.shape();
            ad::Var flat = ad::reshape(cur, Shape{B, cur.value().size() / B});
            ad::Var bins = ad::relu(ad::add_bias(ad::matmul(flat, ad::transpose(p.at(layer.name + ".weight"))),
                                                 p.at(layer.name + ".bias")));
            ad::Var back = ad::matmul(bins, ad::transpose(p.at(layer.name + ".proj")));
            cur = ad::reshape(ad::add(flat, back), orig);
          }
        },
        layer.kind);
  }
  return cur;
}

inline ad::Var model_loss(const ModelSpec& spec, const ParamVars& p, ad::Var x, const std::vector<int>& labels) {
  return ad::softmax_cross_entropy(forward(spec, p, x), labels);
}

/// Parameter gradients of the mean cross-entropy as tape nodes, in
/// param_names order. With create_graph they stay differentiable in `x` and
/// in the parameter vars.
inline std::vector<ad::Var> param_gradients(const ModelSpec& spec, const ParamVars& p, ad::Var x,
                                            const std::vector<int>& labels, bool create_graph) {
  ad::Var loss = model_loss(spec, p, x, labels);
  std::vector<ad::Var> wrt;
  for (const auto& n : param_names(spec)) wrt.push_back(p.at(n));
  return ad::grad(*x.graph, loss, wrt, create_graph);
}

struct LossAndGrads {
  double loss = 0.0;
  NamedTensors grads;
};

inline LossAndGrads loss_and_grads(const ModelSpec& spec, const Params& params, const Tensor& x,
                                   const std::vector<int>& labels) {
  check_params(spec, params);
  if (x.rank() != 4 || x.dim(0) != labels.size()) {
    throw ShapeError("loss_and_grads: batch " + shape_str(x.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= spec.classes) {
      throw std::out_of_range("loss_and_grads: label " + std::to_string(y) + " outside [0, " + std::to_string(spec.classes) + ")");
    }
  }
  ad::Graph g;
  ParamVars pv = as_vars(g, params, true);
  ad::Var xv = g.constant(x);
  ad::Var loss = model_loss(spec, pv, xv, labels);
  auto names = param_names(spec);
  std::vector<ad::Var> wrt;
  for (const auto& n : names) wrt.push_back(pv.at(n));
  auto grads = ad::gradients(g, loss, wrt);
  LossAndGrads out;
  out.loss = loss.value().item();
  for (std::size_t i = 0; i < names.size(); ++i) out.grads[names[i]] = std::move(grads[i]);
  return out;
}

inline Tensor predict_logits(const ModelSpec& spec, const Params& params, const Tensor& x) {
  ad::Graph g;
  ad::NoGradScope ng(g);
  return forward(spec, as_vars(g, params, false), g.constant(x)).value();
}

/// Stable digest of input shape, class count, and layer kinds/shapes/order.
/// Layer names and parameter values do not enter it.
inline std::string structural_hash(const ModelSpec& spec) {
  std::ostringstream os;
  os << "in:" << shape_str(spec.input) << ";classes:" << spec.classes << ';';
  for (const Layer& l : spec.layers) os << describe(l.kind) << '|';
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Canonical zoo

namespace zoo {

inline ModelSpec mlp2(Shape input, std::size_t classes, ActivationKind act = ActivationKind::relu,
                      std::size_t hidden = 64) {
  std::size_t m = numel(input);
  return ModelSpec{"mlp2",
                   std::move(input),
                   classes,
                   {{"flat", FlattenLayer{}},
                    {"fc1", LinearLayer{m, hidden, true, false}},
                    {"act1", ActivationLayer{act}},
                    {"fc2", LinearLayer{hidden, classes, true, true}}}};
}

/// conv 3x3 (pad 1) stack followed by a linear head; `deep` doubles the stack.
inline ModelSpec cnn_s(Shape input, std::size_t classes, ActivationKind act = ActivationKind::relu, bool deep = false) {
  std::size_t c = input.at(0), h = input.at(1), w = input.at(2);
  ModelSpec s{deep ? "cnn_s_deep" : "cnn_s", input, classes, {}};
  std::vector<std::pair<std::size_t, std::size_t>> convs =
      deep ? std::vector<std::pair<std::size_t, std::size_t>>{{c, 8}, {8, 8}, {8, 16}, {16, 16}}
           : std::vector<std::pair<std::size_t, std::size_t>>{{c, 8}, {8, 16}};
  for (std::size_t i = 0; i < convs.size(); ++i) {
    s.layers.push_back({"conv" + std::to_string(i + 1), ConvLayer{convs[i].first, convs[i].second, 3, 1, 1}});
    s.layers.push_back({"act" + std::to_string(i + 1), ActivationLayer{act}});
  }
  s.layers.push_back({"flat", FlattenLayer{}});
  s.layers.push_back({"fc", LinearLayer{16 * h * w, classes, true, true}});
  return s;
}

/// Wide linear layer directly on raw pixels, then a second hidden layer.
inline ModelSpec linear_first(Shape input, std::size_t classes, ActivationKind act = ActivationKind::relu,
                              std::size_t width = 128) {
  std::size_t m = numel(input);
  return ModelSpec{"linear_first",
                   std::move(input),
                   classes,
                   {{"flat", FlattenLayer{}},
                    {"fc1", LinearLayer{m, width, true, false}},
                    {"act1", ActivationLayer{act}},
                    {"fc2", LinearLayer{width, 32, true, false}},
                    {"act2", ActivationLayer{act}},
                    {"fc3", LinearLayer{32, classes, true, true}}}};
}

}  // namespace zoo

inline std::vector<ActivationKind> activations_of(const ModelSpec& spec) {
  std::vector<ActivationKind> out;
  for (const Layer& l : spec.layers) {
    if (const auto* a = std::get_if<ActivationLayer>(&l.kind)) out.push_back(a->kind);
  }
  return out;
}

/// The classifier head's layer name.
inline const std::string& head_name(const ModelSpec& spec) { return spec.layers.back().name; }

/// First layer that owns parameters, if any.
inline const Layer* first_param_layer(const ModelSpec& spec) {
  for (const Layer& l : spec.layers) {
    if (!layer_param_names(l).empty()) return &l;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Text form, one layer per line:
//   model <name> / input C H W / classes K
//   layer <name> linear IN OUT [bias|nobias] [head]
//   layer <name> conv IN OUT K STRIDE PAD
//   layer <name> activation KIND [ALPHA]
//   layer <name> flatten
//   layer <name> imprint BINS

inline std::string to_text(const ModelSpec& spec) {
  std::ostringstream os;
  os << "model " << spec.name << "\ninput " << spec.input.at(0) << ' ' << spec.input.at(1) << ' ' << spec.input.at(2)
     << "\nclasses " << spec.classes << '\n';
  for (const Layer& layer : spec.layers) {
    os << "layer " << layer.name << ' ';
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>) {
            os << "linear " << l.in << ' ' << l.out << (l.bias ? " bias" : " nobias") << (l.head ? " head" : "");
          } else if constexpr (std::is_same_v<T, ConvLayer>) {
            os << "conv " << l.in_ch << ' ' << l.out_ch << ' ' << l.kernel << ' ' << l.stride << ' ' << l.pad;
          } else if constexpr (std::is_same_v<T, ActivationLayer>) {
            os << "activation " << to_string(l.kind);
            if (l.kind == ActivationKind::leaky_relu) os << ' ' << l.alpha;
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            os << "flatten";
          } else {
            os << "imprint " << l.bins;
          }
        },
        layer.kind);
    os << '\n';
  }
  return os.str();
}

/// Parses a single "layer ..." line body (after the keyword).
inline Layer parse_layer_line(std::istringstream& ls, std::size_t lineno) {
  auto bad = [&](const std::string& why) {
    throw SpecError("spec line " + std::to_string(lineno) + ": " + why);
  };
  Layer layer;
  std::string kind;
  if (!(ls >> layer.name >> kind)) bad("expected 'layer <name> <kind> ...'");
  if (kind == "linear") {
    LinearLayer l;
    if (!(ls >> l.in >> l.out)) bad("linear needs IN OUT");
    std::string flag;
    while (ls >> flag) {
      if (flag == "bias") l.bias = true;
      else if (flag == "nobias") l.bias = false;
      else if (flag == "head") l.head = true;
      else bad("unknown linear flag '" + flag + "'");
    }
    layer.kind = l;
  } else if (kind == "conv") {
    ConvLayer l;
    if (!(ls >> l.in_ch >> l.out_ch >> l.kernel >> l.stride >> l.pad)) bad("conv needs IN OUT K STRIDE PAD");
    layer.kind = l;
  } else if (kind == "activation") {
    ActivationLayer l;
    std::string a;
    if (!(ls >> a)) bad("activation needs a kind");
    try {
      l.kind = parse_activation(a);
    } catch (const std::invalid_argument& e) {
      bad(e.what());
    }
    double alpha;
    if (ls >> alpha) l.alpha = alpha;
    layer.kind = l;
  } else if (kind == "flatten") {
    layer.kind = FlattenLayer{};
  } else if (kind == "imprint") {
    ImprintLayer l;
    if (!(ls >> l.bins)) bad("imprint needs BINS");
    layer.kind = l;
  } else {
    bad("unknown layer kind '" + kind + "'");
  }
  return layer;
}

inline ModelSpec parse_spec(const std::string& text) {
  ModelSpec spec;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "model") {
      ls >> spec.name;
    } else if (key == "input") {
      std::size_t c, h, w;
      if (!(ls >> c >> h >> w)) throw SpecError("spec line " + std::to_string(lineno) + ": input needs C H W");
      spec.input = Shape{c, h, w};
    } else if (key == "classes") {
      if (!(ls >> spec.classes)) throw SpecError("spec line " + std::to_string(lineno) + ": classes needs a count");
    } else if (key == "layer") {
      spec.layers.push_back(parse_layer_line(ls, lineno));
    }
  }
  validate(spec);
  return spec;
}

}  // namespace gialab
