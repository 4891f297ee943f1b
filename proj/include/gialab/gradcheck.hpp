#pragma once

// Central finite-difference checks of tape gradients, with a registry of one
// case per primitive op and per zoo model.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gialab/attack_gen.hpp"
#include "gialab/attack_opt.hpp"
#include "gialab/autodiff.hpp"
#include "gialab/model.hpp"

namespace gialab {

struct GradCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)> fn;  // scalar
  double lo = -2.0, hi = 2.0;  // input sampling range
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t trials = 0;
  std::size_t coordinates = 0;
  std::size_t kinks = 0;  // coordinates skipped because [x-h, x+h] straddles a kink
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Checks up to `max_coords` randomly chosen coordinates (all of them for
/// small inputs) of every leaf, on `trials` random inputs. A coordinate whose
/// one-sided slopes disagree by more than kink_tolerance sits on a relu/max
/// kink, where the central difference is meaningless; it is retried with a
/// smaller step and, failing that, counted in `kinks` and not compared.
inline GradCheckResult check_gradients(const GradCase& c, std::size_t trials, std::uint64_t seed, double h = 1e-5,
                                       std::size_t max_coords = 24, double kink_tolerance = 1e-3) {
  GradCheckResult res{c.name, 0.0, trials, 0};
  CounterRng root(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng = root.derive(t);
    std::vector<Tensor> xs;
    for (const Shape& s : c.shapes) xs.push_back(random_uniform(s, rng, c.lo, c.hi));
    auto eval = [&](const std::vector<Tensor>& in) {
      ad::Graph g;
      std::vector<ad::Var> vs;
      for (const Tensor& x : in) vs.push_back(g.leaf(x, false));
      return c.fn(g, vs).value().item();
    };
    ad::Graph g;
    std::vector<ad::Var> vs;
    for (const Tensor& x : xs) vs.push_back(g.leaf(x, true));
    ad::Var out = c.fn(g, vs);
    std::vector<Tensor> grads = ad::gradients(g, out, vs);
    double f0 = eval(xs);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      std::size_t n = xs[k].size();
      std::vector<std::size_t> coords;
      if (n <= max_coords) {
        for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
      } else {
        for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(rng.below(n));
      }
      for (std::size_t i : coords) {
        // a kink inside [x-h, x+h] gets a second chance with a 100x smaller step
        std::optional<double> numeric;
        for (double step : {h, h * 1e-2}) {
          std::vector<Tensor> xp = xs, xm = xs;
          xp[k][i] += step;
          xm[k][i] -= step;
          double fp = eval(xp), fm = eval(xm);
          if (relative_error((fp - f0) / step, (f0 - fm) / step) <= kink_tolerance) {
            numeric = (fp - fm) / (2.0 * step);
            break;
          }
        }
        if (!numeric) {
          ++res.kinks;
          continue;
        }
        res.max_rel_error = std::max(res.max_rel_error, relative_error(grads[k][i], *numeric));
        ++res.coordinates;
      }
    }
  }
  return res;
}

namespace detail {

/// Scalar readout sum(v * w) with a fixed pseudo-random w, so every output
/// entry gets a distinct upstream gradient.
inline ad::Var readout(ad::Graph& g, ad::Var v, std::uint64_t tag = 0) {
  CounterRng r = CounterRng(0x5eed).derive(tag);
  return ad::sum(ad::mul(v, g.constant(random_uniform(v.shape(), r, -1.0, 1.0))));
}

inline Tensor fixed_tensor(const Shape& s, std::uint64_t tag, double lo, double hi) {
  CounterRng r = CounterRng(0xf1ed).derive(tag);
  return random_uniform(s, r, lo, hi);
}

}  // namespace detail

inline std::vector<GradCase> primitive_op_cases() {
  using namespace ad;
  using V = std::vector<Var>;
  auto ro = [](Graph& g, Var v) { return gialab::detail::readout(g, v); };
  std::vector<GradCase> c;
  c.push_back({"add", {{3, 4}, {3, 4}}, [=](Graph& g, const V& v) { return ro(g, add(v[0], v[1])); }});
  c.push_back({"sub", {{3, 4}, {3, 4}}, [=](Graph& g, const V& v) { return ro(g, sub(v[0], v[1])); }});
  c.push_back({"mul", {{3, 4}, {3, 4}}, [=](Graph& g, const V& v) { return ro(g, mul(v[0], v[1])); }});
  c.push_back({"affine", {{5}}, [=](Graph& g, const V& v) { return ro(g, affine(v[0], -1.7, 0.3)); }});
  c.push_back({"relu", {{12}}, [=](Graph& g, const V& v) { return ro(g, relu(v[0])); }});
  c.push_back({"leaky_relu", {{12}}, [=](Graph& g, const V& v) { return ro(g, leaky_relu(v[0], 0.1)); }});
  c.push_back({"sigmoid", {{12}}, [=](Graph& g, const V& v) { return ro(g, sigmoid(v[0])); }, -3.0, 3.0});
  c.push_back({"tanh", {{12}}, [=](Graph& g, const V& v) { return ro(g, tanh(v[0])); }, -3.0, 3.0});
  c.push_back({"sqrt", {{8}}, [=](Graph& g, const V& v) { return ro(g, sqrt(v[0])); }, 0.2, 2.0});
  c.push_back({"reciprocal", {{8}}, [=](Graph& g, const V& v) { return ro(g, reciprocal(v[0])); }, 0.5, 2.0});
  c.push_back({"sum", {{2, 3, 4}}, [=](Graph&, const V& v) { return mul(sum(v[0]), sum(v[0])); }});
  c.push_back({"mean", {{2, 3, 4}}, [=](Graph&, const V& v) { return mul(mean(v[0]), sum(v[0])); }});
  c.push_back({"expand_scalar", {{}}, [=](Graph& g, const V& v) { return ro(g, mul(expand_scalar(v[0], {2, 3}), expand_scalar(v[0], {2, 3}))); }});
  c.push_back({"sum_last", {{3, 5}}, [=](Graph& g, const V& v) { return ro(g, mul(sum_last(v[0]), sum_last(v[0]))); }});
  c.push_back({"expand_last", {{3, 1}}, [=](Graph& g, const V& v) { return ro(g, mul(expand_last(v[0], 4), expand_last(v[0], 4))); }});
  c.push_back({"broadcast_channel", {{3}}, [=](Graph& g, const V& v) { auto b = broadcast_channel(v[0], {2, 3, 2, 2}); return ro(g, mul(b, b)); }});
  c.push_back({"sum_channel", {{2, 3, 2, 2}}, [=](Graph& g, const V& v) { auto s = sum_channel(v[0]); return ro(g, mul(s, s)); }});
  c.push_back({"add_bias", {{2, 4}, {4}}, [=](Graph& g, const V& v) { auto y = add_bias(v[0], v[1]); return ro(g, mul(y, y)); }});
  c.push_back({"reshape", {{2, 6}}, [=](Graph& g, const V& v) { auto y = reshape(v[0], {3, 4}); return ro(g, mul(y, y)); }});
  c.push_back({"slice", {{2, 3, 4, 4}}, [=](Graph& g, const V& v) { auto y = slice(v[0], {0, 1, 1, 0}, {2, 3, 3, 3}); return ro(g, mul(y, y)); }});
  c.push_back({"embed", {{2, 2}}, [=](Graph& g, const V& v) { auto y = embed(v[0], {1, 1}, {4, 4}); return ro(g, mul(y, y)); }});
  c.push_back({"concat", {{2, 3}, {2, 2}}, [=](Graph& g, const V& v) { auto y = concat(v[0], v[1], 1); return ro(g, mul(y, y)); }});
  c.push_back({"gather_rows", {{4, 3}}, [=](Graph& g, const V& v) { auto y = gather_rows(v[0], {2, 0, 2}); return ro(g, mul(y, y)); }});
  c.push_back({"scatter_rows", {{3, 3}}, [=](Graph& g, const V& v) { auto y = scatter_rows(v[0], {1, 3, 1}, 4); return ro(g, mul(y, y)); }});
  c.push_back({"matmul", {{3, 4}, {4, 2}}, [=](Graph& g, const V& v) { return ro(g, matmul(v[0], v[1])); }});
  c.push_back({"transpose", {{3, 4}}, [=](Graph& g, const V& v) { auto y = transpose(v[0]); return ro(g, mul(y, y)); }});
  c.push_back({"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}},
               [=](Graph& g, const V& v) { return ro(g, conv2d(v[0], v[1], ConvGeometry{1, 1})); }});
  c.push_back({"conv2d_strided", {{1, 2, 6, 6}, {2, 2, 3, 3}},
               [=](Graph& g, const V& v) { return ro(g, conv2d(v[0], v[1], ConvGeometry{2, 1})); }});
  c.push_back({"conv2d_input_grad", {{1, 3, 4, 4}, {3, 2, 3, 3}},
               [=](Graph& g, const V& v) { return ro(g, conv2d_input_grad(v[0], v[1], ConvGeometry{1, 1}, {1, 2, 4, 4})); }});
  c.push_back({"conv2d_weight_grad", {{1, 2, 4, 4}, {1, 3, 4, 4}},
               [=](Graph& g, const V& v) { return ro(g, conv2d_weight_grad(v[0], v[1], ConvGeometry{1, 1}, 3, 3)); }});
  c.push_back({"conv_transpose2d", {{1, 2, 3, 3}, {2, 2, 4, 4}},
               [=](Graph& g, const V& v) { return ro(g, conv_transpose2d(v[0], v[1], ConvGeometry{2, 1})); }});
  c.push_back({"softmax", {{2, 5}}, [=](Graph& g, const V& v) { return ro(g, softmax(v[0])); }, -2.0, 2.0});
  c.push_back({"softmax_cross_entropy", {{3, 4}},
               [=](Graph&, const V& v) { return softmax_cross_entropy(v[0], {1, 3, 0}); }, -2.0, 2.0});
  c.push_back({"mse", {{2, 3}, {2, 3}}, [=](Graph&, const V& v) { return mse(v[0], v[1]); }});
  c.push_back({"total_variation", {{1, 2, 4, 4}}, [=](Graph&, const V& v) { return total_variation(v[0]); }});
  return c;
}

namespace detail {

inline GradCase model_case(const std::string& name, const ModelSpec& spec, std::size_t batch) {
  auto names = param_names(spec);
  auto shapes = validate(spec);
  GradCase c;
  c.name = name;
  Shape xs = spec.input;
  xs.insert(xs.begin(), batch);
  c.shapes.push_back(xs);
  for (const auto& n : names) c.shapes.push_back(shapes.at(n));
  std::vector<int> labels;
  for (std::size_t i = 0; i < batch; ++i) labels.push_back(static_cast<int>((3 * i + 1) % spec.classes));
  c.fn = [spec, names, labels](ad::Graph&, const std::vector<ad::Var>& v) {
    ParamVars p;
    for (std::size_t i = 0; i < names.size(); ++i) p[names[i]] = v[i + 1];
    return model_loss(spec, p, v[0], labels);
  };
  return c;
}

}  // namespace detail

/// Cross-entropy of each canonical model, differentiated in its input and all
/// parameters; plus the generator and the second-order matching objective.
inline std::vector<GradCase> model_cases() {
  Shape in{1, 8, 8};
  std::vector<GradCase> c;
  for (ActivationKind a : {ActivationKind::relu, ActivationKind::sigmoid, ActivationKind::tanh, ActivationKind::leaky_relu}) {
    c.push_back(detail::model_case(std::string("mlp2_") + to_string(a), zoo::mlp2(in, 10, a, 16), 2));
  }
  c.push_back(detail::model_case("cnn_s_relu", zoo::cnn_s(in, 10), 2));
  c.push_back(detail::model_case("cnn_s_sigmoid", zoo::cnn_s(in, 10, ActivationKind::sigmoid), 2));
  c.push_back(detail::model_case("cnn_s_deep", zoo::cnn_s(in, 10, ActivationKind::relu, true), 2));
  c.push_back(detail::model_case("linear_first", zoo::linear_first(in, 10, ActivationKind::relu, 16), 2));
  c.push_back(detail::model_case("cnn_s_rgb", zoo::cnn_s({3, 8, 8}, 10), 1));

  GeneratorSpec gs;
  gs.output = in;
  std::vector<std::string> gnames;
  std::vector<Shape> gshapes{{2, gs.latent_dim}};
  for (const auto& [n, t] : build_generator(gs, 1)) {
    gnames.push_back(n);
    gshapes.push_back(t.shape());
  }
  c.push_back({"generator", gshapes, [gs, gnames](ad::Graph& g, const std::vector<ad::Var>& v) {
                 ParamVars p;
                 for (std::size_t i = 0; i < gnames.size(); ++i) p[gnames[i]] = v[i + 1];
                 return detail::readout(g, generate(gs, p, v[0], {2, 7}));
               }});

  for (ActivationKind a : {ActivationKind::relu, ActivationKind::sigmoid}) {
    for (Distance d : {Distance::cosine, Distance::l2}) {
      ModelSpec spec = zoo::mlp2({1, 4, 4}, 4, a, 8);
      Params params = build_model(spec, 5);
      auto names = param_names(spec);
      std::vector<Tensor> leaked;
      {
        Tensor x0 = detail::fixed_tensor({1, 1, 4, 4}, 9, -1.0, 1.0);
        auto lg = loss_and_grads(spec, params, x0, {2});
        for (const auto& n : names) leaked.push_back(lg.grads.at(n));
      }
      std::string name = std::string("matching_") + to_string(a) + (d == Distance::cosine ? "_cosine" : "_l2");
      c.push_back({name, {{1, 1, 4, 4}}, [spec, params, names, leaked, d](ad::Graph& g, const std::vector<ad::Var>& v) {
                     ParamVars pv = as_vars(g, params, true);
                     auto obs = param_gradients(spec, pv, v[0], {2}, true);
                     return ad::add(match_distance(g, obs, leaked, d), ad::scale(ad::total_variation(v[0]), 1e-2));
                   }});
    }
  }
  return c;
}

}  // namespace gialab
