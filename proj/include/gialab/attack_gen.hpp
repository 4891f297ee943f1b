#pragma once

// Generation-based inversion: latent search through a pretrained decoder,
// generator-parameter matching, and learned gradient-to-image inversion.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gialab/attack_opt.hpp"
#include "gialab/serialize.hpp"

namespace gialab {

enum class Conditioning { label_embedding, none };

/// Label-conditioned decoder: [z | emb(y)] -> linear -> relu -> 16 x H/4 x W/4
/// -> convT(16->8) -> relu -> convT(8->C) -> sigmoid.
struct GeneratorSpec {
  std::size_t latent_dim = 16;
  Shape output{1, 8, 8};
  std::size_t classes = 10;
  Conditioning conditioning = Conditioning::label_embedding;
  std::size_t embed_dim = 8;
  std::size_t base_channels = 16;

  void validate() const {
    if (latent_dim < 1) throw std::invalid_argument("GeneratorSpec: latent dim must be >= 1");
    if (output.size() != 3 || output[0] == 0) throw ShapeError("GeneratorSpec: output must be C,H,W");
    if (output[1] % 4 != 0 || output[2] % 4 != 0 || output[1] < 4 || output[2] < 4) {
      throw ShapeError("GeneratorSpec: output height and width must be positive multiples of 4, got " + shape_str(output));
    }
    if (conditioning == Conditioning::label_embedding && classes < 1) throw std::invalid_argument("GeneratorSpec: classes must be >= 1");
  }

  std::size_t input_dim() const { return latent_dim + (conditioning == Conditioning::label_embedding ? embed_dim : 0); }
  std::size_t mid_channels() const { return base_channels / 2; }
};

inline Params build_generator(const GeneratorSpec& gs, std::uint64_t seed) {
  gs.validate();
  CounterRng rng = CounterRng(seed).derive(0x6e6);
  std::size_t h0 = gs.output[1] / 4, w0 = gs.output[2] / 4, c0 = gs.base_channels, c1 = gs.mid_channels();
  auto uniform = [&](Shape s, std::size_t fan_in) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return random_uniform(std::move(s), rng, -bound, bound);
  };
  Params p;
  if (gs.conditioning == Conditioning::label_embedding) p["emb.weight"] = random_normal({gs.classes, gs.embed_dim}, rng, 0.0, 1.0);
  p["fc.weight"] = uniform({c0 * h0 * w0, gs.input_dim()}, gs.input_dim());
  p["fc.bias"] = Tensor::zeros({c0 * h0 * w0});
  p["up1.weight"] = uniform({c0, c1, 4, 4}, c0 * 4);
  p["up1.bias"] = Tensor::zeros({c1});
  p["up2.weight"] = uniform({c1, gs.output[0], 4, 4}, c1 * 4);
  p["up2.bias"] = Tensor::zeros({gs.output[0]});
  return p;
}

inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

/// Images in [0, 1], shape [B, C, H, W].
inline ad::Var generate(const GeneratorSpec& gs, const ParamVars& p, ad::Var z, const std::vector<int>& labels) {
  ad::Graph& g = *z.graph;
  std::size_t B = z.shape().at(0);
  if (z.shape().size() != 2 || z.shape()[1] != gs.latent_dim) {
    throw ShapeError("generate: latent batch " + shape_str(z.shape()) + " does not match latent dim " + std::to_string(gs.latent_dim));
  }
  ad::Var in = z;
  if (gs.conditioning == Conditioning::label_embedding) {
    if (labels.size() != B) throw ShapeError("generate: need one label per latent vector");
    in = ad::concat(z, ad::matmul(g.constant(one_hot(labels, gs.classes)), p.at("emb.weight")), 1);
  }
  std::size_t h0 = gs.output[1] / 4, w0 = gs.output[2] / 4;
  ad::Var h = ad::relu(ad::add_bias(ad::matmul(in, ad::transpose(p.at("fc.weight"))), p.at("fc.bias")));
  h = ad::reshape(h, Shape{B, gs.base_channels, h0, w0});
  ad::ConvGeometry up{2, 1};
  h = ad::relu(ad::add_bias(ad::conv_transpose2d(h, p.at("up1.weight"), up), p.at("up1.bias")));
  h = ad::add_bias(ad::conv_transpose2d(h, p.at("up2.weight"), up), p.at("up2.bias"));
  return ad::sigmoid(h);
}

inline Tensor generate_values(const GeneratorSpec& gs, const Params& p, const Tensor& z, const std::vector<int>& labels) {
  ad::Graph g;
  ad::NoGradScope ng(g);
  return generate(gs, as_vars(g, p, false), g.constant(z), labels).value();
}

// ---------------------------------------------------------------------------
// Decoder pretraining (autoencoder on auxiliary data)

struct DecoderTraining {
  std::size_t epochs = 60;
  std::size_t batch = 32;
  double lr = 3e-3;
  double holdout_fraction = 0.2;
  double max_holdout_mse = 0.02;
  std::size_t encoder_hidden = 64;
};

struct PretrainedDecoder {
  GeneratorSpec spec;
  Params generator;
  Params encoder;
  std::vector<double> train_curve;  // per-epoch mean training MSE
  double train_mse = 0.0;
  double holdout_mse = 0.0;
};

class TrainingFailed : public std::runtime_error {
 public:
  TrainingFailed(const std::string& what, std::vector<double> curve) : std::runtime_error(what), curve(std::move(curve)) {}
  std::vector<double> curve;
};

namespace detail {

inline std::string curve_str(const std::vector<double>& c) {
  std::ostringstream os;
  for (std::size_t i = 0; i < c.size(); ++i) os << (i ? " " : "") << c[i];
  return os.str();
}

inline ad::Var encode(const ParamVars& e, ad::Var x) {
  std::size_t B = x.shape()[0];
  ad::Var flat = ad::reshape(x, Shape{B, x.value().size() / B});
  ad::Var h = ad::relu(ad::add_bias(ad::matmul(flat, ad::transpose(e.at("enc1.weight"))), e.at("enc1.bias")));
  return ad::add_bias(ad::matmul(h, ad::transpose(e.at("enc2.weight"))), e.at("enc2.bias"));
}

inline double autoencoder_mse(const PretrainedDecoder& d, const Dataset& data, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  ad::Graph g;
  ad::NoGradScope ng(g);
  Dataset s = subset(data, idx);
  ad::Var x = g.constant(s.images);
  ad::Var z = encode(as_vars(g, d.encoder, false), x);
  return ad::mse(generate(d.spec, as_vars(g, d.generator, false), z, s.labels), x).value().item();
}

}  // namespace detail

/// Trains encoder + generator as an autoencoder with MSE; the generator is
/// the decoder. The last `holdout_fraction` of the data is held out.
inline PretrainedDecoder pretrain_decoder(const Dataset& aux, const GeneratorSpec& gs, const DecoderTraining& tr,
                                          std::uint64_t seed) {
  gs.validate();
  if (aux.image_shape() != gs.output) {
    throw ShapeError("pretrain_decoder: aux images " + shape_str(aux.image_shape()) + " do not match generator output " +
                     shape_str(gs.output));
  }
  if (aux.size() < 2) throw std::invalid_argument("pretrain_decoder: need at least 2 aux images");
  std::size_t n_hold = std::min(aux.size() - 1, static_cast<std::size_t>(std::floor(tr.holdout_fraction * static_cast<double>(aux.size()))));
  std::size_t n_train = aux.size() - n_hold;
  std::vector<std::size_t> train_idx(n_train), hold_idx(n_hold);
  for (std::size_t i = 0; i < n_train; ++i) train_idx[i] = i;
  for (std::size_t i = 0; i < n_hold; ++i) hold_idx[i] = n_train + i;

  PretrainedDecoder d;
  d.spec = gs;
  d.generator = build_generator(gs, seed);
  std::size_t m = numel(gs.output);
  CounterRng rng = CounterRng(seed).derive(0xe0c);
  double b1 = std::sqrt(6.0 / static_cast<double>(m)), b2 = std::sqrt(6.0 / static_cast<double>(tr.encoder_hidden));
  d.encoder["enc1.weight"] = random_uniform({tr.encoder_hidden, m}, rng, -b1, b1);
  d.encoder["enc1.bias"] = Tensor::zeros({tr.encoder_hidden});
  d.encoder["enc2.weight"] = random_uniform({gs.latent_dim, tr.encoder_hidden}, rng, -b2, b2);
  d.encoder["enc2.bias"] = Tensor::zeros({gs.latent_dim});

  std::vector<std::string> gnames, enames;
  std::vector<Tensor> params;
  for (const auto& [k, v] : d.generator) gnames.push_back(k), params.push_back(v);
  for (const auto& [k, v] : d.encoder) enames.push_back(k), params.push_back(v);
  AdamState adam(params);
  Dataset train = subset(aux, train_idx);
  std::size_t batch = std::min(tr.batch, n_train);
  for (std::size_t ep = 0; ep < tr.epochs; ++ep) {
    ClientConfig order{batch, 1, 1.0, seed};
    FedAvgTrace sched = fedavg_schedule(n_train, order, ep);
    double total = 0.0;
    for (const auto& step : sched.steps) {
      ad::Graph g;
      std::vector<ad::Var> vars;
      ParamVars gp, ep_vars;
      for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(g.leaf(params[i], true));
      for (std::size_t i = 0; i < gnames.size(); ++i) gp[gnames[i]] = vars[i];
      for (std::size_t i = 0; i < enames.size(); ++i) ep_vars[enames[i]] = vars[gnames.size() + i];
      std::vector<int> labels;
      for (std::size_t i : step) labels.push_back(train.labels[i]);
      ad::Var x = g.constant(take_rows(train.images, step));
      ad::Var loss = ad::mse(generate(gs, gp, detail::encode(ep_vars, x), labels), x);
      double l = loss.value().item();
      if (!std::isfinite(l)) throw TrainingFailed("pretrain_decoder: loss diverged at epoch " + std::to_string(ep), d.train_curve);
      total += l * static_cast<double>(step.size());
      adam_step(adam, params, ad::gradients(g, loss, vars), tr.lr);
    }
    d.train_curve.push_back(total / static_cast<double>(n_train));
  }
  for (std::size_t i = 0; i < gnames.size(); ++i) d.generator[gnames[i]] = params[i];
  for (std::size_t i = 0; i < enames.size(); ++i) d.encoder[enames[i]] = params[gnames.size() + i];
  d.train_mse = detail::autoencoder_mse(d, aux, train_idx);
  d.holdout_mse = n_hold ? detail::autoencoder_mse(d, aux, hold_idx) : d.train_mse;
  if (!(d.holdout_mse < tr.max_holdout_mse)) {
    throw TrainingFailed("pretrain_decoder: held-out MSE " + std::to_string(d.holdout_mse) + " above " +
                             std::to_string(tr.max_holdout_mse) + "; training curve: " + detail::curve_str(d.train_curve),
                         d.train_curve);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Attacks through a generator

namespace detail {

inline AttackResult finish_generated(MatchOutcome& mo, const Target& t, const Tensor& init, const std::vector<int>& labels,
                                     const OpGiaConfig& cfg, const std::string& what, const GroundTruth* truth,
                                     std::chrono::steady_clock::time_point t0) {
  AttackResult r;
  r.reconstruction = denormalize(mo.best_input, t.norm);
  r.init = init;
  r.labels = labels;
  r.objective = mo.best_objective;
  r.best_iteration = mo.best_iteration;
  r.trajectory = std::move(mo.trajectory);
  r.seed = cfg.seed;
  r.config = what + " " + cfg.echo();
  if (truth) score(r, *truth);
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline void check_generator_target(const GeneratorSpec& gs, const Target& t, const Update& update,
                                   const std::vector<int>& labels) {
  if (update.kind != UpdateKind::fedsgd_gradient) throw std::invalid_argument("generator attack: expects a FedSGD gradient");
  if (gs.output != t.spec.input) {
    throw ShapeError("generator output " + shape_str(gs.output) + " does not match model input " + shape_str(t.spec.input));
  }
  if (labels.size() != update.batch_size) throw std::invalid_argument("generator attack: one label per batch sample required");
}

}  // namespace detail

/// Optimizes only the latent codes of a fixed pretrained decoder. Results are
/// confined to the decoder's range, hence flagged semantic-level.
inline AttackResult latent_z_attack(const Update& update, const Target& t, const PretrainedDecoder& dec,
                                    const std::vector<int>& labels, const OpGiaConfig& cfg,
                                    const GroundTruth* truth = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  detail::check_generator_target(dec.spec, t, update, labels);
  CounterRng rng = CounterRng(cfg.seed).derive(0x2a);
  Tensor z0 = random_normal({labels.size(), dec.spec.latent_dim}, rng, 0.0, 1.0);
  Tensor init = generate_values(dec.spec, dec.generator, z0, labels);

  MatchProblem prob;
  prob.variables = {z0};
  prob.make_input = [&](ad::Graph& g, const std::vector<ad::Var>& v) {
    return normalize(generate(dec.spec, as_vars(g, dec.generator, false), v[0], labels), t.norm);
  };
  prob.observe = [&](ad::Graph& g, ad::Var x) { return param_gradients(t.spec, as_vars(g, t.params, true), x, labels, true); };
  prob.leaked = ordered(update.tensors, param_names(t.spec));
  MatchOutcome mo = run_matching(prob, cfg);
  AttackResult r = detail::finish_generated(mo, t, init, labels, cfg, "latent-z", truth, t0);
  r.note = "semantic-level";
  return r;
}

/// Optimizes the generator's parameters for a latent code fixed by the seed.
inline AttackResult gen_w_attack(const Update& update, const Target& t, const GeneratorSpec& gs,
                                 const std::vector<int>& labels, const OpGiaConfig& cfg,
                                 const GroundTruth* truth = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  gs.validate();
  detail::check_generator_target(gs, t, update, labels);
  Params w0 = build_generator(gs, cfg.seed);
  CounterRng rng = CounterRng(cfg.seed).derive(0x2b);
  Tensor z = random_normal({labels.size(), gs.latent_dim}, rng, 0.0, 1.0);
  Tensor init = generate_values(gs, w0, z, labels);

  std::vector<std::string> names;
  MatchProblem prob;
  for (const auto& [k, v] : w0) names.push_back(k), prob.variables.push_back(v);
  prob.make_input = [&](ad::Graph& g, const std::vector<ad::Var>& v) {
    ParamVars pv;
    for (std::size_t i = 0; i < names.size(); ++i) pv[names[i]] = v[i];
    return normalize(generate(gs, pv, g.constant(z), labels), t.norm);
  };
  prob.observe = [&](ad::Graph& g, ad::Var x) { return param_gradients(t.spec, as_vars(g, t.params, true), x, labels, true); };
  prob.leaked = ordered(update.tensors, param_names(t.spec));
  MatchOutcome mo = run_matching(prob, cfg);
  return detail::finish_generated(mo, t, init, labels, cfg, "generator-params", truth, t0);
}

/// Fraction of all activation-layer inputs that fall inside [-bound, bound]
/// for the given (normalized) input batch.
inline double preactivation_fraction_within(const ModelSpec& spec, const Params& params, const Tensor& inputs,
                                            double bound = 2.0) {
  ad::Graph g;
  ad::NoGradScope ng(g);
  std::vector<Tensor> pre;
  forward(spec, as_vars(g, params, false), g.constant(inputs), &pre);
  std::size_t in = 0, total = 0;
  for (const Tensor& t : pre) {
    for (double v : t.data()) in += std::abs(v) <= bound;
    total += t.size();
  }
  if (total == 0) throw std::invalid_argument("preactivation_fraction_within: " + spec.name + " has no activation layers");
  return static_cast<double>(in) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Learned inversion

struct InversionModel {
  std::size_t gradient_dim = 0;    // flattened leaked gradient length
  std::size_t projected_dim = 0;   // d_p
  std::vector<std::size_t> hidden{256};
  Shape batch_shape;               // B, C, H, W
  std::uint64_t projection_seed = 0;
  Params net;
  std::vector<double> train_curve;

  static constexpr std::size_t kMaxProjected = 2048;
};

namespace detail {

/// Fixed Gaussian projection, regenerated from the stored seed, entries
/// N(0, 1/d_p); identity when the gradient is no longer than kMaxProjected.
inline Tensor projection_matrix(const InversionModel& inv) {
  if (inv.projected_dim == inv.gradient_dim) return Tensor();
  CounterRng rng = CounterRng(inv.projection_seed).derive(0x9e);
  return random_normal({inv.projected_dim, inv.gradient_dim}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(inv.projected_dim)));
}

/// Projected, unit-norm gradient features.
inline std::vector<double> gradient_features(const InversionModel& inv, const Tensor& proj, const std::vector<double>& flat) {
  if (flat.size() != inv.gradient_dim) {
    throw ShapeError("inversion model expects a gradient of length " + std::to_string(inv.gradient_dim) + ", got " +
                     std::to_string(flat.size()));
  }
  std::vector<double> f;
  if (inv.projected_dim == inv.gradient_dim) {
    f = flat;
  } else {
    f.assign(inv.projected_dim, 0.0);
    for (std::size_t i = 0; i < inv.projected_dim; ++i) {
      const double* row = proj.data().data() + i * inv.gradient_dim;
      double s = 0.0;
      for (std::size_t j = 0; j < inv.gradient_dim; ++j) s += row[j] * flat[j];
      f[i] = s;
    }
  }
  double n = norm2(f);
  if (n > 0.0) {
    for (double& v : f) v /= n;
  }
  return f;
}

inline ad::Var inversion_forward(const InversionModel& inv, const ParamVars& p, ad::Var feats) {
  ad::Var h = feats;
  for (std::size_t l = 0; l <= inv.hidden.size(); ++l) {
    std::string n = "inv" + std::to_string(l);
    h = ad::add_bias(ad::matmul(h, ad::transpose(p.at(n + ".weight"))), p.at(n + ".bias"));
    if (l < inv.hidden.size()) h = ad::relu(h);
  }
  return ad::sigmoid(h);
}

}  // namespace detail

struct InversionTraining {
  std::size_t epochs = 30;
  std::size_t minibatch = 32;
  double lr = 1e-3;
};

/// Fits an MLP from (projected) gradients to the pixel batch that produced
/// them; gradients come from fresh aux batches of size B each epoch.
inline InversionModel train_inversion_model(const Dataset& aux, const Target& t, std::size_t B, InversionModel inv,
                                            const InversionTraining& tr, std::uint64_t seed) {
  if (B < 1 || B > aux.size()) throw std::invalid_argument("train_inversion_model: batch size must be in [1, aux size]");
  if (aux.image_shape() != t.spec.input) throw ShapeError("train_inversion_model: aux images do not match the model input");
  auto names = param_names(t.spec);
  inv.gradient_dim = 0;
  for (const auto& [n, s] : validate(t.spec)) inv.gradient_dim += numel(s);
  inv.projected_dim = std::min(inv.gradient_dim, InversionModel::kMaxProjected);
  inv.projection_seed = seed;
  inv.batch_shape = t.spec.input;
  inv.batch_shape.insert(inv.batch_shape.begin(), B);
  Tensor proj = detail::projection_matrix(inv);
  std::size_t out_dim = numel(inv.batch_shape);

  CounterRng rng = CounterRng(seed).derive(0x1d);
  std::vector<std::size_t> widths{inv.projected_dim};
  widths.insert(widths.end(), inv.hidden.begin(), inv.hidden.end());
  widths.push_back(out_dim);
  inv.net.clear();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    double bound = std::sqrt(6.0 / static_cast<double>(widths[l]));
    std::string n = "inv" + std::to_string(l);
    inv.net[n + ".weight"] = random_uniform({widths[l + 1], widths[l]}, rng, -bound, bound);
    inv.net[n + ".bias"] = Tensor::zeros({widths[l + 1]});
  }
  std::vector<std::string> pn;
  std::vector<Tensor> params;
  for (const auto& [k, v] : inv.net) pn.push_back(k), params.push_back(v);
  AdamState adam(params);

  std::size_t per_epoch = aux.size() / B;
  Tensor aux_in = normalize(aux.images, aux.norm);
  inv.train_curve.clear();
  for (std::size_t ep = 0; ep < tr.epochs; ++ep) {
    // gradient/target pairs for this epoch's aux batches
    ClientConfig order{B, 1, 1.0, seed};
    FedAvgTrace sched = fedavg_schedule(aux.size(), order, ep);
    std::vector<std::vector<double>> feats, targets;
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const auto& idx = sched.steps[s];
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(aux.labels[i]);
      auto lg = loss_and_grads(t.spec, t.params, take_rows(aux_in, idx), labels);
      feats.push_back(detail::gradient_features(inv, proj, flatten(lg.grads, names)));
      Tensor px = take_rows(aux.images, idx);
      targets.emplace_back(px.data().begin(), px.data().end());
    }
    double total = 0.0;
    for (std::size_t s = 0; s < per_epoch; s += tr.minibatch) {
      std::size_t nb = std::min(tr.minibatch, per_epoch - s);
      Tensor xf(Shape{nb, inv.projected_dim}), yt(Shape{nb, out_dim});
      for (std::size_t i = 0; i < nb; ++i) {
        std::copy(feats[s + i].begin(), feats[s + i].end(), xf.data().begin() + static_cast<std::ptrdiff_t>(i * inv.projected_dim));
        std::copy(targets[s + i].begin(), targets[s + i].end(), yt.data().begin() + static_cast<std::ptrdiff_t>(i * out_dim));
      }
      ad::Graph g;
      std::vector<ad::Var> vars;
      ParamVars pv;
      for (std::size_t i = 0; i < params.size(); ++i) pv[pn[i]] = vars.emplace_back(g.leaf(params[i], true));
      ad::Var loss = ad::mse(detail::inversion_forward(inv, pv, g.constant(xf)), g.constant(yt));
      double l = loss.value().item();
      if (!std::isfinite(l)) throw TrainingFailed("train_inversion_model: loss diverged at epoch " + std::to_string(ep), inv.train_curve);
      total += l * static_cast<double>(nb);
      adam_step(adam, params, ad::gradients(g, loss, vars), tr.lr);
    }
    inv.train_curve.push_back(total / static_cast<double>(per_epoch));
  }
  for (std::size_t i = 0; i < pn.size(); ++i) inv.net[pn[i]] = params[i];
  return inv;
}

/// One forward pass of the inversion model.
inline AttackResult invert_with_model(const InversionModel& inv, const Update& update, const ModelSpec& spec,
                                      const GroundTruth* truth = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  if (update.kind != UpdateKind::fedsgd_gradient) throw std::invalid_argument("invert_with_model: expects a FedSGD gradient");
  if (inv.batch_shape.empty() || update.batch_size != inv.batch_shape[0]) {
    throw ShapeError("invert_with_model: update batch size " + std::to_string(update.batch_size) +
                     " does not match the model's training batch shape " + shape_str(inv.batch_shape));
  }
  auto flat = flatten(update.tensors, param_names(spec));
  auto f = detail::gradient_features(inv, detail::projection_matrix(inv), flat);
  ad::Graph g;
  ad::NoGradScope ng(g);
  Tensor out = detail::inversion_forward(inv, as_vars(g, inv.net, false), g.constant(Tensor(Shape{1, f.size()}, f))).value();
  AttackResult r;
  r.reconstruction = out.reshaped(inv.batch_shape);
  r.init = Tensor(inv.batch_shape, 0.5);
  r.objective = 0.0;
  r.seed = inv.projection_seed;
  r.config = "inversion-model d_p=" + std::to_string(inv.projected_dim);
  if (truth) {
    r.labels = truth->labels;
    score(r, *truth);
  }
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Persistence (GIAG bundles). Scalar metadata rides along as small tensors.

namespace detail {
inline Tensor meta(std::initializer_list<double> v) { return Tensor(Shape{v.size()}, std::vector<double>(v)); }
// Leading element is the count so empty lists survive the round trip.
inline Tensor meta_vec(const std::vector<std::size_t>& v) {
  std::vector<double> d{static_cast<double>(v.size())};
  d.insert(d.end(), v.begin(), v.end());
  return Tensor(Shape{d.size()}, d);
}
inline std::vector<std::size_t> meta_vec_read(const Tensor& t) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i < t.size(); ++i) out.push_back(static_cast<std::size_t>(t[i]));
  if (t.size() == 0 || static_cast<std::size_t>(t[0]) != out.size()) throw FormatError("corrupt list metadata");
  return out;
}
}  // namespace detail

inline void save_decoder(const std::filesystem::path& path, const PretrainedDecoder& d) {
  NamedTensors b;
  for (const auto& [k, v] : d.generator) b["gen/" + k] = v;
  for (const auto& [k, v] : d.encoder) b["enc/" + k] = v;
  const GeneratorSpec& s = d.spec;
  b["meta/spec"] = detail::meta({static_cast<double>(s.latent_dim), static_cast<double>(s.output[0]), static_cast<double>(s.output[1]),
                                 static_cast<double>(s.output[2]), static_cast<double>(s.classes),
                                 s.conditioning == Conditioning::label_embedding ? 1.0 : 0.0, static_cast<double>(s.embed_dim),
                                 static_cast<double>(s.base_channels)});
  write_file_atomic(path, encode_bundle(b, kGeneratorMagic));
}

inline PretrainedDecoder load_decoder(const std::filesystem::path& path) {
  NamedTensors b = decode_bundle(read_file(path), kGeneratorMagic, path.string());
  PretrainedDecoder d;
  auto it = b.find("meta/spec");
  if (it == b.end() || it->second.size() != 8) throw FormatError(path.string() + ": missing generator metadata");
  const Tensor& m = it->second;
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(m[i]); };
  d.spec = GeneratorSpec{u(0), {u(1), u(2), u(3)}, u(4), m[5] != 0.0 ? Conditioning::label_embedding : Conditioning::none, u(6), u(7)};
  for (const auto& [k, v] : b) {
    if (k.rfind("gen/", 0) == 0) d.generator[k.substr(4)] = v;
    if (k.rfind("enc/", 0) == 0) d.encoder[k.substr(4)] = v;
  }
  return d;
}

inline void save_inversion_model(const std::filesystem::path& path, const InversionModel& inv) {
  NamedTensors b;
  for (const auto& [k, v] : inv.net) b["net/" + k] = v;
  b["meta/dims"] = detail::meta({static_cast<double>(inv.gradient_dim), static_cast<double>(inv.projected_dim),
                                 static_cast<double>(inv.projection_seed & 0xffffffffULL),
                                 static_cast<double>(inv.projection_seed >> 32)});
  b["meta/hidden"] = detail::meta_vec(inv.hidden);
  b["meta/batch_shape"] = detail::meta_vec(inv.batch_shape);
  write_file_atomic(path, encode_bundle(b, kGeneratorMagic));
}

inline InversionModel load_inversion_model(const std::filesystem::path& path) {
  NamedTensors b = decode_bundle(read_file(path), kGeneratorMagic, path.string());
  for (const char* k : {"meta/dims", "meta/hidden", "meta/batch_shape"}) {
    if (!b.count(k)) throw FormatError(path.string() + ": missing " + k);
  }
  InversionModel inv;
  const Tensor& d = b.at("meta/dims");
  if (d.size() != 4) throw FormatError(path.string() + ": corrupt inversion-model metadata");
  inv.gradient_dim = static_cast<std::size_t>(d[0]);
  inv.projected_dim = static_cast<std::size_t>(d[1]);
  inv.projection_seed = static_cast<std::uint64_t>(d[2]) | (static_cast<std::uint64_t>(d[3]) << 32);
  inv.hidden = detail::meta_vec_read(b.at("meta/hidden"));
  inv.batch_shape = detail::meta_vec_read(b.at("meta/batch_shape"));
  for (const auto& [k, v] : b) {
    if (k.rfind("net/", 0) == 0) inv.net[k.substr(4)] = v;
  }
  return inv;
}

}  // namespace gialab
