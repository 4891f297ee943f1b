#pragma once

// Optimization-based gradient inversion: gradient matching against a leaked
// FedSGD gradient or FedAvg model delta.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gialab/autodiff.hpp"
#include "gialab/data.hpp"
#include "gialab/fl.hpp"
#include "gialab/metrics.hpp"
#include "gialab/model.hpp"
#include "gialab/optim.hpp"

namespace gialab {

enum class Distance { l2, cosine };
enum class InitKind { gaussian, uniform };
enum class LabelSource { ground_truth, inferred };

inline const char* to_string(Distance d) { return d == Distance::l2 ? "l2" : "cosine"; }

struct OpGiaConfig {
  Distance distance = Distance::cosine;
  double tv_weight = 1e-2;
  std::size_t iterations = 2000;
  double lr = 0.1;
  std::vector<double> milestones{3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0};
  double decay = 0.1;
  InitKind init = InitKind::gaussian;
  std::uint64_t seed = 0;
  LabelSource label_source = LabelSource::ground_truth;

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("OpGiaConfig: iterations must be >= 1");
    if (tv_weight < 0.0) throw std::invalid_argument("OpGiaConfig: tv weight must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("OpGiaConfig: learning rate must be > 0");
    double prev = 0.0;
    for (double m : milestones) {
      if (!(m > prev && m < 1.0)) throw std::invalid_argument("OpGiaConfig: milestones must increase strictly inside (0, 1)");
      prev = m;
    }
  }

  std::string echo() const {
    std::ostringstream os;
    os << "distance=" << to_string(distance) << " tv=" << tv_weight << " iters=" << iterations << " lr=" << lr
       << " decay=" << decay << " init=" << (init == InitKind::gaussian ? "gaussian" : "uniform") << " seed=" << seed
       << " labels=" << (label_source == LabelSource::ground_truth ? "ground-truth" : "inferred");
    return os.str();
  }
};

/// The model an attacker inverts: architecture, weights, and the input
/// normalization the client applies.
struct Target {
  ModelSpec spec;
  Params params;
  NormStats norm;
};

struct AttackResult {
  Tensor reconstruction;  // [0, 1] pixels
  Tensor init;            // starting point, [0, 1] pixels
  std::vector<int> labels;
  double objective = std::numeric_limits<double>::infinity();
  std::size_t best_iteration = 0;
  std::vector<double> trajectory;
  MetricSet metrics;
  std::uint64_t seed = 0;
  std::string config;
  std::string note;
  double runtime_seconds = 0.0;
};

class AttackDiverged : public std::runtime_error {
 public:
  AttackDiverged(std::size_t iteration, double lr)
      : std::runtime_error("objective became non-finite at iteration " + std::to_string(iteration) +
                           " (lr " + std::to_string(lr) + ")"),
        iteration(iteration),
        lr(lr) {}
  std::size_t iteration;
  double lr;
};

/// Gradient-matching distance between observed tape nodes and leaked constants.
inline ad::Var match_distance(ad::Graph& g, const std::vector<ad::Var>& observed, const std::vector<Tensor>& leaked,
                              Distance d) {
  if (observed.size() != leaked.size()) throw ShapeError("match_distance: tensor count mismatch");
  if (d == Distance::l2) {
    ad::Var acc = g.constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < observed.size(); ++i) {
      ad::Var diff = ad::sub(observed[i], g.constant(leaked[i]));
      acc = ad::add(acc, ad::sum(ad::mul(diff, diff)));
    }
    return acc;
  }
  double leak_sq = 0.0;
  for (const Tensor& t : leaked) leak_sq += dot(t.data(), t.data());
  if (leak_sq == 0.0) throw std::domain_error("match_distance: leaked gradient has zero norm");
  ad::Var dotv = g.constant(Tensor::scalar(0.0));
  ad::Var obs_sq = g.constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < observed.size(); ++i) {
    dotv = ad::add(dotv, ad::sum(ad::mul(observed[i], g.constant(leaked[i]))));
    obs_sq = ad::add(obs_sq, ad::sum(ad::mul(observed[i], observed[i])));
  }
  ad::Var inv_norm = ad::reciprocal(ad::sqrt(ad::affine(obs_sq, 1.0, 1e-30)));
  ad::Var cos = ad::mul(ad::scale(dotv, 1.0 / std::sqrt(leak_sq)), inv_norm);
  return ad::affine(cos, -1.0, 1.0);
}

/// A gradient-matching problem: optimized tensors, how they produce the
/// normalized candidate batch, and what the attacker observes from it.
struct MatchProblem {
  std::vector<Tensor> variables;
  std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)> make_input;
  std::function<std::vector<ad::Var>(ad::Graph&, ad::Var)> observe;
  std::function<void(std::vector<Tensor>&)> project;
  std::vector<Tensor> leaked;
};

struct MatchOutcome {
  Tensor best_input;  // normalized
  double best_objective = std::numeric_limits<double>::infinity();
  std::size_t best_iteration = 0;
  std::vector<double> trajectory;
  std::vector<Tensor> best_variables;
};

/// Adam on the problem's variables with the milestone schedule; keeps the
/// lowest-objective iterate.
inline MatchOutcome run_matching(MatchProblem& prob, const OpGiaConfig& cfg) {
  cfg.validate();
  MatchOutcome out;
  AdamState adam(prob.variables);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    double lr = milestone_lr(cfg.lr, it, cfg.iterations, cfg.milestones, cfg.decay);
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (const Tensor& t : prob.variables) vars.push_back(g.leaf(t, true));
    ad::Var x = prob.make_input(g, vars);
    ad::Var obj = match_distance(g, prob.observe(g, x), prob.leaked, cfg.distance);
    if (cfg.tv_weight > 0.0) {
      // per-element TV so the weight does not grow with batch and image size
      double w = cfg.tv_weight / static_cast<double>(x.value().size());
      obj = ad::add(obj, ad::scale(ad::total_variation(x), w));
    }
    double f = obj.value().item();
    if (!std::isfinite(f)) throw AttackDiverged(it, lr);
    out.trajectory.push_back(f);
    if (f < out.best_objective) {
      out.best_objective = f;
      out.best_iteration = it;
      out.best_input = x.value();
      out.best_variables = prob.variables;
    }
    auto grads = ad::gradients(g, obj, vars);
    for (const Tensor& gt : grads) {
      if (!gt.all_finite()) throw AttackDiverged(it, lr);
    }
    adam_step(adam, prob.variables, grads, lr);
    if (prob.project) prob.project(prob.variables);
  }
  return out;
}

/// Initial candidate batch in [0, 1] pixel space.
inline Tensor initial_pixels(const Shape& batch_shape, InitKind kind, std::uint64_t seed) {
  CounterRng rng = CounterRng(seed).derive(0x1417);
  Tensor t(batch_shape);
  for (double& v : t.data()) {
    v = kind == InitKind::gaussian ? std::clamp(rng.normal(0.5, 0.1), 0.0, 1.0) : rng.uniform();
  }
  return t;
}

inline std::vector<Tensor> ordered(const NamedTensors& t, const std::vector<std::string>& names) {
  std::vector<Tensor> out;
  for (const auto& n : names) {
    auto it = t.find(n);
    if (it == t.end()) throw ShapeError("update is missing tensor " + n);
    out.push_back(it->second);
  }
  return out;
}

inline std::vector<std::size_t> permute_to_truth(const GroundTruth& truth, const Tensor& recon) {
  std::size_t B = truth.labels.size();
  std::vector<std::vector<double>> w(B, std::vector<double>(B));
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j)
      w[i][j] = truth.labels[i] == truth.labels[j]
                    ? psnr_image(detail::image_at(truth.pixels, i), detail::image_at(recon, j))
                    : -1e6;
  return max_weight_assignment(w);
}

/// Scores a result against the truth, pairing same-label images optimally.
inline void score(AttackResult& r, const GroundTruth& truth) {
  auto perm = permute_to_truth(truth, r.reconstruction);
  r.reconstruction = take_rows(r.reconstruction, perm);
  r.init = take_rows(r.init, perm);
  std::vector<int> labels;
  for (std::size_t i : perm) labels.push_back(r.labels.at(i));
  r.labels = labels;
  r.metrics = evaluate(truth.pixels, r.reconstruction, &r.init);
}

/// iDLG-style label recovery for a single-sample FedSGD gradient: the unique
/// negative entry of the classifier-bias gradient.
inline int infer_label_single(const Update& update, const ModelSpec& spec) {
  if (update.kind != UpdateKind::fedsgd_gradient || update.batch_size != 1) {
    throw std::invalid_argument("infer_label_single: needs a FedSGD gradient of batch size 1; use ground-truth labels");
  }
  const auto* head = std::get_if<LinearLayer>(&spec.layers.back().kind);
  if (!head || !head->bias) throw std::invalid_argument("infer_label_single: classifier head has no bias");
  const Tensor& gb = update.tensors.at(head_name(spec) + ".bias");
  int found = -1;
  for (std::size_t i = 0; i < gb.size(); ++i) {
    if (gb[i] < 0.0) {
      if (found >= 0) throw std::invalid_argument("infer_label_single: several negative bias-gradient entries; use ground-truth labels");
      found = static_cast<int>(i);
    }
  }
  if (found < 0) throw std::invalid_argument("infer_label_single: no negative bias-gradient entry; use ground-truth labels");
  return found;
}

inline std::vector<int> resolve_labels(const Update& update, const ModelSpec& spec, const OpGiaConfig& cfg,
                                       std::vector<int> labels) {
  if (labels.empty()) {
    if (cfg.label_source != LabelSource::inferred) throw std::invalid_argument("attack: labels required in ground-truth mode");
    labels = {infer_label_single(update, spec)};
  }
  return labels;
}

/// Clamp of normalized candidates into the image box.
inline std::function<void(std::vector<Tensor>&)> box_projection(const Shape& batch_shape, const NormStats& norm) {
  auto [lo, hi] = normalized_box(batch_shape, norm);
  return [lo, hi](std::vector<Tensor>& v) {
    Tensor& x = v[0];
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
  };
}

inline MatchProblem pixel_problem(const Target& t, const Tensor& init_pixels, std::vector<Tensor> leaked) {
  MatchProblem prob;
  prob.variables = {normalize(init_pixels, t.norm)};
  prob.make_input = [](ad::Graph&, const std::vector<ad::Var>& v) { return v[0]; };
  prob.project = box_projection(init_pixels.shape(), t.norm);
  prob.leaked = std::move(leaked);
  return prob;
}

/// Gradient matching on raw pixels against a FedSGD gradient.
inline AttackResult op_gia_attack(const Update& update, const Target& t, const OpGiaConfig& cfg,
                                  std::vector<int> labels = {}, const GroundTruth* truth = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  if (update.kind != UpdateKind::fedsgd_gradient) throw std::invalid_argument("op_gia_attack: expects a FedSGD gradient");
  labels = resolve_labels(update, t.spec, cfg, std::move(labels));
  if (labels.size() != update.batch_size) {
    throw std::invalid_argument("op_gia_attack: " + std::to_string(labels.size()) + " labels for batch size " +
                                std::to_string(update.batch_size));
  }
  auto names = param_names(t.spec);
  Shape bs = t.spec.input;
  bs.insert(bs.begin(), labels.size());
  Tensor init = initial_pixels(bs, cfg.init, cfg.seed);
  MatchProblem prob = pixel_problem(t, init, ordered(update.tensors, names));
  prob.observe = [&t, &labels](ad::Graph& g, ad::Var x) {
    return param_gradients(t.spec, as_vars(g, t.params, true), x, labels, true);
  };
  MatchOutcome mo = run_matching(prob, cfg);

  AttackResult r;
  r.reconstruction = denormalize(mo.best_input, t.norm);
  r.init = init;
  r.labels = labels;
  r.objective = mo.best_objective;
  r.best_iteration = mo.best_iteration;
  r.trajectory = std::move(mo.trajectory);
  r.seed = cfg.seed;
  r.config = "op-gia " + cfg.echo();
  if (truth) score(r, *truth);
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// FedAvg

enum class SimulationMode { strong, weak, none };

inline const char* to_string(SimulationMode m) {
  switch (m) {
    case SimulationMode::strong: return "strong";
    case SimulationMode::weak: return "weak";
    case SimulationMode::none: return "none";
  }
  return "?";
}

inline constexpr std::size_t kMaxUnrollSteps = 64;

/// What the server assumes about the client's local training.
struct SimulationGuess {
  ClientConfig client;
  std::optional<FedAvgTrace> trace;  // batch order; without it batches run in index order
};

/// Natural-order schedule used when the batch order is unknown.
inline FedAvgTrace sequential_schedule(std::size_t n, std::size_t batch, std::size_t epochs) {
  FedAvgTrace t;
  for (std::size_t e = 0; e < epochs; ++e)
    for (std::size_t s = 0; s < n; s += batch) {
      std::vector<std::size_t> step;
      for (std::size_t i = s; i < std::min(n, s + batch); ++i) step.push_back(i);
      t.steps.push_back(step);
    }
  return t;
}

/// Unrolled local SGD on tape: returns theta_final - theta_0 per parameter.
inline std::vector<ad::Var> simulate_local_training(ad::Graph& g, const Target& t, ad::Var x,
                                                    const std::vector<int>& labels, const FedAvgTrace& trace,
                                                    double lr) {
  auto names = param_names(t.spec);
  ParamVars theta;
  std::vector<ad::Var> theta0;
  for (const auto& n : names) {
    theta[n] = g.leaf(t.params.at(n), true);
    theta0.push_back(theta[n]);
  }
  for (const auto& step : trace.steps) {
    std::vector<int> yl;
    for (std::size_t i : step) yl.push_back(labels.at(i));
    auto grads = param_gradients(t.spec, theta, ad::gather_rows(x, step), yl, true);
    for (std::size_t k = 0; k < names.size(); ++k) theta[names[k]] = ad::sub(theta[names[k]], ad::scale(grads[k], lr));
  }
  std::vector<ad::Var> delta;
  for (std::size_t k = 0; k < names.size(); ++k) delta.push_back(ad::sub(theta[names[k]], theta0[k]));
  return delta;
}

/// Attacks a FedAvg model delta. strong: true hyperparameters and batch
/// order; weak: the guessed (wrong) hyperparameters; none: the delta is
/// treated as a FedSGD gradient scaled by -lr_guess.
inline AttackResult fedavg_attack(const Update& update, const Target& t, const OpGiaConfig& cfg, SimulationMode mode,
                                  const SimulationGuess& guess, std::vector<int> labels,
                                  const GroundTruth* truth = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  guess.client.validate();
  if (update.kind != UpdateKind::fedavg_delta) throw std::invalid_argument("fedavg_attack: expects a FedAvg delta");
  std::size_t n = update.local_samples;
  if (labels.size() != n) throw std::invalid_argument("fedavg_attack: need one label per local sample");
  if (!(guess.client.lr > 0.0)) throw std::invalid_argument("fedavg_attack: simulated learning rate must be > 0");
  auto names = param_names(t.spec);

  if (mode == SimulationMode::none) {
    Update as_grad;
    as_grad.kind = UpdateKind::fedsgd_gradient;
    as_grad.batch_size = n;
    as_grad.local_samples = n;
    for (const auto& [k, v] : update.tensors) {
      Tensor s = v;
      for (double& e : s.data()) e /= -guess.client.lr;
      as_grad.tensors[k] = std::move(s);
    }
    AttackResult r = op_gia_attack(as_grad, t, cfg, labels, truth);
    r.config = "fedavg mode=none " + cfg.echo();
    r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

  FedAvgTrace trace;
  if (mode == SimulationMode::strong) {
    if (!guess.trace) throw std::invalid_argument("fedavg_attack: strong simulation needs the client's batch-order trace");
    trace = *guess.trace;
  } else {
    trace = guess.trace ? *guess.trace : sequential_schedule(n, guess.client.batch_size, guess.client.epochs);
  }
  if (trace.steps.size() > kMaxUnrollSteps) {
    throw std::invalid_argument("fedavg_attack: " + std::to_string(trace.steps.size()) + " unrolled steps exceed the limit of " +
                                std::to_string(kMaxUnrollSteps));
  }

  Shape bs = t.spec.input;
  bs.insert(bs.begin(), n);
  Tensor init = initial_pixels(bs, cfg.init, cfg.seed);
  MatchProblem prob = pixel_problem(t, init, ordered(update.tensors, names));
  double lr = guess.client.lr;
  prob.observe = [&t, &labels, &trace, lr](ad::Graph& g, ad::Var x) {
    return simulate_local_training(g, t, x, labels, trace, lr);
  };
  MatchOutcome mo = run_matching(prob, cfg);

  AttackResult r;
  r.reconstruction = denormalize(mo.best_input, t.norm);
  r.init = init;
  r.labels = labels;
  r.objective = mo.best_objective;
  r.best_iteration = mo.best_iteration;
  r.trajectory = std::move(mo.trajectory);
  r.seed = cfg.seed;
  r.config = std::string("fedavg mode=") + to_string(mode) + " " + cfg.echo();
  if (truth) score(r, *truth);
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace gialab
