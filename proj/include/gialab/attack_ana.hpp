#pragma once

// Analytic inversion: closed-form recovery through a leading linear layer,
// imprint (binning) modules, and fishing-style gradient isolation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "gialab/attack_opt.hpp"
#include "gialab/serialize.hpp"

namespace gialab {

inline constexpr double kActivationThreshold = 1e-9;

namespace detail {

inline std::size_t layer_index(const ModelSpec& spec, const std::string& name) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].name == name) return i;
  }
  throw std::invalid_argument("no layer named '" + name + "' in " + spec.name);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Closed form

struct LinearInversion {
  std::vector<Tensor> rows;  // per neuron, input shape; empty tensor when inactive
  std::vector<bool> active;
  std::size_t active_count() const { return static_cast<std::size_t>(std::count(active.begin(), active.end(), true)); }
};

/// Row i of dL/dW divided entry-wise by dL/db_i, for every neuron whose bias
/// gradient exceeds the activation threshold. Results live in the model's
/// (normalized) input space.
inline LinearInversion closed_form_linear_invert(const Update& update, const ModelSpec& spec, const std::string& layer) {
  if (update.kind != UpdateKind::fedsgd_gradient) throw std::invalid_argument("closed_form_linear_invert: expects a FedSGD gradient");
  std::size_t li = detail::layer_index(spec, layer);
  const auto* lin = std::get_if<LinearLayer>(&spec.layers[li].kind);
  if (!lin) throw std::invalid_argument("closed_form_linear_invert: layer '" + layer + "' is not linear");
  if (!lin->bias) throw std::invalid_argument("closed_form_linear_invert: layer '" + layer + "' has no bias");
  for (std::size_t i = 0; i < li; ++i) {
    if (!std::holds_alternative<FlattenLayer>(spec.layers[i].kind)) {
      throw std::invalid_argument("closed_form_linear_invert: layer '" + layer + "' is not the first layer");
    }
  }
  const Tensor& gw = update.tensors.at(layer + ".weight");
  const Tensor& gb = update.tensors.at(layer + ".bias");
  if (gw.rank() != 2 || gw.dim(0) != gb.size() || gw.dim(1) != numel(spec.input)) {
    throw ShapeError("closed_form_linear_invert: gradient shapes do not match layer '" + layer + "'");
  }
  std::size_t n = gw.dim(1);
  LinearInversion out;
  for (std::size_t i = 0; i < gb.size(); ++i) {
    if (std::abs(gb[i]) <= kActivationThreshold) {
      out.rows.emplace_back();
      out.active.push_back(false);
      continue;
    }
    Tensor r(spec.input);
    for (std::size_t j = 0; j < n; ++j) r[j] = gw[i * n + j] / gb[i];
    out.rows.push_back(std::move(r));
    out.active.push_back(true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Imprint module

struct ImprintModule {
  std::size_t bins = 0;
  Tensor measurement;           // h, length m (input elements)
  std::vector<double> cutoffs;  // ascending; bias_i = -cutoff_i
  double pass_through = 0.0;    // value of every projection entry
  std::string layer = "imprint";

  std::vector<double> biases() const {
    std::vector<double> b;
    for (double c : cutoffs) b.push_back(-c);
    return b;
  }

  double measure(std::span<const double> x) const { return dot(measurement.data(), x); }

  /// Largest activated cutoff, or -1 when the value activates no neuron.
  std::ptrdiff_t bin_of(double s) const {
    auto it = std::lower_bound(cutoffs.begin(), cutoffs.end(), s);  // first cutoff >= s
    return static_cast<std::ptrdiff_t>(it - cutoffs.begin()) - 1;
  }
};

struct ImprintedModel {
  ModelSpec spec;
  Params params;
  ImprintModule module;
};

/// Interpolated sample quantile (linear between order statistics).
inline double quantile(std::vector<double> sorted_values, double p) {
  if (sorted_values.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(sorted_values.begin(), sorted_values.end());
  double pos = p * static_cast<double>(sorted_values.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, sorted_values.size() - 1);
  return sorted_values[lo] + (pos - static_cast<double>(lo)) * (sorted_values[hi] - sorted_values[lo]);
}

/// Prepends a k-bin imprint layer measuring mean (normalized) brightness.
/// Cutoffs are the calibration sample's i/k quantiles; the lowest one is
/// pushed one bin width below the sample minimum so unseen dark inputs still
/// land in a bin.
inline ImprintedModel build_imprint(const ModelSpec& spec, const Params& params, std::size_t k, const Tensor& calibration_inputs,
                                    double pass_through = 0.0) {
  if (k < 2) throw std::invalid_argument("build_imprint: need at least 2 bins, got " + std::to_string(k));
  validate(spec);
  for (const Layer& l : spec.layers) {
    if (std::holds_alternative<ImprintLayer>(l.kind)) throw std::invalid_argument("build_imprint: model already has an imprint layer");
  }
  std::size_t m = numel(spec.input);
  if (calibration_inputs.rank() != 4 || calibration_inputs.size() / calibration_inputs.dim(0) != m) {
    throw ShapeError("build_imprint: calibration batch " + shape_str(calibration_inputs.shape()) + " does not match input " +
                     shape_str(spec.input));
  }
  ImprintModule mod;
  mod.bins = k;
  mod.measurement = Tensor(Shape{m}, 1.0 / static_cast<double>(m));
  mod.pass_through = pass_through > 0.0 ? pass_through : 0.1 / static_cast<double>(k);
  std::vector<double> s;
  std::size_t n = calibration_inputs.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back(mod.measure(std::span<const double>(calibration_inputs.data().data() + i * m, m)));
  }
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < k; ++i) mod.cutoffs.push_back(quantile(s, static_cast<double>(i) / static_cast<double>(k)));
  mod.cutoffs[0] -= std::max(mod.cutoffs[1] - mod.cutoffs[0], 1e-6);
  for (std::size_t i = 1; i < k; ++i) {
    if (!(mod.cutoffs[i] > mod.cutoffs[i - 1])) {
      throw std::invalid_argument("build_imprint: calibration sample too small or degenerate for " + std::to_string(k) + " bins");
    }
  }

  ImprintedModel out;
  out.spec = spec;
  out.spec.name = spec.name + "+imprint";
  out.spec.layers.insert(out.spec.layers.begin(), Layer{mod.layer, ImprintLayer{k}});
  out.params = params;
  Tensor w(Shape{k, m});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < m; ++j) w[i * m + j] = mod.measurement[j];
  out.params[mod.layer + ".weight"] = std::move(w);
  out.params[mod.layer + ".bias"] = Tensor(Shape{k}, mod.biases());
  out.params[mod.layer + ".proj"] = Tensor(Shape{m, k}, mod.pass_through);
  validate(out.spec);
  check_params(out.spec, out.params);
  out.module = std::move(mod);
  return out;
}

struct ImprintRecovery {
  std::vector<Tensor> images;     // normalized input space, one per non-empty bin
  std::vector<std::size_t> bins;  // bin index of each image
  std::vector<bool> exact;        // per ground-truth sample, when truth was given
  std::size_t recovered = 0;      // ground-truth samples matched within kExactTolerance

  static constexpr double kExactTolerance = 1e-8;
};

/// Differences of adjacent bins' gradients (the top bin against zero) divided
/// entry-wise. A bin hit by a single sample yields that sample exactly; with
/// `truth` each sample is checked against the candidates.
inline ImprintRecovery imprint_reconstruct(const Update& update, const ImprintModule& mod, const Shape& input_shape,
                                           const GroundTruth* truth = nullptr) {
  auto wit = update.tensors.find(mod.layer + ".weight");
  auto bit = update.tensors.find(mod.layer + ".bias");
  if (wit == update.tensors.end() || bit == update.tensors.end()) {
    throw ShapeError("imprint_reconstruct: update has no '" + mod.layer + "' gradients");
  }
  const Tensor &gw = wit->second, &gb = bit->second;
  std::size_t m = numel(input_shape), k = mod.bins;
  if (gw.rank() != 2 || gw.dim(0) != k || gw.dim(1) != m || gb.size() != k || mod.measurement.size() != m) {
    throw ShapeError("imprint_reconstruct: module with " + std::to_string(k) + " bins over " + std::to_string(m) +
                     " inputs does not match gradients " + shape_str(gw.shape()));
  }
  ImprintRecovery rec;
  for (std::size_t i = 0; i < k; ++i) {
    double db = gb[i] - (i + 1 < k ? gb[i + 1] : 0.0);
    if (std::abs(db) <= kActivationThreshold) continue;
    Tensor x(input_shape);
    for (std::size_t j = 0; j < m; ++j) {
      double dw = gw[i * m + j] - (i + 1 < k ? gw[(i + 1) * m + j] : 0.0);
      x[j] = dw / db;
    }
    rec.images.push_back(std::move(x));
    rec.bins.push_back(i);
  }
  if (truth) {
    std::size_t B = truth->inputs.dim(0);
    for (std::size_t b = 0; b < B; ++b) {
      Tensor xb = detail::image_at(truth->inputs, b);
      bool hit = false;
      for (const Tensor& c : rec.images) {
        if (max_abs_diff(c, xb) < ImprintRecovery::kExactTolerance) {
          hit = true;
          break;
        }
      }
      rec.exact.push_back(hit);
      rec.recovered += hit;
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Expected exact recoveries

struct RecoveryEstimate {
  std::size_t batch = 0;
  std::size_t bins = 0;
  double formula_main = std::numeric_limits<double>::quiet_NaN();  // defined for k > B > 2
  double correction = std::numeric_limits<double>::quiet_NaN();    // simulated r(B, k)
  double correction_se = 0.0;
  double mc_mean = 0.0;  // independent Monte-Carlo estimate
  double mc_se = 0.0;
  std::size_t trials = 0;

  double formula_total() const { return formula_main + correction; }
};

namespace detail {

inline double log_choose(double n, double r) {
  if (r < 0 || r > n) return -std::numeric_limits<double>::infinity();
  return std::lgamma(n + 1) - std::lgamma(r + 1) - std::lgamma(n - r + 1);
}

/// Mean and standard error of the singleton-bin count over `trials` uniform
/// assignments of B balls to k bins.
inline std::pair<double, double> simulate_singletons(std::size_t B, std::size_t k, std::size_t trials, CounterRng rng) {
  std::vector<std::uint32_t> count(k);
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::fill(count.begin(), count.end(), 0);
    std::vector<std::size_t> used;
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t bin = static_cast<std::size_t>(rng.below(k));
      if (count[bin]++ == 0) used.push_back(bin);
    }
    double singles = 0.0;
    for (std::size_t bin : used) singles += count[bin] == 1;
    sum += singles;
    sumsq += singles * singles;
  }
  double n = static_cast<double>(trials);
  double mean = sum / n;
  double var = trials > 1 ? std::max(0.0, (sumsq - n * mean * mean) / (n - 1.0)) : 0.0;
  return {mean, std::sqrt(var / n)};
}

}  // namespace detail

/// Main combinatorial sum of the expected exact-recovery count (k > B > 2).
inline double recovery_formula_main(std::size_t B, std::size_t k) {
  if (!(k > B && B > 2)) throw std::invalid_argument("recovery formula needs k > B > 2");
  double Bd = static_cast<double>(B), kd = static_cast<double>(k);
  double log_den = detail::log_choose(kd + Bd - 1, kd - 1);
  double total = 0.0;
  for (std::size_t i = 1; i + 2 <= B; ++i) {
    double id = static_cast<double>(i);
    double inner = 0.0;
    for (std::size_t j = 1; j <= (B - i) / 2; ++j) {
      double jd = static_cast<double>(j);
      inner += std::exp(detail::log_choose(kd - id, jd) + detail::log_choose(Bd - id - jd - 1, jd - 1) - log_den +
                        detail::log_choose(kd, id));
    }
    total += id * inner;
  }
  return total;
}

/// Formula main sum plus a simulated correction (from one random stream) and
/// an independent Monte-Carlo estimate (from another).
inline RecoveryEstimate expected_recovery_count(std::size_t B, std::size_t k, std::size_t trials, std::uint64_t seed = 0) {
  RecoveryEstimate e;
  e.batch = B;
  e.bins = k;
  e.trials = trials;
  if (B == 0 || k == 0 || trials == 0) {
    e.mc_mean = 0.0;
    return e;
  }
  CounterRng root(seed);
  auto [mean, se] = detail::simulate_singletons(B, k, trials, root.derive(2));
  e.mc_mean = mean;
  e.mc_se = se;
  if (k > B && B > 2) {
    e.formula_main = recovery_formula_main(B, k);
    auto [m1, se1] = detail::simulate_singletons(B, k, trials, root.derive(1));
    e.correction = m1 - e.formula_main;
    e.correction_se = se1;
  }
  return e;
}

// ---------------------------------------------------------------------------
// Fishing

struct FishingPlan {
  int target_class = 0;
  double beta = 0.0;
  std::string head;
  Params snapshot;  // before manipulation
  Params params;    // after
};

/// Classifier biases become +beta for every non-target class and -beta for
/// the target; nothing else changes.
inline FishingPlan fishing_manipulate(const ModelSpec& spec, const Params& params, int target_class, double beta) {
  check_params(spec, params);
  const auto* head = std::get_if<LinearLayer>(&spec.layers.back().kind);
  if (!head || !head->bias) throw std::invalid_argument("fishing_manipulate: classifier head must be linear with bias");
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= spec.classes) {
    throw std::out_of_range("fishing_manipulate: target class " + std::to_string(target_class) + " outside [0, " +
                            std::to_string(spec.classes) + ")");
  }
  if (beta < 0.0) throw std::invalid_argument("fishing_manipulate: beta must be >= 0");
  FishingPlan plan;
  plan.target_class = target_class;
  plan.beta = beta;
  plan.head = head_name(spec);
  plan.snapshot = params;
  plan.params = params;
  if (beta == 0.0) return plan;
  Tensor& b = plan.params.at(plan.head + ".bias");
  for (std::size_t c = 0; c < b.size(); ++c) b[c] = static_cast<int>(c) == target_class ? -beta : beta;
  return plan;
}

/// Cosine similarity of two updates over their shared, identical name set.
inline double isolation_score(const Update& batch, const Update& single) {
  std::vector<std::string> names;
  for (const auto& [k, v] : batch.tensors) names.push_back(k);
  std::vector<std::string> other;
  for (const auto& [k, v] : single.tensors) other.push_back(k);
  if (names != other) throw std::invalid_argument("isolation_score: updates have different parameter names");
  for (const auto& n : names) {
    if (batch.tensors.at(n).shape() != single.tensors.at(n).shape()) throw ShapeError("isolation_score: shape mismatch for " + n);
  }
  return cosine(flatten(batch.tensors, names), flatten(single.tensors, names));
}

/// Treats the batch gradient of a fished model as the lone target sample's
/// gradient (scaled by B) and inverts it as a batch of one.
inline AttackResult fishing_then_invert(const Update& update, const Target& manipulated, const FishingPlan& plan,
                                        const OpGiaConfig& cfg, const GroundTruth* target_truth = nullptr) {
  if (update.kind != UpdateKind::fedsgd_gradient) throw std::invalid_argument("fishing_then_invert: expects a FedSGD gradient");
  Update single = update;
  double scale = static_cast<double>(update.batch_size);
  for (auto& [k, v] : single.tensors) {
    for (double& e : v.data()) e *= scale;
  }
  single.batch_size = 1;
  single.local_samples = 1;
  AttackResult r = op_gia_attack(single, manipulated, cfg, {plan.target_class}, target_truth);
  r.config = "fishing beta=" + std::to_string(plan.beta) + " target=" + std::to_string(plan.target_class) + " " + cfg.echo();
  return r;
}

// ---------------------------------------------------------------------------
// Persistence (GIAA bundles)

inline void save_imprint(const std::filesystem::path& path, const ImprintedModel& im) {
  NamedTensors b;
  for (const auto& [k, v] : im.params) b["params/" + k] = v;
  b["module/measurement"] = im.module.measurement;
  b["module/cutoffs"] = Tensor(Shape{im.module.cutoffs.size()}, im.module.cutoffs);
  b["module/pass_through"] = Tensor::scalar(im.module.pass_through);
  b[kSpecRecord] = text_tensor(to_text(im.spec));
  write_file_atomic(path, encode_bundle(b, kArtifactMagic));
}

inline ImprintModule load_imprint_module(const NamedTensors& b, const std::string& origin) {
  for (const char* k : {"module/measurement", "module/cutoffs", "module/pass_through"}) {
    if (!b.count(k)) throw FormatError(origin + ": missing " + k);
  }
  ImprintModule m;
  m.measurement = b.at("module/measurement");
  const Tensor& c = b.at("module/cutoffs");
  m.cutoffs.assign(c.data().begin(), c.data().end());
  m.bins = m.cutoffs.size();
  m.pass_through = b.at("module/pass_through").item();
  return m;
}

inline void save_fishing_plan(const std::filesystem::path& path, const FishingPlan& plan, const ModelSpec& spec) {
  NamedTensors b;
  b[kSpecRecord] = text_tensor(to_text(spec));
  for (const auto& [k, v] : plan.params) b["params/" + k] = v;
  for (const auto& [k, v] : plan.snapshot) b["snapshot/" + k] = v;
  b["plan/meta"] = Tensor(Shape{2}, std::vector<double>{static_cast<double>(plan.target_class), plan.beta});
  write_file_atomic(path, encode_bundle(b, kArtifactMagic));
}

inline FishingPlan load_fishing_plan(const std::filesystem::path& path, const ModelSpec& spec) {
  NamedTensors b = decode_bundle(read_file(path), kArtifactMagic, path.string());
  if (!b.count("plan/meta")) throw FormatError(path.string() + ": not a fishing plan");
  FishingPlan p;
  p.target_class = static_cast<int>(b.at("plan/meta")[0]);
  p.beta = b.at("plan/meta")[1];
  p.head = head_name(spec);
  for (const auto& [k, v] : b) {
    if (k.rfind("params/", 0) == 0) p.params[k.substr(7)] = v;
    if (k.rfind("snapshot/", 0) == 0) p.snapshot[k.substr(9)] = v;
  }
  check_params(spec, p.params);
  check_params(spec, p.snapshot);
  return p;
}

/// The parameter tensors stored in any GIAA artifact.
inline Params artifact_params(const NamedTensors& b) {
  Params p;
  for (const auto& [k, v] : b) {
    if (k.rfind("params/", 0) == 0) p[k.substr(7)] = v;
  }
  return p;
}

}  // namespace gialab
