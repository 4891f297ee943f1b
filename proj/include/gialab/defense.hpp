#pragma once

// Client-side checks against a malicious server: architecture validation,
// parameter scanning for trap signatures, and protocol linting.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gialab/fl.hpp"
#include "gialab/model.hpp"

namespace gialab {

// ---------------------------------------------------------------------------
// Reference architecture

struct ReferenceSpec {
  std::string hash;
  ModelSpec model;  // the expected layer list (with input shape and classes)
  std::vector<ActivationKind> allowed;

  static ReferenceSpec of(const ModelSpec& spec, std::vector<ActivationKind> allowed = {}) {
    validate(spec);
    ReferenceSpec r{structural_hash(spec), spec, std::move(allowed)};
    if (r.allowed.empty()) {
      for (ActivationKind k : activations_of(spec)) {
        if (std::find(r.allowed.begin(), r.allowed.end(), k) == r.allowed.end()) r.allowed.push_back(k);
      }
    }
    r.check();
    return r;
  }

  void check() const {
    if (structural_hash(model) != hash) {
      throw SpecError("reference: hash " + hash + " does not describe its layer list (" + structural_hash(model) + ")");
    }
    for (ActivationKind k : activations_of(model)) {
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
        throw SpecError(std::string("reference: its own activation ") + to_string(k) + " is not in the allowed list");
      }
    }
  }

  bool allows(ActivationKind k) const { return std::find(allowed.begin(), allowed.end(), k) != allowed.end(); }
};

// Spec text plus "allow KIND..." and "hash HEX" lines.
inline std::string to_text(const ReferenceSpec& r) {
  std::string s = to_text(r.model);
  s += "allow";
  for (ActivationKind k : r.allowed) s += std::string(" ") + to_string(k);
  s += "\nhash " + r.hash + "\n";
  return s;
}

inline ReferenceSpec parse_reference(const std::string& text) {
  ReferenceSpec r;
  r.model = parse_spec(text);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "allow") {
      std::string a;
      while (ls >> a) r.allowed.push_back(parse_activation(a));
    } else if (key == "hash") {
      ls >> r.hash;
    }
  }
  if (r.hash.empty()) throw SpecError("reference: missing 'hash' line");
  if (r.allowed.empty()) r.allowed = activations_of(r.model);
  r.check();
  return r;
}

// ---------------------------------------------------------------------------
// Architecture validation

struct ArchitectureVerdict {
  bool pass = true;
  std::vector<std::string> diff;
};

/// Pass iff the structural hashes agree; otherwise an LCS alignment of the
/// two layer lists reports inserted, removed and altered layers.
inline ArchitectureVerdict validate_architecture(const ModelSpec& received, const ReferenceSpec& ref) {
  ArchitectureVerdict v;
  if (structural_hash(received) == ref.hash) return v;
  v.pass = false;
  if (received.input != ref.model.input) {
    v.diff.push_back("input shape " + shape_str(ref.model.input) + " -> " + shape_str(received.input));
  }
  if (received.classes != ref.model.classes) {
    v.diff.push_back("classes " + std::to_string(ref.model.classes) + " -> " + std::to_string(received.classes));
  }
  const auto& a = ref.model.layers;
  const auto& b = received.layers;
  std::size_t n = a.size(), m = b.size();
  auto same = [&](std::size_t i, std::size_t j) { return describe(a[i].kind) == describe(b[j].kind); };
  std::vector<std::vector<std::size_t>> L(n + 1, std::vector<std::size_t>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t j = m; j-- > 0;) L[i][j] = same(i, j) ? L[i + 1][j + 1] + 1 : std::max(L[i + 1][j], L[i][j + 1]);

  auto kind_note = [](const Layer& l) { return describe(l.kind); };
  std::vector<std::size_t> removed, inserted;
  auto flush = [&] {
    std::size_t pairs = std::min(removed.size(), inserted.size());
    for (std::size_t k = 0; k < pairs; ++k) {
      const Layer &from = a[removed[k]], &to = b[inserted[k]];
      std::string msg = "altered layer '" + to.name + "': " + kind_note(from) + " -> " + kind_note(to);
      if (const auto* act = std::get_if<ActivationLayer>(&to.kind); act && !ref.allows(act->kind)) msg += " (activation not allowed)";
      v.diff.push_back(msg);
    }
    for (std::size_t k = pairs; k < removed.size(); ++k) {
      v.diff.push_back("removed layer '" + a[removed[k]].name + "': " + kind_note(a[removed[k]]));
    }
    for (std::size_t k = pairs; k < inserted.size(); ++k) {
      v.diff.push_back("inserted layer '" + b[inserted[k]].name + "' at position " + std::to_string(inserted[k]) + ": " +
                       kind_note(b[inserted[k]]));
    }
    removed.clear();
    inserted.clear();
  };
  std::size_t i = 0, j = 0;
  while (i < n || j < m) {
    if (i < n && j < m && same(i, j)) {
      flush();
      ++i;
      ++j;
    } else if (j < m && (i == n || L[i][j + 1] >= L[i + 1][j])) {
      inserted.push_back(j++);
    } else {
      removed.push_back(i++);
    }
  }
  flush();
  if (v.diff.empty()) v.diff.push_back("layer descriptions differ");
  return v;
}

// ---------------------------------------------------------------------------
// Parameter scan

struct ScanRules {
  double colinear_cos = 0.999;
  double colinear_fraction = 0.5;
  double ladder_span = 4.0;  // in units of the default init bias bound 1/sqrt(fan_in)
  std::size_t ladder_min_length = 3;
  double head_skew = 5.0;  // bias spread over head weight RMS
};

enum class ScanRule { duplicated_rows, bias_ladder, head_skew };

inline const char* to_string(ScanRule r) {
  switch (r) {
    case ScanRule::duplicated_rows: return "duplicated-rows";
    case ScanRule::bias_ladder: return "bias-ladder";
    case ScanRule::head_skew: return "head-skew";
  }
  return "?";
}

inline const char* signature_of(ScanRule r) { return r == ScanRule::head_skew ? "fishing" : "imprint"; }

struct ParamFlag {
  std::string layer;
  ScanRule rule;
  double score = 0.0;
};

namespace detail {

/// Fraction of rows colinear with at least one other row.
inline double colinear_row_fraction(const Tensor& w, double threshold) {
  std::size_t rows = w.dim(0), cols = w.size() / rows;
  if (rows < 2) return 0.0;
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) norms[r] = norm2(std::span<const double>(w.data().data() + r * cols, cols));
  std::vector<bool> hit(rows, false);
  for (std::size_t r = 0; r < rows; ++r) {
    if (norms[r] == 0.0) continue;
    std::span<const double> a(w.data().data() + r * cols, cols);
    for (std::size_t q = r + 1; q < rows; ++q) {
      if (norms[q] == 0.0 || (hit[r] && hit[q])) continue;
      std::span<const double> b(w.data().data() + q * cols, cols);
      if (dot(a, b) / (norms[r] * norms[q]) > threshold) hit[r] = hit[q] = true;
    }
  }
  return static_cast<double>(std::count(hit.begin(), hit.end(), true)) / static_cast<double>(rows);
}

inline bool strictly_monotone(const Tensor& b) {
  bool up = true, down = true;
  for (std::size_t i = 1; i < b.size(); ++i) {
    up = up && b[i] > b[i - 1];
    down = down && b[i] < b[i - 1];
  }
  return up || down;
}

}  // namespace detail

inline std::vector<ParamFlag> scan_parameters(const Params& params, const ModelSpec& spec, const ScanRules& rules = {}) {
  check_params(spec, params);
  std::vector<ParamFlag> flags;
  for (const Layer& layer : spec.layers) {
    bool linear_like = std::holds_alternative<LinearLayer>(layer.kind) || std::holds_alternative<ImprintLayer>(layer.kind);
    bool has_bias = params.count(layer.name + ".bias") > 0;
    if (!params.count(layer.name + ".weight")) continue;
    const Tensor& w = params.at(layer.name + ".weight");
    if (linear_like) {
      double frac = detail::colinear_row_fraction(w, rules.colinear_cos);
      if (frac > rules.colinear_fraction) flags.push_back({layer.name, ScanRule::duplicated_rows, frac});
    }
    if (has_bias) {
      const Tensor& b = params.at(layer.name + ".bias");
      if (b.size() >= rules.ladder_min_length && detail::strictly_monotone(b)) {
        double fan_in = static_cast<double>(w.size() / w.dim(0));
        double span = std::abs(b[b.size() - 1] - b[0]);
        double score = span * std::sqrt(fan_in);
        if (score > rules.ladder_span) flags.push_back({layer.name, ScanRule::bias_ladder, score});
      }
    }
  }
  const std::string& head = head_name(spec);
  if (params.count(head + ".bias")) {
    const Tensor& b = params.at(head + ".bias");
    const Tensor& w = params.at(head + ".weight");
    auto [lo, hi] = std::minmax_element(b.data().begin(), b.data().end());
    double spread = *hi - *lo;
    double rms = norm2(w.data()) / std::sqrt(static_cast<double>(w.size()));
    double score = rms > 0.0 ? spread / rms : (spread > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    if (score > rules.head_skew) flags.push_back({head, ScanRule::head_skew, score});
  }
  return flags;
}

// ---------------------------------------------------------------------------
// Protocol lint (advisory)

struct LintRules {
  std::size_t min_batch = 8;
};

enum class LintRule { sigmoid_activation, small_batch, single_step, closed_form_exposure };

inline const char* to_string(LintRule r) {
  switch (r) {
    case LintRule::sigmoid_activation: return "sigmoid-activation";
    case LintRule::small_batch: return "small-batch";
    case LintRule::single_step: return "single-step";
    case LintRule::closed_form_exposure: return "closed-form-exposure";
  }
  return "?";
}

struct LintFinding {
  LintRule rule;
  std::string message;
};

/// True when the first parameterized layer is linear with a bias, so a single
/// sample's input is exposed in closed form.
inline bool is_linear_first(const ModelSpec& spec) {
  const Layer* l = first_param_layer(spec);
  if (!l) return false;
  const auto* lin = std::get_if<LinearLayer>(&l->kind);
  return lin && lin->bias;
}

inline std::vector<LintFinding> lint_protocol(const ClientConfig& cfg, const ModelSpec& spec, const LintRules& rules = {}) {
  std::vector<LintFinding> out;
  auto acts = activations_of(spec);
  if (std::find(acts.begin(), acts.end(), ActivationKind::sigmoid) != acts.end()) {
    out.push_back({LintRule::sigmoid_activation, "sigmoid activation present; prefer relu"});
  }
  if (cfg.batch_size < rules.min_batch) {
    out.push_back({LintRule::small_batch, "batch size " + std::to_string(cfg.batch_size) + " below " +
                                              std::to_string(rules.min_batch)});
  }
  if (cfg.epochs == 1) out.push_back({LintRule::single_step, "single local epoch; use multi-step local training"});
  if (is_linear_first(spec)) {
    out.push_back({LintRule::closed_form_exposure, "first layer is linear with bias; inputs recoverable in closed form"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct ValidationReport {
  ArchitectureVerdict architecture;
  std::vector<ParamFlag> flags;
  std::vector<LintFinding> findings;  // advisory; never fail the report

  bool passed() const { return architecture.pass && flags.empty(); }

  std::string text() const {
    std::ostringstream os;
    os << "architecture: " << (architecture.pass ? "pass" : "MISMATCH") << '\n';
    for (const auto& d : architecture.diff) os << "  " << d << '\n';
    os << "parameters: " << (flags.empty() ? "clean" : std::to_string(flags.size()) + " flag(s)") << '\n';
    for (const auto& f : flags) {
      os << "  " << f.layer << ": " << to_string(f.rule) << " (" << signature_of(f.rule) << " signature) score " << f.score
         << '\n';
    }
    os << "protocol lint: " << findings.size() << " finding(s)\n";
    for (const auto& f : findings) os << "  " << to_string(f.rule) << ": " << f.message << '\n';
    os << "overall: " << (passed() ? "PASS" : "FAIL") << '\n';
    return os.str();
  }

  static std::string csv_header() { return "overall,architecture,diff_count,flags,flag_rules,lint_count,lint_rules"; }

  std::string csv_row() const {
    std::string rules, lints;
    for (const auto& f : flags) rules += (rules.empty() ? "" : ";") + f.layer + ":" + to_string(f.rule);
    for (const auto& f : findings) lints += (lints.empty() ? "" : ";") + std::string(to_string(f.rule));
    std::ostringstream os;
    os << (passed() ? "pass" : "fail") << ',' << (architecture.pass ? "pass" : "mismatch") << ',' << architecture.diff.size()
       << ',' << flags.size() << ',' << rules << ',' << findings.size() << ',' << lints;
    return os.str();
  }
};

/// All three stages. Without a received spec the reference layer list is
/// assumed and only parameter names and shapes are compared against it.
inline ValidationReport defend(const std::optional<ModelSpec>& received, const Params& params, const ReferenceSpec& ref,
                               const std::optional<ClientConfig>& protocol = std::nullopt, const ScanRules& rules = {}) {
  ValidationReport rep;
  const ModelSpec& spec = received ? *received : ref.model;
  if (received) {
    rep.architecture = validate_architecture(*received, ref);
  }
  try {
    check_params(spec, params);
  } catch (const SpecError& e) {
    rep.architecture.pass = false;
    rep.architecture.diff.push_back(std::string("parameters do not fit the architecture: ") + e.what());
    return rep;
  }
  rep.flags = scan_parameters(params, spec, rules);
  if (protocol) rep.findings = lint_protocol(*protocol, spec);
  return rep;
}

}  // namespace gialab
