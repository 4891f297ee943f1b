#pragma once

// Experiment configuration files. Grammar (see docs/config.md):
//   file    = { line }
//   line    = blank | comment | section | pair
//   comment = ("#" | ";") any
//   section = "[" name "]"
//   pair    = key "=" value        (list values are comma separated)

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gialab/attack_opt.hpp"
#include "gialab/model.hpp"
#include "gialab/serialize.hpp"

namespace gialab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { op_gia, fedavg, gen_z, gen_w, lti, closed_form, imprint, fishing, defense, metrics_analysis };

inline const std::vector<std::pair<ExperimentKind, std::string>>& experiment_kinds() {
  static const std::vector<std::pair<ExperimentKind, std::string>> k{
      {ExperimentKind::op_gia, "op-gia"},       {ExperimentKind::fedavg, "fedavg"},
      {ExperimentKind::gen_z, "gen-z"},         {ExperimentKind::gen_w, "gen-w"},
      {ExperimentKind::lti, "lti"},             {ExperimentKind::closed_form, "closed-form"},
      {ExperimentKind::imprint, "imprint"},     {ExperimentKind::fishing, "fishing"},
      {ExperimentKind::defense, "defense"},     {ExperimentKind::metrics_analysis, "metrics-analysis"}};
  return k;
}

inline const std::string& to_string(ExperimentKind k) {
  for (const auto& [kind, name] : experiment_kinds()) {
    if (kind == k) return name;
  }
  throw std::logic_error("unknown experiment kind");
}

struct DatasetBlock {
  std::string source = "synth";  // synth | cifar10
  std::filesystem::path path;    // cifar10 binary batch
  std::size_t samples = 128;
  std::size_t channels = 1;
  std::size_t resolution = 8;
  std::size_t classes = 10;
  std::size_t aux_samples = 512;  // gen-z / lti auxiliary split
};

struct ModelBlock {
  std::string arch = "mlp2";  // mlp2 | cnn_s | cnn_s_deep | linear_first
  ActivationKind activation = ActivationKind::relu;
  std::size_t hidden = 64;
  bool trained = false;
  std::size_t train_epochs = 30;
  std::size_t train_batch = 8;
  double train_lr = 0.05;
};

struct AttackBlock {
  OpGiaConfig opt;
  std::size_t batch = 1;
  std::size_t duplicates = 0;
  std::size_t rounds = 1;  // client batches attacked per case
  // fedavg
  std::size_t epochs = 1;
  std::size_t local_samples = 4;
  double client_lr = 0.1;
  SimulationMode mode = SimulationMode::strong;
  double weak_lr_factor = 2.0;
  // imprint / fishing
  std::size_t bins = 128;
  double beta = 10.0;
  int target_class = 0;
  // gen-z / gen-w / lti
  std::size_t latent_dim = 16;
  std::size_t inversion_hidden = 128;
  std::size_t inversion_epochs = 20;
};

struct SweepAxes {
  std::vector<std::size_t> batch, resolution, duplicates, epochs;
  std::vector<ActivationKind> activation;
  std::vector<bool> trained;

  bool empty() const {
    return batch.empty() && resolution.empty() && duplicates.empty() && epochs.empty() && activation.empty() &&
           trained.empty();
  }
};

struct ExperimentConfig {
  std::string id = "experiment";
  ExperimentKind kind = ExperimentKind::op_gia;
  DatasetBlock dataset;
  ModelBlock model;
  AttackBlock attack;
  SweepAxes sweep;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output = "results";
  bool dump_images = true;
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class ConfigReader {
 public:
  ConfigReader(std::string origin, std::size_t line) : origin_(std::move(origin)), line_(line) {}

  [[noreturn]] void fail(const std::string& why) const {
    throw ConfigError(origin_ + ":" + std::to_string(line_) + ": " + why);
  }

  std::size_t size(const std::string& key, const std::string& v, std::size_t min = 0) const {
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      x = std::stoull(v, &pos);
    } catch (const std::exception&) {
      fail(key + ": expected a non-negative integer, got '" + v + "'");
    }
    if (pos != v.size()) fail(key + ": expected a non-negative integer, got '" + v + "'");
    if (x < min) fail(key + ": must be >= " + std::to_string(min));
    return static_cast<std::size_t>(x);
  }

  double real(const std::string& key, const std::string& v) const {
    std::size_t pos = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &pos);
    } catch (const std::exception&) {
      fail(key + ": expected a number, got '" + v + "'");
    }
    if (pos != v.size() || !std::isfinite(x)) fail(key + ": expected a finite number, got '" + v + "'");
    return x;
  }

  bool boolean(const std::string& key, const std::string& v) const {
    if (v == "true" || v == "yes" || v == "1" || v == "trained") return true;
    if (v == "false" || v == "no" || v == "0" || v == "untrained") return false;
    fail(key + ": expected true/false, got '" + v + "'");
  }

  ActivationKind activation(const std::string& key, const std::string& v) const {
    try {
      return parse_activation(v);
    } catch (const std::exception&) {
      fail(key + ": unknown activation '" + v + "'");
    }
  }

  template <typename T, typename F>
  std::vector<T> list(const std::string& key, const std::string& v, F one) const {
    std::vector<T> out;
    for (const auto& item : split_list(v)) out.push_back(one(key, item));
    if (out.empty()) fail(key + ": empty list");
    return out;
  }

 private:
  std::string origin_;
  std::size_t line_;
};

}  // namespace detail

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  for (const auto& [kind, name] : experiment_kinds()) {
    if (name == s) return kind;
  }
  throw std::invalid_argument("unknown experiment kind '" + s + "'");
}

/// Which sweep axes make sense for an experiment kind.
inline bool axis_allowed(ExperimentKind k, const std::string& axis) {
  using K = ExperimentKind;
  if (axis == "activation") return true;
  if (axis == "resolution") return k != K::defense;
  if (axis == "batch") return k != K::closed_form && k != K::defense;
  if (axis == "duplicates") return k == K::op_gia || k == K::gen_w || k == K::metrics_analysis;
  if (axis == "trained") return k != K::imprint && k != K::defense;
  if (axis == "epochs") return k == K::fedavg;
  return false;
}

inline void validate(const ExperimentConfig& c) {
  auto bad = [](const std::string& why) { throw ConfigError("config: " + why); };
  if (c.seeds.empty()) bad("[experiment] seeds must list at least one seed");
  if (c.dataset.source != "synth" && c.dataset.source != "cifar10") bad("unknown dataset source '" + c.dataset.source + "'");
  if (c.dataset.source == "cifar10" && c.dataset.path.empty()) bad("cifar10 source needs [dataset] path");
  static const std::vector<std::string> archs{"mlp2", "cnn_s", "cnn_s_deep", "linear_first"};
  if (std::find(archs.begin(), archs.end(), c.model.arch) == archs.end()) bad("unknown model arch '" + c.model.arch + "'");
  c.attack.opt.validate();
  const SweepAxes& s = c.sweep;
  std::vector<std::pair<std::string, bool>> used{{"batch", !s.batch.empty()},       {"resolution", !s.resolution.empty()},
                                                 {"duplicates", !s.duplicates.empty()}, {"epochs", !s.epochs.empty()},
                                                 {"activation", !s.activation.empty()}, {"trained", !s.trained.empty()}};
  for (const auto& [axis, on] : used) {
    if (on && !axis_allowed(c.kind, axis)) bad("sweep axis '" + axis + "' is not valid for kind " + to_string(c.kind));
  }
  for (std::size_t r : s.resolution) {
    if (r < 4 || r % 4 != 0) bad("resolution " + std::to_string(r) + " must be a positive multiple of 4");
  }
  if (c.dataset.resolution < 4 || c.dataset.resolution % 4 != 0) bad("[dataset] resolution must be a positive multiple of 4");
  for (std::size_t b : s.batch) {
    if (b == 0) bad("batch sizes must be >= 1");
  }
  for (std::size_t e : s.epochs) {
    if (e == 0) bad("epochs must be >= 1");
  }
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, raw)) {
    ++lineno;
    detail::ConfigReader r(origin, lineno);
    std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line[0] == '[') {
      if (line.back() != ']') r.fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      static const std::vector<std::string> known{"experiment", "dataset", "model", "attack", "sweep"};
      if (std::find(known.begin(), known.end(), section) == known.end()) r.fail("unknown section [" + section + "]");
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string v = detail::trim(line.substr(eq + 1));
    if (auto hash = v.find(" #"); hash != std::string::npos) v = detail::trim(v.substr(0, hash));
    if (section.empty()) r.fail("'" + key + "' appears before any section header");
    if (key.empty()) r.fail("empty key");
    if (v.empty()) r.fail(key + ": empty value");
    std::string full = section + "." + key;
    if (seen.count(full)) r.fail("duplicate key " + full + " (first at line " + std::to_string(seen[full]) + ")");
    seen[full] = lineno;
    auto sz = [&](const std::string& k, const std::string& x) { return r.size(k, x); };

    if (section == "experiment") {
      if (key == "id") c.id = v;
      else if (key == "kind") {
        try {
          c.kind = parse_experiment_kind(v);
        } catch (const std::exception& e) {
          r.fail(e.what());
        }
      } else if (key == "seeds") {
        for (std::size_t s : r.list<std::size_t>(key, v, sz)) c.seeds.push_back(s);
      } else if (key == "output") c.output = v;
      else if (key == "dump_images") c.dump_images = r.boolean(key, v);
      else r.fail("unknown key '" + key + "' in [experiment]");
    } else if (section == "dataset") {
      if (key == "source") c.dataset.source = v;
      else if (key == "path") c.dataset.path = v;
      else if (key == "samples") c.dataset.samples = r.size(key, v, 1);
      else if (key == "channels") c.dataset.channels = r.size(key, v, 1);
      else if (key == "resolution") c.dataset.resolution = r.size(key, v, 1);
      else if (key == "classes") c.dataset.classes = r.size(key, v, 2);
      else if (key == "aux_samples") c.dataset.aux_samples = r.size(key, v, 1);
      else r.fail("unknown key '" + key + "' in [dataset]");
    } else if (section == "model") {
      if (key == "arch") c.model.arch = v;
      else if (key == "activation") c.model.activation = r.activation(key, v);
      else if (key == "hidden") c.model.hidden = r.size(key, v, 1);
      else if (key == "trained") c.model.trained = r.boolean(key, v);
      else if (key == "train_epochs") c.model.train_epochs = r.size(key, v, 1);
      else if (key == "train_batch") c.model.train_batch = r.size(key, v, 1);
      else if (key == "train_lr") c.model.train_lr = r.real(key, v);
      else r.fail("unknown key '" + key + "' in [model]");
    } else if (section == "attack") {
      AttackBlock& a = c.attack;
      if (key == "distance") {
        if (v == "cosine") a.opt.distance = Distance::cosine;
        else if (v == "l2") a.opt.distance = Distance::l2;
        else r.fail("distance: expected cosine or l2, got '" + v + "'");
      } else if (key == "tv") a.opt.tv_weight = r.real(key, v);
      else if (key == "iterations") a.opt.iterations = r.size(key, v, 1);
      else if (key == "lr") a.opt.lr = r.real(key, v);
      else if (key == "decay") a.opt.decay = r.real(key, v);
      else if (key == "milestones") a.opt.milestones = r.list<double>(key, v, [&](const std::string& k, const std::string& x) { return r.real(k, x); });
      else if (key == "init") {
        if (v == "gaussian") a.opt.init = InitKind::gaussian;
        else if (v == "uniform") a.opt.init = InitKind::uniform;
        else r.fail("init: expected gaussian or uniform, got '" + v + "'");
      } else if (key == "labels") {
        if (v == "ground-truth") a.opt.label_source = LabelSource::ground_truth;
        else if (v == "inferred") a.opt.label_source = LabelSource::inferred;
        else r.fail("labels: expected ground-truth or inferred, got '" + v + "'");
      } else if (key == "batch") a.batch = r.size(key, v, 1);
      else if (key == "duplicates") a.duplicates = r.size(key, v);
      else if (key == "rounds") a.rounds = r.size(key, v, 1);
      else if (key == "epochs") a.epochs = r.size(key, v, 1);
      else if (key == "local_samples") a.local_samples = r.size(key, v, 1);
      else if (key == "client_lr") a.client_lr = r.real(key, v);
      else if (key == "weak_lr_factor") a.weak_lr_factor = r.real(key, v);
      else if (key == "mode") {
        if (v == "strong") a.mode = SimulationMode::strong;
        else if (v == "weak") a.mode = SimulationMode::weak;
        else if (v == "none") a.mode = SimulationMode::none;
        else r.fail("mode: expected strong, weak or none, got '" + v + "'");
      } else if (key == "bins") a.bins = r.size(key, v, 2);
      else if (key == "beta") a.beta = r.real(key, v);
      else if (key == "target_class") a.target_class = static_cast<int>(r.size(key, v));
      else if (key == "latent_dim") a.latent_dim = r.size(key, v, 1);
      else if (key == "inversion_hidden") a.inversion_hidden = r.size(key, v, 1);
      else if (key == "inversion_epochs") a.inversion_epochs = r.size(key, v, 1);
      else r.fail("unknown key '" + key + "' in [attack]");
    } else {  // sweep
      static const std::vector<std::string> axes{"batch", "resolution", "duplicates", "epochs", "activation", "trained"};
      if (std::find(axes.begin(), axes.end(), key) == axes.end()) r.fail("unknown sweep axis '" + key + "'");
      if (key == "batch") c.sweep.batch = r.list<std::size_t>(key, v, [&](const std::string& k, const std::string& x) { return r.size(k, x, 1); });
      else if (key == "resolution") c.sweep.resolution = r.list<std::size_t>(key, v, sz);
      else if (key == "duplicates") c.sweep.duplicates = r.list<std::size_t>(key, v, sz);
      else if (key == "epochs") c.sweep.epochs = r.list<std::size_t>(key, v, [&](const std::string& k, const std::string& x) { return r.size(k, x, 1); });
      else if (key == "activation") c.sweep.activation = r.list<ActivationKind>(key, v, [&](const std::string& k, const std::string& x) { return r.activation(k, x); });
      else if (key == "trained") c.sweep.trained = r.list<bool>(key, v, [&](const std::string& k, const std::string& x) { return r.boolean(k, x); });
    }
  }
  try {
    validate(c);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string() + ": cannot open config");
  std::stringstream ss;
  ss << f.rdbuf();
  ExperimentConfig c = parse_config(ss.str(), path.string());
  return c;
}

/// Canonical text form; parses back to the same configuration.
inline std::string to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  auto join = [](const auto& v, auto f) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + f(x);
    return s;
  };
  auto num = [](auto x) { std::ostringstream o; o << x; return o.str(); };
  os << "[experiment]\nid = " << c.id << "\nkind = " << to_string(c.kind) << "\nseeds = "
     << join(c.seeds, num) << "\noutput = " << c.output.string() << "\ndump_images = " << (c.dump_images ? "true" : "false")
     << "\n\n[dataset]\nsource = " << c.dataset.source << '\n';
  if (!c.dataset.path.empty()) os << "path = " << c.dataset.path.string() << '\n';
  os << "samples = " << c.dataset.samples << "\nchannels = " << c.dataset.channels << "\nresolution = " << c.dataset.resolution
     << "\nclasses = " << c.dataset.classes << "\naux_samples = " << c.dataset.aux_samples << "\n\n[model]\narch = " << c.model.arch
     << "\nactivation = " << to_string(c.model.activation) << "\nhidden = " << c.model.hidden
     << "\ntrained = " << (c.model.trained ? "true" : "false") << "\ntrain_epochs = " << c.model.train_epochs
     << "\ntrain_batch = " << c.model.train_batch << "\ntrain_lr = " << num(c.model.train_lr) << "\n\n[attack]\n";
  const AttackBlock& a = c.attack;
  os << "distance = " << to_string(a.opt.distance) << "\ntv = " << num(a.opt.tv_weight) << "\niterations = " << a.opt.iterations
     << "\nlr = " << num(a.opt.lr) << "\ndecay = " << num(a.opt.decay) << "\nmilestones = " << join(a.opt.milestones, num)
     << "\ninit = " << (a.opt.init == InitKind::gaussian ? "gaussian" : "uniform")
     << "\nlabels = " << (a.opt.label_source == LabelSource::ground_truth ? "ground-truth" : "inferred") << "\nbatch = " << a.batch
     << "\nduplicates = " << a.duplicates << "\nrounds = " << a.rounds << "\nepochs = " << a.epochs
     << "\nlocal_samples = " << a.local_samples << "\nclient_lr = " << num(a.client_lr) << "\nmode = " << to_string(a.mode)
     << "\nweak_lr_factor = " << num(a.weak_lr_factor) << "\nbins = " << a.bins << "\nbeta = " << num(a.beta)
     << "\ntarget_class = " << a.target_class << "\nlatent_dim = " << a.latent_dim << "\ninversion_hidden = " << a.inversion_hidden
     << "\ninversion_epochs = " << a.inversion_epochs << "\n";
  const SweepAxes& s = c.sweep;
  if (!s.empty()) {
    os << "\n[sweep]\n";
    if (!s.batch.empty()) os << "batch = " << join(s.batch, num) << '\n';
    if (!s.resolution.empty()) os << "resolution = " << join(s.resolution, num) << '\n';
    if (!s.duplicates.empty()) os << "duplicates = " << join(s.duplicates, num) << '\n';
    if (!s.epochs.empty()) os << "epochs = " << join(s.epochs, num) << '\n';
    if (!s.activation.empty()) os << "activation = " << join(s.activation, [](ActivationKind k) { return std::string(to_string(k)); }) << '\n';
    if (!s.trained.empty()) os << "trained = " << join(s.trained, [](bool b) { return std::string(b ? "true" : "false"); }) << '\n';
  }
  return os.str();
}

}  // namespace gialab
