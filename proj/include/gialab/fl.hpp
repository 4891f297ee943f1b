#pragma once

// Single-client federated rounds: what an attacker observes.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gialab/data.hpp"
#include "gialab/model.hpp"
#include "gialab/optim.hpp"

namespace gialab {

enum class UpdateKind { fedsgd_gradient, fedavg_delta };

struct Update {
  UpdateKind kind = UpdateKind::fedsgd_gradient;
  NamedTensors tensors;
  std::size_t batch_size = 1;
  std::size_t epochs = 1;
  double lr = 0.0;
  std::size_t local_samples = 1;
};

struct ClientConfig {
  std::size_t batch_size = 1;
  std::size_t epochs = 1;
  double lr = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("ClientConfig: batch size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("ClientConfig: epochs must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("ClientConfig: learning rate must be >= 0");
  }
};

/// The client's private batch, kept only for scoring reconstructions.
struct GroundTruth {
  Tensor pixels;  // [0, 1]
  Tensor inputs;  // normalized, as fed to the model
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// Batch order of a local training run; indices into the client's dataset.
struct FedAvgTrace {
  std::vector<std::vector<std::size_t>> steps;
};

inline GroundTruth make_ground_truth(const Dataset& data, const std::vector<std::size_t>& idx) {
  GroundTruth gt;
  gt.indices = idx;
  gt.pixels = take_rows(data.images, idx);
  gt.inputs = normalize(gt.pixels, data.norm);
  for (std::size_t i : idx) gt.labels.push_back(data.labels.at(i));
  return gt;
}

/// B distinct indices; a pure function of (seed, round).
inline std::vector<std::size_t> sample_batch(std::size_t n, std::size_t b, std::uint64_t seed, std::uint64_t round) {
  if (b > n) throw std::invalid_argument("batch size " + std::to_string(b) + " exceeds dataset size " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  CounterRng rng = CounterRng(seed).derive(round);
  rng.shuffle(idx);
  idx.resize(b);
  return idx;
}

/// B indices where `duplicates` samples share one label and the rest carry
/// distinct other labels (duplicates = 0 means all labels distinct).
inline std::vector<std::size_t> sample_batch_with_duplicates(const Dataset& data, std::size_t b, std::size_t duplicates,
                                                             std::uint64_t seed, std::uint64_t round) {
  if (duplicates == 1 || duplicates > b) {
    throw std::invalid_argument("duplicate count " + std::to_string(duplicates) + " invalid for batch " + std::to_string(b));
  }
  std::size_t distinct = duplicates == 0 ? b : 1 + (b - duplicates);
  if (distinct > data.classes) {
    throw std::invalid_argument("batch " + std::to_string(b) + " with " + std::to_string(duplicates) + " duplicates needs " +
                                std::to_string(distinct) + " classes, dataset has " + std::to_string(data.classes));
  }
  CounterRng rng = CounterRng(seed).derive(0xd0b + round);
  std::vector<std::size_t> classes(data.classes);
  for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = i;
  rng.shuffle(classes);
  std::vector<std::size_t> want;
  if (duplicates == 0) {
    want.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(b));
  } else {
    want.assign(duplicates, classes[0]);
    for (std::size_t i = 0; i < b - duplicates; ++i) want.push_back(classes[1 + i]);
  }
  std::vector<std::size_t> out;
  std::vector<bool> used(data.size(), false);
  for (std::size_t c : want) {
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (static_cast<std::size_t>(data.labels[i]) == c && !used[i]) cand.push_back(i);
    }
    if (cand.empty()) throw std::invalid_argument("not enough samples of class " + std::to_string(c));
    std::size_t j = cand[rng.below(cand.size())];
    used[j] = true;
    out.push_back(j);
  }
  return out;
}

struct FedSgdRound {
  Update update;
  GroundTruth truth;
};

inline FedSgdRound fedsgd_on(const ModelSpec& spec, const Params& params, const GroundTruth& truth) {
  FedSgdRound r;
  r.truth = truth;
  r.update.kind = UpdateKind::fedsgd_gradient;
  r.update.tensors = loss_and_grads(spec, params, truth.inputs, truth.labels).grads;
  r.update.batch_size = truth.labels.size();
  r.update.local_samples = truth.labels.size();
  return r;
}

inline FedSgdRound fedsgd_round(const ModelSpec& spec, const Params& params, const Dataset& data, std::size_t batch,
                                std::uint64_t seed, std::uint64_t round = 0) {
  if (batch < 1) throw std::invalid_argument("fedsgd_round: batch size must be >= 1");
  return fedsgd_on(spec, params, make_ground_truth(data, sample_batch(data.size(), batch, seed, round)));
}

/// Batch schedule for E epochs over n samples, reshuffled every epoch.
inline FedAvgTrace fedavg_schedule(std::size_t n, const ClientConfig& cfg, std::uint64_t round = 0) {
  FedAvgTrace trace;
  CounterRng rng = CounterRng(cfg.seed).derive(round);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    CounterRng er = rng.derive(e + 1);
    er.shuffle(order);
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      trace.steps.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                               order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + cfg.batch_size)));
    }
  }
  return trace;
}

struct FedAvgRound {
  Update update;
  FedAvgTrace trace;
  GroundTruth truth;
};

/// Local plain-SGD training over the whole client dataset; the update is
/// theta_after - theta_before.
inline FedAvgRound fedavg_round(const ModelSpec& spec, const Params& params, const Dataset& data,
                                const ClientConfig& cfg, std::uint64_t round = 0) {
  cfg.validate();
  if (cfg.batch_size > data.size()) {
    throw std::invalid_argument("fedavg_round: batch size " + std::to_string(cfg.batch_size) + " exceeds " +
                                std::to_string(data.size()) + " local samples");
  }
  FedAvgRound r;
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  r.truth = make_ground_truth(data, all);
  r.trace = fedavg_schedule(data.size(), cfg, round);

  auto names = param_names(spec);
  Params theta = params;
  for (const auto& step : r.trace.steps) {
    std::vector<int> labels;
    for (std::size_t i : step) labels.push_back(r.truth.labels[i]);
    auto lg = loss_and_grads(spec, theta, take_rows(r.truth.inputs, step), labels);
    for (const auto& n : names) {
      Tensor& p = theta.at(n);
      const Tensor& g = lg.grads.at(n);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * g[i];
    }
  }
  r.update.kind = UpdateKind::fedavg_delta;
  r.update.batch_size = cfg.batch_size;
  r.update.epochs = cfg.epochs;
  r.update.lr = cfg.lr;
  r.update.local_samples = data.size();
  for (const auto& n : names) {
    Tensor d = theta.at(n);
    const Tensor& p0 = params.at(n);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= p0[i];
    r.update.tensors[n] = std::move(d);
  }
  return r;
}

/// Trains a target model with plain minibatch SGD (used to produce
/// "trained" attack targets).
inline Params train_model(const ModelSpec& spec, Params params, const Dataset& data, std::size_t epochs,
                          std::size_t batch, double lr, std::uint64_t seed) {
  Tensor inputs = normalize(data.images, data.norm);
  auto names = param_names(spec);
  ClientConfig cfg{batch, epochs, lr, seed};
  FedAvgTrace sched = fedavg_schedule(data.size(), cfg);
  for (const auto& step : sched.steps) {
    std::vector<int> labels;
    for (std::size_t i : step) labels.push_back(data.labels[i]);
    auto lg = loss_and_grads(spec, params, take_rows(inputs, step), labels);
    for (const auto& n : names) {
      Tensor& p = params.at(n);
      const Tensor& g = lg.grads.at(n);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    }
  }
  return params;
}

inline double accuracy(const ModelSpec& spec, const Params& params, const Dataset& data) {
  Tensor logits = predict_logits(spec, params, normalize(data.images, data.norm));
  std::size_t k = spec.classes, hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    hit += best == static_cast<std::size_t>(data.labels[i]);
  }
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

}  // namespace gialab
