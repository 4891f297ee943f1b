#include <gtest/gtest.h>

#include <map>
#include <set>

#include "gialab/fl.hpp"

using namespace gialab;

namespace {

struct Fixture {
  Dataset d = synth_dataset(32, 1, 8, 8, 10, 3);
  ModelSpec spec = zoo::cnn_s({1, 8, 8}, 10);
  Params params = build_model(spec, 3);
};

NamedTensors per_sample_mean(const ModelSpec& s, const Params& p, const GroundTruth& gt) {
  NamedTensors acc;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    auto g = loss_and_grads(s, p, take_rows(gt.inputs, {i}), {gt.labels[i]}).grads;
    for (auto& [n, t] : g) {
      if (!acc.count(n)) acc[n] = Tensor::zeros_like(t);
      for (std::size_t k = 0; k < t.size(); ++k) acc[n][k] += t[k] / static_cast<double>(gt.labels.size());
    }
  }
  return acc;
}

}  // namespace

TEST(FedSgd, SingleSampleMatchesLossAndGrads) {
  Fixture f;
  Dataset one = subset(f.d, {5});
  auto rd = fedsgd_round(f.spec, f.params, one, 1, 0);
  auto lg = loss_and_grads(f.spec, f.params, normalize(one.images, one.norm), one.labels);
  for (const auto& [n, g] : lg.grads) EXPECT_EQ(rd.update.tensors.at(n), g);
  EXPECT_EQ(rd.update.kind, UpdateKind::fedsgd_gradient);
}

TEST(FedSgd, MeanOfPerSampleGradients) {
  Fixture f;
  for (std::size_t b : {2, 5}) {
    auto rd = fedsgd_round(f.spec, f.params, f.d, b, 7);
    auto want = per_sample_mean(f.spec, f.params, rd.truth);
    for (const auto& [n, g] : rd.update.tensors) EXPECT_LT(max_abs_diff(g, want.at(n)), 1e-12) << n;
  }
}

TEST(FedSgd, DuplicatedBatchSameGradient) {
  Fixture f;
  auto a = fedsgd_on(f.spec, f.params, make_ground_truth(f.d, {1, 2}));
  auto b = fedsgd_on(f.spec, f.params, make_ground_truth(f.d, {1, 2, 1, 2}));
  for (const auto& [n, g] : a.update.tensors) EXPECT_LT(max_abs_diff(g, b.update.tensors.at(n)), 1e-12);
}

TEST(FedSgd, BatchLargerThanDataIsAnError) {
  Fixture f;
  EXPECT_THROW(fedsgd_round(f.spec, f.params, subset(f.d, {0, 1}), 3, 0), std::exception);
}

TEST(Sampling, DeterministicPerSeedAndRound) {
  EXPECT_EQ(sample_batch(100, 8, 5, 2), sample_batch(100, 8, 5, 2));
  EXPECT_NE(sample_batch(100, 8, 5, 2), sample_batch(100, 8, 5, 3));
  auto b = sample_batch(100, 100, 1, 0);
  std::sort(b.begin(), b.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(b[i], i);
}

TEST(Sampling, DuplicateLabelBatches) {
  Dataset d = synth_dataset(128, 1, 8, 8, 10, 1);
  for (std::size_t dup : {0, 2, 3, 4}) {
    auto idx = sample_batch_with_duplicates(d, 4, dup, 1, 0);
    ASSERT_EQ(idx.size(), 4u);
    std::map<int, int> count;
    for (auto i : idx) count[d.labels[i]]++;
    int most = 0;
    for (auto [c, k] : count) most = std::max(most, k);
    EXPECT_EQ(most, dup == 0 ? 1 : static_cast<int>(dup)) << dup;
    std::set<std::size_t> uniq(idx.begin(), idx.end());
    EXPECT_EQ(uniq.size(), 4u);
  }
  EXPECT_THROW(sample_batch_with_duplicates(d, 4, 1, 1, 0), std::invalid_argument);
  EXPECT_THROW(sample_batch_with_duplicates(d, 4, 5, 1, 0), std::invalid_argument);
  EXPECT_THROW(sample_batch_with_duplicates(d, 12, 0, 1, 0), std::invalid_argument);
}

TEST(FedAvg, OneFullBatchStepIsMinusLrTimesGradient) {
  Fixture f;
  Dataset local = subset(f.d, {0, 1, 2, 3});
  ClientConfig cc{4, 1, 0.3, 9};
  auto ra = fedavg_round(f.spec, f.params, local, cc);
  auto rs = fedsgd_on(f.spec, f.params, ra.truth);
  for (const auto& [n, g] : rs.update.tensors) {
    const Tensor& d = ra.update.tensors.at(n);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(d[i], -0.3 * g[i], 1e-14);
  }
  EXPECT_EQ(ra.update.kind, UpdateKind::fedavg_delta);
}

TEST(FedAvg, ZeroLearningRateGivesZeroDelta) {
  Fixture f;
  auto ra = fedavg_round(f.spec, f.params, subset(f.d, {0, 1}), ClientConfig{1, 2, 0.0, 1});
  for (const auto& [n, t] : ra.update.tensors) EXPECT_EQ(t, Tensor::zeros_like(t)) << n;
}

TEST(FedAvg, MatchesHandUnrolledSteps) {
  Fixture f;
  Dataset local = subset(f.d, {3, 8});
  ClientConfig cc{1, 2, 0.1, 4};
  auto ra = fedavg_round(f.spec, f.params, local, cc);
  ASSERT_EQ(ra.trace.steps.size(), 4u);
  // unroll the 4 SGD steps in the recorded order
  Params theta = f.params;
  Tensor x = normalize(local.images, local.norm);
  for (const auto& step : ra.trace.steps) {
    ASSERT_EQ(step.size(), 1u);
    auto g = loss_and_grads(f.spec, theta, take_rows(x, step), {local.labels[step[0]]}).grads;
    for (auto& [n, t] : theta)
      for (std::size_t i = 0; i < t.size(); ++i) t[i] -= 0.1 * g.at(n)[i];
  }
  for (const auto& [n, t] : theta) {
    Tensor delta = t;
    for (std::size_t i = 0; i < t.size(); ++i) delta[i] -= f.params.at(n)[i];
    EXPECT_LT(max_abs_diff(delta, ra.update.tensors.at(n)), 1e-14) << n;
  }
}

TEST(FedAvg, EpochsReshuffleFromTheRoundSeed) {
  ClientConfig cc{2, 3, 0.1, 11};
  auto a = fedavg_schedule(8, cc), b = fedavg_schedule(8, cc);
  EXPECT_EQ(a.steps, b.steps);
  ASSERT_EQ(a.steps.size(), 12u);
  // each epoch covers every sample once
  for (std::size_t e = 0; e < 3; ++e) {
    std::set<std::size_t> seen;
    for (std::size_t s = 0; s < 4; ++s) seen.insert(a.steps[e * 4 + s].begin(), a.steps[e * 4 + s].end());
    EXPECT_EQ(seen.size(), 8u);
  }
}

TEST(FedAvg, InvalidConfigsRejected) {
  Fixture f;
  Dataset local = subset(f.d, {0, 1});
  EXPECT_THROW(fedavg_round(f.spec, f.params, local, ClientConfig{0, 1, 0.1, 0}), std::invalid_argument);
  EXPECT_THROW(fedavg_round(f.spec, f.params, local, ClientConfig{1, 0, 0.1, 0}), std::invalid_argument);
  EXPECT_THROW(fedavg_round(f.spec, f.params, local, ClientConfig{3, 1, 0.1, 0}), std::invalid_argument);
  EXPECT_THROW(fedavg_round(f.spec, f.params, local, ClientConfig{1, 1, -0.1, 0}), std::invalid_argument);
}

TEST(Training, ImprovesAccuracy) {
  Dataset d = synth_dataset(128, 1, 8, 8, 10, 5);
  ModelSpec s = zoo::mlp2({1, 8, 8}, 10);
  Params p = build_model(s, 5);
  double before = accuracy(s, p, d);
  Params q = train_model(s, p, d, 10, 8, 0.05, 5);
  EXPECT_GT(accuracy(s, q, d), before + 0.3);
}
