#include <gtest/gtest.h>

#include <functional>
#include <unistd.h>

#include "gialab/attack_ana.hpp"

using namespace gialab;

namespace {

std::pair<Dataset, Dataset> split(std::size_t client_n, std::size_t aux_n, std::uint64_t seed) {
  Dataset pool = synth_dataset(client_n + aux_n, 1, 8, 8, 10, seed);
  std::vector<std::size_t> ci, ai;
  for (std::size_t i = 0; i < pool.size(); ++i) (i < client_n ? ci : ai).push_back(i);
  return {subset(pool, ci), subset(pool, ai)};
}

double norm_of(const Update& u) {
  double s = 0;
  for (const auto& [k, v] : u.tensors) s += dot(v.data(), v.data());
  return std::sqrt(s);
}

// Expected singleton count over equally weighted occupancy vectors that have
// at least one bin holding two or more balls, by exhaustive enumeration.
double occupancy_enumeration(std::size_t B, std::size_t k) {
  double total = 0, weight = 0;
  std::vector<std::size_t> occ(k, 0);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t bin, std::size_t left) {
    if (bin + 1 == k) {
      occ[bin] = left;
      std::size_t singles = 0;
      bool multi = false;
      for (std::size_t c : occ) {
        singles += c == 1;
        multi = multi || c >= 2;
      }
      weight += 1;
      if (multi) total += static_cast<double>(singles);
      return;
    }
    for (std::size_t c = 0; c <= left; ++c) {
      occ[bin] = c;
      rec(bin + 1, left - c);
    }
  };
  rec(0, B);
  return total / weight;
}

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("gialab-ana-" + std::to_string(::getpid()) + "-" + name);
}

}  // namespace

TEST(ClosedForm, SingleSampleIsExact) {
  Dataset d = synth_dataset(16, 1, 8, 8, 10, 2);
  ModelSpec s = zoo::linear_first(d.image_shape(), 10, ActivationKind::relu, 64);
  Params p = build_model(s, 2);
  for (std::size_t i = 0; i < 5; ++i) {
    auto rd = fedsgd_on(s, p, make_ground_truth(d, {i}));
    auto inv = closed_form_linear_invert(rd.update, s, "fc1");
    ASSERT_GT(inv.active_count(), 0u);
    for (std::size_t n = 0; n < inv.rows.size(); ++n) {
      if (!inv.active[n]) continue;
      EXPECT_LT(max_abs_diff(inv.rows[n], detail::image_at(rd.truth.inputs, 0)), 1e-9);
    }
  }
}

TEST(ClosedForm, MatchesTheGradientRatioOracle) {
  Dataset d = synth_dataset(4, 1, 8, 8, 10, 3);
  ModelSpec s = zoo::linear_first(d.image_shape(), 10, ActivationKind::relu, 16);
  Params p = build_model(s, 3);
  auto gt = make_ground_truth(d, {1});
  auto g = loss_and_grads(s, p, gt.inputs, gt.labels).grads;
  Update u;
  u.tensors = g;
  auto inv = closed_form_linear_invert(u, s, "fc1");
  const Tensor &gw = g.at("fc1.weight"), &gb = g.at("fc1.bias");
  for (std::size_t n = 0; n < 16; ++n) {
    EXPECT_EQ(inv.active[n], std::abs(gb[n]) > kActivationThreshold);
    if (!inv.active[n]) continue;
    for (std::size_t j = 0; j < 64; ++j) EXPECT_DOUBLE_EQ(inv.rows[n][j], gw[n * 64 + j] / gb[n]);
  }
}

TEST(ClosedForm, ZeroLossGivesNoActiveNeurons) {
  Dataset d = synth_dataset(4, 1, 8, 8, 10, 3);
  ModelSpec s = zoo::linear_first(d.image_shape(), 10, ActivationKind::relu, 16);
  Params p = build_model(s, 3);
  auto gt = make_ground_truth(d, {0});
  p.at("fc3.bias")[static_cast<std::size_t>(gt.labels[0])] = 1000.0;
  auto rd = fedsgd_on(s, p, gt);
  auto inv = closed_form_linear_invert(rd.update, s, "fc1");
  EXPECT_EQ(inv.active_count(), 0u);
  for (const Tensor& r : inv.rows) EXPECT_TRUE(r.all_finite());
}

TEST(ClosedForm, SharedNeuronMixesTwoImages) {
  Dataset d = synth_dataset(4, 1, 8, 8, 10, 4);
  ModelSpec s = zoo::linear_first(d.image_shape(), 10, ActivationKind::relu, 64);
  Params p = build_model(s, 4);
  auto rd = fedsgd_on(s, p, make_ground_truth(d, {0, 1}));
  auto inv = closed_form_linear_invert(rd.update, s, "fc1");
  // neurons active for both inputs
  ad::Graph g;
  ad::NoGradScope ng(g);
  Tensor pre = ad::add_bias(ad::matmul(g.constant(rd.truth.inputs.reshaped({2, 64})), ad::transpose(g.constant(p.at("fc1.weight")))),
                            g.constant(p.at("fc1.bias")))
                   .value();
  std::size_t mixed = 0;
  for (std::size_t n = 0; n < 64; ++n) {
    if (!(pre[n] > 0 && pre[64 + n] > 0) || !inv.active[n]) continue;
    ++mixed;
    EXPECT_GT(max_abs_diff(inv.rows[n], detail::image_at(rd.truth.inputs, 0)), 0.01);
    EXPECT_GT(max_abs_diff(inv.rows[n], detail::image_at(rd.truth.inputs, 1)), 0.01);
  }
  EXPECT_GT(mixed, 0u);
}

TEST(ClosedForm, Preconditions) {
  Dataset d = synth_dataset(4, 1, 8, 8, 10, 4);
  ModelSpec s = zoo::linear_first(d.image_shape(), 10);
  Params p = build_model(s, 4);
  auto rd = fedsgd_round(s, p, d, 1, 4);
  EXPECT_THROW(closed_form_linear_invert(rd.update, s, "fc2"), std::invalid_argument);
  EXPECT_THROW(closed_form_linear_invert(rd.update, s, "act1"), std::invalid_argument);
  ModelSpec c = zoo::cnn_s(d.image_shape(), 10);
  auto rc = fedsgd_round(c, build_model(c, 4), d, 1, 4);
  EXPECT_THROW(closed_form_linear_invert(rc.update, c, "fc"), std::invalid_argument);
}

TEST(Imprint, StructureAndLadder) {
  auto [client, calib] = split(16, 1024, 5);
  ModelSpec s = zoo::mlp2(client.image_shape(), 10, ActivationKind::relu, 32);
  Params p = build_model(s, 5);
  auto im = build_imprint(s, p, 16, normalize(calib.images, calib.norm));
  EXPECT_NE(structural_hash(im.spec), structural_hash(s));
  const Tensor& w = im.params.at("imprint.weight");
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(w[i * 64 + j], im.module.measurement[j]);
  auto b = im.module.biases();
  for (std::size_t i = 1; i < b.size(); ++i) EXPECT_LT(b[i], b[i - 1]);
  EXPECT_THROW(build_imprint(s, p, 1, normalize(calib.images, calib.norm)), std::invalid_argument);
  EXPECT_THROW(build_imprint(im.spec, im.params, 8, normalize(calib.images, calib.norm)), std::invalid_argument);
  // the original network still runs behind the module
  EXPECT_NO_THROW(predict_logits(im.spec, im.params, normalize(client.images, client.norm)));
}

TEST(Imprint, UniformCalibrationGivesEvenCutoffs) {
  // brightness values 0, 1, ..., 99 (times 1/64 per pixel sum)
  Tensor cal(Shape{100, 1, 8, 8});
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = 0; j < 64; ++j) cal[i * 64 + j] = static_cast<double>(i) / 99.0;
  ModelSpec s = zoo::mlp2({1, 8, 8}, 10);
  auto im = build_imprint(s, build_model(s, 1), 4, cal);
  const auto& c = im.module.cutoffs;
  EXPECT_NEAR(c[2] - c[1], 0.25, 1e-12);
  EXPECT_NEAR(c[3] - c[2], 0.25, 1e-12);
  EXPECT_NEAR(c[1], 0.25, 1e-12);
}

TEST(Imprint, EveryInputLandsInExactlyOneBin) {
  auto [client, calib] = split(16, 1024, 6);
  ModelSpec s = zoo::mlp2(client.image_shape(), 10, ActivationKind::relu, 32);
  Tensor calx = normalize(calib.images, calib.norm);
  auto im = build_imprint(s, build_model(s, 6), 32, calx);
  for (std::size_t i = 0; i < calib.size(); ++i) {
    double v = im.module.measure(detail::image_at(calx, i).data());
    std::size_t activated = 0;
    std::ptrdiff_t largest = -1;
    for (std::size_t c = 0; c < im.module.cutoffs.size(); ++c) {
      if (v > im.module.cutoffs[c]) {
        ++activated;
        largest = static_cast<std::ptrdiff_t>(c);
      }
    }
    ASSERT_GE(activated, 1u);
    EXPECT_EQ(im.module.bin_of(v), largest);
  }
}

TEST(Imprint, SingleSampleIsRecoveredExactly) {
  auto [client, calib] = split(32, 1024, 7);
  ModelSpec s = zoo::mlp2(client.image_shape(), 10, ActivationKind::relu, 32);
  Params p = build_model(s, 7);
  for (std::size_t k : {2, 8, 128}) {
    auto im = build_imprint(s, p, k, normalize(calib.images, calib.norm));
    auto rd = fedsgd_round(im.spec, im.params, client, 1, 7, k);
    auto rec = imprint_reconstruct(rd.update, im.module, s.input, &rd.truth);
    EXPECT_EQ(rec.recovered, 1u) << "k=" << k;
    ASSERT_EQ(rec.images.size(), 1u);
    EXPECT_LT(max_abs_diff(rec.images[0], detail::image_at(rd.truth.inputs, 0)), 1e-8);
  }
}

TEST(Imprint, RecoveredCountMatchesBinOccupancy) {
  auto [client, calib] = split(256, 4096, 11);
  ModelSpec s = zoo::mlp2(client.image_shape(), 10, ActivationKind::relu, 32);
  auto im = build_imprint(s, build_model(s, 11), 128, normalize(calib.images, calib.norm));
  for (std::uint64_t round = 0; round < 5; ++round) {
    auto rd = fedsgd_round(im.spec, im.params, client, 16, 11, round);
    auto rec = imprint_reconstruct(rd.update, im.module, s.input, &rd.truth);
    // independent occupancy count
    std::map<std::ptrdiff_t, int> count;
    std::vector<std::ptrdiff_t> bins;
    for (std::size_t b = 0; b < 16; ++b) {
      double v = 0;
      for (std::size_t j = 0; j < 64; ++j) v += rd.truth.inputs[b * 64 + j] / 64.0;
      std::ptrdiff_t bin = -1;
      for (std::size_t c = 0; c < 128; ++c)
        if (v > im.module.cutoffs[c]) bin = static_cast<std::ptrdiff_t>(c);
      bins.push_back(bin);
      ++count[bin];
    }
    std::size_t alone = 0;
    for (auto bin : bins) alone += bin >= 0 && count[bin] == 1;
    EXPECT_EQ(rec.recovered, alone) << "round " << round;
  }
}

TEST(Imprint, CollidingBrightnessRecoversAtMostOne) {
  auto [client, calib] = split(8, 1024, 8);
  ModelSpec s = zoo::mlp2(client.image_shape(), 10, ActivationKind::relu, 32);
  auto im = build_imprint(s, build_model(s, 8), 64, normalize(calib.images, calib.norm));
  GroundTruth gt = make_ground_truth(client, {0, 1});
  // second image: a permutation of the first, same mean brightness
  for (std::size_t j = 0; j < 64; ++j) {
    gt.pixels[64 + j] = gt.pixels[63 - j];
    gt.inputs[64 + j] = gt.inputs[63 - j];
  }
  auto rd = fedsgd_on(im.spec, im.params, gt);
  EXPECT_LE(imprint_reconstruct(rd.update, im.module, s.input, &rd.truth).recovered, 1u);
}

TEST(Imprint, MismatchedModuleIsAnError) {
  auto [client, calib] = split(8, 512, 9);
  ModelSpec s = zoo::mlp2(client.image_shape(), 10, ActivationKind::relu, 32);
  Params p = build_model(s, 9);
  Tensor calx = normalize(calib.images, calib.norm);
  auto a = build_imprint(s, p, 8, calx), b = build_imprint(s, p, 16, calx);
  auto rd = fedsgd_round(a.spec, a.params, client, 1, 9);
  EXPECT_THROW(imprint_reconstruct(rd.update, b.module, s.input), ShapeError);
  auto plain = fedsgd_round(s, p, client, 1, 9);
  EXPECT_THROW(imprint_reconstruct(plain.update, a.module, s.input), std::exception);
}

TEST(RecoveryCount, SingleBallIsOne) {
  auto e = expected_recovery_count(1, 10, 1000, 1);
  EXPECT_EQ(e.mc_mean, 1.0);
  EXPECT_EQ(e.mc_se, 0.0);
  EXPECT_TRUE(std::isnan(e.formula_main));
}

TEST(RecoveryCount, MainSumMatchesOccupancyEnumeration) {
  for (auto [B, k] : {std::pair<std::size_t, std::size_t>{3, 4}, {3, 8}, {4, 6}, {5, 7}, {6, 9}}) {
    EXPECT_NEAR(recovery_formula_main(B, k), occupancy_enumeration(B, k), 1e-12) << B << "," << k;
  }
  EXPECT_THROW(recovery_formula_main(4, 4), std::invalid_argument);
  EXPECT_THROW(recovery_formula_main(2, 8), std::invalid_argument);
}

TEST(RecoveryCount, MonteCarloMatchesTheUniformExpectation) {
  for (auto [B, k] : {std::pair<std::size_t, std::size_t>{4, 16}, {3, 8}, {8, 64}, {10, 5}}) {
    auto e = expected_recovery_count(B, k, 100000, 3);
    double exact = static_cast<double>(B) * std::pow(1.0 - 1.0 / static_cast<double>(k), static_cast<double>(B - 1));
    EXPECT_LT(std::abs(e.mc_mean - exact), 4 * e.mc_se) << B << "," << k;
    if (B == 4 && k == 16) {
      EXPECT_LT(e.mc_se, 0.02);
    }
  }
}

TEST(RecoveryCount, CorrectedFormulaWithinThreeStandardErrors) {
  auto e = expected_recovery_count(4, 16, 100000, 4);
  double z = std::abs(e.formula_total() - e.mc_mean) / std::hypot(e.correction_se, e.mc_se);
  EXPECT_LE(z, 3.0);
}

TEST(RecoveryCount, ManyBinsRecoverNearlyAll) {
  EXPECT_GT(expected_recovery_count(8, 1000, 100000, 5).mc_mean, 0.97 * 8);
}

// Binary heads: with more classes the +beta offsets only flatten the softmax
// over the non-target classes and their gradients stay large.
TEST(Fishing, IsolatesTheTargetSample) {
  Dataset d = synth_dataset(64, 1, 8, 8, 2, 12);
  ModelSpec s = zoo::cnn_s(d.image_shape(), 2);
  Params p = build_model(s, 12);
  // one sample of class 1 among seven of class 0
  std::vector<std::size_t> idx{1};
  for (std::size_t i = 0; idx.size() < 8; ++i)
    if (d.labels[i] != 1) idx.push_back(i);
  auto gt = make_ground_truth(d, idx);
  auto plan = fishing_manipulate(s, p, 1, 10.0);
  auto batch = fedsgd_on(s, plan.params, gt).update;
  auto single = fedsgd_on(s, plan.params, make_ground_truth(d, {1})).update;
  double fished = isolation_score(batch, single);
  EXPECT_GT(fished, 0.9);
  auto plain = isolation_score(fedsgd_on(s, p, gt).update, fedsgd_on(s, p, make_ground_truth(d, {1})).update);
  EXPECT_LT(plain, fished);
}

TEST(Fishing, OnlyTheHeadBiasChanges) {
  ModelSpec s = zoo::mlp2({1, 8, 8}, 10);
  Params p = build_model(s, 13);
  auto plan = fishing_manipulate(s, p, 2, 5.0);
  for (const auto& [n, v] : p) {
    if (n == "fc2.bias") continue;
    EXPECT_EQ(plan.params.at(n), v) << n;
  }
  EXPECT_EQ(plan.snapshot, p);
  for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(plan.params.at("fc2.bias")[c], c == 2 ? -5.0 : 5.0);
  auto zero = fishing_manipulate(s, p, 2, 0.0);
  EXPECT_EQ(zero.params, p);
  EXPECT_THROW(fishing_manipulate(s, p, 10, 1.0), std::out_of_range);
  EXPECT_THROW(fishing_manipulate(s, p, -1, 1.0), std::out_of_range);
  EXPECT_THROW(fishing_manipulate(s, p, 0, -1.0), std::invalid_argument);
}

TEST(Fishing, NoTargetSampleMeansAlmostNoGradient) {
  Dataset d = synth_dataset(64, 1, 8, 8, 2, 14);
  ModelSpec s = zoo::cnn_s(d.image_shape(), 2);
  Params p = build_model(s, 14);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; idx.size() < 8; ++i)
    if (d.labels[i] != 0) idx.push_back(i);
  auto gt = make_ground_truth(d, idx);
  auto plan = fishing_manipulate(s, p, 0, 10.0);
  EXPECT_LT(norm_of(fedsgd_on(s, plan.params, gt).update), 1e-3 * norm_of(fedsgd_on(s, p, gt).update));
}

TEST(IsolationScore, Basics) {
  Dataset d = synth_dataset(8, 1, 8, 8, 10, 15);
  ModelSpec s = zoo::mlp2(d.image_shape(), 10);
  Params p = build_model(s, 15);
  auto u = fedsgd_round(s, p, d, 2, 15).update;
  EXPECT_NEAR(isolation_score(u, u), 1.0, 1e-12);
  Update neg = u;
  for (auto& [n, v] : neg.tensors)
    for (double& e : v.vec()) e = -e;
  EXPECT_NEAR(isolation_score(u, neg), -1.0, 1e-12);
  Update zero = u;
  for (auto& [n, v] : zero.tensors) std::fill(v.vec().begin(), v.vec().end(), 0.0);
  EXPECT_THROW(isolation_score(u, zero), std::domain_error);
  Update fewer = u;
  fewer.tensors.erase("fc1.bias");
  EXPECT_THROW(isolation_score(u, fewer), std::invalid_argument);
}

TEST(Fishing, InvertingTheIsolatedSampleBeatsPlainOpGia) {
  Dataset d = synth_dataset(64, 1, 8, 8, 2, 11);
  ModelSpec s = zoo::cnn_s(d.image_shape(), 2);
  Params p = build_model(s, 11);
  std::vector<std::size_t> idx{0};
  for (std::size_t i = 0; idx.size() < 8; ++i)
    if (d.labels[i] != 0) idx.push_back(i);
  auto gt = make_ground_truth(d, idx);
  auto plan = fishing_manipulate(s, p, 0, 10.0);
  Target fished{s, plan.params, d.norm}, clean{s, p, d.norm};
  OpGiaConfig cfg;
  cfg.seed = 11;
  auto target_truth = make_ground_truth(d, {0});
  auto r = fishing_then_invert(fedsgd_on(s, plan.params, gt).update, fished, plan, cfg, &target_truth);
  auto plain = op_gia_attack(fedsgd_on(s, p, gt).update, clean, cfg, gt.labels, &gt);
  EXPECT_GT(r.metrics.mean_psnr(), plain.metrics.best_psnr());
}

TEST(Fishing, SingleSampleIsPlainOpGiaOnTheShiftedHead) {
  Dataset d = synth_dataset(16, 1, 8, 8, 10, 16);
  ModelSpec s = zoo::mlp2(d.image_shape(), 10);
  auto plan = fishing_manipulate(s, build_model(s, 16), 4, 3.0);
  Target t{s, plan.params, d.norm};
  auto gt = make_ground_truth(d, {4});
  auto u = fedsgd_on(s, plan.params, gt).update;
  OpGiaConfig cfg;
  cfg.seed = 16;
  cfg.iterations = 50;
  EXPECT_EQ(fishing_then_invert(u, t, plan, cfg).trajectory, op_gia_attack(u, t, cfg, {4}).trajectory);
}

TEST(Persistence, ImprintAndFishingArtifactsRoundTrip) {
  auto [client, calib] = split(8, 512, 17);
  ModelSpec s = zoo::mlp2(client.image_shape(), 10, ActivationKind::relu, 32);
  Params p = build_model(s, 17);
  auto im = build_imprint(s, p, 16, normalize(calib.images, calib.norm));
  auto f = tmp("imprint.giaa");
  save_imprint(f, im);
  ModelFile mf = load_model(f);
  ASSERT_TRUE(mf.spec.has_value());
  EXPECT_EQ(structural_hash(*mf.spec), structural_hash(im.spec));
  EXPECT_EQ(mf.params, im.params);
  auto mod = load_imprint_module(decode_bundle(read_file(f), kArtifactMagic, f.string()), f.string());
  EXPECT_EQ(mod.cutoffs, im.module.cutoffs);
  EXPECT_EQ(mod.pass_through, im.module.pass_through);

  auto plan = fishing_manipulate(s, p, 5, 20.0);
  auto g = tmp("fishing.giaa");
  save_fishing_plan(g, plan, s);
  auto back = load_fishing_plan(g, s);
  EXPECT_EQ(back.target_class, 5);
  EXPECT_EQ(back.beta, 20.0);
  EXPECT_EQ(back.params, plan.params);
  EXPECT_EQ(back.snapshot, plan.snapshot);
  EXPECT_THROW(load_fishing_plan(f, s), FormatError);
  std::filesystem::remove(f);
  std::filesystem::remove(g);
}

TEST(Fishing, TrainedTargetsAreNoHarderToFish) {
  Dataset d = synth_dataset(64, 1, 8, 8, 2, 11);
  ModelSpec s = zoo::cnn_s(d.image_shape(), 2);
  Params untrained = build_model(s, 11);
  Params trained = train_model(s, untrained, d, 10, 8, 0.05, 11);
  OpGiaConfig cfg;
  cfg.seed = 11;
  auto psnr_for = [&](const Params& p) {
    double acc = 0;
    for (std::size_t target : {0, 2, 4}) {
      std::vector<std::size_t> idx{target};
      for (std::size_t i = 0; idx.size() < 8; ++i)
        if (d.labels[i] != 0) idx.push_back(i);
      auto plan = fishing_manipulate(s, p, 0, 10.0);
      Target t{s, plan.params, d.norm};
      auto target_truth = make_ground_truth(d, {target});
      acc += fishing_then_invert(fedsgd_on(s, plan.params, make_ground_truth(d, idx)).update, t, plan, cfg, &target_truth)
                 .metrics.mean_psnr();
    }
    return acc / 3;
  };
  EXPECT_GE(psnr_for(trained), psnr_for(untrained));
}
