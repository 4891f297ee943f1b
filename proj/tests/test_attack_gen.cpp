#include <gtest/gtest.h>

#include <chrono>
#include <unistd.h>

#include "gialab/attack_gen.hpp"

using namespace gialab;

namespace {

std::pair<Dataset, Dataset> split(std::size_t client_n, std::size_t aux_n, std::uint64_t seed) {
  Dataset pool = synth_dataset(client_n + aux_n, 1, 8, 8, 10, seed);
  std::vector<std::size_t> ci, ai;
  for (std::size_t i = 0; i < pool.size(); ++i) (i < client_n ? ci : ai).push_back(i);
  return {subset(pool, ci), subset(pool, ai)};
}

Target mlp(const Dataset& d, ActivationKind act, std::size_t hidden, std::uint64_t seed) {
  Target t{zoo::mlp2(d.image_shape(), d.classes, act, hidden), {}, d.norm};
  t.params = build_model(t.spec, seed);
  return t;
}

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("gialab-gen-" + std::to_string(::getpid()) + "-" + name);
}

// Shared decoder so the slow pretraining happens once.
const PretrainedDecoder& decoder11() {
  static const PretrainedDecoder d = pretrain_decoder(split(64, 512, 11).second, GeneratorSpec{}, DecoderTraining{}, 11);
  return d;
}

}  // namespace

TEST(Generator, ShapeRangeAndDeterminism) {
  GeneratorSpec gs;
  Params p = build_generator(gs, 3);
  CounterRng r(1);
  Tensor z = random_normal({2, gs.latent_dim}, r, 0, 1);
  Tensor x = generate_values(gs, p, z, {0, 7});
  EXPECT_EQ(x.shape(), (Shape{2, 1, 8, 8}));
  for (double v : x.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(x, generate_values(gs, build_generator(gs, 3), z, {0, 7}));
  EXPECT_NE(x, generate_values(gs, p, z, {1, 7}));
}

TEST(Generator, UnconditionedAndLargerOutputs) {
  GeneratorSpec gs;
  gs.conditioning = Conditioning::none;
  gs.output = {3, 16, 12};
  Params p = build_generator(gs, 1);
  EXPECT_EQ(p.count("emb.weight"), 0u);
  EXPECT_EQ(generate_values(gs, p, Tensor(Shape{1, gs.latent_dim}), {}).shape(), (Shape{1, 3, 16, 12}));
}

TEST(Generator, Validation) {
  GeneratorSpec gs;
  gs.latent_dim = 0;
  EXPECT_THROW(gs.validate(), std::invalid_argument);
  gs = {};
  gs.output = {1, 6, 8};
  EXPECT_THROW(gs.validate(), ShapeError);
  gs = {};
  EXPECT_THROW(generate_values(gs, build_generator(gs, 1), Tensor(Shape{1, 3}), {0}), ShapeError);
  EXPECT_THROW(generate_values(gs, build_generator(gs, 1), Tensor(Shape{1, 16}), {10}), std::out_of_range);
}

TEST(Decoder, ConstantDataIsReproduced) {
  Dataset d = synth_dataset(1, 1, 8, 8, 10, 2);
  Dataset same = subset(d, std::vector<std::size_t>(40, 0));
  DecoderTraining tr;
  tr.epochs = 400;
  tr.lr = 1e-2;
  auto dec = pretrain_decoder(same, GeneratorSpec{}, tr, 2);
  EXPECT_LT(dec.holdout_mse, 1e-3);
  EXPECT_LT(dec.train_curve.back(), dec.train_curve.front());
}

TEST(Decoder, HeldOutErrorAndDeterminism) {
  const auto& dec = decoder11();
  EXPECT_LT(dec.holdout_mse, 0.02);
  EXPECT_LT(dec.holdout_mse, 5 * dec.train_mse);
  DecoderTraining tr;
  tr.epochs = 2;
  Dataset aux = split(8, 64, 11).second;
  auto a = pretrain_decoder(aux, GeneratorSpec{}, {2, 32, 3e-3, 0.2, 1.0, 64}, 5);
  auto b = pretrain_decoder(aux, GeneratorSpec{}, {2, 32, 3e-3, 0.2, 1.0, 64}, 5);
  EXPECT_EQ(a.generator, b.generator);
  EXPECT_EQ(a.train_curve, b.train_curve);
}

TEST(Decoder, NonConvergenceReportsTheCurve) {
  Dataset aux = split(8, 64, 11).second;
  DecoderTraining tr;
  tr.epochs = 2;
  tr.max_holdout_mse = 1e-9;
  try {
    pretrain_decoder(aux, GeneratorSpec{}, tr, 1);
    FAIL();
  } catch (const TrainingFailed& e) {
    EXPECT_EQ(e.curve.size(), 2u);
    EXPECT_NE(std::string(e.what()).find("training curve"), std::string::npos);
  }
  EXPECT_THROW(pretrain_decoder(synth_dataset(8, 1, 16, 16, 10, 1), GeneratorSpec{}, tr, 1), ShapeError);
}

TEST(LatentZ, SemanticButBelowGeneratorParams) {
  auto [client, aux] = split(64, 512, 11);
  Target t = mlp(client, ActivationKind::sigmoid, 64, 11);
  auto rd = fedsgd_round(t.spec, t.params, client, 1, 11);
  OpGiaConfig cfg;
  cfg.seed = 11;
  cfg.lr = 0.01;
  auto z = latent_z_attack(rd.update, t, decoder11(), rd.truth.labels, cfg, &rd.truth);
  auto w = gen_w_attack(rd.update, t, GeneratorSpec{}, rd.truth.labels, cfg, &rd.truth);
  EXPECT_EQ(z.note, "semantic-level");
  EXPECT_GT(z.metrics.mean_ssim(), 0.3);
  EXPECT_LT(z.metrics.mean_ssim(), w.metrics.mean_ssim());
}

TEST(LatentZ, NoiseGradientStaysInTheDecoderRange) {
  auto [client, aux] = split(64, 512, 11);
  Target t = mlp(client, ActivationKind::sigmoid, 64, 11);
  auto rd = fedsgd_round(t.spec, t.params, client, 1, 11);
  Update noise = rd.update;
  CounterRng nr(99);
  for (auto& [name, v] : noise.tensors) {
    double sd = norm2(v.data()) / std::sqrt(static_cast<double>(v.size()));
    for (double& e : v.data()) e = nr.normal(0.0, sd);
  }
  OpGiaConfig cfg;
  cfg.seed = 11;
  cfg.lr = 0.01;
  cfg.iterations = 500;
  auto r = latent_z_attack(noise, t, decoder11(), rd.truth.labels, cfg);
  EXPECT_TRUE(std::isfinite(r.objective));
  for (double v : r.reconstruction.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(LatentZ, MismatchedDecoderIsWorse) {
  auto [client, aux] = split(64, 512, 11);
  SynthOptions so;
  so.class_prototypes = false;
  so.sigma_lo = 0.05;
  so.sigma_hi = 0.10;
  Dataset shifted = synth_dataset(512, 1, 8, 8, 10, 1011, so);
  DecoderTraining tr;
  tr.max_holdout_mse = 1.0;
  auto bad = pretrain_decoder(shifted, GeneratorSpec{}, tr, 11);
  Target t = mlp(client, ActivationKind::sigmoid, 64, 11);
  OpGiaConfig cfg;
  cfg.seed = 11;
  cfg.lr = 0.01;
  cfg.iterations = 1000;
  double good_ssim = 0, bad_ssim = 0;
  for (std::uint64_t round = 0; round < 3; ++round) {
    auto rd = fedsgd_round(t.spec, t.params, client, 1, 11, round);
    good_ssim += latent_z_attack(rd.update, t, decoder11(), rd.truth.labels, cfg, &rd.truth).metrics.mean_ssim();
    bad_ssim += latent_z_attack(rd.update, t, bad, rd.truth.labels, cfg, &rd.truth).metrics.mean_ssim();
  }
  EXPECT_LT(bad_ssim, good_ssim);
}

TEST(LatentZ, Preconditions) {
  Dataset d = synth_dataset(8, 1, 16, 16, 10, 1);
  Target t = mlp(d, ActivationKind::sigmoid, 16, 1);
  auto rd = fedsgd_round(t.spec, t.params, d, 1, 1);
  EXPECT_THROW(latent_z_attack(rd.update, t, decoder11(), rd.truth.labels, OpGiaConfig{}), ShapeError);
  Dataset d8 = synth_dataset(8, 1, 8, 8, 10, 1);
  Target t8 = mlp(d8, ActivationKind::sigmoid, 16, 1);
  auto rd8 = fedsgd_round(t8.spec, t8.params, d8, 1, 1);
  EXPECT_THROW(latent_z_attack(rd8.update, t8, decoder11(), {0, 1}, OpGiaConfig{}), std::invalid_argument);
}

TEST(GenW, SigmoidTargetsLeakAndReluTargetsDoNot) {
  auto ssim_for = [](ActivationKind act, double tv) {
    Dataset d = synth_dataset(64, 1, 8, 8, 10, 11);
    Target t = mlp(d, act, 64, 11);
    t.params = train_model(t.spec, t.params, d, 30, 8, 0.05, 11);
    auto rd = fedsgd_round(t.spec, t.params, d, 1, 11);
    OpGiaConfig cfg;
    cfg.seed = 11;
    cfg.distance = Distance::l2;
    cfg.tv_weight = tv;
    cfg.lr = 0.01;
    return gen_w_attack(rd.update, t, GeneratorSpec{}, rd.truth.labels, cfg, &rd.truth).metrics.mean_ssim();
  };
  double sig = ssim_for(ActivationKind::sigmoid, 1e-2), relu = ssim_for(ActivationKind::relu, 1e-2);
  EXPECT_GT(sig, 0.6);
  EXPECT_GT(sig - relu, 0.2);
  EXPECT_GT(ssim_for(ActivationKind::sigmoid, 0.0), relu);
}

TEST(Locality, PreactivationsMostlyInsideTheLinearRange) {
  Dataset d = synth_dataset(64, 1, 8, 8, 10, 11);
  Tensor x = normalize(d.images, d.norm);
  for (ActivationKind act : {ActivationKind::sigmoid, ActivationKind::relu}) {
    Target t = mlp(d, act, 64, 11);
    EXPECT_GE(preactivation_fraction_within(t.spec, t.params, x), 0.9);
  }
}

TEST(Inversion, MemorizesARepeatedBatch) {
  Dataset d = synth_dataset(1, 1, 8, 8, 10, 3);
  Dataset same = subset(d, std::vector<std::size_t>(64, 0));
  Target t = mlp(d, ActivationKind::relu, 16, 3);
  InversionModel arch;
  arch.hidden = {32};
  InversionTraining tr;
  tr.epochs = 60;
  tr.lr = 1e-2;
  auto inv = train_inversion_model(same, t, 1, arch, tr, 3);
  EXPECT_LT(inv.train_curve.back(), 1e-3);
  auto rd = fedsgd_on(t.spec, t.params, make_ground_truth(d, {0}));
  auto r = invert_with_model(inv, rd.update, t.spec, &rd.truth);
  EXPECT_GT(r.metrics.mean_psnr(), 30.0);
}

TEST(Inversion, BeatsTheMeanImageAndIsFast) {
  auto [client, aux] = split(64, 400, 23);
  Target t = mlp(client, ActivationKind::relu, 16, 23);
  InversionModel arch;
  arch.hidden = {128};
  InversionTraining tr;
  tr.epochs = 15;
  auto inv = train_inversion_model(aux, t, 1, arch, tr, 23);
  // epoch-average loss falls, allowing small minibatch noise
  for (std::size_t e = 1; e < inv.train_curve.size(); ++e) EXPECT_LT(inv.train_curve[e], inv.train_curve[e - 1] * 1.05);
  EXPECT_LT(inv.train_curve.back(), inv.train_curve.front());

  Tensor mean_img(Shape{1, 1, 8, 8});
  for (std::size_t i = 0; i < aux.size(); ++i)
    for (std::size_t p = 0; p < 64; ++p) mean_img[p] += aux.images[i * 64 + p] / static_cast<double>(aux.size());
  double model = 0, base = 0;
  for (std::uint64_t r = 0; r < 6; ++r) {
    auto rd = fedsgd_round(t.spec, t.params, client, 1, 23, r);
    model += invert_with_model(inv, rd.update, t.spec, &rd.truth).metrics.mean_psnr();
    base += psnr_image(detail::image_at(rd.truth.pixels, 0), detail::image_at(mean_img, 0));
  }
  EXPECT_GT(model, base);

  auto rd = fedsgd_round(t.spec, t.params, client, 1, 23);
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 10; ++i) invert_with_model(inv, rd.update, t.spec);
  double one_pass = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 10;
  OpGiaConfig cfg;
  cfg.seed = 23;
  auto op = op_gia_attack(rd.update, t, cfg, rd.truth.labels);
  EXPECT_LT(one_pass, 0.01 * op.runtime_seconds);
}

TEST(Inversion, ShapeMismatchesAreErrors) {
  Dataset d = synth_dataset(32, 1, 8, 8, 10, 4);
  Target t = mlp(d, ActivationKind::relu, 16, 4);
  InversionModel arch;
  arch.hidden = {8};
  InversionTraining tr;
  tr.epochs = 1;
  auto inv = train_inversion_model(d, t, 1, arch, tr, 4);
  Target wide = mlp(d, ActivationKind::relu, 32, 4);
  auto rd = fedsgd_round(wide.spec, wide.params, d, 1, 4);
  EXPECT_THROW(invert_with_model(inv, rd.update, wide.spec), ShapeError);
  auto rd2 = fedsgd_round(t.spec, t.params, d, 2, 4);
  EXPECT_THROW(invert_with_model(inv, rd2.update, t.spec), ShapeError);
  EXPECT_THROW(train_inversion_model(d, t, 33, arch, tr, 4), std::invalid_argument);
}

TEST(Inversion, LongGradientsAreProjected) {
  Dataset d = synth_dataset(16, 1, 8, 8, 10, 5);
  Target t = mlp(d, ActivationKind::relu, 64, 5);
  InversionModel arch;
  arch.hidden = {8};
  InversionTraining tr;
  tr.epochs = 1;
  auto inv = train_inversion_model(d, t, 1, arch, tr, 5);
  EXPECT_EQ(inv.gradient_dim, 64u * 64 + 64 + 10 * 64 + 10);
  EXPECT_EQ(inv.projected_dim, InversionModel::kMaxProjected);
}

TEST(Persistence, DecoderAndInversionRoundTrip) {
  const auto& dec = decoder11();
  auto f = tmp("dec.giag");
  save_decoder(f, dec);
  auto back = load_decoder(f);
  EXPECT_EQ(back.generator, dec.generator);
  EXPECT_EQ(back.encoder, dec.encoder);
  EXPECT_EQ(back.spec.latent_dim, dec.spec.latent_dim);
  EXPECT_EQ(back.spec.output, dec.spec.output);

  Dataset d = synth_dataset(16, 1, 8, 8, 10, 6);
  Target t = mlp(d, ActivationKind::relu, 64, 6);
  InversionModel arch;
  arch.hidden = {8, 4};
  InversionTraining tr;
  tr.epochs = 1;
  auto inv = train_inversion_model(d, t, 2, arch, tr, 6);
  auto g = tmp("inv.giag");
  save_inversion_model(g, inv);
  auto inv2 = load_inversion_model(g);
  auto rd = fedsgd_round(t.spec, t.params, d, 2, 6);
  EXPECT_EQ(invert_with_model(inv, rd.update, t.spec).reconstruction, invert_with_model(inv2, rd.update, t.spec).reconstruction);
  EXPECT_EQ(inv2.hidden, inv.hidden);
  std::filesystem::remove(f);
  std::filesystem::remove(g);
  EXPECT_THROW(load_decoder(g), std::exception);
}
