#include <gtest/gtest.h>

#include "gialab/fl.hpp"
#include "gialab/metrics.hpp"

using namespace gialab;

namespace {

Tensor rand_img(Shape s, std::uint64_t seed) {
  CounterRng r(seed);
  return random_uniform(std::move(s), r, 0, 1);
}

double psnr_loop(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(a[i] - b[i], 2);
  double mse = s / static_cast<double>(a.size());
  return mse < 1e-10 ? 100.0 : 10 * std::log10(1 / mse);
}

// Direct windowed SSIM: explicit 2-D Gaussian weights at every window position.
double ssim_direct(const Tensor& x, const Tensor& y) {
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::size_t n = std::min(H, W) >= 11 ? 11 : std::min<std::size_t>(std::min(H, W), 7);
  std::vector<double> w(n * n);
  double c = (n - 1) / 2.0, tot = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) tot += w[i * n + j] = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * 1.5 * 1.5));
  for (double& v : w) v /= tot;
  double sum = 0;
  for (std::size_t ch = 0; ch < C; ++ch) {
    double acc = 0;
    std::size_t cnt = 0;
    for (std::size_t r = 0; r + n <= H; ++r)
      for (std::size_t q = 0; q + n <= W; ++q) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            double a = x[(ch * H + r + i) * W + q + j], b = y[(ch * H + r + i) * W + q + j], k = w[i * n + j];
            mx += k * a;
            my += k * b;
            sxx += k * a * a;
            syy += k * b * b;
            sxy += k * a * b;
          }
        double vx = sxx - mx * mx, vy = syy - my * my, cv = sxy - mx * my;
        const double c1 = 1e-4, c2 = 9e-4;
        acc += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++cnt;
      }
    sum += acc / cnt;
  }
  return sum / C;
}

}  // namespace

TEST(Psnr, IdentityHitsTheCap) {
  Tensor x = rand_img({1, 8, 8}, 1);
  EXPECT_EQ(psnr_image(x, x), 100.0);
}

TEST(Psnr, KnownMse) {
  Tensor x(Shape{1, 4, 4}, 0.5), y(Shape{1, 4, 4}, 0.6);
  EXPECT_NEAR(psnr_image(x, y), 20.0, 1e-9);
}

TEST(Psnr, MatchesLoopOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Tensor a = rand_img({3, 8, 8}, s), b = rand_img({3, 8, 8}, 100 + s);
    EXPECT_NEAR(psnr_image(a, b), psnr_loop(a, b), 1e-9);
  }
}

TEST(Psnr, ShapeMismatch) {
  EXPECT_THROW(psnr(Tensor(Shape{1, 4, 4}), Tensor(Shape{1, 4, 5})), ShapeError);
}

TEST(Ssim, IdentityIsOne) {
  Tensor x = rand_img({3, 16, 16}, 2);
  EXPECT_NEAR(ssim_image(x, x), 1.0, 1e-12);
}

TEST(Ssim, InvertedImageScoresLower) {
  Tensor x = rand_img({1, 8, 8}, 3), y = x;
  for (double& v : y.vec()) v = 1 - v;
  EXPECT_LT(ssim_image(x, y), 1.0);
}

TEST(Ssim, MatchesDirectOracle) {
  for (Shape s : {Shape{1, 8, 8}, Shape{3, 16, 16}, Shape{1, 12, 9}, Shape{2, 5, 6}}) {
    for (std::uint64_t k = 0; k < 4; ++k) {
      Tensor a = rand_img(s, k), b = a;
      CounterRng r(50 + k);
      for (double& v : b.vec()) v = std::clamp(v + r.uniform(-0.3, 0.3), 0.0, 1.0);
      EXPECT_NEAR(ssim_image(a, b), ssim_direct(a, b), 1e-6) << shape_str(s);
    }
  }
}

TEST(Ssim, WindowShrinksForSmallImages) {
  EXPECT_EQ(ssim_window(32, 32), 11u);
  EXPECT_EQ(ssim_window(8, 8), 7u);
  EXPECT_EQ(ssim_window(5, 9), 5u);
}

TEST(Jaccard, IdentityIsOne) {
  Tensor x = rand_img({1, 8, 8}, 4);
  EXPECT_DOUBLE_EQ(jaccard_image(x, x), 1.0);
}

TEST(Jaccard, ComplementIsNearZero) {
  Tensor x = rand_img({1, 8, 8}, 5), y = x;
  for (double& v : y.vec()) v = 1 - v;
  EXPECT_LT(jaccard_image(x, y), 0.05);
}

TEST(Jaccard, MonotoneRescaleInvariant) {
  Tensor x = rand_img({1, 8, 8}, 6), y = rand_img({1, 8, 8}, 7), z = y;
  for (double& v : z.vec()) v = 0.1 + 0.5 * v * v;
  EXPECT_DOUBLE_EQ(jaccard_image(x, y), jaccard_image(x, z));
}

TEST(Rdlv, ZeroAtInitAndSubstitutionAtTruth) {
  Tensor x = rand_img({1, 8, 8}, 8), x0 = rand_img({1, 8, 8}, 9);
  double s0 = ssim_image(x, x0);
  EXPECT_NEAR(rdlv_image(x, x0, x0), 0.0, 1e-12);
  EXPECT_NEAR(rdlv_image(x, x, x0), (1 - s0) / s0, 1e-9);
}

TEST(Rdlv, IncreasesWithSsim) {
  Tensor x = rand_img({1, 8, 8}, 10), x0 = rand_img({1, 8, 8}, 11);
  double prev = -1e9, prev_ssim = -1e9;
  for (double t : {0.0, 0.3, 0.6, 0.9}) {
    Tensor r = x0;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = (1 - t) * x0[i] + t * x[i];
    double s = ssim_image(x, r), v = rdlv_image(x, r, x0);
    ASSERT_GT(s, prev_ssim);
    EXPECT_GT(v, prev);
    prev = v;
    prev_ssim = s;
  }
}

TEST(Metrics, BatchOrderInvariant) {
  Tensor a = rand_img({3, 1, 8, 8}, 12), b = rand_img({3, 1, 8, 8}, 13);
  auto m = evaluate(a, b);
  // swap images 0 and 2 in both batches
  auto swap = [](Tensor t) {
    for (std::size_t p = 0; p < 64; ++p) std::swap(t[p], t[128 + p]);
    return t;
  };
  auto n = evaluate(swap(a), swap(b));
  EXPECT_DOUBLE_EQ(m.mean_psnr(), n.mean_psnr());
  EXPECT_DOUBLE_EQ(m.mean_ssim(), n.mean_ssim());
  EXPECT_DOUBLE_EQ(m.mean_jaccard(), n.mean_jaccard());
}

TEST(Alignment, RecoversAPermutation) {
  Tensor a = rand_img({4, 1, 8, 8}, 14);
  Tensor b(a.shape());
  std::vector<std::size_t> perm{2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t p = 0; p < 64; ++p) b[perm[i] * 64 + p] = a[i * 64 + p];
  Tensor aligned = align_to_truth(a, b, {0, 0, 0, 0});
  EXPECT_EQ(aligned, a);
}

TEST(Alignment, HungarianIsOptimalOnSmallMatrices) {
  CounterRng r(15);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::vector<double>> w(5, std::vector<double>(5));
    for (auto& row : w)
      for (double& v : row) v = r.uniform(-1, 1);
    auto a = max_weight_assignment(w);
    double got = 0;
    for (std::size_t i = 0; i < 5; ++i) got += w[i][a[i]];
    std::vector<std::size_t> p{0, 1, 2, 3, 4};
    double best = -1e9;
    do {
      double s = 0;
      for (std::size_t i = 0; i < 5; ++i) s += w[i][p[i]];
      best = std::max(best, s);
    } while (std::next_permutation(p.begin(), p.end()));
    EXPECT_NEAR(got, best, 1e-12);
  }
}

TEST(GradientSimilarity, DiagonalOnesAndSymmetric) {
  Dataset d = synth_dataset(16, 1, 8, 8, 10, 1);
  ModelSpec s = zoo::mlp2({1, 8, 8}, 10);
  Params p = build_model(s, 1);
  auto gt = make_ground_truth(d, {0, 1, 2, 3});
  auto m = gradient_cosine_matrix(s, p, gt.inputs, gt.labels);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(m[i][i], 1.0, 1e-12);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m[i][j], m[j][i]);
  }
  EXPECT_THROW(gradient_cosine_matrix(s, p, take_rows(gt.inputs, {0}), {0}), std::invalid_argument);
}

TEST(GradientSimilarity, ZeroGradientNamesTheSample) {
  ModelSpec s = zoo::mlp2({1, 4, 4}, 2, ActivationKind::relu, 4);
  Params p = build_model(s, 1);
  for (auto& [n, t] : p) std::fill(t.vec().begin(), t.vec().end(), 0.0);
  // saturated softmax on class 0: sample 0 has an exactly zero gradient
  p.at("fc2.bias")[0] = 1000.0;
  try {
    gradient_cosine_matrix(s, p, Tensor(Shape{2, 1, 4, 4}, 0.0), {0, 1});
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("sample 0"), std::string::npos);
  }
}

TEST(GradientSimilarity, SameLabelBatchIsCloserToItsMember) {
  // all-same-label batch of 4 vs distinct labels, averaged over seeds
  double same = 0, distinct = 0;
  for (std::uint64_t seed : {11, 23, 37, 41, 53}) {
    Dataset d = synth_dataset(128, 1, 8, 8, 10, seed);
    ModelSpec s = zoo::mlp2({1, 8, 8}, 10);
    Params p = build_model(s, seed);
    auto g4 = make_ground_truth(d, sample_batch_with_duplicates(d, 4, 4, seed, 0));
    auto g0 = make_ground_truth(d, sample_batch_with_duplicates(d, 4, 0, seed, 0));
    same += batch_member_similarity(s, p, g4.inputs, g4.labels, 0);
    distinct += batch_member_similarity(s, p, g0.inputs, g0.labels, 0);
  }
  EXPECT_GT(same, distinct);
}

// Per-sample gradients of a trained model sit closer together. Measured as
// mean pairwise Euclidean distance; cosine similarity does not rise with
// training on this data.
TEST(GradientSimilarity, TrainedModelGradientsClusterTogether) {
  auto spread = [](const std::vector<std::vector<double>>& g) {
    double acc = 0;
    int n = 0;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = i + 1; j < g.size(); ++j, ++n) {
        double q = 0;
        for (std::size_t k = 0; k < g[i].size(); ++k) q += (g[i][k] - g[j][k]) * (g[i][k] - g[j][k]);
        acc += std::sqrt(q);
      }
    return acc / n;
  };
  for (std::uint64_t seed : {11, 23, 37, 41, 53}) {
    Dataset d = synth_dataset(128, 1, 8, 8, 10, seed);
    ModelSpec s = zoo::mlp2({1, 8, 8}, 10);
    Params p = build_model(s, seed);
    Params q = train_model(s, p, d, 30, 8, 0.05, seed);
    auto gt = make_ground_truth(d, sample_batch(d.size(), 8, seed, 0));
    EXPECT_LT(spread(per_sample_gradients(s, q, gt.inputs, gt.labels)), spread(per_sample_gradients(s, p, gt.inputs, gt.labels)))
        << "seed " << seed;
  }
}
