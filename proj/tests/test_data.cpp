#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "gialab/data.hpp"

using namespace gialab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("gialab-test-data-" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d / name;
}

// Records with label r % 10 and pixel byte (r * 7 + i) % 256.
std::string cifar_bytes(std::size_t records) {
  std::string b;
  for (std::size_t r = 0; r < records; ++r) {
    b.push_back(static_cast<char>(r % 10));
    for (std::size_t i = 0; i < 3072; ++i) b.push_back(static_cast<char>((r * 7 + i) % 256));
  }
  return b;
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary | std::ios::trunc) << s; }

}  // namespace

TEST(Cifar10, ZeroPixelsGiveZeros) {
  std::string b(kCifarRecord, '\0');
  b[0] = 3;
  auto p = scratch("zeros.bin");
  spit(p, b);
  Dataset d = load_cifar10(p);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.labels[0], 3);
  EXPECT_EQ(d.images, Tensor(Shape{1, 3, 32, 32}, 0.0));
}

TEST(Cifar10, SubsetKeepsOrder) {
  auto p = scratch("two.bin");
  spit(p, cifar_bytes(3));
  Dataset one = load_cifar10(p, {1});
  EXPECT_EQ(one.size(), 1u);
  EXPECT_EQ(one.labels[0], 1);
  Dataset rev = load_cifar10(p, {2, 0});
  EXPECT_EQ(rev.labels, (std::vector<int>{2, 0}));
}

TEST(Cifar10, MatchesByteOffsets) {
  auto p = scratch("bytes.bin");
  std::string raw = cifar_bytes(4);
  spit(p, raw);
  Dataset d = load_cifar10(p);
  // channel-major planes: record r, channel c, row y, col x at 1 + c*1024 + y*32 + x
  for (std::size_t r : {0, 3})
    for (std::size_t c : {0, 2})
      for (std::size_t y : {0, 17, 31})
        for (std::size_t x : {0, 5, 31}) {
          unsigned char byte = static_cast<unsigned char>(raw[r * kCifarRecord + 1 + c * 1024 + y * 32 + x]);
          EXPECT_DOUBLE_EQ(d.images[((r * 3 + c) * 32 + y) * 32 + x], byte / 255.0);
        }
  EXPECT_EQ(d.labels[3], 3);
}

TEST(Cifar10, RejectsBadFiles) {
  auto p = scratch("bad.bin");
  spit(p, cifar_bytes(1).substr(0, 3000));
  EXPECT_THROW(load_cifar10(p), std::exception);
  std::string b = cifar_bytes(1);
  b[0] = 10;
  spit(p, b);
  EXPECT_THROW(load_cifar10(p), std::exception);
  spit(p, cifar_bytes(2));
  EXPECT_THROW(load_cifar10(p, {2}), std::exception);
}

TEST(Synth, RoundRobinLabels) {
  Dataset d = synth_dataset(4, 1, 8, 8, 2, 1);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1, 0, 1}));
}

TEST(Synth, PixelsInUnitRange) {
  Dataset d = synth_dataset(50, 3, 16, 16, 10, 2);
  for (double v : d.images.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Synth, DeterministicPerSeed) {
  EXPECT_EQ(synth_dataset(10, 1, 8, 8, 10, 3).images, synth_dataset(10, 1, 8, 8, 10, 3).images);
  EXPECT_NE(synth_dataset(10, 1, 8, 8, 10, 3).images, synth_dataset(10, 1, 8, 8, 10, 4).images);
}

TEST(Synth, PrefixStable) {
  // image i depends only on (seed, i), so a bigger pool extends a smaller one
  Dataset a = synth_dataset(5, 1, 8, 8, 10, 9), b = synth_dataset(20, 1, 8, 8, 10, 9);
  for (std::size_t i = 0; i < a.images.size(); ++i) EXPECT_EQ(a.images[i], b.images[i]);
}

TEST(Synth, ClassesAreSeparable) {
  // nearest class mean on held-out images beats chance by a wide margin
  Dataset d = synth_dataset(400, 1, 8, 8, 4, 5);
  std::vector<std::vector<double>> mean(4, std::vector<double>(64, 0.0));
  for (std::size_t i = 0; i < 200; ++i)
    for (std::size_t p = 0; p < 64; ++p) mean[d.labels[i]][p] += d.images[i * 64 + p] / 50.0;
  int correct = 0;
  for (std::size_t i = 200; i < 400; ++i) {
    int best = 0;
    double bd = 1e300;
    for (int c = 0; c < 4; ++c) {
      double s = 0;
      for (std::size_t p = 0; p < 64; ++p) s += std::pow(d.images[i * 64 + p] - mean[c][p], 2);
      if (s < bd) bd = s, best = c;
    }
    correct += best == d.labels[i];
  }
  EXPECT_GT(correct, 120);
}

TEST(Normalize, RoundTripsAndUsesChannelStats) {
  NormStats n{{0.2, 0.5}, {0.1, 0.25}};
  CounterRng r(1);
  Tensor x = random_uniform({3, 2, 4, 4}, r, 0, 1);
  Tensor z = normalize(x, n);
  EXPECT_NEAR(z[0], (x[0] - 0.2) / 0.1, 1e-12);
  EXPECT_NEAR(z[16], (x[16] - 0.5) / 0.25, 1e-12);
  EXPECT_LT(max_abs_diff(denormalize(z, n), x), 1e-12);
  EXPECT_THROW(normalize(Tensor(Shape{1, 3, 2, 2}), n), std::exception);
}

TEST(Subset, PicksRowsInOrder) {
  Dataset d = synth_dataset(6, 1, 4, 4, 3, 1);
  Dataset s = subset(d, {4, 1});
  EXPECT_EQ(s.labels, (std::vector<int>{1, 1}));
  for (std::size_t p = 0; p < 16; ++p) {
    EXPECT_EQ(s.images[p], d.images[4 * 16 + p]);
    EXPECT_EQ(s.images[16 + p], d.images[16 + p]);
  }
  EXPECT_THROW(subset(d, {6}), std::exception);
}
