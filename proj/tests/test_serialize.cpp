#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "gialab/serialize.hpp"

using namespace gialab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("gialab-test-serialize-" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
}

Params sample_params() {
  Params p = build_model(zoo::cnn_s({1, 8, 8}, 10), 3);
  p["fc.bias"][0] = -0.0;
  p["fc.bias"][1] = 1e-300;
  p["fc.bias"][2] = std::nextafter(1.0, 2.0);
  return p;
}

}  // namespace

TEST(Params, RoundTripIsBitIdentical) {
  Params p = sample_params();
  auto path = scratch("rt.giap");
  save_params(path, p);
  Params q = load_params(path);
  ASSERT_EQ(p.size(), q.size());
  for (const auto& [n, t] : p) {
    ASSERT_EQ(t.shape(), q.at(n).shape());
    EXPECT_EQ(0, std::memcmp(t.data().data(), q.at(n).data().data(), t.size() * sizeof(double))) << n;
  }
  EXPECT_TRUE(std::signbit(q.at("fc.bias")[0]));
}

TEST(Params, HeaderLayout) {
  Params p{{"w", Tensor(Shape{2}, std::vector<double>{1.0, -2.0})}};
  auto path = scratch("layout.giap");
  save_params(path, p);
  std::string b = slurp(path);
  ASSERT_GE(b.size(), 6u);
  EXPECT_EQ(b.substr(0, 4), "GIAP");
  EXPECT_EQ(static_cast<unsigned char>(b[4]) | (static_cast<unsigned char>(b[5]) << 8), kBundleVersion);
  // name len (4) + name (1) + rank (4) + dim (8) + 2 values (16)
  EXPECT_EQ(b.size(), 6u + 4 + 1 + 4 + 8 + 16);
  double v;
  std::memcpy(&v, b.data() + b.size() - 8, 8);
  EXPECT_EQ(v, -2.0);
}

TEST(Params, TruncatedFileFailsWithoutPartialResult) {
  auto path = scratch("trunc.giap");
  save_params(path, sample_params());
  std::string b = slurp(path);
  for (std::size_t cut : {b.size() - 1, b.size() / 2, std::size_t{5}}) {
    spit(path, b.substr(0, cut));
    EXPECT_THROW(load_params(path), FormatError) << cut;
  }
}

TEST(Params, UnknownVersionIsAMismatch) {
  auto path = scratch("ver.giap");
  save_params(path, sample_params());
  std::string b = slurp(path);
  b[4] = static_cast<char>(kBundleVersion + 1);
  spit(path, b);
  try {
    load_params(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version mismatch"), std::string::npos);
  }
}

TEST(Params, BadMagicAndMissingFile) {
  auto path = scratch("magic.giap");
  spit(path, "NOPE\x01\x00");
  EXPECT_THROW(load_params(path), FormatError);
  EXPECT_THROW(load_params(scratch("does-not-exist.giap")), FormatError);
}

TEST(Params, DuplicateRecordRejected) {
  std::string one = encode_bundle({{"a", Tensor(Shape{1}, 1.0)}}, kParamsMagic);
  std::string dup = one + one.substr(6);
  EXPECT_THROW(decode_bundle(dup, kParamsMagic), FormatError);
}

TEST(ModelFileFormat, EmbedsTheArchitecture) {
  ModelSpec s = zoo::mlp2({1, 8, 8}, 10, ActivationKind::sigmoid, 16);
  Params p = build_model(s, 4);
  auto path = scratch("model.giap");
  save_model(path, s, p);
  ModelFile mf = load_model(path);
  ASSERT_TRUE(mf.spec.has_value());
  EXPECT_EQ(structural_hash(*mf.spec), structural_hash(s));
  EXPECT_EQ(mf.params, p);
}

TEST(ModelFileFormat, PlainParamsHaveNoSpec) {
  Params p = sample_params();
  auto path = scratch("plain.giap");
  save_params(path, p);
  ModelFile mf = load_model(path);
  EXPECT_FALSE(mf.spec.has_value());
  EXPECT_EQ(mf.params, p);
}

TEST(TextRecords, RoundTrip) {
  std::string s = "line one\nline two with , and \"quotes\"\n";
  EXPECT_EQ(tensor_text(text_tensor(s)), s);
}
