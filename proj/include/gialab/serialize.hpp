#pragma once

// Binary tensor-bundle files:
//   magic[4] | u16 version | records...
//   record = u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 values (little-endian)
// "GIAP" holds model parameters, "GIAG" generator / inversion models,
// "GIAA" attack artifacts (fishing plans, imprint modules).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gialab/model.hpp"

namespace gialab {

inline constexpr std::uint16_t kBundleVersion = 1;
inline constexpr std::string_view kParamsMagic = "GIAP";
inline constexpr std::string_view kGeneratorMagic = "GIAG";
inline constexpr std::string_view kArtifactMagic = "GIAA";

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "bundle I/O assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) {
    if (b_.size() - pos_ < n) throw FormatError(path_ + ": truncated at byte " + std::to_string(pos_));
  }
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_bundle(const NamedTensors& tensors, std::string_view magic) {
  std::string out(magic);
  detail::put<std::uint16_t>(out, kBundleVersion);
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(out, d);
    for (double v : t.data()) detail::put<double>(out, v);
  }
  return out;
}

inline NamedTensors decode_bundle(const std::string& bytes, std::string_view magic, const std::string& origin = "<bundle>") {
  detail::Reader r(bytes, origin);
  std::string m = r.get_bytes(4);
  if (m != magic) throw FormatError(origin + ": bad magic '" + m + "', expected '" + std::string(magic) + "'");
  auto version = r.get<std::uint16_t>();
  if (version != kBundleVersion) {
    throw FormatError(origin + ": version mismatch: file has " + std::to_string(version) + ", reader supports " +
                      std::to_string(kBundleVersion));
  }
  NamedTensors out;
  while (!r.done()) {
    auto len = r.get<std::uint32_t>();
    std::string name = r.get_bytes(len);
    auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError(origin + ": implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (1ULL << 32)) throw FormatError(origin + ": bad dimension in " + name);
      shape.push_back(static_cast<std::size_t>(d));
    }
    std::vector<double> values(numel(shape));
    for (double& v : values) v = r.get<double>();
    if (!out.emplace(name, Tensor(shape, std::move(values))).second) {
      throw FormatError(origin + ": duplicate record " + name);
    }
  }
  return out;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void save_params(const std::filesystem::path& path, const Params& params, std::string_view magic = kParamsMagic) {
  write_file_atomic(path, encode_bundle(params, magic));
}

inline Params load_params(const std::filesystem::path& path, std::string_view magic = kParamsMagic) {
  return decode_bundle(read_file(path), magic, path.string());
}

// Text stored as one byte per element, so a bundle can carry its model spec.
inline Tensor text_tensor(const std::string& text) {
  std::vector<double> v(text.begin(), text.end());
  if (v.empty()) v.push_back(0.0);
  Shape shape{v.size()};
  return Tensor(std::move(shape), std::move(v));
}

inline std::string tensor_text(const Tensor& t) {
  std::string s;
  for (double v : t.data()) {
    if (v < 0.0 || v > 255.0 || v != std::floor(v)) throw FormatError("text record holds a non-byte value");
    if (v != 0.0) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

inline constexpr const char* kSpecRecord = "model/spec";

struct ModelFile {
  std::optional<ModelSpec> spec;  // absent for bare parameter files
  Params params;
};

/// Parameters plus the spec text that describes them.
inline void save_model(const std::filesystem::path& path, const ModelSpec& spec, const Params& params) {
  check_params(spec, params);
  NamedTensors b = params;
  b[kSpecRecord] = text_tensor(to_text(spec));
  write_file_atomic(path, encode_bundle(b, kParamsMagic));
}

/// Reads a GIAP file, or the "params/" records of a GIAA artifact.
inline ModelFile load_model(const std::filesystem::path& path) {
  std::string bytes = read_file(path);
  std::string magic = bytes.substr(0, 4);
  ModelFile mf;
  NamedTensors b;
  if (magic == kArtifactMagic) {
    for (auto& [k, v] : decode_bundle(bytes, kArtifactMagic, path.string())) {
      if (k.rfind("params/", 0) == 0) mf.params[k.substr(7)] = v;
      else if (k == kSpecRecord) b[k] = v;
    }
  } else {
    b = decode_bundle(bytes, kParamsMagic, path.string());
  }
  auto it = b.find(kSpecRecord);
  if (it != b.end()) {
    mf.spec = parse_spec(tensor_text(it->second));
    b.erase(it);
  }
  if (magic != kArtifactMagic) mf.params = std::move(b);
  if (mf.spec) check_params(*mf.spec, mf.params);
  return mf;
}

}  // namespace gialab
