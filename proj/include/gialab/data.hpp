#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gialab/autodiff.hpp"
#include "gialab/serialize.hpp"
#include "gialab/tensor.hpp"

namespace gialab {

/// Per-channel normalization applied before images enter a model.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  static NormStats uniform(std::size_t channels, double m, double s) {
    return NormStats{std::vector<double>(channels, m), std::vector<double>(channels, s)};
  }
};

struct Dataset {
  std::string name;
  Tensor images;  // N x C x H x W in [0, 1]
  std::vector<int> labels;
  std::size_t classes = 0;
  NormStats norm;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
};

inline Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  ad::Graph g;
  ad::NoGradScope ng(g);
  return ad::gather_rows(g.constant(t), idx).value();
}

inline Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out{d.name, take_rows(d.images, idx), {}, d.classes, d.norm};
  for (std::size_t i : idx) out.labels.push_back(d.labels.at(i));
  return out;
}

namespace detail {
inline void check_norm(const NormStats& n, std::size_t c) {
  if (n.mean.size() != c || n.std.size() != c) throw ShapeError("normalization stats do not match channel count");
}
}  // namespace detail

inline Tensor normalize(const Tensor& x, const NormStats& n) {
  detail::check_norm(n, x.dim(1));
  Tensor out(x.shape());
  std::size_t c = x.dim(1), inner = x.size() / (x.dim(0) * c);
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t ch = (i / inner) % c;
    out[i] = (x[i] - n.mean[ch]) / n.std[ch];
  }
  return out;
}

/// Back to [0, 1] pixel space, clamped.
inline Tensor denormalize(const Tensor& x, const NormStats& n) {
  detail::check_norm(n, x.dim(1));
  Tensor out(x.shape());
  std::size_t c = x.dim(1), inner = x.size() / (x.dim(0) * c);
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t ch = (i / inner) % c;
    out[i] = std::clamp(x[i] * n.std[ch] + n.mean[ch], 0.0, 1.0);
  }
  return out;
}

/// Differentiable normalization of a [0,1]-space batch.
inline ad::Var normalize(ad::Var x, const NormStats& n) {
  ad::Graph& g = *x.graph;
  std::size_t c = x.shape().at(1);
  detail::check_norm(n, c);
  Tensor inv(Shape{c}), shift(Shape{c});
  for (std::size_t k = 0; k < c; ++k) {
    inv[k] = 1.0 / n.std[k];
    shift[k] = -n.mean[k] / n.std[k];
  }
  ad::Var scaled = ad::mul(x, ad::broadcast_channel(g.constant(inv), x.shape()));
  return ad::add_bias(scaled, g.constant(shift));
}

/// Lower and upper bounds of normalized pixel values, per element of a batch.
inline std::pair<Tensor, Tensor> normalized_box(const Shape& batch_shape, const NormStats& n) {
  Tensor lo(batch_shape, 0.0), hi(batch_shape, 1.0);
  return {normalize(lo, n), normalize(hi, n)};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 3073-byte records (label, then R, G, B planes of 32x32).

inline constexpr std::size_t kCifarRecord = 3073;

inline NormStats cifar10_norm() {
  return NormStats{{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
}

inline Dataset load_cifar10(const std::filesystem::path& path, const std::vector<std::size_t>& subset_idx = {}) {
  std::string bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
  }
  std::size_t records = bytes.size() / kCifarRecord;
  std::vector<std::size_t> idx = subset_idx;
  if (idx.empty()) {
    idx.resize(records);
    for (std::size_t i = 0; i < records; ++i) idx[i] = i;
  }
  Dataset d{"cifar10", Tensor(Shape{idx.size(), 3, 32, 32}), {}, 10, cifar10_norm()};
  for (std::size_t n = 0; n < idx.size(); ++n) {
    if (idx[n] >= records) {
      throw std::out_of_range(path.string() + ": subset index " + std::to_string(idx[n]) + " >= " + std::to_string(records));
    }
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + idx[n] * kCifarRecord);
    if (rec[0] > 9) throw FormatError(path.string() + ": record " + std::to_string(idx[n]) + " has label byte " + std::to_string(rec[0]));
    d.labels.push_back(rec[0]);
    for (std::size_t p = 0; p < 3072; ++p) d.images[n * 3072 + p] = rec[1 + p] / 255.0;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic blob images.

struct SynthOptions {
  double sigma_lo = 0.12;  // blob width range, as a fraction of the image side
  double sigma_hi = 0.30;
  double jitter = 0.12;  // per-image displacement of class prototype centres
  bool class_prototypes = true;
  std::string name = "synth";
};

/// Each channel is a sum of 3 Gaussian blobs, min-max rescaled to [0, 1].
/// Labels are assigned round-robin; blob centres scatter around per-class
/// prototypes so labels carry signal.
inline Dataset synth_dataset(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t classes,
                             std::uint64_t seed, const SynthOptions& opt = {}) {
  if (n == 0 || c == 0 || h == 0 || w == 0 || classes == 0) throw std::invalid_argument("synth_dataset: sizes must be positive");
  CounterRng root(seed);
  CounterRng proto_rng = root.derive(0);
  std::vector<double> proto(classes * c * 3 * 2);
  for (double& v : proto) v = proto_rng.uniform(0.15, 0.85);

  Dataset d{opt.name, Tensor(Shape{n, c, h, w}), {}, classes, NormStats::uniform(c, 0.5, 0.5)};
  double side = static_cast<double>(std::max(h, w));
  for (std::size_t i = 0; i < n; ++i) {
    int label = static_cast<int>(i % classes);
    d.labels.push_back(label);
    CounterRng r = root.derive(1 + i);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* img = d.images.data().data() + (i * c + ch) * h * w;
      std::fill(img, img + h * w, 0.0);
      for (std::size_t b = 0; b < 3; ++b) {
        double cy, cx;
        if (opt.class_prototypes) {
          std::size_t base = ((static_cast<std::size_t>(label) * c + ch) * 3 + b) * 2;
          cy = proto[base] + r.uniform(-opt.jitter, opt.jitter);
          cx = proto[base + 1] + r.uniform(-opt.jitter, opt.jitter);
        } else {
          cy = r.uniform(0.1, 0.9);
          cx = r.uniform(0.1, 0.9);
        }
        double sigma = r.uniform(opt.sigma_lo, opt.sigma_hi) * side;
        double amp = r.uniform(0.5, 1.0);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            double dy = static_cast<double>(y) + 0.5 - cy * static_cast<double>(h);
            double dx = static_cast<double>(x) + 0.5 - cx * static_cast<double>(w);
            img[y * w + x] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          }
      }
      auto [mn, mx] = std::minmax_element(img, img + h * w);
      double lo = *mn, span = *mx - *mn;
      for (std::size_t p = 0; p < h * w; ++p) img[p] = span > 0.0 ? (img[p] - lo) / span : 0.5;
    }
  }
  return d;
}

}  // namespace gialab
