#pragma once

// Reconstruction quality metrics (all in [0,1] pixel space) and
// gradient-similarity analysis.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "gialab/model.hpp"
#include "gialab/tensor.hpp"

namespace gialab {

inline constexpr double kPsnrCap = 100.0;

namespace detail {

inline void require_images(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() != 3 && a.rank() != 4) throw ShapeError(std::string(op) + ": expected C,H,W or B,C,H,W, got " + shape_str(a.shape()));
}

inline Tensor image_at(const Tensor& batch, std::size_t i) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  std::size_t n = numel(s);
  return Tensor(s, std::vector<double>(batch.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                                       batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n)));
}

template <typename F>
std::vector<double> per_image(const char* op, const Tensor& a, const Tensor& b, F f) {
  require_images(op, a, b);
  if (a.rank() == 3) return {f(a, b)};
  std::vector<double> out;
  for (std::size_t i = 0; i < a.dim(0); ++i) out.push_back(f(image_at(a, i), image_at(b, i)));
  return out;
}

}  // namespace detail

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// 10 log10(1 / MSE) for one C,H,W image; 100 dB when MSE < 1e-10.
inline double psnr_image(const Tensor& x, const Tensor& y) {
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - y[i]) * (x[i] - y[i]);
  double mse = se / static_cast<double>(x.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline std::vector<double> psnr(const Tensor& x, const Tensor& y) {
  return detail::per_image("psnr", x, y, psnr_image);
}

/// SSIM window side: 11 when the image allows it, otherwise min(side, 7).
inline std::size_t ssim_window(std::size_t h, std::size_t w) {
  std::size_t side = std::min(h, w);
  return side >= 11 ? 11 : std::min<std::size_t>(side, 7);
}

inline std::vector<double> gaussian_kernel_1d(std::size_t n, double sigma = 1.5) {
  std::vector<double> k(n);
  double c = (static_cast<double>(n) - 1.0) / 2.0, s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (k[i] = std::exp(-(static_cast<double>(i) - c) * (static_cast<double>(i) - c) / (2 * sigma * sigma)));
  for (double& v : k) v /= s;
  return k;
}

/// Mean local SSIM over valid window positions, averaged over channels.
/// Gaussian window sigma 1.5, C1 = 0.01^2, C2 = 0.03^2.
inline double ssim_image(const Tensor& x, const Tensor& y) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::size_t n = ssim_window(H, W);
  auto k = gaussian_kernel_1d(n);
  std::size_t ho = H - n + 1, wo = W - n + 1;

  // Separable filter: rows first, then columns.
  auto filter = [&](const std::vector<double>& img) {
    std::vector<double> tmp(H * wo), out(ho * wo);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < wo; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += k[j] * img[r * W + c + j];
        tmp[r * wo + c] = s;
      }
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += k[i] * tmp[(r + i) * wo + c];
        out[r * wo + c] = s;
      }
    return out;
  };

  double total = 0.0;
  for (std::size_t ch = 0; ch < C; ++ch) {
    std::vector<double> a(x.data().begin() + static_cast<std::ptrdiff_t>(ch * H * W),
                          x.data().begin() + static_cast<std::ptrdiff_t>((ch + 1) * H * W));
    std::vector<double> b(y.data().begin() + static_cast<std::ptrdiff_t>(ch * H * W),
                          y.data().begin() + static_cast<std::ptrdiff_t>((ch + 1) * H * W));
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    auto ma = filter(a), mb = filter(b), saa = filter(aa), sbb = filter(bb), sab = filter(ab);
    double acc = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
      acc += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(ma.size());
  }
  return total / static_cast<double>(C);
}

inline std::vector<double> ssim(const Tensor& x, const Tensor& y) {
  return detail::per_image("ssim", x, y, ssim_image);
}

/// Jaccard index of the above-median pixel sets (pixel intensity = channel mean).
inline double jaccard_image(const Tensor& x, const Tensor& y) {
  std::size_t C = x.dim(0), P = x.size() / C;
  auto mask = [&](const Tensor& t) {
    std::vector<double> inten(P, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) inten[p] += t[c * P + p] / static_cast<double>(C);
    std::vector<double> sorted = inten;
    std::sort(sorted.begin(), sorted.end());
    double med = P % 2 ? sorted[P / 2] : 0.5 * (sorted[P / 2 - 1] + sorted[P / 2]);
    std::vector<char> m(P);
    for (std::size_t p = 0; p < P; ++p) m[p] = inten[p] > med;
    return m;
  };
  auto a = mask(x), b = mask(y);
  std::size_t inter = 0, uni = 0;
  for (std::size_t p = 0; p < P; ++p) {
    inter += a[p] && b[p];
    uni += a[p] || b[p];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline std::vector<double> jaccard(const Tensor& x, const Tensor& y) {
  return detail::per_image("jaccard", x, y, jaccard_image);
}

/// (SSIM(x, recon) - SSIM(x, init)) / SSIM(x, init).
inline double rdlv_image(const Tensor& x, const Tensor& recon, const Tensor& init) {
  double s0 = ssim_image(x, init);
  if (std::abs(s0) < 1e-12) throw std::domain_error("rdlv: SSIM(x, init) is zero");
  return (ssim_image(x, recon) - s0) / s0;
}

inline std::vector<double> rdlv(const Tensor& x, const Tensor& recon, const Tensor& init) {
  detail::require_images("rdlv", x, recon);
  detail::require_images("rdlv", x, init);
  if (x.rank() == 3) return {rdlv_image(x, recon, init)};
  std::vector<double> out;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    out.push_back(rdlv_image(detail::image_at(x, i), detail::image_at(recon, i), detail::image_at(init, i)));
  }
  return out;
}

struct MetricSet {
  std::vector<double> psnr, ssim, jaccard, rdlv;

  double mean_psnr() const { return mean_of(psnr); }
  double mean_ssim() const { return mean_of(ssim); }
  double mean_jaccard() const { return mean_of(jaccard); }
  double mean_rdlv() const { return mean_of(rdlv); }
  double best_psnr() const { return psnr.empty() ? 0.0 : *std::max_element(psnr.begin(), psnr.end()); }
};

/// Maximum-weight assignment (Hungarian method, O(n^3)); returns
/// assign[row] = column.
inline std::vector<std::size_t> max_weight_assignment(const std::vector<std::vector<double>>& w) {
  std::size_t n = w.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1), v(n + 1);
  std::vector<std::size_t> p(n + 1), way(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = -w[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

/// Reorders reconstructions so each ground-truth image is paired with the
/// same-label reconstruction that maximizes total PSNR.
inline Tensor align_to_truth(const Tensor& truth, const Tensor& recon, const std::vector<int>& labels) {
  detail::require_images("align_to_truth", truth, recon);
  std::size_t B = truth.dim(0);
  std::vector<std::vector<double>> w(B, std::vector<double>(B));
  for (std::size_t i = 0; i < B; ++i) {
    Tensor ti = detail::image_at(truth, i);
    for (std::size_t j = 0; j < B; ++j) {
      w[i][j] = labels[i] == labels[j] ? psnr_image(ti, detail::image_at(recon, j)) : -1e6;
    }
  }
  auto assign = max_weight_assignment(w);
  Tensor out(recon.shape());
  std::size_t n = recon.size() / B;
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(recon.data().begin() + static_cast<std::ptrdiff_t>(assign[i] * n), n,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

/// Per-image metrics of a reconstruction against the truth; `init` enables RDLV.
inline MetricSet evaluate(const Tensor& truth, const Tensor& recon, const Tensor* init = nullptr) {
  MetricSet m;
  m.psnr = psnr(truth, recon);
  m.ssim = ssim(truth, recon);
  m.jaccard = jaccard(truth, recon);
  if (init) {
    try {
      m.rdlv = rdlv(truth, recon, *init);
    } catch (const std::domain_error&) {
      m.rdlv.assign(m.psnr.size(), std::numeric_limits<double>::quiet_NaN());
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Gradient similarity

inline std::vector<double> flatten(const NamedTensors& t, const std::vector<std::string>& order) {
  std::vector<double> out;
  for (const auto& n : order) {
    const Tensor& v = t.at(n);
    out.insert(out.end(), v.data().begin(), v.data().end());
  }
  return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine: zero-norm vector");
  return dot(a, b) / (na * nb);
}

/// Flattened per-sample parameter gradients.
inline std::vector<std::vector<double>> per_sample_gradients(const ModelSpec& spec, const Params& params,
                                                             const Tensor& inputs, const std::vector<int>& labels) {
  auto names = param_names(spec);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Tensor xi = detail::image_at(inputs, i);
    Shape s = xi.shape();
    s.insert(s.begin(), 1);
    out.push_back(flatten(loss_and_grads(spec, params, xi.reshaped(s), {labels[i]}).grads, names));
  }
  return out;
}

/// Pairwise cosine similarity of per-sample gradients.
inline std::vector<std::vector<double>> gradient_cosine_matrix(const ModelSpec& spec, const Params& params,
                                                               const Tensor& inputs, const std::vector<int>& labels) {
  if (labels.size() < 2) throw std::invalid_argument("gradient_cosine_matrix: needs at least 2 samples");
  auto g = per_sample_gradients(spec, params, inputs, labels);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (norm2(g[i]) == 0.0) throw std::domain_error("gradient_cosine_matrix: sample " + std::to_string(i) + " has a zero gradient");
  }
  std::vector<std::vector<double>> m(g.size(), std::vector<double>(g.size(), 1.0));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = i + 1; j < g.size(); ++j) m[i][j] = m[j][i] = cosine(g[i], g[j]);
  return m;
}

inline double mean_off_diagonal(const std::vector<std::vector<double>>& m) {
  double s = 0.0;
  std::size_t n = m.size(), c = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) {
        s += m[i][j];
        ++c;
      }
  return c ? s / static_cast<double>(c) : 0.0;
}

/// Cosine between the batch-mean gradient and one member's own gradient.
inline double batch_member_similarity(const ModelSpec& spec, const Params& params, const Tensor& inputs,
                                      const std::vector<int>& labels, std::size_t member) {
  auto names = param_names(spec);
  auto batch = flatten(loss_and_grads(spec, params, inputs, labels).grads, names);
  Tensor xi = detail::image_at(inputs, member);
  Shape s = xi.shape();
  s.insert(s.begin(), 1);
  auto single = flatten(loss_and_grads(spec, params, xi.reshaped(s), {labels.at(member)}).grads, names);
  return cosine(batch, single);
}

}  // namespace gialab
