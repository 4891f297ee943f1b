#pragma once

// Canned trend suite. Each criterion produces a list of checks (one CSV row
// each) and a verdict; everything is a pure function of the seed list.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "gialab/gradcheck.hpp"
#include "gialab/runner.hpp"

namespace gialab {

inline const std::vector<std::uint64_t>& reference_seeds() {
  static const std::vector<std::uint64_t> s{11, 23, 37, 41, 53};
  return s;
}

struct BenchCheck {
  int criterion = 0;
  std::string check;
  std::optional<std::uint64_t> seed;  // empty for aggregate checks
  double value = 0.0;
  bool pass = false;
  double runtime_seconds = 0.0;
};

struct CriterionVerdict {
  int criterion = 0;
  std::string title;
  bool pass = false;
  std::string detail;
};

struct CriterionResult {
  std::vector<BenchCheck> checks;
  CriterionVerdict verdict;
};

struct BenchReport {
  std::vector<BenchCheck> checks;
  std::vector<CriterionVerdict> verdicts;

  bool all_passed() const {
    return std::all_of(verdicts.begin(), verdicts.end(), [](const CriterionVerdict& v) { return v.pass; });
  }

  std::string csv(bool with_runtime = true) const {
    std::ostringstream os;
    os << "criterion,check,seed,value,pass" << (with_runtime ? ",runtime_s" : "") << '\n';
    for (const auto& c : checks) {
      os << c.criterion << ',' << csv_field(c.check) << ',' << (c.seed ? std::to_string(*c.seed) : "") << ','
         << csv_number(c.value) << ',' << (c.pass ? "pass" : "fail");
      if (with_runtime) os << ',' << csv_number(c.runtime_seconds);
      os << '\n';
    }
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    for (const auto& v : verdicts) {
      os << (v.pass ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << v.criterion << "  " << v.title;
      if (!v.detail.empty()) os << "  [" << v.detail << "]";
      os << '\n';
    }
    return os.str();
  }
};

struct BenchOptions {
  std::vector<std::uint64_t> seeds = reference_seeds();
  std::vector<int> only;  // empty: criteria 1-12
  std::size_t threads = worker_count();
  std::filesystem::path work_dir;  // scratch for artifact round-trips; empty: system temp
  std::ostream* log = nullptr;
};

namespace bench {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

inline std::string fmt(double v, int digits = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::size_t count_pass(const std::vector<bool>& v) { return static_cast<std::size_t>(std::count(v.begin(), v.end(), true)); }

inline bool majority(const std::vector<bool>& v) { return 2 * count_pass(v) > v.size(); }

inline double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Runs fn(seed) for each seed in parallel; results in seed order.
template <class T>
std::vector<T> per_seed(const std::vector<std::uint64_t>& seeds, std::size_t threads, const std::function<T(std::uint64_t)>& fn) {
  std::vector<T> out(seeds.size());
  std::vector<std::string> errors(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) {
    try {
      out[i] = fn(seeds[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!errors[i].empty()) throw std::runtime_error("seed " + std::to_string(seeds[i]) + ": " + errors[i]);
  }
  return out;
}

/// Client and auxiliary splits of one synthetic pool.
inline std::pair<Dataset, Dataset> split_pool(std::size_t client_n, std::size_t aux_n, std::size_t side, std::size_t classes,
                                              std::uint64_t seed) {
  Dataset pool = synth_dataset(client_n + aux_n, 1, side, side, classes, seed);
  std::vector<std::size_t> ci, ai;
  for (std::size_t i = 0; i < pool.size(); ++i) (i < client_n ? ci : ai).push_back(i);
  return {subset(pool, ci), subset(pool, ai)};
}

inline OpGiaConfig attack_config(std::uint64_t seed) {
  OpGiaConfig cfg;
  cfg.seed = seed;
  return cfg;
}

/// Mean PSNR of OP-GIA on `rounds` FedSGD batches of size b.
inline double op_gia_psnr(const Target& t, const Dataset& d, std::size_t b, std::uint64_t seed, std::size_t rounds) {
  double acc = 0.0;
  for (std::size_t r = 0; r < rounds; ++r) {
    auto rd = fedsgd_round(t.spec, t.params, d, b, seed, r);
    auto res = op_gia_attack(rd.update, t, attack_config(seed * 100 + r), rd.truth.labels, &rd.truth);
    acc += res.metrics.mean_psnr();
  }
  return acc / static_cast<double>(rounds);
}

inline Target mlp_target(const Dataset& d, ActivationKind act, std::size_t hidden, std::uint64_t seed) {
  Target t{zoo::mlp2(d.image_shape(), d.classes, act, hidden), {}, d.norm};
  t.params = build_model(t.spec, seed);
  return t;
}

}  // namespace bench

// ---------------------------------------------------------------------------
// 1. gradients against central differences

inline CriterionResult criterion_gradients(const BenchOptions& o) {
  auto t0 = bench::Clock::now();
  std::vector<GradCase> cases = primitive_op_cases();
  for (auto& c : model_cases()) cases.push_back(std::move(c));
  std::vector<GradCheckResult> res(cases.size());
  std::uint64_t seed = o.seeds.empty() ? 0 : o.seeds.front();
  parallel_for(cases.size(), o.threads, [&](std::size_t i) { res[i] = check_gradients(cases[i], 20, seed + i); });
  CriterionResult out;
  double worst = 0.0;
  std::string worst_name;
  std::size_t failed = 0;
  std::size_t kinks = 0;
  for (const auto& r : res) {
    // kinks stay rare or the check would be vacuous
    bool ok = r.max_rel_error < 1e-4 && 20 * r.kinks <= r.coordinates;
    failed += !ok;
    kinks += r.kinks;
    out.checks.push_back({1, "fd_max_rel_error/" + r.name, std::nullopt, r.max_rel_error, ok, 0.0});
    out.checks.push_back({1, "fd_kinks_skipped/" + r.name, std::nullopt, static_cast<double>(r.kinks), ok, 0.0});
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  out.checks.back().runtime_seconds = bench::seconds_since(t0);
  out.verdict = {1, "autodiff matches central differences on every op and model", failed == 0,
                 std::to_string(res.size() - failed) + "/" + std::to_string(res.size()) + " cases, worst " + worst_name + " " +
                     csv_number(worst) + ", " + std::to_string(kinks) + " kink coordinates skipped"};
  return out;
}

// ---------------------------------------------------------------------------
// 2. closed-form inversion of a linear first layer

inline CriterionResult criterion_closed_form(const BenchOptions& o) {
  struct R {
    double err = 0, psnr = 0, secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    Dataset d = synth_dataset(64, 1, 8, 8, 10, s);
    ModelSpec spec = zoo::linear_first(d.image_shape(), d.classes, ActivationKind::relu, 64);
    Params p = build_model(spec, s);
    auto rd = fedsgd_round(spec, p, d, 1, s);
    auto inv = closed_form_linear_invert(rd.update, spec, first_param_layer(spec)->name);
    std::size_t k = 0;
    while (k < inv.active.size() && !inv.active[k]) ++k;
    if (k == inv.active.size()) throw std::runtime_error("no active neuron");
    Tensor x = inv.rows[k];
    R r;
    r.err = max_abs_diff(x, detail::image_at(rd.truth.inputs, 0));
    Tensor px = denormalize(x.reshaped(Shape{1, 1, 8, 8}), d.norm);
    for (double& v : px.data()) v = std::clamp(v, 0.0, 1.0);
    r.psnr = psnr_image(detail::image_at(rd.truth.pixels, 0), detail::image_at(px, 0));
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  bool all = true;
  double worst = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    bool e = rows[i].err < 1e-8, p = rows[i].psnr == 100.0;
    all = all && e && p;
    worst = std::max(worst, rows[i].err);
    out.checks.push_back({2, "max_abs_error", o.seeds[i], rows[i].err, e, rows[i].secs});
    out.checks.push_back({2, "psnr_cap", o.seeds[i], rows[i].psnr, p, 0.0});
  }
  out.verdict = {2, "closed-form linear inversion is exact at B=1", all, "worst max-abs error " + csv_number(worst)};
  return out;
}

// ---------------------------------------------------------------------------
// 3. imprint module recovery

/// Samples of `truth` alone in their bin, computed from the module directly.
inline std::size_t imprint_occupancy_oracle(const ImprintModule& mod, const GroundTruth& truth) {
  std::vector<long> bins;
  std::vector<std::size_t> count(mod.bins, 0);
  for (std::size_t b = 0; b < truth.labels.size(); ++b) {
    Tensor x = detail::image_at(truth.inputs, b);
    long bin = mod.bin_of(mod.measure(x.data()));
    bins.push_back(bin);
    if (bin >= 0) ++count[static_cast<std::size_t>(bin)];
  }
  std::size_t alone = 0;
  for (long bin : bins) alone += bin >= 0 && count[static_cast<std::size_t>(bin)] == 1;
  return alone;
}

inline CriterionResult criterion_imprint(const BenchOptions& o) {
  constexpr std::size_t kRateRounds = 20;
  struct R {
    std::size_t b1 = 0, b16 = 0, oracle16 = 0;
    double rate = 0, secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    auto [client, calib] = bench::split_pool(256, 4096, 8, 10, s);
    ModelSpec spec = zoo::mlp2(client.image_shape(), client.classes, ActivationKind::relu, 32);
    Params p = build_model(spec, s);
    Tensor calx = normalize(calib.images, calib.norm);
    R r;
    auto im128 = build_imprint(spec, p, 128, calx);
    {
      auto rd = fedsgd_round(im128.spec, im128.params, client, 1, s, 0);
      r.b1 = imprint_reconstruct(rd.update, im128.module, spec.input, &rd.truth).recovered;
    }
    {
      auto rd = fedsgd_round(im128.spec, im128.params, client, 16, s, 1);
      r.b16 = imprint_reconstruct(rd.update, im128.module, spec.input, &rd.truth).recovered;
      r.oracle16 = imprint_occupancy_oracle(im128.module, rd.truth);
    }
    auto im1000 = build_imprint(spec, p, 1000, calx);
    for (std::size_t round = 0; round < kRateRounds; ++round) {
      auto rd = fedsgd_round(im1000.spec, im1000.params, client, 8, s, 2 + round);
      r.rate += static_cast<double>(imprint_reconstruct(rd.update, im1000.module, spec.input, &rd.truth).recovered) / 8.0;
    }
    r.rate /= static_cast<double>(kRateRounds);
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  bool b1 = true, eq = true;
  std::vector<double> rates;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const R& r = rows[i];
    b1 = b1 && r.b1 == 1;
    eq = eq && r.b16 == r.oracle16;
    rates.push_back(r.rate);
    out.checks.push_back({3, "b1_k128_recovered", o.seeds[i], static_cast<double>(r.b1), r.b1 == 1, r.secs});
    out.checks.push_back({3, "b16_k128_recovered_minus_oracle", o.seeds[i],
                          static_cast<double>(r.b16) - static_cast<double>(r.oracle16), r.b16 == r.oracle16, 0.0});
    out.checks.push_back({3, "b8_k1000_rate", o.seeds[i], r.rate, r.rate >= 0.97, 0.0});
  }
  double rate = bench::mean(rates);
  out.checks.push_back({3, "b8_k1000_mean_rate", std::nullopt, rate, rate >= 0.97, 0.0});
  out.verdict = {3, "imprint: exact B=1, occupancy-oracle count at B=16, >=97% at k=1000", b1 && eq && rate >= 0.97,
                 "k=1000 mean rate " + bench::fmt(rate)};
  return out;
}

// ---------------------------------------------------------------------------
// 4. expected recovery count

inline CriterionResult criterion_recovery_formula(const BenchOptions& o) {
  const std::vector<std::pair<std::size_t, std::size_t>> grid{{3, 8}, {4, 16}, {8, 64}};
  std::vector<RecoveryEstimate> est(grid.size());
  std::vector<double> secs(grid.size());
  std::uint64_t seed = o.seeds.empty() ? 0 : o.seeds.front();
  parallel_for(grid.size(), o.threads, [&](std::size_t i) {
    auto t0 = bench::Clock::now();
    est[i] = expected_recovery_count(grid[i].first, grid[i].second, 100000, seed + i);
    secs[i] = bench::seconds_since(t0);
  });
  CriterionResult out;
  bool all = true;
  std::string detail;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& e = est[i];
    double se = std::sqrt(e.correction_se * e.correction_se + e.mc_se * e.mc_se);
    double z = std::abs(e.formula_total() - e.mc_mean) / se;
    bool ok = z <= 3.0;
    all = all && ok;
    std::string tag = "B" + std::to_string(grid[i].first) + "_k" + std::to_string(grid[i].second);
    out.checks.push_back({4, "formula_total/" + tag, std::nullopt, e.formula_total(), ok, secs[i]});
    out.checks.push_back({4, "monte_carlo/" + tag, std::nullopt, e.mc_mean, ok, 0.0});
    out.checks.push_back({4, "standard_errors_apart/" + tag, std::nullopt, z, ok, 0.0});
    detail += (detail.empty() ? "" : " ") + tag + " z=" + bench::fmt(z, 2);
  }
  out.verdict = {4, "recovery-count formula within 3 SE of Monte Carlo", all, detail};
  return out;
}

// ---------------------------------------------------------------------------
// 5. OP-GIA trends: batch size, resolution, training state

struct OpGiaTrendPoint {
  double b1 = 0, b4 = 0, b16 = 0;  // 8x8, untrained
  double res8 = 0, res16 = 0;      // B=8, untrained
  double untrained = 0, trained = 0;  // B=8, 8x8
};

/// One seed of the OP-GIA trend grid. swap_training_state hands the attack
/// the trained parameters as "untrained" and vice versa.
inline OpGiaTrendPoint op_gia_trend_point(std::uint64_t s, bool swap_training_state = false) {
  constexpr std::size_t kBatchRounds = 4, kRounds = 2;
  OpGiaTrendPoint p;
  Dataset d8 = synth_dataset(128, 1, 8, 8, 10, s);
  Target t8 = bench::mlp_target(d8, ActivationKind::relu, 64, s);
  p.b1 = bench::op_gia_psnr(t8, d8, 1, s, kBatchRounds);
  p.b4 = bench::op_gia_psnr(t8, d8, 4, s, kBatchRounds);
  p.b16 = bench::op_gia_psnr(t8, d8, 16, s, kBatchRounds);
  p.res8 = bench::op_gia_psnr(t8, d8, 8, s, kRounds);
  Dataset d16 = synth_dataset(128, 1, 16, 16, 10, s);
  p.res16 = bench::op_gia_psnr(bench::mlp_target(d16, ActivationKind::relu, 64, s), d16, 8, s, kRounds);
  Target tt = t8;
  tt.params = train_model(t8.spec, t8.params, d8, 30, 8, 0.05, s);
  const Target& as_untrained = swap_training_state ? tt : t8;
  const Target& as_trained = swap_training_state ? t8 : tt;
  p.untrained = p.res8;
  if (swap_training_state) p.untrained = bench::op_gia_psnr(as_untrained, d8, 8, s, kRounds);
  p.trained = bench::op_gia_psnr(as_trained, d8, 8, s, kRounds);
  return p;
}

struct OpGiaTrendChecks {
  bool batch = false, resolution = false, training = false;
  bool all() const { return batch && resolution && training; }
};

inline OpGiaTrendChecks check_op_gia_trends(const OpGiaTrendPoint& p) {
  return {p.b1 > p.b4 && p.b4 > p.b16 && p.b1 - p.b16 >= 1.0, p.res8 > p.res16, p.untrained >= p.trained + 1.0};
}

inline CriterionResult criterion_op_gia_trends(const BenchOptions& o, bool swap_training_state = false) {
  struct R {
    OpGiaTrendPoint p;
    double secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [&](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    R r{op_gia_trend_point(s, swap_training_state), 0.0};
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  std::vector<bool> seed_ok;
  std::size_t nb = 0, nr = 0, nt = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& p = rows[i].p;
    auto c = check_op_gia_trends(p);
    auto s = o.seeds[i];
    out.checks.push_back({5, "psnr_b1", s, p.b1, c.batch, rows[i].secs});
    out.checks.push_back({5, "psnr_b4", s, p.b4, c.batch, 0.0});
    out.checks.push_back({5, "psnr_b16", s, p.b16, c.batch, 0.0});
    out.checks.push_back({5, "psnr_8x8_b8", s, p.res8, c.resolution, 0.0});
    out.checks.push_back({5, "psnr_16x16_b8", s, p.res16, c.resolution, 0.0});
    out.checks.push_back({5, "psnr_untrained_b8", s, p.untrained, c.training, 0.0});
    out.checks.push_back({5, "psnr_trained_b8", s, p.trained, c.training, 0.0});
    nb += c.batch;
    nr += c.resolution;
    nt += c.training;
    seed_ok.push_back(c.all());
  }
  std::size_t need = rows.size() >= 5 ? rows.size() - 1 : rows.size();
  bool pass = bench::count_pass(seed_ok) >= need;
  std::string n = "/" + std::to_string(rows.size());
  out.verdict = {5, "OP-GIA worsens with batch size, resolution and training", pass,
                 "all three on " + std::to_string(bench::count_pass(seed_ok)) + n + " seeds (batch " + std::to_string(nb) + n +
                     ", resolution " + std::to_string(nr) + n + ", training " + std::to_string(nt) + n + ")"};
  return out;
}

// ---------------------------------------------------------------------------
// 6. same-label degradation

inline CriterionResult criterion_same_label(const BenchOptions& o) {
  const std::vector<std::size_t> dups{0, 2, 3, 4};
  constexpr std::size_t kRounds = 3, kBatch = 4;
  struct R {
    std::vector<double> sim, psnr;
    double secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [&](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    Dataset d = synth_dataset(128, 1, 8, 8, 10, s);
    Target t = bench::mlp_target(d, ActivationKind::relu, 64, s);
    R r;
    for (std::size_t dup : dups) {
      double sim = 0, ps = 0;
      for (std::size_t round = 0; round < kRounds; ++round) {
        auto gt = make_ground_truth(d, sample_batch_with_duplicates(d, kBatch, dup, s, round));
        sim += mean_off_diagonal(gradient_cosine_matrix(t.spec, t.params, gt.inputs, gt.labels));
        auto rd = fedsgd_on(t.spec, t.params, gt);
        ps += op_gia_attack(rd.update, t, bench::attack_config(s * 100 + round), gt.labels, &gt).metrics.mean_psnr();
      }
      r.sim.push_back(sim / kRounds);
      r.psnr.push_back(ps / kRounds);
    }
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  std::vector<bool> sim_ok, psnr_ok;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const R& r = rows[i];
    bool sm = true, pm = true;
    for (std::size_t j = 1; j < dups.size(); ++j) {
      sm = sm && r.sim[j] >= r.sim[j - 1];
      pm = pm && r.psnr[j] <= r.psnr[j - 1];
    }
    sim_ok.push_back(sm);
    psnr_ok.push_back(pm);
    for (std::size_t j = 0; j < dups.size(); ++j) {
      std::string tag = "_dup" + std::to_string(dups[j]);
      out.checks.push_back({6, "mean_gradient_cosine" + tag, o.seeds[i], r.sim[j], sm, j == 0 ? r.secs : 0.0});
      out.checks.push_back({6, "psnr" + tag, o.seeds[i], r.psnr[j], pm, 0.0});
    }
  }
  bool pass = bench::majority(sim_ok) && bench::majority(psnr_ok);
  out.verdict = {6, "more same-label samples: more similar gradients, worse OP-GIA", pass,
                 "similarity monotone on " + std::to_string(bench::count_pass(sim_ok)) + "/" + std::to_string(rows.size()) +
                     ", PSNR monotone on " + std::to_string(bench::count_pass(psnr_ok)) + "/" + std::to_string(rows.size())};
  return out;
}

// ---------------------------------------------------------------------------
// 7. FedAvg simulation modes

inline CriterionResult criterion_fedavg(const BenchOptions& o) {
  struct R {
    double strong = 0, weak = 0, none = 0, secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    Dataset all = synth_dataset(128, 1, 8, 8, 10, s);
    Dataset d = subset(all, sample_batch(all.size(), 4, s, 7));
    Target t = bench::mlp_target(all, ActivationKind::relu, 64, s);
    ClientConfig cc{1, 2, 0.2, s};
    auto rd = fedavg_round(t.spec, t.params, d, cc);
    ClientConfig wc = cc;
    wc.lr = cc.lr * 2.0;
    SimulationGuess strong{cc, rd.trace}, weak{wc, std::nullopt};
    OpGiaConfig cfg = bench::attack_config(s);
    R r;
    r.strong = fedavg_attack(rd.update, t, cfg, SimulationMode::strong, strong, rd.truth.labels, &rd.truth).metrics.mean_psnr();
    r.weak = fedavg_attack(rd.update, t, cfg, SimulationMode::weak, weak, rd.truth.labels, &rd.truth).metrics.mean_psnr();
    r.none = fedavg_attack(rd.update, t, cfg, SimulationMode::none, weak, rd.truth.labels, &rd.truth).metrics.mean_psnr();
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  std::vector<bool> order, gap;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const R& r = rows[i];
    bool ok = r.strong - r.weak >= 0.5 && r.weak - r.none >= 0.5;
    bool g = r.none < r.strong - 2.0;
    order.push_back(ok);
    gap.push_back(g);
    out.checks.push_back({7, "psnr_strong", o.seeds[i], r.strong, ok, r.secs});
    out.checks.push_back({7, "psnr_weak", o.seeds[i], r.weak, ok, 0.0});
    out.checks.push_back({7, "psnr_none", o.seeds[i], r.none, ok && g, 0.0});
  }
  bool pass = bench::majority(order) && bench::majority(gap);
  out.verdict = {7, "FedAvg: strong > weak > no simulation", pass,
                 "ordering with 0.5 dB gaps on " + std::to_string(bench::count_pass(order)) + "/" + std::to_string(rows.size()) +
                     ", none < strong - 2 dB on " + std::to_string(bench::count_pass(gap)) + "/" + std::to_string(rows.size())};
  return out;
}

// ---------------------------------------------------------------------------
// 8. sigmoid vs relu under a learned generator

inline CriterionResult criterion_sigmoid(const BenchOptions& o) {
  struct R {
    double sig = 0, relu = 0;
    double loc_sig_trained = 0, loc_sig = 0, loc_relu = 0;
    double secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    Dataset d = synth_dataset(64, 1, 8, 8, 10, s);
    Tensor x = normalize(d.images, d.norm);
    R r;
    for (ActivationKind act : {ActivationKind::sigmoid, ActivationKind::relu}) {
      Target t = bench::mlp_target(d, act, 64, s);
      (act == ActivationKind::sigmoid ? r.loc_sig : r.loc_relu) = preactivation_fraction_within(t.spec, t.params, x);
      t.params = train_model(t.spec, t.params, d, 30, 8, 0.05, s);
      if (act == ActivationKind::sigmoid) r.loc_sig_trained = preactivation_fraction_within(t.spec, t.params, x);
      auto rd = fedsgd_round(t.spec, t.params, d, 1, s);
      OpGiaConfig cfg = bench::attack_config(s);
      cfg.distance = Distance::l2;
      cfg.tv_weight = 1e-2;
      cfg.iterations = 2000;
      cfg.lr = 0.01;
      (act == ActivationKind::sigmoid ? r.sig : r.relu) = gen_w_attack(rd.update, t, GeneratorSpec{}, rd.truth.labels, cfg, &rd.truth).metrics.mean_ssim();
    }
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  std::vector<double> sig, relu;
  bool local = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const R& r = rows[i];
    sig.push_back(r.sig);
    relu.push_back(r.relu);
    out.checks.push_back({8, "ssim_sigmoid_trained", o.seeds[i], r.sig, true, r.secs});
    out.checks.push_back({8, "ssim_relu_trained", o.seeds[i], r.relu, true, 0.0});
    for (auto [name, v] : {std::pair<const char*, double>{"locality_sigmoid_trained", r.loc_sig_trained},
                           {"locality_sigmoid_untrained", r.loc_sig}, {"locality_relu_untrained", r.loc_relu}}) {
      out.checks.push_back({8, name, o.seeds[i], v, v >= 0.9, 0.0});
      local = local && v >= 0.9;
    }
  }
  double gap = bench::mean(sig) - bench::mean(relu);
  out.checks.push_back({8, "mean_ssim_gap", std::nullopt, gap, gap > 0.2, 0.0});
  for (auto& c : out.checks) {
    if (c.check.rfind("ssim_", 0) == 0) c.pass = gap > 0.2;
  }
  out.verdict = {8, "generator attack succeeds on sigmoid, not relu", gap > 0.2 && local,
                 "SSIM sigmoid " + bench::fmt(bench::mean(sig)) + " vs relu " + bench::fmt(bench::mean(relu)) +
                     (local ? ", locality ok" : ", locality FAILED")};
  return out;
}

// ---------------------------------------------------------------------------
// 9. fishing

inline CriterionResult criterion_fishing(const BenchOptions& o) {
  struct R {
    double iso = 0, iso0 = 0, fish = 0, plain = 0, secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    Dataset d = synth_dataset(128, 1, 8, 8, 2, s);
    Target t{zoo::cnn_s(d.image_shape(), d.classes), {}, d.norm};
    t.params = build_model(t.spec, s);
    auto idx = sample_batch_with_target(d, 8, 0, s, 3);
    auto gt = make_ground_truth(d, idx);
    std::size_t ti = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (gt.labels[i] == 0) ti = i;
    }
    auto lone = make_ground_truth(d, {idx[ti]});
    auto plan = fishing_manipulate(t.spec, t.params, 0, 10.0);
    Target mt = t;
    mt.params = plan.params;
    R r;
    auto fished = fedsgd_on(t.spec, plan.params, gt).update;
    auto plain = fedsgd_on(t.spec, t.params, gt).update;
    r.iso = isolation_score(fished, fedsgd_on(t.spec, plan.params, lone).update);
    r.iso0 = isolation_score(plain, fedsgd_on(t.spec, t.params, lone).update);
    OpGiaConfig cfg = bench::attack_config(s);
    r.fish = fishing_then_invert(fished, mt, plan, cfg, &lone).metrics.mean_psnr();
    r.plain = op_gia_attack(plain, t, cfg, gt.labels, &gt).metrics.best_psnr();
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  bool iso_all = true;
  std::vector<bool> gain;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const R& r = rows[i];
    bool iso = r.iso > 0.9 && r.iso > r.iso0 + 0.3;
    bool g = r.fish >= r.plain + 2.0;
    iso_all = iso_all && iso;
    gain.push_back(g);
    out.checks.push_back({9, "isolation_fished", o.seeds[i], r.iso, iso, r.secs});
    out.checks.push_back({9, "isolation_plain", o.seeds[i], r.iso0, iso, 0.0});
    out.checks.push_back({9, "psnr_fished_target", o.seeds[i], r.fish, g, 0.0});
    out.checks.push_back({9, "psnr_plain_best", o.seeds[i], r.plain, g, 0.0});
  }
  out.verdict = {9, "fishing isolates the target and beats plain OP-GIA", iso_all && bench::majority(gain),
                 "isolation ok on all seeds: " + std::string(iso_all ? "yes" : "no") + ", +2 dB on " +
                     std::to_string(bench::count_pass(gain)) + "/" + std::to_string(rows.size())};
  return out;
}

// ---------------------------------------------------------------------------
// 10. learned inversion

inline CriterionResult criterion_lti(const BenchOptions& o) {
  constexpr std::size_t kRounds = 8, kAux = 1000;
  struct R {
    double matched = 0, shifted = 0, trained = 0, baseline = 0, secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    auto [client, aux] = bench::split_pool(64, kAux, 8, 10, s);
    SynthOptions so;
    so.class_prototypes = false;
    so.sigma_lo = 0.05;
    so.sigma_hi = 0.10;
    so.name = "shifted";
    Dataset shifted = synth_dataset(kAux, 1, 8, 8, 10, s + 1000, so);
    Target t = bench::mlp_target(client, ActivationKind::relu, 16, s);
    Target tt = t;
    tt.params = train_model(t.spec, t.params, aux, 10, 8, 0.05, s);
    InversionModel arch;
    arch.hidden = {128};
    InversionTraining tr;
    tr.epochs = 20;
    auto inv = train_inversion_model(aux, t, 1, arch, tr, s);
    auto inv_shifted = train_inversion_model(shifted, t, 1, arch, tr, s);
    auto inv_trained = train_inversion_model(aux, tt, 1, arch, tr, s);
    Tensor mean_img(Shape{1, 1, 8, 8});
    for (std::size_t i = 0; i < aux.size(); ++i)
      for (std::size_t p = 0; p < 64; ++p) mean_img[p] += aux.images[i * 64 + p] / static_cast<double>(aux.size());
    R r;
    for (std::size_t round = 0; round < kRounds; ++round) {
      auto rd = fedsgd_round(t.spec, t.params, client, 1, s, round);
      auto rdt = fedsgd_round(tt.spec, tt.params, client, 1, s, round);
      r.matched += invert_with_model(inv, rd.update, t.spec, &rd.truth).metrics.mean_psnr();
      r.shifted += invert_with_model(inv_shifted, rd.update, t.spec, &rd.truth).metrics.mean_psnr();
      r.trained += invert_with_model(inv_trained, rdt.update, t.spec, &rdt.truth).metrics.mean_psnr();
      r.baseline += psnr_image(detail::image_at(rd.truth.pixels, 0), detail::image_at(mean_img, 0));
    }
    for (double* v : {&r.matched, &r.shifted, &r.trained, &r.baseline}) *v /= kRounds;
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  std::vector<double> m, sh, tr, base;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const R& r = rows[i];
    m.push_back(r.matched);
    sh.push_back(r.shifted);
    tr.push_back(r.trained);
    base.push_back(r.baseline);
    out.checks.push_back({10, "psnr_matched_aux", o.seeds[i], r.matched, true, r.secs});
    out.checks.push_back({10, "psnr_shifted_aux", o.seeds[i], r.shifted, true, 0.0});
    out.checks.push_back({10, "psnr_trained_target", o.seeds[i], r.trained, true, 0.0});
    out.checks.push_back({10, "psnr_mean_image", o.seeds[i], r.baseline, true, 0.0});
  }
  double vs_base = bench::mean(m) - bench::mean(base), vs_shift = bench::mean(m) - bench::mean(sh);
  double train_gap = std::abs(bench::mean(m) - bench::mean(tr));
  bool a = vs_base > 3.0, b = vs_shift > 3.0, c = train_gap < 2.0;
  out.checks.push_back({10, "matched_minus_mean_image", std::nullopt, vs_base, a, 0.0});
  out.checks.push_back({10, "matched_minus_shifted", std::nullopt, vs_shift, b, 0.0});
  out.checks.push_back({10, "abs_untrained_minus_trained", std::nullopt, train_gap, c, 0.0});
  out.verdict = {10, "learned inversion needs matched aux data, not an untrained target", a && b && c,
                 "vs mean image +" + bench::fmt(vs_base, 2) + " dB, vs shifted +" + bench::fmt(vs_shift, 2) +
                     " dB, training gap " + bench::fmt(train_gap, 2) + " dB"};
  return out;
}

// ---------------------------------------------------------------------------
// 11. latent-space search

inline CriterionResult criterion_latent(const BenchOptions& o) {
  struct R {
    double z = 0, w = 0, noise_obj = 0, secs = 0;
  };
  auto rows = bench::per_seed<R>(o.seeds, o.threads, [](std::uint64_t s) {
    auto t0 = bench::Clock::now();
    auto [client, aux] = bench::split_pool(64, 512, 8, 10, s);
    Target t = bench::mlp_target(client, ActivationKind::sigmoid, 64, s);
    auto rd = fedsgd_round(t.spec, t.params, client, 1, s);
    GeneratorSpec gs;
    auto dec = pretrain_decoder(aux, gs, DecoderTraining{}, s);
    OpGiaConfig cfg = bench::attack_config(s);
    cfg.lr = 0.01;
    R r;
    r.z = latent_z_attack(rd.update, t, dec, rd.truth.labels, cfg, &rd.truth).metrics.mean_ssim();
    r.w = gen_w_attack(rd.update, t, gs, rd.truth.labels, cfg, &rd.truth).metrics.mean_ssim();
    // same-scale Gaussian noise in place of the real update
    Update noise = rd.update;
    CounterRng nr = CounterRng(s).derive(0x6e6f);
    for (auto& [name, v] : noise.tensors) {
      double sd = norm2(v.data()) / std::sqrt(static_cast<double>(v.size()));
      for (double& e : v.data()) e = nr.normal(0.0, sd);
    }
    try {
      r.noise_obj = latent_z_attack(noise, t, dec, rd.truth.labels, cfg, &rd.truth).objective;
    } catch (const AttackDiverged&) {
      r.noise_obj = std::numeric_limits<double>::quiet_NaN();
    }
    r.secs = bench::seconds_since(t0);
    return r;
  });
  CriterionResult out;
  std::vector<double> z, w;
  bool noise_ok = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const R& r = rows[i];
    z.push_back(r.z);
    w.push_back(r.w);
    bool fin = std::isfinite(r.noise_obj);
    noise_ok = noise_ok && fin;
    out.checks.push_back({11, "ssim_latent_z", o.seeds[i], r.z, true, r.secs});
    out.checks.push_back({11, "ssim_gen_w", o.seeds[i], r.w, true, 0.0});
    out.checks.push_back({11, "noise_run_objective", o.seeds[i], r.noise_obj, fin, 0.0});
  }
  bool order = bench::mean(z) < bench::mean(w);
  for (auto& c : out.checks) {
    if (c.check.rfind("ssim_", 0) == 0) c.pass = order;
  }
  out.verdict = {11, "latent-z stays semantic: below gen-w, survives a noise update", order && noise_ok,
                 "SSIM latent-z " + bench::fmt(bench::mean(z)) + " vs gen-w " + bench::fmt(bench::mean(w)) +
                     (noise_ok ? ", noise runs finite" : ", noise run diverged")};
  return out;
}

// ---------------------------------------------------------------------------
// 12. defense pipeline

struct CannedLint {
  std::string name;
  ClientConfig client;
  ModelSpec spec;
  std::vector<LintRule> expected;
};

inline std::vector<CannedLint> canned_lint_configs() {
  using A = ActivationKind;
  using L = LintRule;
  Shape in{1, 8, 8};
  return {
      {"cnn-relu-b32-e2", {32, 2, 0.1, 0}, zoo::cnn_s(in, 10), {}},
      {"cnn-relu-b8-e5", {8, 5, 0.1, 0}, zoo::cnn_s(in, 10, ActivationKind::relu, true), {}},
      {"cnn-sigmoid-b32-e2", {32, 2, 0.1, 0}, zoo::cnn_s(in, 10, A::sigmoid), {L::sigmoid_activation}},
      {"cnn-relu-b1-e2", {1, 2, 0.1, 0}, zoo::cnn_s(in, 10), {L::small_batch}},
      {"cnn-relu-b16-e1", {16, 1, 0.1, 0}, zoo::cnn_s(in, 10), {L::single_step}},
      {"linear-first-b16-e3", {16, 3, 0.1, 0}, zoo::linear_first(in, 10), {L::closed_form_exposure}},
      {"mlp-relu-b4-e1", {4, 1, 0.1, 0}, zoo::mlp2(in, 10), {L::small_batch, L::single_step, L::closed_form_exposure}},
      {"mlp-sigmoid-b1-e1", {1, 1, 0.1, 0}, zoo::mlp2(in, 10, A::sigmoid),
       {L::sigmoid_activation, L::small_batch, L::single_step, L::closed_form_exposure}},
      {"cnn-tanh-b7-e3", {7, 3, 0.1, 0}, zoo::cnn_s(in, 10, A::tanh), {L::small_batch}},
      {"cnn-sigmoid-b8-e1", {8, 1, 0.1, 0}, zoo::cnn_s(in, 10, A::sigmoid), {L::sigmoid_activation, L::single_step}},
  };
}

/// Architectures the defense corpus is built on.
inline std::vector<std::pair<std::string, ModelSpec>> defense_architectures() {
  Shape in{1, 8, 8};
  return {{"mlp2-relu", zoo::mlp2(in, 10)},
          {"mlp2-sigmoid", zoo::mlp2(in, 10, ActivationKind::sigmoid)},
          {"cnn_s-relu", zoo::cnn_s(in, 10)},
          {"cnn_s_deep-relu", zoo::cnn_s(in, 10, ActivationKind::relu, true)},
          {"linear_first-relu", zoo::linear_first(in, 10)}};
}

inline CriterionResult criterion_defense(const BenchOptions& o) {
  auto t0 = bench::Clock::now();
  namespace fs = std::filesystem;
  fs::path dir = o.work_dir.empty() ? fs::temp_directory_path() / ("gialab-bench-" + std::to_string(::getpid())) : o.work_dir;
  fs::create_directories(dir);
  auto archs = defense_architectures();
  CriterionResult out;
  std::size_t artifacts = 0, detected = 0;
  struct Job {
    std::size_t arch;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t a = 0; a < archs.size(); ++a)
    for (std::uint64_t s : o.seeds) jobs.push_back({a, s});

  // malicious corpus: imprint and fishing artifacts read back from disk
  std::vector<std::vector<std::pair<std::string, bool>>> found(jobs.size());
  parallel_for(jobs.size(), o.threads, [&](std::size_t j) {
    const auto& [name, spec] = archs[jobs[j].arch];
    std::uint64_t s = jobs[j].seed;
    ReferenceSpec ref = ReferenceSpec::of(spec);
    Params p = build_model(spec, s);
    Dataset calib = synth_dataset(1024, 1, 8, 8, 10, s);
    Tensor calx = normalize(calib.images, calib.norm);
    for (std::size_t k : {8, 128}) {
      fs::path f = dir / (name + "-s" + std::to_string(s) + "-imprint" + std::to_string(k) + ".giaa");
      save_imprint(f, build_imprint(spec, p, k, calx));
      ModelFile mf = load_model(f);
      auto rep = defend(mf.spec, mf.params, ref);
      found[j].push_back({"imprint_k" + std::to_string(k) + "/" + name, !rep.passed()});
    }
    for (double beta : {5.0, 10.0, 20.0}) {
      fs::path f = dir / (name + "-s" + std::to_string(s) + "-fishing" + bench::fmt(beta, 0) + ".giaa");
      save_fishing_plan(f, fishing_manipulate(spec, p, static_cast<int>(s % 10), beta), spec);
      ModelFile mf = load_model(f);
      auto rep = defend(mf.spec, mf.params, ref);
      found[j].push_back({"fishing_beta" + bench::fmt(beta, 0) + "/" + name, !rep.passed()});
    }
  });
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    for (const auto& [check, hit] : found[j]) {
      ++artifacts;
      detected += hit;
      out.checks.push_back({12, "detected/" + check, jobs[j].seed, hit ? 1.0 : 0.0, hit, 0.0});
    }
  }

  // clean initializations: 20 seeds per architecture
  std::size_t clean = 0, false_pos = 0;
  std::vector<std::string> fp_names;
  for (const auto& [name, spec] : archs) {
    ReferenceSpec ref = ReferenceSpec::of(spec);
    for (std::uint64_t s = 1000; s < 1020; ++s) {
      ++clean;
      auto rep = defend(spec, build_model(spec, s), ref);
      if (!rep.passed()) {
        ++false_pos;
        fp_names.push_back(name + "/" + std::to_string(s));
      }
    }
  }
  out.checks.push_back({12, "clean_false_positives", std::nullopt, static_cast<double>(false_pos), false_pos == 0, 0.0});

  // lint table
  std::size_t lint_ok = 0;
  auto canned = canned_lint_configs();
  for (const auto& c : canned) {
    std::vector<LintRule> got;
    for (const auto& f : lint_protocol(c.client, c.spec)) got.push_back(f.rule);
    bool ok = got == c.expected;
    lint_ok += ok;
    out.checks.push_back({12, "lint/" + c.name, std::nullopt, static_cast<double>(got.size()), ok, 0.0});
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  out.checks.back().runtime_seconds = bench::seconds_since(t0);
  bool pass = detected == artifacts && false_pos == 0 && lint_ok == canned.size();
  out.verdict = {12, "defense flags every artifact, no clean model, lint matches table", pass,
                 "detected " + std::to_string(detected) + "/" + std::to_string(artifacts) + ", false positives " +
                     std::to_string(false_pos) + "/" + std::to_string(clean) + ", lint " + std::to_string(lint_ok) + "/" +
                     std::to_string(canned.size())};
  return out;
}

// ---------------------------------------------------------------------------

inline std::vector<std::pair<int, std::function<CriterionResult(const BenchOptions&)>>> bench_criteria() {
  return {{1, criterion_gradients},   {2, criterion_closed_form}, {3, criterion_imprint},
          {4, criterion_recovery_formula},
          {5, [](const BenchOptions& o) { return criterion_op_gia_trends(o); }},
          {6, criterion_same_label},  {7, criterion_fedavg},      {8, criterion_sigmoid},
          {9, criterion_fishing},     {10, criterion_lti},        {11, criterion_latent},
          {12, criterion_defense}};
}

/// Runs the canned trend suite; a criterion that throws becomes a failed
/// verdict carrying the message.
inline BenchReport bench_trends(const BenchOptions& o = {}) {
  BenchReport rep;
  for (const auto& [id, fn] : bench_criteria()) {
    if (!o.only.empty() && std::find(o.only.begin(), o.only.end(), id) == o.only.end()) continue;
    auto t0 = bench::Clock::now();
    CriterionResult r;
    try {
      r = fn(o);
    } catch (const std::exception& e) {
      r.verdict = {id, "criterion " + std::to_string(id), false, std::string("error: ") + e.what()};
      r.checks.push_back({id, "error", std::nullopt, std::numeric_limits<double>::quiet_NaN(), false, 0.0});
    }
    for (auto& c : r.checks) rep.checks.push_back(std::move(c));
    rep.verdicts.push_back(r.verdict);
    if (o.log) {
      *o.log << (r.verdict.pass ? "PASS" : "FAIL") << "  criterion " << id << "  " << r.verdict.title << "  [" << r.verdict.detail
             << "]  (" << bench::fmt(bench::seconds_since(t0), 1) << " s)\n";
      o.log->flush();
    }
  }
  return rep;
}

}  // namespace gialab
