#pragma once

// Sweep runner: expands a config into (case x seed) jobs, runs them on a
// bounded worker pool and streams rows to results.csv in job order.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gialab/attack_ana.hpp"
#include "gialab/attack_gen.hpp"
#include "gialab/attack_opt.hpp"
#include "gialab/config.hpp"
#include "gialab/defense.hpp"
#include "gialab/image_io.hpp"

#ifndef GIALAB_VERSION
#define GIALAB_VERSION "0.1.0"
#endif

namespace gialab {

inline constexpr const char* kVersion = GIALAB_VERSION;
inline constexpr const char* kCsvSchema = "results-v1";

// ---------------------------------------------------------------------------
// Worker pool

/// GIA_LAB_THREADS when set to a positive integer, else the core count.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("GIA_LAB_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers. fn must not throw.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Cases and rows

struct CasePoint {
  std::size_t batch = 1;
  std::size_t resolution = 8;
  std::size_t duplicates = 0;
  std::size_t epochs = 1;
  ActivationKind activation = ActivationKind::relu;
  bool trained = false;
};

inline std::vector<CasePoint> expand_cases(const ExperimentConfig& c) {
  auto or_default = [](const auto& axis, auto def) {
    using T = std::decay_t<decltype(def)>;
    return axis.empty() ? std::vector<T>{def} : std::vector<T>(axis.begin(), axis.end());
  };
  std::vector<CasePoint> out;
  for (std::size_t b : or_default(c.sweep.batch, c.attack.batch))
    for (std::size_t r : or_default(c.sweep.resolution, c.dataset.resolution))
      for (std::size_t d : or_default(c.sweep.duplicates, c.attack.duplicates))
        for (ActivationKind a : or_default(c.sweep.activation, c.model.activation))
          for (bool t : or_default(c.sweep.trained, c.model.trained))
            for (std::size_t e : or_default(c.sweep.epochs, c.attack.epochs)) out.push_back({b, r, d, e, a, t});
  return out;
}

struct ResultRow {
  std::string experiment;
  std::string kind;
  std::size_t case_index = 0;
  std::uint64_t seed = 0;
  CasePoint point;
  std::string status = "ok";
  double psnr = std::numeric_limits<double>::quiet_NaN();
  double ssim = std::numeric_limits<double>::quiet_NaN();
  double jaccard = std::numeric_limits<double>::quiet_NaN();
  double rdlv = std::numeric_limits<double>::quiet_NaN();
  std::string extra_name;
  double extra_value = std::numeric_limits<double>::quiet_NaN();
  std::string note;
  std::string artifact;
  double runtime_seconds = 0.0;
};

inline const char* results_header() {
  return "experiment,kind,case,seed,batch,resolution,duplicates,activation,trained,epochs,status,psnr,ssim,jaccard,rdlv,"
         "extra_name,extra_value,note,artifact,runtime_s";
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else if (ch == '\n' || ch == '\r') out += ' ';
    else out += ch;
  }
  return out + "\"";
}

inline std::string to_csv(const ResultRow& r) {
  std::ostringstream os;
  os << csv_field(r.experiment) << ',' << r.kind << ',' << r.case_index << ',' << r.seed << ',' << r.point.batch << ','
     << r.point.resolution << ',' << r.point.duplicates << ',' << to_string(r.point.activation) << ','
     << (r.point.trained ? "true" : "false") << ',' << r.point.epochs << ',' << r.status << ',' << csv_number(r.psnr) << ','
     << csv_number(r.ssim) << ',' << csv_number(r.jaccard) << ',' << csv_number(r.rdlv) << ',' << r.extra_name << ','
     << csv_number(r.extra_value) << ',' << csv_field(r.note) << ',' << csv_field(r.artifact) << ','
     << csv_number(r.runtime_seconds);
  return os.str();
}

// ---------------------------------------------------------------------------
// Case execution

namespace detail {

struct CaseData {
  Dataset client;
  Dataset aux;
};

inline CaseData case_data(const ExperimentConfig& c, std::size_t res, std::uint64_t seed) {
  Dataset pool;
  std::size_t need = c.dataset.samples + c.dataset.aux_samples;
  if (c.dataset.source == "cifar10") {
    if (res != 32) throw std::invalid_argument("cifar10 images are 32x32, case asks for " + std::to_string(res));
    pool = load_cifar10(c.dataset.path);
    if (pool.size() < need) throw std::invalid_argument("cifar10 file holds " + std::to_string(pool.size()) + " records, need " + std::to_string(need));
  } else {
    pool = synth_dataset(need, c.dataset.channels, res, res, c.dataset.classes, seed);
  }
  std::vector<std::size_t> ci, ai;
  for (std::size_t i = 0; i < need; ++i) (i < c.dataset.samples ? ci : ai).push_back(i);
  return {subset(pool, ci), subset(pool, ai)};
}

inline ModelSpec case_model(const ExperimentConfig& c, const CasePoint& p, const Shape& input, std::size_t classes) {
  const std::string& a = c.model.arch;
  if (a == "mlp2") return zoo::mlp2(input, classes, p.activation, c.model.hidden);
  if (a == "cnn_s") return zoo::cnn_s(input, classes, p.activation);
  if (a == "cnn_s_deep") return zoo::cnn_s(input, classes, p.activation, true);
  return zoo::linear_first(input, classes, p.activation, c.model.hidden);
}

inline Target case_target(const ExperimentConfig& c, const CasePoint& p, const Dataset& train, std::uint64_t seed) {
  Target t{case_model(c, p, train.image_shape(), train.classes), {}, train.norm};
  t.params = build_model(t.spec, seed);
  if (p.trained) t.params = train_model(t.spec, t.params, train, c.model.train_epochs, c.model.train_batch, c.model.train_lr, seed);
  return t;
}

inline std::vector<std::size_t> case_batch(const Dataset& d, const CasePoint& p, std::uint64_t seed, std::uint64_t round) {
  if (p.duplicates > 0) return sample_batch_with_duplicates(d, p.batch, p.duplicates, seed, round);
  return sample_batch(d.size(), p.batch, seed, round);
}

struct MetricAccumulator {
  double psnr = 0, ssim = 0, jaccard = 0, rdlv = 0;
  std::size_t n = 0, rdlv_n = 0;

  void add(const MetricSet& m) {
    psnr += m.mean_psnr();
    ssim += m.mean_ssim();
    jaccard += m.mean_jaccard();
    if (!m.rdlv.empty() && std::isfinite(m.mean_rdlv())) {
      rdlv += m.mean_rdlv();
      ++rdlv_n;
    }
    ++n;
  }

  void store(ResultRow& r) const {
    if (n == 0) return;
    r.psnr = psnr / static_cast<double>(n);
    r.ssim = ssim / static_cast<double>(n);
    r.jaccard = jaccard / static_cast<double>(n);
    if (rdlv_n) r.rdlv = rdlv / static_cast<double>(rdlv_n);
  }
};

}  // namespace detail

/// B indices with exactly one sample of `target` and B-1 from other classes.
inline std::vector<std::size_t> sample_batch_with_target(const Dataset& d, std::size_t b, int target, std::uint64_t seed,
                                                         std::uint64_t round) {
  std::vector<std::size_t> out;
  bool have = false;
  for (std::size_t i : sample_batch(d.size(), d.size(), seed, round)) {
    bool is_target = d.labels[i] == target;
    if (is_target && have) continue;
    if (is_target) have = true;
    if (!is_target && out.size() + (have ? 0 : 1) >= b) continue;
    out.push_back(i);
    if (out.size() == b && have) break;
  }
  if (!have || out.size() != b) {
    throw std::invalid_argument("cannot form a batch of " + std::to_string(b) + " with one sample of class " + std::to_string(target));
  }
  return out;
}

struct CaseContext {
  std::filesystem::path image_dir;  // empty: no dumps
  std::string prefix;
};

inline void dump_batch(const CaseContext& ctx, const Tensor& batch, const std::string& tag, ResultRow& row) {
  if (ctx.image_dir.empty()) return;
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    auto name = ctx.prefix + "_" + tag + std::to_string(i) + ".pnm";
    dump_image(detail::image_at(batch, i), ctx.image_dir / name);
  }
  row.artifact = "images/" + ctx.prefix + "_*";
}

/// One (case, seed) job; throws on failure (the caller records the error).
inline void run_case(const ExperimentConfig& c, const CasePoint& p, std::uint64_t seed, std::uint64_t case_seed,
                     const CaseContext& ctx, ResultRow& row) {
  using K = ExperimentKind;
  detail::CaseData data = detail::case_data(c, p.resolution, seed);
  const Dataset& client = data.client;
  OpGiaConfig cfg = c.attack.opt;
  cfg.seed = case_seed;
  detail::MetricAccumulator acc;
  auto labels_for = [&](const GroundTruth& gt) {
    return cfg.label_source == LabelSource::ground_truth ? gt.labels : std::vector<int>{};
  };

  switch (c.kind) {
    case K::op_gia: {
      Target t = detail::case_target(c, p, client, seed);
      double obj = 0.0;
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        auto gt = make_ground_truth(client, detail::case_batch(client, p, seed, r));
        auto rd = fedsgd_on(t.spec, t.params, gt);
        cfg.seed = CounterRng(case_seed).derive(r).next_u64();
        auto res = op_gia_attack(rd.update, t, cfg, labels_for(gt), &gt);
        acc.add(res.metrics);
        obj += res.objective;
        if (r == 0) dump_batch(ctx, res.reconstruction, "recon", row);
      }
      row.extra_name = "objective";
      row.extra_value = obj / static_cast<double>(c.attack.rounds);
      break;
    }
    case K::fedavg: {
      Target t = detail::case_target(c, p, client, seed);
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        Dataset local = subset(client, sample_batch(client.size(), c.attack.local_samples, seed, 0x100 + r));
        ClientConfig cc{p.batch, p.epochs, c.attack.client_lr, seed + r};
        auto rd = fedavg_round(t.spec, t.params, local, cc);
        ClientConfig wc = cc;
        wc.lr = cc.lr * c.attack.weak_lr_factor;
        SimulationGuess guess = c.attack.mode == SimulationMode::strong ? SimulationGuess{cc, rd.trace} : SimulationGuess{wc, std::nullopt};
        cfg.seed = CounterRng(case_seed).derive(r).next_u64();
        auto res = fedavg_attack(rd.update, t, cfg, c.attack.mode, guess, labels_for(rd.truth), &rd.truth);
        acc.add(res.metrics);
        if (r == 0) dump_batch(ctx, res.reconstruction, "recon", row);
      }
      row.extra_name = "local_steps";
      row.extra_value = static_cast<double>(p.epochs * ((c.attack.local_samples + p.batch - 1) / p.batch));
      break;
    }
    case K::gen_z:
    case K::gen_w: {
      Target t = detail::case_target(c, p, client, seed);
      GeneratorSpec gs;
      gs.output = client.image_shape();
      gs.classes = client.classes;
      gs.latent_dim = c.attack.latent_dim;
      std::optional<PretrainedDecoder> dec;
      if (c.kind == K::gen_z) dec = pretrain_decoder(data.aux, gs, DecoderTraining{}, seed);
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        auto gt = make_ground_truth(client, detail::case_batch(client, p, seed, r));
        auto rd = fedsgd_on(t.spec, t.params, gt);
        cfg.seed = CounterRng(case_seed).derive(r).next_u64();
        auto res = dec ? latent_z_attack(rd.update, t, *dec, gt.labels, cfg, &gt) : gen_w_attack(rd.update, t, gs, gt.labels, cfg, &gt);
        acc.add(res.metrics);
        if (r == 0) dump_batch(ctx, res.reconstruction, "recon", row);
      }
      if (dec) {
        row.extra_name = "decoder_holdout_mse";
        row.extra_value = dec->holdout_mse;
        row.note = "semantic-level";
      }
      break;
    }
    case K::lti: {
      Target t = detail::case_target(c, p, client, seed);
      InversionModel inv;
      inv.hidden = {c.attack.inversion_hidden};
      InversionTraining tr;
      tr.epochs = c.attack.inversion_epochs;
      inv = train_inversion_model(data.aux, t, p.batch, inv, tr, seed);
      Tensor mean_img(Shape{1, client.images.dim(1), client.images.dim(2), client.images.dim(3)});
      std::size_t m = mean_img.size();
      for (std::size_t i = 0; i < data.aux.size(); ++i)
        for (std::size_t k = 0; k < m; ++k) mean_img[k] += data.aux.images[i * m + k] / static_cast<double>(data.aux.size());
      double baseline = 0.0;
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        auto gt = make_ground_truth(client, detail::case_batch(client, p, seed, r));
        auto rd = fedsgd_on(t.spec, t.params, gt);
        auto res = invert_with_model(inv, rd.update, t.spec, &gt);
        acc.add(res.metrics);
        for (std::size_t i = 0; i < gt.labels.size(); ++i) baseline += psnr_image(detail::image_at(gt.pixels, i), detail::image_at(mean_img, 0));
        if (r == 0) dump_batch(ctx, res.reconstruction, "recon", row);
      }
      row.extra_name = "mean_image_psnr";
      row.extra_value = baseline / static_cast<double>(c.attack.rounds * p.batch);
      break;
    }
    case K::closed_form: {
      Target t = detail::case_target(c, p, client, seed);
      const Layer* first = first_param_layer(t.spec);
      double worst = 0.0;
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        auto gt = make_ground_truth(client, sample_batch(client.size(), 1, seed, r));
        auto rd = fedsgd_on(t.spec, t.params, gt);
        auto inv = closed_form_linear_invert(rd.update, t.spec, first->name);
        std::size_t k = 0;
        while (k < inv.active.size() && !inv.active[k]) ++k;
        if (k == inv.active.size()) throw std::runtime_error("closed-form: no active neuron in the first layer");
        Tensor x = inv.rows[k];
        worst = std::max(worst, max_abs_diff(x, detail::image_at(gt.inputs, 0)));
        Shape bs = x.shape();
        bs.insert(bs.begin(), 1);
        Tensor recon = denormalize(x.reshaped(bs), t.norm);
        for (double& v : recon.data()) v = std::clamp(v, 0.0, 1.0);
        acc.add(evaluate(gt.pixels, recon));
        if (r == 0) dump_batch(ctx, recon, "recon", row);
      }
      row.extra_name = "max_abs_error";
      row.extra_value = worst;
      break;
    }
    case K::imprint: {
      ModelSpec base = detail::case_model(c, p, client.image_shape(), client.classes);
      Params params = build_model(base, seed);
      auto im = build_imprint(base, params, c.attack.bins, normalize(data.aux.images, data.aux.norm));
      std::size_t recovered = 0;
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        auto gt = make_ground_truth(client, sample_batch(client.size(), p.batch, seed, r));
        auto rd = fedsgd_on(im.spec, im.params, gt);
        auto rec = imprint_reconstruct(rd.update, im.module, base.input, &gt);
        recovered += rec.recovered;
        // best candidate per truth image
        Tensor best(gt.pixels.shape());
        std::size_t m = numel(base.input);
        for (std::size_t b = 0; b < p.batch; ++b) {
          Tensor tb = detail::image_at(gt.pixels, b);
          double top = -1.0;
          for (const Tensor& cand : rec.images) {
            Tensor px = denormalize(cand.reshaped(Shape{1, base.input[0], base.input[1], base.input[2]}), client.norm);
            for (double& v : px.data()) v = std::clamp(v, 0.0, 1.0);
            Tensor pi = detail::image_at(px, 0);
            double q = psnr_image(tb, pi);
            if (q > top) {
              top = q;
              std::copy(pi.data().begin(), pi.data().end(), best.data().begin() + static_cast<std::ptrdiff_t>(b * m));
            }
          }
        }
        acc.add(evaluate(gt.pixels, best));
        if (r == 0) dump_batch(ctx, best, "recon", row);
      }
      row.extra_name = "recovered_fraction";
      row.extra_value = static_cast<double>(recovered) / static_cast<double>(c.attack.rounds * p.batch);
      break;
    }
    case K::fishing: {
      Target t = detail::case_target(c, p, client, seed);
      auto plan = fishing_manipulate(t.spec, t.params, c.attack.target_class, c.attack.beta);
      Target mt = t;
      mt.params = plan.params;
      double iso = 0.0;
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        auto idx = sample_batch_with_target(client, p.batch, c.attack.target_class, seed, r);
        auto gt = make_ground_truth(client, idx);
        std::size_t ti = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          if (gt.labels[i] == c.attack.target_class) ti = i;
        }
        auto lone = make_ground_truth(client, {idx[ti]});
        auto batch_update = fedsgd_on(mt.spec, mt.params, gt).update;
        iso += isolation_score(batch_update, fedsgd_on(mt.spec, mt.params, lone).update);
        cfg.seed = CounterRng(case_seed).derive(r).next_u64();
        auto res = fishing_then_invert(batch_update, mt, plan, cfg, &lone);
        acc.add(res.metrics);
        if (r == 0) dump_batch(ctx, res.reconstruction, "recon", row);
      }
      row.extra_name = "isolation";
      row.extra_value = iso / static_cast<double>(c.attack.rounds);
      break;
    }
    case K::defense: {
      ModelSpec base = detail::case_model(c, p, client.image_shape(), client.classes);
      Params params = build_model(base, seed);
      ReferenceSpec ref = ReferenceSpec::of(base);
      auto im = build_imprint(base, params, c.attack.bins, normalize(data.aux.images, data.aux.norm));
      auto plan = fishing_manipulate(base, params, c.attack.target_class, c.attack.beta);
      auto clean = defend(base, params, ref);
      auto imp = defend(im.spec, im.params, ref);
      auto fish = defend(base, plan.params, ref);
      int correct = clean.passed() + !imp.passed() + !fish.passed();
      row.extra_name = "correct_verdicts";
      row.extra_value = correct;
      row.note = "clean:" + clean.csv_row() + " imprint:" + imp.csv_row() + " fishing:" + fish.csv_row();
      break;
    }
    case K::metrics_analysis: {
      Target t = detail::case_target(c, p, client, seed);
      if (p.batch < 2) throw std::invalid_argument("metrics-analysis needs batch >= 2");
      double sim = 0.0;
      for (std::size_t r = 0; r < c.attack.rounds; ++r) {
        auto gt = make_ground_truth(client, detail::case_batch(client, p, seed, r));
        sim += mean_off_diagonal(gradient_cosine_matrix(t.spec, t.params, gt.inputs, gt.labels));
      }
      row.extra_name = "mean_gradient_cosine";
      row.extra_value = sim / static_cast<double>(c.attack.rounds);
      break;
    }
  }
  acc.store(row);
}

// ---------------------------------------------------------------------------
// run()

struct RunSummary {
  std::filesystem::path directory;
  std::size_t rows = 0;
  std::size_t errors = 0;
};

/// Case-level RNG stream: a pure function of (seed, case index).
inline std::uint64_t case_seed(std::uint64_t seed, std::size_t case_index) { return CounterRng(seed).derive(case_index).next_u64(); }

inline RunSummary run(const ExperimentConfig& c, std::size_t threads = worker_count(), std::ostream* log = nullptr) {
  validate(c);
  auto cases = expand_cases(c);
  std::filesystem::create_directories(c.output);
  std::filesystem::path images = c.output / "images";
  if (c.dump_images) std::filesystem::create_directories(images);

  {
    std::ofstream m(c.output / "manifest.txt", std::ios::trunc);
    m << "gialab " << kVersion << "\ncsv_schema " << kCsvSchema << "\ncolumns " << results_header() << "\ncases "
      << cases.size() << "\nseeds " << c.seeds.size() << "\nrows " << cases.size() * c.seeds.size() << "\n\n" << to_text(c);
  }

  std::size_t jobs = cases.size() * c.seeds.size();
  std::vector<ResultRow> rows(jobs);
  std::vector<bool> done(jobs, false);
  std::size_t flushed = 0, errors = 0;
  std::mutex mu;
  std::ofstream csv(c.output / "results.csv", std::ios::trunc);
  csv << results_header() << '\n';
  csv.flush();

  parallel_for(jobs, threads, [&](std::size_t j) {
    std::size_t ci = j / c.seeds.size();
    std::uint64_t seed = c.seeds[j % c.seeds.size()];
    ResultRow row;
    row.experiment = c.id;
    row.kind = to_string(c.kind);
    row.case_index = ci;
    row.seed = seed;
    row.point = cases[ci];
    auto t0 = std::chrono::steady_clock::now();
    CaseContext ctx;
    if (c.dump_images) ctx = {images, "case" + std::to_string(ci) + "_seed" + std::to_string(seed)};
    try {
      run_case(c, cases[ci], seed, case_seed(seed, ci), ctx, row);
    } catch (const std::exception& e) {
      row.status = "error";
      row.note = e.what();
    }
    row.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::lock_guard<std::mutex> lock(mu);
    rows[j] = std::move(row);
    done[j] = true;
    while (flushed < jobs && done[flushed]) {
      if (rows[flushed].status != "ok") ++errors;
      csv << to_csv(rows[flushed]) << '\n';
      if (log) *log << "[" << (flushed + 1) << "/" << jobs << "] case " << rows[flushed].case_index << " seed " << rows[flushed].seed
                    << ": " << rows[flushed].status << '\n';
      ++flushed;
    }
    csv.flush();
  });
  return {c.output, jobs, errors};
}

/// Parses results.csv back into header + rows of fields (quoted fields kept
/// verbatim without quotes).
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      char ch = line[i];
      if (quoted) {
        if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (ch == '"') {
          quoted = false;
        } else {
          cur += ch;
        }
      } else if (ch == '"') {
        quoted = true;
      } else if (ch == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    fields.push_back(cur);
    out.push_back(std::move(fields));
  }
  return out;
}

}  // namespace gialab
