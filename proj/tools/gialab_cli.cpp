// gialab command line: run sweeps, the trend bench, result summaries and the
// model-validation defense.
//
// Exit codes: 0 ok, 1 config or input error, 2 case failures, 3 acceptance
// failures (bench verdicts, or a model rejected by `defend`).

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "gialab/gialab.hpp"

namespace {

using namespace gialab;

constexpr int kOk = 0, kConfigError = 1, kCaseFailures = 2, kAcceptanceFailures = 3;

int cmd_run(const std::string& path, std::size_t threads, const std::string& output) {
  ExperimentConfig cfg;
  try {
    cfg = load_config(path);
    if (!output.empty()) cfg.output = output;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  auto summary = run(cfg, threads ? threads : worker_count(), &std::cerr);
  std::cout << summary.rows << " rows (" << summary.errors << " errors) -> " << (summary.directory / "results.csv").string() << '\n';
  return summary.errors ? kCaseFailures : kOk;
}

int cmd_bench(const std::string& csv, const std::vector<int>& only, const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  BenchOptions o;
  o.only = only;
  if (!seeds.empty()) o.seeds = seeds;
  if (threads) o.threads = threads;
  o.log = &std::cerr;
  auto rep = bench_trends(o);
  std::cout << rep.table();
  if (!csv.empty()) {
    std::ofstream f(csv, std::ios::trunc);
    f << rep.csv();
  }
  return rep.all_passed() ? kOk : kAcceptanceFailures;
}

int cmd_inspect(const std::string& path) {
  auto rows = read_csv(path);
  if (rows.empty()) throw std::runtime_error(path + ": empty file");
  const auto& header = rows.front();
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error(path + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  std::size_t c_exp = col("experiment"), c_case = col("case"), c_status = col("status"), c_psnr = col("psnr"), c_ssim = col("ssim"),
              c_xn = col("extra_name"), c_xv = col("extra_value"), c_note = col("note"), c_seed = col("seed");
  struct Agg {
    std::size_t n = 0, errors = 0;
    double psnr = 0, ssim = 0, extra = 0;
    std::size_t psnr_n = 0, ssim_n = 0, extra_n = 0;
    std::string extra_name;
  };
  std::map<std::pair<std::string, long>, Agg> groups;
  std::vector<std::string> failures;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != header.size()) throw std::runtime_error(path + ":" + std::to_string(i + 1) + ": wrong field count");
    Agg& a = groups[{r[c_exp], std::stol(r[c_case])}];
    ++a.n;
    if (r[c_status] != "ok") {
      ++a.errors;
      failures.push_back("case " + r[c_case] + " seed " + r[c_seed] + ": " + r[c_note]);
      continue;
    }
    auto add = [](const std::string& s, double& sum, std::size_t& n) {
      if (s.empty()) return;
      sum += std::stod(s);
      ++n;
    };
    add(r[c_psnr], a.psnr, a.psnr_n);
    add(r[c_ssim], a.ssim, a.ssim_n);
    add(r[c_xv], a.extra, a.extra_n);
    a.extra_name = r[c_xn];
  }
  auto avg = [](double s, std::size_t n) -> std::string {
    if (!n) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << s / static_cast<double>(n);
    return os.str();
  };
  std::cout << std::left << std::setw(24) << "experiment" << std::setw(6) << "case" << std::setw(7) << "rows" << std::setw(8)
            << "errors" << std::setw(10) << "psnr" << std::setw(8) << "ssim" << "extra\n";
  std::size_t errors = 0;
  for (const auto& [key, a] : groups) {
    errors += a.errors;
    std::cout << std::left << std::setw(24) << key.first << std::setw(6) << key.second << std::setw(7) << a.n << std::setw(8)
              << a.errors << std::setw(10) << avg(a.psnr, a.psnr_n) << std::setw(8) << avg(a.ssim, a.ssim_n)
              << (a.extra_name.empty() ? "" : a.extra_name + "=" + avg(a.extra, a.extra_n)) << '\n';
  }
  for (const auto& f : failures) std::cout << "error: " << f << '\n';
  return errors ? kCaseFailures : kOk;
}

int cmd_defend(const std::string& params_path, const std::string& ref_path, std::size_t batch, std::size_t epochs, double lr) {
  ModelFile mf;
  ReferenceSpec ref;
  try {
    mf = load_model(params_path);
    ref = parse_reference(read_file(ref_path));
  } catch (const std::exception& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kConfigError;
  }
  std::optional<ClientConfig> client;
  if (batch) client = ClientConfig{batch, epochs, lr, 0};
  auto rep = defend(mf.spec, mf.params, ref, client);
  std::cout << rep.text();
  return rep.passed() ? kOk : kAcceptanceFailures;
}

int cmd_reference(const std::string& config_path, const std::string& prefix, std::uint64_t seed) {
  ExperimentConfig cfg;
  try {
    cfg = load_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  CasePoint p = expand_cases(cfg).front();
  Shape in{cfg.dataset.channels, p.resolution, p.resolution};
  ModelSpec spec = detail::case_model(cfg, p, in, cfg.dataset.classes);
  std::ofstream(prefix + ".ref", std::ios::trunc) << to_text(ReferenceSpec::of(spec));
  save_model(prefix + ".giap", spec, build_model(spec, seed));
  std::cout << "wrote " << prefix << ".ref and " << prefix << ".giap\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gialab: gradient inversion attack lab"};
  app.set_version_flag("--version", std::string(gialab::kVersion));
  app.require_subcommand(1);

  std::size_t threads = 0;
  std::string config, output;
  auto* run = app.add_subcommand("run", "Run the sweep described by a config file");
  run->add_option("config", config, "Config file")->required();
  run->add_option("-o,--output", output, "Override the output directory");
  run->add_option("-j,--threads", threads, "Worker threads (default: GIA_LAB_THREADS or core count)");

  std::string csv;
  std::vector<int> only;
  std::vector<std::uint64_t> seeds;
  auto* bench = app.add_subcommand("bench", "Run the canned trend suite and print per-criterion verdicts");
  bench->add_option("--csv", csv, "Write the per-check CSV here");
  bench->add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  bench->add_option("--seeds", seeds, "Seeds (default: 11,23,37,41,53)")->delimiter(',');
  bench->add_option("-j,--threads", threads, "Worker threads");

  std::string results;
  auto* inspect = app.add_subcommand("inspect", "Summarize a results.csv per experiment case");
  inspect->add_option("results", results, "results.csv")->required();

  std::string params_file, refspec;
  std::size_t batch = 0, epochs = 1;
  double lr = 0.1;
  auto* defend = app.add_subcommand("defend", "Validate a received model against a reference architecture");
  defend->add_option("params", params_file, "Model file (parameters, optionally with embedded architecture)")->required();
  defend->add_option("refspec", refspec, "Reference architecture file")->required();
  defend->add_option("--batch", batch, "Client batch size; enables protocol lint");
  defend->add_option("--epochs", epochs, "Client local epochs for protocol lint");
  defend->add_option("--lr", lr, "Client learning rate for protocol lint");

  std::string prefix;
  std::uint64_t seed = 0;
  auto* ref = app.add_subcommand("reference", "Write a reference architecture and a clean initialization for a config's model");
  ref->add_option("config", config, "Config file")->required();
  ref->add_option("prefix", prefix, "Output prefix (writes PREFIX.ref and PREFIX.giap)")->required();
  ref->add_option("--seed", seed, "Initialization seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  try {
    if (*run) return cmd_run(config, threads, output);
    if (*bench) return cmd_bench(csv, only, seeds, threads);
    if (*inspect) return cmd_inspect(results);
    if (*defend) return cmd_defend(params_file, refspec, batch, epochs, lr);
    if (*ref) return cmd_reference(config, prefix, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}
