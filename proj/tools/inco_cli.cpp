// Command-line front end: experiment runs and one-shot diagnostics.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "inco/inco.hpp"

namespace {

// Comma-separated numbers, one matrix row per line. A single line gives a
// vector.
inco::Tensor read_csv_tensor(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw inco::Error("cannot open " + path);
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw inco::Error(path + ": not a number: '" + cell + "'");
      }
      ++n;
    }
    if (rows > 0 && n != cols) throw inco::Error(path + ": ragged rows");
    cols = n;
    ++rows;
  }
  if (rows == 0) throw inco::Error(path + ": no data");
  if (rows == 1) return inco::Tensor::vector(std::move(values));
  return inco::Tensor::matrix(rows, cols, std::move(values));
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void print_tensor(std::ostream& os, const inco::Tensor& t) {
  const std::size_t cols = t.rank() == 2 ? t.cols() : t.size();
  for (std::size_t i = 0; i < t.size(); ++i) os << fmt17(t[i]) << ((i + 1) % cols == 0 ? '\n' : ',');
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
            std::optional<int> threads) {
  auto cfg = inco::load_config(config_path);
  if (seed) cfg.seeds = {*seed};
  if (threads) cfg.threads = *threads;
  cfg.validate();

  std::filesystem::create_directories(out_dir);
  const auto csv_path = std::filesystem::path(out_dir) / "metrics.csv";
  const auto json_path = std::filesystem::path(out_dir) / "summary.json";

  std::vector<inco::RunSummary> runs;
  for (auto s : cfg.seeds) {
    runs.push_back(inco::run_experiment(cfg, s));
    const auto& r = runs.back();
    const auto& f = r.final_row();
    std::cout << r.method << " seed=" << s << " round=" << f.round << " mean_acc=" << inco::format_float(f.mean_acc)
              << " wall_clock_s=" << inco::format_float(r.wall_clock_seconds) << '\n';
  }

  std::ofstream csv(csv_path);
  inco::write_metrics_csv(csv, cfg, runs);

  nlohmann::json summary;
  summary["config"] = inco::to_json(cfg);
  summary["runs"] = nlohmann::json::array();
  for (const auto& r : runs)
    summary["runs"].push_back({{"method", r.method},
                               {"seed", r.seed},
                               {"final", inco::to_json(r.final_row())},
                               {"wall_clock_seconds", r.wall_clock_seconds},
                               {"zero_anchor_fallbacks", r.zero_anchor_fallbacks},
                               {"skipped_layers", r.skipped_layers}});
  summary["artifacts"] = {{"metrics_csv", csv_path.string()}, {"summary_json", json_path.string()}};
  std::ofstream(json_path) << summary.dump(2) << '\n';
  std::cout << "wrote " << csv_path.string() << " and " << json_path.string() << '\n';
  return 0;
}

int cmd_project(const std::string& g0_path, const std::string& gk_path, bool normalize, bool strict) {
  const auto g0 = read_csv_tensor(g0_path);
  const auto gk = read_csv_tensor(gk_path);
  inco::SurgeryConfig cfg;
  cfg.normalize = normalize;
  cfg.optimize = true;
  cfg.always_subtract = !strict;
  const auto res = inco::inco_update_traced(g0, gk, cfg);
  const auto& p = *res.projection;
  std::cout << "theta=" << fmt17(p.theta) << '\n'
            << "alpha=" << fmt17(p.alpha) << '\n'
            << "beta=" << fmt17(p.beta) << '\n'
            << "branch=" << (p.branch == inco::ProjectionBranch::Identity ? "identity" : "corrected") << '\n'
            << "g_opt=\n";
  print_tensor(std::cout, res.update);
  return 0;
}

int cmd_cka(const std::string& a_path, const std::string& b_path) {
  auto a = read_csv_tensor(a_path);
  auto b = read_csv_tensor(b_path);
  std::cout << fmt17(inco::linear_cka(a, b)) << '\n';
  return 0;
}

int cmd_estimate(const std::string& config_path, std::optional<std::uint64_t> seed, int probes,
                 std::optional<std::size_t> batch_size) {
  auto cfg = inco::load_config(config_path);
  cfg.validate();
  const std::uint64_t s = seed.value_or(cfg.seeds.front());
  const auto data = inco::prepare_data(cfg, s);

  inco::Dataset pooled;
  {
    std::vector<double> values;
    for (const auto& [_, d] : data.train) {
      values.insert(values.end(), d.features.values().begin(), d.features.values().end());
      pooled.labels.insert(pooled.labels.end(), d.labels.begin(), d.labels.end());
    }
    pooled.features = inco::Tensor::matrix(pooled.labels.size(), static_cast<std::size_t>(cfg.model.input_dim),
                                           std::move(values));
    pooled.num_classes = cfg.model.num_classes;
  }
  const auto model = inco::init_model(cfg.model, cfg.groups.back(), s);
  inco::StageNetObjective obj(model, pooled);
  inco::EstimatorOptions opts;
  opts.probes = probes;
  opts.batch_size = batch_size.value_or(static_cast<std::size_t>(cfg.trainer.batch_size));
  opts.seed = s;
  const auto est = inco::estimate_constants(obj, inco::params_of(model), opts);

  auto c = est.as_constants();
  c.E = cfg.trainer.local_epochs;
  c.eta = cfg.trainer.learning_rate;
  const double S = c.E * est.full_grad_norm_sq;
  std::cout << "L_hat,sigma2_hat,rho_hat,gamma_hat,grad_norm_sq,batches,E,eta,eta_bound,eta_admissible\n";
  std::string bound = "NA", admissible = "NA";
  if (c.L > 0.0) {
    const auto eb = inco::eta_bound_monotone(c, S);
    bound = inco::format_float(eb.value);
    admissible = eb.admissible ? "true" : "false";
  }
  std::cout << inco::format_float(est.L) << ',' << inco::format_float(est.sigma2) << ','
            << inco::format_float(est.rho) << ',' << inco::format_float(est.gamma) << ','
            << inco::format_float(est.full_grad_norm_sq) << ',' << est.batches << ',' << c.E << ','
            << inco::format_float(c.eta) << ',' << bound << ',' << admissible << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"InCo Aggregation federated-learning simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  auto* run = app.add_subcommand("run", "Run an experiment from a TOML config");
  run->add_option("--config", config_path, "Experiment config (TOML)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Run only this seed");
  run->add_option("--out", out_dir, "Output directory for metrics.csv and summary.json");
  run->add_option("--threads", threads, "Worker threads for local training");

  std::string g0_path, gk_path;
  bool normalize = false, strict = false;
  auto* project = app.add_subcommand("project", "Project a gradient onto the anchor halfspace");
  project->add_option("--g0", g0_path, "Anchor gradient (CSV)")->required()->check(CLI::ExistingFile);
  project->add_option("--gk", gk_path, "Deep-layer gradient (CSV)")->required()->check(CLI::ExistingFile);
  project->add_flag("--normalize", normalize, "Normalize both gradients and rescale the result");
  project->add_flag("--strict-branch", strict, "Leave gk untouched when beta >= 0");

  std::string fa, fb;
  auto* cka = app.add_subcommand("cka", "Linear CKA between two feature matrices");
  cka->add_option("--features-a", fa, "Feature matrix, n x p (CSV)")->required()->check(CLI::ExistingFile);
  cka->add_option("--features-b", fb, "Feature matrix, n x q (CSV)")->required()->check(CLI::ExistingFile);

  std::string est_config;
  std::optional<std::uint64_t> est_seed;
  int probes = 8;
  std::optional<std::size_t> est_batch;
  auto* est = app.add_subcommand("estimate-constants", "Estimate L, sigma^2, rho and Gamma at initialization");
  est->add_option("--config", est_config, "Experiment config (TOML)")->required()->check(CLI::ExistingFile);
  est->add_option("--seed", est_seed, "Seed (default: first seed in the config)");
  est->add_option("--probes", probes, "Smoothness probes")->check(CLI::PositiveNumber);
  est->add_option("--batch-size", est_batch, "Minibatch size (default: trainer.batch_size)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, seed, out_dir, threads);
    if (*project) return cmd_project(g0_path, gk_path, normalize, strict);
    if (*cka) return cmd_cka(fa, fb);
    if (*est) return cmd_estimate(est_config, est_seed, probes, est_batch);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
