// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "inco/inco.hpp"
#include "oracles.hpp"

using namespace inco;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

__attribute__((format(printf, 1, 2))) std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

// 1. Strict-branch projection against the halfspace QP.
Outcome theorem1_oracle() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> dim(2, 64);
  double worst_rel = 0.0, worst_residual = 0.0;
  int corrected = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = dim(rng);
    const Tensor g0 = oracle::random_tensor({n}, rng);
    const Tensor gk = oracle::random_tensor({n}, rng);
    const auto out = project_theorem1(g0, gk);
    const Eigen::VectorXd ref = oracle::halfspace_qp(oracle::to_eigen_vec(g0), oracle::to_eigen_vec(gk)).x;
    const Eigen::VectorXd got = oracle::to_eigen_vec(out.g_opt);
    worst_rel = std::max(worst_rel, (got - ref).norm() / std::max(ref.norm(), 1e-300));
    const double scale = norm(g0) * norm(out.g_opt);
    worst_residual = std::min(worst_residual, inner(out.g_opt, g0) / std::max(scale, 1e-300));
    corrected += out.branch == ProjectionBranch::Corrected;
  }
  return {worst_rel < 1e-8 && worst_residual >= -1e-9,
          fmt("max rel err %.3g, min scaled residual %.3g, corrected %d/1000", worst_rel, worst_residual, corrected)};
}

// 2. Matrix form equals the flattened vector form.
Outcome matrix_vector() {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<std::size_t> side(1, 12);
  int mismatches = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t m = side(rng), k = side(rng);
    const Tensor g0 = oracle::random_tensor({m, k}, rng);
    const Tensor gk = oracle::random_tensor({m, k}, rng);
    const auto mat = project_theorem1(g0, gk);
    const auto vec = project_theorem1(g0.flattened(), gk.flattened());
    const bool same = mat.g_opt.flattened() == vec.g_opt && mat.alpha == vec.alpha && mat.beta == vec.beta &&
                      mat.theta == vec.theta && mat.branch == vec.branch;
    mismatches += !same;
  }
  return {mismatches == 0, fmt("%d/500 mismatches", mismatches)};
}

// 3. Backward pass against central differences.
Outcome finite_differences() {
  StageNetConfig cfg;
  cfg.input_dim = 6;
  cfg.stage_widths = {8, 6, 8};
  cfg.stages = 3;
  cfg.num_classes = 4;
  cfg.activation = Activation::Tanh;
  const ModelWeights start = init_model(cfg, GroupSpec{1, {2, 3, 2}, {0}}, 303);
  std::mt19937_64 rng(304);
  const Tensor x = oracle::random_tensor({9, 6}, rng);
  std::vector<int> y;
  for (int i = 0; i < 9; ++i) y.push_back(std::uniform_int_distribution<int>(0, 3)(rng));
  ModelWeights w = start;
  const ParamMap grads = backward(forward(w, x).cache, y);
  std::vector<ParamKey> keys;
  for (const auto& [k, _] : grads) keys.push_back(k);
  const double h = 1e-5;
  double worst = 0.0;
  for (int p = 0; p < 200; ++p) {
    const ParamKey key = keys[std::uniform_int_distribution<std::size_t>(0, keys.size() - 1)(rng)];
    Tensor& t = param_ref(w, key);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, t.size() - 1)(rng);
    const double orig = t[i];
    t[i] = orig + h;
    const double up = cross_entropy(forward(w, x).logits, y);
    t[i] = orig - h;
    const double down = cross_entropy(forward(w, x).logits, y);
    t[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    const double an = grads.at(key)[i];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
  return {worst < 1e-4, fmt("max rel err %.3g over 200 coordinates", worst)};
}

// 4. Exhaustive comparison with a naive double loop over groups and clients.
void for_each_depths(int groups, int max_depth, std::vector<int>& cur, const std::function<void()>& f) {
  if (static_cast<int>(cur.size()) == groups) return f();
  for (int d = cur.empty() ? 1 : cur.back(); d <= max_depth; ++d) {
    cur.push_back(d);
    for_each_depths(groups, max_depth, cur, f);
    cur.pop_back();
  }
}

void for_each_sizes(int groups, int max_size, std::vector<int>& cur, const std::function<void()>& f) {
  if (static_cast<int>(cur.size()) == groups) return f();
  for (int s = 1; s <= max_size; ++s) {
    cur.push_back(s);
    for_each_sizes(groups, max_size, cur, f);
    cur.pop_back();
  }
}

Outcome aggregation_bruteforce() {
  constexpr int kMaxGroups = 5, kMaxClients = 4, kMaxDepth = 6;
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> value(-1.0, 1.0);
  auto owns = [](int depth, const LayerKey& k) { return k.kind != LayerKind::Block || depth > k.index; };
  std::size_t configs = 0, mismatches = 0;
  for (int g = 1; g <= kMaxGroups; ++g) {
    std::vector<int> depths, sizes;
    for_each_depths(g, kMaxDepth, depths, [&] {
      std::vector<LayerKey> all_layers{LayerKey::projection(0), LayerKey::classifier(1)};
      for (int i = 0; i < depths.back(); ++i) all_layers.push_back(LayerKey::block(0, i));
      // Group j owns client slots kMaxClients*j .. kMaxClients*j + kMaxClients - 1.
      Contributions pool;
      for (int j = 0; j < g; ++j)
        for (int c = kMaxClients * j; c < kMaxClients * (j + 1); ++c)
          for (const auto& k : all_layers)
            if (owns(depths[j], k)) pool[c][ParamKey{k, ParamRole::Weight}] = Tensor::vector({value(rng), value(rng)});

      for_each_sizes(g, kMaxClients, sizes, [&] {
        ++configs;
        std::vector<GroupSpec> groups;
        for (int j = 0; j < g; ++j) {
          std::vector<int> ids;
          for (int c = 0; c < sizes[j]; ++c) ids.push_back(kMaxClients * j + c);
          groups.push_back(GroupSpec{j + 1, {depths[j]}, ids});
        }
        const ParamMap got = aggregate(build_plan(groups, 1), pool);
        for (const auto& k : all_layers) {
          double sum[2] = {0.0, 0.0};
          int count = 0;
          for (const auto& gs : groups) {
            if (!owns(gs.depth_per_stage[0], k)) continue;
            for (int c : gs.client_ids) {
              const Tensor& t = pool.at(c).at(ParamKey{k, ParamRole::Weight});
              sum[0] += t[0];
              sum[1] += t[1];
              ++count;
            }
          }
          const auto it = got.find(ParamKey{k, ParamRole::Weight});
          if (it == got.end() || it->second[0] != sum[0] / count || it->second[1] != sum[1] / count) ++mismatches;
        }
        if (got.size() != all_layers.size()) ++mismatches;
      });
    });
  }
  return {mismatches == 0, fmt("%zu configurations, %zu mismatches", configs, mismatches)};
}

// 5. Linear CKA invariances and the HSIC oracle.
Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

Outcome cka_properties() {
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<std::size_t> rows(4, 40), cols(1, 10);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  double self = 0.0, rotation = 0.0, scaling = 0.0, hsic = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = rows(rng), p = cols(rng);
    const Tensor x = oracle::random_tensor({n, p}, rng);
    const Tensor y = oracle::random_tensor({n, cols(rng)}, rng);
    const Tensor r = from_eigen(oracle::random_orthogonal(static_cast<Eigen::Index>(p), rng));
    const double v = linear_cka(x, y);
    self = std::max(self, std::abs(linear_cka(x, x) - 1.0));
    rotation = std::max(rotation, std::abs(linear_cka(matmul(x, r), y) - v));
    scaling = std::max(scaling, std::abs(linear_cka(x * scale(rng), y) - v));
    hsic = std::max(hsic, std::abs(oracle::hsic_cka(oracle::to_eigen_mat(x), oracle::to_eigen_mat(y)) - v));
  }
  const bool ok = self <= 1e-9 && rotation <= 1e-9 && scaling <= 1e-9 && hsic <= 1e-9;
  return {ok, fmt("self %.3g, rotation %.3g, scaling %.3g, hsic %.3g", self, rotation, scaling, hsic)};
}

// 6. Gradient descent on a quadratic with L = 4.
Outcome convergence_sanity() {
  const double r3 = std::sqrt(3.0);
  const Tensor a = Tensor::matrix(3, 3, {2 * r3, 0, 0, 0, r3, 0, 0, 0, 0.5 * r3});
  const LeastSquaresObjective obj(a, {1.0, -2.0, 0.5});
  const ParamMap x0{{LeastSquaresObjective::kKey, Tensor::vector({3.0, 3.0, 3.0})}};
  const Eigen::MatrixXd m = oracle::to_eigen_mat(a);
  const double L = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m.transpose() * m / 3.0).eigenvalues().maxCoeff();

  const auto safe = gradient_descent_losses(obj, x0, 0.5 * (2.0 / L), 200);
  bool monotone = true;
  for (std::size_t i = 1; i < safe.size(); ++i) monotone &= safe[i] <= safe[i - 1];
  const auto unsafe = gradient_descent_losses(obj, x0, 4.0 / L, 50);
  int first_increase = -1;
  for (std::size_t i = 1; i < unsafe.size() && first_increase < 0; ++i)
    if (unsafe[i] > unsafe[i - 1]) first_increase = static_cast<int>(i);
  return {monotone && first_increase > 0,
          fmt("L=%.12g, eta=1/L non-increasing: %s, eta=4/L first increase at step %d", L, monotone ? "yes" : "no",
              first_increase)};
}

// 7. Bound evaluators on hand-derived examples.
Outcome bound_evaluators() {
  ConvergenceConstants drift;
  drift.L = 1.0;
  drift.eta = 1.0;
  const double e3 = std::abs(drift_bound(drift, 5.0, 2.0) - 4.0);

  ConvergenceConstants eta;
  eta.L = 1.0;
  eta.sigma2 = 1.0;
  eta.rho = 1.0;
  eta.gamma = 0.5;
  eta.E = 5;
  const double e4 = std::abs(eta_bound_monotone(eta, 10.0).value - 14.0 / 22.0);

  ConvergenceConstants t;
  t.L = 1.0;
  t.eta = 0.1;
  t.kappa = 1.0;
  t.epsilon = 1.0;
  const double e5 = std::abs(rounds_to_epsilon(t) - 2.0 / (0.1 * 1.9));

  const double worst = std::max({e3, e4, e5});
  return {worst <= 1e-12, fmt("drift %.3g, eta %.3g, rounds %.3g", e3, e4, e5)};
}

// 8-10. Directional experiment.
struct MethodStats {
  double acc = 0.0;
  double deep_beta = std::nan("");
  double deepest_cka = 0.0;
};

MethodStats seed_average(const std::vector<RunSummary>& runs) {
  MethodStats s;
  double beta = 0.0;
  int beta_n = 0;
  for (const auto& r : runs) {
    const auto& row = r.final_row();
    s.acc += row.mean_acc;
    s.deepest_cka += row.cka_stage.back();
    if (const auto b = mean_deep_beta_rate(row)) {
      beta += *b;
      ++beta_n;
    }
  }
  s.acc /= static_cast<double>(runs.size());
  s.deepest_cka /= static_cast<double>(runs.size());
  if (beta_n > 0) s.deep_beta = beta / beta_n;
  return s;
}

struct Directional {
  MethodStats inco, inco_wo_opt, hetero, fedavg;
  double seconds = 0.0;
};

Directional run_directional(const ExperimentConfig& base) {
  const auto t0 = std::chrono::steady_clock::now();
  auto with = [&](Method m, bool optimize) {
    ExperimentConfig cfg = base;
    cfg.method = m;
    cfg.surgery.optimize = optimize;
    return seed_average(run_all(cfg));
  };
  Directional d;
  d.inco = with(Method::InCo, true);
  d.inco_wo_opt = with(Method::InCo, false);
  d.hetero = with(Method::HeteroAvg, true);
  d.fedavg = with(Method::FedAvgGroupwise, true);
  d.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return d;
}

// 11. Byte-identical CSV across invocations and thread counts.
Outcome determinism(const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  cfg.seeds = {base.seeds.front()};
  cfg.eta_diagnostics = true;
  auto csv = [&](int threads) {
    ExperimentConfig c = cfg;
    c.threads = threads;
    std::ostringstream os;
    write_metrics_csv(os, c, run_all(c));
    return os.str();
  };
  const std::string a = csv(1), b = csv(1), c = csv(4);
  return {a == b && a == c && !a.empty(), fmt("%zu bytes, repeat %s, 1 vs 4 threads %s", a.size(),
                                               a == b ? "identical" : "differs", a == c ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string config_path;
  std::vector<int> only;
  app.add_option("--config", config_path, "Directional experiment config")->required()->check(CLI::ExistingFile);
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  int failures = 0;
  auto report = [&](int id, const char* name, double budget, const std::function<Outcome()>& f) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (budget > 0.0 && s > budget) {
      o.pass = false;
      o.detail += fmt("; over budget %.0f s", budget);
    }
    failures += !o.pass;
    std::printf("%s [%d] %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), s);
    std::fflush(stdout);
  };

  report(1, "theorem1-oracle", 10, theorem1_oracle);
  report(2, "matrix-vector", 5, matrix_vector);
  report(3, "finite-differences", 10, finite_differences);
  report(4, "aggregation-bruteforce", 5, aggregation_bruteforce);
  report(5, "cka-properties", 10, cka_properties);
  report(6, "convergence-sanity", 5, convergence_sanity);
  report(7, "bound-evaluators", 1, bound_evaluators);

  ExperimentConfig base;
  try {
    base = load_config(config_path);
    base.validate();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config: %s\n", e.what());
    return 2;
  }
  base.threads = static_cast<int>(std::clamp(std::thread::hardware_concurrency(), 1u, 8u));

  if (wanted(8) || wanted(9) || wanted(10)) {
    Directional d;
    std::string error;
    try {
      d = run_directional(base);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto shared = [&](bool ok, std::string detail) {
      if (!error.empty()) return Outcome{false, "error: " + error};
      if (d.seconds > 600.0) return Outcome{false, detail + fmt("; over budget 600 s")};
      return Outcome{ok, detail};
    };
    std::printf("  directional runs: %.1f s, seeds %zu\n", d.seconds, base.seeds.size());
    report(8, "directional-accuracy", 0, [&] {
      const double a = 100.0 * (d.inco.acc - d.hetero.acc), b = 100.0 * (d.hetero.acc - d.fedavg.acc);
      return shared(a >= 1.0 && b >= 1.0,
                    fmt("acc inco %.4f, hetero %.4f, fedavg %.4f; margins %+.2f, %+.2f points", d.inco.acc,
                        d.hetero.acc, d.fedavg.acc, a, b));
    });
    report(9, "beta-rate-direction", 0, [&] {
      return shared(d.inco.deep_beta > d.inco_wo_opt.deep_beta,
                    fmt("deep beta>0 rate optimize %.4f vs without %.4f", d.inco.deep_beta, d.inco_wo_opt.deep_beta));
    });
    report(10, "cka-direction", 0, [&] {
      return shared(d.inco.deepest_cka > d.fedavg.deepest_cka,
                    fmt("deepest-stage CKA inco %.4f vs fedavg %.4f", d.inco.deepest_cka, d.fedavg.deepest_cka));
    });
  }
  report(11, "determinism", 120, [&] { return determinism(base); });

  std::printf("%s: %d failed\n", failures == 0 ? "ALL PASS" : "SOME FAILED", failures);
  return failures == 0 ? 0 : 1;
}
