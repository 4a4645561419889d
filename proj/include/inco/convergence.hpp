#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "inco/data.hpp"
#include "inco/error.hpp"
#include "inco/layer_key.hpp"
#include "inco/model.hpp"
#include "inco/rng.hpp"

namespace inco {

/// Smoothness, gradient variance, gradient-norm and cross-layer covariance
/// constants, plus the schedule (E, eta) and target (kappa, epsilon).
/// rho is the gradient-norm bound itself, not its square.
struct ConvergenceConstants {
  double L = 0.0;
  double sigma2 = 0.0;
  double rho = 0.0;
  double gamma = 0.0;
  int E = 1;
  double eta = 0.0;
  double kappa = 0.0;
  double epsilon = 0.0;

  void validate() const {
    if (L < 0 || sigma2 < 0 || rho < 0 || gamma < 0 || eta < 0 || kappa < 0 || epsilon < 0)
      throw ConfigError("convergence constants must be nonnegative");
    if (E < 1) throw ConfigError("convergence constants: E must be >= 1");
  }
};

/// Upper bound on the next round's loss given this round's loss and
/// S = sum over local steps of |grad|^2.
inline double drift_bound(const ConvergenceConstants& c, double loss_t, double grad_norm_sq_sum) {
  c.validate();
  const double eta = c.eta, L = c.L, rho2 = c.rho * c.rho;
  return loss_t - (eta - L * eta * eta / 2.0) * grad_norm_sq_sum + (L * c.E * eta * eta / 2.0) * c.sigma2 +
         2.0 * eta * (c.gamma + rho2) + L * eta * eta * (2.0 * rho2 + c.sigma2 + c.gamma);
}

struct EtaBound {
  double value = 0.0;
  bool admissible = false;  // false when value <= 0: no step size qualifies
};

/// Largest learning rate for which the loss still decreases monotonically.
inline EtaBound eta_bound_monotone(const ConvergenceConstants& c, double grad_norm_sq_sum) {
  c.validate();
  if (c.L == 0.0) throw ConvergenceError("eta bound: L must be > 0");
  const double s = grad_norm_sq_sum, rho2 = c.rho * c.rho;
  const double denom = c.L * (s + c.E * rho2 + 2.0 * (2.0 * rho2 + c.sigma2 + c.gamma));
  if (!(denom > 0.0)) throw ConvergenceError("eta bound: denominator is not positive");
  const double value = (2.0 * s - 4.0 * (c.gamma + rho2)) / denom;
  return {value, value > 0.0};
}

/// Rounds after which the average squared gradient norm is below epsilon.
inline double rounds_to_epsilon(const ConvergenceConstants& c) {
  c.validate();
  const double eta = c.eta, L = c.L, rho2 = c.rho * c.rho;
  const double inner_term = (2.0 - L * eta) * c.epsilon - 3.0 * L * eta * c.sigma2 -
                            2.0 * (2.0 + L * eta) * c.gamma - 4.0 * (1.0 + L * eta) * rho2;
  const double denom = c.E * eta * inner_term;
  if (!(denom > 0.0)) throw ConvergenceError("epsilon not reachable with these constants");
  return 2.0 * c.kappa / denom;
}

// ---------------------------------------------------------------------------
// Empirical estimators

/// Anything with a minibatch gradient over a parameter map.
template <class O>
concept GradientObjective = requires(const O& o, const ParamMap& x, std::span<const std::size_t> batch) {
  { o.sample_count() } -> std::convertible_to<std::size_t>;
  { o.gradient(x, batch) } -> std::same_as<ParamMap>;
};

inline double norm_sq(const ParamMap& m) {
  double acc = 0.0;
  for (const auto& [_, t] : m) acc += inner(t, t);
  return acc;
}

struct EstimatorOptions {
  int probes = 8;
  std::size_t batch_size = 64;
  double perturbation = 1e-3;  // relative to max(1, |x|)
  std::uint64_t seed = 0;
};

/// Plug-in values for the convergence constants. These are estimates from
/// finitely many probes, not bounds.
struct ConstantEstimates {
  double L = 0.0;
  double sigma2 = 0.0;
  double rho = 0.0;
  double gamma = 0.0;
  double full_grad_norm_sq = 0.0;
  std::size_t batches = 0;

  ConvergenceConstants as_constants() const {
    ConvergenceConstants c;
    c.L = L;
    c.sigma2 = sigma2;
    c.rho = rho;
    c.gamma = gamma;
    return c;
  }
};

/// L: max over probes of |grad(y) - grad(x)| / |y - x|, where each probe
/// direction is the previous gradient difference (a power iteration on the
/// Hessian) starting from a random direction.
/// sigma^2: max over parameters of the mean squared deviation of minibatch
/// gradients from the full gradient. Minibatches are contiguous slices.
/// rho: largest minibatch gradient norm.
/// Gamma: max over same-stage block pairs of the covariance of their
/// minibatch gradient norms.
template <GradientObjective O>
ConstantEstimates estimate_constants(const O& objective, const ParamMap& x, const EstimatorOptions& opts) {
  const std::size_t n = objective.sample_count();
  if (n < 2) throw DataError("estimate_constants: need at least two samples");
  if (opts.batch_size < 1) throw ConfigError("estimate_constants: batch_size must be >= 1");
  if (opts.probes < 1) throw ConfigError("estimate_constants: probes must be >= 1");

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const ParamMap g_full = objective.gradient(x, all);

  ConstantEstimates est;
  est.full_grad_norm_sq = norm_sq(g_full);

  // Smoothness.
  auto rng = make_rng(opts.seed, {tag(Stream::Diagnostics)});
  std::normal_distribution<double> normal(0.0, 1.0);
  const double h = opts.perturbation * std::max(1.0, std::sqrt(norm_sq(x)));
  ParamMap dir;
  auto random_dir = [&] {
    dir.clear();
    for (const auto& [k, t] : x) {
      Tensor r = Tensor::zeros_like(t);
      for (double& v : r.values()) v = normal(rng);
      dir.emplace(k, std::move(r));
    }
  };
  random_dir();
  for (int p = 0; p < opts.probes; ++p) {
    double dn = std::sqrt(norm_sq(dir));
    if (!(dn > 0.0)) {
      random_dir();
      dn = std::sqrt(norm_sq(dir));
    }
    ParamMap y = x;
    for (auto& [k, t] : y) t = axpy(t, h / dn, dir.at(k));
    double step_sq = 0.0;
    for (const auto& [k, t] : y) {
      const Tensor d = t - x.at(k);
      step_sq += inner(d, d);
    }
    const ParamMap g_y = objective.gradient(y, all);
    ParamMap diff;
    for (const auto& [k, t] : g_y) diff.emplace(k, t - g_full.at(k));
    if (step_sq > 0.0) est.L = std::max(est.L, std::sqrt(norm_sq(diff) / step_sq));
    dir = std::move(diff);
  }

  // Minibatch statistics.
  std::vector<ParamMap> batch_grads;
  for (std::size_t lo = 0; lo < n; lo += opts.batch_size) {
    const std::span<const std::size_t> idx(all.data() + lo, std::min(opts.batch_size, n - lo));
    batch_grads.push_back(objective.gradient(x, idx));
  }
  est.batches = batch_grads.size();
  const double b = static_cast<double>(batch_grads.size());

  for (const auto& [k, gf] : g_full) {
    double var = 0.0;
    for (const auto& gb : batch_grads) {
      const Tensor d = gb.at(k) - gf;
      var += inner(d, d);
    }
    est.sigma2 = std::max(est.sigma2, var / b);
  }
  for (const auto& gb : batch_grads) est.rho = std::max(est.rho, std::sqrt(norm_sq(gb)));

  std::vector<ParamKey> keys;
  for (const auto& [k, _] : g_full) keys.push_back(k);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    for (std::size_t j = i + 1; j < keys.size(); ++j) {
      const auto &a = keys[i], &c = keys[j];
      if (!a.layer.is_block() || !c.layer.is_block() || a.layer.stage != c.layer.stage || a.role != c.role) continue;
      double ma = 0.0, mc = 0.0;
      std::vector<double> na, nc;
      for (const auto& gb : batch_grads) {
        na.push_back(norm(gb.at(a)));
        nc.push_back(norm(gb.at(c)));
        ma += na.back();
        mc += nc.back();
      }
      ma /= b;
      mc /= b;
      double cov = 0.0;
      for (std::size_t t = 0; t < na.size(); ++t) cov += (na[t] - ma) * (nc[t] - mc);
      est.gamma = std::max(est.gamma, cov / b);
    }
  }
  return est;
}

/// Mean cross-entropy objective of a fixed StageNet architecture on a shard.
class StageNetObjective {
 public:
  StageNetObjective(ModelWeights structure, Dataset shard)
      : structure_(std::move(structure)), shard_(std::move(shard)) {}

  std::size_t sample_count() const { return shard_.size(); }

  ModelWeights with_params(const ParamMap& x) const {
    ModelWeights w = structure_;
    for (const auto& [k, t] : x) param_ref(w, k) = t;
    return w;
  }

  ParamMap gradient(const ParamMap& x, std::span<const std::size_t> batch) const {
    const ModelWeights w = with_params(x);
    const Dataset d = shard_.subset(batch);
    auto fw = forward(w, d.features);
    return backward(fw.cache, d.labels);
  }

  double loss(const ParamMap& x, std::span<const std::size_t> batch) const {
    const Dataset d = shard_.subset(batch);
    return cross_entropy(forward(with_params(x), d.features).logits, d.labels);
  }

 private:
  ModelWeights structure_;
  Dataset shard_;
};

/// f(w) = 1/(2n) |A w - b|^2 over the rows in the batch. Its Hessian on the
/// full data is AᵀA / n.
class LeastSquaresObjective {
 public:
  static constexpr ParamKey kKey{LayerKey{0, LayerKind::Classifier, 0}, ParamRole::Weight};

  LeastSquaresObjective(Tensor design, std::vector<double> targets)
      : design_(std::move(design)), targets_(std::move(targets)) {
    if (design_.rank() != 2 || design_.rows() != targets_.size())
      throw ShapeError("least squares: design/target size mismatch");
  }

  std::size_t sample_count() const { return targets_.size(); }

  ParamMap gradient(const ParamMap& x, std::span<const std::size_t> batch) const {
    const Tensor& w = x.at(kKey);
    Tensor g({design_.cols()});
    for (auto i : batch) {
      const auto row = design_.row(i);
      double r = -targets_[i];
      for (std::size_t j = 0; j < row.size(); ++j) r += row[j] * w[j];
      for (std::size_t j = 0; j < row.size(); ++j) g[j] += r * row[j];
    }
    g /= static_cast<double>(batch.size());
    return {{kKey, std::move(g)}};
  }

  double loss(const ParamMap& x, std::span<const std::size_t> batch) const {
    const Tensor& w = x.at(kKey);
    double acc = 0.0;
    for (auto i : batch) {
      const auto row = design_.row(i);
      double r = -targets_[i];
      for (std::size_t j = 0; j < row.size(); ++j) r += row[j] * w[j];
      acc += r * r;
    }
    return acc / (2.0 * static_cast<double>(batch.size()));
  }

 private:
  Tensor design_;
  std::vector<double> targets_;
};

/// Full-batch gradient descent; returns the loss before each step and after
/// the last one (steps + 1 values).
template <GradientObjective O>
std::vector<double> gradient_descent_losses(const O& objective, ParamMap x, double eta, int steps) {
  std::vector<std::size_t> all(objective.sample_count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(steps) + 1);
  for (int s = 0; s < steps; ++s) {
    losses.push_back(objective.loss(x, all));
    const ParamMap g = objective.gradient(x, all);
    for (auto& [k, t] : x) t = axpy(t, -eta, g.at(k));
  }
  losses.push_back(objective.loss(x, all));
  return losses;
}

}  // namespace inco
