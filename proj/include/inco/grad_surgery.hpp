#pragma once

#include <algorithm>
#include <optional>

#include "inco/error.hpp"
#include "inco/layer_key.hpp"
#include "inco/tensor.hpp"

namespace inco {

struct GradientView {
  ParamKey key;
  Tensor tensor;
};

enum class ProjectionBranch { Identity, Corrected };

/// Result of projecting a deep-layer gradient onto the halfspace
/// {x : <x, g0> >= 0}. theta = beta / alpha is recorded for both branches.
struct ProjectionOutcome {
  Tensor g_opt;
  double theta = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  ProjectionBranch branch = ProjectionBranch::Identity;
};

struct SurgeryConfig {
  bool normalize = true;
  bool optimize = true;
  // Apply gk - theta*g0 whatever the sign of beta (the server update rule
  // used in practice). False gives the strict two-branch solution.
  bool always_subtract = true;
  double epsilon_norm = 1e-12;
  // Compute theta from the raw gradients instead of the unit gradients.
  bool theta_on_raw = false;

  void validate() const {
    if (!(epsilon_norm > 0.0)) throw ConfigError("surgery: epsilon_norm must be > 0");
  }
};

/// Plain cross-layer gradient gk + g0.
inline Tensor cross_layer_sum(const Tensor& g0, const Tensor& gk) {
  require_same_shape(g0, gk, "cross_layer_sum");
  return gk + g0;
}

inline Tensor cross_layer_sum(const GradientView& g0, const GradientView& gk) {
  return cross_layer_sum(g0.tensor, gk.tensor);
}

struct NormalizedPair {
  Tensor g0_unit;
  Tensor gk_unit;
  double scale = 0.0;  // (|g0| + |gk|) / 2
};

/// Unit-normalizes both gradients. A zero gradient stays zero: it is divided
/// by max(|g|, eps).
inline NormalizedPair normalize_pair(const Tensor& g0, const Tensor& gk, double eps) {
  require_same_shape(g0, gk, "normalize_pair");
  const double n0 = norm(g0);
  const double nk = norm(gk);
  return {g0 * (1.0 / std::max(n0, eps)), gk * (1.0 / std::max(nk, eps)), (n0 + nk) / 2.0};
}

/// Closed-form minimizer of |gk - x|^2 subject to <x, g0> >= 0. Works on any
/// shape: matrices use the flat (trace) inner product.
inline ProjectionOutcome project_theorem1(const Tensor& g0, const Tensor& gk) {
  require_same_shape(g0, gk, "project_theorem1");
  const double alpha = inner(g0, g0);
  if (alpha == 0.0) throw ZeroAnchorError();
  const double beta = inner(gk, g0);
  const double theta = beta / alpha;
  if (beta >= 0.0) return {gk, theta, alpha, beta, ProjectionBranch::Identity};
  return {axpy(gk, -theta, g0), theta, alpha, beta, ProjectionBranch::Corrected};
}

/// Same solution as project_theorem1 but always subtracting theta*g0.
inline ProjectionOutcome project_always_subtract(const Tensor& g0, const Tensor& gk) {
  auto out = project_theorem1(g0, gk);
  if (out.branch == ProjectionBranch::Identity && out.beta != 0.0) out.g_opt = axpy(gk, -out.theta, g0);
  return out;
}

/// Server-side update for one deep layer, with the coefficients that
/// produced it. `projection` is empty when the anchor is zero (only legal
/// without optimization).
struct SurgeryResult {
  Tensor update;
  std::optional<ProjectionOutcome> projection;
};

inline SurgeryResult inco_update_traced(const Tensor& g0, const Tensor& gk, const SurgeryConfig& cfg) {
  require_same_shape(g0, gk, "inco_update");
  cfg.validate();

  // Coefficients for diagnostics when the update itself does not project.
  auto diagnostic = [](const Tensor& a0, const Tensor& ak) -> std::optional<ProjectionOutcome> {
    if (a0.is_zero()) return std::nullopt;
    return project_theorem1(a0, ak);
  };

  if (!cfg.normalize) {
    if (!cfg.optimize) return {cross_layer_sum(g0, gk), diagnostic(g0, gk)};
    auto p = cfg.always_subtract ? project_always_subtract(g0, gk) : project_theorem1(g0, gk);
    Tensor update = p.g_opt;
    return {std::move(update), std::move(p)};
  }

  auto pair = normalize_pair(g0, gk, cfg.epsilon_norm);
  if (!cfg.optimize) {
    auto diag = diagnostic(pair.g0_unit, pair.gk_unit);
    return {(pair.g0_unit + pair.gk_unit) * pair.scale, std::move(diag)};
  }

  ProjectionOutcome p;
  if (cfg.theta_on_raw) {
    // theta from the raw pair, applied to the unit pair.
    p = project_theorem1(g0, gk);
    const bool subtract = cfg.always_subtract || p.beta < 0.0;
    p.g_opt = subtract ? axpy(pair.gk_unit, -p.theta, pair.g0_unit) : pair.gk_unit;
  } else {
    p = cfg.always_subtract ? project_always_subtract(pair.g0_unit, pair.gk_unit)
                            : project_theorem1(pair.g0_unit, pair.gk_unit);
  }
  Tensor update = p.g_opt * pair.scale;
  return {std::move(update), std::move(p)};
}

inline Tensor inco_update(const Tensor& g0, const Tensor& gk, const SurgeryConfig& cfg) {
  return inco_update_traced(g0, gk, cfg).update;
}

inline Tensor inco_update(const GradientView& g0, const GradientView& gk, const SurgeryConfig& cfg) {
  return inco_update(g0.tensor, gk.tensor, cfg);
}

}  // namespace inco
