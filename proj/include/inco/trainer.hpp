#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "inco/data.hpp"
#include "inco/model.hpp"

namespace inco {

enum class Optimizer { SGD, Adam };

struct TrainerConfig {
  Optimizer optimizer = Optimizer::Adam;
  double learning_rate = 1e-3;
  int local_epochs = 5;
  int batch_size = 64;
  double prox_mu = 0.0;  // 0 disables the proximal term
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("trainer: learning_rate must be >= 0");
    if (local_epochs < 1) throw ConfigError("trainer: local_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
    if (prox_mu < 0.0) throw ConfigError("trainer: prox_mu must be >= 0");
  }
};

struct TrainResult {
  ModelWeights weights;  // start + delta, per parameter
  ParamMap delta;
};

/// Runs local_epochs of shuffled minibatch updates from `start`. The update
/// is accumulated in `delta`, so weights == start + delta exactly. With
/// prox_mu > 0 each gradient gains prox_mu * (w - global). Optimizer state
/// lives only for this call.
inline TrainResult local_train(const ModelWeights& start, const Dataset& shard, const TrainerConfig& tcfg,
                               const ModelWeights& global) {
  tcfg.validate();
  if (shard.size() == 0) throw DataError("local_train: empty shard");

  const ParamMap base = params_of(start);
  ParamMap delta;
  for (const auto& [k, t] : base) delta.emplace(k, Tensor::zeros_like(t));
  ParamMap anchor;
  if (tcfg.prox_mu > 0.0)
    for (const auto& [k, _] : base) anchor.emplace(k, param_ref(global, k));

  ParamMap m1, m2;
  if (tcfg.optimizer == Optimizer::Adam)
    for (const auto& [k, t] : base) {
      m1.emplace(k, Tensor::zeros_like(t));
      m2.emplace(k, Tensor::zeros_like(t));
    }

  ModelWeights current = start;
  auto rng = make_rng(tcfg.seed, {tag(Stream::LocalTrain)});
  std::vector<std::size_t> order(shard.size());
  const auto bs = static_cast<std::size_t>(tcfg.batch_size);
  std::size_t step = 0;
  std::vector<int> batch_labels;

  for (int epoch = 0; epoch < tcfg.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < order.size(); lo += bs) {
      const std::span<const std::size_t> idx(order.data() + lo, std::min(bs, order.size() - lo));
      const Tensor x = gather_rows(shard.features, idx);
      batch_labels.clear();
      for (auto i : idx) batch_labels.push_back(shard.labels[i]);

      auto fw = forward(current, x);
      ParamMap grads = backward(fw.cache, batch_labels);
      ++step;

      for (auto& [key, g] : grads) {
        Tensor& cur = param_ref(current, key);
        if (tcfg.prox_mu > 0.0) {
          const Tensor& gl = anchor.at(key);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += tcfg.prox_mu * (cur[i] - gl[i]);
        }
        Tensor& d = delta.at(key);
        if (tcfg.optimizer == Optimizer::SGD) {
          for (std::size_t i = 0; i < g.size(); ++i) d[i] -= tcfg.learning_rate * g[i];
        } else {
          Tensor& m = m1.at(key);
          Tensor& v = m2.at(key);
          const double c1 = 1.0 - std::pow(tcfg.adam_beta1, static_cast<double>(step));
          const double c2 = 1.0 - std::pow(tcfg.adam_beta2, static_cast<double>(step));
          for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = tcfg.adam_beta1 * m[i] + (1.0 - tcfg.adam_beta1) * g[i];
            v[i] = tcfg.adam_beta2 * v[i] + (1.0 - tcfg.adam_beta2) * g[i] * g[i];
            d[i] -= tcfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + tcfg.adam_eps);
          }
        }
        const Tensor& b = base.at(key);
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = b[i] + d[i];
      }
    }
  }
  return {std::move(current), std::move(delta)};
}

}  // namespace inco
