#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "inco/error.hpp"
#include "inco/layer_key.hpp"
#include "inco/model.hpp"
#include "inco/tensor.hpp"

namespace inco {

/// Column-centered copy of a feature matrix plus its self-similarity
/// |XᵀX|_F, reusable across many CKA pairs.
struct CenteredFeatures {
  Tensor centered;
  double self_norm = 0.0;

  explicit CenteredFeatures(const Tensor& x) : centered(x) {
    if (x.rank() != 2) throw ShapeError("cka: features must be a matrix, got " + shape_string(x.shape()));
    if (x.rows() < 2) throw ShapeError("cka: need at least two rows");
    const std::size_t n = x.rows(), p = x.cols();
    for (std::size_t j = 0; j < p; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += x.at(i, j);
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) centered.at(i, j) -= mean;
    }
    self_norm = norm(matmul_at(centered, centered));
  }
};

inline double linear_cka(const CenteredFeatures& x, const CenteredFeatures& y) {
  if (x.centered.rows() != y.centered.rows())
    throw ShapeError("cka: row counts differ (" + std::to_string(x.centered.rows()) + " vs " +
                     std::to_string(y.centered.rows()) + ")");
  const double denom = x.self_norm * y.self_norm;
  if (!(denom > 0.0)) throw DegenerateFeaturesError();
  const double cross = norm(matmul_at(y.centered, x.centered));
  return cross * cross / denom;
}

/// Linear CKA: |ȲᵀX̄|_F² / (|X̄ᵀX̄|_F |ȲᵀȲ|_F) on column-centered features.
inline double linear_cka(const Tensor& x, const Tensor& y) {
  return linear_cka(CenteredFeatures(x), CenteredFeatures(y));
}

struct CkaMatrix {
  int stage = 0;
  Tensor scores;  // K x K
  std::vector<int> client_ids;

  double mean_off_diagonal() const {
    const std::size_t k = scores.rows();
    if (k < 2) return 1.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        if (i != j) acc += scores.at(i, j);
    return acc / static_cast<double>(k * (k - 1));
  }
};

/// CKA between every pair of models on one stage's output, all models fed
/// the same batch.
inline CkaMatrix pairwise_stage_cka(std::span<const ModelWeights> clients, const Tensor& eval_batch, int stage,
                                    std::vector<int> client_ids = {}) {
  if (clients.empty()) throw Error("pairwise_stage_cka: no clients");
  if (client_ids.empty())
    for (std::size_t i = 0; i < clients.size(); ++i) client_ids.push_back(static_cast<int>(i));
  if (client_ids.size() != clients.size()) throw Error("pairwise_stage_cka: client id count mismatch");

  std::vector<CenteredFeatures> feats;
  feats.reserve(clients.size());
  for (const auto& w : clients) {
    auto fw = forward(w, eval_batch);
    if (stage < 0 || static_cast<std::size_t>(stage) >= fw.stage_features.size())
      throw Error("pairwise_stage_cka: model has no stage " + std::to_string(stage));
    feats.emplace_back(fw.stage_features[static_cast<std::size_t>(stage)]);
  }
  const std::size_t k = clients.size();
  CkaMatrix m{stage, Tensor({k, k}), std::move(client_ids)};
  for (std::size_t i = 0; i < k; ++i) {
    m.scores.at(i, i) = 1.0;
    if (!(feats[i].self_norm > 0.0)) throw DegenerateFeaturesError();
    for (std::size_t j = i + 1; j < k; ++j) m.scores.at(i, j) = m.scores.at(j, i) = linear_cka(feats[i], feats[j]);
  }
  return m;
}

struct BetaCounts {
  std::size_t count_total = 0;
  std::size_t count_positive = 0;

  std::optional<double> positive_rate() const {
    if (count_total == 0) return std::nullopt;
    return static_cast<double>(count_positive) / static_cast<double>(count_total);
  }
};

/// How often beta = <g_k, g_0> came out strictly positive, per layer.
struct BetaStats {
  std::map<LayerKey, BetaCounts> layers;

  void record(const LayerKey& layer, double beta) {
    auto& c = layers[layer];
    ++c.count_total;
    if (beta > 0.0) ++c.count_positive;
  }

  std::optional<double> positive_rate(const LayerKey& layer) const {
    auto it = layers.find(layer);
    if (it == layers.end()) return std::nullopt;
    return it->second.positive_rate();
  }

  // Pooled over every recorded layer.
  std::optional<double> positive_rate() const {
    BetaCounts all;
    for (const auto& [_, c] : layers) {
      all.count_total += c.count_total;
      all.count_positive += c.count_positive;
    }
    return all.positive_rate();
  }
};

inline BetaStats record_beta(BetaStats stats, const LayerKey& layer, double beta) {
  stats.record(layer, beta);
  return stats;
}

struct Histogram {
  std::vector<std::size_t> counts;
  std::size_t underflow = 0;
  std::size_t overflow = 0;
  double lo = 0.0, hi = 1.0;

  std::size_t in_range() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

/// Equal-width bins over [lo, hi]; hi itself lands in the last bin.
inline Histogram gradient_histogram(const Tensor& g, int bins, double lo, double hi) {
  if (bins < 1) throw Error("gradient_histogram: bins must be >= 1");
  if (!(lo < hi)) throw Error("gradient_histogram: need lo < hi");
  Histogram h{std::vector<std::size_t>(static_cast<std::size_t>(bins), 0), 0, 0, lo, hi};
  const double width = (hi - lo) / bins;
  for (double v : g.values()) {
    if (v < lo) {
      ++h.underflow;
    } else if (v > hi) {
      ++h.overflow;
    } else {
      auto b = static_cast<std::size_t>((v - lo) / width);
      h.counts[std::min(b, h.counts.size() - 1)]++;
    }
  }
  return h;
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest
/// class index.
inline double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.rows() != labels.size())
    throw ShapeError("accuracy: logits " + shape_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[best]) best = j;
    if (static_cast<int>(best) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace inco
