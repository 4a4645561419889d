#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "inco/error.hpp"
#include "inco/hetero_agg.hpp"
#include "inco/layer_key.hpp"
#include "inco/rng.hpp"
#include "inco/tensor.hpp"

namespace inco {

enum class Activation { ReLU, Tanh };

/// Depth-parameterized MLP family. Each stage is a rectangular projection
/// followed by `depth` square layers of the stage width, so all blocks of a
/// stage share one parameter shape. The classifier reads the last stage.
struct StageNetConfig {
  int input_dim = 32;
  std::vector<int> stage_widths{32, 32, 32};
  int stages = 3;
  int num_classes = 10;
  Activation activation = Activation::ReLU;

  void validate() const {
    if (stages < 1) throw ConfigError("model: stages must be >= 1");
    if (stage_widths.size() != static_cast<std::size_t>(stages))
      throw ConfigError("model: stage_widths must have one entry per stage");
    if (input_dim < 1 || num_classes < 1) throw ConfigError("model: input_dim and num_classes must be >= 1");
    for (int w : stage_widths)
      if (w < 1) throw ConfigError("model: stage widths must be >= 1");
  }

  std::size_t in_dim(const LayerKey& key) const {
    switch (key.kind) {
      case LayerKind::Projection:
        return key.stage == 0 ? static_cast<std::size_t>(input_dim)
                              : static_cast<std::size_t>(stage_widths[static_cast<std::size_t>(key.stage) - 1]);
      case LayerKind::Block: return static_cast<std::size_t>(stage_widths[static_cast<std::size_t>(key.stage)]);
      case LayerKind::Classifier: return static_cast<std::size_t>(stage_widths.back());
    }
    return 0;
  }

  std::size_t out_dim(const LayerKey& key) const {
    if (key.kind == LayerKind::Classifier) return static_cast<std::size_t>(num_classes);
    return static_cast<std::size_t>(stage_widths[static_cast<std::size_t>(key.stage)]);
  }
};

struct LayerParams {
  LayerKey key;
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)
};

/// Weights of one architecture, layers in forward order.
struct ModelWeights {
  StageNetConfig config;
  std::vector<int> depth_per_stage;
  std::vector<LayerParams> layers;

  const LayerParams* find(const LayerKey& key) const {
    for (const auto& l : layers)
      if (l.key == key) return &l;
    return nullptr;
  }

  LayerParams* find(const LayerKey& key) {
    for (auto& l : layers)
      if (l.key == key) return &l;
    return nullptr;
  }

  friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
    if (a.depth_per_stage != b.depth_per_stage || a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto& x = a.layers[i];
      const auto& y = b.layers[i];
      if (x.key != y.key || x.weight != y.weight || x.bias != y.bias) return false;
    }
    return true;
  }
};

inline ParamMap params_of(const ModelWeights& w) {
  ParamMap out;
  for (const auto& l : w.layers) {
    out.emplace(ParamKey{l.key, ParamRole::Weight}, l.weight);
    out.emplace(ParamKey{l.key, ParamRole::Bias}, l.bias);
  }
  return out;
}

inline Tensor& param_ref(ModelWeights& w, const ParamKey& key) {
  auto* l = w.find(key.layer);
  if (!l) throw Error("model has no layer " + to_string(key.layer));
  return key.role == ParamRole::Weight ? l->weight : l->bias;
}

inline const Tensor& param_ref(const ModelWeights& w, const ParamKey& key) {
  auto* l = w.find(key.layer);
  if (!l) throw Error("model has no layer " + to_string(key.layer));
  return key.role == ParamRole::Weight ? l->weight : l->bias;
}

/// w += delta for every key in delta.
inline void apply_delta(ModelWeights& w, const ParamMap& delta) {
  for (const auto& [key, d] : delta) param_ref(w, key) += d;
}

/// Deterministic given seed. Every layer draws from its own stream keyed by
/// the layer, so a smaller group's model is a prefix of a larger one's.
inline ModelWeights init_model(const StageNetConfig& cfg, const GroupSpec& group, std::uint64_t seed) {
  cfg.validate();
  if (group.depth_per_stage.size() != static_cast<std::size_t>(cfg.stages))
    throw ConfigError("init_model: group depth list does not match the number of stages");
  ModelWeights w;
  w.config = cfg;
  w.depth_per_stage = group.depth_per_stage;
  for (const auto& key : layer_keys(group.depth_per_stage)) {
    const std::size_t in = cfg.in_dim(key), out = cfg.out_dim(key);
    // He-uniform for ReLU, LeCun-uniform for tanh and the classifier.
    const double gain = (cfg.activation == Activation::ReLU && key.kind != LayerKind::Classifier) ? 6.0 : 3.0;
    const double limit = std::sqrt(gain / static_cast<double>(in));
    auto rng = make_rng(seed, {tag(Stream::Init), static_cast<std::uint64_t>(key.stage),
                               static_cast<std::uint64_t>(key.kind), static_cast<std::uint64_t>(key.index)});
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor weight({out, in});
    for (double& v : weight.values()) v = dist(rng);
    w.layers.push_back({key, std::move(weight), Tensor({out})});
  }
  return w;
}

/// Copies the layers `group` owns out of a larger model.
inline ModelWeights slice_for_group(const ModelWeights& full, const GroupSpec& group) {
  ModelWeights w;
  w.config = full.config;
  w.depth_per_stage = group.depth_per_stage;
  for (const auto& key : layer_keys(group.depth_per_stage)) {
    const auto* l = full.find(key);
    if (!l) throw Error("slice_for_group: source model lacks layer " + to_string(key));
    w.layers.push_back(*l);
  }
  return w;
}

struct LayerCache {
  const LayerParams* params = nullptr;
  Tensor input;
  Tensor output;  // post-activation (pre-activation logits for the classifier)
  bool activated = true;
};

/// Activations recorded by forward. Refers to the weights it was built
/// from; they must outlive it.
struct ForwardCache {
  const ModelWeights* weights = nullptr;
  std::vector<LayerCache> layers;
};

struct ForwardResult {
  Tensor logits;
  std::vector<Tensor> stage_features;
  ForwardCache cache;
};

namespace detail {

inline Tensor affine(const Tensor& x, const LayerParams& l) {
  Tensor z = matmul_bt(x, l.weight);
  const std::size_t n = z.rows(), m = z.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) z.at(i, j) += l.bias[j];
  return z;
}

inline void activate(Tensor& z, Activation a) {
  if (a == Activation::ReLU) {
    for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
  } else {
    for (double& v : z.values()) v = std::tanh(v);
  }
}

}  // namespace detail

inline ForwardResult forward(const ModelWeights& w, const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() != static_cast<std::size_t>(w.config.input_dim))
    throw ShapeError("forward: batch shape " + shape_string(batch.shape()) + " does not match input_dim " +
                     std::to_string(w.config.input_dim));
  ForwardResult r;
  r.cache.weights = &w;
  r.cache.layers.reserve(w.layers.size());
  Tensor x = batch;
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    Tensor z = detail::affine(x, l);
    const bool act = l.key.kind != LayerKind::Classifier;
    if (act) detail::activate(z, w.config.activation);
    const bool stage_end = act && (i + 1 == w.layers.size() || w.layers[i + 1].key.stage != l.key.stage);
    if (stage_end) r.stage_features.push_back(z);
    r.cache.layers.push_back({&l, std::move(x), z, act});
    x = std::move(z);
  }
  r.logits = std::move(x);
  return r;
}

inline void check_labels(std::span<const int> labels, std::size_t rows, int num_classes) {
  if (labels.size() != rows)
    throw ShapeError("labels: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw Error("invalid label " + std::to_string(y));
}

/// Row-wise softmax.
inline Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto row = p.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) z += (v = std::exp(v - mx));
    for (double& v : row) v /= z;
  }
  return p;
}

/// Mean softmax cross-entropy.
inline double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_labels(labels, logits.rows(), static_cast<int>(logits.cols()));
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += mx + std::log(z) - row[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(logits.rows());
}

/// Gradients of the mean softmax cross-entropy for every parameter tensor.
inline ParamMap backward(const ForwardCache& cache, std::span<const int> labels) {
  if (!cache.weights || cache.layers.empty()) throw Error("backward: empty forward cache");
  const auto& w = *cache.weights;
  const Tensor& logits = cache.layers.back().output;
  check_labels(labels, logits.rows(), w.config.num_classes);

  const double n = static_cast<double>(logits.rows());
  Tensor delta = softmax(logits);
  for (std::size_t i = 0; i < delta.rows(); ++i) delta.at(i, static_cast<std::size_t>(labels[i])) -= 1.0;
  delta /= n;

  ParamMap grads;
  for (std::size_t li = cache.layers.size(); li-- > 0;) {
    const auto& lc = cache.layers[li];
    if (lc.activated) {
      // delta currently holds dL/d(output); move through the activation.
      if (w.config.activation == Activation::ReLU) {
        for (std::size_t k = 0; k < delta.size(); ++k)
          if (!(lc.output[k] > 0.0)) delta[k] = 0.0;
      } else {
        for (std::size_t k = 0; k < delta.size(); ++k) delta[k] *= 1.0 - lc.output[k] * lc.output[k];
      }
    }
    Tensor gw = matmul_at(delta, lc.input);
    Tensor gb({delta.cols()});
    for (std::size_t i = 0; i < delta.rows(); ++i)
      for (std::size_t j = 0; j < delta.cols(); ++j) gb[j] += delta.at(i, j);
    grads.emplace(ParamKey{lc.params->key, ParamRole::Weight}, std::move(gw));
    grads.emplace(ParamKey{lc.params->key, ParamRole::Bias}, std::move(gb));
    if (li > 0) delta = matmul(delta, lc.params->weight);
  }
  return grads;
}

}  // namespace inco
