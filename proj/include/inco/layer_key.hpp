#pragma once

#include <compare>
#include <map>
#include <string>

#include "inco/tensor.hpp"

namespace inco {

// Ordering of the enumerators is the forward order within a stage.
enum class LayerKind : int { Projection = 0, Block = 1, Classifier = 2 };

/// Addresses one layer. Block layers share one square shape per stage and
/// Block index 0 is the stage's anchor ("layer 0"). Projections enter a
/// stage; the classifier sits after the last stage (stage == num_stages).
struct LayerKey {
  int stage = 0;
  LayerKind kind = LayerKind::Block;
  int index = 0;

  static constexpr LayerKey block(int stage, int index) { return {stage, LayerKind::Block, index}; }
  static constexpr LayerKey projection(int stage) { return {stage, LayerKind::Projection, 0}; }
  static constexpr LayerKey classifier(int stages) { return {stages, LayerKind::Classifier, 0}; }

  bool is_block() const noexcept { return kind == LayerKind::Block; }
  bool is_anchor() const noexcept { return is_block() && index == 0; }
  bool is_deep() const noexcept { return is_block() && index >= 1; }

  friend auto operator<=>(const LayerKey&, const LayerKey&) = default;
};

inline std::string to_string(const LayerKey& k) {
  switch (k.kind) {
    case LayerKind::Projection: return "stage" + std::to_string(k.stage) + ".proj";
    case LayerKind::Classifier: return "classifier";
    case LayerKind::Block: break;
  }
  return "stage" + std::to_string(k.stage) + ".layer" + std::to_string(k.index);
}

enum class ParamRole : int { Weight = 0, Bias = 1 };

struct ParamKey {
  LayerKey layer;
  ParamRole role = ParamRole::Weight;

  friend auto operator<=>(const ParamKey&, const ParamKey&) = default;
};

inline std::string to_string(const ParamKey& k) {
  return to_string(k.layer) + (k.role == ParamRole::Weight ? ".weight" : ".bias");
}

// Per-parameter tensors (weights, gradients or deltas); iteration order is
// forward order, which every reduction relies on.
using ParamMap = std::map<ParamKey, Tensor>;

}  // namespace inco
