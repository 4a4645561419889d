#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "inco/error.hpp"
#include "inco/layer_key.hpp"

namespace inco {

/// One architecture group. Groups are ordered by model size and nested:
/// every stage of group j is at most as deep as in group j+1.
struct GroupSpec {
  int group_id = 1;
  std::vector<int> depth_per_stage;
  std::vector<int> client_ids;

  bool owns(const LayerKey& key) const {
    if (!key.is_block()) return true;
    return key.stage >= 0 && static_cast<std::size_t>(key.stage) < depth_per_stage.size() &&
           key.index < depth_per_stage[static_cast<std::size_t>(key.stage)];
  }
};

struct Contributor {
  int client_id = 0;
  int group_id = 0;

  friend auto operator<=>(const Contributor&, const Contributor&) = default;
};

/// Which clients contribute to which layer. Contributor lists are sorted by
/// client id; the order is the summation order.
class AggregationPlan {
 public:
  using Map = std::map<LayerKey, std::vector<Contributor>>;

  AggregationPlan() = default;
  explicit AggregationPlan(Map m) : layers_(std::move(m)) {}

  const Map& layers() const noexcept { return layers_; }

  const std::vector<Contributor>& contributors(const LayerKey& key) const {
    static const std::vector<Contributor> kEmpty;
    auto it = layers_.find(key);
    return it == layers_.end() ? kEmpty : it->second;
  }

  /// The same plan restricted to the participating clients. Layers nobody
  /// participating owns keep an empty contributor list.
  AggregationPlan restricted_to(std::span<const int> participants) const {
    std::set<int> keep(participants.begin(), participants.end());
    Map out;
    for (const auto& [key, list] : layers_) {
      auto& dst = out[key];
      for (const auto& c : list)
        if (keep.contains(c.client_id)) dst.push_back(c);
    }
    return AggregationPlan(std::move(out));
  }

 private:
  Map layers_;
};

inline void validate_groups(std::span<const GroupSpec> groups, int stages) {
  if (groups.empty()) throw ConfigError("groups: at least one group is required");
  if (stages < 1) throw ConfigError("groups: stages must be >= 1");
  std::set<int> seen_clients;
  for (std::size_t j = 0; j < groups.size(); ++j) {
    const auto& g = groups[j];
    if (g.depth_per_stage.size() != static_cast<std::size_t>(stages))
      throw ConfigError("group " + std::to_string(g.group_id) + ": depth_per_stage has " +
                        std::to_string(g.depth_per_stage.size()) + " entries, expected " + std::to_string(stages));
    for (int d : g.depth_per_stage)
      if (d < 1) throw ConfigError("group " + std::to_string(g.group_id) + ": depths must be >= 1");
    for (int c : g.client_ids)
      if (!seen_clients.insert(c).second)
        throw ConfigError("client " + std::to_string(c) + " belongs to more than one group");
    if (j > 0) {
      const auto& prev = groups[j - 1];
      if (prev.group_id >= g.group_id) throw ConfigError("groups must be listed in increasing group_id order");
      for (int s = 0; s < stages; ++s)
        if (prev.depth_per_stage[s] > g.depth_per_stage[s])
          throw ConfigError("groups are not nested: group " + std::to_string(prev.group_id) + " is deeper than group " +
                            std::to_string(g.group_id) + " in stage " + std::to_string(s));
    }
  }
}

/// All layers of the largest group: a projection per stage, the stage's
/// blocks, and the classifier.
inline std::vector<LayerKey> layer_keys(std::span<const int> depth_per_stage) {
  std::vector<LayerKey> keys;
  const int stages = static_cast<int>(depth_per_stage.size());
  for (int s = 0; s < stages; ++s) {
    keys.push_back(LayerKey::projection(s));
    for (int i = 0; i < depth_per_stage[s]; ++i) keys.push_back(LayerKey::block(s, i));
  }
  keys.push_back(LayerKey::classifier(stages));
  return keys;
}

/// A client contributes to a layer iff its group owns it.
inline AggregationPlan build_plan(std::span<const GroupSpec> groups, int stages) {
  validate_groups(groups, stages);
  AggregationPlan::Map map;
  for (const auto& key : layer_keys(groups.back().depth_per_stage)) {
    auto& list = map[key];
    for (const auto& g : groups)
      if (g.owns(key))
        for (int c : g.client_ids) list.push_back({c, g.group_id});
    std::sort(list.begin(), list.end());
  }
  return AggregationPlan(std::move(map));
}

using Contributions = std::map<int, ParamMap>;

namespace detail {
inline const Tensor& contribution(const Contributions& contributions, const Contributor& c, const ParamKey& key) {
  auto cit = contributions.find(c.client_id);
  if (cit == contributions.end())
    throw Error("aggregate: missing contribution from client " + std::to_string(c.client_id) + " for layer " +
                to_string(key.layer));
  auto pit = cit->second.find(key);
  if (pit == cit->second.end())
    throw Error("aggregate: missing contribution from client " + std::to_string(c.client_id) + " for layer " +
                to_string(key));
  return pit->second;
}
}  // namespace detail

/// Layer-wise mean over each layer's contributors, summed in plan order.
/// Layers without contributors are absent from the result. With
/// `sample_weights`, contributions are weighted by client (e.g. by sample
/// count) instead of averaged uniformly.
inline ParamMap aggregate(const AggregationPlan& plan, const Contributions& contributions,
                          const std::map<int, double>* sample_weights = nullptr) {
  ParamMap out;
  for (const auto& [layer, list] : plan.layers()) {
    if (list.empty()) continue;
    // Roles come from the first contributor; every other one must match.
    std::vector<ParamRole> roles;
    auto first = contributions.find(list.front().client_id);
    if (first == contributions.end())
      throw Error("aggregate: missing contribution from client " + std::to_string(list.front().client_id) +
                  " for layer " + to_string(layer));
    for (const auto& [key, _] : first->second)
      if (key.layer == layer) roles.push_back(key.role);
    if (roles.empty())
      throw Error("aggregate: missing contribution from client " + std::to_string(list.front().client_id) +
                  " for layer " + to_string(layer));

    for (ParamRole role : roles) {
      const ParamKey key{layer, role};
      Tensor sum;
      double total_weight = 0.0;
      for (const auto& c : list) {
        const Tensor& t = detail::contribution(contributions, c, key);
        double w = 1.0;
        if (sample_weights) {
          auto wit = sample_weights->find(c.client_id);
          if (wit == sample_weights->end())
            throw Error("aggregate: no weight for client " + std::to_string(c.client_id));
          w = wit->second;
        }
        if (sum.size() == 0) {
          sum = sample_weights ? t * w : t;
        } else {
          if (t.shape() != sum.shape())
            throw ShapeError("aggregate: client " + std::to_string(c.client_id) + " sent shape " +
                             shape_string(t.shape()) + " for " + to_string(key) + ", expected " +
                             shape_string(sum.shape()));
          if (sample_weights)
            sum = axpy(sum, w, t);
          else
            sum += t;
        }
        total_weight += w;
      }
      if (!(total_weight > 0.0)) throw Error("aggregate: non-positive total weight for " + to_string(key));
      out.emplace(key, sum / total_weight);
    }
  }
  return out;
}

}  // namespace inco
