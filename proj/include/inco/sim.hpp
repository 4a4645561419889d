#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "inco/convergence.hpp"
#include "inco/data.hpp"
#include "inco/error.hpp"
#include "inco/grad_surgery.hpp"
#include "inco/hetero_agg.hpp"
#include "inco/metrics.hpp"
#include "inco/model.hpp"
#include "inco/rng.hpp"
#include "inco/trainer.hpp"

namespace inco {

enum class Method { FedAvgGroupwise, HeteroAvg, InCo };
enum class ClientAlgo { Plain, Prox };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::FedAvgGroupwise: return "fedavg_groupwise";
    case Method::HeteroAvg: return "hetero_avg";
    case Method::InCo: return "inco";
  }
  return "?";
}

inline const char* to_string(ClientAlgo a) { return a == ClientAlgo::Prox ? "prox" : "plain"; }

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" or "idx"
  std::size_t samples = 5000;
  std::size_t dim = 32;
  int classes = 10;
  double cluster_spread = 1.0;
  std::string images;
  std::string labels;
  double holdout_fraction = 0.2;
};

struct ExperimentConfig {
  Method method = Method::InCo;
  ClientAlgo client_algo = ClientAlgo::Plain;
  SurgeryConfig surgery;
  int rounds = 100;
  int clients = 20;
  double sample_ratio = 0.1;
  std::vector<GroupSpec> groups;
  StageNetConfig model;
  TrainerConfig trainer;
  PartitionConfig partition;
  DataConfig data;
  int eval_batch = 256;
  int log_every = 10;
  std::vector<std::uint64_t> seeds{0};
  int threads = 1;
  bool weighted_aggregation = false;
  double upload_noise_std = 0.0;
  bool eta_diagnostics = true;
  int diagnostic_probes = 4;

  std::size_t sample_size() const {
    return static_cast<std::size_t>(std::ceil(static_cast<double>(clients) * sample_ratio - 1e-9));
  }

  void validate() const {
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (clients < 1) throw ConfigError("clients must be >= 1");
    if (!(sample_ratio > 0.0 && sample_ratio <= 1.0)) throw ConfigError("sample_ratio must be in (0, 1]");
    if (sample_size() < 1) throw ConfigError("sample_ratio selects no clients");
    if (eval_batch < 2) throw ConfigError("eval_batch must be >= 2");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (upload_noise_std < 0.0) throw ConfigError("upload_noise_std must be >= 0");
    if (!(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0))
      throw ConfigError("data.holdout_fraction must be in (0, 1)");
    model.validate();
    trainer.validate();
    surgery.validate();
    validate_groups(groups, model.stages);
    std::set<int> ids;
    for (const auto& g : groups) ids.insert(g.client_ids.begin(), g.client_ids.end());
    if (ids.size() != static_cast<std::size_t>(clients))
      throw ConfigError("group client counts sum to " + std::to_string(ids.size()) + ", expected " +
                        std::to_string(clients));
  }

  /// Method name with the ablation / client-algorithm suffixes, as written
  /// to the metrics CSV.
  std::string label() const {
    std::string s = to_string(method);
    if (method == Method::InCo) {
      if (!surgery.normalize && !surgery.optimize)
        s += "_wo_norm_opt";
      else if (!surgery.normalize)
        s += "_wo_norm";
      else if (!surgery.optimize)
        s += "_wo_opt";
      if (!surgery.always_subtract) s += "_strict";
    }
    if (client_algo == ClientAlgo::Prox) s += "_prox";
    return s;
  }

  const GroupSpec& group_of(int client) const {
    for (const auto& g : groups)
      if (std::find(g.client_ids.begin(), g.client_ids.end(), client) != g.client_ids.end()) return g;
    throw ConfigError("client " + std::to_string(client) + " is in no group");
  }

  std::vector<int> client_ids() const {
    std::vector<int> ids;
    for (const auto& g : groups) ids.insert(ids.end(), g.client_ids.begin(), g.client_ids.end());
    std::sort(ids.begin(), ids.end());
    return ids;
  }
};

struct ServerState {
  ModelWeights global;                     // largest architecture
  std::vector<ModelWeights> group_models;  // FedAvgGroupwise only, one per group
  int round = 0;
  AggregationPlan plan;
  BetaStats beta;
  std::uint64_t seed = 0;
  std::size_t skipped_layers = 0;
  std::size_t zero_anchor_fallbacks = 0;
  std::vector<std::string> events;
};

inline ServerState init_server(const ExperimentConfig& cfg, std::uint64_t seed) {
  ServerState s;
  s.global = init_model(cfg.model, cfg.groups.back(), seed);
  if (cfg.method == Method::FedAvgGroupwise)
    for (const auto& g : cfg.groups) s.group_models.push_back(slice_for_group(s.global, g));
  s.plan = build_plan(cfg.groups, cfg.model.stages);
  s.seed = seed;
  return s;
}

/// Uniform sample without replacement of ceil(K * ratio) clients, sorted.
inline std::vector<int> sample_clients(int round, const ExperimentConfig& cfg, std::uint64_t seed) {
  auto ids = cfg.client_ids();
  const std::size_t m = std::min(cfg.sample_size(), ids.size());
  auto rng = make_rng(seed, {tag(Stream::Sampling), static_cast<std::uint64_t>(round)});
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// The layers `group` owns, copied from the server.
inline ModelWeights distribute(const ServerState& state, const GroupSpec& group, const ExperimentConfig& cfg) {
  if (cfg.method == Method::FedAvgGroupwise) {
    for (std::size_t j = 0; j < cfg.groups.size(); ++j)
      if (cfg.groups[j].group_id == group.group_id) return state.group_models[j];
    throw ConfigError("distribute: unknown group " + std::to_string(group.group_id));
  }
  return slice_for_group(state.global, group);
}

/// Replaces each deep block's aggregated delta with the cross-layer update
/// built from its stage anchor. Coefficients go into `state.beta`.
inline void apply_surgery(ParamMap& agg, const SurgeryConfig& surgery, ServerState& state) {
  for (auto& [key, delta] : agg) {
    if (!key.layer.is_deep()) continue;
    auto anchor = agg.find(ParamKey{LayerKey::block(key.layer.stage, 0), key.role});
    if (anchor == agg.end()) continue;
    try {
      auto res = inco_update_traced(anchor->second, delta, surgery);
      if (res.projection) state.beta.record(key.layer, res.projection->beta);
      delta = std::move(res.update);
    } catch (const ZeroAnchorError&) {
      ++state.zero_anchor_fallbacks;
      state.events.push_back("round " + std::to_string(state.round) + ": zero anchor for " + to_string(key) +
                             ", delta left unmodified");
    }
  }
}

/// One server step: aggregate the uploaded deltas, optionally apply
/// cross-layer surgery, then w += g. Returns the final per-parameter update
/// through `applied` when given.
inline ServerState server_round(ServerState state, const Contributions& deltas, const ExperimentConfig& cfg,
                                const std::map<int, double>* sample_weights = nullptr,
                                ParamMap* applied = nullptr) {
  std::vector<int> participants;
  for (const auto& [c, _] : deltas) participants.push_back(c);
  ++state.round;
  if (applied) applied->clear();

  if (cfg.method == Method::FedAvgGroupwise) {
    for (std::size_t j = 0; j < cfg.groups.size(); ++j) {
      const GroupSpec& g = cfg.groups[j];
      const auto plan = build_plan(std::span(&g, 1), cfg.model.stages).restricted_to(participants);
      const ParamMap agg = aggregate(plan, deltas, sample_weights);
      apply_delta(state.group_models[j], agg);
      if (j + 1 == cfg.groups.size()) {
        if (applied) *applied = agg;
        state.global = state.group_models[j];
      }
    }
    return state;
  }

  const auto plan = state.plan.restricted_to(participants);
  for (const auto& [layer, list] : plan.layers())
    if (list.empty()) {
      ++state.skipped_layers;
      state.events.push_back("round " + std::to_string(state.round) + ": no contributor for " + to_string(layer));
    }
  ParamMap agg = aggregate(plan, deltas, sample_weights);
  if (cfg.method == Method::InCo) apply_surgery(agg, cfg.surgery, state);
  apply_delta(state.global, agg);
  if (applied) *applied = std::move(agg);
  return state;
}

struct RoundRow {
  int round = 0;
  double mean_acc = 0.0, max_acc = 0.0, min_acc = 0.0;
  std::vector<double> acc_group;
  std::vector<double> cka_stage;  // mean off-diagonal
  std::vector<std::pair<LayerKey, std::optional<double>>> beta_rate;
  double eta_bound = std::nan("");
};

struct RunSummary {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<RoundRow> rows;
  double wall_clock_seconds = 0.0;
  std::size_t zero_anchor_fallbacks = 0;
  std::size_t skipped_layers = 0;
  ModelWeights final_global;

  const RoundRow& final_row() const { return rows.back(); }
};

/// Data for one seed: per-client train / held-out shards and the shared
/// evaluation batch for CKA.
struct FederatedData {
  std::map<int, Dataset> train;
  std::map<int, Dataset> test;
  Tensor eval_batch;
  Dataset diagnostic;  // fixed sample of pooled training data
};

inline Dataset load_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.data.kind == "synthetic")
    return synth_classification(cfg.data.samples, cfg.data.dim, cfg.data.classes, cfg.data.cluster_spread, seed);
  if (cfg.data.kind == "idx") return load_idx(cfg.data.images, cfg.data.labels);
  throw ConfigError("data.kind must be \"synthetic\" or \"idx\"");
}

inline FederatedData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  Dataset all = load_dataset(cfg, seed);
  if (all.dim() != static_cast<std::size_t>(cfg.model.input_dim))
    throw ConfigError("model.input_dim " + std::to_string(cfg.model.input_dim) + " does not match data dim " +
                      std::to_string(all.dim()));
  if (all.num_classes > cfg.model.num_classes) throw ConfigError("model.num_classes is smaller than the data's");
  all.num_classes = cfg.model.num_classes;

  PartitionConfig pc = cfg.partition;
  pc.num_clients = cfg.clients;
  pc.seed = seed;
  const auto shards = dirichlet_partition(all.labels, pc);
  const auto ids = cfg.client_ids();

  FederatedData fd;
  std::vector<std::size_t> pooled_test, pooled_train;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto rng = make_rng(seed, {tag(Stream::HoldOut), static_cast<std::uint64_t>(ids[i])});
    auto [tr, te] = holdout_split(shards[i], cfg.data.holdout_fraction, rng);
    fd.train.emplace(ids[i], all.subset(tr));
    fd.test.emplace(ids[i], all.subset(te));
    pooled_test.insert(pooled_test.end(), te.begin(), te.end());
    pooled_train.insert(pooled_train.end(), tr.begin(), tr.end());
  }
  auto pick = [&](std::vector<std::size_t> pool, std::size_t count, std::uint64_t salt) {
    std::sort(pool.begin(), pool.end());
    auto rng = make_rng(seed, {tag(Stream::EvalBatch), salt});
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(pool.size(), count));
    return pool;
  };
  const auto eval_idx = pick(pooled_test, static_cast<std::size_t>(cfg.eval_batch), 0);
  fd.eval_batch = gather_rows(all.features, eval_idx);
  fd.diagnostic = all.subset(pick(pooled_train, 256, 1));
  return fd;
}

namespace detail {

inline Contributions train_clients(const ServerState& state, const std::vector<int>& sampled,
                                   const FederatedData& data, const ExperimentConfig& cfg, std::uint64_t seed) {
  std::vector<ParamMap> results(sampled.size());
  std::vector<std::exception_ptr> errors(sampled.size());
  auto work = [&](std::size_t i) {
    try {
      const int client = sampled[i];
      const GroupSpec& g = cfg.group_of(client);
      const ModelWeights start = distribute(state, g, cfg);
      TrainerConfig t = cfg.trainer;
      if (cfg.client_algo == ClientAlgo::Plain) t.prox_mu = 0.0;
      t.seed = derive_seed(seed, {tag(Stream::LocalTrain), static_cast<std::uint64_t>(client),
                                  static_cast<std::uint64_t>(state.round)});
      auto res = local_train(start, data.train.at(client), t, start);
      if (cfg.upload_noise_std > 0.0) {
        auto rng = make_rng(seed, {tag(Stream::Noise), static_cast<std::uint64_t>(client),
                                   static_cast<std::uint64_t>(state.round)});
        std::normal_distribution<double> noise(0.0, cfg.upload_noise_std);
        for (auto& [_, d] : res.delta)
          for (double& v : d.values()) v += noise(rng);
      }
      results[i] = std::move(res.delta);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), sampled.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < sampled.size(); ++i) work(i);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < sampled.size(); i += workers) work(i);
      });
  }

  Contributions out;
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        throw Error("round " + std::to_string(state.round + 1) + ", client " + std::to_string(sampled[i]) + ": " +
                    e.what());
      }
    }
    out.emplace(sampled[i], std::move(results[i]));
  }
  return out;
}

}  // namespace detail

/// Accuracy of every client's current model on its held-out split, CKA of
/// each stage over all clients, beta rates so far, and the step-size bound
/// estimated on the server model.
inline RoundRow evaluate(const ServerState& state, const FederatedData& data, const ExperimentConfig& cfg) {
  RoundRow row;
  row.round = state.round;
  const auto ids = cfg.client_ids();

  std::vector<ModelWeights> group_models;
  for (const auto& g : cfg.groups) group_models.push_back(distribute(state, g, cfg));
  auto group_index = [&](int client) {
    for (std::size_t j = 0; j < cfg.groups.size(); ++j) {
      const auto& cl = cfg.groups[j].client_ids;
      if (std::find(cl.begin(), cl.end(), client) != cl.end()) return j;
    }
    throw ConfigError("client " + std::to_string(client) + " is in no group");
  };

  std::vector<double> group_sum(cfg.groups.size(), 0.0);
  std::vector<int> group_n(cfg.groups.size(), 0);
  row.min_acc = 1.0;
  double total = 0.0;
  for (int c : ids) {
    const auto j = group_index(c);
    const Dataset& test = data.test.at(c);
    const double acc = accuracy(forward(group_models[j], test.features).logits, test.labels);
    total += acc;
    row.max_acc = std::max(row.max_acc, acc);
    row.min_acc = std::min(row.min_acc, acc);
    group_sum[j] += acc;
    ++group_n[j];
  }
  row.mean_acc = total / static_cast<double>(ids.size());
  for (std::size_t j = 0; j < group_sum.size(); ++j)
    row.acc_group.push_back(group_n[j] ? group_sum[j] / group_n[j] : std::nan(""));

  // Clients of one group hold identical models, so CKA is computed once per
  // group pair and expanded to the client matrix.
  for (int s = 0; s < cfg.model.stages; ++s) {
    const CkaMatrix gm = pairwise_stage_cka(group_models, data.eval_batch, s);
    const std::size_t k = ids.size();
    Tensor full({k, k});
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) full.at(a, b) = gm.scores.at(group_index(ids[a]), group_index(ids[b]));
    row.cka_stage.push_back(CkaMatrix{s, std::move(full), ids}.mean_off_diagonal());
  }

  const auto& largest = cfg.groups.back();
  for (const auto& key : layer_keys(largest.depth_per_stage))
    if (key.is_deep()) row.beta_rate.emplace_back(key, state.beta.positive_rate(key));

  if (cfg.eta_diagnostics) {
    StageNetObjective obj(state.global, data.diagnostic);
    EstimatorOptions opts;
    opts.probes = cfg.diagnostic_probes;
    opts.batch_size = static_cast<std::size_t>(cfg.trainer.batch_size);
    opts.seed = derive_seed(state.seed, {tag(Stream::Diagnostics), static_cast<std::uint64_t>(state.round)});
    const auto est = estimate_constants(obj, params_of(state.global), opts);
    ConvergenceConstants c = est.as_constants();
    c.E = cfg.trainer.local_epochs;
    if (c.L > 0.0) row.eta_bound = eta_bound_monotone(c, c.E * est.full_grad_norm_sq).value;
  }
  return row;
}

inline RunSummary run_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const FederatedData data = prepare_data(cfg, seed);
  ServerState state = init_server(cfg, seed);

  std::map<int, double> sizes;
  for (const auto& [c, d] : data.train) sizes[c] = static_cast<double>(d.size());
  const std::map<int, double>* weights = cfg.weighted_aggregation ? &sizes : nullptr;

  RunSummary summary;
  summary.method = cfg.label();
  summary.seed = seed;
  summary.rows.push_back(evaluate(state, data, cfg));
  for (int t = 1; t <= cfg.rounds; ++t) {
    const auto sampled = sample_clients(t, cfg, seed);
    const Contributions deltas = detail::train_clients(state, sampled, data, cfg, seed);
    state = server_round(std::move(state), deltas, cfg, weights);
    if (t % cfg.log_every == 0 || t == cfg.rounds) summary.rows.push_back(evaluate(state, data, cfg));
  }
  summary.zero_anchor_fallbacks = state.zero_anchor_fallbacks;
  summary.skipped_layers = state.skipped_layers;
  summary.final_global = std::move(state.global);
  summary.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

inline std::vector<RunSummary> run_all(const ExperimentConfig& cfg) {
  std::vector<RunSummary> out;
  for (auto s : cfg.seeds) out.push_back(run_experiment(cfg, s));
  return out;
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline std::string format_float(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string beta_column(const LayerKey& k) {
  return "beta_pos_rate_layer_" + std::to_string(k.stage) + "_" + std::to_string(k.index);
}

inline void write_metrics_header(std::ostream& os, const ExperimentConfig& cfg) {
  os << "round,method,seed,mean_acc,max_acc,min_acc";
  for (const auto& g : cfg.groups) os << ",acc_group_" << g.group_id;
  for (int s = 0; s < cfg.model.stages; ++s) os << ",cka_stage_" << s;
  for (const auto& key : layer_keys(cfg.groups.back().depth_per_stage))
    if (key.is_deep()) os << ',' << beta_column(key);
  os << ",eta_bound_estimate\n";
}

inline void write_metrics_rows(std::ostream& os, const RunSummary& run) {
  for (const auto& r : run.rows) {
    os << r.round << ',' << run.method << ',' << run.seed << ',' << format_float(r.mean_acc) << ','
       << format_float(r.max_acc) << ',' << format_float(r.min_acc);
    for (double a : r.acc_group) os << ',' << format_float(a);
    for (double c : r.cka_stage) os << ',' << format_float(c);
    for (const auto& [_, rate] : r.beta_rate) os << ',' << (rate ? format_float(*rate) : std::string("NA"));
    os << ',' << format_float(r.eta_bound) << '\n';
  }
}

inline void write_metrics_csv(std::ostream& os, const ExperimentConfig& cfg, const std::vector<RunSummary>& runs) {
  write_metrics_header(os, cfg);
  for (const auto& r : runs) write_metrics_rows(os, r);
}

/// Deep-layer beta positive rate pooled over layers at the final row.
inline std::optional<double> mean_deep_beta_rate(const RoundRow& row) {
  double acc = 0.0;
  int n = 0;
  for (const auto& [_, rate] : row.beta_rate)
    if (rate) {
      acc += *rate;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return acc / n;
}

}  // namespace inco
