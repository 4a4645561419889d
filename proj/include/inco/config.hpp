#pragma once

#include <cmath>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <json.hpp>
#include <toml.hpp>

#include "inco/error.hpp"
#include "inco/sim.hpp"

namespace inco {

namespace detail {

template <class T>
void read(const toml::table& t, std::string_view key, T& out) {
  const auto* node = t.get(key);
  if (!node) return;
  if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node->value<bool>()) {
      out = *v;
      return;
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (auto v = node->value<double>()) {
      out = *v;
      return;
    }
  } else if constexpr (std::is_integral_v<T>) {
    if (auto v = node->value<std::int64_t>()) {
      if (*v < 0 && std::is_unsigned_v<T>) throw ConfigError("config: '" + std::string(key) + "' must be >= 0");
      out = static_cast<T>(*v);
      return;
    }
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (auto v = node->value<std::string>()) {
      out = *v;
      return;
    }
  }
  throw ConfigError("config: '" + std::string(key) + "' has the wrong type");
}

template <class T>
void read_list(const toml::table& t, std::string_view key, std::vector<T>& out) {
  const auto* node = t.get(key);
  if (!node) return;
  const auto* arr = node->as_array();
  if (!arr) throw ConfigError("config: '" + std::string(key) + "' must be an array");
  out.clear();
  for (const auto& el : *arr) {
    auto v = el.value<std::int64_t>();
    if (!v) throw ConfigError("config: '" + std::string(key) + "' must hold integers");
    out.push_back(static_cast<T>(*v));
  }
}

inline const toml::table* sub(const toml::table& t, std::string_view key) {
  const auto* node = t.get(key);
  if (!node) return nullptr;
  const auto* tbl = node->as_table();
  if (!tbl) throw ConfigError("config: '" + std::string(key) + "' must be a table");
  return tbl;
}

inline Method parse_method(const std::string& s) {
  if (s == "inco") return Method::InCo;
  if (s == "hetero_avg") return Method::HeteroAvg;
  if (s == "fedavg_groupwise") return Method::FedAvgGroupwise;
  throw ConfigError("config: unknown method '" + s + "'");
}

}  // namespace detail

/// Parses an ExperimentConfig from TOML text. Keys mirror the struct field
/// names; anything omitted keeps its default. Groups may list explicit
/// `client_ids` or a client count `size`, in which case ids are assigned
/// consecutively in group order.
inline ExperimentConfig parse_config(std::string_view text, std::string_view source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError(std::string("config: ") + std::string(e.description()));
  }
  using detail::read;
  using detail::read_list;

  ExperimentConfig cfg;
  std::string method = to_string(cfg.method), client_algo = to_string(cfg.client_algo);
  read(root, "method", method);
  read(root, "client_algo", client_algo);
  cfg.method = detail::parse_method(method);
  if (client_algo == "prox")
    cfg.client_algo = ClientAlgo::Prox;
  else if (client_algo != "plain")
    throw ConfigError("config: unknown client_algo '" + client_algo + "'");

  read(root, "rounds", cfg.rounds);
  read(root, "clients", cfg.clients);
  read(root, "sample_ratio", cfg.sample_ratio);
  read(root, "eval_batch", cfg.eval_batch);
  read(root, "log_every", cfg.log_every);
  read_list(root, "seeds", cfg.seeds);
  read(root, "threads", cfg.threads);
  read(root, "weighted_aggregation", cfg.weighted_aggregation);
  read(root, "upload_noise_std", cfg.upload_noise_std);
  read(root, "eta_diagnostics", cfg.eta_diagnostics);
  read(root, "diagnostic_probes", cfg.diagnostic_probes);

  if (const auto* s = detail::sub(root, "surgery")) {
    read(*s, "normalize", cfg.surgery.normalize);
    read(*s, "optimize", cfg.surgery.optimize);
    read(*s, "always_subtract", cfg.surgery.always_subtract);
    read(*s, "epsilon_norm", cfg.surgery.epsilon_norm);
    read(*s, "theta_on_raw", cfg.surgery.theta_on_raw);
  }

  if (const auto* m = detail::sub(root, "model")) {
    read(*m, "input_dim", cfg.model.input_dim);
    read_list(*m, "stage_widths", cfg.model.stage_widths);
    cfg.model.stages = static_cast<int>(cfg.model.stage_widths.size());
    read(*m, "stages", cfg.model.stages);
    read(*m, "num_classes", cfg.model.num_classes);
    std::string act = cfg.model.activation == Activation::ReLU ? "relu" : "tanh";
    read(*m, "activation", act);
    if (act == "relu")
      cfg.model.activation = Activation::ReLU;
    else if (act == "tanh")
      cfg.model.activation = Activation::Tanh;
    else
      throw ConfigError("config: unknown activation '" + act + "'");
  }

  if (const auto* t = detail::sub(root, "trainer")) {
    std::string opt = cfg.trainer.optimizer == Optimizer::SGD ? "sgd" : "adam";
    read(*t, "optimizer", opt);
    if (opt == "sgd")
      cfg.trainer.optimizer = Optimizer::SGD;
    else if (opt == "adam")
      cfg.trainer.optimizer = Optimizer::Adam;
    else
      throw ConfigError("config: unknown optimizer '" + opt + "'");
    read(*t, "learning_rate", cfg.trainer.learning_rate);
    read(*t, "local_epochs", cfg.trainer.local_epochs);
    read(*t, "batch_size", cfg.trainer.batch_size);
    read(*t, "prox_mu", cfg.trainer.prox_mu);
    read(*t, "adam_beta1", cfg.trainer.adam_beta1);
    read(*t, "adam_beta2", cfg.trainer.adam_beta2);
    read(*t, "adam_eps", cfg.trainer.adam_eps);
  }

  if (const auto* p = detail::sub(root, "partition")) {
    read(*p, "dirichlet_alpha", cfg.partition.dirichlet_alpha);
    read(*p, "min_per_client", cfg.partition.min_per_client);
    read(*p, "max_retries", cfg.partition.max_retries);
  }
  cfg.partition.num_clients = cfg.clients;

  if (const auto* d = detail::sub(root, "data")) {
    read(*d, "kind", cfg.data.kind);
    read(*d, "samples", cfg.data.samples);
    read(*d, "dim", cfg.data.dim);
    read(*d, "classes", cfg.data.classes);
    read(*d, "cluster_spread", cfg.data.cluster_spread);
    read(*d, "images", cfg.data.images);
    read(*d, "labels", cfg.data.labels);
    read(*d, "holdout_fraction", cfg.data.holdout_fraction);
  }

  if (const auto* node = root.get("groups")) {
    const auto* arr = node->as_array();
    if (!arr) throw ConfigError("config: 'groups' must be an array of tables");
    int next_client = 0;
    int next_id = 1;
    for (const auto& el : *arr) {
      const auto* g = el.as_table();
      if (!g) throw ConfigError("config: 'groups' must be an array of tables");
      GroupSpec spec;
      spec.group_id = next_id;
      read(*g, "group_id", spec.group_id);
      read_list(*g, "depth_per_stage", spec.depth_per_stage);
      read_list(*g, "client_ids", spec.client_ids);
      if (spec.client_ids.empty()) {
        int size = 0;
        read(*g, "size", size);
        if (size < 1) throw ConfigError("config: group needs 'client_ids' or a positive 'size'");
        for (int i = 0; i < size; ++i) spec.client_ids.push_back(next_client++);
      } else {
        for (int c : spec.client_ids) next_client = std::max(next_client, c + 1);
      }
      next_id = spec.group_id + 1;
      cfg.groups.push_back(std::move(spec));
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text, path);
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  using nlohmann::json;
  json groups = json::array();
  for (const auto& g : cfg.groups)
    groups.push_back({{"group_id", g.group_id}, {"depth_per_stage", g.depth_per_stage}, {"client_ids", g.client_ids}});
  return {
      {"method", to_string(cfg.method)},
      {"client_algo", to_string(cfg.client_algo)},
      {"rounds", cfg.rounds},
      {"clients", cfg.clients},
      {"sample_ratio", cfg.sample_ratio},
      {"eval_batch", cfg.eval_batch},
      {"log_every", cfg.log_every},
      {"seeds", cfg.seeds},
      {"threads", cfg.threads},
      {"weighted_aggregation", cfg.weighted_aggregation},
      {"upload_noise_std", cfg.upload_noise_std},
      {"eta_diagnostics", cfg.eta_diagnostics},
      {"diagnostic_probes", cfg.diagnostic_probes},
      {"surgery",
       {{"normalize", cfg.surgery.normalize},
        {"optimize", cfg.surgery.optimize},
        {"always_subtract", cfg.surgery.always_subtract},
        {"epsilon_norm", cfg.surgery.epsilon_norm},
        {"theta_on_raw", cfg.surgery.theta_on_raw}}},
      {"model",
       {{"input_dim", cfg.model.input_dim},
        {"stage_widths", cfg.model.stage_widths},
        {"stages", cfg.model.stages},
        {"num_classes", cfg.model.num_classes},
        {"activation", cfg.model.activation == Activation::ReLU ? "relu" : "tanh"}}},
      {"trainer",
       {{"optimizer", cfg.trainer.optimizer == Optimizer::SGD ? "sgd" : "adam"},
        {"learning_rate", cfg.trainer.learning_rate},
        {"local_epochs", cfg.trainer.local_epochs},
        {"batch_size", cfg.trainer.batch_size},
        {"prox_mu", cfg.trainer.prox_mu},
        {"adam_beta1", cfg.trainer.adam_beta1},
        {"adam_beta2", cfg.trainer.adam_beta2},
        {"adam_eps", cfg.trainer.adam_eps}}},
      {"partition",
       {{"dirichlet_alpha", cfg.partition.dirichlet_alpha},
        {"min_per_client", cfg.partition.min_per_client},
        {"max_retries", cfg.partition.max_retries}}},
      {"data",
       {{"kind", cfg.data.kind},
        {"samples", cfg.data.samples},
        {"dim", cfg.data.dim},
        {"classes", cfg.data.classes},
        {"cluster_spread", cfg.data.cluster_spread},
        {"images", cfg.data.images},
        {"labels", cfg.data.labels},
        {"holdout_fraction", cfg.data.holdout_fraction}}},
      {"groups", groups},
  };
}

inline nlohmann::json to_json(const RoundRow& r) {
  nlohmann::json beta = nlohmann::json::object();
  for (const auto& [k, rate] : r.beta_rate)
    beta[beta_column(k)] = rate ? nlohmann::json(*rate) : nlohmann::json(nullptr);
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json groups = nlohmann::json::array();
  for (double a : r.acc_group) groups.push_back(num(a));
  return {{"round", r.round},         {"mean_acc", r.mean_acc},   {"max_acc", r.max_acc},
          {"min_acc", r.min_acc},     {"acc_group", groups},      {"cka_stage", r.cka_stage},
          {"beta_pos_rate", beta},    {"eta_bound_estimate", num(r.eta_bound)}};
}

}  // namespace inco
