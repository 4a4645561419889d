#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "inco/error.hpp"
#include "inco/rng.hpp"
#include "inco/tensor.hpp"

namespace inco {

struct Dataset {
  Tensor features;  // n x d
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  void validate() const {
    if (features.rank() != 2 || features.rows() != labels.size())
      throw DataError("dataset: " + std::to_string(labels.size()) + " labels for features of shape " +
                      shape_string(features.shape()));
    for (int y : labels)
      if (y < 0 || y >= num_classes) throw DataError("dataset: label " + std::to_string(y) + " out of range");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    if (idx.empty()) throw DataError("dataset: empty subset");
    Dataset d;
    d.features = gather_rows(features, idx);
    d.labels.reserve(idx.size());
    for (auto i : idx) d.labels.push_back(labels[i]);
    d.num_classes = num_classes;
    return d;
  }
};

/// Gaussian clusters, one unit-normal mean per class, labels assigned
/// round-robin and then shuffled.
inline Dataset synth_classification(std::size_t n, std::size_t dim, int classes, double cluster_spread,
                                    std::uint64_t seed) {
  if (classes < 1 || dim < 1) throw DataError("synth_classification: classes and dim must be >= 1");
  if (n < static_cast<std::size_t>(classes)) throw DataError("synth_classification: need n >= classes");
  auto rng = make_rng(seed, {tag(Stream::Data)});
  std::normal_distribution<double> normal(0.0, 1.0);

  Tensor means({static_cast<std::size_t>(classes), dim});
  for (double& v : means.values()) v = normal(rng);

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  std::shuffle(labels.begin(), labels.end(), rng);

  Tensor x({n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    auto mean = means.row(static_cast<std::size_t>(labels[i]));
    auto row = x.row(i);
    for (std::size_t j = 0; j < dim; ++j) row[j] = mean[j] + cluster_spread * normal(rng);
  }
  return {std::move(x), std::move(labels), classes};
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "idx: cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off, const std::string& path) {
  if (buf.size() < off + 4) throw IdxError(IdxError::Kind::Truncated, "idx: truncated header in " + path);
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) | (std::uint32_t{buf[off + 2]} << 8) |
         std::uint32_t{buf[off + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label pair (big-endian header, unsigned bytes).
/// Pixels are scaled to [0, 1]; the class count is max label + 1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  if (detail::read_be32(img, 0, images_path) != kIdxImageMagic)
    throw IdxError(IdxError::Kind::BadMagic, "idx: bad image magic in " + images_path);
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelMagic)
    throw IdxError(IdxError::Kind::BadMagic, "idx: bad label magic in " + labels_path);

  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels)
    throw IdxError(IdxError::Kind::CountMismatch, "idx: " + std::to_string(n) + " images but " +
                                                      std::to_string(n_labels) + " labels");
  const std::size_t pixels = rows * cols;
  if (n == 0 || pixels == 0) throw IdxError(IdxError::Kind::Truncated, "idx: empty dataset in " + images_path);
  if (img.size() < 16 + n * pixels) throw IdxError(IdxError::Kind::Truncated, "idx: truncated pixels in " + images_path);
  if (lab.size() < 8 + n) throw IdxError(IdxError::Kind::Truncated, "idx: truncated labels in " + labels_path);

  Tensor x({n, pixels});
  for (std::size_t i = 0; i < n * pixels; ++i) x[i] = static_cast<double>(img[16 + i]) / 255.0;
  std::vector<int> labels(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lab[8 + i];
    max_label = std::max(max_label, labels[i]);
  }
  return {std::move(x), std::move(labels), max_label + 1};
}

struct PartitionConfig {
  int num_clients = 1;
  double dirichlet_alpha = 0.5;
  std::uint64_t seed = 0;
  std::size_t min_per_client = 2;
  int max_retries = 1000;

  void validate() const {
    if (num_clients < 1) throw ConfigError("partition: num_clients must be >= 1");
    if (!(dirichlet_alpha > 0.0)) throw ConfigError("partition: dirichlet_alpha must be > 0");
    if (min_per_client < 1) throw ConfigError("partition: min_per_client must be >= 1");
  }
};

/// Label-skewed split: for each class, client proportions are drawn from
/// Dirichlet(alpha, ..., alpha) and the class's shuffled indices are cut
/// accordingly. Draws repeat until every shard has min_per_client samples.
/// Shards come back sorted.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(std::span<const int> labels,
                                                                 const PartitionConfig& cfg) {
  cfg.validate();
  if (labels.empty()) throw PartitionError("dirichlet_partition: no labels");
  const auto k = static_cast<std::size_t>(cfg.num_clients);
  if (labels.size() < k * cfg.min_per_client)
    throw PartitionError("dirichlet_partition: " + std::to_string(labels.size()) + " samples cannot give " +
                         std::to_string(k) + " clients " + std::to_string(cfg.min_per_client) + " each");

  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw PartitionError("dirichlet_partition: negative label");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }

  auto rng = make_rng(cfg.seed, {tag(Stream::Partition)});
  std::gamma_distribution<double> gamma(cfg.dirichlet_alpha, 1.0);
  std::vector<double> props(k);

  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    std::vector<std::vector<std::size_t>> shards(k);
    for (const auto& idx_c : by_class) {
      if (idx_c.empty()) continue;
      auto idx = idx_c;
      std::shuffle(idx.begin(), idx.end(), rng);
      double total = 0.0;
      for (auto& p : props) total += (p = gamma(rng));
      if (!(total > 0.0)) {
        // Every gamma draw underflowed (tiny alpha): give the class to one client.
        std::fill(props.begin(), props.end(), 0.0);
        props[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
        total = 1.0;
      }
      const double nc = static_cast<double>(idx.size());
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < k; ++c) {
        cum += props[c] / total;
        const std::size_t end = c + 1 == k ? idx.size() : std::min(idx.size(), static_cast<std::size_t>(cum * nc));
        for (std::size_t i = start; i < std::max(start, end); ++i) shards[c].push_back(idx[i]);
        start = std::max(start, end);
      }
    }
    const bool ok = std::all_of(shards.begin(), shards.end(),
                                [&](const auto& s) { return s.size() >= cfg.min_per_client; });
    if (ok) {
      for (auto& s : shards) std::sort(s.begin(), s.end());
      return shards;
    }
  }
  throw PartitionError("dirichlet_partition: could not give every client " + std::to_string(cfg.min_per_client) +
                       " samples after " + std::to_string(cfg.max_retries) + " attempts");
}

/// Splits a shard into (train, held-out) with `fraction` of it held out,
/// at least one sample on each side when the shard has two or more.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::vector<std::size_t> shard,
                                                                                   double fraction, Rng& rng) {
  std::shuffle(shard.begin(), shard.end(), rng);
  std::size_t held = static_cast<std::size_t>(fraction * static_cast<double>(shard.size()));
  if (shard.size() >= 2) held = std::clamp<std::size_t>(held, 1, shard.size() - 1);
  std::vector<std::size_t> test(shard.begin(), shard.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train(shard.begin() + static_cast<std::ptrdiff_t>(held), shard.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

}  // namespace inco
