#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "inco/trainer.hpp"
#include "oracles.hpp"

using namespace inco;

namespace {

StageNetConfig tiny_config() {
  StageNetConfig c;
  c.input_dim = 2;
  c.stage_widths = {2};
  c.stages = 1;
  c.num_classes = 2;
  return c;
}

// proj = I, block = [[1,1],[0,-1]] with bias [0.5,0], classifier = I with
// bias [0,1].
ModelWeights tiny_model() {
  ModelWeights w = init_model(tiny_config(), GroupSpec{1, {1}, {0}}, 0);
  w.find(LayerKey::projection(0))->weight = Tensor::identity(2);
  w.find(LayerKey::projection(0))->bias = Tensor::vector({0, 0});
  w.find(LayerKey::block(0, 0))->weight = Tensor::matrix(2, 2, {1, 1, 0, -1});
  w.find(LayerKey::block(0, 0))->bias = Tensor::vector({0.5, 0});
  w.find(LayerKey::classifier(1))->weight = Tensor::identity(2);
  w.find(LayerKey::classifier(1))->bias = Tensor::vector({0, 1});
  return w;
}

StageNetConfig fd_config(Activation a) {
  StageNetConfig c;
  c.input_dim = 5;
  c.stage_widths = {6, 8, 4};
  c.stages = 3;
  c.num_classes = 3;
  c.activation = a;
  return c;
}

Dataset random_shard(std::size_t n, const StageNetConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.features = oracle::random_tensor({n, static_cast<std::size_t>(cfg.input_dim)}, rng);
  std::uniform_int_distribution<int> lab(0, cfg.num_classes - 1);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(lab(rng));
  d.num_classes = cfg.num_classes;
  return d;
}

double max_fd_rel_error(Activation act, std::uint64_t seed, int probes) {
  const auto cfg = fd_config(act);
  ModelWeights w = init_model(cfg, GroupSpec{1, {2, 3, 2}, {0}}, seed);
  const Dataset d = random_shard(7, cfg, seed + 1);
  const auto fw = forward(w, d.features);
  const ParamMap grads = backward(fw.cache, d.labels);

  std::vector<ParamKey> keys;
  for (const auto& [k, _] : grads) keys.push_back(k);
  std::mt19937_64 rng(seed + 2);
  std::uniform_int_distribution<std::size_t> pick_key(0, keys.size() - 1);
  const double h = 1e-5;
  double worst = 0.0;
  for (int p = 0; p < probes; ++p) {
    const ParamKey key = keys[pick_key(rng)];
    Tensor& t = param_ref(w, key);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, t.size() - 1)(rng);
    const double orig = t[i];
    t[i] = orig + h;
    const double up = cross_entropy(forward(w, d.features).logits, d.labels);
    t[i] = orig - h;
    const double down = cross_entropy(forward(w, d.features).logits, d.labels);
    t[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    const double an = grads.at(key)[i];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST(InitModel, Deterministic) {
  const StageNetConfig cfg;
  const GroupSpec g{1, {2, 2, 2}, {0}};
  EXPECT_EQ(init_model(cfg, g, 42), init_model(cfg, g, 42));
  EXPECT_FALSE(init_model(cfg, g, 42) == init_model(cfg, g, 43));
}

TEST(InitModel, DepthOneHasOneBlockPerStage) {
  const StageNetConfig cfg;
  const auto w = init_model(cfg, GroupSpec{1, {1, 1, 1}, {0}}, 0);
  ASSERT_EQ(w.layers.size(), 7u);
  int blocks = 0;
  for (const auto& l : w.layers) {
    if (l.key.is_block()) {
      ++blocks;
      EXPECT_EQ(l.key.index, 0);
      EXPECT_EQ(l.weight.rows(), l.weight.cols());
    }
  }
  EXPECT_EQ(blocks, 3);
  EXPECT_NE(w.find(LayerKey::classifier(3)), nullptr);
}

TEST(InitModel, SmallerGroupIsPrefixOfLarger) {
  const StageNetConfig cfg;
  const auto small = init_model(cfg, GroupSpec{1, {1, 2, 1}, {0}}, 9);
  const auto large = init_model(cfg, GroupSpec{2, {3, 3, 3}, {1}}, 9);
  EXPECT_EQ(slice_for_group(large, GroupSpec{1, {1, 2, 1}, {0}}), small);
}

TEST(InitModel, SymmetricAroundZero) {
  const StageNetConfig cfg;
  std::vector<double> vals;
  for (std::uint64_t seed = 0; vals.size() < 10000; ++seed) {
    const auto w = init_model(cfg, GroupSpec{1, {1, 1, 1}, {0}}, seed);
    const auto& t = w.find(LayerKey::block(1, 0))->weight;
    vals.insert(vals.end(), t.values().begin(), t.values().end());
  }
  double mean = 0.0, sq = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  for (double v : vals) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / static_cast<double>(vals.size() - 1)) / std::sqrt(static_cast<double>(vals.size()));
  EXPECT_LT(std::abs(mean), 3.0 * se);
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  auto w = init_model(StageNetConfig{}, GroupSpec{1, {2, 1, 1}, {0}}, 1);
  for (auto& l : w.layers) {
    l.weight = Tensor::zeros_like(l.weight);
    l.bias = Tensor::zeros_like(l.bias);
  }
  std::mt19937_64 rng(1);
  const auto r = forward(w, oracle::random_tensor({4, 32}, rng));
  EXPECT_EQ(r.logits, Tensor::zeros({4, 10}));
  EXPECT_EQ(r.stage_features.size(), 3u);
}

TEST(Forward, DuplicatedRowsGiveIdenticalLogits) {
  const auto w = init_model(StageNetConfig{}, GroupSpec{1, {2, 2, 2}, {0}}, 3);
  std::mt19937_64 rng(2);
  const Tensor row = oracle::random_tensor({1, 32}, rng);
  std::vector<double> v(row.values().begin(), row.values().end());
  v.insert(v.end(), row.values().begin(), row.values().end());
  const auto r = forward(w, Tensor::matrix(2, 32, v));
  for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(r.logits.at(0, j), r.logits.at(1, j));
}

TEST(Forward, HandComputedTinyNet) {
  const auto w = tiny_model();
  const auto r = forward(w, Tensor::matrix(1, 2, {1, 2}));
  // proj: relu([1,2]) = [1,2]; block: relu([3.5,-2]) = [3.5,0];
  // classifier: [3.5, 1].
  EXPECT_EQ(r.logits, Tensor::matrix(1, 2, {3.5, 1.0}));
  ASSERT_EQ(r.stage_features.size(), 1u);
  EXPECT_EQ(r.stage_features[0], Tensor::matrix(1, 2, {3.5, 0.0}));
}

TEST(Forward, RejectsWrongInputWidth) {
  const auto w = tiny_model();
  EXPECT_THROW(forward(w, Tensor::matrix(1, 3, {1, 2, 3})), ShapeError);
}

TEST(Backward, SaturatedPredictionHasNearZeroGradient) {
  auto w = tiny_model();
  w.find(LayerKey::classifier(1))->bias = Tensor::vector({100, 0});
  const auto fw = forward(w, Tensor::matrix(1, 2, {1, 2}));
  const std::vector<int> y{0};
  const auto g = backward(fw.cache, y);
  const auto& gb = g.at(ParamKey{LayerKey::classifier(1), ParamRole::Bias});
  EXPECT_LT(std::abs(gb[0]), 1e-30);
  EXPECT_LT(std::abs(gb[1]), 1e-30);
}

TEST(Backward, InvalidLabelIsAnError) {
  const auto w = tiny_model();
  const auto fw = forward(w, Tensor::matrix(1, 2, {1, 2}));
  const std::vector<int> bad{2}, neg{-1};
  EXPECT_THROW(backward(fw.cache, bad), Error);
  EXPECT_THROW(backward(fw.cache, neg), Error);
}

TEST(Backward, MatchesFiniteDifferencesTanh) { EXPECT_LT(max_fd_rel_error(Activation::Tanh, 10, 200), 1e-4); }

TEST(Backward, MatchesFiniteDifferencesRelu) { EXPECT_LT(max_fd_rel_error(Activation::ReLU, 20, 200), 1e-4); }

TEST(Backward, DuplicatedBatchGivesSameMeanGradient) {
  const auto cfg = fd_config(Activation::ReLU);
  const auto w = init_model(cfg, GroupSpec{1, {2, 2, 2}, {0}}, 4);
  const Dataset d = random_shard(6, cfg, 5);
  std::vector<double> v(d.features.values().begin(), d.features.values().end());
  v.insert(v.end(), d.features.values().begin(), d.features.values().end());
  std::vector<int> y = d.labels;
  y.insert(y.end(), d.labels.begin(), d.labels.end());
  const auto g1 = backward(forward(w, d.features).cache, d.labels);
  const Tensor doubled = Tensor::matrix(12, 5, v);
  const auto fw2 = forward(w, doubled);
  const auto g2 = backward(fw2.cache, y);
  for (const auto& [k, t] : g1)
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t[i], g2.at(k)[i], 1e-14 * (1.0 + std::abs(t[i])));
}

TEST(LocalTrain, ZeroLearningRateGivesZeroDelta) {
  const auto cfg = fd_config(Activation::ReLU);
  const auto w = init_model(cfg, GroupSpec{1, {2, 2, 2}, {0}}, 4);
  const Dataset d = random_shard(20, cfg, 6);
  for (auto opt : {Optimizer::SGD, Optimizer::Adam}) {
    TrainerConfig t;
    t.optimizer = opt;
    t.learning_rate = 0.0;
    t.local_epochs = 2;
    t.batch_size = 8;
    const auto r = local_train(w, d, t, w);
    for (const auto& [_, dt] : r.delta) EXPECT_TRUE(dt.is_zero());
    EXPECT_EQ(r.weights, w);
  }
}

TEST(LocalTrain, OneSgdStepIsMinusEtaGrad) {
  const auto w = tiny_model();
  Dataset d;
  d.features = Tensor::matrix(1, 2, {1, 2});
  d.labels = {0};
  d.num_classes = 2;
  TrainerConfig t;
  t.optimizer = Optimizer::SGD;
  t.learning_rate = 0.1;
  t.local_epochs = 1;
  t.batch_size = 1;
  const auto r = local_train(w, d, t, w);
  const auto g = backward(forward(w, d.features).cache, d.labels);
  for (const auto& [k, gt] : g) EXPECT_EQ(r.delta.at(k), gt * -0.1) << to_string(k);
  // Hand value: classifier bias gradient is softmax([3.5,1]) - onehot(0).
  const double p0 = 1.0 / (1.0 + std::exp(-2.5));
  const auto& db = r.delta.at(ParamKey{LayerKey::classifier(1), ParamRole::Bias});
  EXPECT_NEAR(db[0], -0.1 * (p0 - 1.0), 1e-16);
  EXPECT_NEAR(db[1], -0.1 * (1.0 - p0), 1e-16);
  const auto& dw = r.delta.at(ParamKey{LayerKey::classifier(1), ParamRole::Weight});
  EXPECT_NEAR(dw.at(0, 0), -0.1 * (p0 - 1.0) * 3.5, 1e-15);
  EXPECT_EQ(dw.at(0, 1), 0.0);
}

TEST(LocalTrain, WeightsEqualStartPlusDeltaBitExact) {
  const auto cfg = fd_config(Activation::ReLU);
  const auto w = init_model(cfg, GroupSpec{1, {2, 2, 2}, {0}}, 7);
  const Dataset d = random_shard(50, cfg, 8);
  TrainerConfig t;
  t.local_epochs = 3;
  t.batch_size = 16;
  t.prox_mu = 0.1;
  const auto r = local_train(w, d, t, w);
  for (const auto& [k, dt] : r.delta) EXPECT_EQ(param_ref(r.weights, k), param_ref(w, k) + dt) << to_string(k);
}

TEST(LocalTrain, DeterministicPerSeed) {
  const auto cfg = fd_config(Activation::Tanh);
  const auto w = init_model(cfg, GroupSpec{1, {2, 2, 2}, {0}}, 7);
  const Dataset d = random_shard(50, cfg, 8);
  TrainerConfig t;
  t.local_epochs = 2;
  t.batch_size = 8;
  t.seed = 99;
  EXPECT_EQ(local_train(w, d, t, w).weights, local_train(w, d, t, w).weights);
}

TEST(LocalTrain, ProxTermShrinksDeltaMonotonically) {
  const auto cfg = fd_config(Activation::Tanh);
  const auto w = init_model(cfg, GroupSpec{1, {2, 2, 2}, {0}}, 11);
  const Dataset d = random_shard(16, cfg, 12);
  TrainerConfig t;
  t.optimizer = Optimizer::SGD;
  t.learning_rate = 0.005;
  t.local_epochs = 40;
  t.batch_size = 16;  // one fixed batch
  std::vector<double> norms;
  for (double mu : {0.0, 1.0, 100.0}) {
    t.prox_mu = mu;
    double sq = 0.0;
    for (const auto& [_, dt] : local_train(w, d, t, w).delta) sq += inner(dt, dt);
    norms.push_back(std::sqrt(sq));
  }
  EXPECT_GT(norms[0], norms[1]);
  EXPECT_GT(norms[1], norms[2]);
  EXPECT_LT(norms[2], 0.1 * norms[0]);
}

TEST(LocalTrain, EmptyShardIsAnError) {
  const auto w = tiny_model();
  Dataset empty;
  empty.num_classes = 2;
  EXPECT_THROW(local_train(w, empty, TrainerConfig{}, w), DataError);
}
