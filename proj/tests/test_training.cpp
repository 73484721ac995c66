#include "doctest.h"

#include "error.hpp"
#include "support.hpp"
#include "training.hpp"

#include <cmath>

using namespace milkid;
using namespace milkid::testing;

namespace {

Errc code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::InvalidArgument;
}

MilDataset small_benchmark(uint64_t seed, std::size_t bags = 40) {
  SyntheticParams p;
  p.bag_count = bags;
  p.instances_per_bag = 10;
  p.dim = 16;
  p.key_rate = 0.2;
  p.seed = seed;
  return make_synthetic_bags(p);
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 6;
  c.hidden = {16, 8};
  c.attention_dim = 8;
  c.learning_rate = 0.005;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("nll reference values") {
  CHECK(nll_loss(0.5, 1) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(nll_loss(0.9, 1) == doctest::Approx(0.105361).epsilon(1e-6));
  CHECK(nll_loss(0.9, 0) == doctest::Approx(2.302585).epsilon(1e-6));
  CHECK(std::isfinite(nll_loss(0.0, 1)));
  CHECK(std::isfinite(nll_loss(1.0, 0)));
}

TEST_CASE("adam matches a scalar reference with coupled weight decay") {
  ModelParams p = init_params(tiny_shape(), 4);
  ModelParams g = zeros_like(p);
  Rng rng(8);
  for_each_tensor(g, g, [&](auto& a, auto&) {
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform() - 0.5;
  });
  TrainConfig cfg;
  OptimizerState state = OptimizerState::for_params(p);

  // Scalar oracle on every coordinate independently.
  std::vector<double> ref_p, ref_g;
  for_each_tensor(p, g, [&](const auto& a, const auto& b) {
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      ref_p.push_back(a.data()[i]);
      ref_g.push_back(b.data()[i]);
    }
  });
  std::vector<double> m(ref_p.size(), 0.0), v(ref_p.size(), 0.0);
  const uint64_t before = p.version;
  for (int step = 1; step <= 3; ++step) {
    adam_step(p, g, state, cfg);
    for (std::size_t i = 0; i < ref_p.size(); ++i) {
      const double gi = ref_g[i] + cfg.weight_decay * ref_p[i];
      m[i] = cfg.adam_beta1 * m[i] + (1 - cfg.adam_beta1) * gi;
      v[i] = cfg.adam_beta2 * v[i] + (1 - cfg.adam_beta2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(cfg.adam_beta1, step));
      const double vh = v[i] / (1 - std::pow(cfg.adam_beta2, step));
      ref_p[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_epsilon);
    }
  }
  std::size_t idx = 0;
  bool all_close = true;
  for_each_tensor(p, p, [&](const auto& a, const auto&) {
    for (Eigen::Index i = 0; i < a.size(); ++i, ++idx) {
      all_close = all_close && std::abs(a.data()[i] - ref_p[idx]) <= 1e-15 + 1e-12 * std::abs(ref_p[idx]);
    }
  });
  CHECK(all_close);
  CHECK(state.step == 3);
  CHECK(p.version != before);
}

TEST_CASE("first adam step moves each coordinate by about the learning rate") {
  ModelParams p = init_params(tiny_shape(), 1);
  ModelParams g = zeros_like(p);
  g.classifier_b = 0.5;
  p.classifier_b = 1.0;
  TrainConfig cfg;
  OptimizerState s = OptimizerState::for_params(p);
  adam_step(p, g, s, cfg);
  CHECK(p.classifier_b == doctest::Approx(1.0 - 0.0005).epsilon(1e-9));
}

TEST_CASE("momentum sgd example") {
  Matrix x = Matrix::Zero(1, 1);
  Matrix v = Matrix::Zero(1, 1);
  const Matrix g = Matrix::Ones(1, 1);
  sgd_momentum_step(x, g, v, 0.1, 0.9);
  CHECK(x(0, 0) == doctest::Approx(-0.1));
  sgd_momentum_step(x, g, v, 0.1, 0.9);
  CHECK(v(0, 0) == doctest::Approx(1.9));
  CHECK(x(0, 0) == doctest::Approx(-0.29));
}

TEST_CASE("prediction threshold is inclusive") {
  ModelParams p = init_params(tiny_shape(), 2);
  p.classifier_w.setZero();
  p.classifier_b = 0.0;
  const Matrix x = Matrix::Constant(3, 4, 0.5);
  CHECK(predict_bag(x, p, PoolingMode::Attention, 0.5).label == 1);
  p.classifier_b = -1e-9;
  CHECK(predict_bag(x, p, PoolingMode::Attention, 0.5).label == 0);
}

TEST_CASE("training lowers the loss, keeps the best epoch and is deterministic") {
  const MilDataset ds = small_benchmark(1);
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) (i % 4 == 0 ? va : tr).push_back(i);
  const TrainConfig cfg = small_config();
  const TrainResult a = train(ds, tr, va, PoolingMode::Attention, cfg);
  const TrainResult b = train(ds, tr, va, PoolingMode::Attention, cfg);
  REQUIRE(a.log.epochs.size() == 6);
  CHECK(a.log.epochs.back().train_loss < a.log.epochs.front().train_loss);
  double best = 1e300;
  std::size_t best_epoch = 0;
  for (const auto& e : a.log.epochs) {
    if (e.val_loss < best) {
      best = e.val_loss;
      best_epoch = e.epoch;
    }
  }
  CHECK(a.log.best_epoch == best_epoch);
  CHECK(evaluate_bags(ds, va, a.params, PoolingMode::Attention, 0.5).loss == doctest::Approx(best).epsilon(1e-12));
  CHECK(params_checksum(a.params) == params_checksum(b.params));
  CHECK(a.log.to_csv().rfind("epoch,train_loss,val_loss,train_acc,val_acc\n", 0) == 0);
}

TEST_CASE("instance pooling modes train") {
  const MilDataset ds = small_benchmark(2);
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) (i % 4 == 0 ? va : tr).push_back(i);
  TrainConfig cfg = small_config();
  cfg.epochs = 2;
  CHECK_NOTHROW(train(ds, tr, va, PoolingMode::InstanceMax, cfg));
  CHECK_NOTHROW(train(ds, tr, va, PoolingMode::InstanceMean, cfg));
}

TEST_CASE("training input validation") {
  const MilDataset ds = small_benchmark(3, 20);
  std::vector<std::size_t> tr, va, negatives;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    (i % 4 == 0 ? va : tr).push_back(i);
    if (*ds.bags[i].bag_label == 0) negatives.push_back(i);
  }
  TrainConfig cfg = small_config();
  CHECK(code_of([&] { train(ds, {}, va, PoolingMode::Attention, cfg); }) == Errc::EmptySplit);
  CHECK(code_of([&] { train(ds, negatives, va, PoolingMode::Attention, cfg); }) == Errc::SingleClassSplit);
  CHECK(code_of([&] { train(ds, tr, tr, PoolingMode::Attention, cfg); }) == Errc::InvalidArgument);
  cfg.epochs = 0;
  CHECK(code_of([&] { validate_train_config(cfg); }) == Errc::InvalidConfig);
  CHECK(code_of([&] { train(ds, tr, va, PoolingMode::Attention, cfg); }) == Errc::InvalidConfig);

  MilDataset unlabeled = ds;
  unlabeled.bags[tr[0]].bag_label.reset();
  unlabeled.bags[tr[0]].instance_labels.reset();
  CHECK(code_of([&] { train(unlabeled, tr, va, PoolingMode::Attention, small_config()); }) == Errc::MissingLabels);
}
