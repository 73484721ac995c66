#include "doctest.h"

#include "data.hpp"
#include "error.hpp"
#include "support.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

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

MilDataset toy_dataset(std::size_t n, std::size_t positives) {
  MilDataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix x = Matrix::Zero(2, 2);
    std::vector<uint8_t> inst{0, 0};
    if (i < positives) inst[1] = 1;
    ds.bags.push_back(labelled_bag("b" + std::to_string(i), x, inst));
  }
  return ds;
}

}  // namespace

TEST_CASE("idx parse reads big-endian dims and payload") {
  const auto bytes = idx_bytes(0x08, {2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  const IdxTensor t = parse_idx(bytes);
  CHECK(t.dims == std::vector<uint32_t>{2, 2, 3});
  REQUIRE(t.data.size() == 12);
  CHECK(t.data.front() == 1);
  CHECK(t.data.back() == 12);

  const auto big = idx_bytes(0x08, {300}, std::vector<uint8_t>(300, 7));
  CHECK(parse_idx(big).dims[0] == 300);
}

TEST_CASE("idx error paths") {
  auto bad_magic = idx_bytes(0x08, {1}, {0});
  bad_magic[0] = 1;
  CHECK(code_of([&] { parse_idx(bad_magic); }) == Errc::BadMagic);
  CHECK(code_of([&] { parse_idx(std::vector<uint8_t>{0, 0}); }) == Errc::BadMagic);
  CHECK(code_of([&] { parse_idx(idx_bytes(0x0D, {1}, {0, 0, 0, 0})); }) == Errc::UnsupportedElementType);
  CHECK(code_of([&] { parse_idx(idx_bytes(0x08, {2, 2}, {1, 2, 3})); }) == Errc::TruncatedPayload);
  CHECK(code_of([&] { parse_idx(idx_bytes(0x08, {2}, {1, 2, 3})); }) == Errc::TruncatedPayload);
  CHECK(code_of([&] { parse_idx(idx_bytes(0x08, {}, {})); }) == Errc::BadMagic);
  CHECK(code_of([] { load_idx("/nonexistent/train-images-idx3-ubyte"); }) == Errc::Io);
}

TEST_CASE("synthetic bags respect structural invariants") {
  SyntheticParams p;
  p.seed = 3;
  const MilDataset ds = make_synthetic_bags(p);
  REQUIRE(ds.bags.size() == 200);
  std::set<std::string> ids;
  const auto coords = signal_coordinates(p.dim);
  for (const Bag& b : ds.bags) {
    CHECK(b.size() == 50);
    CHECK(b.dim() == 32);
    CHECK(b.instances.minCoeff() >= 0.0);
    CHECK(b.instances.maxCoeff() <= 1.0);
    const auto& inst = *b.instance_labels;
    const int any = *std::max_element(inst.begin(), inst.end());
    CHECK(*b.bag_label == any);
    ids.insert(b.id);
    for (std::size_t k = 0; k < b.size(); ++k) {
      const auto row = b.instances.row(static_cast<Eigen::Index>(k));
      for (std::size_t c : coords) {
        const double v = row(static_cast<Eigen::Index>(c));
        if (inst[k]) CHECK(v >= 0.8);
        else CHECK(v <= 0.3);
      }
    }
  }
  CHECK(ids.size() == 200);
  CHECK_NOTHROW(validate_dataset(ds));
}

TEST_CASE("synthetic generation is a pure function of the seed") {
  SyntheticParams p;
  p.bag_count = 20;
  p.seed = 11;
  const MilDataset a = make_synthetic_bags(p);
  const MilDataset b = make_synthetic_bags(p);
  p.seed = 12;
  const MilDataset c = make_synthetic_bags(p);
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < a.bags.size(); ++i) {
    all_equal = all_equal && a.bags[i].instances == b.bags[i].instances;
    any_diff = any_diff || a.bags[i].instances != c.bags[i].instances;
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("zero signal strength warns, bad fractions fail") {
  SyntheticParams p;
  p.bag_count = 4;
  p.signal_strength = 0.0;
  std::vector<std::string> warnings;
  make_synthetic_bags(p, &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].rfind("DegenerateSignal", 0) == 0);

  p.signal_strength = 0.8;
  p.key_rate = 0.0;
  CHECK(code_of([&] { make_synthetic_bags(p); }) == Errc::InvalidFraction);
  p.key_rate = 0.1;
  p.positive_fraction = 1.5;
  CHECK(code_of([&] { make_synthetic_bags(p); }) == Errc::InvalidFraction);
  p.positive_fraction = 1.0;
  const MilDataset all_pos = make_synthetic_bags(p);
  for (const Bag& b : all_pos.bags) CHECK(*b.bag_label == 1);
  p.bag_count = 1;
  CHECK(code_of([&] { make_synthetic_bags(p); }) == Errc::TooFewBags);
}

TEST_CASE("conditioned binomial key count has the truncated mean") {
  // E[X | X >= 1] = np / (1 - (1-p)^n)
  const std::size_t n = 50;
  const double p = 0.1;
  const double expected = n * p / (1.0 - std::pow(1.0 - p, static_cast<double>(n)));
  Rng rng(99);
  const int draws = 20000;
  double sum = 0.0;
  std::size_t min_seen = n;
  for (int i = 0; i < draws; ++i) {
    const std::size_t k = sample_key_count(rng, n, p);
    sum += static_cast<double>(k);
    min_seen = std::min(min_seen, k);
  }
  CHECK(min_seen >= 1);
  CHECK(sum / draws == doctest::Approx(expected).epsilon(0.015));
}

TEST_CASE("a least-squares linear probe separates key from non-key instances") {
  SyntheticParams p;
  p.seed = 5;
  const MilDataset ds = make_synthetic_bags(p);
  std::vector<const Bag*> bags;
  for (const Bag& b : ds.bags) bags.push_back(&b);
  auto rows = [&](std::size_t lo, std::size_t hi, Matrix& x, Vector& y) {
    std::size_t count = 0;
    for (std::size_t i = lo; i < hi; ++i) count += bags[i]->size();
    x.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(p.dim + 1));
    y.resize(static_cast<Eigen::Index>(count));
    Eigen::Index r = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t k = 0; k < bags[i]->size(); ++k, ++r) {
        x.row(r).head(static_cast<Eigen::Index>(p.dim)) = bags[i]->instances.row(static_cast<Eigen::Index>(k));
        x(r, static_cast<Eigen::Index>(p.dim)) = 1.0;
        y(r) = (*bags[i]->instance_labels)[k];
      }
    }
  };
  Matrix xtr, xte;
  Vector ytr, yte;
  rows(0, 100, xtr, ytr);
  rows(100, 200, xte, yte);
  const Eigen::MatrixXd a = xtr;
  const Vector w = a.colPivHouseholderQr().solve(ytr);
  const Vector pred = xte * w;
  double correct = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) correct += ((pred(i) >= 0.5) == (yte(i) >= 0.5)) ? 1.0 : 0.0;
  CHECK(correct / static_cast<double>(pred.size()) >= 0.9);
}

TEST_CASE("mnist grid bags draw key digits only at key positions") {
  IdxTensor images, labels;
  fake_digits(40, images, labels);
  MnistBagParams p;
  p.grid_side = 3;
  p.bag_count = 30;
  p.key_rate = 0.3;
  p.seed = 4;
  const MilDataset ds = make_mnist_bags(images, labels, p);
  CHECK(ds.grid.grid_side == 3);
  CHECK(ds.grid.tile_width == 4);
  CHECK(ds.grid.tile_height == 4);
  const double key_value = (20.0 * 9 + 5) / 255.0;
  for (const Bag& b : ds.bags) {
    REQUIRE(b.size() == 9);
    REQUIRE(b.dim() == 16);
    for (std::size_t k = 0; k < 9; ++k) {
      const double v = b.instances(static_cast<Eigen::Index>(k), 0);
      CHECK(((*b.instance_labels)[k] == 1) == (v == key_value));
      CHECK((b.instances.row(static_cast<Eigen::Index>(k)).array() == v).all());
    }
  }
  const auto kv = std::find_if(ds.generator.begin(), ds.generator.end(),
                               [](const auto& e) { return e.first == "instances_per_bag"; });
  REQUIRE(kv != ds.generator.end());
  CHECK(kv->second == "9");
}

TEST_CASE("mnist generator rejects missing digits and bad shapes") {
  IdxTensor images, labels;
  fake_digits(9, images, labels);  // digits 0..8, no nines
  MnistBagParams p;
  p.grid_side = 2;
  CHECK(code_of([&] { make_mnist_bags(images, labels, p); }) == Errc::InsufficientSourceImages);
  fake_digits(20, images, labels);
  labels.dims = {19};
  CHECK(code_of([&] { make_mnist_bags(images, labels, p); }) == Errc::ShapeMismatch);
}

TEST_CASE("k-fold sizes and coverage") {
  SUBCASE("100 bags, 10 folds") {
    const MilDataset ds = toy_dataset(100, 50);
    const SplitPlan plan = kfold_split(ds, 10, 2, 7);
    for (std::size_t r = 0; r < 2; ++r) {
      std::vector<std::size_t> seen(100, 0);
      for (std::size_t f = 0; f < 10; ++f) {
        const auto m = plan.fold_members(r, f);
        CHECK(m.size() == 10);
        std::size_t pos = 0;
        for (std::size_t i : m) {
          ++seen[i];
          pos += *ds.bags[i].bag_label;
        }
        CHECK(pos == 5);
        CHECK(plan.complement(r, f).size() == 90);
      }
      CHECK(std::all_of(seen.begin(), seen.end(), [](std::size_t c) { return c == 1; }));
    }
    CHECK(plan.assignments[0] != plan.assignments[1]);
  }
  SUBCASE("101 bags, 10 folds") {
    const MilDataset ds = toy_dataset(101, 40);
    const SplitPlan plan = kfold_split(ds, 10, 1, 7);
    std::vector<std::size_t> sizes;
    for (std::size_t f = 0; f < 10; ++f) sizes.push_back(plan.fold_members(0, f).size());
    CHECK(std::count(sizes.begin(), sizes.end(), 11) == 1);
    CHECK(std::count(sizes.begin(), sizes.end(), 10) == 9);
  }
}

TEST_CASE("k-fold determinism and errors") {
  const MilDataset ds = toy_dataset(30, 12);
  CHECK(kfold_split(ds, 5, 3, 1).assignments == kfold_split(ds, 5, 3, 1).assignments);
  CHECK(kfold_split(ds, 5, 1, 1).assignments != kfold_split(ds, 5, 1, 2).assignments);
  CHECK(code_of([&] { kfold_split(ds, 1, 1, 0); }) == Errc::InvalidArgument);
  CHECK(code_of([&] { kfold_split(ds, 31, 1, 0); }) == Errc::TooFewBags);
}

TEST_CASE("stratified holdout partitions the pool with both classes on each side") {
  const MilDataset ds = toy_dataset(40, 15);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < 40; i += 2) pool.push_back(i);
  const Holdout h = stratified_holdout(ds, pool, 0.2, 3);
  std::vector<std::size_t> all = h.train;
  all.insert(all.end(), h.validation.begin(), h.validation.end());
  std::sort(all.begin(), all.end());
  CHECK(all == pool);
  CHECK(std::is_sorted(h.validation.begin(), h.validation.end()));
  auto positives = [&](const std::vector<std::size_t>& v) {
    return std::count_if(v.begin(), v.end(), [&](std::size_t i) { return *ds.bags[i].bag_label == 1; });
  };
  CHECK(positives(h.validation) >= 1);
  CHECK(positives(h.validation) < static_cast<long>(h.validation.size()));
  CHECK(positives(h.train) >= 1);
  CHECK(h.validation.size() == 4);
  CHECK(code_of([&] { stratified_holdout(ds, pool, 1.0, 3); }) == Errc::InvalidFraction);
}

TEST_CASE("dataset stats over positive bags") {
  MilDataset ds;
  ds.bags.push_back(labelled_bag("a", Matrix::Zero(4, 1), {1, 0, 0, 0}));
  ds.bags.push_back(labelled_bag("b", Matrix::Zero(4, 1), {1, 1, 0, 0}));
  ds.bags.push_back(labelled_bag("c", Matrix::Zero(4, 1), {0, 0, 0, 0}));
  ds.bags.push_back(labelled_bag("d", Matrix::Zero(4, 1), {0, 0, 0, 0}));
  const DatasetStats s = dataset_stats(ds);
  CHECK(s.positive_bag_pct == doctest::Approx(50.0));
  CHECK(s.negative_bag_pct == doctest::Approx(50.0));
  REQUIRE(s.instances.has_value());
  CHECK(s.instances->instance_count == 8);
  CHECK(s.instances->positive_pct == doctest::Approx(37.5));

  ds.bags[2].bag_label.reset();
  CHECK(code_of([&] { dataset_stats(ds); }) == Errc::MissingLabels);
}

TEST_CASE("bag validation catches OR-rule and range violations") {
  Bag b = labelled_bag("x", Matrix::Constant(2, 2, 0.5), {0, 1});
  CHECK_NOTHROW(validate_bag(b));
  b.bag_label = 0;
  CHECK_THROWS_AS(validate_bag(b), Error);
  b.bag_label = 1;
  b.instances(0, 0) = 1.5;
  CHECK_THROWS_AS(validate_bag(b), Error);
}
