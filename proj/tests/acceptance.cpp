#include "CLI11.hpp"

#include "dataset_io.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "gradcheck.hpp"
#include "inversion.hpp"
#include "support.hpp"
#include "training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

using namespace milkid;
using namespace milkid::testing;

namespace {

using Clock = std::chrono::steady_clock;

enum class Outcome { Pass, Fail, Skip };

struct Verdict {
  Outcome outcome = Outcome::Fail;
  std::string detail;
};

Verdict verdict(bool ok, std::string detail) { return {ok ? Outcome::Pass : Outcome::Fail, std::move(detail)}; }

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), pattern, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const MethodSummary& summary_of(const ExperimentReport& r, Method m) {
  for (const auto& s : r.summaries) {
    if (s.method == m) return s;
  }
  throw Error(Errc::InvalidArgument, "method missing from report");
}

// Small attention model trained on a small synthetic set.
struct Fixture {
  MilDataset data;
  ModelParams params;
};

Fixture trained_fixture(std::size_t bag_count, uint64_t seed) {
  SyntheticParams sp;
  sp.bag_count = bag_count;
  sp.instances_per_bag = 10;
  sp.dim = 16;
  sp.key_rate = 0.2;
  sp.seed = seed;
  Fixture f;
  f.data = make_synthetic_bags(sp);
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0; i < f.data.bags.size(); ++i) (i % 5 == 0 ? va : tr).push_back(i);
  TrainConfig tc;
  tc.epochs = 8;
  tc.hidden = {32, 16};
  tc.attention_dim = 16;
  tc.learning_rate = 0.003;
  tc.seed = seed;
  f.params = train(f.data, tr, va, PoolingMode::Attention, tc).params;
  return f;
}

// ------------------------------------------------------------ criteria

Verdict prox_exactness() {
  const auto t0 = Clock::now();
  std::size_t mismatches = 0, checked = 0;
  for (double lambda : {0.0, 0.1, 0.5, 1.0}) {
    for (int i = 0; i <= 10000; ++i) {
      const double x = -2.0 + 4.0 * static_cast<double>(i) / 10000.0;
      mismatches += std::bit_cast<uint64_t>(soft_threshold(x, lambda)) !=
                    std::bit_cast<uint64_t>(soft_threshold_piecewise(x, lambda));
      ++checked;
    }
  }
  const double s = seconds_since(t0);
  return verdict(mismatches == 0 && s < 1.0, fmt("%zu/%zu bit-identical, %.3fs", checked - mismatches, checked, s));
}

Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  double worst_param = 0.0, worst_input = 0.0;
  const std::size_t ks[] = {1, 3, 7};
  const PoolingMode modes[] = {PoolingMode::Attention, PoolingMode::InstanceMax, PoolingMode::InstanceMean};
  Rng rng(2024);
  for (std::size_t n = 0; n < 100; ++n) {
    const ModelParams p = init_params(tiny_shape(4, 3, 2), derive_seed(77, n));
    const Matrix x = uniform_matrix(rng, static_cast<Eigen::Index>(ks[n % 3]), 4);
    for (PoolingMode mode : modes) {
      const GradCheckResult r = check_gradients(x, p, mode, static_cast<int>(n % 2));
      worst_param = std::max(worst_param, r.param_error);
      worst_input = std::max(worst_input, r.input_error);
    }
  }
  const double s = seconds_since(t0);
  return verdict(worst_param < 1e-4 && worst_input < 1e-4 && s < 30.0,
                 fmt("max rel error params %.2e, input %.2e over 100 models x 3 poolings, %.2fs", worst_param,
                     worst_input, s));
}

Verdict lambda_zero_equivalence(const Fixture& f) {
  const auto t0 = Clock::now();
  InversionConfig sparse = InversionConfig::sparse_defaults();
  sparse.lambda = 0.0;
  sparse.steps = 50;
  sparse.learning_rate = 0.001;
  InversionConfig plain = InversionConfig::plain_defaults();
  plain.momentum = 0.0;
  plain.steps = 50;
  plain.learning_rate = 0.001;
  double worst = 0.0;
  std::size_t bags = 0;
  for (const Bag& bag : f.data.bags) {
    if (bags == 10) break;
    if (predict_bag(bag, f.params, PoolingMode::Attention, 0.5).label != 1) continue;
    const InversionTrace a = invert_sparse(bag, f.params, sparse);
    const InversionTrace b = invert_plain(bag, f.params, plain);
    worst = std::max(worst, (a.refined - b.refined).cwiseAbs().maxCoeff());
    for (std::size_t t = 0; t < a.loss.size(); ++t) worst = std::max(worst, std::abs(a.loss[t] - b.loss[t]));
    ++bags;
  }
  const double s = seconds_since(t0);
  return verdict(bags == 10 && worst <= 1e-12 && s < 10.0,
                 fmt("%zu bags, max trace difference %.2e, %.2fs", bags, worst, s));
}

Verdict flow_correctness(const Fixture& f) {
  const uint64_t before = params_checksum(f.params);
  InversionConfig plain = InversionConfig::plain_defaults();
  plain.steps = 100;
  const InversionConfig sparse = InversionConfig::sparse_defaults();
  std::size_t negatives = 0, refined = 0, violations = 0;
  for (const Bag& bag : f.data.bags) {
    for (const InversionConfig& cfg : {plain, sparse}) {
      const KidResult r = detect_key_instances(bag, f.params, PoolingMode::Attention, cfg, 0.1);
      if (r.bag_prediction == 0) {
        ++negatives;
        const bool any = std::any_of(r.instance_predictions.begin(), r.instance_predictions.end(),
                                     [](uint8_t v) { return v != 0; });
        violations += (r.was_refined || any) ? 1 : 0;
      } else {
        ++refined;
        violations += (!r.was_refined || r.refined_bag.instances.minCoeff() < 0.0 ||
                       r.refined_bag.instances.maxCoeff() > 1.0)
                          ? 1
                          : 0;
      }
    }
  }
  const bool unchanged = params_checksum(f.params) == before;
  return verdict(violations == 0 && unchanged && negatives > 0 && refined > 0,
                 fmt("%zu bags x 2 inverters: %zu negative, %zu refined, %zu violations, checksum %s",
                     f.data.bags.size(), negatives, refined, violations, unchanged ? "unchanged" : "CHANGED"));
}

struct BenchmarkRun {
  std::vector<uint8_t> dataset_bytes;
  ExperimentReport report;
  double seconds = 0.0;
};

BenchmarkRun run_benchmark(uint64_t seed, std::size_t jobs) {
  const auto t0 = Clock::now();
  SyntheticParams sp;
  sp.bag_count = 200;
  sp.instances_per_bag = 50;
  sp.dim = 32;
  sp.key_rate = 0.1;
  sp.signal_strength = 0.8;
  sp.noise_level = 0.3;
  sp.seed = seed;
  const MilDataset ds = make_synthetic_bags(sp);
  ExperimentConfig cfg;
  cfg.train.epochs = 60;
  cfg.jobs = jobs;
  cfg.seed = seed;
  const SplitPlan plan = kfold_split(ds, 5, 3, seed);
  BenchmarkRun run;
  run.dataset_bytes = encode_dataset(ds);
  run.report = run_experiment(ds, plan, cfg);
  run.seconds = seconds_since(t0);
  return run;
}

Verdict benchmark_accuracy(const BenchmarkRun& run) {
  const ExperimentReport& r = run.report;
  const double att = summary_of(r, Method::Att).accuracy_mean;
  const double imax = summary_of(r, Method::InstMax).accuracy_mean;
  const double imean = summary_of(r, Method::InstMean).accuracy_mean;
  const double budget = r.train_seconds;
  return verdict(att >= 0.93 && att > imax && att > imean && budget < 900.0,
                 fmt("bag accuracy Att %.4f, Inst+max %.4f, Inst+mean %.4f; training %.0fs", att, imax, imean,
                     budget));
}

Verdict kid_improvement(const BenchmarkRun& run) {
  const ExperimentReport& r = run.report;
  const double att = summary_of(r, Method::Att).f1_mean;
  const double inv = summary_of(r, Method::AttInv).f1_mean;
  const double sparse = summary_of(r, Method::AttSparse).f1_mean;
  std::set<double> lambdas;
  for (const auto& row : r.rows) {
    if (row.lambda) lambdas.insert(*row.lambda);
  }
  std::string chosen;
  for (double l : lambdas) chosen += (chosen.empty() ? "" : ",") + fmt("%g", l);
  return verdict(sparse - att >= 0.05 && sparse >= inv && run.seconds < 1200.0,
                 fmt("F1 Att %.4f, Att+inv %.4f, Att+sparse %.4f (gain %+.4f, need +0.05); lambdas chosen {%s}; "
                     "%.0fs",
                     att, inv, sparse, sparse - att, chosen.c_str(), run.seconds));
}

Verdict sparsity_effect(const BenchmarkRun& run) {
  const ExperimentReport& r = run.report;
  const double before = median(r.original_zero_fraction);
  const double after = median(r.refined_zero_fraction);
  return verdict(!r.refined_zero_fraction.empty() && after - before >= 0.10,
                 fmt("median zero fraction %.4f -> %.4f over %zu refined positive bags", before, after,
                     r.refined_zero_fraction.size()));
}

Verdict determinism(const BenchmarkRun& first, const BenchmarkRun& second) {
  const bool data = first.dataset_bytes == second.dataset_bytes;
  const std::string a = first.report.to_csv();
  const bool csv = a == second.report.to_csv();
  return verdict(data && csv, fmt("dataset %s, report CSV %s (%zu bytes)", data ? "identical" : "DIFFERS",
                                  csv ? "identical" : "DIFFERS", a.size()));
}

Verdict mnist_fidelity(const std::string& dir, std::size_t jobs) {
  if (dir.empty()) return {Outcome::Skip, "set MILKID_MNIST_DIR to the directory holding the IDX files"};
  namespace fs = std::filesystem;
  const fs::path images = fs::path(dir) / "train-images-idx3-ubyte";
  const fs::path labels = fs::path(dir) / "train-labels-idx1-ubyte";
  if (!fs::exists(images) || !fs::exists(labels)) {
    return {Outcome::Skip, "train-images-idx3-ubyte / train-labels-idx1-ubyte not found in " + dir};
  }
  const auto t0 = Clock::now();
  MnistBagParams mp;
  mp.grid_side = 5;
  mp.bag_count = 100;
  mp.seed = 1;
  const MilDataset ds = make_mnist_bags(load_idx(images), load_idx(labels), mp);
  ExperimentConfig cfg;
  cfg.methods = {Method::InstMax, Method::InstMean, Method::Att};
  cfg.train.epochs = 60;
  cfg.jobs = jobs;
  cfg.seed = 1;
  const ExperimentReport r = run_experiment(ds, kfold_split(ds, 5, 3, 1), cfg);
  const double att = summary_of(r, Method::Att).accuracy_mean;
  const double imax = summary_of(r, Method::InstMax).accuracy_mean;
  const double imean = summary_of(r, Method::InstMean).accuracy_mean;
  const double s = seconds_since(t0);
  return verdict(att >= 0.95 && att > imax && imax > imean && s < 7200.0,
                 fmt("bag accuracy Att %.4f, Inst+max %.4f, Inst+mean %.4f; %.0fs", att, imax, imean, s));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks, one line per criterion"};
  std::vector<int> only;
  std::size_t jobs = 1;
  uint64_t seed = 1;
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
  app.add_option("--jobs", jobs, "Worker threads for the benchmark")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "Benchmark seed");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  int failures = 0;
  auto report = [&](int c, const std::string& name, const std::function<Verdict()>& check) {
    if (!wanted(c)) return;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {Outcome::Fail, std::string("error: ") + e.what()};
    }
    const char* tag = v.outcome == Outcome::Pass ? "PASS" : v.outcome == Outcome::Skip ? "SKIP" : "FAIL";
    failures += v.outcome == Outcome::Fail ? 1 : 0;
    std::printf("[%s] criterion %d %s: %s\n", tag, c, name.c_str(), v.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "prox operator exactness", prox_exactness);
  report(2, "gradient fidelity", gradient_fidelity);

  std::optional<Fixture> fixture;
  auto shared_fixture = [&]() -> const Fixture& {
    if (!fixture) fixture = trained_fixture(100, 5);
    return *fixture;
  };
  report(3, "lambda zero equivalence", [&] { return lambda_zero_equivalence(shared_fixture()); });
  report(4, "flow correctness", [&] { return flow_correctness(shared_fixture()); });

  std::optional<BenchmarkRun> bench;
  std::string bench_error;
  if (wanted(5) || wanted(6) || wanted(7) || wanted(9)) {
    try {
      bench = run_benchmark(seed, jobs);
    } catch (const std::exception& e) {
      bench_error = e.what();
    }
  }
  auto on_bench = [&](auto&& f) {
    return [&, f] {
      if (!bench) throw std::runtime_error("benchmark failed: " + bench_error);
      return f(*bench);
    };
  };
  report(5, "synthetic bag accuracy", on_bench(benchmark_accuracy));
  report(6, "kid improvement", on_bench(kid_improvement));
  report(7, "sparsity effect", on_bench(sparsity_effect));
  const char* mnist = std::getenv("MILKID_MNIST_DIR");
  report(8, "mnist fidelity", [&] { return mnist_fidelity(mnist ? mnist : "", jobs); });
  report(9, "determinism", on_bench([&](const BenchmarkRun& first) { return determinism(first, run_benchmark(seed, jobs)); }));

  if (bench && wanted(5)) {
    std::printf("\n%s", bench->report.summary_table().c_str());
  }
  return failures == 0 ? 0 : 1;
}
