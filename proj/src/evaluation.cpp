#include "evaluation.hpp"

#include "bytes.hpp"
#include "error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

namespace milkid {

Vector minmax_normalize(const Vector& scores) {
  if (scores.size() == 0) throw Error(Errc::EmptyInput, "cannot normalize an empty score vector");
  const double lo = scores.minCoeff();
  const double hi = scores.maxCoeff();
  // A positive bag holds at least one key instance, so a flat profile marks
  // every instance.
  if (!(hi > lo)) return Vector::Ones(scores.size());
  Vector out = (scores.array() - lo) / (hi - lo);
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

KidScores kid_scores(const Bag& bag, const ModelParams& params, PoolingMode mode,
                     const std::optional<InversionConfig>& inversion, double bag_threshold) {
  if (!(bag_threshold > 0.0 && bag_threshold < 1.0)) {
    throw Error(Errc::InvalidConfig, "bag threshold must lie in (0, 1)");
  }
  if (inversion && mode != PoolingMode::Attention) {
    throw Error(Errc::InvalidConfig, "refinement requires an attention-pooling model");
  }
  KidScores out;
  const Prediction pred = predict_bag(bag, params, mode, bag_threshold);
  out.bag_prediction = pred.label;
  out.bag_probability = pred.trace.bag_probability;
  if (pred.label != 1) {
    out.normalized = Vector::Zero(static_cast<Eigen::Index>(bag.size()));
    out.refined_bag = bag;
    return out;
  }
  if (mode != PoolingMode::Attention) {
    const Vector probs = pred.trace.instance_logits.unaryExpr([](double x) { return sigmoid(x); });
    out.normalized = minmax_normalize(probs);
    out.refined_bag = bag;
    return out;
  }
  if (!inversion) {
    out.normalized = minmax_normalize(pred.trace.attention_scores);
    out.refined_bag = bag;
    return out;
  }
  Refinement ref = refine_if_positive(bag, params, bag_threshold, *inversion);
  const ForwardTrace again = forward(ref.bag, params, PoolingMode::Attention);
  out.normalized = minmax_normalize(again.attention_scores);
  out.was_refined = ref.was_refined;
  out.refined_bag = std::move(ref.bag);
  out.trace = std::move(ref.trace);
  return out;
}

std::vector<uint8_t> threshold_instances(const Vector& normalized, double kid_threshold) {
  std::vector<uint8_t> out(static_cast<std::size_t>(normalized.size()));
  for (Eigen::Index i = 0; i < normalized.size(); ++i) {
    out[static_cast<std::size_t>(i)] = normalized(i) >= kid_threshold ? 1 : 0;
  }
  return out;
}

KidResult detect_key_instances(const Bag& bag, const ModelParams& params, PoolingMode mode,
                               const std::optional<InversionConfig>& inversion, double kid_threshold,
                               double bag_threshold) {
  if (!(kid_threshold > 0.0 && kid_threshold <= 1.0)) {
    throw Error(Errc::InvalidConfig, "kid threshold must lie in (0, 1]");
  }
  KidScores s = kid_scores(bag, params, mode, inversion, bag_threshold);
  KidResult r;
  r.instance_predictions = threshold_instances(s.normalized, kid_threshold);
  r.normalized_scores = std::move(s.normalized);
  r.refined_bag = std::move(s.refined_bag);
  r.kid_threshold = kid_threshold;
  r.bag_prediction = s.bag_prediction;
  r.bag_probability = s.bag_probability;
  r.was_refined = s.was_refined;
  r.trace = std::move(s.trace);
  return r;
}

void Confusion::add(std::span<const uint8_t> predictions, std::span<const uint8_t> truths) {
  if (predictions.size() != truths.size()) {
    throw Error(Errc::LengthMismatch, "prediction and truth lengths differ");
  }
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] != 0;
    const bool t = truths[i] != 0;
    if (p && t) ++tp;
    else if (p) ++fp;
    else if (t) ++fn;
    else ++tn;
  }
}

double Confusion::f1() const {
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

double instance_f1(std::span<const uint8_t> predictions, std::span<const uint8_t> truths) {
  Confusion c;
  c.add(predictions, truths);
  return c.f1();
}

double bag_accuracy(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size()) throw Error(Errc::LengthMismatch, "prediction and truth lengths differ");
  if (predictions.empty()) throw Error(Errc::EmptyInput, "bag accuracy needs at least one bag");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == truths[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

ThresholdScore sweep_kid_threshold(std::span<const ThresholdScore> candidates) {
  if (candidates.empty()) throw Error(Errc::EmptyCandidates, "threshold sweep needs candidates");
  ThresholdScore best = candidates.front();
  for (const auto& c : candidates.subspan(1)) {
    if (c.f1 > best.f1 || (c.f1 == best.f1 && c.threshold < best.threshold)) best = c;
  }
  return best;
}

// ---------------------------------------------------------------- methods

std::string_view method_name(Method m) {
  switch (m) {
    case Method::InstMax: return "inst_max";
    case Method::InstMean: return "inst_mean";
    case Method::Att: return "att";
    case Method::AttInv: return "att_inv";
    case Method::AttSparse: return "att_sparse";
  }
  return "att";
}

std::string_view method_display(Method m) {
  switch (m) {
    case Method::InstMax: return "Inst+max";
    case Method::InstMean: return "Inst+mean";
    case Method::Att: return "Att";
    case Method::AttInv: return "Att+inv";
    case Method::AttSparse: return "Att+sparse";
  }
  return "Att";
}

Method parse_method(std::string_view name) {
  for (Method m : all_methods()) {
    if (name == method_name(m)) return m;
  }
  throw Error(Errc::InvalidConfig, "unknown method '" + std::string(name) + "'");
}

std::vector<Method> all_methods() {
  return {Method::InstMax, Method::InstMean, Method::Att, Method::AttInv, Method::AttSparse};
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::vector<Method> canonical_methods(std::span<const Method> methods) {
  std::vector<Method> out;
  for (Method m : all_methods()) {
    if (std::find(methods.begin(), methods.end(), m) != methods.end()) out.push_back(m);
  }
  return out;
}

}  // namespace

void validate_experiment_config(const ExperimentConfig& c) {
  if (c.methods.empty()) throw Error(Errc::InvalidConfig, "no methods selected");
  validate_train_config(c.train);
  if (!(c.validation_fraction > 0.0 && c.validation_fraction < 1.0)) {
    throw Error(Errc::InvalidConfig, "validation_fraction must lie in (0, 1)");
  }
  InversionConfig plain = c.plain;
  plain.mode = InversionMode::Plain;
  validate_inversion_config(plain);
  InversionConfig sparse = c.sparse;
  sparse.mode = InversionMode::Sparse;
  validate_inversion_config(sparse);
  if (c.lambdas.empty()) throw Error(Errc::EmptyCandidates, "lambda sweep is empty");
  for (double l : c.lambdas) {
    if (l < 0.0) throw Error(Errc::NegativeLambda, "lambda must be >= 0");
  }
  if (c.kid_thresholds.empty()) throw Error(Errc::EmptyCandidates, "kid threshold candidates are empty");
  for (double t : c.kid_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw Error(Errc::InvalidConfig, "kid thresholds must lie in (0, 1]");
  }
  if (c.jobs < 1) throw Error(Errc::InvalidConfig, "jobs must be >= 1");
}

std::string describe_config(const ExperimentConfig& c) {
  std::string s;
  auto kv = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
  std::string methods;
  for (Method m : canonical_methods(c.methods)) methods += (methods.empty() ? "" : ",") + std::string(method_name(m));
  kv("methods", methods);
  kv("epochs", std::to_string(c.train.epochs));
  kv("learning_rate", fmt(c.train.learning_rate));
  kv("weight_decay", fmt(c.train.weight_decay));
  kv("adam_beta1", fmt(c.train.adam_beta1));
  kv("adam_beta2", fmt(c.train.adam_beta2));
  kv("prediction_threshold", fmt(c.train.prediction_threshold));
  std::string hidden;
  for (std::size_t h : c.train.hidden) hidden += (hidden.empty() ? "" : ",") + std::to_string(h);
  kv("hidden", hidden);
  kv("attention_dim", std::to_string(c.train.attention_dim));
  kv("validation_fraction", fmt(c.validation_fraction));
  kv("plain_steps", std::to_string(c.plain.steps));
  kv("plain_learning_rate", fmt(c.plain.learning_rate));
  kv("plain_momentum", fmt(c.plain.momentum));
  kv("sparse_steps", std::to_string(c.sparse.steps));
  kv("sparse_learning_rate", fmt(c.sparse.learning_rate));
  std::string lambdas, thresholds;
  for (double l : c.lambdas) lambdas += (lambdas.empty() ? "" : ",") + fmt(l);
  for (double t : c.kid_thresholds) thresholds += (thresholds.empty() ? "" : ",") + fmt(t);
  kv("lambdas", lambdas);
  kv("kid_thresholds", thresholds);
  kv("seed", std::to_string(c.seed));
  return s;
}

std::string report_csv_header() { return "method,repeat,fold,bag_accuracy,f1,kid_threshold,lambda,oracle_f1\n"; }

std::string format_report_row(const ExperimentRow& r) {
  std::string s(method_name(r.method));
  s += "," + std::to_string(r.repeat) + "," + std::to_string(r.fold) + "," + fmt(r.bag_accuracy) + "," +
       fmt(r.f1) + "," + fmt(r.kid_threshold) + "," + (r.lambda ? fmt(*r.lambda) : std::string()) + "," +
       fmt(r.oracle_f1) + "\n";
  return s;
}

std::string ExperimentReport::to_csv() const {
  std::string out = report_csv_header();
  for (const auto& r : rows) out += format_report_row(r);
  return out;
}

std::vector<MethodSummary> summarize_rows(std::span<const ExperimentRow> rows, std::span<const Method> methods,
                                          std::size_t repeat_count) {
  std::vector<MethodSummary> out;
  for (Method m : canonical_methods(methods)) {
    MethodSummary s;
    s.method = m;
    std::vector<double> acc, f1, oracle;
    for (std::size_t r = 0; r < repeat_count; ++r) {
      double a = 0, f = 0, o = 0;
      std::size_t n = 0;
      for (const auto& row : rows) {
        if (row.method != m || row.repeat != r) continue;
        a += row.bag_accuracy;
        f += row.f1;
        o += row.oracle_f1;
        ++n;
      }
      if (n == 0) continue;
      acc.push_back(a / static_cast<double>(n));
      f1.push_back(f / static_cast<double>(n));
      oracle.push_back(o / static_cast<double>(n));
    }
    for (const auto& row : rows) {
      if (row.method == m) s.chosen_thresholds.push_back(row.kid_threshold);
    }
    auto mean_se = [](const std::vector<double>& v, double& mean, double& se) {
      mean = 0.0;
      se = 0.0;
      if (v.empty()) return;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      if (v.size() < 2) return;
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
    };
    double unused = 0.0;
    mean_se(acc, s.accuracy_mean, s.accuracy_se);
    mean_se(f1, s.f1_mean, s.f1_se);
    mean_se(oracle, s.oracle_f1_mean, unused);
    out.push_back(std::move(s));
  }
  return out;
}

std::string ExperimentReport::summary_table() const {
  std::string out;
  char buf[256];
  out += "dataset: " + dataset_name + "\n";
  out += "fingerprint: " + fingerprint + "\n";
  out += "protocol: " + std::to_string(repeat_count) + " repeats x " + std::to_string(fold_count) + " folds\n";
  out += std::string("status: ") + (complete ? "complete" : "incomplete") + "\n\n";
  std::snprintf(buf, sizeof(buf), "%-12s %-20s %-20s %-10s %s\n", "method", "bag_accuracy", "instance_f1",
                "oracle_f1", "kid_thresholds");
  out += buf;
  for (const auto& s : summaries) {
    std::map<double, int> hist;
    for (double t : s.chosen_thresholds) hist[t]++;
    std::string th;
    for (auto [t, n] : hist) th += (th.empty() ? "" : " ") + fmt(t) + "x" + std::to_string(n);
    char acc[48], f1[48];
    std::snprintf(acc, sizeof(acc), "%.4f +- %.4f", s.accuracy_mean, s.accuracy_se);
    std::snprintf(f1, sizeof(f1), "%.4f +- %.4f", s.f1_mean, s.f1_se);
    std::snprintf(buf, sizeof(buf), "%-12s %-20s %-20s %-10.4f %s\n", std::string(method_display(s.method)).c_str(),
                  acc, f1, s.oracle_f1_mean, th.c_str());
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------- protocol

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct FoldOutcome {
  std::vector<ExperimentRow> rows;
  double train_seconds = 0.0;
  double kid_seconds = 0.0;
  std::vector<double> original_zero_fraction;
  std::vector<double> refined_zero_fraction;
};

struct ScoredBags {
  std::vector<Vector> scores;
  std::vector<const std::vector<uint8_t>*> truths;
  std::vector<double> original_zero_fraction;
  std::vector<double> refined_zero_fraction;
};

ScoredBags score_bags(const MilDataset& ds, std::span<const std::size_t> bags, const ModelParams& params,
                      PoolingMode mode, const std::optional<InversionConfig>& inv, double bag_threshold) {
  ScoredBags out;
  for (std::size_t idx : bags) {
    const Bag& bag = ds.bags[idx];
    KidScores s = kid_scores(bag, params, mode, inv, bag_threshold);
    if (s.was_refined) {
      out.original_zero_fraction.push_back(zero_fraction(bag.instances));
      out.refined_zero_fraction.push_back(zero_fraction(s.refined_bag.instances));
    }
    out.scores.push_back(std::move(s.normalized));
    out.truths.push_back(&*bag.instance_labels);
  }
  return out;
}

double pooled_f1(const ScoredBags& scored, double threshold) {
  Confusion c;
  for (std::size_t i = 0; i < scored.scores.size(); ++i) {
    c.add(threshold_instances(scored.scores[i], threshold), *scored.truths[i]);
  }
  return c.f1();
}

std::vector<std::size_t> positives(const MilDataset& ds, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx) {
    const Bag& b = ds.bags[i];
    if (b.bag_label.value_or(0) == 1) {
      if (!b.instance_labels) throw Error(Errc::MissingLabels, "KID evaluation needs instance labels");
      out.push_back(i);
    }
  }
  return out;
}

FoldOutcome run_fold(const MilDataset& ds, const SplitPlan& plan, const ExperimentConfig& cfg,
                     std::span<const Method> methods, std::size_t repeat, std::size_t fold) {
  FoldOutcome out;
  const std::vector<std::size_t> test = plan.fold_members(repeat, fold);
  const std::vector<std::size_t> pool = plan.complement(repeat, fold);
  const Holdout holdout = stratified_holdout(ds, pool, cfg.validation_fraction, derive_seed(cfg.seed, repeat, fold));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, 1000 + repeat, fold);
  const double bag_threshold = tc.prediction_threshold;

  auto uses = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  const bool need_att = uses(Method::Att) || uses(Method::AttInv) || uses(Method::AttSparse);

  std::map<PoolingMode, ModelParams> models;
  auto t0 = Clock::now();
  if (uses(Method::InstMax)) {
    models[PoolingMode::InstanceMax] = train(ds, holdout.train, holdout.validation, PoolingMode::InstanceMax, tc).params;
  }
  if (uses(Method::InstMean)) {
    models[PoolingMode::InstanceMean] = train(ds, holdout.train, holdout.validation, PoolingMode::InstanceMean, tc).params;
  }
  if (need_att) {
    models[PoolingMode::Attention] = train(ds, holdout.train, holdout.validation, PoolingMode::Attention, tc).params;
  }
  out.train_seconds = seconds_since(t0);

  t0 = Clock::now();
  const std::vector<std::size_t> val_pos = positives(ds, holdout.validation);
  const std::vector<std::size_t> test_pos = positives(ds, test);

  for (Method m : methods) {
    const PoolingMode mode = m == Method::InstMax    ? PoolingMode::InstanceMax
                             : m == Method::InstMean ? PoolingMode::InstanceMean
                                                     : PoolingMode::Attention;
    const ModelParams& params = models.at(mode);

    ExperimentRow row;
    row.method = m;
    row.repeat = repeat;
    row.fold = fold;
    {
      std::vector<int> pred, truth;
      for (std::size_t idx : test) {
        pred.push_back(predict_bag(ds.bags[idx], params, mode, bag_threshold).label);
        truth.push_back(ds.bags[idx].bag_label.value_or(0));
      }
      row.bag_accuracy = bag_accuracy(pred, truth);
    }

    std::vector<std::optional<InversionConfig>> candidates;
    std::vector<std::optional<double>> candidate_lambda;
    if (m == Method::AttInv) {
      InversionConfig c = cfg.plain;
      c.mode = InversionMode::Plain;
      candidates.emplace_back(c);
      candidate_lambda.emplace_back();
    } else if (m == Method::AttSparse) {
      for (double l : cfg.lambdas) {
        InversionConfig c = cfg.sparse;
        c.mode = InversionMode::Sparse;
        c.lambda = l;
        candidates.emplace_back(c);
        candidate_lambda.emplace_back(l);
      }
    } else {
      candidates.emplace_back();
      candidate_lambda.emplace_back();
    }

    // Model selection on the validation slice: (candidate, threshold) with
    // the highest pooled F1, earliest candidate and smallest threshold on ties.
    std::size_t best_c = 0;
    ThresholdScore best{cfg.kid_thresholds.front(), -1.0};
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const ScoredBags scored = score_bags(ds, val_pos, params, mode, candidates[c], bag_threshold);
      std::vector<ThresholdScore> sweep;
      for (double t : cfg.kid_thresholds) sweep.push_back({t, pooled_f1(scored, t)});
      const ThresholdScore local = sweep_kid_threshold(sweep);
      if (local.f1 > best.f1) {
        best = local;
        best_c = c;
      }
    }

    row.kid_threshold = best.threshold;
    row.lambda = candidate_lambda[best_c];
    row.oracle_f1 = 0.0;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const ScoredBags scored = score_bags(ds, test_pos, params, mode, candidates[c], bag_threshold);
      for (double t : cfg.kid_thresholds) row.oracle_f1 = std::max(row.oracle_f1, pooled_f1(scored, t));
      if (c == best_c) {
        row.f1 = pooled_f1(scored, best.threshold);
        if (m == Method::AttSparse) {
          out.original_zero_fraction = scored.original_zero_fraction;
          out.refined_zero_fraction = scored.refined_zero_fraction;
        }
      }
    }
    out.rows.push_back(row);
  }
  out.kid_seconds = seconds_since(t0);
  return out;
}

}  // namespace

ExperimentReport run_experiment(const MilDataset& dataset, const SplitPlan& plan, const ExperimentConfig& config,
                                const RowSink& sink) {
  validate_experiment_config(config);
  validate_dataset(dataset);
  if (plan.assignments.size() != plan.repeat_count || plan.fold_count < 2) {
    throw Error(Errc::InvalidArgument, "malformed split plan");
  }
  for (const auto& a : plan.assignments) {
    if (a.size() != dataset.bags.size()) throw Error(Errc::ShapeMismatch, "split plan does not match the dataset");
  }
  const std::vector<Method> methods = canonical_methods(config.methods);

  ExperimentReport report;
  report.dataset_name = dataset.name;
  report.fold_count = plan.fold_count;
  report.repeat_count = plan.repeat_count;
  {
    std::string fp = describe_config(config);
    fp += "dataset=" + dataset.name + ":" + std::to_string(dataset.rng_seed) + ":" + std::to_string(dataset.bags.size()) + "\n";
    for (const auto& a : plan.assignments)
      for (std::size_t f : a) fp += static_cast<char>('0' + f % 64);
    report.fingerprint = hex64(fnv1a64(fp));
  }

  const std::size_t task_count = plan.repeat_count * plan.fold_count;
  std::vector<std::optional<FoldOutcome>> outcomes(task_count);
  std::mutex mu;
  std::size_t next_task = 0;
  std::size_t next_emit = 0;
  std::exception_ptr failure;
  std::string failure_where;

  auto worker = [&]() {
    for (;;) {
      std::size_t task;
      {
        std::lock_guard lock(mu);
        if (failure || next_task >= task_count) return;
        task = next_task++;
      }
      const std::size_t repeat = task / plan.fold_count;
      const std::size_t fold = task % plan.fold_count;
      try {
        FoldOutcome result = run_fold(dataset, plan, config, methods, repeat, fold);
        std::lock_guard lock(mu);
        outcomes[task] = std::move(result);
        while (next_emit < task_count && outcomes[next_emit]) {
          for (const auto& row : outcomes[next_emit]->rows) {
            report.rows.push_back(row);
            if (sink) sink(row);
          }
          ++next_emit;
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) {
          failure = std::current_exception();
          failure_where = "repeat " + std::to_string(repeat) + " fold " + std::to_string(fold);
        }
        return;
      }
    }
  };

  const std::size_t jobs = std::min(config.jobs, task_count);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
  }

  if (failure) {
    try {
      std::rethrow_exception(failure);
    } catch (const Error& e) {
      throw Error(e.code(), failure_where + " failed: " + e.what());
    } catch (const std::exception& e) {
      throw Error(Errc::InvalidArgument, failure_where + " failed: " + e.what());
    }
  }

  for (const auto& o : outcomes) {
    report.train_seconds += o->train_seconds;
    report.kid_seconds += o->kid_seconds;
    report.original_zero_fraction.insert(report.original_zero_fraction.end(), o->original_zero_fraction.begin(),
                                         o->original_zero_fraction.end());
    report.refined_zero_fraction.insert(report.refined_zero_fraction.end(), o->refined_zero_fraction.begin(),
                                        o->refined_zero_fraction.end());
  }
  report.summaries = summarize_rows(report.rows, methods, plan.repeat_count);
  report.complete = true;
  return report;
}

}  // namespace milkid
