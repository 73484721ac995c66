#pragma once

#include "data.hpp"
#include "diffnet.hpp"
#include "inversion.hpp"
#include "training.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace milkid {

/// (a - min) / (max - min); an all-equal vector maps to all ones.
Vector minmax_normalize(const Vector& scores);

struct KidResult {
  Vector normalized_scores;
  std::vector<uint8_t> instance_predictions;
  Bag refined_bag;
  double kid_threshold = 0.5;
  int bag_prediction = 0;
  double bag_probability = 0.0;
  bool was_refined = false;
  std::optional<InversionTrace> trace;
};

/// Scores used for key-instance detection before thresholding. Negative bag
/// predictions yield all-zero scores and the untouched bag.
struct KidScores {
  int bag_prediction = 0;
  double bag_probability = 0.0;
  bool was_refined = false;
  Vector normalized;
  Bag refined_bag;
  std::optional<InversionTrace> trace;
};

KidScores kid_scores(const Bag& bag, const ModelParams& params, PoolingMode mode,
                     const std::optional<InversionConfig>& inversion, double bag_threshold = 0.5);

std::vector<uint8_t> threshold_instances(const Vector& normalized, double kid_threshold);

/// Predict; if positive optionally refine, recompute scores on the (refined)
/// bag, min-max normalize and threshold. Instance-space models score with
/// their per-instance probabilities and do not support refinement.
KidResult detect_key_instances(const Bag& bag, const ModelParams& params, PoolingMode mode,
                               const std::optional<InversionConfig>& inversion, double kid_threshold,
                               double bag_threshold = 0.5);

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  void add(std::span<const uint8_t> predictions, std::span<const uint8_t> truths);
  double f1() const;
};

double instance_f1(std::span<const uint8_t> predictions, std::span<const uint8_t> truths);
double bag_accuracy(std::span<const int> predictions, std::span<const int> truths);

struct ThresholdScore {
  double threshold = 0.0;
  double f1 = 0.0;
};

/// Argmax over candidates; ties go to the smaller threshold.
ThresholdScore sweep_kid_threshold(std::span<const ThresholdScore> candidates);

// ---------------------------------------------------------------- experiments

enum class Method { InstMax, InstMean, Att, AttInv, AttSparse };

std::string_view method_name(Method m);     // inst_max, ...
std::string_view method_display(Method m);  // Inst+max, ...
Method parse_method(std::string_view name);
std::vector<Method> all_methods();

struct ExperimentConfig {
  std::vector<Method> methods = all_methods();
  TrainConfig train;
  double validation_fraction = 0.2;
  InversionConfig plain = InversionConfig::plain_defaults();
  InversionConfig sparse = InversionConfig::sparse_defaults();
  std::vector<double> lambdas{0.0005, 0.001, 0.002, 0.003};
  std::vector<double> kid_thresholds{0.1, 0.2, 0.3, 0.4, 0.5};
  std::size_t jobs = 1;
  uint64_t seed = 0;
};

void validate_experiment_config(const ExperimentConfig& config);

/// Canonical key=value rendering of every setting that affects results.
std::string describe_config(const ExperimentConfig& config);

struct ExperimentRow {
  Method method = Method::Att;
  std::size_t repeat = 0;
  std::size_t fold = 0;
  double bag_accuracy = 0.0;
  double f1 = 0.0;
  double kid_threshold = 0.0;
  std::optional<double> lambda;
  double oracle_f1 = 0.0;
};

std::string report_csv_header();
std::string format_report_row(const ExperimentRow& row);

struct MethodSummary {
  Method method = Method::Att;
  double accuracy_mean = 0.0;
  double accuracy_se = 0.0;
  double f1_mean = 0.0;
  double f1_se = 0.0;
  double oracle_f1_mean = 0.0;
  std::vector<double> chosen_thresholds;  // one per row
};

struct ExperimentReport {
  std::string dataset_name;
  std::string fingerprint;
  std::size_t fold_count = 0;
  std::size_t repeat_count = 0;
  std::vector<ExperimentRow> rows;  // ordered by (repeat, fold, method)
  std::vector<MethodSummary> summaries;
  bool complete = false;

  // Diagnostics, not persisted in the CSV.
  double train_seconds = 0.0;
  double kid_seconds = 0.0;
  std::vector<double> original_zero_fraction;  // truly positive test bags refined by att_sparse
  std::vector<double> refined_zero_fraction;

  std::string to_csv() const;
  std::string summary_table() const;
};

std::vector<MethodSummary> summarize_rows(std::span<const ExperimentRow> rows, std::span<const Method> methods,
                                          std::size_t repeat_count);

using RowSink = std::function<void(const ExperimentRow&)>;

/// Cross-validated protocol: per (repeat, fold) train on the other folds with
/// a stratified validation slice, test on the held-out fold. Rows reach
/// `sink` in (repeat, fold) order as soon as every earlier fold is done.
ExperimentReport run_experiment(const MilDataset& dataset, const SplitPlan& plan,
                                const ExperimentConfig& config, const RowSink& sink = {});

}  // namespace milkid
