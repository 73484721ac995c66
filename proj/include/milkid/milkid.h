/*
 * milkid: attention-based multiple instance learning with sparse network
 * inversion for key instance detection.
 *
 * Every fallible call returns a milkid_status. On failure the calling
 * thread's last-error message describes the cause; it is cleared by the next
 * successful call on the same thread. Handles are opaque and owned by the
 * caller, who releases them with the matching *_free function. Strings
 * returned through char** out-parameters are released with milkid_string_free.
 */
#ifndef MILKID_MILKID_H
#define MILKID_MILKID_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MILKID_API __declspec(dllexport)
#else
#define MILKID_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum milkid_status {
  MILKID_OK = 0,
  MILKID_INVALID_ARGUMENT = 1,
  MILKID_IO = 2,
  MILKID_BAD_MAGIC = 3,
  MILKID_TRUNCATED_PAYLOAD = 4,
  MILKID_UNSUPPORTED_ELEMENT_TYPE = 5,
  MILKID_INSUFFICIENT_SOURCE_IMAGES = 6,
  MILKID_INVALID_FRACTION = 7,
  MILKID_TOO_FEW_BAGS = 8,
  MILKID_MISSING_LABELS = 9,
  MILKID_SHAPE_MISMATCH = 10,
  MILKID_STALE_TRACE = 11,
  MILKID_EMPTY_SPLIT = 12,
  MILKID_SINGLE_CLASS_SPLIT = 13,
  MILKID_NEGATIVE_LAMBDA = 14,
  MILKID_NON_POSITIVE_PREDICTION = 15,
  MILKID_LENGTH_MISMATCH = 16,
  MILKID_EMPTY_INPUT = 17,
  MILKID_EMPTY_CANDIDATES = 18,
  MILKID_INVALID_CONFIG = 19,
  MILKID_NO_GRID = 20,
  MILKID_BUFFER_TOO_SMALL = 98,
  MILKID_INTERNAL = 99
} milkid_status;

MILKID_API const char* milkid_status_name(milkid_status status);
MILKID_API const char* milkid_last_error_message(void);
MILKID_API const char* milkid_version(void);
MILKID_API void milkid_string_free(char* text);

/* FNV-1a 64 of `text`, as 16 lowercase hex digits plus a terminator. */
MILKID_API void milkid_hash_text(const char* text, char out[17]);
/* Same digest over the bytes of a file. */
MILKID_API milkid_status milkid_hash_file(const char* path, char out[17]);

typedef struct milkid_dataset milkid_dataset;
typedef struct milkid_split milkid_split;
typedef struct milkid_model milkid_model;
typedef struct milkid_kid milkid_kid;
typedef struct milkid_report milkid_report;

/* ------------------------------------------------------------- datasets */

typedef struct milkid_synthetic_params {
  size_t bag_count;
  size_t instances_per_bag;
  size_t dim;
  double positive_fraction;
  double key_rate;
  double signal_strength;
  double noise_level;
  uint64_t seed;
} milkid_synthetic_params;

typedef struct milkid_mnist_params {
  size_t grid_side;
  int key_digit;
  size_t bag_count;
  double positive_fraction;
  double key_rate;
  uint64_t seed;
} milkid_mnist_params;

typedef struct milkid_bag_info {
  const char* id; /* valid while the dataset lives */
  size_t instance_count;
  int bag_label; /* -1 when unlabeled */
  int has_instance_labels;
} milkid_bag_info;

typedef struct milkid_dataset_stats {
  size_t bag_count;
  size_t positive_bags;
  double positive_bag_pct;
  double negative_bag_pct;
  int has_instance_stats; /* instance fields below cover positive bags only */
  size_t instance_count;
  size_t positive_instances;
  double positive_instance_pct;
  double negative_instance_pct;
} milkid_dataset_stats;

MILKID_API void milkid_synthetic_defaults(milkid_synthetic_params* params);
MILKID_API void milkid_mnist_defaults(milkid_mnist_params* params);

MILKID_API milkid_status milkid_dataset_synthetic(const milkid_synthetic_params* params, milkid_dataset** out);
MILKID_API milkid_status milkid_dataset_mnist(const char* images_path, const char* labels_path,
                                              const milkid_mnist_params* params, milkid_dataset** out);
MILKID_API milkid_status milkid_dataset_load(const char* path, milkid_dataset** out);
MILKID_API milkid_status milkid_dataset_save(const milkid_dataset* dataset, const char* path);
/* Key=value manifest for the container as milkid_dataset_save writes it. */
MILKID_API milkid_status milkid_dataset_manifest(const milkid_dataset* dataset, const char* container_name,
                                                 char** out_text);
MILKID_API void milkid_dataset_free(milkid_dataset* dataset);

MILKID_API size_t milkid_dataset_bag_count(const milkid_dataset* dataset);
MILKID_API size_t milkid_dataset_dim(const milkid_dataset* dataset);
MILKID_API size_t milkid_dataset_grid_side(const milkid_dataset* dataset); /* 0 without grid metadata */
/* Generator warnings, e.g. a zero signal strength. */
MILKID_API size_t milkid_dataset_warning_count(const milkid_dataset* dataset);
MILKID_API const char* milkid_dataset_warning(const milkid_dataset* dataset, size_t index);
MILKID_API milkid_status milkid_dataset_bag_info(const milkid_dataset* dataset, size_t bag, milkid_bag_info* out);
MILKID_API milkid_status milkid_dataset_instance_labels(const milkid_dataset* dataset, size_t bag, uint8_t* out,
                                                        size_t capacity);
MILKID_API milkid_status milkid_dataset_stats_get(const milkid_dataset* dataset, milkid_dataset_stats* out);

/* --------------------------------------------------------------- splits */

MILKID_API milkid_status milkid_split_kfold(const milkid_dataset* dataset, size_t fold_count, size_t repeat_count,
                                            uint64_t seed, milkid_split** out);
MILKID_API void milkid_split_free(milkid_split* split);
MILKID_API size_t milkid_split_fold_count(const milkid_split* split);
MILKID_API size_t milkid_split_repeat_count(const milkid_split* split);
/* Bag indices of one fold (test side) or of its complement (training pool). */
MILKID_API milkid_status milkid_split_members(const milkid_split* split, size_t repeat, size_t fold,
                                              int complement, size_t* out, size_t capacity, size_t* count);
/* Stratified partition of `pool`; both outputs need room for pool_count entries. */
MILKID_API milkid_status milkid_holdout(const milkid_dataset* dataset, const size_t* pool, size_t pool_count,
                                        double validation_fraction, uint64_t seed, size_t* train_out,
                                        size_t* train_count, size_t* validation_out, size_t* validation_count);

/* ------------------------------------------------------------- training */

typedef enum milkid_pooling {
  MILKID_POOL_ATTENTION = 0,
  MILKID_POOL_INSTANCE_MAX = 1,
  MILKID_POOL_INSTANCE_MEAN = 2
} milkid_pooling;

#define MILKID_MAX_HIDDEN 8

typedef struct milkid_train_config {
  size_t epochs;
  double learning_rate;
  double weight_decay;
  double adam_beta1;
  double adam_beta2;
  double adam_epsilon;
  double prediction_threshold;
  uint64_t seed;
  size_t hidden[MILKID_MAX_HIDDEN];
  size_t hidden_count;
  size_t attention_dim;
} milkid_train_config;

MILKID_API void milkid_train_defaults(milkid_train_config* config);
MILKID_API milkid_status milkid_train_config_validate(const milkid_train_config* config);
MILKID_API const char* milkid_pooling_name(milkid_pooling pooling);
MILKID_API milkid_status milkid_pooling_parse(const char* name, milkid_pooling* out);

/* Trains on `train`, early-stops on `validation`; the model keeps the best epoch. */
MILKID_API milkid_status milkid_train(const milkid_dataset* dataset, const size_t* train, size_t train_count,
                                      const size_t* validation, size_t validation_count, milkid_pooling pooling,
                                      const milkid_train_config* config, milkid_model** out);
MILKID_API milkid_status milkid_model_save(const milkid_model* model, const char* path);
MILKID_API milkid_status milkid_model_load(const char* path, milkid_model** out);
MILKID_API void milkid_model_free(milkid_model* model);
MILKID_API milkid_pooling milkid_model_pooling(const milkid_model* model);
MILKID_API uint64_t milkid_model_checksum(const milkid_model* model);
MILKID_API size_t milkid_model_parameter_count(const milkid_model* model);
/* Per-epoch CSV; empty for models loaded from disk. */
MILKID_API milkid_status milkid_model_train_log(const milkid_model* model, char** out_csv);
MILKID_API size_t milkid_model_best_epoch(const milkid_model* model);

MILKID_API milkid_status milkid_predict(const milkid_model* model, const milkid_dataset* dataset, size_t bag,
                                        double threshold, int* label, double* probability);
MILKID_API milkid_status milkid_evaluate_bags(const milkid_model* model, const milkid_dataset* dataset,
                                              const size_t* bags, size_t count, double threshold, double* loss,
                                              double* accuracy);

/* ------------------------------------------------ inversion and detection */

typedef enum milkid_inversion_mode {
  MILKID_INVERT_PLAIN = 0,
  MILKID_INVERT_SPARSE = 1
} milkid_inversion_mode;

typedef struct milkid_inversion_config {
  milkid_inversion_mode mode;
  size_t steps;
  double learning_rate;
  double momentum; /* plain only */
  double lambda;   /* sparse only */
} milkid_inversion_config;

MILKID_API void milkid_inversion_defaults(milkid_inversion_mode mode, milkid_inversion_config* config);
MILKID_API milkid_status milkid_inversion_config_validate(const milkid_inversion_config* config);

/* Key instance detection on one bag. `inversion` may be NULL for raw scores. */
MILKID_API milkid_status milkid_detect(const milkid_model* model, const milkid_dataset* dataset, size_t bag,
                                       const milkid_inversion_config* inversion, double kid_threshold,
                                       double bag_threshold, milkid_kid** out);
/* Same for many bags on up to `jobs` threads; out receives `count` handles. */
MILKID_API milkid_status milkid_detect_many(const milkid_model* model, const milkid_dataset* dataset,
                                            const size_t* bags, size_t count,
                                            const milkid_inversion_config* inversion, double kid_threshold,
                                            double bag_threshold, size_t jobs, milkid_kid** out);
MILKID_API void milkid_kid_free(milkid_kid* kid);
MILKID_API int milkid_kid_bag_prediction(const milkid_kid* kid);
MILKID_API double milkid_kid_bag_probability(const milkid_kid* kid);
MILKID_API int milkid_kid_was_refined(const milkid_kid* kid);
MILKID_API size_t milkid_kid_instance_count(const milkid_kid* kid);
MILKID_API milkid_status milkid_kid_scores(const milkid_kid* kid, double* out, size_t capacity);
MILKID_API milkid_status milkid_kid_predictions(const milkid_kid* kid, uint8_t* out, size_t capacity);
/* Fractions of exactly-zero entries before and after refinement. */
MILKID_API void milkid_kid_zero_fractions(const milkid_kid* kid, double* original, double* refined);
/* step,loss,zero_fraction; MILKID_EMPTY_INPUT when the bag was not refined. */
MILKID_API milkid_status milkid_kid_trace_csv(const milkid_kid* kid, char** out_csv);

/* Binary PGM with one panel per detection result, side by side. */
MILKID_API milkid_status milkid_render_heatmap(const milkid_dataset* dataset, size_t bag,
                                               const milkid_kid* const* panels, size_t panel_count,
                                               const char* path);

/* ---------------------------------------------------------- experiments */

enum {
  MILKID_METHOD_INST_MAX = 1u << 0,
  MILKID_METHOD_INST_MEAN = 1u << 1,
  MILKID_METHOD_ATT = 1u << 2,
  MILKID_METHOD_ATT_INV = 1u << 3,
  MILKID_METHOD_ATT_SPARSE = 1u << 4,
  MILKID_METHOD_ALL = 0x1fu
};

/* Accepts inst_max, inst_mean, att, att_inv, att_sparse and all. */
MILKID_API milkid_status milkid_method_parse(const char* name, unsigned* out_bits);
MILKID_API const char* milkid_method_name(unsigned method_bit);

typedef struct milkid_experiment_config {
  unsigned methods;
  milkid_train_config train;
  double validation_fraction;
  milkid_inversion_config plain;
  milkid_inversion_config sparse;
  const double* lambdas;
  size_t lambda_count;
  const double* kid_thresholds;
  size_t kid_threshold_count;
  size_t jobs;
  uint64_t seed;
} milkid_experiment_config;

typedef struct milkid_report_row {
  unsigned method;
  size_t repeat;
  size_t fold;
  double bag_accuracy;
  double f1;
  double kid_threshold;
  double lambda; /* NaN for methods without a sweep */
  double oracle_f1;
} milkid_report_row;

typedef struct milkid_method_summary {
  double accuracy_mean;
  double accuracy_se;
  double f1_mean;
  double f1_se;
  double oracle_f1_mean;
} milkid_method_summary;

/* Candidate arrays point at static storage. */
MILKID_API void milkid_experiment_defaults(milkid_experiment_config* config);
MILKID_API milkid_status milkid_experiment_config_validate(const milkid_experiment_config* config);
MILKID_API milkid_status milkid_experiment_describe(const milkid_experiment_config* config, char** out_text);

/* Receives each finished row as one CSV line, in (repeat, fold) order. */
typedef void (*milkid_row_sink)(const char* csv_line, void* user);

MILKID_API milkid_status milkid_run_experiment(const milkid_dataset* dataset, const milkid_split* split,
                                               const milkid_experiment_config* config, milkid_row_sink sink,
                                               void* user, milkid_report** out);
MILKID_API void milkid_report_free(milkid_report* report);
MILKID_API const char* milkid_report_csv_header(void);
MILKID_API milkid_status milkid_report_csv(const milkid_report* report, char** out_csv);
MILKID_API milkid_status milkid_report_summary(const milkid_report* report, char** out_text);
MILKID_API const char* milkid_report_fingerprint(const milkid_report* report);
MILKID_API size_t milkid_report_row_count(const milkid_report* report);
MILKID_API milkid_status milkid_report_row_get(const milkid_report* report, size_t index, milkid_report_row* out);
MILKID_API milkid_status milkid_report_method_summary(const milkid_report* report, unsigned method_bit,
                                                      milkid_method_summary* out);
MILKID_API void milkid_report_timing(const milkid_report* report, double* train_seconds, double* kid_seconds);
/* Zero fractions of truly positive test bags refined by att_sparse. */
MILKID_API size_t milkid_report_zero_fraction_count(const milkid_report* report);
MILKID_API milkid_status milkid_report_zero_fractions(const milkid_report* report, double* original,
                                                      double* refined, size_t capacity);

#ifdef __cplusplus
}
#endif

#endif /* MILKID_MILKID_H */
