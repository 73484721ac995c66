#include "doctest.h"

#include "milkid/milkid.h"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("milkid-capi-" + std::to_string(std::rand()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string take(char* text) {
  std::string s = text ? text : "";
  milkid_string_free(text);
  return s;
}

milkid_dataset* small_dataset(uint64_t seed = 3) {
  milkid_synthetic_params p;
  milkid_synthetic_defaults(&p);
  p.bag_count = 30;
  p.instances_per_bag = 8;
  p.dim = 16;
  p.key_rate = 0.2;
  p.seed = seed;
  milkid_dataset* ds = nullptr;
  REQUIRE(milkid_dataset_synthetic(&p, &ds) == MILKID_OK);
  return ds;
}

void small_train_config(milkid_train_config* c) {
  milkid_train_defaults(c);
  c->epochs = 4;
  c->hidden[0] = 16;
  c->hidden[1] = 8;
  c->hidden_count = 2;
  c->attention_dim = 8;
  c->learning_rate = 0.005;
}

milkid_model* small_model(const milkid_dataset* ds) {
  std::vector<size_t> train, val;
  for (size_t i = 0; i < milkid_dataset_bag_count(ds); ++i) (i % 5 == 0 ? val : train).push_back(i);
  milkid_train_config c;
  small_train_config(&c);
  milkid_model* m = nullptr;
  REQUIRE(milkid_train(ds, train.data(), train.size(), val.data(), val.size(), MILKID_POOL_ATTENTION, &c, &m) ==
          MILKID_OK);
  return m;
}

}  // namespace

TEST_CASE("status names and last error") {
  CHECK(std::string(milkid_status_name(MILKID_OK)) == "Ok");
  CHECK(std::string(milkid_status_name(MILKID_NEGATIVE_LAMBDA)) == "NegativeLambda");
  CHECK(std::string(milkid_status_name(MILKID_BUFFER_TOO_SMALL)) == "BufferTooSmall");
  CHECK(std::string(milkid_version()) == "1.0.0");

  milkid_synthetic_params p;
  milkid_synthetic_defaults(&p);
  p.positive_fraction = 1.5;
  milkid_dataset* ds = nullptr;
  CHECK(milkid_dataset_synthetic(&p, &ds) == MILKID_INVALID_FRACTION);
  CHECK(ds == nullptr);
  CHECK(std::strlen(milkid_last_error_message()) > 0);
  CHECK(milkid_dataset_synthetic(nullptr, &ds) == MILKID_INVALID_ARGUMENT);

  milkid_dataset* ok = small_dataset();
  CHECK(std::strlen(milkid_last_error_message()) == 0);
  milkid_dataset_free(ok);
  milkid_dataset_free(nullptr);
}

TEST_CASE("hashing") {
  char out[17];
  milkid_hash_text("a", out);
  CHECK(std::string(out) == "af63dc4c8601ec8c");
  CHECK(milkid_hash_file("/nonexistent/file", out) == MILKID_IO);
}

TEST_CASE("dataset accessors, persistence and manifest") {
  TempDir tmp;
  milkid_dataset* ds = small_dataset();
  CHECK(milkid_dataset_bag_count(ds) == 30);
  CHECK(milkid_dataset_dim(ds) == 16);
  CHECK(milkid_dataset_grid_side(ds) == 0);
  milkid_bag_info info;
  REQUIRE(milkid_dataset_bag_info(ds, 0, &info) == MILKID_OK);
  CHECK(info.instance_count == 8);
  CHECK(info.has_instance_labels == 1);
  CHECK(milkid_dataset_bag_info(ds, 30, &info) == MILKID_INVALID_ARGUMENT);

  uint8_t labels[8];
  CHECK(milkid_dataset_instance_labels(ds, 0, labels, 3) == MILKID_BUFFER_TOO_SMALL);
  CHECK(milkid_dataset_instance_labels(ds, 0, labels, 8) == MILKID_OK);

  milkid_dataset_stats stats;
  REQUIRE(milkid_dataset_stats_get(ds, &stats) == MILKID_OK);
  CHECK(stats.bag_count == 30);
  CHECK(stats.positive_bag_pct + stats.negative_bag_pct == doctest::Approx(100.0));

  const std::string path = (tmp.path / "d.milds").string();
  REQUIRE(milkid_dataset_save(ds, path.c_str()) == MILKID_OK);
  milkid_dataset* back = nullptr;
  REQUIRE(milkid_dataset_load(path.c_str(), &back) == MILKID_OK);
  CHECK(milkid_dataset_bag_count(back) == 30);
  char digest[17];
  REQUIRE(milkid_hash_file(path.c_str(), digest) == MILKID_OK);
  char* manifest = nullptr;
  REQUIRE(milkid_dataset_manifest(ds, "d.milds", &manifest) == MILKID_OK);
  CHECK(take(manifest).find(digest) != std::string::npos);
  CHECK(milkid_dataset_load((tmp.path / "missing").string().c_str(), &back) == MILKID_IO);
  milkid_dataset_free(back);
  milkid_dataset_free(ds);
}

TEST_CASE("splits and holdout") {
  milkid_dataset* ds = small_dataset();
  milkid_split* split = nullptr;
  REQUIRE(milkid_split_kfold(ds, 5, 2, 1, &split) == MILKID_OK);
  CHECK(milkid_split_fold_count(split) == 5);
  CHECK(milkid_split_repeat_count(split) == 2);
  std::vector<size_t> members(30);
  size_t n = 0, m = 0;
  REQUIRE(milkid_split_members(split, 1, 2, 0, members.data(), members.size(), &n) == MILKID_OK);
  CHECK(n == 6);
  REQUIRE(milkid_split_members(split, 1, 2, 1, members.data(), members.size(), &m) == MILKID_OK);
  CHECK(m == 24);
  CHECK(milkid_split_members(split, 1, 2, 1, members.data(), 5, &m) == MILKID_BUFFER_TOO_SMALL);
  CHECK(milkid_split_members(split, 2, 0, 0, members.data(), 30, &m) == MILKID_INVALID_ARGUMENT);

  std::vector<size_t> tr(24), va(24);
  size_t tn = 0, vn = 0;
  REQUIRE(milkid_holdout(ds, members.data(), 24, 0.25, 4, tr.data(), &tn, va.data(), &vn) == MILKID_OK);
  CHECK(tn + vn == 24);
  CHECK(vn > 0);
  milkid_split* bad = nullptr;
  CHECK(milkid_split_kfold(ds, 1, 1, 1, &bad) != MILKID_OK);
  milkid_split_free(split);
  milkid_dataset_free(ds);
}

TEST_CASE("training, persistence and prediction") {
  TempDir tmp;
  milkid_dataset* ds = small_dataset();
  milkid_model* model = small_model(ds);
  CHECK(milkid_model_pooling(model) == MILKID_POOL_ATTENTION);
  CHECK(milkid_model_best_epoch(model) >= 1);
  CHECK(milkid_model_parameter_count(model) == 16 * 16 + 16 + 16 * 8 + 8 + 8 * 8 + 8 + 8 + 1);
  char* log = nullptr;
  REQUIRE(milkid_model_train_log(model, &log) == MILKID_OK);
  CHECK(take(log).rfind("epoch,", 0) == 0);

  const std::string path = (tmp.path / "m.ckpt").string();
  REQUIRE(milkid_model_save(model, path.c_str()) == MILKID_OK);
  milkid_model* back = nullptr;
  REQUIRE(milkid_model_load(path.c_str(), &back) == MILKID_OK);
  CHECK(milkid_model_checksum(back) == milkid_model_checksum(model));

  int label = -1;
  double prob = -1.0;
  REQUIRE(milkid_predict(back, ds, 0, 0.5, &label, &prob) == MILKID_OK);
  CHECK((label == (prob >= 0.5 ? 1 : 0)));
  CHECK(milkid_predict(back, ds, 0, 0.0, &label, &prob) == MILKID_INVALID_CONFIG);

  const size_t bags[] = {0, 1, 2, 3};
  double loss = 0, acc = 0;
  REQUIRE(milkid_evaluate_bags(model, ds, bags, 4, 0.5, &loss, &acc) == MILKID_OK);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);

  milkid_train_config bad;
  small_train_config(&bad);
  bad.epochs = 0;
  CHECK(milkid_train_config_validate(&bad) == MILKID_INVALID_CONFIG);
  bad.epochs = 1;
  bad.hidden_count = MILKID_MAX_HIDDEN + 1;
  CHECK(milkid_train_config_validate(&bad) == MILKID_INVALID_CONFIG);

  milkid_pooling pooling;
  CHECK(milkid_pooling_parse("inst_max", &pooling) == MILKID_OK);
  CHECK(pooling == MILKID_POOL_INSTANCE_MAX);
  CHECK(milkid_pooling_parse("nope", &pooling) == MILKID_INVALID_CONFIG);

  milkid_model_free(back);
  milkid_model_free(model);
  milkid_dataset_free(ds);
}

TEST_CASE("detection on one and many bags") {
  milkid_dataset* ds = small_dataset();
  milkid_model* model = small_model(ds);
  milkid_inversion_config inv;
  milkid_inversion_defaults(MILKID_INVERT_SPARSE, &inv);
  inv.steps = 4;
  CHECK(inv.lambda == 0.001);

  const size_t count = milkid_dataset_bag_count(ds);
  std::vector<size_t> bags(count);
  for (size_t i = 0; i < count; ++i) bags[i] = i;
  std::vector<milkid_kid*> one(count), many(count);
  REQUIRE(milkid_detect_many(model, ds, bags.data(), count, &inv, 0.3, 0.5, 1, one.data()) == MILKID_OK);
  REQUIRE(milkid_detect_many(model, ds, bags.data(), count, &inv, 0.3, 0.5, 3, many.data()) == MILKID_OK);
  for (size_t i = 0; i < count; ++i) {
    const size_t k = milkid_kid_instance_count(one[i]);
    std::vector<double> a(k), b(k);
    std::vector<uint8_t> pa(k);
    REQUIRE(milkid_kid_scores(one[i], a.data(), k) == MILKID_OK);
    REQUIRE(milkid_kid_scores(many[i], b.data(), k) == MILKID_OK);
    REQUIRE(milkid_kid_predictions(one[i], pa.data(), k) == MILKID_OK);
    CHECK(a == b);
    CHECK(milkid_kid_was_refined(one[i]) == milkid_kid_bag_prediction(one[i]));
    if (milkid_kid_bag_prediction(one[i]) == 0) {
      for (uint8_t p : pa) CHECK(p == 0);
      char* csv = nullptr;
      CHECK(milkid_kid_trace_csv(one[i], &csv) == MILKID_EMPTY_INPUT);
    } else {
      char* csv = nullptr;
      REQUIRE(milkid_kid_trace_csv(one[i], &csv) == MILKID_OK);
      CHECK(take(csv).rfind("step,loss,zero_fraction\n", 0) == 0);
      double orig = -1, refined = -1;
      milkid_kid_zero_fractions(one[i], &orig, &refined);
      CHECK(refined >= 0.0);
    }
    if (k > 1) CHECK(milkid_kid_scores(one[i], a.data(), 1) == MILKID_BUFFER_TOO_SMALL);
  }
  const milkid_kid* panels[] = {one[0]};
  CHECK(milkid_render_heatmap(ds, 0, panels, 1, "/tmp/never.pgm") == MILKID_NO_GRID);
  for (size_t i = 0; i < count; ++i) {
    milkid_kid_free(one[i]);
    milkid_kid_free(many[i]);
  }

  inv.lambda = -1.0;
  milkid_kid* k = nullptr;
  CHECK(milkid_detect(model, ds, 0, &inv, 0.3, 0.5, &k) == MILKID_NEGATIVE_LAMBDA);
  CHECK(milkid_detect(model, ds, 0, nullptr, 0.3, 0.5, &k) == MILKID_OK);
  milkid_kid_free(k);
  milkid_model_free(model);
  milkid_dataset_free(ds);
}

TEST_CASE("methods and experiments") {
  unsigned bits = 0;
  REQUIRE(milkid_method_parse("all", &bits) == MILKID_OK);
  CHECK(bits == MILKID_METHOD_ALL);
  REQUIRE(milkid_method_parse("att_sparse", &bits) == MILKID_OK);
  CHECK(bits == MILKID_METHOD_ATT_SPARSE);
  CHECK(std::string(milkid_method_name(MILKID_METHOD_ATT_INV)) == "att_inv");
  CHECK(milkid_method_parse("bogus", &bits) == MILKID_INVALID_CONFIG);

  milkid_experiment_config cfg;
  milkid_experiment_defaults(&cfg);
  CHECK(cfg.lambda_count == 4);
  CHECK(cfg.lambdas[0] == 0.0005);
  CHECK(cfg.lambdas[3] == 0.003);
  CHECK(cfg.kid_threshold_count == 5);
  CHECK(milkid_experiment_config_validate(&cfg) == MILKID_OK);

  small_train_config(&cfg.train);
  cfg.methods = MILKID_METHOD_ATT | MILKID_METHOD_ATT_SPARSE;
  cfg.sparse.steps = 3;
  cfg.seed = 2;
  char* describe = nullptr;
  REQUIRE(milkid_experiment_describe(&cfg, &describe) == MILKID_OK);
  CHECK(take(describe).rfind("methods=att,att_sparse\n", 0) == 0);

  milkid_dataset* ds = small_dataset();
  milkid_split* split = nullptr;
  REQUIRE(milkid_split_kfold(ds, 3, 1, 1, &split) == MILKID_OK);
  std::vector<std::string> lines;
  milkid_report* report = nullptr;
  auto sink = [](const char* line, void* user) { static_cast<std::vector<std::string>*>(user)->push_back(line); };
  REQUIRE(milkid_run_experiment(ds, split, &cfg, sink, &lines, &report) == MILKID_OK);
  REQUIRE(milkid_report_row_count(report) == 6);
  CHECK(lines.size() == 6);
  char* csv = nullptr;
  REQUIRE(milkid_report_csv(report, &csv) == MILKID_OK);
  std::string expected = milkid_report_csv_header();
  for (const auto& l : lines) expected += l;
  CHECK(take(csv) == expected);
  milkid_report_row row;
  REQUIRE(milkid_report_row_get(report, 0, &row) == MILKID_OK);
  CHECK(row.method == MILKID_METHOD_ATT);
  CHECK(std::isnan(row.lambda));
  REQUIRE(milkid_report_row_get(report, 1, &row) == MILKID_OK);
  CHECK(row.method == MILKID_METHOD_ATT_SPARSE);
  CHECK_FALSE(std::isnan(row.lambda));
  CHECK(milkid_report_row_get(report, 6, &row) == MILKID_INVALID_ARGUMENT);
  milkid_method_summary summary;
  CHECK(milkid_report_method_summary(report, MILKID_METHOD_ATT, &summary) == MILKID_OK);
  CHECK(milkid_report_method_summary(report, MILKID_METHOD_INST_MAX, &summary) == MILKID_INVALID_ARGUMENT);
  CHECK(std::strlen(milkid_report_fingerprint(report)) == 16);
  char* text = nullptr;
  REQUIRE(milkid_report_summary(report, &text) == MILKID_OK);
  CHECK(take(text).find("status: complete") != std::string::npos);
  milkid_report_free(report);

  const double negative[] = {-0.1};
  cfg.lambdas = negative;
  cfg.lambda_count = 1;
  CHECK(milkid_run_experiment(ds, split, &cfg, nullptr, nullptr, &report) == MILKID_NEGATIVE_LAMBDA);
  cfg.lambda_count = 0;
  CHECK(milkid_experiment_config_validate(&cfg) == MILKID_EMPTY_CANDIDATES);
  milkid_split_free(split);
  milkid_dataset_free(ds);
}
