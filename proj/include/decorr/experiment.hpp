#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "decorr/data.hpp"
#include "decorr/model.hpp"
#include "decorr/trainer.hpp"

namespace decorr {

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | mnist | cifar10
  // synthetic
  int classes = 4;
  int per_class = 500;
  int test_per_class = 100;
  std::uint64_t seed = 7;
  // mnist / cifar10: keep only the first `subset` training images (0 = all)
  std::size_t subset = 0;
};

struct ExperimentConfig {
  std::string model = "mini3";
  DatasetConfig dataset;
  TrainConfig train;
  bool tap_stages_explicit = false;  // false -> resolve() taps every stage
  AugmentationPolicy augment;
  std::string out_dir = "out";
  std::string data_dir;  // empty -> DECORR_DATA_DIR environment variable
  int repeats = 1;

  // Fills defaults that depend on the chosen model (the default tap set is
  // every stage) and validates the result. Returns the model spec.
  ModelSpec resolve();
};

// Strict parse: unknown keys anywhere are a ConfigError naming the key.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string experiment_config_to_json(const ExperimentConfig& config);

// Train/test pair for the configured dataset; test data is standardized
// with the training split's statistics.
struct DataPair {
  Dataset train;
  Dataset test;
};
DataPair load_datasets(const ExperimentConfig& config);

struct RunArtifacts {
  std::filesystem::path dir;
  std::vector<MetricsRecord> metrics;
  double final_accuracy = 0.0;
  std::map<int, double> final_mean_abs_corr;  // test split, final epoch
};

// `train` subcommand: trains, then writes metrics.csv, model.ckpt and
// config.resolved.json into the output directory (atomically). With
// repeats > 1 each repeat runs under repeat_<r>/ with seed+r and a
// summary.csv aggregates mean/std over repeats.
std::vector<RunArtifacts> run_train(const ExperimentConfig& config);

// `lambda-sweep` subcommand: runs the template config once per lambda value
// (>= 2 distinct values) under lambda_<v>/ subdirectories, honoring
// repeats, and writes sweep.csv with per-lambda accuracy and per-stage
// correlation statistics (mean and std over repeats).
struct SweepRow {
  double lambda = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  std::map<int, double> corr_mean;
  std::map<int, double> corr_std;
};
std::vector<SweepRow> run_lambda_sweep(const ExperimentConfig& config,
                                       const std::vector<double>& lambdas);

// `corr-report` subcommand: per-stage mean absolute off-diagonal
// correlation on the test split for a trained checkpoint, plus the count of
// channels that were zero-variance in every evaluated batch.
struct CorrReportRow {
  int stage = 0;
  double mean_abs_corr = 0.0;
  std::size_t zero_variance_channels = 0;
  std::size_t channels = 0;
};
std::vector<CorrReportRow> run_corr_report(
    const ExperimentConfig& config, const std::filesystem::path& checkpoint,
    const std::set<int>& stages);

// Binary feature-map container: magic "MFDFMAP1", then stage_id, b, d, h, w
// as u32 LE, then b*d*h*w IEEE 32-bit LE values row-major
// (batch, channel, row, col).
struct FeatureDump {
  std::uint32_t stage_id = 0, b = 0, d = 0, h = 0, w = 0;
  std::vector<float> values;
};
void write_feature_dump(const std::filesystem::path& path, const FeatureDump& dump);
FeatureDump read_feature_dump(const std::filesystem::path& path);

// 8-bit binary PGM (P5). Used for per-channel feature-map exports, scaled
// per channel by min-max; constant channels map to mid-gray 128.
void write_pgm(const std::filesystem::path& path, std::size_t width,
               std::size_t height, const std::vector<unsigned char>& pixels);

// `dump-features` subcommand: forwards the first sample_count test images
// through the checkpointed model and dumps the requested stage's
// activations, optionally with per-channel PGM images.
FeatureDump run_dump_features(const ExperimentConfig& config,
                              const std::filesystem::path& checkpoint,
                              int stage, std::size_t sample_count,
                              bool write_pgms);

// `eval` subcommand: accuracy, loss and per-stage statistics of a
// checkpoint on the test split; also written to eval.csv.
MetricsRecord run_eval(const ExperimentConfig& config,
                       const std::filesystem::path& checkpoint);

}  // namespace decorr
