#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "decorr/data.hpp"
#include "decorr/model.hpp"

namespace decorr {

struct TrainConfig {
  double lambda = 1.0;
  std::set<int> tap_stages;
  int epochs = 1;
  std::size_t batch_size = 128;
  double lr_initial = 0.1;
  std::vector<int> lr_drop_epochs;
  double lr_drop_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;

  void validate(std::size_t stage_count) const;  // throws ConfigError
};

struct MetricsRecord {
  int epoch = 0;
  std::string split;  // "train" or "test"
  double softmax_loss = 0.0;
  double total_loss = 0.0;
  double accuracy = 0.0;
  double wall_seconds = 0.0;
  std::map<int, double> mfd_per_stage;
  std::map<int, double> mean_abs_corr_per_stage;
};

// Momentum buffers, one per parameter, in parameter order.
struct SgdState {
  std::vector<std::vector<double>> velocity;
  std::uint64_t steps = 0;
};

// Classic coupled SGD with momentum:
//   v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v
// Weight decay touches only parameters flagged for it (conv/linear weights).
void sgd_step(Model& model, SgdState& state, double lr, double momentum,
              double weight_decay);

// Step schedule: lr_initial * lr_drop_factor^(number of drop epochs <= epoch).
double lr_at(int epoch, const TrainConfig& config);

struct TrainResult {
  std::vector<MetricsRecord> metrics;  // per epoch: one train row, one test row
};

TrainResult train(Model& model, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& config,
                  const AugmentationPolicy& policy);

// Eval-mode pass over the dataset in order: accuracy, softmax loss, and
// per-stage decorrelation statistics averaged over batches (batches smaller
// than 2 are skipped for the correlation statistics). total_loss combines
// the softmax loss with lambda times the summed per-stage penalties, so the
// record obeys the same decomposition as training rows.
MetricsRecord evaluate(Model& model, const Dataset& dataset,
                       const std::set<int>& tap_stages,
                       std::size_t batch_size = 256, double lambda = 0.0);

// CSV schema: epoch,split,softmax_loss,total_loss,accuracy,wall_seconds,
// then mfd_stage_<i> columns and meanabscorr_stage_<i> columns for the
// given stages in ascending order.
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRecord>& records,
                       const std::vector<int>& stages);

}  // namespace decorr
