#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "decorr/experiment.hpp"

namespace {

using decorr::ExperimentConfig;

struct GlobalFlags {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string precision;
  std::uint64_t seed = 0;
  int repeats = 0;
  bool seed_set = false, repeats_set = false;
};

void add_global_flags(CLI::App* cmd, GlobalFlags& flags) {
  cmd->add_option("--config", flags.config_path, "experiment config file (JSON)");
  cmd->add_option("--data-dir", flags.data_dir,
                  "dataset root (default: DECORR_DATA_DIR)");
  cmd->add_option("--out", flags.out_dir, "output directory");
  cmd->add_option("--seed", flags.seed, "training seed override")
      ->each([&](const std::string&) { flags.seed_set = true; });
  cmd->add_option("--precision", flags.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--repeats", flags.repeats,
                  "independent runs with seeds seed, seed+1, ...")
      ->each([&](const std::string&) { flags.repeats_set = true; });
}

ExperimentConfig make_config(const GlobalFlags& flags) {
  ExperimentConfig cfg;
  if (!flags.config_path.empty()) {
    cfg = decorr::load_experiment_config(flags.config_path);
  }
  if (!flags.data_dir.empty()) cfg.data_dir = flags.data_dir;
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  if (flags.seed_set) cfg.train.seed = flags.seed;
  if (!flags.precision.empty()) {
    cfg.train.precision = decorr::precision_from_string(flags.precision);
  }
  if (flags.repeats_set) cfg.repeats = flags.repeats;
  return cfg;
}

std::vector<double> parse_lambda_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw decorr::ConfigError("bad lambda value '" + item + "'");
    }
  }
  return out;
}

std::set<int> parse_stage_list(const std::string& text) {
  std::set<int> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.insert(std::stoi(item));
    } catch (const std::exception&) {
      throw decorr::ConfigError("bad stage index '" + item + "'");
    }
  }
  return out;
}

void print_metrics(const decorr::MetricsRecord& r) {
  std::printf("epoch %d [%s] accuracy=%.4f softmax_loss=%.6f total_loss=%.6f\n",
              r.epoch, r.split.c_str(), r.accuracy, r.softmax_loss, r.total_loss);
  for (const auto& [stage, v] : r.mean_abs_corr_per_stage) {
    std::printf("  stage %d: mfd=%.6f mean_abs_corr=%.6f\n", stage,
                r.mfd_per_stage.at(stage), v);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Staged-CNN training with multi-stage feature decorrelation"};
  app.require_subcommand(1);

  GlobalFlags train_flags, sweep_flags, report_flags, dump_flags, eval_flags;
  double lambda_override = 0.0;
  bool lambda_set = false;
  int epochs_override = 0;
  std::string lambda_list, stage_list;
  std::string checkpoint;
  int dump_stage = 0;
  std::size_t dump_samples = 4;
  bool dump_pgm = false;

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  add_global_flags(train_cmd, train_flags);
  train_cmd->add_option("--lambda", lambda_override, "balance factor override")
      ->each([&](const std::string&) { lambda_set = true; });
  train_cmd->add_option("--epochs", epochs_override, "epoch count override");

  CLI::App* sweep_cmd =
      app.add_subcommand("lambda-sweep", "train once per lambda value");
  add_global_flags(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--lambdas", lambda_list, "comma-separated lambda values")
      ->required();

  CLI::App* report_cmd = app.add_subcommand(
      "corr-report", "per-stage correlation statistics of a checkpoint");
  add_global_flags(report_cmd, report_flags);
  report_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  report_cmd->add_option("--stages", stage_list,
                         "comma-separated stage filter (default: all)");

  CLI::App* dump_cmd =
      app.add_subcommand("dump-features", "dump stage activations to disk");
  add_global_flags(dump_cmd, dump_flags);
  dump_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  dump_cmd->add_option("--stage", dump_stage, "stage to dump")->required();
  dump_cmd->add_option("--samples", dump_samples, "number of test samples");
  dump_cmd->add_flag("--pgm", dump_pgm, "also write per-channel PGM images");

  CLI::App* eval_cmd =
      app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_global_flags(eval_cmd, eval_flags);
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) {
      ExperimentConfig cfg = make_config(train_flags);
      if (lambda_set) cfg.train.lambda = lambda_override;
      if (epochs_override > 0) cfg.train.epochs = epochs_override;
      const auto runs = decorr::run_train(cfg);
      for (const auto& run : runs) {
        std::printf("run %s: final test accuracy %.4f\n",
                    run.dir.string().c_str(), run.final_accuracy);
      }
    } else if (*sweep_cmd) {
      ExperimentConfig cfg = make_config(sweep_flags);
      const auto rows =
          decorr::run_lambda_sweep(cfg, parse_lambda_list(lambda_list));
      std::printf("%-10s %-14s %-14s\n", "lambda", "acc_mean", "acc_std");
      for (const auto& row : rows) {
        std::printf("%-10g %-14.4f %-14.4f\n", row.lambda, row.accuracy_mean,
                    row.accuracy_std);
      }
    } else if (*report_cmd) {
      ExperimentConfig cfg = make_config(report_flags);
      const auto rows = decorr::run_corr_report(cfg, checkpoint,
                                                parse_stage_list(stage_list));
      std::printf("%-6s %-18s %-12s %-8s\n", "stage", "mean_abs_offdiag",
                  "zero_var_ch", "channels");
      for (const auto& row : rows) {
        std::printf("%-6d %-18.6f %-12zu %-8zu\n", row.stage, row.mean_abs_corr,
                    row.zero_variance_channels, row.channels);
      }
    } else if (*dump_cmd) {
      ExperimentConfig cfg = make_config(dump_flags);
      const auto dump = decorr::run_dump_features(cfg, checkpoint, dump_stage,
                                                  dump_samples, dump_pgm);
      std::printf("dumped stage %u activations: b=%u d=%u h=%u w=%u\n",
                  dump.stage_id, dump.b, dump.d, dump.h, dump.w);
    } else if (*eval_cmd) {
      ExperimentConfig cfg = make_config(eval_flags);
      print_metrics(decorr::run_eval(cfg, checkpoint));
    }
  } catch (const decorr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const decorr::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const decorr::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
