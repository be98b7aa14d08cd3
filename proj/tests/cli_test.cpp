#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "decorr/experiment.hpp"
#include "support.hpp"

using namespace decorr;
using testsupport::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  REQUIRE(out);
  out << text;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    rows.push_back(std::move(fields));
  }
  return rows;
}

// Equality of metrics CSVs with the wall_seconds column masked out.
void check_csv_equal_modulo_wall(const std::filesystem::path& a,
                                 const std::filesystem::path& b) {
  const auto ra = read_csv(a);
  const auto rb = read_csv(b);
  REQUIRE(ra.size() == rb.size());
  REQUIRE(!ra.empty());
  std::size_t wall_col = 0;
  for (std::size_t c = 0; c < ra[0].size(); ++c) {
    if (ra[0][c] == "wall_seconds") wall_col = c;
  }
  for (std::size_t r = 0; r < ra.size(); ++r) {
    REQUIRE(ra[r].size() == rb[r].size());
    for (std::size_t c = 0; c < ra[r].size(); ++c) {
      if (r > 0 && c == wall_col) continue;
      CHECK(ra[r][c] == rb[r][c]);
    }
  }
}

std::string tiny_config_json(const std::string& out_dir, double lambda,
                             int epochs = 2, int per_class = 60) {
  std::ostringstream os;
  os << "{\n"
     << "  \"model\": \"mini3\",\n"
     << "  \"dataset\": {\"kind\": \"synthetic\", \"classes\": 4, \"per_class\": "
     << per_class << ", \"test_per_class\": 30, \"seed\": 7},\n"
     << "  \"train\": {\"lambda\": " << lambda
     << ", \"epochs\": " << epochs
     << ", \"batch_size\": 32, \"lr_initial\": 0.05, \"seed\": 3},\n"
     << "  \"out_dir\": \"" << out_dir << "\"\n"
     << "}\n";
  return os.str();
}

int run_cli(const std::string& args, const std::filesystem::path& log) {
  const char* bin = std::getenv("DECORR_CLI");
  REQUIRE_MESSAGE(bin != nullptr, "DECORR_CLI must point at the CLI binary");
  const std::string cmd = std::string(bin) + " " + args + " > " + log.string() +
                          " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config files parse strictly") {
  TempDir tmp("cfg");
  SUBCASE("valid config round trips through the resolver") {
    const auto path = tmp.path() / "config.json";
    write_file(path, tiny_config_json((tmp.path() / "out").string(), 1.0));
    ExperimentConfig cfg = load_experiment_config(path);
    CHECK(cfg.model == "mini3");
    CHECK(cfg.train.lambda == 1.0);
    CHECK(cfg.train.batch_size == 32);
    cfg.resolve();
    CHECK(cfg.train.tap_stages == std::set<int>{0, 1, 2});
  }
  SUBCASE("unknown keys are rejected by name") {
    const auto path = tmp.path() / "bad.json";
    write_file(path, "{\"model\": \"mini3\", \"learning_rate\": 0.1}");
    CHECK_THROWS_WITH_AS(load_experiment_config(path),
                         doctest::Contains("learning_rate"), ConfigError);
  }
  SUBCASE("unknown nested keys are rejected") {
    const auto path = tmp.path() / "bad2.json";
    write_file(path, "{\"train\": {\"lambda\": 1.0, \"lr\": 0.1}}");
    CHECK_THROWS_WITH_AS(load_experiment_config(path), doctest::Contains("lr"),
                         ConfigError);
  }
  SUBCASE("wrong types are rejected") {
    const auto path = tmp.path() / "bad3.json";
    write_file(path, "{\"train\": {\"lambda\": \"one\"}}");
    CHECK_THROWS_AS(load_experiment_config(path), ConfigError);
  }
  SUBCASE("explicit tap_stages survive resolution") {
    const auto path = tmp.path() / "taps.json";
    write_file(path,
               "{\"model\": \"mini3\", \"train\": {\"tap_stages\": [0, 2]}}");
    ExperimentConfig cfg = load_experiment_config(path);
    cfg.resolve();
    CHECK(cfg.train.tap_stages == std::set<int>{0, 2});
  }
}

TEST_CASE("run_train writes metrics, checkpoint and a resolved snapshot") {
  TempDir tmp("train");
  ExperimentConfig cfg;
  cfg.dataset = {"synthetic", 4, 60, 30, 7, 0};
  cfg.train.lambda = 1.0;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 32;
  cfg.train.lr_initial = 0.05;
  cfg.train.seed = 3;
  cfg.out_dir = (tmp.path() / "out").string();

  const auto runs = run_train(cfg);
  REQUIRE(runs.size() == 1);
  const auto dir = runs[0].dir;

  SUBCASE("metrics row-count contract: one train and one test row per epoch") {
    const auto rows = read_csv(dir / "metrics.csv");
    REQUIRE(rows.size() == 5);  // header + 2 epochs x 2 splits
    CHECK(rows[0][0] == "epoch");
    int train_rows = 0, test_rows = 0;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r][1] == "train") ++train_rows;
      if (rows[r][1] == "test") ++test_rows;
    }
    CHECK(train_rows == 2);
    CHECK(test_rows == 2);
    // Stage columns for all three tapped stages, grouped by kind.
    CHECK(rows[0][6] == "mfd_stage_0");
    CHECK(rows[0][9] == "meanabscorr_stage_0");
  }
  SUBCASE("checkpoint loads back into a matching model") {
    ExperimentConfig check = cfg;
    Model model(check.resolve(), 999);
    load_checkpoint(model, dir / "model.ckpt");
  }
  SUBCASE("resolved snapshot reproduces the run (closure)") {
    ExperimentConfig again = load_experiment_config(dir / "config.resolved.json");
    again.out_dir = (tmp.path() / "out2").string();
    const auto runs2 = run_train(again);
    check_csv_equal_modulo_wall(dir / "metrics.csv",
                                runs2[0].dir / "metrics.csv");
    CHECK(slurp(dir / "model.ckpt") == slurp(runs2[0].dir / "model.ckpt"));
  }
}

TEST_CASE("run_train honors repeats with derived seeds") {
  TempDir tmp("repeats");
  ExperimentConfig cfg;
  cfg.dataset = {"synthetic", 4, 40, 20, 7, 0};
  cfg.train.lambda = 0.0;
  cfg.tap_stages_explicit = true;
  cfg.train.tap_stages.clear();
  cfg.train.epochs = 1;
  cfg.train.batch_size = 16;
  cfg.train.lr_initial = 0.05;
  cfg.train.seed = 5;
  cfg.repeats = 3;
  cfg.out_dir = (tmp.path() / "out").string();

  const auto runs = run_train(cfg);
  REQUIRE(runs.size() == 3);
  for (int r = 0; r < 3; ++r) {
    CHECK(std::filesystem::exists(runs[r].dir / "metrics.csv"));
    ExperimentConfig sub =
        load_experiment_config(runs[r].dir / "config.resolved.json");
    CHECK(sub.train.seed == 5 + std::uint64_t(r));
  }
  const auto summary = read_csv(tmp.path() / "out" / "summary.csv");
  REQUIRE(summary.size() >= 2);
  CHECK(summary[0] == std::vector<std::string>{"metric", "mean", "std"});
  CHECK(summary[1][0] == "accuracy");
}

TEST_CASE("lambda sweep") {
  TempDir tmp("sweep");
  ExperimentConfig cfg;
  cfg.dataset = {"synthetic", 4, 40, 20, 7, 0};
  cfg.train.epochs = 1;
  cfg.train.batch_size = 16;
  cfg.train.lr_initial = 0.05;
  cfg.train.seed = 5;
  cfg.out_dir = (tmp.path() / "out").string();

  SUBCASE("two lambdas give a two-row comparison CSV") {
    const auto rows = run_lambda_sweep(cfg, {0.0, 1.0});
    REQUIRE(rows.size() == 2);
    const auto csv = read_csv(tmp.path() / "out" / "sweep.csv");
    REQUIRE(csv.size() == 3);
    CHECK(csv[0][0] == "lambda");
    CHECK(csv[1][0] == "0");
    CHECK(csv[2][0] == "1");
  }
  SUBCASE("the five-point log grid yields five rows") {
    const auto rows = run_lambda_sweep(cfg, {0.01, 0.1, 1, 10, 100});
    CHECK(rows.size() == 5);
    CHECK(read_csv(tmp.path() / "out" / "sweep.csv").size() == 6);
  }
  SUBCASE("duplicate lambdas are rejected") {
    CHECK_THROWS_AS(run_lambda_sweep(cfg, {1.0, 1.0}), ConfigError);
  }
  SUBCASE("fewer than two lambdas is rejected") {
    CHECK_THROWS_AS(run_lambda_sweep(cfg, {1.0}), ConfigError);
  }
}

TEST_CASE("paired runs: the decorrelation loss lowers every tapped stage's statistic") {
  TempDir tmp("paired");
  ExperimentConfig base;
  base.dataset = {"synthetic", 4, 150, 60, 7, 0};
  base.train.epochs = 5;
  base.train.batch_size = 64;
  base.train.lr_initial = 0.05;
  base.train.seed = 7;

  ExperimentConfig with_mfd = base;
  with_mfd.train.lambda = 1.0;
  with_mfd.out_dir = (tmp.path() / "lam1").string();
  ExperimentConfig without = base;
  without.train.lambda = 0.0;
  without.out_dir = (tmp.path() / "lam0").string();

  const auto run1 = run_train(with_mfd);
  const auto run0 = run_train(without);
  REQUIRE(run1[0].final_mean_abs_corr.size() == 3);
  for (const auto& [stage, v1] : run1[0].final_mean_abs_corr) {
    const double v0 = run0[0].final_mean_abs_corr.at(stage);
    CHECK(v1 < v0);
  }

  SUBCASE("corr-report agrees on the trained checkpoints") {
    ExperimentConfig report1 = with_mfd;
    const auto rows1 = run_corr_report(report1, run1[0].dir / "model.ckpt", {});
    ExperimentConfig report0 = without;
    const auto rows0 = run_corr_report(report0, run0[0].dir / "model.ckpt", {});
    REQUIRE(rows1.size() == 3);
    REQUIRE(rows0.size() == 3);
    for (std::size_t i = 0; i < rows1.size(); ++i) {
      CHECK(rows1[i].mean_abs_corr < rows0[i].mean_abs_corr);
      CHECK(rows1[i].mean_abs_corr >= 0.0);
      CHECK(rows0[i].mean_abs_corr <= 1.0);
    }
    CHECK(std::filesystem::exists(tmp.path() / "lam1" / "corr_report.csv"));
  }
  SUBCASE("stage filter restricts the report") {
    ExperimentConfig report = with_mfd;
    const auto rows = run_corr_report(report, run1[0].dir / "model.ckpt", {0});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].stage == 0);
  }
  SUBCASE("a checkpoint for a different spec is rejected") {
    ExperimentConfig other = with_mfd;
    other.model = "mini5";
    CHECK_THROWS_AS(run_corr_report(other, run1[0].dir / "model.ckpt", {}),
                    ConfigError);
  }
}

TEST_CASE("corr-report on a freshly initialized model stays in range") {
  TempDir tmp("fresh");
  ExperimentConfig cfg;
  cfg.dataset = {"synthetic", 4, 40, 30, 7, 0};
  cfg.train.seed = 2;
  cfg.out_dir = (tmp.path() / "out").string();
  ExperimentConfig build = cfg;
  Model model(build.resolve(), cfg.train.seed);
  std::filesystem::create_directories(cfg.out_dir);
  save_checkpoint(model, tmp.path() / "out" / "fresh.ckpt");

  const auto rows = run_corr_report(cfg, tmp.path() / "out" / "fresh.ckpt", {});
  REQUIRE(rows.size() == 3);
  for (const auto& row : rows) {
    CHECK(row.mean_abs_corr >= 0.0);
    CHECK(row.mean_abs_corr <= 1.0);
    CHECK(row.channels >= 8);
  }
}

TEST_CASE("feature dumps") {
  TempDir tmp("dump");
  SUBCASE("write-read round trip is bit-exact") {
    Rng rng(3);
    FeatureDump dump;
    dump.stage_id = 2;
    dump.b = 3;
    dump.d = 4;
    dump.h = 2;
    dump.w = 5;
    dump.values.resize(3 * 4 * 2 * 5);
    for (auto& v : dump.values) v = float(rng.uniform(-4.0, 4.0));
    const auto path = tmp.path() / "dump.mfdfmap";
    write_feature_dump(path, dump);
    const FeatureDump back = read_feature_dump(path);
    CHECK(back.stage_id == 2);
    CHECK(back.b == 3);
    CHECK(back.d == 4);
    CHECK(back.h == 2);
    CHECK(back.w == 5);
    REQUIRE(back.values.size() == dump.values.size());
    for (std::size_t i = 0; i < dump.values.size(); ++i) {
      CHECK(std::memcmp(&back.values[i], &dump.values[i], 4) == 0);
    }
    const auto path2 = tmp.path() / "dump2.mfdfmap";
    write_feature_dump(path2, back);
    CHECK(slurp(path) == slurp(path2));
  }
  SUBCASE("header/payload mismatch is rejected") {
    FeatureDump bad;
    bad.b = 2;
    bad.d = 2;
    bad.h = 2;
    bad.w = 2;
    bad.values.resize(15);
    CHECK_THROWS_AS(write_feature_dump(tmp.path() / "bad.mfdfmap", bad),
                    ValueError);
  }
  SUBCASE("dump-features runs a checkpointed model end to end") {
    ExperimentConfig cfg;
    cfg.dataset = {"synthetic", 4, 40, 20, 7, 0};
    cfg.train.epochs = 1;
    cfg.train.batch_size = 16;
    cfg.train.lr_initial = 0.05;
    cfg.train.seed = 5;
    cfg.out_dir = (tmp.path() / "run").string();
    const auto runs = run_train(cfg);

    ExperimentConfig dump_cfg = cfg;
    dump_cfg.out_dir = (tmp.path() / "dumps").string();
    const FeatureDump dump = run_dump_features(
        dump_cfg, runs[0].dir / "model.ckpt", 0, 4, true);
    CHECK(dump.stage_id == 0);
    CHECK(dump.b == 4);
    CHECK(dump.d == 8);
    CHECK(dump.h == 16);
    CHECK(dump.w == 16);
    CHECK(dump.values.size() == std::size_t(4) * 8 * 16 * 16);

    const auto file = tmp.path() / "dumps" / "features_stage0.mfdfmap";
    REQUIRE(std::filesystem::exists(file));
    const FeatureDump back = read_feature_dump(file);
    CHECK(back.values.size() == dump.values.size());

    std::size_t pgms = 0;
    for (const auto& entry :
         std::filesystem::directory_iterator(tmp.path() / "dumps")) {
      if (entry.path().extension() == ".pgm") ++pgms;
    }
    CHECK(pgms == 4 * 8);

    CHECK_THROWS_AS(
        run_dump_features(dump_cfg, runs[0].dir / "model.ckpt", 9, 4, false),
        ConfigError);
  }
  SUBCASE("constant channels render as mid-gray PGMs") {
    std::vector<unsigned char> pixels(6 * 4, 128);
    write_pgm(tmp.path() / "flat.pgm", 6, 4, pixels);
    const std::string bytes = slurp(tmp.path() / "flat.pgm");
    CHECK(bytes.rfind("P5\n6 4\n255\n", 0) == 0);
    for (std::size_t i = bytes.size() - 24; i < bytes.size(); ++i) {
      CHECK(static_cast<unsigned char>(bytes[i]) == 128);
    }
  }
}

TEST_CASE("cli subprocess exit codes and artifacts") {
  TempDir tmp("cli");
  const auto log = tmp.path() / "log.txt";

  SUBCASE("unknown config key exits 2 and names the key") {
    const auto bad = tmp.path() / "bad.json";
    write_file(bad, "{\"modle\": \"mini3\"}");
    CHECK(run_cli("train --config " + bad.string(), log) == 2);
    CHECK(slurp(log).find("modle") != std::string::npos);
  }
  SUBCASE("missing dataset exits 3") {
    const auto cfg = tmp.path() / "mnist.json";
    write_file(cfg, std::string("{\"dataset\": {\"kind\": \"mnist\"}, ") +
                        "\"train\": {\"epochs\": 1}, \"out_dir\": \"" +
                        (tmp.path() / "out").string() + "\"}");
    CHECK(run_cli("train --config " + cfg.string() + " --data-dir " +
                      (tmp.path() / "nodata").string(),
                  log) == 3);
  }
  SUBCASE("numeric abort exits 4") {
    const auto cfg = tmp.path() / "explode.json";
    std::ostringstream os;
    os << "{\"dataset\": {\"kind\": \"synthetic\", \"classes\": 4, "
       << "\"per_class\": 40, \"test_per_class\": 20, \"seed\": 7},\n"
       << "\"train\": {\"lambda\": 0, \"tap_stages\": [], \"epochs\": 1, "
       << "\"batch_size\": 16, \"lr_initial\": 1e160, \"seed\": 3},\n"
       << "\"out_dir\": \"" << (tmp.path() / "out").string() << "\"}";
    write_file(cfg, os.str());
    CHECK(run_cli("train --config " + cfg.string(), log) == 4);
  }
  SUBCASE("bad usage exits 2") {
    CHECK(run_cli("train --no-such-flag", log) == 2);
    CHECK(run_cli("corr-report", log) == 2);  // missing required --checkpoint
  }
  SUBCASE("train then eval round trip exits 0") {
    const auto cfg = tmp.path() / "ok.json";
    write_file(cfg, tiny_config_json((tmp.path() / "out").string(), 1.0, 1, 40));
    CHECK(run_cli("train --config " + cfg.string(), log) == 0);
    const auto rows = read_csv(tmp.path() / "out" / "metrics.csv");
    CHECK(rows.size() == 3);  // header + 1 train + 1 test
    CHECK(run_cli("eval --config " + cfg.string() + " --checkpoint " +
                      (tmp.path() / "out" / "model.ckpt").string() + " --out " +
                      (tmp.path() / "evalout").string(),
                  log) == 0);
    CHECK(std::filesystem::exists(tmp.path() / "evalout" / "eval.csv"));
  }
  SUBCASE("flags override config file values in the resolved snapshot") {
    const auto cfg = tmp.path() / "override.json";
    write_file(cfg, tiny_config_json((tmp.path() / "outO").string(), 1.0, 1, 40));
    CHECK(run_cli("train --config " + cfg.string() + " --lambda 0.25 --seed 9" +
                      " --precision f32 --out " + (tmp.path() / "outP").string(),
                  log) == 0);
    ExperimentConfig resolved =
        load_experiment_config(tmp.path() / "outP" / "config.resolved.json");
    CHECK(resolved.train.lambda == 0.25);
    CHECK(resolved.train.seed == 9);
    CHECK(resolved.train.precision == Precision::f32);
  }
  SUBCASE("identical invocations produce identical artifacts modulo wall time") {
    const auto cfg1 = tmp.path() / "r1.json";
    const auto cfg2 = tmp.path() / "r2.json";
    write_file(cfg1, tiny_config_json((tmp.path() / "outA").string(), 1.0, 1, 40));
    write_file(cfg2, tiny_config_json((tmp.path() / "outB").string(), 1.0, 1, 40));
    REQUIRE(run_cli("train --config " + cfg1.string(), log) == 0);
    REQUIRE(run_cli("train --config " + cfg2.string(), log) == 0);
    check_csv_equal_modulo_wall(tmp.path() / "outA" / "metrics.csv",
                                tmp.path() / "outB" / "metrics.csv");
    CHECK(slurp(tmp.path() / "outA" / "model.ckpt") ==
          slurp(tmp.path() / "outB" / "model.ckpt"));
  }
}
