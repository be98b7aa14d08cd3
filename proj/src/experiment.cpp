#include "decorr/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace decorr {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

void check_keys(const json& obj, const std::vector<std::string>& allowed,
                const std::string& scope) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown config key '" + key + "' in " + scope);
    }
  }
}

template <typename T>
T get_field(const json& obj, const std::string& key, T fallback,
            const std::string& scope) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' in " + scope +
                      " has the wrong type");
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_lambda(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

ModelSpec ExperimentConfig::resolve() {
  std::array<std::size_t, 3> input_shape{};
  std::size_t classes = 0;
  if (dataset.kind == "synthetic") {
    if (dataset.classes < 2) throw ConfigError("synthetic dataset needs >= 2 classes");
    if (dataset.per_class < 1 || dataset.test_per_class < 1) {
      throw ConfigError("synthetic per_class and test_per_class must be >= 1");
    }
    input_shape = {3, 16, 16};
    classes = static_cast<std::size_t>(dataset.classes);
  } else if (dataset.kind == "mnist") {
    input_shape = {1, 28, 28};
    classes = 10;
  } else if (dataset.kind == "cifar10") {
    input_shape = {3, 32, 32};
    classes = 10;
  } else {
    throw ConfigError("unknown dataset kind '" + dataset.kind + "'");
  }
  if (repeats < 1) throw ConfigError("repeats must be >= 1");

  ModelSpec spec;
  try {
    spec = builtin_spec(model, input_shape, classes);
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (!tap_stages_explicit) {
    train.tap_stages.clear();
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
      train.tap_stages.insert(static_cast<int>(s));
    }
    tap_stages_explicit = true;
  }
  train.validate(spec.stages.size());
  return spec;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");

  check_keys(root, {"model", "dataset", "train", "augment", "out_dir",
                    "data_dir", "repeats"},
             "top level");
  ExperimentConfig cfg;
  cfg.model = get_field<std::string>(root, "model", cfg.model, "top level");
  cfg.out_dir = get_field<std::string>(root, "out_dir", cfg.out_dir, "top level");
  cfg.data_dir = get_field<std::string>(root, "data_dir", cfg.data_dir, "top level");
  cfg.repeats = get_field<int>(root, "repeats", cfg.repeats, "top level");

  if (root.contains("dataset")) {
    const json& d = root.at("dataset");
    auto& ds = cfg.dataset;
    ds.kind = get_field<std::string>(d, "kind", ds.kind, "dataset");
    if (ds.kind == "synthetic") {
      check_keys(d, {"kind", "classes", "per_class", "test_per_class", "seed"},
                 "dataset");
      ds.classes = get_field<int>(d, "classes", ds.classes, "dataset");
      ds.per_class = get_field<int>(d, "per_class", ds.per_class, "dataset");
      ds.test_per_class =
          get_field<int>(d, "test_per_class", ds.test_per_class, "dataset");
      ds.seed = get_field<std::uint64_t>(d, "seed", ds.seed, "dataset");
    } else {
      check_keys(d, {"kind", "subset"}, "dataset");
      ds.subset = get_field<std::size_t>(d, "subset", ds.subset, "dataset");
    }
  }

  if (root.contains("train")) {
    const json& t = root.at("train");
    check_keys(t,
               {"lambda", "tap_stages", "epochs", "batch_size", "lr_initial",
                "lr_drop_epochs", "lr_drop_factor", "momentum", "weight_decay",
                "seed", "precision"},
               "train");
    auto& tc = cfg.train;
    tc.lambda = get_field<double>(t, "lambda", tc.lambda, "train");
    if (t.contains("tap_stages")) {
      const auto stages = get_field<std::vector<int>>(t, "tap_stages", {}, "train");
      tc.tap_stages = std::set<int>(stages.begin(), stages.end());
      cfg.tap_stages_explicit = true;
    }
    tc.epochs = get_field<int>(t, "epochs", tc.epochs, "train");
    tc.batch_size = get_field<std::size_t>(t, "batch_size", tc.batch_size, "train");
    tc.lr_initial = get_field<double>(t, "lr_initial", tc.lr_initial, "train");
    tc.lr_drop_epochs = get_field<std::vector<int>>(t, "lr_drop_epochs",
                                                    tc.lr_drop_epochs, "train");
    tc.lr_drop_factor =
        get_field<double>(t, "lr_drop_factor", tc.lr_drop_factor, "train");
    tc.momentum = get_field<double>(t, "momentum", tc.momentum, "train");
    tc.weight_decay =
        get_field<double>(t, "weight_decay", tc.weight_decay, "train");
    tc.seed = get_field<std::uint64_t>(t, "seed", tc.seed, "train");
    if (t.contains("precision")) {
      tc.precision = precision_from_string(
          get_field<std::string>(t, "precision", "f64", "train"));
    }
  }

  if (root.contains("augment")) {
    const json& a = root.at("augment");
    check_keys(a, {"enabled", "pad_pixels", "crop_to", "hflip_probability",
                   "zero_fill"},
               "augment");
    auto& ap = cfg.augment;
    ap.enabled = get_field<bool>(a, "enabled", ap.enabled, "augment");
    ap.pad_pixels = get_field<std::size_t>(a, "pad_pixels", ap.pad_pixels, "augment");
    if (a.contains("crop_to")) {
      const auto crop =
          get_field<std::vector<std::size_t>>(a, "crop_to", {}, "augment");
      if (crop.size() != 2) throw ConfigError("augment.crop_to must be [h,w]");
      ap.crop_to = {crop[0], crop[1]};
    }
    ap.hflip_probability =
        get_field<double>(a, "hflip_probability", ap.hflip_probability, "augment");
    ap.zero_fill = get_field<bool>(a, "zero_fill", ap.zero_fill, "augment");
    if (ap.hflip_probability < 0.0 || ap.hflip_probability > 1.0) {
      throw ConfigError("augment.hflip_probability must lie in [0,1]");
    }
  }
  return cfg;
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  ordered_json root;
  root["model"] = cfg.model;
  ordered_json d;
  d["kind"] = cfg.dataset.kind;
  if (cfg.dataset.kind == "synthetic") {
    d["classes"] = cfg.dataset.classes;
    d["per_class"] = cfg.dataset.per_class;
    d["test_per_class"] = cfg.dataset.test_per_class;
    d["seed"] = cfg.dataset.seed;
  } else {
    d["subset"] = cfg.dataset.subset;
  }
  root["dataset"] = d;

  ordered_json t;
  t["lambda"] = cfg.train.lambda;
  t["tap_stages"] = std::vector<int>(cfg.train.tap_stages.begin(),
                                     cfg.train.tap_stages.end());
  t["epochs"] = cfg.train.epochs;
  t["batch_size"] = cfg.train.batch_size;
  t["lr_initial"] = cfg.train.lr_initial;
  t["lr_drop_epochs"] = cfg.train.lr_drop_epochs;
  t["lr_drop_factor"] = cfg.train.lr_drop_factor;
  t["momentum"] = cfg.train.momentum;
  t["weight_decay"] = cfg.train.weight_decay;
  t["seed"] = cfg.train.seed;
  t["precision"] = to_string(cfg.train.precision);
  root["train"] = t;

  ordered_json a;
  a["enabled"] = cfg.augment.enabled;
  a["pad_pixels"] = cfg.augment.pad_pixels;
  a["crop_to"] = std::vector<std::size_t>{cfg.augment.crop_to[0],
                                          cfg.augment.crop_to[1]};
  a["hflip_probability"] = cfg.augment.hflip_probability;
  a["zero_fill"] = cfg.augment.zero_fill;
  root["augment"] = a;

  root["out_dir"] = cfg.out_dir;
  root["data_dir"] = cfg.data_dir;
  root["repeats"] = cfg.repeats;
  return root.dump(2) + "\n";
}

namespace {

fs::path resolve_data_dir(const ExperimentConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  if (const char* env = std::getenv("DECORR_DATA_DIR")) return env;
  throw DataError("no data directory: pass --data-dir or set DECORR_DATA_DIR");
}

fs::path find_under(const fs::path& root, const std::string& subdir,
                    const std::string& name) {
  const fs::path nested = root / subdir / name;
  if (fs::exists(nested)) return nested;
  const fs::path flat = root / name;
  if (fs::exists(flat)) return flat;
  throw DataError("missing data file " + name + " under " + root.string());
}

}  // namespace

DataPair load_datasets(const ExperimentConfig& cfg) {
  const auto& ds = cfg.dataset;
  if (ds.kind == "synthetic") {
    Dataset train = synthetic_dataset(ds.classes, ds.per_class, ds.seed, 0);
    Dataset test =
        synthetic_dataset(ds.classes, ds.test_per_class, ds.seed, 1, &train.stats);
    return {std::move(train), std::move(test)};
  }
  const fs::path root = resolve_data_dir(cfg);
  if (ds.kind == "mnist") {
    Dataset train = load_idx(find_under(root, "mnist", "train-images-idx3-ubyte"),
                             find_under(root, "mnist", "train-labels-idx1-ubyte"),
                             nullptr, ds.subset);
    Dataset test = load_idx(find_under(root, "mnist", "t10k-images-idx3-ubyte"),
                            find_under(root, "mnist", "t10k-labels-idx1-ubyte"),
                            &train.stats);
    return {std::move(train), std::move(test)};
  }
  if (ds.kind == "cifar10") {
    std::vector<fs::path> train_files;
    for (int i = 1; i <= 5; ++i) {
      train_files.push_back(find_under(root, "cifar-10-batches-bin",
                                       "data_batch_" + std::to_string(i) + ".bin"));
    }
    Dataset train = load_cifar10(train_files, nullptr, ds.subset);
    Dataset test = load_cifar10(
        {find_under(root, "cifar-10-batches-bin", "test_batch.bin")},
        &train.stats);
    return {std::move(train), std::move(test)};
  }
  throw ConfigError("unknown dataset kind '" + ds.kind + "'");
}

namespace {

RunArtifacts run_single_train(ExperimentConfig cfg) {
  const ModelSpec spec = cfg.resolve();
  set_default_precision(cfg.train.precision);
  const DataPair data = load_datasets(cfg);
  fs::create_directories(cfg.out_dir);

  Model model(spec, cfg.train.seed);
  TrainResult result = train(model, data.train, data.test, cfg.train, cfg.augment);

  const std::vector<int> stages(cfg.train.tap_stages.begin(),
                                cfg.train.tap_stages.end());
  RunArtifacts artifacts;
  artifacts.dir = cfg.out_dir;
  artifacts.metrics = result.metrics;

  write_metrics_csv(fs::path(cfg.out_dir) / "metrics.csv", result.metrics, stages);
  save_checkpoint(model, fs::path(cfg.out_dir) / "model.ckpt");
  write_text_atomic(fs::path(cfg.out_dir) / "config.resolved.json",
                    experiment_config_to_json(cfg));

  for (auto it = result.metrics.rbegin(); it != result.metrics.rend(); ++it) {
    if (it->split == "test") {
      artifacts.final_accuracy = it->accuracy;
      artifacts.final_mean_abs_corr = it->mean_abs_corr_per_stage;
      break;
    }
  }
  return artifacts;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size()));
}

}  // namespace

std::vector<RunArtifacts> run_train(const ExperimentConfig& config) {
  ExperimentConfig cfg = config;
  cfg.resolve();  // validate early, before any filesystem writes
  if (cfg.repeats == 1) {
    return {run_single_train(cfg)};
  }

  std::vector<RunArtifacts> runs;
  for (int r = 0; r < cfg.repeats; ++r) {
    ExperimentConfig sub = cfg;
    sub.repeats = 1;
    sub.train.seed = cfg.train.seed + static_cast<std::uint64_t>(r);
    sub.out_dir =
        (fs::path(cfg.out_dir) / ("repeat_" + std::to_string(r))).string();
    runs.push_back(run_single_train(std::move(sub)));
  }

  std::ostringstream csv;
  csv << "metric,mean,std\n";
  std::vector<double> accs;
  for (const auto& r : runs) accs.push_back(r.final_accuracy);
  csv << "accuracy," << fmt_double(mean_of(accs)) << ',' << fmt_double(std_of(accs))
      << '\n';
  for (int s : cfg.train.tap_stages) {
    std::vector<double> vals;
    for (const auto& r : runs) vals.push_back(r.final_mean_abs_corr.at(s));
    csv << "meanabscorr_stage_" << s << ',' << fmt_double(mean_of(vals)) << ','
        << fmt_double(std_of(vals)) << '\n';
  }
  fs::create_directories(cfg.out_dir);
  write_text_atomic(fs::path(cfg.out_dir) / "summary.csv", csv.str());
  return runs;
}

std::vector<SweepRow> run_lambda_sweep(const ExperimentConfig& config,
                                       const std::vector<double>& lambdas) {
  if (lambdas.size() < 2) {
    throw ConfigError("lambda-sweep needs at least 2 lambda values");
  }
  {
    std::set<double> unique(lambdas.begin(), lambdas.end());
    if (unique.size() != lambdas.size()) {
      throw ConfigError("duplicate lambda values in sweep");
    }
  }
  ExperimentConfig base = config;
  base.resolve();

  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    ExperimentConfig sub = base;
    sub.train.lambda = lambda;
    sub.out_dir =
        (fs::path(base.out_dir) / ("lambda_" + fmt_lambda(lambda))).string();
    const auto runs = run_train(sub);

    SweepRow row;
    row.lambda = lambda;
    std::vector<double> accs;
    for (const auto& r : runs) accs.push_back(r.final_accuracy);
    row.accuracy_mean = mean_of(accs);
    row.accuracy_std = std_of(accs);
    for (int s : base.train.tap_stages) {
      std::vector<double> vals;
      for (const auto& r : runs) vals.push_back(r.final_mean_abs_corr.at(s));
      row.corr_mean[s] = mean_of(vals);
      row.corr_std[s] = std_of(vals);
    }
    rows.push_back(std::move(row));
  }

  std::ostringstream csv;
  csv << "lambda,accuracy_mean,accuracy_std";
  for (int s : base.train.tap_stages) {
    csv << ",meanabscorr_stage_" << s << "_mean,meanabscorr_stage_" << s << "_std";
  }
  csv << '\n';
  for (const auto& row : rows) {
    csv << fmt_lambda(row.lambda) << ',' << fmt_double(row.accuracy_mean) << ','
        << fmt_double(row.accuracy_std);
    for (int s : base.train.tap_stages) {
      csv << ',' << fmt_double(row.corr_mean.at(s)) << ','
          << fmt_double(row.corr_std.at(s));
    }
    csv << '\n';
  }
  fs::create_directories(base.out_dir);
  write_text_atomic(fs::path(base.out_dir) / "sweep.csv", csv.str());
  return rows;
}

namespace {

Model load_model_for(const ExperimentConfig& config,
                     const fs::path& checkpoint) {
  ExperimentConfig cfg = config;
  const ModelSpec spec = cfg.resolve();
  set_default_precision(cfg.train.precision);
  Model model(spec, cfg.train.seed);
  load_checkpoint(model, checkpoint);
  return model;
}

}  // namespace

std::vector<CorrReportRow> run_corr_report(const ExperimentConfig& config,
                                           const fs::path& checkpoint,
                                           const std::set<int>& stages) {
  ExperimentConfig cfg = config;
  cfg.resolve();
  Model model = load_model_for(cfg, checkpoint);
  const DataPair data = load_datasets(cfg);

  std::set<int> wanted = stages;
  if (wanted.empty()) {
    for (std::size_t s = 0; s < model.spec().stages.size(); ++s) {
      wanted.insert(static_cast<int>(s));
    }
  }
  for (int s : wanted) {
    if (s < 0 || static_cast<std::size_t>(s) >= model.spec().stages.size()) {
      throw ConfigError("corr-report: stage " + std::to_string(s) +
                        " out of range");
    }
  }

  const std::size_t bs = std::min<std::size_t>(256, data.test.size());
  BatchStream batches(data.test, bs, 0, 0, AugmentationPolicy{},
                      /*drop_last=*/false, /*shuffled=*/false);
  std::map<int, double> corr_sum;
  std::map<int, std::set<std::size_t>> dead;  // zero-variance in every batch
  std::map<int, std::size_t> channel_count;
  std::size_t used_batches = 0;
  bool first = true;
  for (auto batch = batches.next(); batch; batch = batches.next()) {
    if (batch->labels.size() < 2) continue;
    ForwardResult fwd = model.forward(batch->images, wanted, Mode::eval);
    for (const auto& tap : fwd.taps) {
      CorrelationMatrix corr = correlation_matrix(tap);
      corr_sum[tap.stage_id] += mean_abs_offdiag(corr);
      channel_count[tap.stage_id] = corr.dim();
      std::set<std::size_t> zero(corr.zero_variance_channels.begin(),
                                 corr.zero_variance_channels.end());
      if (first) {
        dead[tap.stage_id] = std::move(zero);
      } else {
        std::set<std::size_t> kept;
        for (std::size_t c : dead[tap.stage_id]) {
          if (zero.count(c)) kept.insert(c);
        }
        dead[tap.stage_id] = std::move(kept);
      }
    }
    first = false;
    ++used_batches;
  }
  if (used_batches == 0) {
    throw DataError("corr-report: no evaluable batches (need batch >= 2)");
  }

  std::vector<CorrReportRow> rows;
  std::ostringstream csv;
  csv << "stage,mean_abs_offdiag,zero_variance_channels,channels\n";
  for (int s : wanted) {
    CorrReportRow row;
    row.stage = s;
    row.mean_abs_corr = corr_sum[s] / static_cast<double>(used_batches);
    row.zero_variance_channels = dead[s].size();
    row.channels = channel_count[s];
    csv << s << ',' << fmt_double(row.mean_abs_corr) << ','
        << row.zero_variance_channels << ',' << row.channels << '\n';
    rows.push_back(row);
  }
  fs::create_directories(cfg.out_dir);
  write_text_atomic(fs::path(cfg.out_dir) / "corr_report.csv", csv.str());
  return rows;
}

namespace {

void put_u32_bin(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t read_u32(std::istream& in, const fs::path& path) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) {
      throw IoError("feature dump truncated: " + path.string());
    }
    v |= static_cast<std::uint32_t>(c) << (8 * i);
  }
  return v;
}

constexpr char kDumpMagic[9] = "MFDFMAP1";

}  // namespace

void write_feature_dump(const fs::path& path, const FeatureDump& dump) {
  const std::size_t expect = static_cast<std::size_t>(dump.b) * dump.d *
                             dump.h * dump.w;
  if (dump.values.size() != expect) {
    throw ValueError("feature dump payload does not match header dimensions");
  }
  std::string blob;
  blob.append(kDumpMagic, 8);
  put_u32_bin(blob, dump.stage_id);
  put_u32_bin(blob, dump.b);
  put_u32_bin(blob, dump.d);
  put_u32_bin(blob, dump.h);
  put_u32_bin(blob, dump.w);
  for (float f : dump.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32_bin(blob, bits);
  }
  write_text_atomic(path, blob);
}

FeatureDump read_feature_dump(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature dump " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kDumpMagic, 8) != 0) {
    throw IoError("bad feature dump magic in " + path.string());
  }
  FeatureDump dump;
  dump.stage_id = read_u32(in, path);
  dump.b = read_u32(in, path);
  dump.d = read_u32(in, path);
  dump.h = read_u32(in, path);
  dump.w = read_u32(in, path);
  const std::size_t n = static_cast<std::size_t>(dump.b) * dump.d * dump.h * dump.w;
  dump.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = read_u32(in, path);
    std::memcpy(&dump.values[i], &bits, sizeof(float));
  }
  if (in.get() != std::char_traits<char>::eof()) {
    throw IoError("trailing bytes after feature dump payload in " + path.string());
  }
  return dump;
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height,
               const std::vector<unsigned char>& pixels) {
  if (pixels.size() != width * height) {
    throw ValueError("pgm pixel count does not match dimensions");
  }
  std::string blob = "P5\n" + std::to_string(width) + " " +
                     std::to_string(height) + "\n255\n";
  blob.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  write_text_atomic(path, blob);
}

FeatureDump run_dump_features(const ExperimentConfig& config,
                              const fs::path& checkpoint, int stage,
                              std::size_t sample_count, bool write_pgms) {
  ExperimentConfig cfg = config;
  cfg.resolve();
  Model model = load_model_for(cfg, checkpoint);
  if (stage < 0 || static_cast<std::size_t>(stage) >= model.spec().stages.size()) {
    throw ConfigError("dump-features: invalid stage " + std::to_string(stage));
  }
  const DataPair data = load_datasets(cfg);
  if (sample_count < 1 || sample_count > data.test.size()) {
    throw ConfigError("dump-features: sample_count must lie in [1, test set size]");
  }

  BatchStream batches(data.test, sample_count, 0, 0, AugmentationPolicy{},
                      /*drop_last=*/false, /*shuffled=*/false);
  auto batch = batches.next();
  ForwardResult fwd = model.forward(batch->images, {stage}, Mode::eval);
  const Tensor& acts = fwd.taps.at(0).tensor;

  FeatureDump dump;
  dump.stage_id = static_cast<std::uint32_t>(stage);
  dump.b = static_cast<std::uint32_t>(acts.shape()[0]);
  dump.d = static_cast<std::uint32_t>(acts.shape()[1]);
  dump.h = static_cast<std::uint32_t>(acts.shape()[2]);
  dump.w = static_cast<std::uint32_t>(acts.shape()[3]);
  dump.values.reserve(acts.size());
  for (double v : acts.values()) dump.values.push_back(static_cast<float>(v));

  fs::create_directories(cfg.out_dir);
  const fs::path dump_path =
      fs::path(cfg.out_dir) / ("features_stage" + std::to_string(stage) + ".mfdfmap");
  write_feature_dump(dump_path, dump);

  if (write_pgms) {
    const std::size_t hw = static_cast<std::size_t>(dump.h) * dump.w;
    for (std::uint32_t s = 0; s < dump.b; ++s) {
      for (std::uint32_t c = 0; c < dump.d; ++c) {
        const float* plane = &dump.values[(s * dump.d + c) * hw];
        float lo = plane[0], hi = plane[0];
        for (std::size_t i = 1; i < hw; ++i) {
          lo = std::min(lo, plane[i]);
          hi = std::max(hi, plane[i]);
        }
        std::vector<unsigned char> pixels(hw);
        if (hi == lo) {
          std::fill(pixels.begin(), pixels.end(),
                    static_cast<unsigned char>(128));
        } else {
          const float scale = 255.0f / (hi - lo);
          for (std::size_t i = 0; i < hw; ++i) {
            pixels[i] = static_cast<unsigned char>(
                std::lround((plane[i] - lo) * scale));
          }
        }
        std::ostringstream name;
        name << "fmap_stage" << stage << "_sample" << s << "_ch" << c << ".pgm";
        write_pgm(fs::path(cfg.out_dir) / name.str(), dump.w, dump.h, pixels);
      }
    }
  }
  return dump;
}

MetricsRecord run_eval(const ExperimentConfig& config, const fs::path& checkpoint) {
  ExperimentConfig cfg = config;
  cfg.resolve();
  Model model = load_model_for(cfg, checkpoint);
  const DataPair data = load_datasets(cfg);

  MetricsRecord record = evaluate(model, data.test, cfg.train.tap_stages,
                                  cfg.train.batch_size, cfg.train.lambda);
  record.epoch = cfg.train.epochs - 1;
  fs::create_directories(cfg.out_dir);
  const std::vector<int> stages(cfg.train.tap_stages.begin(),
                                cfg.train.tap_stages.end());
  write_metrics_csv(fs::path(cfg.out_dir) / "eval.csv", {record}, stages);
  return record;
}

}  // namespace decorr
