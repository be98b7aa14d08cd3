#include "decorr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

namespace decorr {

void TrainConfig::validate(std::size_t stage_count) const {
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lambda > 0.0 && batch_size < 2) {
    throw ConfigError("batch_size must be >= 2 when lambda > 0");
  }
  if (lambda > 0.0 && tap_stages.empty()) {
    throw ConfigError("lambda > 0 requires a non-empty tap_stages set");
  }
  for (int s : tap_stages) {
    if (s < 0 || static_cast<std::size_t>(s) >= stage_count) {
      throw ConfigError("tap stage " + std::to_string(s) + " out of range");
    }
  }
  int prev = -1;
  for (int e : lr_drop_epochs) {
    if (e <= prev) throw ConfigError("lr_drop_epochs must be strictly increasing");
    if (e < 0 || e >= epochs) {
      throw ConfigError("lr drop epoch " + std::to_string(e) +
                        " outside [0,epochs)");
    }
    prev = e;
  }
  if (lr_initial <= 0.0) throw ConfigError("lr_initial must be > 0");
  if (lr_drop_factor <= 0.0) throw ConfigError("lr_drop_factor must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ConfigError("momentum must lie in [0,1)");
  }
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

void sgd_step(Model& model, SgdState& state, double lr, double momentum,
              double weight_decay) {
  auto& params = model.parameters();
  if (state.velocity.empty()) {
    state.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.velocity[i].assign(params[i].value.size(), 0.0);
    }
  }
  if (state.velocity.size() != params.size()) {
    throw ValueError("sgd_step: optimizer state does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.value.has_grad_buffer()) {
      throw ValueError("sgd_step: missing gradient for " + p.name);
    }
    const auto g = p.value.grad();
    auto w = p.value.values_mut();
    auto& v = state.velocity[i];
    const double wd = p.weight_decay ? weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum * v[j] + (g[j] + wd * w[j]);
      w[j] = detail::quantize(w[j] - lr * v[j]);
    }
  }
  ++state.steps;
}

double lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw ValueError("lr_at: epoch " + std::to_string(epoch) +
                     " outside [0,epochs)");
  }
  double lr = config.lr_initial;
  for (int e : config.lr_drop_epochs) {
    if (e <= epoch) lr *= config.lr_drop_factor;
  }
  return lr;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t b = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  const auto v = logits.values();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (argmax_row(v.subspan(i * classes, classes)) ==
        static_cast<std::size_t>(labels[i])) {
      ++correct;
    }
  }
  return correct;
}

}  // namespace

TrainResult train(Model& model, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& config,
                  const AugmentationPolicy& policy) {
  config.validate(model.spec().stages.size());
  if (train_set.class_count != static_cast<int>(model.spec().classifier.classes)) {
    throw ConfigError("dataset has " + std::to_string(train_set.class_count) +
                      " classes, model expects " +
                      std::to_string(model.spec().classifier.classes));
  }
  set_default_precision(config.precision);

  TrainResult result;
  SgdState state;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    const auto epoch_start = std::chrono::steady_clock::now();

    BatchStream batches(train_set, config.batch_size, config.seed,
                        static_cast<std::size_t>(epoch), policy,
                        /*drop_last=*/true);
    double softmax_sum = 0.0, total_sum = 0.0;
    std::map<int, double> mfd_sum, corr_sum;
    std::size_t correct = 0, seen = 0, steps = 0;

    std::size_t batch_index = 0;
    for (auto batch = batches.next(); batch; batch = batches.next(), ++batch_index) {
      try {
        model.zero_grad();
        Tape tape;
        LossBreakdown breakdown;
        std::vector<CorrelationMatrix> corrs;
        Tensor logits;
        {
          Tape::Scope scope(tape);
          ForwardResult fwd =
              model.forward(batch->images, config.tap_stages, Mode::train);
          breakdown = joint_loss(fwd.logits, batch->labels, fwd.taps,
                                 config.lambda, &corrs);
          logits = fwd.logits;
        }
        tape.backward(breakdown.total);
        sgd_step(model, state, lr, config.momentum, config.weight_decay);

        softmax_sum += breakdown.softmax_loss.value();
        total_sum += breakdown.total.value();
        for (std::size_t t = 0; t < breakdown.mfd_per_stage.size(); ++t) {
          const auto& [stage, term] = breakdown.mfd_per_stage[t];
          mfd_sum[stage] += term.value();
          corr_sum[stage] += mean_abs_offdiag(corrs[t]);
        }
        correct += count_correct(logits, batch->labels);
        seen += batch->labels.size();
        ++steps;
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
    }

    MetricsRecord train_row;
    train_row.epoch = epoch;
    train_row.split = "train";
    train_row.softmax_loss = softmax_sum / static_cast<double>(steps);
    train_row.total_loss = total_sum / static_cast<double>(steps);
    train_row.accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    for (const auto& [stage, v] : mfd_sum) {
      train_row.mfd_per_stage[stage] = v / static_cast<double>(steps);
    }
    for (const auto& [stage, v] : corr_sum) {
      train_row.mean_abs_corr_per_stage[stage] = v / static_cast<double>(steps);
    }
    train_row.wall_seconds = seconds_since(epoch_start);
    result.metrics.push_back(std::move(train_row));

    const auto eval_start = std::chrono::steady_clock::now();
    MetricsRecord test_row = evaluate(model, test_set, config.tap_stages,
                                      config.batch_size, config.lambda);
    test_row.epoch = epoch;
    test_row.wall_seconds = seconds_since(eval_start);
    result.metrics.push_back(std::move(test_row));
  }
  return result;
}

MetricsRecord evaluate(Model& model, const Dataset& dataset,
                       const std::set<int>& tap_stages,
                       std::size_t batch_size, double lambda) {
  if (dataset.size() == 0) throw ValueError("evaluate: empty dataset");
  const std::size_t bs = std::min(batch_size, dataset.size());
  BatchStream batches(dataset, bs, 0, 0, AugmentationPolicy{},
                      /*drop_last=*/false, /*shuffled=*/false);

  MetricsRecord record;
  record.split = "test";
  double loss_sum = 0.0;
  std::map<int, double> mfd_sum, corr_sum;
  std::size_t correct = 0, seen = 0, corr_batches = 0;

  for (auto batch = batches.next(); batch; batch = batches.next()) {
    ForwardResult fwd = model.forward(batch->images, tap_stages, Mode::eval);
    const std::size_t b = batch->labels.size();
    loss_sum +=
        softmax_cross_entropy(fwd.logits, batch->labels).value() * double(b);
    correct += count_correct(fwd.logits, batch->labels);
    seen += b;
    if (b >= 2) {
      for (const auto& tap : fwd.taps) {
        CorrelationMatrix corr = correlation_matrix(tap);
        mfd_sum[tap.stage_id] += mfd_loss(corr).value();
        corr_sum[tap.stage_id] += mean_abs_offdiag(corr);
      }
      ++corr_batches;
    }
  }

  record.accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  record.softmax_loss = loss_sum / static_cast<double>(seen);
  double penalty = 0.0;
  for (const auto& [stage, v] : mfd_sum) {
    record.mfd_per_stage[stage] = v / static_cast<double>(corr_batches);
    penalty += record.mfd_per_stage[stage];
  }
  for (const auto& [stage, v] : corr_sum) {
    record.mean_abs_corr_per_stage[stage] = v / static_cast<double>(corr_batches);
  }
  record.total_loss = record.softmax_loss + lambda * penalty;
  return record;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRecord>& records,
                       const std::vector<int>& stages) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << "epoch,split,softmax_loss,total_loss,accuracy,wall_seconds";
    for (int s : stages) out << ",mfd_stage_" << s;
    for (int s : stages) out << ",meanabscorr_stage_" << s;
    out << '\n';
    // Stage statistics can be absent (no evaluable batch of 2+ samples);
    // those cells stay empty.
    auto put_stage = [&](const std::map<int, double>& m, int s) {
      out << ',';
      auto it = m.find(s);
      if (it != m.end()) out << fmt_double(it->second);
    };
    for (const auto& r : records) {
      out << r.epoch << ',' << r.split << ',' << fmt_double(r.softmax_loss)
          << ',' << fmt_double(r.total_loss) << ',' << fmt_double(r.accuracy)
          << ',' << fmt_double(r.wall_seconds);
      for (int s : stages) put_stage(r.mfd_per_stage, s);
      for (int s : stages) put_stage(r.mean_abs_corr_per_stage, s);
      out << '\n';
    }
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace decorr
