#include "decorr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace decorr {

void StageActivations::validate() const {
  if (!tensor.defined() || tensor.rank() != 4) {
    throw ShapeError("stage activations must be [b,d,h,w]");
  }
  if (stage_id < 0) throw ValueError("stage_id must be >= 0");
  if (tensor.shape()[0] < 2) {
    throw ValueError("stage " + std::to_string(stage_id) +
                     ": batch must be >= 2 for correlation statistics");
  }
  if (tensor.shape()[1] < 2) {
    throw ValueError("stage " + std::to_string(stage_id) +
                     ": at least 2 channels required");
  }
}

double pearson_scalar(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw ValueError("pearson_scalar: length mismatch");
  }
  const std::size_t n = x.size();
  if (n < 2) throw ValueError("pearson_scalar: need at least 2 observations");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx < kZeroVarianceGuard || syy < kZeroVarianceGuard) return 0.0;
  return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

CorrelationMatrix correlation_matrix(const StageActivations& acts) {
  acts.validate();
  const std::size_t d = acts.channels();

  Tensor mean_map = batch_mean_canonical(acts.tensor);
  Tensor deviations = sub(acts.tensor, mean_map);
  Tensor gram = deviation_gram(deviations);

  // Channels whose deviation energy is below the guard get a hard zero row
  // and column with no gradient through the masked entries.
  std::vector<std::size_t> zero_channels;
  std::vector<double> mask(d * d, 1.0), inv_mask(d * d, 0.0);
  {
    const auto gv = gram.values();
    std::vector<bool> dead(d, false);
    for (std::size_t i = 0; i < d; ++i) {
      if (gv[i * d + i] < kZeroVarianceGuard) {
        dead[i] = true;
        zero_channels.push_back(i);
      }
    }
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        if (dead[i] || dead[j]) {
          mask[i * d + j] = 0.0;
          inv_mask[i * d + j] = 1.0;
        }
      }
    }
  }
  Tensor mask_t = Tensor::from_data({d, d}, std::move(mask));
  Tensor inv_mask_t = Tensor::from_data({d, d}, std::move(inv_mask));

  Tensor norms = sqrt(diag_column(gram));                     // [d,1]
  Tensor denom = mul(norms, reshape(norms, {1, d}));          // [d,d]
  Tensor safe_denom = add(mul(denom, mask_t), inv_mask_t);    // masked -> 1
  Tensor coeffs = div(mul(gram, mask_t), safe_denom);

  return CorrelationMatrix{std::move(coeffs), std::move(zero_channels)};
}

Tensor mfd_loss(const CorrelationMatrix& corr) {
  if (!corr.values.defined() || corr.values.rank() != 2 ||
      corr.values.shape()[0] != corr.values.shape()[1]) {
    throw ShapeError("mfd_loss: expects a square correlation matrix");
  }
  const std::size_t d = corr.dim();
  if (d < 2) throw ValueError("mfd_loss: at least 2 channels required");
  std::vector<double> offdiag(d * d, 1.0);
  for (std::size_t i = 0; i < d; ++i) offdiag[i * d + i] = 0.0;
  Tensor offdiag_t = Tensor::from_data({d, d}, std::move(offdiag));
  Tensor penalized = sum_all(square(mul(corr.values, offdiag_t)));
  const double norm = 1.0 / static_cast<double>(d * (d - 1));
  return mul(penalized, Tensor::scalar(norm));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (!logits.defined() || logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy: expects logits [b,classes]");
  }
  const std::size_t b = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  if (labels.size() != b) {
    throw ValueError("softmax_cross_entropy: got " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(b));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(classes) + ")");
    }
  }
  const auto zv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(b * classes);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = &zv[i * classes];
    double m = row[0];
    for (std::size_t j = 1; j < classes; ++j) m = std::max(m, row[j]);
    double sum_exp = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      const double e = std::exp(row[j] - m);
      (*probs)[i * classes + j] = e;
      sum_exp += e;
    }
    const double inv = 1.0 / sum_exp;
    for (std::size_t j = 0; j < classes; ++j) (*probs)[i * classes + j] *= inv;
    loss += std::log(sum_exp) - (row[labels[i]] - m);
  }
  loss /= static_cast<double>(b);

  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  auto backward = [probs, labels_copy, b, classes](
                      const std::vector<double>& g,
                      const std::vector<std::shared_ptr<detail::TensorImpl>>& in) {
    auto& zi = *in[0];
    if (!zi.requires_grad) return;
    auto& gz = zi.ensure_grad();
    const double go = g[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < classes; ++j) {
        double p = (*probs)[i * classes + j];
        if (static_cast<std::size_t>((*labels_copy)[i]) == j) p -= 1.0;
        gz[i * classes + j] += go * p;
      }
    }
  };
  return detail::make_op_result({1}, {loss}, "softmax_cross_entropy", {logits},
                                std::move(backward));
}

LossBreakdown joint_loss(const Tensor& logits, const std::vector<int>& labels,
                         const std::vector<StageActivations>& taps,
                         double lambda,
                         std::vector<CorrelationMatrix>* correlations) {
  if (lambda < 0.0) throw ValueError("joint_loss: lambda must be >= 0");
  if (lambda > 0.0 && taps.empty()) {
    throw ValueError("joint_loss: lambda > 0 requires at least one tapped stage");
  }
  for (std::size_t i = 1; i < taps.size(); ++i) {
    if (taps[i].stage_id <= taps[i - 1].stage_id) {
      throw ValueError("joint_loss: taps must be in ascending stage order");
    }
  }

  LossBreakdown out;
  out.lambda = lambda;
  try {
    out.softmax_loss = softmax_cross_entropy(logits, labels);
  } catch (const NumericError& e) {
    throw NumericError(std::string("softmax term: ") + e.what());
  }

  Tensor penalty_sum;
  for (const auto& tap : taps) {
    try {
      CorrelationMatrix corr = correlation_matrix(tap);
      Tensor term = mfd_loss(corr);
      out.mfd_per_stage.emplace_back(tap.stage_id, term);
      penalty_sum = penalty_sum.defined() ? add(penalty_sum, term) : term;
      if (correlations) correlations->push_back(std::move(corr));
    } catch (const NumericError& e) {
      throw NumericError("mfd term stage " + std::to_string(tap.stage_id) +
                         ": " + e.what());
    }
  }

  if (lambda == 0.0 || !penalty_sum.defined()) {
    out.total = out.softmax_loss;
  } else {
    out.total = add(out.softmax_loss, mul(Tensor::scalar(lambda), penalty_sum));
  }
  return out;
}

double mean_abs_offdiag(const CorrelationMatrix& corr) {
  const std::size_t d = corr.dim();
  if (d < 2) throw ValueError("mean_abs_offdiag: at least 2 channels required");
  const auto v = corr.values.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (i != j) acc += std::abs(v[i * d + j]);
    }
  }
  return acc / static_cast<double>(d * (d - 1));
}

}  // namespace decorr
