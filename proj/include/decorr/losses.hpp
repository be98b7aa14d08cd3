#pragma once

#include <span>
#include <utility>
#include <vector>

#include "decorr/ops.hpp"
#include "decorr/tensor.hpp"

namespace decorr {

// Rank-4 activation block [batch, channels, height, width] captured at a
// stage boundary. Pearson statistics over a batch need b >= 2, and the
// off-diagonal penalty needs at least two channels.
struct StageActivations {
  Tensor tensor;
  int stage_id = 0;

  std::size_t batch() const { return tensor.shape()[0]; }
  std::size_t channels() const { return tensor.shape()[1]; }
  void validate() const;
};

// d x d matrix of Pearson coefficients between channel feature maps.
// Channels whose deviation energy falls below the zero-variance guard are
// listed in zero_variance_channels; every entry involving them (diagonal
// included) is exactly 0 and carries no gradient.
struct CorrelationMatrix {
  Tensor values;  // [d,d]; carries gradients when the activations did
  std::vector<std::size_t> zero_variance_channels;

  std::size_t dim() const { return values.shape()[0]; }
};

// Deviation-energy threshold below which a channel counts as zero-variance.
inline constexpr double kZeroVarianceGuard = 1e-12;

// Pearson correlation coefficient of two equal-length sequences (n >= 2).
// Either sequence having zero variance (guarded at kZeroVarianceGuard on the
// squared-deviation sum) yields exactly 0.
double pearson_scalar(std::span<const double> x, std::span<const double> y);

// Correlation matrix between channel feature maps observed across the batch:
// per-sample observations are the full h x w maps, deviations are taken
// against the per-channel elementwise batch mean, and each entry divides the
// summed inner products by the Frobenius norms of the stacked deviations.
// Differentiable with respect to the activations; bit-identical under batch
// permutation.
CorrelationMatrix correlation_matrix(const StageActivations& acts);

// Mean of squared off-diagonal coefficients: both ordered pairs are counted
// and the sum is normalized by d(d-1), so the result lies in [0,1].
Tensor mfd_loss(const CorrelationMatrix& corr);

// Mean over the batch of -ln softmax(logits)[label], stabilized by
// max-subtraction.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Joint objective: softmax term plus lambda times the summed per-stage
// decorrelation penalties.
struct LossBreakdown {
  Tensor softmax_loss;
  std::vector<std::pair<int, Tensor>> mfd_per_stage;  // ascending stage id
  double lambda = 0.0;
  Tensor total;
};

// With lambda == 0 the total IS the softmax tensor (bit-identical); the
// per-stage penalties are still computed from the supplied taps so callers
// can report them. Per-stage correlation matrices are returned through
// `correlations` when requested.
LossBreakdown joint_loss(const Tensor& logits, const std::vector<int>& labels,
                         const std::vector<StageActivations>& taps,
                         double lambda,
                         std::vector<CorrelationMatrix>* correlations = nullptr);

// Reporting statistic: mean of |F_ij| over i != j. Not differentiable.
double mean_abs_offdiag(const CorrelationMatrix& corr);

}  // namespace decorr
