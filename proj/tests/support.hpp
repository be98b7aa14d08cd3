#pragma once

// Shared test helpers: deterministic random tensors, a central
// finite-difference gradient checker, the flatten-and-correlate oracle, and
// temp-directory plumbing. Oracles here are written directly from the
// defining formulas and never call into the code paths they check.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "decorr/rng.hpp"
#include "decorr/tensor.hpp"

namespace testsupport {

inline decorr::Tensor random_tensor(decorr::Shape shape, decorr::Rng& rng,
                                    bool requires_grad = false, double lo = -1.0,
                                    double hi = 1.0) {
  std::vector<double> v(decorr::shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return decorr::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Central finite differences with step h on every (or a sample of)
// coordinates of each leaf. The loss closure must recompute the forward
// value from the leaves' current values. Returns the worst
// |analytic - numeric| / max(|analytic|, |numeric|, floor) over all checked
// coordinates.
struct GradCheck {
  double worst_rel = 0.0;
  std::size_t checked = 0;
};

inline GradCheck check_gradients(const std::function<decorr::Tensor()>& make_loss,
                                 std::vector<decorr::Tensor> leaves,
                                 double step = 1e-4,
                                 std::size_t max_coords_per_leaf = 0,
                                 decorr::Rng* sampler = nullptr) {
  for (auto& leaf : leaves) leaf.zero_grad();
  decorr::Tape tape;
  decorr::Tensor loss;
  {
    decorr::Tape::Scope scope(tape);
    loss = make_loss();
  }
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }

  GradCheck result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].values_mut();
    std::vector<std::size_t> coords;
    if (max_coords_per_leaf == 0 || values.size() <= max_coords_per_leaf) {
      for (std::size_t i = 0; i < values.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < max_coords_per_leaf; ++k) {
        coords.push_back(sampler ? sampler->integer(values.size())
                                 : (k * values.size()) / max_coords_per_leaf);
      }
    }
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = make_loss().value();
      values[i] = saved - step;
      const double down = make_loss().value();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[l][i];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-3});
      result.worst_rel = std::max(result.worst_rel, rel);
      ++result.checked;
    }
  }
  return result;
}

// Step-refined variant for deep compositions whose higher derivatives are
// large (the Pearson normalization near low-variance channels): a
// coordinate passes once the central-difference estimate converges to the
// analytic value at some step in the ladder. A wrong analytic gradient
// never converges, so refinement does not mask real defects.
inline GradCheck check_gradients_refined(
    const std::function<decorr::Tensor()>& make_loss,
    std::vector<decorr::Tensor> leaves,
    const std::vector<double>& steps = {1e-4, 1e-5, 1e-6, 1e-7},
    double tol = 1e-5, std::size_t max_coords_per_leaf = 0,
    decorr::Rng* sampler = nullptr) {
  for (auto& leaf : leaves) leaf.zero_grad();
  decorr::Tape tape;
  decorr::Tensor loss;
  {
    decorr::Tape::Scope scope(tape);
    loss = make_loss();
  }
  tape.backward(loss);

  GradCheck result;
  for (auto& leaf : leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.values_mut();
    std::vector<std::size_t> coords;
    if (max_coords_per_leaf == 0 || values.size() <= max_coords_per_leaf) {
      for (std::size_t i = 0; i < values.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < max_coords_per_leaf; ++k) {
        coords.push_back(sampler ? sampler->integer(values.size())
                                 : (k * values.size()) / max_coords_per_leaf);
      }
    }
    for (std::size_t i : coords) {
      const double a = analytic[i];
      double best = std::numeric_limits<double>::infinity();
      for (double step : steps) {
        const double saved = values[i];
        values[i] = saved + step;
        const double up = make_loss().value();
        values[i] = saved - step;
        const double down = make_loss().value();
        values[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        best = std::min(best, std::abs(a - numeric) /
                                  std::max({std::abs(a), std::abs(numeric), 1e-3}));
        if (best < tol) break;
      }
      result.worst_rel = std::max(result.worst_rel, best);
      ++result.checked;
    }
  }
  return result;
}

// Direct transcription of the Pearson correlation formula: deviations from
// the sample means, normalized by the product of root squared-deviation
// sums.
inline double oracle_pearson(const std::vector<double>& x,
                             const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= double(n);
  my /= double(n);
  double num = 0.0, dx2 = 0.0, dy2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (x[i] - mx) * (y[i] - my);
    dx2 += (x[i] - mx) * (x[i] - mx);
    dy2 += (y[i] - my) * (y[i] - my);
  }
  if (dx2 == 0.0 || dy2 == 0.0) return 0.0;
  return num / (std::sqrt(dx2) * std::sqrt(dy2));
}

// Flatten-and-correlate oracle for the feature-map correlation matrix:
// per-channel deviations against the elementwise batch mean, flattened to
// b*h*w vectors, correlated pairwise with oracle_pearson.
inline std::vector<double> oracle_correlation_matrix(
    const std::vector<double>& acts, std::size_t b, std::size_t d,
    std::size_t hw) {
  std::vector<double> mean(d * hw, 0.0);
  for (std::size_t k = 0; k < b; ++k) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t s = 0; s < hw; ++s) {
        mean[c * hw + s] += acts[(k * d + c) * hw + s];
      }
    }
  }
  for (double& v : mean) v /= double(b);

  std::vector<std::vector<double>> dev(d, std::vector<double>(b * hw));
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t k = 0; k < b; ++k) {
      for (std::size_t s = 0; s < hw; ++s) {
        dev[c][k * hw + s] = acts[(k * d + c) * hw + s] - mean[c * hw + s];
      }
    }
  }

  std::vector<double> corr(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double e_i = 0.0, e_j = 0.0;
      for (double v : dev[i]) e_i += v * v;
      for (double v : dev[j]) e_j += v * v;
      if (e_i < 1e-12 || e_j < 1e-12) {
        corr[i * d + j] = 0.0;  // zero-variance convention
      } else {
        corr[i * d + j] = oracle_pearson(dev[i], dev[j]);
      }
    }
  }
  return corr;
}

// RAII temp directory under the system temp root.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("decorr_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testsupport
