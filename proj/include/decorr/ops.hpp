#pragma once

#include <cstddef>
#include <vector>

#include "decorr/tensor.hpp"

namespace decorr {

// Elementwise arithmetic with right-aligned broadcasting (an extent of 1
// stretches; missing leading dims are implied 1). Division by an exact zero
// raises NumericError rather than producing Inf.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }

Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

// Value-preserving shape change; element count must match.
Tensor reshape(const Tensor& x, Shape shape);

// Reductions over an axis set, in flat row-major order. An empty axis list
// reduces everything to a scalar.
Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims);
Tensor mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdims);
Tensor sum_all(const Tensor& x);

// 2-D matrix product [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation convolution (no kernel flip). input [b,c_in,h,w],
// kernel [c_out,c_in,kh,kw]; zero padding; output spatial extent
// floor((h + 2*padding - kh)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

// Max pooling, no padding; gradient routes to the first maximum in scan
// order so backward is deterministic under ties.
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

// Mean over axis 0 with an order-canonical (sorted) summation, so the result
// is bit-identical under any permutation of the leading axis. [b,...] -> [1,...].
Tensor batch_mean_canonical(const Tensor& x);

// Gram matrix of per-channel deviation maps: for d [b,d,h,w], output [d,d]
// with G[i][j] = sum_k <d[k,i,:,:], d[k,j,:,:]>. The per-sample inner
// products use fixed scan order; the sum over the batch is order-canonical,
// and the matrix is exactly symmetric by construction.
Tensor deviation_gram(const Tensor& deviations);

// Diagonal of a square matrix as a column: [d,d] -> [d,1].
Tensor diag_column(const Tensor& m);

// Batch normalization over [b,c,h,w]. Training mode normalizes with batch
// statistics (requires b >= 2) and folds them into the running buffers with
// the given momentum; eval mode normalizes with the running buffers.
// Gradients flow to x, gamma and beta in both modes.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

}  // namespace decorr
