#include "decorr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace decorr {

namespace {

using detail::make_op_result;
using detail::TensorImpl;
using Inputs = std::vector<std::shared_ptr<TensorImpl>>;

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw Error(std::string(op) + ": undefined operand");
}

// Right-aligned broadcast result shape.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Per-output-dim element strides into an operand, 0 where it broadcasts.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t d = in.size() - 1 - i;
    const std::size_t od = out.size() - 1 - i;
    strides[od] = in[d] == 1 ? 0 : stride;
    stride *= in[d];
  }
  return strides;
}

// Walks every output position of a broadcast binary op, yielding the flat
// offsets into both operands.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, oa, ob);
    for (std::size_t r = rank; r-- > 0;) {
      if (++idx[r] < out[r]) {
        oa += sa[r];
        ob += sb[r];
        break;
      }
      idx[r] = 0;
      oa -= sa[r] * (out[r] - 1);
      ob -= sb[r] * (out[r] - 1);
    }
  }
}

enum class BinOp { add, sub, mul, div };

const char* name_of(BinOp op) {
  switch (op) {
    case BinOp::add: return "add";
    case BinOp::sub: return "sub";
    case BinOp::mul: return "mul";
    case BinOp::div: return "div";
  }
  return "?";
}

double apply(BinOp op, double a, double b) {
  switch (op) {
    case BinOp::add: return a + b;
    case BinOp::sub: return a - b;
    case BinOp::mul: return a * b;
    case BinOp::div: return a / b;
  }
  return 0.0;
}

Tensor binary_op(BinOp op, const Tensor& a, const Tensor& b) {
  const char* opname = name_of(op);
  check_defined(a, opname);
  check_defined(b, opname);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), opname);
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();

  const bool same = a.shape() == b.shape();
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);

  if (op == BinOp::div) {
    if (same) {
      for (std::size_t i = 0; i < n; ++i) {
        if (bv[i] == 0.0) throw NumericError("div: division by exact zero");
      }
    } else {
      for (double v : bv) {
        if (v == 0.0) throw NumericError("div: division by exact zero");
      }
    }
  }

  if (same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = apply(op, av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t oa, std::size_t ob) {
                         out[o] = apply(op, av[oa], bv[ob]);
                       });
  }

  auto backward = [op, out_shape, sa, sb, same](const std::vector<double>& g,
                                                const Inputs& in) {
    auto& ai = *in[0];
    auto& bi = *in[1];
    const bool need_a = ai.requires_grad;
    const bool need_b = bi.requires_grad;
    auto* ga = need_a ? &ai.ensure_grad() : nullptr;
    auto* gb = need_b ? &bi.ensure_grad() : nullptr;
    const auto& avv = ai.values;
    const auto& bvv = bi.values;
    auto accum = [&](std::size_t o, std::size_t oa, std::size_t ob) {
      const double go = g[o];
      switch (op) {
        case BinOp::add:
          if (ga) (*ga)[oa] += go;
          if (gb) (*gb)[ob] += go;
          break;
        case BinOp::sub:
          if (ga) (*ga)[oa] += go;
          if (gb) (*gb)[ob] -= go;
          break;
        case BinOp::mul:
          if (ga) (*ga)[oa] += go * bvv[ob];
          if (gb) (*gb)[ob] += go * avv[oa];
          break;
        case BinOp::div: {
          const double bb = bvv[ob];
          if (ga) (*ga)[oa] += go / bb;
          if (gb) (*gb)[ob] -= go * avv[oa] / (bb * bb);
          break;
        }
      }
    };
    if (same) {
      for (std::size_t i = 0; i < g.size(); ++i) accum(i, i, i);
    } else {
      for_each_broadcast(out_shape, sa, sb, accum);
    }
  };

  return make_op_result(out_shape, std::move(out), opname, {a, b},
                        std::move(backward));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinOp::div, a, b); }

Tensor relu(const Tensor& x) {
  check_defined(x, "relu");
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto backward = [](const std::vector<double>& g, const Inputs& in) {
    auto& xi = *in[0];
    if (!xi.requires_grad) return;
    auto& gx = xi.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xi.values[i] > 0.0) gx[i] += g[i];
    }
  };
  return make_op_result(x.shape(), std::move(out), "relu", {x},
                        std::move(backward));
}

Tensor square(const Tensor& x) {
  check_defined(x, "square");
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * xv[i];
  auto backward = [](const std::vector<double>& g, const Inputs& in) {
    auto& xi = *in[0];
    if (!xi.requires_grad) return;
    auto& gx = xi.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * xi.values[i] * g[i];
  };
  return make_op_result(x.shape(), std::move(out), "square", {x},
                        std::move(backward));
}

Tensor sqrt(const Tensor& x) {
  check_defined(x, "sqrt");
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (xv[i] < 0.0) throw NumericError("sqrt: negative input");
    out[i] = std::sqrt(xv[i]);
  }
  auto roots = std::make_shared<std::vector<double>>(out);
  auto backward = [roots](const std::vector<double>& g, const Inputs& in) {
    auto& xi = *in[0];
    if (!xi.requires_grad) return;
    auto& gx = xi.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      // Zero upstream gradient contributes nothing even at the root's
      // unbounded-derivative point x = 0.
      if (g[i] != 0.0) gx[i] += g[i] * 0.5 / (*roots)[i];
    }
  };
  return make_op_result(x.shape(), std::move(out), "sqrt", {x},
                        std::move(backward));
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined(x, "reshape");
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  auto backward = [](const std::vector<double>& g, const Inputs& in) {
    auto& xi = *in[0];
    if (!xi.requires_grad) return;
    auto& gx = xi.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  };
  return make_op_result(std::move(shape), std::move(out), "reshape", {x},
                        std::move(backward));
}

namespace {

Tensor reduce_op(const Tensor& x, std::vector<std::size_t> axes, bool keepdims,
                 bool take_mean) {
  const char* opname = take_mean ? "mean" : "sum";
  check_defined(x, opname);
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  std::vector<bool> reduced(rank, false);
  if (axes.empty()) {
    reduced.assign(rank, true);
  } else {
    for (std::size_t a : axes) {
      if (a >= rank) throw ShapeError(std::string(opname) + ": axis out of range");
      reduced[a] = true;
    }
  }

  Shape out_shape;
  for (std::size_t i = 0; i < rank; ++i) {
    if (!reduced[i]) {
      out_shape.push_back(in_shape[i]);
    } else if (keepdims) {
      out_shape.push_back(1);
    }
  }
  if (out_shape.empty()) out_shape = {1};

  double count = 1.0;
  for (std::size_t i = 0; i < rank; ++i) {
    if (reduced[i]) count *= static_cast<double>(in_shape[i]);
  }
  const double scale = take_mean ? 1.0 / count : 1.0;

  // Element stride into the output for each input dim (0 where reduced).
  std::vector<std::size_t> out_stride(rank, 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = rank; i-- > 0;) {
      if (!reduced[i]) {
        out_stride[i] = stride;
        stride *= in_shape[i];
      }
    }
  }

  const auto xv = x.values();
  std::vector<double> out(shape_numel(out_shape), 0.0);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oo = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[oo] += xv[i];
    for (std::size_t r = rank; r-- > 0;) {
      if (++idx[r] < in_shape[r]) {
        oo += out_stride[r];
        break;
      }
      idx[r] = 0;
      oo -= out_stride[r] * (in_shape[r] - 1);
    }
  }
  if (take_mean) {
    for (double& v : out) v *= scale;
  }

  auto backward = [in_shape, out_stride, rank, scale](
                      const std::vector<double>& g, const Inputs& in) {
    auto& xi = *in[0];
    if (!xi.requires_grad) return;
    auto& gx = xi.ensure_grad();
    std::vector<std::size_t> bidx(rank, 0);
    std::size_t boo = 0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += g[boo] * scale;
      for (std::size_t r = rank; r-- > 0;) {
        if (++bidx[r] < in_shape[r]) {
          boo += out_stride[r];
          break;
        }
        bidx[r] = 0;
        boo -= out_stride[r] * (in_shape[r] - 1);
      }
    }
  };

  return make_op_result(out_shape, std::move(out), opname, {x},
                        std::move(backward));
}

}  // namespace

Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims) {
  return reduce_op(x, std::move(axes), keepdims, false);
}

Tensor mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdims) {
  return reduce_op(x, std::move(axes), keepdims, true);
}

Tensor sum_all(const Tensor& x) { return reduce_op(x, {}, false, false); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions disagree, " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto backward = [m, k, n](const std::vector<double>& g, const Inputs& in) {
    auto& ai = *in[0];
    auto& bi = *in[1];
    if (ai.requires_grad) {
      auto& ga = ai.ensure_grad();
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = &g[i * n];
          const double* brow = &bi.values[p * n];
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bi.requires_grad) {
      auto& gb = bi.ensure_grad();
      // dB = A^T * G
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < m; ++i) {
          const double aip = ai.values[i * k + p];
          const double* grow = &g[i * n];
          double* gbrow = &gb[p * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  };
  return make_op_result({m, n}, std::move(out), "matmul", {a, b},
                        std::move(backward));
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  check_defined(input, "conv2d");
  check_defined(kernel, "conv2d");
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d: expects input [b,c,h,w] and kernel [co,ci,kh,kw]");
  }
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  const std::size_t b = input.shape()[0], ci = input.shape()[1];
  const std::size_t h = input.shape()[2], w = input.shape()[3];
  const std::size_t co = kernel.shape()[0], kci = kernel.shape()[1];
  const std::size_t kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (kci != ci) {
    throw ShapeError("conv2d: kernel input channels " + std::to_string(kci) +
                     " != input channels " + std::to_string(ci));
  }
  const std::size_t hp = h + 2 * padding, wp = w + 2 * padding;
  if (kh > hp || kw > wp) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = (hp - kh) / stride + 1;
  const std::size_t ow = (wp - kw) / stride + 1;

  // Zero-padded copy keeps the accumulation loops branch-free.
  auto padded = std::make_shared<std::vector<double>>(b * ci * hp * wp, 0.0);
  {
    const auto iv = input.values();
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t c = 0; c < ci; ++c) {
        const double* src = &iv[(n * ci + c) * h * w];
        double* dst = &(*padded)[(n * ci + c) * hp * wp + padding * wp + padding];
        for (std::size_t y = 0; y < h; ++y) {
          std::copy(src + y * w, src + (y + 1) * w, dst + y * wp);
        }
      }
    }
  }

  const auto kv = kernel.values();
  std::vector<double> out(b * co * oh * ow, 0.0);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      double* oplane = &out[(n * co + oc) * oh * ow];
      for (std::size_t c = 0; c < ci; ++c) {
        const double* iplane = &(*padded)[(n * ci + c) * hp * wp];
        const double* kplane = &kv[(oc * ci + c) * kh * kw];
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const double kval = kplane[i * kw + j];
            if (kval == 0.0) continue;
            for (std::size_t y = 0; y < oh; ++y) {
              const double* irow = iplane + (y * stride + i) * wp + j;
              double* orow = oplane + y * ow;
              for (std::size_t x = 0; x < ow; ++x) {
                orow[x] += kval * irow[x * stride];
              }
            }
          }
        }
      }
    }
  }

  auto backward = [=](const std::vector<double>& g, const Inputs& in) {
    auto& ii = *in[0];
    auto& ki = *in[1];
    if (ki.requires_grad) {
      auto& gk = ki.ensure_grad();
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t oc = 0; oc < co; ++oc) {
          const double* gplane = &g[(n * co + oc) * oh * ow];
          for (std::size_t c = 0; c < ci; ++c) {
            const double* iplane = &(*padded)[(n * ci + c) * hp * wp];
            double* gkplane = &gk[(oc * ci + c) * kh * kw];
            for (std::size_t i = 0; i < kh; ++i) {
              for (std::size_t j = 0; j < kw; ++j) {
                double acc = 0.0;
                for (std::size_t y = 0; y < oh; ++y) {
                  const double* irow = iplane + (y * stride + i) * wp + j;
                  const double* grow = gplane + y * ow;
                  for (std::size_t x = 0; x < ow; ++x) {
                    acc += grow[x] * irow[x * stride];
                  }
                }
                gkplane[i * kw + j] += acc;
              }
            }
          }
        }
      }
    }
    if (ii.requires_grad) {
      std::vector<double> gpad(b * ci * hp * wp, 0.0);
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t oc = 0; oc < co; ++oc) {
          const double* gplane = &g[(n * co + oc) * oh * ow];
          for (std::size_t c = 0; c < ci; ++c) {
            double* gpplane = &gpad[(n * ci + c) * hp * wp];
            const double* kplane = &ki.values[(oc * ci + c) * kh * kw];
            for (std::size_t i = 0; i < kh; ++i) {
              for (std::size_t j = 0; j < kw; ++j) {
                const double kval = kplane[i * kw + j];
                if (kval == 0.0) continue;
                for (std::size_t y = 0; y < oh; ++y) {
                  double* gprow = gpplane + (y * stride + i) * wp + j;
                  const double* grow = gplane + y * ow;
                  for (std::size_t x = 0; x < ow; ++x) {
                    gprow[x * stride] += kval * grow[x];
                  }
                }
              }
            }
          }
        }
      }
      auto& gi = ii.ensure_grad();
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t c = 0; c < ci; ++c) {
          const double* src = &gpad[(n * ci + c) * hp * wp + padding * wp + padding];
          double* dst = &gi[(n * ci + c) * h * w];
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) dst[y * w + x] += src[y * wp + x];
          }
        }
      }
    }
  };

  return make_op_result({b, co, oh, ow}, std::move(out), "conv2d",
                        {input, kernel}, std::move(backward));
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  check_defined(x, "max_pool2d");
  if (x.rank() != 4) throw ShapeError("max_pool2d: expects [b,c,h,w]");
  if (kernel < 1 || stride < 1) {
    throw ValueError("max_pool2d: kernel and stride must be >= 1");
  }
  const std::size_t b = x.shape()[0], c = x.shape()[1];
  const std::size_t h = x.shape()[2], w = x.shape()[3];
  if (kernel > h || kernel > w) {
    throw ShapeError("max_pool2d: kernel larger than input");
  }
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;
  const auto xv = x.values();
  std::vector<double> out(b * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = &xv[(n * c + ch) * h * w];
      const std::size_t pbase = (n * c + ch) * h * w;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          for (std::size_t i = 0; i < kernel; ++i) {
            for (std::size_t j = 0; j < kernel; ++j) {
              const std::size_t yy = y * stride + i, xx = xo * stride + j;
              const double v = plane[yy * w + xx];
              if (v > best) {
                best = v;
                best_at = pbase + yy * w + xx;
              }
            }
          }
          const std::size_t o = ((n * c + ch) * oh + y) * ow + xo;
          out[o] = best;
          (*argmax)[o] = best_at;
        }
      }
    }
  }
  auto backward = [argmax](const std::vector<double>& g, const Inputs& in) {
    auto& xi = *in[0];
    if (!xi.requires_grad) return;
    auto& gx = xi.ensure_grad();
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
  };
  return make_op_result({b, c, oh, ow}, std::move(out), "max_pool2d", {x},
                        std::move(backward));
}

namespace {

// Sorting the addends fixes a canonical summation order, making the rounded
// result independent of how the caller ordered them.
double canonical_sum(std::vector<double>& buf) {
  std::sort(buf.begin(), buf.end());
  double acc = 0.0;
  for (double v : buf) acc += v;
  return acc;
}

}  // namespace

Tensor batch_mean_canonical(const Tensor& x) {
  check_defined(x, "batch_mean_canonical");
  if (x.rank() < 1) throw ShapeError("batch_mean_canonical: rank >= 1 required");
  const std::size_t b = x.shape()[0];
  const std::size_t rest = x.size() / b;
  const auto xv = x.values();
  std::vector<double> out(rest);
  std::vector<double> buf(b);
  for (std::size_t p = 0; p < rest; ++p) {
    for (std::size_t k = 0; k < b; ++k) buf[k] = xv[k * rest + p];
    out[p] = canonical_sum(buf) / static_cast<double>(b);
  }
  Shape out_shape = x.shape();
  out_shape[0] = 1;
  auto backward = [b, rest](const std::vector<double>& g, const Inputs& in) {
    auto& xi = *in[0];
    if (!xi.requires_grad) return;
    auto& gx = xi.ensure_grad();
    const double inv = 1.0 / static_cast<double>(b);
    for (std::size_t k = 0; k < b; ++k) {
      for (std::size_t p = 0; p < rest; ++p) gx[k * rest + p] += g[p] * inv;
    }
  };
  return make_op_result(std::move(out_shape), std::move(out),
                        "batch_mean_canonical", {x}, std::move(backward));
}

Tensor deviation_gram(const Tensor& deviations) {
  check_defined(deviations, "deviation_gram");
  if (deviations.rank() != 4) {
    throw ShapeError("deviation_gram: expects [b,d,h,w]");
  }
  const std::size_t b = deviations.shape()[0], d = deviations.shape()[1];
  const std::size_t hw = deviations.shape()[2] * deviations.shape()[3];
  const auto dv = deviations.values();
  std::vector<double> out(d * d, 0.0);
  std::vector<double> partials(b);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      for (std::size_t k = 0; k < b; ++k) {
        const double* pi = &dv[(k * d + i) * hw];
        const double* pj = &dv[(k * d + j) * hw];
        double acc = 0.0;
        for (std::size_t s = 0; s < hw; ++s) acc += pi[s] * pj[s];
        partials[k] = acc;
      }
      const double v = canonical_sum(partials);
      out[i * d + j] = v;
      out[j * d + i] = v;
    }
  }
  auto backward = [b, d, hw](const std::vector<double>& g, const Inputs& in) {
    auto& di = *in[0];
    if (!di.requires_grad) return;
    auto& gd = di.ensure_grad();
    // d/dD[k,i,s] = sum_j (g[i,j] + g[j,i]) * D[k,j,s]
    std::vector<double> sym(d * d);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) sym[i * d + j] = g[i * d + j] + g[j * d + i];
    }
    for (std::size_t k = 0; k < b; ++k) {
      for (std::size_t i = 0; i < d; ++i) {
        double* grow = &gd[(k * d + i) * hw];
        for (std::size_t j = 0; j < d; ++j) {
          const double c = sym[i * d + j];
          if (c == 0.0) continue;
          const double* drow = &di.values[(k * d + j) * hw];
          for (std::size_t s = 0; s < hw; ++s) grow[s] += c * drow[s];
        }
      }
    }
  };
  return make_op_result({d, d}, std::move(out), "deviation_gram", {deviations},
                        std::move(backward));
}

Tensor diag_column(const Tensor& m) {
  check_defined(m, "diag_column");
  if (m.rank() != 2 || m.shape()[0] != m.shape()[1]) {
    throw ShapeError("diag_column: expects a square matrix");
  }
  const std::size_t d = m.shape()[0];
  const auto mv = m.values();
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = mv[i * d + i];
  auto backward = [d](const std::vector<double>& g, const Inputs& in) {
    auto& mi = *in[0];
    if (!mi.requires_grad) return;
    auto& gm = mi.ensure_grad();
    for (std::size_t i = 0; i < d; ++i) gm[i * d + i] += g[i];
  };
  return make_op_result({d, 1}, std::move(out), "diag_column", {m},
                        std::move(backward));
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum, double eps) {
  check_defined(x, "batch_norm2d");
  if (x.rank() != 4) throw ShapeError("batch_norm2d: expects [b,c,h,w]");
  const std::size_t b = x.shape()[0], c = x.shape()[1];
  const std::size_t h = x.shape()[2], w = x.shape()[3];
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c) {
    throw ShapeError("batch_norm2d: parameter size does not match channels");
  }
  const Tensor gamma_r = reshape(gamma, {1, c, 1, 1});
  const Tensor beta_r = reshape(beta, {1, c, 1, 1});

  if (training) {
    if (b < 2) {
      throw ValueError("batch_norm2d: training mode requires batch >= 2");
    }
    Tensor mu = mean(x, {0, 2, 3}, true);
    Tensor centered = sub(x, mu);
    Tensor var = mean(square(centered), {0, 2, 3}, true);
    Tensor y = add(mul(div(centered, sqrt(add(var, Tensor::scalar(eps)))), gamma_r),
                   beta_r);
    // Fold batch statistics into the running buffers (unbiased variance),
    // outside the taped graph.
    const double n = static_cast<double>(b * h * w);
    const double unbias = n / (n - 1.0);
    auto rm = running_mean.values_mut();
    auto rv = running_var.values_mut();
    const auto muv = mu.values();
    const auto varv = var.values();
    for (std::size_t i = 0; i < c; ++i) {
      rm[i] = detail::quantize((1.0 - momentum) * rm[i] + momentum * muv[i]);
      rv[i] = detail::quantize((1.0 - momentum) * rv[i] + momentum * varv[i] * unbias);
    }
    return y;
  }

  // Eval mode: normalize with the running statistics as constants.
  std::vector<double> inv_std(c), mean_c(c);
  const auto rm = running_mean.values();
  const auto rv = running_var.values();
  for (std::size_t i = 0; i < c; ++i) {
    mean_c[i] = rm[i];
    inv_std[i] = 1.0 / std::sqrt(rv[i] + eps);
  }
  Tensor mu_c = Tensor::from_data({1, c, 1, 1}, std::move(mean_c));
  Tensor istd_c = Tensor::from_data({1, c, 1, 1}, std::move(inv_std));
  return add(mul(mul(sub(x, mu_c), istd_c), gamma_r), beta_r);
}

}  // namespace decorr
