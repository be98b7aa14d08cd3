#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "decorr/common.hpp"

namespace decorr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::unique_ptr<std::vector<double>> grad;  // allocated lazily
  bool requires_grad = false;
  bool is_leaf = true;
  Tape* tape = nullptr;            // tape that recorded the producing op
  std::uint64_t tape_generation = 0;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

// Contiguous row-major N-dimensional value with optional gradient tracking.
// Copies are shallow (shared storage); values are not mutated by operations.
// The gradient buffer and `values_mut` are the only mutation points, used by
// the optimizer and by running-statistics buffers.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  bool is_scalar() const { return size() == 1; }

  std::span<const double> values() const;
  // Direct write access for optimizer updates and stat buffers. Never call
  // this on a tensor that is part of a live taped graph.
  std::span<double> values_mut();

  double value() const;  // scalar tensors only
  double at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const;
  // Gradient buffer; allocates a zero buffer on first access for leaves.
  std::span<const double> grad() const;
  // True once a backward pass (or a grad() read) has materialized the buffer.
  bool has_grad_buffer() const;
  void zero_grad();

  // Value copy detached from any tape, with gradient tracking off.
  Tensor detach() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Operations executed inside an active Scope are recorded
// in execution order (topological by construction); backward() replays them
// in reverse, accumulating additively into requires_grad leaves. Non-leaf
// gradients are reset at the start of each backward pass, so calling
// backward twice doubles leaf gradients exactly. clear() consumes the tape:
// a subsequent backward over a stale loss throws.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  using BackwardFn = std::function<void(
      const std::vector<double>& out_grad,
      const std::vector<std::shared_ptr<detail::TensorImpl>>& inputs)>;

  void record(std::shared_ptr<detail::TensorImpl> output,
              std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
              BackwardFn fn);

  void backward(const Tensor& loss);
  void clear();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
};

namespace detail {

// Post-op pass over freshly computed values: applies the global f32 rounding
// mode and rejects non-finite results, naming the offending operation.
void finalize_values(std::vector<double>& values, const char* op);

double quantize(double v);

// Records `out = fn(inputs...)` on the active tape when gradients are being
// tracked through any input.
Tensor make_op_result(Shape shape, std::vector<double> values, const char* op,
                      std::vector<Tensor> inputs, Tape::BackwardFn fn);

}  // namespace detail

}  // namespace decorr
