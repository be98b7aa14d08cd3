#include "decorr/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace decorr {

namespace {

std::atomic<Precision> g_precision{Precision::f64};
thread_local Tape* g_active_tape = nullptr;

}  // namespace

void set_default_precision(Precision p) { g_precision.store(p); }
Precision default_precision() { return g_precision.load(); }

Precision precision_from_string(const std::string& s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

std::string to_string(Precision p) {
  return p == Precision::f64 ? "f64" : "f32";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& TensorImpl::ensure_grad() {
  if (!grad) grad = std::make_unique<std::vector<double>>(values.size(), 0.0);
  return *grad;
}

double quantize(double v) {
  if (g_precision.load() == Precision::f32) {
    return static_cast<double>(static_cast<float>(v));
  }
  return v;
}

void finalize_values(std::vector<double>& values, const char* op) {
  const bool f32 = g_precision.load() == Precision::f32;
  for (double& v : values) {
    if (f32) v = static_cast<double>(static_cast<float>(v));
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value produced");
    }
  }
}

}  // namespace detail

static std::shared_ptr<detail::TensorImpl> new_impl(Shape shape,
                                                    std::vector<double> values,
                                                    bool requires_grad,
                                                    bool finalized = false) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  if (!finalized) detail::finalize_values(impl->values, "tensor");
  return impl;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return wrap(new_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), value);
  return wrap(new_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  return wrap(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

static const detail::TensorImpl& deref(
    const std::shared_ptr<detail::TensorImpl>& p) {
  if (!p) throw Error("use of an undefined tensor");
  return *p;
}

const Shape& Tensor::shape() const { return deref(impl_).shape; }

std::size_t Tensor::size() const { return deref(impl_).values.size(); }

std::span<const double> Tensor::values() const {
  return {deref(impl_).values.data(), deref(impl_).values.size()};
}

std::span<double> Tensor::values_mut() {
  auto& impl = const_cast<detail::TensorImpl&>(deref(impl_));
  return {impl.values.data(), impl.values.size()};
}

double Tensor::value() const {
  if (size() != 1) {
    throw ShapeError("value() requires a scalar tensor, got shape " +
                     shape_str(shape()));
  }
  return impl_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  const auto& impl = deref(impl_);
  if (idx.size() != impl.shape.size()) {
    throw ShapeError("index rank mismatch");
  }
  std::size_t flat = 0;
  std::size_t dim = 0;
  for (std::size_t i : idx) {
    if (i >= impl.shape[dim]) throw ShapeError("index out of bounds");
    flat = flat * impl.shape[dim] + i;
    ++dim;
  }
  return impl.values[flat];
}

bool Tensor::requires_grad() const { return deref(impl_).requires_grad; }

std::span<const double> Tensor::grad() const {
  auto& impl = const_cast<detail::TensorImpl&>(deref(impl_));
  if (!impl.requires_grad) {
    throw Error("grad() on a tensor that does not track gradients");
  }
  auto& g = impl.ensure_grad();
  return {g.data(), g.size()};
}

bool Tensor::has_grad_buffer() const {
  return deref(impl_).grad != nullptr;
}

void Tensor::zero_grad() {
  auto& impl = const_cast<detail::TensorImpl&>(deref(impl_));
  if (impl.grad) std::fill(impl.grad->begin(), impl.grad->end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& impl = deref(impl_);
  return from_data(impl.shape, impl.values, false);
}

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::TensorImpl> output,
                  std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
                  BackwardFn fn) {
  output->requires_grad = true;
  output->is_leaf = false;
  output->tape = this;
  output->tape_generation = generation_;
  nodes_.push_back(Node{std::move(output), std::move(inputs), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined loss");
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_str(loss.shape()));
  }
  auto impl = loss.impl();
  if (impl->is_leaf || impl->tape != this ||
      impl->tape_generation != generation_ || nodes_.empty()) {
    throw Error("backward: loss was not produced on this tape (consumed?)");
  }
  // Reset non-leaf gradients so repeated backward passes accumulate exactly
  // one gradient per pass into the leaves.
  for (auto& node : nodes_) {
    if (node.output->grad) {
      std::fill(node.output->grad->begin(), node.output->grad->end(), 0.0);
    }
  }
  impl->ensure_grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->grad) continue;  // not reached from the loss
    it->fn(*it->output->grad, it->inputs);
  }
}

void Tape::clear() {
  nodes_.clear();
  ++generation_;
}

namespace detail {

Tensor make_op_result(Shape shape, std::vector<double> values, const char* op,
                      std::vector<Tensor> inputs, Tape::BackwardFn fn) {
  finalize_values(values, op);
  auto out = new_impl(std::move(shape), std::move(values), false, true);
  Tape* tape = Tape::active();
  if (tape) {
    bool track = false;
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) track = true;
    }
    if (track) {
      std::vector<std::shared_ptr<TensorImpl>> impls;
      impls.reserve(inputs.size());
      for (const auto& in : inputs) impls.push_back(in.impl());
      tape->record(out, std::move(impls), std::move(fn));
    }
  }
  return Tensor::wrap(std::move(out));
}

}  // namespace detail

}  // namespace decorr
