#include "rmx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rmx {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
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

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<std::size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  auto n = shape_numel(shape);
  if (n != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(n) +
                     " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::int64_t Tensor::dim(int axis) const {
  int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::grad_tensor() const {
  if (impl_->grad.empty()) return Tensor(shape(), 0.0);
  return Tensor(shape(), impl_->grad);
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), impl_->data);
}

void Tensor::assign(const Tensor& other) {
  if (other.shape() != shape()) {
    throw ShapeError("assign: " + shape_str(other.shape()) + " into " + shape_str(shape()));
  }
  impl_->data = other.impl_->data;
}

void Tensor::fill(double value) { std::fill(impl_->data.begin(), impl_->data.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(), [](double v) { return std::isfinite(v); });
}

// --- tape ------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local std::vector<std::string> g_layer_stack;
}  // namespace

void Tape::record(std::string op, BackwardFn fn) {
  if (consumed_) throw Error("tape already replayed; record a new forward pass");
  entries_.push_back({std::move(op), std::move(fn)});
}

void Tape::backward(Tensor root) {
  if (consumed_) throw Error("tape already replayed; backward may run once per forward pass");
  consumed_ = true;
  if (root.numel() != 1) throw ShapeError("backward root must be a scalar, got " + shape_str(root.shape()));
  root.grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  entries_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

LayerScope::LayerScope(std::string name) { g_layer_stack.push_back(std::move(name)); }
LayerScope::~LayerScope() { g_layer_stack.pop_back(); }

std::string current_layer_path() {
  std::string path;
  for (const auto& s : g_layer_stack) {
    if (!path.empty()) path += '.';
    path += s;
  }
  return path;
}

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool should_record(const std::vector<Tensor>& inputs) {
  if (!g_active_tape) return false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

void check_finite(const Tensor& out, const char* op) {
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      std::string where = current_layer_path();
      throw NumericError((where.empty() ? std::string() : where + ": ") + op +
                         " produced a non-finite value at flat index " + std::to_string(i) + " of " +
                         shape_str(out.shape()));
    }
  }
}

void record(const char* op, Tensor& out, Tape::BackwardFn fn) {
  out.set_requires_grad(true);
  g_active_tape->record(op, std::move(fn));
}

}  // namespace detail

}  // namespace rmx
