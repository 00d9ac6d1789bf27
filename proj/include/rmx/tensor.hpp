#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rmx {

using Shape = std::vector<std::int64_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for incompatible extents; the message names the offending dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when an operation produces NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};

/// Dense row-major 64-bit tensor.
///
/// Tensor is a shared handle: copies alias the same storage, which is what
/// lets parameters be referenced from the tape and the optimizer at once.
/// Use clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double* ptr() { return impl_->data.data(); }
  const double* ptr() const { return impl_->data.data(); }
  double item() const;
  double& operator[](std::int64_t i) { return impl_->data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value = true);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first access.
  std::span<double> grad_buffer() const;
  void zero_grad();
  /// The gradient as a standalone tensor (zeros when absent).
  Tensor grad_tensor() const;

  Tensor clone() const;
  Tensor detach() const { return clone(); }
  /// Same data, new shape; shares nothing with the source.
  Tensor reshaped(Shape shape) const;
  void assign(const Tensor& other);
  void fill(double value);

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }
  bool all_finite() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations.
///
/// Each entry holds a backward rule that reads the output gradient and
/// accumulates into the inputs. Entries are appended in execution order, so
/// reverse iteration is a valid reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string op, BackwardFn fn);
  /// Seeds d(root)/d(root) = 1 and runs every recorded rule in reverse.
  /// A tape can be replayed only once.
  void backward(Tensor root);
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::string op;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Makes `tape` the recording target for this thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Named scope used in numeric error messages ("enc2.block1: gelu produced NaN").
class LayerScope {
 public:
  explicit LayerScope(std::string name);
  ~LayerScope();
  LayerScope(const LayerScope&) = delete;
  LayerScope& operator=(const LayerScope&) = delete;
};

std::string current_layer_path();

namespace detail {

/// True when an active tape exists and any input requires grad.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(const std::vector<Tensor>& inputs);

/// Throws NumericError naming `op` and the current layer if `out` holds NaN/Inf.
void check_finite(const Tensor& out, const char* op);

/// Marks `out` as differentiable and appends its backward rule.
void record(const char* op, Tensor& out, Tape::BackwardFn fn);

}  // namespace detail

}  // namespace rmx
