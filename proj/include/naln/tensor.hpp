#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace naln {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

// Gradient buffers handed to a backward rule, one per input. A buffer is
// empty when the corresponding input does not need a gradient.
using GradBuffers = std::vector<std::vector<double>>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradBuffers& grad_in)>;

struct TapeNode {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
  std::shared_ptr<TapeNode> node;  // null for leaves
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// Copies are shallow: two Tensor handles may refer to the same storage.
/// Use `clone()` for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutating data of a tensor that is part of a recorded graph invalidates
  // that graph; only parameters are updated in place, between steps.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Detached deep copy.
  Tensor clone() const;
  /// Shares storage but drops the graph link.
  Tensor detach() const;

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  bool is_leaf() const;
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

  /// Builds a result tensor and, when grad mode is on and any input needs a
  /// gradient, records the backward rule on the tape.
  static Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                            std::vector<Tensor> inputs, detail::BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

bool grad_enabled();

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace naln
