#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace davit {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Gradient recording is per thread, so inference threads never build graphs
// while a training thread does.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

struct TensorImpl;

// One recorded operation. `backward` reads the output gradient and
// accumulates into the gradients of `inputs`.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double>)> backward;
  std::string name;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;
  bool graph_released = false;
  std::shared_ptr<Node> grad_fn;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 tensor with optional reverse-mode gradient
/// tracking.
///
/// `Tensor` is a shared handle: copies refer to the same storage. Use
/// `clone()` for a deep copy. Values produced by ops are treated as
/// immutable; only leaf tensors (parameters, inputs) should be written
/// through `mutable_data()`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  /// calls; the recorded graph is released afterwards, and calling
  /// `backward()` again on the same result throws `GraphError`.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  // Internal: used by op implementations.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::initializer_list<const Tensor*> inputs,
                            std::function<void(std::span<const double>)> backward,
                            const char* name);
  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  void check_defined() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace davit
