#include "davit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace davit {

namespace {
thread_local bool g_grad_enabled = true;

#ifdef DAVIT_CHECK_FINITE
bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}
#endif
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::vector<double>& detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {
void validate_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}
}  // namespace

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  auto n = static_cast<size_t>(shape_numel(shape));
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

void Tensor::check_defined() const {
  if (!impl_) throw std::logic_error("operation on an undefined tensor");
}

const Shape& Tensor::shape() const {
  check_defined();
  return impl_->shape;
}

int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data().size()); }

std::span<const double> Tensor::data() const {
  check_defined();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  check_defined();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank does not match " + shape_str(s));
  int64_t flat = 0;
  size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) throw ShapeError("index out of range on axis " + std::to_string(axis));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

bool Tensor::requires_grad() const {
  check_defined();
  return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
  check_defined();
  if (impl_->grad_fn && !flag) throw GraphError("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const {
  check_defined();
  return impl_->grad_fn == nullptr;
}

bool Tensor::has_grad() const {
  check_defined();
  return !impl_->grad.empty();
}

std::span<const double> Tensor::grad() const {
  check_defined();
  if (impl_->grad.empty()) throw GraphError("tensor has no gradient");
  return impl_->grad;
}

void Tensor::zero_grad() {
  check_defined();
  impl_->grad.clear();
}

Tensor Tensor::detach() const {
  check_defined();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad && impl_->grad_fn == nullptr;
  return t;
}

Tensor Tensor::reshape(Shape new_shape) const {
  check_defined();
  validate_shape(new_shape);
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  auto src = impl_;
  return make_result(
      std::move(new_shape), impl_->data, {this},
      [src](std::span<const double> g) {
        auto& gb = src->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      },
      "reshape");
}

Tensor Tensor::make_result(Shape shape, std::vector<double> data,
                           std::initializer_list<const Tensor*> inputs,
                           std::function<void(std::span<const double>)> backward,
                           const char* name) {
#ifdef DAVIT_CHECK_FINITE
  bool inputs_finite = true;
  for (const Tensor* in : inputs) inputs_finite = inputs_finite && all_finite(in->data());
  if (inputs_finite && !all_finite(data)) {
    throw std::runtime_error(std::string(name) + " produced a non-finite value from finite inputs");
  }
#endif
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool track = false;
  if (GradMode::enabled()) {
    for (const Tensor* in : inputs) track = track || in->requires_grad();
  }
  if (track) {
    auto node = std::make_shared<detail::Node>();
    for (const Tensor* in : inputs) {
      if (in->requires_grad()) node->inputs.push_back(in->impl_);
    }
    node->backward = std::move(backward);
    node->name = name;
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

void Tensor::backward() const {
  check_defined();
  if (numel() != 1) {
    throw GraphError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!impl_->grad_fn) {
    if (impl_->graph_released) throw GraphError("backward() on a released graph");
    if (!impl_->requires_grad) throw GraphError("backward() on a tensor that does not require grad");
    impl_->grad_buffer()[0] += 1.0;
    return;
  }

  // Iterative post-order DFS gives a topological order. The order holds
  // owning references because releasing a node drops its inputs.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<detail::TensorImpl>, size_t>> stack;
  stack.emplace_back(impl_, 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    detail::TensorImpl* t = top.first.get();
    if (t->graph_released) throw GraphError("backward() through a released graph");
    if (t->grad_fn && top.second < t->grad_fn->inputs.size()) {
      auto child = t->grad_fn->inputs[top.second++];
      if (seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  impl_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = it->get();
    if (!t->grad_fn) continue;
    auto node = t->grad_fn;
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    node->backward(t->grad);
    node->backward = nullptr;
    node->inputs.clear();
    t->grad_fn.reset();
    t->graph_released = true;
    // Non-leaf gradients are scratch space.
    std::vector<double>().swap(t->grad);
  }
}

}  // namespace davit
