#include "xformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace xf {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
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

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Impl>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  return {impl_->grad_buffer(), impl_->data.size()};
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return {impl_->grad_buffer(), impl_->data.size()};
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(impl_->shape, impl_->data);
  out.impl_->requires_grad = impl_->requires_grad && is_leaf();
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the tape.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* inputs = node->node ? &node->node->inputs : nullptr;
    if (inputs && next < inputs->size()) {
      Impl* child = (*inputs)[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* t = *it;
    if (t->node && !t->grad.empty()) t->node->backward(*t);
  }
  for (Impl* t : order) {
    if (t->node) {
      t->node.reset();
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> numeric_gradient(const std::function<T(const Tensor<T>&)>& f, Tensor<T>& x, T h) {
  NoGradGuard guard;
  Tensor<T> g(x.shape());
  auto values = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + h;
    const T plus = f(x);
    values[i] = saved - h;
    const T minus = f(x);
    values[i] = saved;
    g[i] = (plus - minus) / (T(2) * h);
  }
  return g;
}

template <typename T>
T relative_error(std::span<const T> a, std::span<const T> b, T floor) {
  if (a.size() != b.size()) throw DimensionError("relative_error: size mismatch");
  T diff = 0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> numeric_gradient(const std::function<float(const Tensor<float>&)>&,
                                        Tensor<float>&, float);
template Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>&,
                                         Tensor<double>&, double);
template float relative_error(std::span<const float>, std::span<const float>, float);
template double relative_error(std::span<const double>, std::span<const double>, double);

}  // namespace xf
