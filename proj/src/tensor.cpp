#include "aag/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "aag/errors.hpp"

namespace aag {

std::size_t numel(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::atomic<std::uint64_t> g_seq{0};
std::atomic<bool> g_finite_check{false};
thread_local bool t_grad_enabled = true;

void check_dims(const Shape& dims) {
  for (auto d : dims) {
    if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_str(dims));
  }
}

}  // namespace

namespace detail {

std::uint64_t next_seq() { return ++g_seq; }
bool grad_enabled() { return t_grad_enabled; }

template <typename T>
Tensor<T> make_result(Shape dims, std::vector<T> data, std::string name,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>)> backward_fn) {
  if (g_finite_check.load(std::memory_order_relaxed)) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(data[i])) {
        throw NumericError(name + ": non-finite output at flat index " + std::to_string(i));
      }
    }
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->dims = std::move(dims);
  impl->data = std::move(data);
  bool any = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  }
  if (any) {
    auto fn = std::make_shared<GradFn<T>>();
    fn->seq = next_seq();
    fn->name = std::move(name);
    for (const auto& in : inputs) {
      if (in.defined()) fn->inputs.push_back(in.impl());
    }
    fn->backward = std::move(backward_fn);
    impl->requires_grad = true;
    impl->grad_fn = std::move(fn);
  }
  return Tensor<T>::wrap(std::move(impl));
}

}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void set_finite_check(bool enabled) { g_finite_check.store(enabled); }
bool finite_check_enabled() { return g_finite_check.load(); }

template <typename T>
Tensor<T> Tensor<T>::wrap(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& dims, bool requires_grad) {
  return full(dims, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& dims, T value, bool requires_grad) {
  check_dims(dims);
  return from_data(dims, std::vector<T>(aag::numel(dims), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(const Shape& dims, std::vector<T> values, bool requires_grad) {
  check_dims(dims);
  if (aag::numel(dims) != values.size()) {
    throw DimensionError("from_data: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(dims));
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->dims = dims;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::randn(const Shape& dims, std::mt19937_64& rng, double stddev,
                           bool requires_grad) {
  check_dims(dims);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(aag::numel(dims));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return from_data(dims, std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::uniform(const Shape& dims, std::mt19937_64& rng, double lo, double hi,
                             bool requires_grad) {
  check_dims(dims);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(aag::numel(dims));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return from_data(dims, std::move(v), requires_grad);
}

template <typename T>
const Shape& Tensor<T>::dims() const {
  if (!impl_) throw ArgumentError("use of undefined tensor");
  return impl_->dims;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& d = dims();
  if (axis >= d.size()) {
    throw ArgumentError("axis " + std::to_string(axis) + " out of range for " + shape_str(d));
  }
  return d[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return dims().empty() ? 0 : impl_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  dims();
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  dims();
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(dims()));
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& d = dims();
  if (index.size() != d.size()) throw DimensionError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= d[axis]) throw ArgumentError("at(): index out of range on axis " + std::to_string(axis));
    flat = flat * d[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  dims();
  if (impl_->grad_fn && !value) {
    throw ArgumentError("cannot clear requires_grad on a non-leaf tensor; use detach()");
  }
  impl_->requires_grad = value;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && impl_->grad.size() == impl_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  dims();
  return impl_->ensure_grad();
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  dims();
  return impl_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl_ && !impl_->grad_fn;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(dims(), impl_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto t = from_data(dims(), impl_->data, impl_->requires_grad && !impl_->grad_fn);
  return t;
}

template <typename T>
void Tensor<T>::backward() const {
  aag::backward(*this);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ArgumentError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + shape_str(loss.dims()));
  }
  if (!loss.requires_grad()) {
    throw ArgumentError("backward: loss does not depend on any tensor requiring grad");
  }
  using Impl = detail::TensorImpl<T>;
  Impl* root = loss.impl().get();
  if (!root->grad_fn) {
    root->ensure_grad()[0] += T(1);
    return;
  }

  std::vector<Impl*> nodes;
  std::unordered_set<Impl*> seen;
  std::vector<Impl*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Impl* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& in : n->grad_fn->inputs) {
      Impl* p = in.get();
      if (p->grad_fn && seen.insert(p).second) stack.push_back(p);
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Impl* a, const Impl* b) { return a->grad_fn->seq > b->grad_fn->seq; });

  for (Impl* n : nodes) n->grad.assign(n->data.size(), T(0));
  root->grad[0] = T(1);
  for (Impl* n : nodes) {
    n->grad_fn->backward(std::span<const T>(n->grad));
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template Tensor<float> detail::make_result(Shape, std::vector<float>, std::string,
                                           std::vector<Tensor<float>>,
                                           std::function<void(std::span<const float>)>);
template Tensor<double> detail::make_result(Shape, std::vector<double>, std::string,
                                            std::vector<Tensor<double>>,
                                            std::function<void(std::span<const double>)>);

}  // namespace aag
