#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace aag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& dims);
std::string shape_str(const Shape& dims);

enum class Mode { Train, Eval };

namespace detail {

template <typename T>
struct TensorImpl;

// One recorded operation. `seq` is drawn from a process-wide counter when the
// node is created, so a node's inputs always carry smaller sequence numbers
// than the node itself; sorting by `seq` yields a topological order.
template <typename T>
struct GradFn {
  std::uint64_t seq = 0;
  std::string name;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives the gradient of the output and accumulates into the inputs.
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape dims;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
  std::shared_ptr<GradFn<T>> grad_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

std::uint64_t next_seq();
bool grad_enabled();

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// When enabled, every operation verifies its output is finite and throws
// NumericError naming the operation otherwise. Off by default.
void set_finite_check(bool enabled);
bool finite_check_enabled();

// Dense row-major tensor. Copies are shallow: two handles copied from each
// other refer to the same storage and graph node, like a shared array.
// Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(const Shape& dims, bool requires_grad = false);
  static Tensor full(const Shape& dims, T value, bool requires_grad = false);
  static Tensor from_data(const Shape& dims, std::vector<T> values,
                          bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor randn(const Shape& dims, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(const Shape& dims, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& dims() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return dims().size(); }
  std::size_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  // Gradient buffer; all zeros when no gradient has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();
  bool is_leaf() const;

  // Graph-free copy of the values.
  Tensor detach() const;
  Tensor clone() const;

  // Reverse-mode sweep from this scalar; see aag::backward.
  void backward() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl<T>> impl);

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Runs the reverse sweep from a single-element loss. Gradients of leaves are
// accumulated, so calling backward twice without zeroing doubles them;
// gradients of intermediate nodes are recomputed from zero on every call.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

// Wraps freshly computed output values and records a graph node when any
// input takes part in differentiation.
template <typename T>
Tensor<T> make_result(Shape dims, std::vector<T> data, std::string name,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>)> backward_fn);

}  // namespace detail

}  // namespace aag
