#pragma once

// Dense row-major tensors of doubles with tape-free reverse-mode autodiff.
//
// A Tensor is a shared handle: copies alias the same storage, as with
// torch::Tensor. Each op that touches a tensor with requires_grad() records a
// node holding its inputs and a backward closure; Tensor::backward() walks the
// resulting DAG in reverse topological order. Gradients accumulate (+=) into
// leaf buffers until zero_grad() is called.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace deepnorm {

using Shape = std::vector<std::size_t>;

// 64-byte aligned allocation whose elements are left uninitialized by
// resize(n). The fixed alignment keeps Eigen's vectorized kernels on the same
// summation order from run to run, so results are bitwise reproducible.
template <class T>
struct BufferAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  BufferAllocator() = default;
  template <class U>
  BufferAllocator(const BufferAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <class U>
  bool operator==(const BufferAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, BufferAllocator<double>>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// View of an op result handed to its backward closure.
struct OpOutput {
  std::span<const double> value;
  std::span<const double> grad;
};

using BackwardFn = std::function<void(const OpOutput&)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  // Gradient of the last backward() pass; empty span if none was produced.
  std::span<const double> grad() const;
  // Allocates (zeroed) on first use. Intended for backward closures.
  std::span<double> grad_buffer() const;
  void zero_grad();

  // Accumulates into grad() of every leaf reachable from this scalar.
  // Intermediate gradients are released once propagated.
  void backward() const;

  // Same storage snapshot, no graph membership.
  Tensor detach() const;
  // Deep copy of the data; requires_grad preserved, no graph.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Builds the result of a custom differentiable op. The node is only
  // recorded when grad mode is on and some input requires grad.
  static Tensor make_result(Shape shape, Buffer data,
                            std::initializer_list<Tensor> inputs, const char* op,
                            BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  static Tensor from_buffer(Shape shape, Buffer data, bool requires_grad);
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise, identical shapes required.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// x + b where b is broadcast along the last axis of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor relu(const Tensor& x);

// A has rank >= 2 and its leading axes are flattened into rows; B is 2-D.
// Result shape is A.shape[:-1] + [B.cols].
Tensor matmul(const Tensor& a, const Tensor& b);
// matmul(x, w) + bias in one node; bias may be undefined.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias);

// Batched product of rank-3 tensors: [n, m, k] x [n, k, p] -> [n, m, p],
// or with transpose_b, [n, m, k] x [n, p, k]^T -> [n, m, p].
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reductions over the last axis; result drops that axis.
Tensor mean_last(const Tensor& x);
// Population (1/N) standard deviation over the last axis.
Tensor std_last(const Tensor& x);

// Rows of `table` ([vocab, dim]) selected by ids; result is out_shape + [dim].
// Backward scatter-adds into the selected rows.
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, Shape out_shape);

// [batch, seq, heads*head_dim] <-> [batch*heads, seq, head_dim].
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x, std::size_t heads);

}  // namespace deepnorm
