#include "deepnorm/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "deepnorm/errors.hpp"

namespace deepnorm {

namespace detail {

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  const char* op = "";
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap as_matrix(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatrixMap as_matrix(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MatrixMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_buffer(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return from_buffer(std::move(shape), Buffer(data.begin(), data.end()), requires_grad);
}

Tensor Tensor::from_buffer(Shape shape, Buffer data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in shape " + to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("tensor: access to undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<const double> Tensor::data() const { return impl().data; }

std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return impl().data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("at: rank mismatch for " + to_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw DimensionError("at: index out of range for " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl().data[flat];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool value) { impl().requires_grad = value; }

bool Tensor::is_leaf() const { return impl().grad_fn == nullptr; }

std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::grad_buffer() const {
  auto& i = impl();
  i.ensure_grad();
  return i.grad;
}

void Tensor::zero_grad() {
  auto& i = impl();
  if (!i.grad.empty()) std::fill(i.grad.begin(), i.grad.end(), 0.0);
}

void Tensor::backward() const {
  auto& root = impl();
  if (root.data.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(root.shape));
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      auto* child = node->grad_fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate buffers are created by the first consumer that writes into
  // them; a node whose buffer is still empty received no gradient and is
  // skipped, which is exact because every backward closure is linear.
  for (auto* t : order) {
    if (t->grad_fn) Buffer().swap(t->grad);
  }
  root.ensure_grad();
  root.grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* t = *it;
    if (!t->grad_fn || t->grad.empty()) continue;
    t->grad_fn->backward(OpOutput{t->data, t->grad});
    if (t != &root) Buffer().swap(t->grad);
  }
}

Tensor Tensor::detach() const {
  auto& i = impl();
  auto copy = std::make_shared<detail::TensorImpl>();
  copy->shape = i.shape;
  copy->data = i.data;
  return Tensor(std::move(copy));
}

Tensor Tensor::clone() const {
  auto t = detach();
  t.impl_->requires_grad = impl().requires_grad;
  return t;
}

Tensor Tensor::make_result(Shape shape, Buffer data, std::initializer_list<Tensor> inputs,
                           const char* op, BackwardFn backward) {
  auto out = from_buffer(std::move(shape), std::move(data), false);
  if (!t_grad_enabled) return out;
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || (in.defined() && in.requires_grad());
  if (!needs_grad) return out;

  auto node = std::make_shared<detail::Node>();
  node->op = op;
  node->backward = std::move(backward);
  for (const auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl_);
  }
  out.impl_->requires_grad = true;
  out.impl_->grad_fn = std::move(node);
  return out;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "add", [a, b](const OpOutput& o) {
    for (const auto* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = t->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "sub", [a, b](const OpOutput& o) {
    if (a.requires_grad()) {
      auto g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (b.requires_grad()) {
      auto g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "mul", [a, b](const OpOutput& o) {
    if (a.requires_grad()) {
      auto g = a.grad_buffer();
      auto y = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * y[i];
    }
    if (b.requires_grad()) {
      auto g = b.grad_buffer();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * x[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  const auto cols = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != cols) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
                         to_string(x.shape()));
  }
  auto xs = x.data();
  auto bs = bias.data();
  Buffer out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] + bs[i % cols];
  return Tensor::make_result(x.shape(), std::move(out), {x, bias}, "add_bias",
                             [x, bias, cols](const OpOutput& o) {
                               if (x.requires_grad()) {
                                 auto g = x.grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                               if (bias.requires_grad()) {
                                 auto g = bias.grad_buffer();
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % cols] += o.grad[i];
                               }
                             });
}

Tensor scale(const Tensor& x, double factor) {
  auto xs = x.data();
  Buffer out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, "scale", [x, factor](const OpOutput& o) {
    auto g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  auto xs = x.data();
  Buffer out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] + value;
  return Tensor::make_result(x.shape(), std::move(out), {x}, "add_scalar", [x](const OpOutput& o) {
    auto g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  auto xs = x.data();
  Buffer out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] > 0.0 ? xs[i] : 0.0;
  return Tensor::make_result(x.shape(), std::move(out), {x}, "relu", [x](const OpOutput& o) {
    auto g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (o.value[i] > 0.0) g[i] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const auto k = b.dim(0);
  const auto n = b.dim(1);
  const auto m = a.numel() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Buffer out(m * n);
  as_matrix(std::span<double>(out), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return Tensor::make_result(std::move(out_shape), std::move(out), {a, b}, "matmul",
                             [a, b, m, k, n](const OpOutput& o) {
                               auto g = as_matrix(o.grad, m, n);
                               if (a.requires_grad()) {
                                 as_matrix(a.grad_buffer(), m, k).noalias() +=
                                     g * as_matrix(b.data(), k, n).transpose();
                               }
                               if (b.requires_grad()) {
                                 as_matrix(b.grad_buffer(), k, n).noalias() +=
                                     as_matrix(a.data(), m, k).transpose() * g;
                               }
                             });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (!bias.defined()) return matmul(x, w);
  require_defined(x, "affine");
  require_defined(w, "affine");
  if (x.rank() < 2 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw DimensionError("affine: cannot multiply " + to_string(x.shape()) + " by " + to_string(w.shape()));
  }
  const auto k = w.dim(0);
  const auto n = w.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("affine: bias " + to_string(bias.shape()) + " does not match " + to_string(w.shape()));
  }
  const auto m = x.numel() / k;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(n);
  Buffer out(m * n);
  auto os = as_matrix(std::span<double>(out), m, n);
  os.noalias() = as_matrix(x.data(), m, k) * as_matrix(w.data(), k, n);
  os.rowwise() += as_matrix(bias.data(), 1, n).row(0);
  return Tensor::make_result(std::move(out_shape), std::move(out), {x, w, bias}, "affine",
                             [x, w, bias, m, k, n](const OpOutput& o) {
                               auto g = as_matrix(o.grad, m, n);
                               if (x.requires_grad()) {
                                 as_matrix(x.grad_buffer(), m, k).noalias() +=
                                     g * as_matrix(w.data(), k, n).transpose();
                               }
                               if (w.requires_grad()) {
                                 as_matrix(w.grad_buffer(), k, n).noalias() +=
                                     as_matrix(x.data(), m, k).transpose() * g;
                               }
                               if (bias.requires_grad()) {
                                 as_matrix(bias.grad_buffer(), 1, n).row(0) += g.colwise().sum();
                               }
                             });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_defined(a, "batched_matmul");
  require_defined(b, "batched_matmul");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("batched_matmul: cannot multiply " + to_string(a.shape()) + " by " +
                         to_string(b.shape()));
  }
  const auto batch = a.dim(0);
  const auto m = a.dim(1);
  const auto k = a.dim(2);
  const auto bk = transpose_b ? b.dim(2) : b.dim(1);
  const auto p = transpose_b ? b.dim(1) : b.dim(2);
  if (bk != k) {
    throw DimensionError("batched_matmul: inner dimensions differ in " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  Buffer out(batch * m * p);
  for (std::size_t i = 0; i < batch; ++i) {
    auto as = as_matrix(a.data().subspan(i * m * k, m * k), m, k);
    auto cs = as_matrix(std::span<double>(out).subspan(i * m * p, m * p), m, p);
    if (transpose_b) {
      cs.noalias() = as * as_matrix(b.data().subspan(i * p * k, p * k), p, k).transpose();
    } else {
      cs.noalias() = as * as_matrix(b.data().subspan(i * k * p, k * p), k, p);
    }
  }
  return Tensor::make_result(
      {batch, m, p}, std::move(out), {a, b}, "batched_matmul",
      [a, b, batch, m, k, p, transpose_b](const OpOutput& o) {
        const bool ga = a.requires_grad();
        const bool gb = b.requires_grad();
        auto a_grad = ga ? a.grad_buffer() : std::span<double>();
        auto b_grad = gb ? b.grad_buffer() : std::span<double>();
        for (std::size_t i = 0; i < batch; ++i) {
          auto g = as_matrix(o.grad.subspan(i * m * p, m * p), m, p);
          auto as = as_matrix(a.data().subspan(i * m * k, m * k), m, k);
          if (transpose_b) {
            auto bs = as_matrix(b.data().subspan(i * p * k, p * k), p, k);
            if (ga) as_matrix(a_grad.subspan(i * m * k, m * k), m, k).noalias() += g * bs;
            if (gb) as_matrix(b_grad.subspan(i * p * k, p * k), p, k).noalias() += g.transpose() * as;
          } else {
            auto bs = as_matrix(b.data().subspan(i * k * p, k * p), k, p);
            if (ga) as_matrix(a_grad.subspan(i * m * k, m * k), m, k).noalias() += g * bs.transpose();
            if (gb) as_matrix(b_grad.subspan(i * k * p, k * p), k, p).noalias() += as.transpose() * g;
          }
        }
      });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw DimensionError("transpose: expected a 2-D tensor, got " + to_string(a.shape()));
  const auto rows = a.dim(0);
  const auto cols = a.dim(1);
  Buffer out(rows * cols);
  as_matrix(std::span<double>(out), cols, rows) = as_matrix(a.data(), rows, cols).transpose();
  return Tensor::make_result({cols, rows}, std::move(out), {a}, "transpose", [a, rows, cols](const OpOutput& o) {
    as_matrix(a.grad_buffer(), rows, cols) += as_matrix(o.grad, cols, rows).transpose();
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, "reshape", [x](const OpOutput& o) {
    auto g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Softmax and reductions

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + to_string(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const auto len = s[axis];
  auto xs = x.data();
  Buffer out(xs.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const auto base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xs[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xs[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return Tensor::make_result(s, std::move(out), {x}, "softmax", [x, outer, inner, len](const OpOutput& o) {
    auto g = x.grad_buffer();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t in = 0; in < inner; ++in) {
        const auto base = a * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * inner] * o.value[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const auto idx = base + j * inner;
          g[idx] += o.value[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_result({1}, {total}, {x}, "sum", [x](const OpOutput& o) {
    auto g = x.grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  const double n = static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_result({1}, {total / n}, {x}, "mean", [x, n](const OpOutput& o) {
    auto g = x.grad_buffer();
    for (auto& v : g) v += o.grad[0] / n;
  });
}

namespace {

Shape drop_last(const Shape& s) {
  Shape out(s.begin(), s.end() - 1);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

Tensor mean_last(const Tensor& x) {
  require_defined(x, "mean_last");
  const auto cols = x.shape().back();
  const auto rows = x.numel() / cols;
  auto xs = x.data();
  Buffer out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += xs[r * cols + c];
    out[r] = total / static_cast<double>(cols);
  }
  return Tensor::make_result(drop_last(x.shape()), std::move(out), {x}, "mean_last",
                             [x, rows, cols](const OpOutput& o) {
                               auto g = x.grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double share = o.grad[r] / static_cast<double>(cols);
                                 for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += share;
                               }
                             });
}

Tensor std_last(const Tensor& x) {
  require_defined(x, "std_last");
  const auto cols = x.shape().back();
  const auto rows = x.numel() / cols;
  const double n = static_cast<double>(cols);
  auto xs = x.data();
  std::vector<double> means(rows);
  Buffer out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += xs[r * cols + c];
    const double mu = total / n;
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = xs[r * cols + c] - mu;
      sq += d * d;
    }
    means[r] = mu;
    out[r] = std::sqrt(sq / n);
  }
  return Tensor::make_result(drop_last(x.shape()), std::move(out), {x}, "std_last",
                             [x, rows, cols, n, means = std::move(means)](const OpOutput& o) {
                               auto g = x.grad_buffer();
                               auto xs = x.data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double sigma = o.value[r];
                                 if (sigma == 0.0) continue;  // subgradient 0 at a constant row
                                 const double k = o.grad[r] / (n * sigma);
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   g[r * cols + c] += k * (xs[r * cols + c] - means[r]);
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Embedding and head reshuffles

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, Shape out_shape) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + to_string(table.shape()));
  if (shape_numel(out_shape) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids cannot fill shape " +
                         to_string(out_shape));
  }
  const auto vocab = table.dim(0);
  const auto width = table.dim(1);
  auto ts = table.data();
  Buffer out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("embedding: token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(vocab));
    }
    std::copy_n(ts.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  out_shape.push_back(width);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return Tensor::make_result(std::move(out_shape), std::move(out), {table}, "embedding",
                             [table, width, saved = std::move(saved)](const OpOutput& o) {
                               auto g = table.grad_buffer();
                               for (std::size_t i = 0; i < saved.size(); ++i) {
                                 const auto row = static_cast<std::size_t>(saved[i]) * width;
                                 for (std::size_t c = 0; c < width; ++c) g[row + c] += o.grad[i * width + c];
                               }
                             });
}

namespace {

// Index in [batch, seq, heads*hd] for element (b, t, h, j).
struct HeadLayout {
  std::size_t batch, seq, heads, head_dim;
  std::size_t merged(std::size_t b, std::size_t t, std::size_t h, std::size_t j) const {
    return (b * seq + t) * heads * head_dim + h * head_dim + j;
  }
  std::size_t split(std::size_t b, std::size_t t, std::size_t h, std::size_t j) const {
    return ((b * heads + h) * seq + t) * head_dim + j;
  }
};

template <typename F>
void for_each_head_element(const HeadLayout& l, F&& f) {
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t t = 0; t < l.seq; ++t)
      for (std::size_t h = 0; h < l.heads; ++h)
        for (std::size_t j = 0; j < l.head_dim; ++j) f(l.merged(b, t, h, j), l.split(b, t, h, j));
}

}  // namespace

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_defined(x, "split_heads");
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + to_string(x.shape()) + " into " +
                         std::to_string(heads) + " heads");
  }
  const HeadLayout l{x.dim(0), x.dim(1), heads, x.dim(2) / heads};
  auto xs = x.data();
  Buffer out(xs.size());
  for_each_head_element(l, [&](std::size_t m, std::size_t s) { out[s] = xs[m]; });
  return Tensor::make_result({l.batch * heads, l.seq, l.head_dim}, std::move(out), {x}, "split_heads",
                             [x, l](const OpOutput& o) {
                               auto g = x.grad_buffer();
                               for_each_head_element(l, [&](std::size_t m, std::size_t s) { g[m] += o.grad[s]; });
                             });
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  require_defined(x, "merge_heads");
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: cannot merge " + to_string(x.shape()) + " over " +
                         std::to_string(heads) + " heads");
  }
  const HeadLayout l{x.dim(0) / heads, x.dim(1), heads, x.dim(2)};
  auto xs = x.data();
  Buffer out(xs.size());
  for_each_head_element(l, [&](std::size_t m, std::size_t s) { out[m] = xs[s]; });
  return Tensor::make_result({l.batch, l.seq, heads * l.head_dim}, std::move(out), {x}, "merge_heads",
                             [x, l](const OpOutput& o) {
                               auto g = x.grad_buffer();
                               for_each_head_element(l, [&](std::size_t m, std::size_t s) { g[s] += o.grad[m]; });
                             });
}

}  // namespace deepnorm
