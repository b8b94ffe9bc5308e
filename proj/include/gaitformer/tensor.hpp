#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record a backward closure on the result; `backward()` on a
// scalar result walks the recorded graph in reverse topological order and
// accumulates into the `grad` buffer of every leaf that requires gradients.
// Matrix products are delegated to Eigen.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gaitformer/errors.hpp"

namespace gaitformer::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node's gradient; accumulates into parents.
  std::function<void(std::span<const T>)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  std::span<T> ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("at(): index rank mismatch for " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) off = off * node_->shape[d++] + i;
    return node_->value.at(off);
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Detached copy sharing no graph history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  void backward() const;

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(std::span<const T>)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any && grad_enabled()) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& p, std::span<const T> g) {
  if (!p->requires_grad) return;
  auto dst = p->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;
template <typename T>
using MMap = Eigen::Map<MatR<T>>;

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline void check_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
}

// dst[out index] = src[permuted index]; accumulates when `add` is set.
template <typename T>
void permute_into(std::span<const T> src, const Shape& in_shape, const std::vector<std::size_t>& perm,
                  std::span<T> dst, bool add) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  std::vector<std::size_t> idx(r, 0);
  const std::size_t n = src.size();
  if (r == 0) {
    if (n) dst[0] = add ? dst[0] + src[0] : src[0];
    return;
  }
  // Innermost axis handled as a strided run.
  const std::size_t last = out_shape[r - 1];
  const std::size_t last_stride = stride[r - 1];
  std::size_t off = 0;
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t k = 0; k < last; ++k) {
      const T v = src[off + k * last_stride];
      if (add)
        dst[o + k] += v;
      else
        dst[o + k] = v;
    }
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(n->grad);
  }
  // Release intermediate buffers; leaves keep their accumulated gradients.
  for (Node<T>* n : order) {
    if (!n->is_leaf()) std::vector<T>().swap(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool suffix = sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - sb.size());
  if (!suffix) throw ShapeError("add: shapes " + shape_str(sa) + " and " + shape_str(sb) + " are incompatible");
  const std::size_t inner = b.size();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % inner];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(sa, std::move(out), "add", {pa, pb}, [pa, pb, inner](std::span<const T> g) {
    detail::accumulate(pa, g);
    if (pb->requires_grad) {
      auto dst = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i % inner] += g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  std::vector<T> out(a.size());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {pa, pb}, [pa, pb](std::span<const T> g) {
    if (pa->requires_grad) {
      auto dst = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto dst = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {pa}, [pa, s](std::span<const T> g) {
    if (!pa->requires_grad) return;
    auto dst = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
  });
}

// y = f(x) elementwise with derivative df(x).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df, const char* name) {
  std::vector<T> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), name, {px}, [px, df](std::span<const T> g) {
    if (!px->requires_grad) return;
    auto dst = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * df(px->value[i]);
  });
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return unary(x, gelu_value<T>, gelu_derivative<T>, "gelu");
}

template <typename T>
T sigmoid_value(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, sigmoid_value<T>, [](T v) {
    const T s = sigmoid_value(v);
    return s * (T(1) - s);
  }, "sigmoid");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = std::accumulate(a.data().begin(), a.data().end(), T(0));
  auto pa = a.node();
  return detail::make_result<T>({}, {s}, "sum", {pa}, [pa](std::span<const T> g) {
    if (!pa->requires_grad) return;
    auto dst = pa->ensure_grad();
    for (auto& v : dst) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Mean over one axis; the axis is removed from the result shape.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  detail::check_axis(a.shape(), axis, "mean_axis");
  const auto sp = detail::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(sp.outer * sp.inner, T(0));
  auto ad = a.data();
  const T inv = T(1) / static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += ad[(o * sp.len + l) * sp.inner + i];
  for (auto& v : out) v *= inv;
  auto pa = a.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "mean_axis", {pa},
                                [pa, sp, inv](std::span<const T> g) {
                                  if (!pa->requires_grad) return;
                                  auto dst = pa->ensure_grad();
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t l = 0; l < sp.len; ++l)
                                      for (std::size_t i = 0; i < sp.inner; ++i)
                                        dst[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i] * inv;
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  auto pa = a.node();
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {pa},
                                [pa](std::span<const T> g) { detail::accumulate(pa, g); });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> perm) {
  const Shape& s = a.shape();
  std::vector<std::size_t> check = perm;
  std::sort(check.begin(), check.end());
  bool valid = perm.size() == s.size();
  for (std::size_t i = 0; valid && i < check.size(); ++i) valid = check[i] == i;
  if (!valid) throw ShapeError("permute: invalid permutation for shape " + shape_str(s));
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];
  std::vector<T> out(a.size());
  detail::permute_into<T>(a.data(), s, perm, out, false);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  auto pa = a.node();
  return detail::make_result<T>(out_shape, std::move(out), "permute", {pa},
                                [pa, out_shape, inverse](std::span<const T> g) {
                                  if (!pa->requires_grad) return;
                                  detail::permute_into<T>(g, out_shape, inverse, pa->ensure_grad(), true);
                                });
}

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, std::move(perm));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::check_axis(s0, axis, "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = s0;
    if (a.size() != b.size()) throw ShapeError("concat: " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(s0));
    out_shape[axis] += p.dim(axis);
  }
  const auto sp = detail::split_axis(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * sp.inner;
    auto d = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(d.begin() + o * w, d.begin() + (o + 1) * w, out.begin() + o * sp.len * sp.inner + offset);
    offset += w;
    widths.push_back(w);
    nodes.push_back(p.node());
  }
  const std::size_t row = sp.len * sp.inner;
  return detail::make_result<T>(out_shape, std::move(out), "concat", nodes,
                                [nodes, widths, sp, row](std::span<const T> g) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    if (nodes[k]->requires_grad) {
                                      auto dst = nodes[k]->ensure_grad();
                                      for (std::size_t o = 0; o < sp.outer; ++o)
                                        for (std::size_t i = 0; i < widths[k]; ++i)
                                          dst[o * widths[k] + i] += g[o * row + off + i];
                                    }
                                    off += widths[k];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [..., M, K] x [K, N] -> [..., M, N], or batched [G, M, K] x [G, K, N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::CMap;
  using detail::MMap;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return ShapeError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) + " are incompatible");
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const bool batched = sb.size() == 3;
  if (batched && (sa.size() != 3 || sa[0] != sb[0])) throw mismatch();
  if (!batched && sb.size() != 2) throw mismatch();
  const std::size_t K = sa.back();
  if (sb[sb.size() - 2] != K) throw mismatch();
  const std::size_t N = sb.back();
  const std::size_t G = batched ? sa[0] : 1;
  const std::size_t M = batched ? sa[1] : a.size() / K;
  Shape out_shape = sa;
  out_shape.back() = N;
  std::vector<T> out(G * M * N);
  const auto Mi = static_cast<Eigen::Index>(M), Ki = static_cast<Eigen::Index>(K),
             Ni = static_cast<Eigen::Index>(N);
  for (std::size_t g = 0; g < G; ++g) {
    CMap<T> A(a.data().data() + g * M * K, Mi, Ki);
    CMap<T> B(b.data().data() + g * K * N, Ki, Ni);
    MMap<T> C(out.data() + g * M * N, Mi, Ni);
    C.noalias() = A * B;
  }
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "matmul", {pa, pb},
                                [pa, pb, G, M, K, N, Mi, Ki, Ni, batched](std::span<const T> g) {
                                  if (pa->requires_grad) {
                                    auto dst = pa->ensure_grad();
                                    for (std::size_t k = 0; k < G; ++k) {
                                      CMap<T> dC(g.data() + k * M * N, Mi, Ni);
                                      CMap<T> B(pb->value.data() + k * K * N, Ki, Ni);
                                      MMap<T> dA(dst.data() + k * M * K, Mi, Ki);
                                      dA.noalias() += dC * B.transpose();
                                    }
                                  }
                                  if (pb->requires_grad) {
                                    auto dst = pb->ensure_grad();
                                    for (std::size_t k = 0; k < G; ++k) {
                                      CMap<T> dC(g.data() + k * M * N, Mi, Ni);
                                      CMap<T> A(pa->value.data() + k * M * K, Mi, Ki);
                                      MMap<T> dB(dst.data() + (batched ? k * K * N : 0), Ki, Ni);
                                      dB.noalias() += A.transpose() * dC;
                                    }
                                  }
                                });
}

// x · W + b over the last axis of x.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Normalization and attention helpers

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& a, std::size_t axis) {
  detail::check_axis(a.shape(), axis, "softmax_axis");
  const auto sp = detail::split_axis(a.shape(), axis);
  std::vector<T> out(a.size());
  auto ad = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = ad[base];
      for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, ad[base + l * sp.inner]);
      T z = T(0);
      for (std::size_t l = 0; l < sp.len; ++l) {
        const T e = std::exp(ad[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
    }
  }
  auto pa = a.node();
  auto result = detail::make_result<T>(a.shape(), std::move(out), "softmax", {pa}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward_fn = [pa, sp, self](std::span<const T> g) {
      if (!pa->requires_grad) return;
      auto y = self.lock();
      auto dst = pa->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.len * sp.inner + i;
          T dot = T(0);
          for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y->value[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t k = base + l * sp.inner;
            dst[k] += y->value[k] * (g[k] - dot);
          }
        }
      }
    };
  }
  return result;
}

// Normalizes over the last axis then applies gamma * x_hat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t D = x.shape().back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                     " and beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.size() / D;
  auto xd = x.data();
  auto gd = gamma.data(), bd = beta.data();
  std::vector<T> xhat(x.size()), rstd(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * D;
    T m = T(0);
    for (std::size_t j = 0; j < D; ++j) m += row[j];
    m /= static_cast<T>(D);
    T v = T(0);
    for (std::size_t j = 0; j < D; ++j) v += (row[j] - m) * (row[j] - m);
    v /= static_cast<T>(D);
    rstd[r] = T(1) / std::sqrt(v + eps);
    for (std::size_t j = 0; j < D; ++j) {
      const T h = (row[j] - m) * rstd[r];
      xhat[r * D + j] = h;
      out[r * D + j] = gd[j] * h + bd[j];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), "layer_norm", {px, pg, pb},
      [px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd), D, rows](std::span<const T> g) {
        if (pb->requires_grad) {
          auto dst = pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < D; ++j) dst[j] += g[r * D + j];
        }
        if (pg->requires_grad) {
          auto dst = pg->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < D; ++j) dst[j] += g[r * D + j] * xhat[r * D + j];
        }
        if (px->requires_grad) {
          auto dst = px->ensure_grad();
          const auto& gam = pg->value;
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < D; ++j) {
              const T d = g[r * D + j] * gam[j];
              mean_d += d;
              mean_dx += d * xhat[r * D + j];
            }
            mean_d /= static_cast<T>(D);
            mean_dx /= static_cast<T>(D);
            for (std::size_t j = 0; j < D; ++j) {
              const T d = g[r * D + j] * gam[j];
              dst[r * D + j] += rstd[r] * (d - mean_d - xhat[r * D + j] * mean_dx);
            }
          }
        }
      });
}

inline constexpr double kRowNormFloor = 1e-12;

// Scales every row (last axis) to unit Euclidean norm. Rows with norm below
// 1e-12 pass through unscaled; their count is written to `degenerate_rows`.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, std::size_t* degenerate_rows = nullptr) {
  if (x.rank() < 1) throw ShapeError("l2_normalize_rows: scalar input");
  const std::size_t D = x.shape().back();
  const std::size_t rows = D ? x.size() / D : 0;
  auto xd = x.data();
  std::vector<T> out(x.size()), inv_norm(rows);
  std::size_t flagged = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T n2 = T(0);
    for (std::size_t j = 0; j < D; ++j) n2 += xd[r * D + j] * xd[r * D + j];
    const T n = std::sqrt(n2);
    if (n < T(kRowNormFloor)) {
      inv_norm[r] = T(0);
      ++flagged;
      for (std::size_t j = 0; j < D; ++j) out[r * D + j] = xd[r * D + j];
    } else {
      inv_norm[r] = T(1) / n;
      for (std::size_t j = 0; j < D; ++j) out[r * D + j] = xd[r * D + j] * inv_norm[r];
    }
  }
  if (degenerate_rows) *degenerate_rows = flagged;
  auto px = x.node();
  auto result = detail::make_result<T>(x.shape(), std::move(out), "l2_normalize_rows", {px}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward_fn = [px, self, inv_norm = std::move(inv_norm), D, rows](std::span<const T> g) {
      if (!px->requires_grad) return;
      auto y = self.lock();
      auto dst = px->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (inv_norm[r] == T(0)) {
          for (std::size_t j = 0; j < D; ++j) dst[r * D + j] += g[r * D + j];
          continue;
        }
        T dot = T(0);
        for (std::size_t j = 0; j < D; ++j) dot += y->value[r * D + j] * g[r * D + j];
        for (std::size_t j = 0; j < D; ++j)
          dst[r * D + j] += inv_norm[r] * (g[r * D + j] - y->value[r * D + j] * dot);
      }
    };
  }
  return result;
}

// x[B, T, D] + table[t, :] for t < T (position lookup and add).
template <typename T>
Tensor<T> embedding_add(const Tensor<T>& x, const Tensor<T>& table) {
  if (x.rank() != 3 || table.rank() != 2 || table.dim(1) != x.dim(2) || x.dim(1) > table.dim(0)) {
    throw ShapeError("embedding_add: input " + shape_str(x.shape()) + " does not fit table " +
                     shape_str(table.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  std::vector<T> out(x.data().begin(), x.data().end());
  auto td = table.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L * D; ++i) out[b * L * D + i] += td[i];
  auto px = x.node(), pt = table.node();
  return detail::make_result<T>(x.shape(), std::move(out), "embedding_add", {px, pt},
                                [px, pt, B, L, D](std::span<const T> g) {
                                  detail::accumulate(px, g);
                                  if (pt->requires_grad) {
                                    auto dst = pt->ensure_grad();
                                    for (std::size_t b = 0; b < B; ++b)
                                      for (std::size_t i = 0; i < L * D; ++i) dst[i] += g[b * L * D + i];
                                  }
                                });
}

// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ShapeError("dropout: p must lie in [0,1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const T s = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  std::vector<T> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), "dropout", {px},
                                [px, mask = std::move(mask)](std::span<const T> g) {
                                  if (!px->requires_grad) return;
                                  auto dst = px->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * mask[i];
                                });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t max_coordinates_per_tensor = 200;
  std::uint64_t seed = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Compares backward() gradients of `loss_fn` against central differences for
// every named parameter. Tensors larger than the coordinate budget are
// sampled without replacement.
template <typename F>
GradCheckResult grad_check(F&& loss_fn, std::vector<std::pair<std::string, Tensor<double>>> params,
                           const GradCheckOptions& opt = {}) {
  for (auto& [name, p] : params) p.zero_grad();
  loss_fn().backward();
  GradCheckResult res;
  std::mt19937_64 rng(opt.seed);
  for (auto& [name, p] : params) {
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.max_coordinates_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coordinates_per_tensor);
    }
    NoGradGuard no_grad;
    for (std::size_t i : coords) {
      auto data = p.mutable_data();
      const double original = data[i];
      data[i] = original + opt.eps;
      const double up = loss_fn().item();
      data[i] = original - opt.eps;
      const double down = loss_fn().item();
      data[i] = original;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double err = relative_error(analytic[i], numeric);
      ++res.coordinates;
      if (err > res.max_relative_error || res.worst_tensor.empty()) {
        res.max_relative_error = std::max(res.max_relative_error, err);
        if (err >= res.max_relative_error) {
          res.worst_tensor = name;
          res.worst_index = i;
          res.worst_analytic = analytic[i];
          res.worst_numeric = numeric;
        }
      }
    }
  }
  return res;
}

}  // namespace gaitformer::ad
