#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sepm/array.hpp"
#include "sepm/errors.hpp"
#include "sepm/parallel.hpp"
#include "sepm/rng.hpp"

namespace sepm {

enum class Precision { F32, F64 };

namespace detail {

// One recorded value in the computation graph. Ops attach a backprop closure
// that reads this node's grad and accumulates into the parents' grads.
template <typename T>
struct Node {
  Array<T> value;
  std::vector<T> grad;  // empty until backward touches it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.data.size()) grad.assign(value.data.size(), T(0));
  }
};

}  // namespace detail

// Value-semantic handle to a graph node. Copies share the node. Dropping the
// last handle to a step's loss releases the whole intermediate graph; leaf
// parameters persist because their owners hold handles.
template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) {
    return leaf(Array<T>(std::move(s)), requires_grad);
  }
  static Tensor full(Shape s, T v, bool requires_grad = false) {
    Array<T> a(std::move(s));
    std::fill(a.data.begin(), a.data.end(), v);
    return leaf(std::move(a), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return full({1}, v, requires_grad); }
  static Tensor from(Shape s, std::vector<T> vals, bool requires_grad = false) {
    return leaf(Array<T>(std::move(s), std::move(vals)), requires_grad);
  }
  static Tensor from_array(Array<T> a, bool requires_grad = false) {
    return leaf(std::move(a), requires_grad);
  }
  static Tensor randn(Shape s, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    Array<T> a(std::move(s));
    for (auto& v : a.data) v = static_cast<T>(rng.normal()) * stddev;
    return leaf(std::move(a), requires_grad);
  }
  static Tensor rand_uniform(Shape s, Rng& rng, T lo, T hi, bool requires_grad = false) {
    Array<T> a(std::move(s));
    for (auto& v : a.data) v = static_cast<T>(rng.uniform(lo, hi));
    return leaf(std::move(a), requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->value.shape; }
  std::int64_t numel() const { return n_->value.numel(); }
  std::int64_t dim(std::size_t i) const { return n_->value.dim(i); }
  int ndim() const { return n_->value.ndim(); }

  const Array<T>& array() const { return n_->value; }
  const std::vector<T>& values() const { return n_->value.data; }
  // In-place mutation of a leaf (optimizer updates). Must not be called on a
  // node that is a recorded intermediate of a live graph.
  std::vector<T>& values_mut() { return n_->value.data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor " + shape_str(shape()) + " is not scalar");
    return n_->value.data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }
  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const { return n_->grad; }
  std::vector<T>& grad_mut() { return n_->grad; }
  void zero_grad() { n_->grad.assign(n_->value.data.size(), T(0)); }
  void drop_grad() { n_->grad.clear(); }

  std::shared_ptr<Node> node() const { return n_; }

  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  static Tensor leaf(Array<T> a, bool rg) {
    auto n = std::make_shared<Node>();
    n->value = std::move(a);
    n->requires_grad = rg;
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

  std::shared_ptr<Node> n_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Array<T> value, std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backprop = std::move(backprop);
  }
  return Tensor<T>::wrap(std::move(n));
}

// Accumulate src into node's grad buffer if it participates in the graph.
template <typename T>
inline void accum(std::shared_ptr<Node<T>>& n, const T* src, std::size_t count) {
  if (!n->requires_grad && !n->backprop) return;
  n->ensure_grad();
  T* g = n->grad.data();
  for (std::size_t i = 0; i < count; ++i) g[i] += src[i];
}

template <typename T>
inline bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad || static_cast<bool>(n->backprop);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. All reachable requires-grad leaves
// receive (accumulate) dLoss/dLeaf.
template <typename T>
void backward(const Tensor<T>& loss) {
  using Node = detail::Node<T>;
  if (!loss.defined()) throw ConfigError("backward: undefined tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ConfigError("backward: loss does not depend on any requires_grad tensor");

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      const auto& sp = f.n->parents[f.next_parent++];
      Node* p = sp.get();
      if (!visited.count(p) && detail::wants_grad(sp)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backprop) continue;
    if (n->grad.empty()) continue;  // no gradient flowed into this node
    n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (leading singleton dims; scalars broadcast anywhere)
// ---------------------------------------------------------------------------

namespace detail {

// True if `small` equals a trailing suffix of `big` once leading 1s of
// `small` are stripped.
inline bool suffix_match(const Shape& big, const Shape& small) {
  std::size_t s0 = 0;
  while (s0 < small.size() && small[s0] == 1) ++s0;
  const std::size_t ns = small.size() - s0;
  if (ns > big.size()) return false;
  for (std::size_t i = 0; i < ns; ++i)
    if (small[s0 + i] != big[big.size() - ns + i]) return false;
  return true;
}

struct BroadcastPlan {
  bool swapped;         // true if lhs was the small operand
  std::int64_t repeat;  // tiles of the small operand
  std::int64_t block;   // elements per tile (numel of small operand)
};

template <typename T>
BroadcastPlan broadcast_plan(const Tensor<T>& a, const Tensor<T>& b, const char* opname) {
  const auto na = a.numel();
  const auto nb = b.numel();
  const Tensor<T>& big = na >= nb ? a : b;
  const Tensor<T>& small = na >= nb ? b : a;
  if (small.numel() == big.numel()) {
    if (a.shape() != b.shape() && small.numel() != 1)
      throw ShapeError(std::string(opname) + ": incompatible shapes " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    return {na < nb, 1, big.numel()};
  }
  if (small.numel() != 1 && !suffix_match(big.shape(), small.shape()))
    throw ShapeError(std::string(opname) + ": cannot broadcast " + shape_str(small.shape()) +
                     " into " + shape_str(big.shape()) + " (leading dims only)");
  return {na < nb, big.numel() / small.numel(), small.numel()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

// fwd(x, y) and backprop via dfa (grad wrt big/lhs-position arg) and dfb.
template <typename T, typename FwdF, typename BpF>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, FwdF fwd, BpF bp) {
  const auto plan = broadcast_plan(a, b, name);
  const Tensor<T>& big = plan.swapped ? b : a;
  const Tensor<T>& small = plan.swapped ? a : b;
  Array<T> out(big.shape());
  const T* pb = big.values().data();
  const T* ps = small.values().data();
  T* po = out.data.data();
  const std::int64_t block = plan.block, repeat = plan.repeat;
  const bool swapped = plan.swapped;
  for (std::int64_t r = 0; r < repeat; ++r)
    for (std::int64_t i = 0; i < block; ++i) {
      const T vb = pb[r * block + i], vs = ps[i];
      po[r * block + i] = swapped ? fwd(vs, vb) : fwd(vb, vs);
    }

  auto big_node = big.node();
  auto small_node = small.node();
  return make_op<T>(
      std::move(out), {a, b},
      [big_node, small_node, block, repeat, swapped, bp](Node<T>& self) mutable {
        const T* g = self.grad.data();
        const T* pb = big_node->value.data.data();
        const T* ps = small_node->value.data.data();
        const bool big_wants = wants_grad(big_node);
        const bool small_wants = wants_grad(small_node);
        if (big_wants) big_node->ensure_grad();
        if (small_wants) small_node->ensure_grad();
        for (std::int64_t r = 0; r < repeat; ++r)
          for (std::int64_t i = 0; i < block; ++i) {
            const std::int64_t k = r * block + i;
            const T vb = pb[k], vs = ps[i];
            T da, db;
            if (swapped)
              bp(vs, vb, g[k], db, da);  // small is the "a" argument
            else
              bp(vb, vs, g[k], da, db);
            if (big_wants) big_node->grad[k] += swapped ? db : da;
            if (small_wants) small_node->grad[i] += swapped ? da : db;
          }
      });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = g;
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = -g;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g * y;
        db = g * x;
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "div", [](T x, T y) { return x / y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdF, typename BpF>
Tensor<T> unary_op(const Tensor<T>& a, FwdF fwd, BpF dinput_of_xy) {
  Array<T> out(a.shape());
  const T* pa = a.values().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data[i] = fwd(pa[i]);
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, dinput_of_xy](Node<T>& self) mutable {
    if (!wants_grad(an)) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    const T* x = an->value.data.data();
    const T* y = self.value.data.data();
    T* gx = an->grad.data();
    const std::int64_t n = self.value.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * dinput_of_xy(x[i], y[i]);
  });
}

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
inline T softplus_scalar(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op<T>(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op<T>(a, [](T x) { return x > T(0) ? x : T(0); },
                             [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op<T>(a, [](T x) { return detail::sigmoid_scalar(x); },
                             [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary_op<T>(a, [](T x) { return x * detail::sigmoid_scalar(x); },
                             [](T x, T) {
                               const T s = detail::sigmoid_scalar(x);
                               return s * (T(1) + x * (T(1) - s));
                             });
}

template <typename T>
Tensor<T> exp_(const Tensor<T>& a) {
  return detail::unary_op<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_(const Tensor<T>& a) {
  for (auto v : a.values())
    if (!(v > T(0))) throw NumericError("log: non-positive argument " + std::to_string(static_cast<double>(v)));
  return detail::unary_op<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary_op<T>(a, [](T x) { return detail::softplus_scalar(x); },
                             [](T x, T) { return detail::sigmoid_scalar(x); });
}

// max(x, c) with a constant floor; subgradient 0 on the clamped side and at
// the tie.
template <typename T>
Tensor<T> cmax(const Tensor<T>& a, T floor_v) {
  return detail::unary_op<T>(a, [floor_v](T x) { return x > floor_v ? x : floor_v; },
                             [floor_v](T x, T) { return x > floor_v ? T(1) : T(0); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op<T>(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op<T>(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

// ---------------------------------------------------------------------------
// Reductions and axis ops
// ---------------------------------------------------------------------------

// Sum of all elements -> scalar. Accumulates in double for stability.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (auto v : a.values()) acc += static_cast<double>(v);
  Array<T> out({1});
  out.data[0] = static_cast<T>(acc);
  auto an = a.node();
  return detail::make_op<T>(std::move(out), {a}, [an](detail::Node<T>& self) mutable {
    if (!detail::wants_grad(an)) return;
    an->ensure_grad();
    const T g = self.grad[0];
    for (auto& v : an->grad) v += g;
  });
}

// Reverses the last (temporal) axis.
template <typename T>
Tensor<T> flip_time(const Tensor<T>& a) {
  if (a.ndim() < 1) throw ShapeError("flip_time: needs at least 1 dim");
  const std::int64_t l = a.shape().back();
  const std::int64_t rows = a.numel() / l;
  Array<T> out(a.shape());
  const T* p = a.values().data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t i = 0; i < l; ++i) out.data[r * l + i] = p[r * l + (l - 1 - i)];
  auto an = a.node();
  return detail::make_op<T>(std::move(out), {a}, [an, rows, l](detail::Node<T>& self) mutable {
    if (!detail::wants_grad(an)) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t i = 0; i < l; ++i) an->grad[r * l + (l - 1 - i)] += g[r * l + i];
  });
}

// Extracts row i of a 2-D tensor as a 1-D tensor.
template <typename T>
Tensor<T> row(const Tensor<T>& a, std::int64_t i) {
  if (a.ndim() != 2) throw ShapeError("row: expects 2-D, got " + shape_str(a.shape()));
  const std::int64_t l = a.dim(1);
  if (i < 0 || i >= a.dim(0)) throw ShapeError("row: index out of range");
  Array<T> out({l});
  std::copy_n(a.values().data() + i * l, l, out.data.data());
  auto an = a.node();
  return detail::make_op<T>(std::move(out), {a}, [an, i, l](detail::Node<T>& self) mutable {
    if (!detail::wants_grad(an)) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (std::int64_t k = 0; k < l; ++k) an->grad[i * l + k] += g[k];
  });
}

// Stacks 1-D tensors of equal length into a 2-D [n x L] tensor.
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows_in) {
  if (rows_in.empty()) throw ShapeError("stack_rows: empty input");
  const std::int64_t l = rows_in[0].numel();
  for (const auto& r : rows_in)
    if (r.ndim() != 1 || r.numel() != l) throw ShapeError("stack_rows: rows must be 1-D of equal length");
  Array<T> out({static_cast<std::int64_t>(rows_in.size()), l});
  for (std::size_t i = 0; i < rows_in.size(); ++i)
    std::copy_n(rows_in[i].values().data(), l, out.data.data() + static_cast<std::int64_t>(i) * l);
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& r : rows_in) nodes.push_back(r.node());
  return detail::make_op<T>(std::move(out), rows_in, [nodes, l](detail::Node<T>& self) mutable {
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (!detail::wants_grad(nodes[i])) continue;
      nodes[i]->ensure_grad();
      for (std::int64_t k = 0; k < l; ++k) nodes[i]->grad[k] += g[static_cast<std::int64_t>(i) * l + k];
    }
  });
}

// Zero-pads / crops along the last axis.
template <typename T>
Tensor<T> pad_last(const Tensor<T>& a, std::int64_t left, std::int64_t right) {
  if (left < 0 || right < 0) throw ShapeError("pad_last: negative padding");
  const std::int64_t l = a.shape().back();
  const std::int64_t rows = a.numel() / l;
  Shape s = a.shape();
  s.back() = l + left + right;
  Array<T> out(s);
  const T* p = a.values().data();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(p + r * l, l, out.data.data() + r * s.back() + left);
  auto an = a.node();
  const std::int64_t lo = s.back();
  return detail::make_op<T>(std::move(out), {a}, [an, rows, l, lo, left](detail::Node<T>& self) mutable {
    if (!detail::wants_grad(an)) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t i = 0; i < l; ++i) an->grad[r * l + i] += g[r * lo + left + i];
  });
}

template <typename T>
Tensor<T> crop_last(const Tensor<T>& a, std::int64_t start, std::int64_t len) {
  const std::int64_t l = a.shape().back();
  if (start < 0 || len < 0 || start + len > l) throw ShapeError("crop_last: window out of range");
  const std::int64_t rows = a.numel() / l;
  Shape s = a.shape();
  s.back() = len;
  Array<T> out(s);
  const T* p = a.values().data();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(p + r * l + start, len, out.data.data() + r * len);
  auto an = a.node();
  return detail::make_op<T>(std::move(out), {a}, [an, rows, l, len, start](detail::Node<T>& self) mutable {
    if (!detail::wants_grad(an)) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t i = 0; i < len; ++i) an->grad[r * l + start + i] += g[r * len + i];
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[m x n] = A[m x k] * B[k x n], p-ascending accumulation per output.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      T* crow = c + i * n;
      std::fill(crow, crow + n, T(0));
      const T* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }, 8);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array<T> out({m, n});
  detail::gemm(a.values().data(), b.values().data(), out.data.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn, m, k, n](detail::Node<T>& self) mutable {
    const T* g = self.grad.data();
    if (detail::wants_grad(an)) {
      an->ensure_grad();
      const T* bv = bn->value.data.data();
      T* ga = an->grad.data();
      parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i)
          for (std::int64_t p = 0; p < k; ++p) {
            T acc = T(0);
            const T* grow = g + i * n;
            const T* brow = bv + p * n;
            for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
      }, 8);
    }
    if (detail::wants_grad(bn)) {
      bn->ensure_grad();
      const T* av = an->value.data.data();
      T* gb = bn->grad.data();
      parallel_for(k, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
          T* gbrow = gb + p * n;
          for (std::int64_t i = 0; i < m; ++i) {
            const T av_ip = av[i * k + p];
            const T* grow = g + i * n;
            for (std::int64_t j = 0; j < n; ++j) gbrow[j] += av_ip * grow[j];
          }
        }
      }, 8);
    }
  });
}

// ---------------------------------------------------------------------------
// conv1d / conv_transpose1d
// ---------------------------------------------------------------------------

enum class PadMode { SameLeft, SameCentered, Valid };

namespace detail {

struct ConvPad {
  std::int64_t left = 0, right = 0;
};

inline ConvPad conv_padding(PadMode mode, std::int64_t l, std::int64_t k, std::int64_t stride) {
  switch (mode) {
    case PadMode::Valid:
      return {0, 0};
    case PadMode::SameLeft:
      // strictly causal: output i sees inputs <= i*stride
      return {k - 1, 0};
    case PadMode::SameCentered: {
      const std::int64_t lout = (l + stride - 1) / stride;  // ceil
      std::int64_t total = (lout - 1) * stride + k - l;
      if (total < 0) total = 0;
      return {total / 2, total - total / 2};
    }
  }
  return {0, 0};
}

}  // namespace detail

// x: [C_in x L], w: [C_out x C_in/groups x K]. groups must divide C_in and
// C_out. L_out = floor((L + pad - K)/stride) + 1.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride, PadMode pad_mode,
                 std::int64_t groups = 1) {
  if (x.ndim() != 2 || w.ndim() != 3)
    throw ShapeError("conv1d: expects x[C_in x L], w[C_out x C_in/g x K], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::int64_t cin = x.dim(0), l = x.dim(1);
  const std::int64_t cout = w.dim(0), cin_g = w.dim(1), k = w.dim(2);
  if (stride < 1 || k < 1) throw ConfigError("conv1d: stride and kernel must be >= 1");
  if (groups < 1 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g)
    throw ShapeError("conv1d: group mismatch for x " + shape_str(x.shape()) + " and w " +
                     shape_str(w.shape()));
  const auto pad = detail::conv_padding(pad_mode, l, k, stride);
  const std::int64_t lpad = l + pad.left + pad.right;
  if (lpad < k)
    throw ShapeError("conv1d: padded length " + std::to_string(lpad) + " < kernel " +
                     std::to_string(k) + " (empty output)");
  const std::int64_t lout = (lpad - k) / stride + 1;
  const std::int64_t cpg_out = cout / groups;

  Array<T> out({cout, lout});
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  const std::int64_t pl = pad.left;
  parallel_for(cout, [&](std::int64_t o0, std::int64_t o1) {
    for (std::int64_t o = o0; o < o1; ++o) {
      const std::int64_t gidx = o / cpg_out;
      T* orow = out.data.data() + o * lout;
      for (std::int64_t i = 0; i < lout; ++i) {
        T acc = T(0);
        const std::int64_t base = i * stride - pl;
        for (std::int64_t cg = 0; cg < cin_g; ++cg) {
          const std::int64_t c = gidx * cin_g + cg;
          const T* xr = xp + c * l;
          const T* wr = wp + (o * cin_g + cg) * k;
          const std::int64_t j0 = std::max<std::int64_t>(0, -base);
          const std::int64_t j1 = std::min<std::int64_t>(k, l - base);
          for (std::int64_t j = j0; j < j1; ++j) acc += wr[j] * xr[base + j];
        }
        orow[i] = acc;
      }
    }
  }, 1);

  auto xn = x.node();
  auto wn = w.node();
  return detail::make_op<T>(
      std::move(out), {x, w},
      [xn, wn, cin, l, cout, cin_g, k, stride, pl, lout, groups, cpg_out](detail::Node<T>& self) mutable {
        const T* g = self.grad.data();
        if (detail::wants_grad(wn)) {
          wn->ensure_grad();
          const T* xp = xn->value.data.data();
          T* gw = wn->grad.data();
          parallel_for(cout, [&](std::int64_t o0, std::int64_t o1) {
            for (std::int64_t o = o0; o < o1; ++o) {
              const std::int64_t gidx = o / cpg_out;
              const T* grow = g + o * lout;
              for (std::int64_t cg = 0; cg < cin_g; ++cg) {
                const std::int64_t c = gidx * cin_g + cg;
                const T* xr = xp + c * l;
                T* gwr = gw + (o * cin_g + cg) * k;
                for (std::int64_t j = 0; j < k; ++j) {
                  T acc = T(0);
                  for (std::int64_t i = 0; i < lout; ++i) {
                    const std::int64_t xi = i * stride - pl + j;
                    if (xi >= 0 && xi < l) acc += grow[i] * xr[xi];
                  }
                  gwr[j] += acc;
                }
              }
            }
          }, 1);
        }
        if (detail::wants_grad(xn)) {
          xn->ensure_grad();
          const T* wp = wn->value.data.data();
          T* gx = xn->grad.data();
          // gather form: dx[c,t] = sum_{o,j : j = t+pl-i*stride} w[o,cg,j]*g[o,i]
          parallel_for(cin, [&](std::int64_t c0, std::int64_t c1) {
            for (std::int64_t c = c0; c < c1; ++c) {
              const std::int64_t gidx = c / cin_g;
              const std::int64_t cg = c % cin_g;
              T* gxr = gx + c * l;
              for (std::int64_t o = gidx * cpg_out; o < (gidx + 1) * cpg_out; ++o) {
                const T* grow = g + o * lout;
                const T* wr = wp + (o * cin_g + cg) * k;
                for (std::int64_t i = 0; i < lout; ++i) {
                  const std::int64_t base = i * stride - pl;
                  const std::int64_t j0 = std::max<std::int64_t>(0, -base);
                  const std::int64_t j1 = std::min<std::int64_t>(k, l - base);
                  const T gv = grow[i];
                  for (std::int64_t j = j0; j < j1; ++j) gxr[base + j] += wr[j] * gv;
                }
              }
            }
          }, 1);
        }
      });
}

// Transposed 1-D convolution. x: [C_in x L_in], w: [C_in x C_out x K].
// Raw output index j_raw = i*stride + j; emitted output is
// raw[crop_head : crop_head + out_len]. With crop_head equal to a matching
// conv1d's left padding and out_len = its input length, this is that conv's
// exact adjoint in x.
template <typename T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride,
                           std::int64_t crop_head, std::int64_t out_len) {
  if (x.ndim() != 2 || w.ndim() != 3 || x.dim(0) != w.dim(0))
    throw ShapeError("conv_transpose1d: expects x[C_in x L], w[C_in x C_out x K], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1) throw ConfigError("conv_transpose1d: stride must be >= 1");
  const std::int64_t cin = x.dim(0), lin = x.dim(1);
  const std::int64_t cout = w.dim(1), k = w.dim(2);
  if (k < stride)
    throw ConfigError("conv_transpose1d: kernel " + std::to_string(k) + " < stride " +
                      std::to_string(stride) + " leaves gaps");
  if (crop_head < 0 || out_len < 1) throw ConfigError("conv_transpose1d: bad crop/out_len");

  Array<T> out({cout, out_len});
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  // gather form over outputs so the loop parallelizes deterministically
  parallel_for(cout, [&](std::int64_t o0, std::int64_t o1) {
    for (std::int64_t o = o0; o < o1; ++o) {
      T* orow = out.data.data() + o * out_len;
      for (std::int64_t t = 0; t < out_len; ++t) {
        const std::int64_t jraw = t + crop_head;
        T acc = T(0);
        // contributions from inputs i with i*stride + j = jraw, 0 <= j < k
        const std::int64_t lo = jraw - (k - 1);
        std::int64_t i0 = lo <= 0 ? 0 : (lo + stride - 1) / stride;
        std::int64_t i1 = jraw / stride;
        if (i1 >= lin) i1 = lin - 1;
        for (std::int64_t i = i0; i <= i1; ++i) {
          const std::int64_t j = jraw - i * stride;
          for (std::int64_t c = 0; c < cin; ++c)
            acc += wp[(c * cout + o) * k + j] * xp[c * lin + i];
        }
        orow[t] = acc;
      }
    }
  }, 1);

  auto xn = x.node();
  auto wn = w.node();
  return detail::make_op<T>(
      std::move(out), {x, w},
      [xn, wn, cin, lin, cout, k, stride, crop_head, out_len](detail::Node<T>& self) mutable {
        const T* g = self.grad.data();
        if (detail::wants_grad(xn)) {
          xn->ensure_grad();
          const T* wp = wn->value.data.data();
          T* gx = xn->grad.data();
          // dx[c,i] = sum_{o,j} w[c,o,j] * g[o, i*stride + j - crop_head]
          parallel_for(cin, [&](std::int64_t c0, std::int64_t c1) {
            for (std::int64_t c = c0; c < c1; ++c) {
              T* gxr = gx + c * lin;
              for (std::int64_t i = 0; i < lin; ++i) {
                T acc = T(0);
                const std::int64_t base = i * stride - crop_head;
                const std::int64_t j0 = std::max<std::int64_t>(0, -base);
                const std::int64_t j1 = std::min<std::int64_t>(k, out_len - base);
                for (std::int64_t o = 0; o < cout; ++o) {
                  const T* grow = g + o * out_len;
                  const T* wr = wp + (c * cout + o) * k;
                  for (std::int64_t j = j0; j < j1; ++j) acc += wr[j] * grow[base + j];
                }
                gxr[i] += acc;
              }
            }
          }, 1);
        }
        if (detail::wants_grad(wn)) {
          wn->ensure_grad();
          const T* xp = xn->value.data.data();
          T* gw = wn->grad.data();
          // dw[c,o,j] = sum_i x[c,i] * g[o, i*stride + j - crop_head]
          parallel_for(cin, [&](std::int64_t c0, std::int64_t c1) {
            for (std::int64_t c = c0; c < c1; ++c) {
              const T* xr = xp + c * lin;
              for (std::int64_t o = 0; o < cout; ++o) {
                const T* grow = g + o * out_len;
                T* gwr = gw + (c * cout + o) * k;
                for (std::int64_t j = 0; j < k; ++j) {
                  T acc = T(0);
                  for (std::int64_t i = 0; i < lin; ++i) {
                    const std::int64_t t = i * stride + j - crop_head;
                    if (t >= 0 && t < out_len) acc += xr[i] * grow[t];
                  }
                  gwr[j] += acc;
                }
              }
            }
          }, 1);
        }
      });
}

// y[c, t] = x[c, t] + b[c]
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.dim(0))
    throw ShapeError("add_channel_bias: x " + shape_str(x.shape()) + " vs b " + shape_str(b.shape()));
  const std::int64_t c = x.dim(0), l = x.dim(1);
  Array<T> out({c, l});
  const T* xp = x.values().data();
  const T* bp = b.values().data();
  for (std::int64_t i = 0; i < c; ++i)
    for (std::int64_t t = 0; t < l; ++t) out.data[i * l + t] = xp[i * l + t] + bp[i];
  auto xn = x.node();
  auto bn = b.node();
  return detail::make_op<T>(std::move(out), {x, b}, [xn, bn, c, l](detail::Node<T>& self) mutable {
    const T* g = self.grad.data();
    if (detail::wants_grad(xn)) {
      xn->ensure_grad();
      for (std::int64_t i = 0; i < c * l; ++i) xn->grad[i] += g[i];
    }
    if (detail::wants_grad(bn)) {
      bn->ensure_grad();
      for (std::int64_t i = 0; i < c; ++i) {
        T acc = T(0);
        for (std::int64_t t = 0; t < l; ++t) acc += g[i * l + t];
        bn->grad[i] += acc;
      }
    }
  });
}

// RMS normalization over the channel axis, per timestep, with a learned
// per-channel gain: y[c,t] = gain[c] * x[c,t] / rms_t.
template <typename T>
Tensor<T> rmsnorm_channels(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6)) {
  if (x.ndim() != 2 || gain.ndim() != 1 || gain.dim(0) != x.dim(0))
    throw ShapeError("rmsnorm_channels: x " + shape_str(x.shape()) + " vs gain " +
                     shape_str(gain.shape()));
  const std::int64_t c = x.dim(0), l = x.dim(1);
  Array<T> out({c, l});
  std::vector<T> inv_rms(static_cast<std::size_t>(l));
  const T* xp = x.values().data();
  const T* gp = gain.values().data();
  for (std::int64_t t = 0; t < l; ++t) {
    double ss = 0.0;
    for (std::int64_t i = 0; i < c; ++i) {
      const double v = static_cast<double>(xp[i * l + t]);
      ss += v * v;
    }
    inv_rms[t] = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(c) + static_cast<double>(eps)));
  }
  for (std::int64_t i = 0; i < c; ++i)
    for (std::int64_t t = 0; t < l; ++t) out.data[i * l + t] = gp[i] * xp[i * l + t] * inv_rms[t];

  auto xn = x.node();
  auto gn = gain.node();
  auto saved_inv = std::make_shared<std::vector<T>>(std::move(inv_rms));
  return detail::make_op<T>(std::move(out), {x, gain}, [xn, gn, saved_inv, c, l](detail::Node<T>& self) mutable {
    const T* g = self.grad.data();
    const T* xp = xn->value.data.data();
    const T* gp = gn->value.data.data();
    const std::vector<T>& ir = *saved_inv;
    if (detail::wants_grad(gn)) {
      gn->ensure_grad();
      for (std::int64_t i = 0; i < c; ++i) {
        T acc = T(0);
        for (std::int64_t t = 0; t < l; ++t) acc += g[i * l + t] * xp[i * l + t] * ir[t];
        gn->grad[i] += acc;
      }
    }
    if (detail::wants_grad(xn)) {
      xn->ensure_grad();
      for (std::int64_t t = 0; t < l; ++t) {
        // dL/dx_c = gain_c*ghat_c*ir - x_c*ir^3/C * sum_j ghat_j*gain_j*x_j
        double dot = 0.0;
        for (std::int64_t j = 0; j < c; ++j)
          dot += static_cast<double>(g[j * l + t]) * static_cast<double>(gp[j]) *
                 static_cast<double>(xp[j * l + t]);
        const T ir1 = ir[t];
        const T corr = static_cast<T>(dot) * ir1 * ir1 * ir1 / static_cast<T>(c);
        for (std::int64_t i = 0; i < c; ++i)
          xn->grad[i * l + t] += g[i * l + t] * gp[i] * ir1 - xp[i * l + t] * corr;
      }
    }
  });
}

// NaN/Inf guard used by the trainer.
template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (auto v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace sepm
