#pragma once

// Reverse-mode automatic differentiation on an explicit tape.
//
// Every op appends a node to the tape holding its output value, the ids of its
// inputs, and a backward rule. Inputs always precede outputs, so a reverse
// sweep over node ids is a valid topological order: each node is visited once
// and gradients from fan-out accumulate additively into the shared input.

#include <cmath>
#include <cstddef>
#include <cstring>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "passr/tensor.hpp"

namespace passr {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class GradSink {
 public:
  GradSink(Tape<T>& tape, const std::vector<std::size_t>& inputs,
           const Tensor<T>& output)
      : tape_(tape), inputs_(inputs), output_(output) {}

  // Value of the node whose backward rule is running.
  const Tensor<T>& output() const { return output_; }

  bool wants(std::size_t i) const;
  // Zero-initialized on first access; accumulate into it.
  Tensor<T>& slot(std::size_t i);
  void add(std::size_t i, const Tensor<T>& g);

 private:
  Tape<T>& tape_;
  const std::vector<std::size_t>& inputs_;
  const Tensor<T>& output_;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& grad, GradSink<T>& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    return push("constant", std::move(value), {}, false, nullptr);
  }

  Var<T> variable(Tensor<T> value) {
    return push("variable", std::move(value), {}, true, nullptr);
  }

  Var<T> record(const char* op, Tensor<T> value,
                const std::vector<Var<T>>& inputs, Backward backward) {
    require_finite(value, op);
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs_grad = false;
    for (const auto& v : inputs) {
      if (v.tape_ != this) throw std::invalid_argument("input from another tape");
      ids.push_back(v.id_);
      needs_grad = needs_grad || nodes_[v.id_].requires_grad;
    }
    return push(op, std::move(value), std::move(ids), needs_grad,
                needs_grad ? std::move(backward) : Backward{});
  }

  void backward(const Var<T>& root) {
    if (root.tape_ != this) throw std::invalid_argument("root from another tape");
    Node& r = nodes_[root.id_];
    if (r.value.size() != 1) {
      throw ShapeError("backward root must be a scalar, got shape " +
                       to_string(r.value.shape()));
    }
    grad_slot(root.id_).fill(T{1});
    for (std::size_t id = root.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      GradSink<T> sink(*this, n.inputs, n.value);
      n.backward(n.grad, sink);
    }
  }

  // Zero tensor when no gradient reached the node.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id_);
    return n.has_grad ? n.grad : Tensor<T>(n.value.shape());
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
  }

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(const Var<T>& v) const { return nodes_.at(v.id_).op; }
  void clear() { nodes_.clear(); }

 private:
  friend class Var<T>;
  friend class GradSink<T>;

  struct Node {
    const char* op;
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Var<T> push(const char* op, Tensor<T> value, std::vector<std::size_t> inputs,
              bool requires_grad, Backward backward) {
    nodes_.push_back(Node{op, std::move(value), Tensor<T>(), false,
                          requires_grad, std::move(inputs), std::move(backward)});
    return Var<T>(this, nodes_.size() - 1);
  }

  Tensor<T>& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  // deque: references to values stay valid while new nodes are appended.
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->nodes_[id_].value;
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->nodes_[id_].requires_grad;
}

template <typename T>
bool GradSink<T>::wants(std::size_t i) const {
  return tape_.nodes_[inputs_[i]].requires_grad;
}

template <typename T>
Tensor<T>& GradSink<T>::slot(std::size_t i) {
  return tape_.grad_slot(inputs_[i]);
}

template <typename T>
void GradSink<T>::add(std::size_t i, const Tensor<T>& g) {
  if (!wants(i)) return;
  Tensor<T>& dst = slot(i);
  if (dst.shape() != g.shape()) {
    throw ShapeError("gradient shape " + to_string(g.shape()) +
                     " does not match value shape " + to_string(dst.shape()));
  }
  for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
}

// ---------------------------------------------------------------------------
// Element-wise ops

enum class BinaryOp { kAdd, kSub, kMul };

namespace detail {

template <typename T>
T apply(BinaryOp op, T a, T b) {
  switch (op) {
    case BinaryOp::kAdd: return a + b;
    case BinaryOp::kSub: return a - b;
    case BinaryOp::kMul: return a * b;
  }
  return T{0};
}

}  // namespace detail

template <typename T>
Var<T> elementwise(BinaryOp op, const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape out_shape = broadcast_shape(av.shape(), bv.shape());
  Tensor<T> out(out_shape);
  const bool same = av.shape() == out_shape && bv.shape() == out_shape;
  std::vector<std::size_t> oa, ob;
  if (same) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = detail::apply(op, av[k], bv[k]);
  } else {
    oa = broadcast_offsets(av.shape(), out_shape);
    ob = broadcast_offsets(bv.shape(), out_shape);
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k] = detail::apply(op, av[oa[k]], bv[ob[k]]);
    }
  }
  const char* name = op == BinaryOp::kAdd ? "add" : op == BinaryOp::kSub ? "sub" : "mul";
  return a.tape().record(
      name, std::move(out), {a, b},
      [op, a, b, same, oa = std::move(oa), ob = std::move(ob)](
          const Tensor<T>& g, GradSink<T>& sink) {
        const Tensor<T>& av = a.value();
        const Tensor<T>& bv = b.value();
        auto offa = [&](std::size_t k) { return same ? k : oa[k]; };
        auto offb = [&](std::size_t k) { return same ? k : ob[k]; };
        if (sink.wants(0)) {
          Tensor<T>& ga = sink.slot(0);
          for (std::size_t k = 0; k < g.size(); ++k) {
            ga[offa(k)] += op == BinaryOp::kMul ? g[k] * bv[offb(k)] : g[k];
          }
        }
        if (sink.wants(1)) {
          Tensor<T>& gb = sink.slot(1);
          for (std::size_t k = 0; k < g.size(); ++k) {
            const T d = op == BinaryOp::kMul ? g[k] * av[offa(k)]
                        : op == BinaryOp::kSub ? -g[k]
                                               : g[k];
            gb[offb(k)] += d;
          }
        }
      });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) { return elementwise(BinaryOp::kAdd, a, b); }
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) { return elementwise(BinaryOp::kSub, a, b); }
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) { return elementwise(BinaryOp::kMul, a, b); }

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

// a * c + d for scalar constants.
template <typename T>
Var<T> affine(const Var<T>& a, T c, T d = T{0}) {
  Tensor<T> out(a.shape());
  const Tensor<T>& av = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] * c + d;
  return a.tape().record("affine", std::move(out), {a},
                         [c](const Tensor<T>& g, GradSink<T>& sink) {
                           Tensor<T>& ga = sink.slot(0);
                           for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * c;
                         });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) { return affine(a, c); }

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const Tensor<T>& av = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] * av[k];
  return a.tape().record("square", std::move(out), {a},
                         [a](const Tensor<T>& g, GradSink<T>& sink) {
                           const Tensor<T>& av = a.value();
                           Tensor<T>& ga = sink.slot(0);
                           for (std::size_t k = 0; k < g.size(); ++k) ga[k] += 2 * av[k] * g[k];
                         });
}

// Subgradient at 0 is 0.
template <typename T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const Tensor<T>& av = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::abs(av[k]);
  return a.tape().record("abs", std::move(out), {a},
                         [a](const Tensor<T>& g, GradSink<T>& sink) {
                           const Tensor<T>& av = a.value();
                           Tensor<T>& ga = sink.slot(0);
                           for (std::size_t k = 0; k < g.size(); ++k) {
                             ga[k] += av[k] > 0 ? g[k] : av[k] < 0 ? -g[k] : T{0};
                           }
                         });
}

// x for x > 0, slope * x otherwise. The derivative at exactly 0 takes the
// negative branch (slope).
template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.1)) {
  Tensor<T> out(a.shape());
  const Tensor<T>& av = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] > 0 ? av[k] : slope * av[k];
  return a.tape().record("leaky_relu", std::move(out), {a},
                         [a, slope](const Tensor<T>& g, GradSink<T>& sink) {
                           const Tensor<T>& av = a.value();
                           Tensor<T>& ga = sink.slot(0);
                           for (std::size_t k = 0; k < g.size(); ++k) {
                             ga[k] += av[k] > 0 ? g[k] : slope * g[k];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  return a.tape().record("sum", Tensor<T>::scalar(total), {a},
                         [](const Tensor<T>& g, GradSink<T>& sink) {
                           Tensor<T>& ga = sink.slot(0);
                           const T gv = g[0];
                           for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += gv;
                         });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(out), {a},
                         [](const Tensor<T>& g, GradSink<T>& sink) {
                           Tensor<T>& ga = sink.slot(0);
                           for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
                         });
}

namespace detail {

// Swap the last two axes of a rank >= 2 buffer.
template <typename T>
void transpose_last2(const T* src, T* dst, std::size_t batch, std::size_t rows,
                     std::size_t cols, bool accumulate) {
  for (std::size_t b = 0; b < batch; ++b) {
    const T* s = src + b * rows * cols;
    T* d = dst + b * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (accumulate) {
          d[c * rows + r] += s[r * cols + c];
        } else {
          d[c * rows + r] = s[r * cols + c];
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  const std::size_t rows = s[s.size() - 2];
  const std::size_t cols = s[s.size() - 1];
  const std::size_t batch = a.value().size() / (rows * cols);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  Tensor<T> out(out_shape);
  detail::transpose_last2(a.value().raw(), out.raw(), batch, rows, cols, false);
  return a.tape().record("transpose_last2", std::move(out), {a},
                         [batch, rows, cols](const Tensor<T>& g, GradSink<T>& sink) {
                           detail::transpose_last2(g.raw(), sink.slot(0).raw(), batch,
                                                   cols, rows, true);
                         });
}

namespace detail {

// Visits the contiguous last-axis runs of a box [begin, begin + extent)
// inside a tensor of shape `full`. fn(full_offset, box_offset, run_length).
template <typename Fn>
void for_each_box_run(const Shape& full, const Shape& begin, const Shape& extent,
                      Fn&& fn) {
  const std::size_t rank = full.size();
  if (rank == 0) {
    fn(0, 0, 1);
    return;
  }
  const std::size_t run = extent[rank - 1];
  std::size_t outer = 1;
  for (std::size_t d = 0; d + 1 < rank; ++d) outer *= extent[d];
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t r = 0; r < outer; ++r) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off = off * full[d] + begin[d] + idx[d];
    fn(off, r * run, run);
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < extent[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// Box slice: out = a[begin : begin + extent] along every axis.
template <typename T>
Var<T> slice(const Var<T>& a, Shape begin, Shape extent) {
  const Shape& s = a.shape();
  if (begin.size() != s.size() || extent.size() != s.size()) {
    throw ShapeError("slice rank mismatch");
  }
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (begin[d] + extent[d] > s[d]) throw ShapeError("slice out of range");
  }
  Tensor<T> out(extent);
  const T* src = a.value().raw();
  detail::for_each_box_run(s, begin, extent,
                           [&](std::size_t fo, std::size_t bo, std::size_t n) {
                             std::memcpy(out.raw() + bo, src + fo, n * sizeof(T));
                           });
  return a.tape().record(
      "slice", std::move(out), {a},
      [full = s, begin = std::move(begin), extent](const Tensor<T>& g, GradSink<T>& sink) {
        T* dst = sink.slot(0).raw();
        detail::for_each_box_run(full, begin, extent,
                                 [&](std::size_t fo, std::size_t bo, std::size_t n) {
                                   for (std::size_t k = 0; k < n; ++k) dst[fo + k] += g[bo + k];
                                 });
      });
}

// Concatenate along the last axis; all leading extents must agree.
template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat needs rank >= 1");
  const std::size_t rank = first.size();
  const std::size_t rows = parts.front().value().size() / first.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != rank || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw ShapeError("concat leading extents differ: " + to_string(first) + " vs " +
                       to_string(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor<T> out(out_shape);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].value().raw();
    for (std::size_t r = 0; r < rows; ++r) {
      std::memcpy(out.raw() + r * total + col, src + r * widths[p], widths[p] * sizeof(T));
    }
    col += widths[p];
  }
  return parts.front().tape().record(
      "concat_lastdim", std::move(out), parts,
      [widths, rows, total](const Tensor<T>& g, GradSink<T>& sink) {
        std::size_t col = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          if (sink.wants(p)) {
            T* dst = sink.slot(p).raw();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < widths[p]; ++c) {
                dst[r * widths[p] + c] += g[r * total + col + c];
              }
            }
          }
          col += widths[p];
        }
      });
}

// ---------------------------------------------------------------------------
// Batched matrix product: [B, M, K] x [B, K, N] -> [B, M, N].

template <typename T>
Var<T> matmul_batched(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3) throw ShapeError("matmul_batched needs rank-3 operands");
  if (sa[0] != sb[0]) {
    throw ShapeError("matmul_batched batch mismatch " + to_string(sa) + " vs " + to_string(sb));
  }
  if (sa[2] != sb[1]) {
    throw ShapeError("matmul_batched inner mismatch " + to_string(sa) + " vs " + to_string(sb));
  }
  const std::size_t batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
  Tensor<T> out({batch, m, n});
  const T* ap = a.value().raw();
  const T* bp = b.value().raw();
  T* op = out.raw();
  for (std::size_t z = 0; z < batch; ++z) {
    const T* az = ap + z * m * k;
    const T* bz = bp + z * k * n;
    T* oz = op + z * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* orow = oz + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = az[i * k + p];
        const T* brow = bz + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  return a.tape().record(
      "matmul_batched", std::move(out), {a, b},
      [a, b, batch, m, k, n](const Tensor<T>& g, GradSink<T>& sink) {
        const T* ap = a.value().raw();
        const T* bp = b.value().raw();
        const T* gp = g.raw();
        if (sink.wants(0)) {
          // dA = dC * B^T
          T* ga = sink.slot(0).raw();
          for (std::size_t z = 0; z < batch; ++z) {
            for (std::size_t i = 0; i < m; ++i) {
              const T* grow = gp + (z * m + i) * n;
              for (std::size_t p = 0; p < k; ++p) {
                const T* brow = bp + (z * k + p) * n;
                T acc{0};
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                ga[(z * m + i) * k + p] += acc;
              }
            }
          }
        }
        if (sink.wants(1)) {
          // dB = A^T * dC
          T* gb = sink.slot(1).raw();
          for (std::size_t z = 0; z < batch; ++z) {
            for (std::size_t i = 0; i < m; ++i) {
              const T* grow = gp + (z * m + i) * n;
              for (std::size_t p = 0; p < k; ++p) {
                const T av = ap[(z * m + i) * k + p];
                T* gbrow = gb + (z * k + p) * n;
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, stabilized by subtracting the row maximum.

template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
  const Shape& s = a.shape();
  if (s.empty() || s.back() == 0) throw ShapeError("softmax needs a non-empty last axis");
  require_finite(a.value(), "softmax input");
  const std::size_t n = s.back();
  const std::size_t rows = a.value().size() / n;
  Tensor<T> out(s);
  const T* x = a.value().raw();
  T* y = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T* yr = y + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    const T inv = T{1} / total;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  return a.tape().record("softmax_lastdim", std::move(out), {a},
                         [rows, n](const Tensor<T>& g, GradSink<T>& sink) {
                           // dx = y * (g - <y, g>) per row
                           const T* y = sink.output().raw();
                           T* gx = sink.slot(0).raw();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* yr = y + r * n;
                             const T* gr = g.raw() + r * n;
                             T dot{0};
                             for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                             for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
                           }
                         });
}

}  // namespace passr
