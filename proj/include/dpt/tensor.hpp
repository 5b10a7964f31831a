#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dpt/common.hpp"

namespace dpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class GradTape;

// Dense row-major tensor. The payload is shared and treated as immutable once
// the tensor participates in an op; mutable_data() copies when shared.
template <typename T>
class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))) {
    check_shape(data_->size() == shape_numel(shape_),
                "tensor: data length " + std::to_string(data_->size()) +
                    " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  const T* data() const { return data_->data(); }
  const std::vector<T>& values() const { return *data_; }

  // Shared handle to the payload; backward rules capture this instead of
  // copying activations.
  std::shared_ptr<const std::vector<T>> shared_values() const { return data_; }

  // Copy-on-write element access for initialization and tests. Not intended
  // for tensors already recorded on a tape.
  T* mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
    return data_->data();
  }

  T at(std::size_t i) const { return (*data_)[i]; }
  T at(std::size_t i, std::size_t j) const { return (*data_)[i * shape_[1] + j]; }
  T at(std::size_t c, std::size_t y, std::size_t x) const {
    return (*data_)[(c * shape_[1] + y) * shape_[2] + x];
  }

  bool tracked() const { return tape_ != nullptr; }
  GradTape<T>* tape() const { return tape_; }
  int node() const { return node_; }

  // Same payload, no tape association. Use when a value outlives its tape
  // (optimizer updates, stored activations).
  Tensor detach() const {
    Tensor out = *this;
    out.tape_ = nullptr;
    out.node_ = -1;
    return out;
  }

 private:
  friend class GradTape<T>;

  std::shared_ptr<std::vector<T>> payload() const { return data_; }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  GradTape<T>* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Ops append nodes in execution order, so walking the tape
// backward visits nodes in reverse topological order. Confined to a single
// execution context; not safe for concurrent backward passes.
template <typename T>
class GradTape {
 public:
  using BackwardFn = std::function<void(const std::vector<T>&, GradTape<T>&)>;

  // Registers `t` as a differentiable leaf and returns the tracked handle.
  Tensor<T> leaf(const Tensor<T>& t) {
    Tensor<T> out = t;
    out.tape_ = this;
    out.node_ = add_node(t.numel(), {}, nullptr);
    return out;
  }

  int add_node(std::size_t out_numel, std::vector<int> parents, BackwardFn backward) {
    nodes_.push_back(Node{std::move(parents), std::move(backward), out_numel});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Seeds the root with 1 and replays the tape in reverse. The root must be a
  // scalar recorded on this tape.
  void backward(const Tensor<T>& root) {
    check_shape(root.tape() == this && root.node() >= 0,
                "backward: root is not recorded on this tape");
    check_shape(root.numel() == 1, "backward: root must be scalar");
    grads_.assign(nodes_.size(), {});
    grads_[root.node()] = {T(1)};
    for (int i = root.node(); i >= 0; --i) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(grads_[i], *this);
    }
  }

  // Accumulation buffer for a node, allocated on first touch.
  std::vector<T>& grad_buffer(int node) {
    auto& buf = grads_[node];
    if (buf.empty()) buf.assign(nodes_[node].numel, T(0));
    return buf;
  }

  bool has_grad(const Tensor<T>& t) const {
    return t.tape() == this && t.node() >= 0 &&
           t.node() < static_cast<int>(grads_.size()) && !grads_[t.node()].empty();
  }

  // Gradient w.r.t. a tracked tensor; zeros when the root does not reach it.
  Tensor<T> grad(const Tensor<T>& t) const {
    check_shape(t.tape() == this && t.node() >= 0, "grad: tensor is not tracked on this tape");
    if (!has_grad(t)) return Tensor<T>::zeros(t.shape());
    return Tensor<T>(t.shape(), grads_[t.node()]);
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    grads_.clear();
  }

  // Internal: attach a freshly computed op result to this tape.
  Tensor<T> attach(Tensor<T> out, int node) {
    out.tape_ = this;
    out.node_ = node;
    return out;
  }

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn backward;
    std::size_t numel;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

namespace detail {

template <typename T>
GradTape<T>* common_tape(std::initializer_list<const Tensor<T>*> ins) {
  GradTape<T>* tape = nullptr;
  for (const Tensor<T>* t : ins) {
    if (!t->tracked()) continue;
    if (tape == nullptr) tape = t->tape();
    check_shape(tape == t->tape(), "op: inputs recorded on different tapes");
  }
  return tape;
}

// Finalizes an op: optional finite scan, then tape recording when any input
// is tracked. `backward` receives the upstream grad and the tape.
template <typename T, typename F>
Tensor<T> finish_op(const char* name, Shape out_shape, std::vector<T> out_data,
                    std::initializer_list<const Tensor<T>*> ins, F&& backward) {
  if (finite_checks_enabled()) scan_finite(out_data, name);
  Tensor<T> out(std::move(out_shape), std::move(out_data));
  GradTape<T>* tape = common_tape<T>(ins);
  if (tape == nullptr) return out;
  std::vector<int> parents;
  for (const Tensor<T>* t : ins)
    if (t->tracked()) parents.push_back(t->node());
  int node = tape->add_node(out.numel(), std::move(parents), std::forward<F>(backward));
  return tape->attach(std::move(out), node);
}

template <typename T>
void axpy(std::vector<T>& dst, const std::vector<T>& src, T alpha) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(),
              "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::finish_op<T>(
      "add", a.shape(), std::move(out), {&a, &b},
      [na, nb, ta, tb](const std::vector<T>& g, GradTape<T>& tape) {
        if (ta) detail::axpy(tape.grad_buffer(na), g, T(1));
        if (tb) detail::axpy(tape.grad_buffer(nb), g, T(1));
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(),
              "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::finish_op<T>(
      "sub", a.shape(), std::move(out), {&a, &b},
      [na, nb, ta, tb](const std::vector<T>& g, GradTape<T>& tape) {
        if (ta) detail::axpy(tape.grad_buffer(na), g, T(1));
        if (tb) detail::axpy(tape.grad_buffer(nb), g, T(-1));
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.shape() == b.shape(),
              "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  auto pa = a.shared_values();
  auto pb = b.shared_values();
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::finish_op<T>(
      "mul", a.shape(), std::move(out), {&a, &b},
      [na, nb, ta, tb, pa, pb](const std::vector<T>& g, GradTape<T>& tape) {
        if (ta) {
          auto& da = tape.grad_buffer(na);
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*pb)[i];
        }
        if (tb) {
          auto& db = tape.grad_buffer(nb);
          for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (*pa)[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T alpha) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * a.at(i);
  int na = a.node();
  return detail::finish_op<T>("scale", a.shape(), std::move(out), {&a},
                              [na, alpha](const std::vector<T>& g, GradTape<T>& tape) {
                                detail::axpy(tape.grad_buffer(na), g, alpha);
                              });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
  int na = a.node();
  return detail::finish_op<T>("add_scalar", a.shape(), std::move(out), {&a},
                              [na](const std::vector<T>& g, GradTape<T>& tape) {
                                detail::axpy(tape.grad_buffer(na), g, T(1));
                              });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > T(0) ? x.at(i) : T(0);
  int nx = x.node();
  auto px = x.shared_values();
  return detail::finish_op<T>("relu", x.shape(), std::move(out), {&x},
                              [nx, px](const std::vector<T>& g, GradTape<T>& tape) {
                                auto& dx = tape.grad_buffer(nx);
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  if ((*px)[i] > T(0)) dx[i] += g[i];
                              });
}

// Exact error-function GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = static_cast<double>(x.at(i));
    out[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
  }
  int nx = x.node();
  auto px = x.shared_values();
  return detail::finish_op<T>(
      "gelu", x.shape(), std::move(out), {&x},
      [nx, px](const std::vector<T>& g, GradTape<T>& tape) {
        auto& dx = tape.grad_buffer(nx);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double v = static_cast<double>((*px)[i]);
          double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
          dx[i] += g[i] * static_cast<T>(phi + v * pdf);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops.

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape new_shape) {
  check_shape(shape_numel(new_shape) == t.numel(),
              "reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(new_shape));
  std::vector<T> out(t.values());
  int nt = t.node();
  return detail::finish_op<T>("reshape", std::move(new_shape), std::move(out), {&t},
                              [nt](const std::vector<T>& g, GradTape<T>& tape) {
                                detail::axpy(tape.grad_buffer(nt), g, T(1));
                              });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& t) {
  check_shape(t.rank() == 2, "transpose: expected rank-2, got " + shape_str(t.shape()));
  std::size_t r = t.extent(0), c = t.extent(1);
  std::vector<T> out(t.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t.at(i, j);
  int nt = t.node();
  return detail::finish_op<T>("transpose", Shape{c, r}, std::move(out), {&t},
                              [nt, r, c](const std::vector<T>& g, GradTape<T>& tape) {
                                auto& dt = tape.grad_buffer(nt);
                                for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < c; ++j)
                                    dt[i * c + j] += g[j * r + i];
                              });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t r0, std::size_t r1) {
  check_shape(t.rank() == 2 && r0 < r1 && r1 <= t.extent(0), "slice_rows: bad range");
  std::size_t c = t.extent(1);
  std::vector<T> out(t.data() + r0 * c, t.data() + r1 * c);
  int nt = t.node();
  return detail::finish_op<T>("slice_rows", Shape{r1 - r0, c}, std::move(out), {&t},
                              [nt, r0, c](const std::vector<T>& g, GradTape<T>& tape) {
                                auto& dt = tape.grad_buffer(nt);
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  dt[r0 * c + i] += g[i];
                              });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& t, std::size_t c0, std::size_t c1) {
  check_shape(t.rank() == 2 && c0 < c1 && c1 <= t.extent(1), "slice_cols: bad range");
  std::size_t r = t.extent(0), c = t.extent(1), w = c1 - c0;
  std::vector<T> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = t.at(i, c0 + j);
  int nt = t.node();
  return detail::finish_op<T>("slice_cols", Shape{r, w}, std::move(out), {&t},
                              [nt, r, c, c0, w](const std::vector<T>& g, GradTape<T>& tape) {
                                auto& dt = tape.grad_buffer(nt);
                                for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < w; ++j)
                                    dt[i * c + c0 + j] += g[i * w + j];
                              });
}

// Stacks rank-2 tensors with equal row counts along columns.
template <typename T>
Tensor<T> hstack(const std::vector<Tensor<T>>& parts) {
  check_shape(!parts.empty(), "hstack: no inputs");
  std::size_t r = parts[0].extent(0), total = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == 2 && p.extent(0) == r, "hstack: row count mismatch");
    total += p.extent(1);
  }
  std::vector<T> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t c = p.extent(1);
    for (std::size_t i = 0; i < r; ++i)
      std::copy(p.data() + i * c, p.data() + (i + 1) * c, out.begin() + i * total + off);
    off += c;
  }
  GradTape<T>* tape = nullptr;
  for (const auto& p : parts)
    if (p.tracked()) {
      check_shape(tape == nullptr || tape == p.tape(), "hstack: mixed tapes");
      tape = p.tape();
    }
  if (finite_checks_enabled()) scan_finite(out, "hstack");
  Tensor<T> result(Shape{r, total}, std::move(out));
  if (tape == nullptr) return result;
  struct Piece {
    int node;
    std::size_t cols;
    std::size_t offset;
  };
  std::vector<Piece> pieces;
  std::vector<int> parents;
  off = 0;
  for (const auto& p : parts) {
    if (p.tracked()) {
      pieces.push_back({p.node(), p.extent(1), off});
      parents.push_back(p.node());
    }
    off += p.extent(1);
  }
  int node = tape->add_node(
      result.numel(), std::move(parents),
      [pieces, r, total](const std::vector<T>& g, GradTape<T>& tp) {
        for (const auto& pc : pieces) {
          auto& d = tp.grad_buffer(pc.node);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc.cols; ++j)
              d[i * pc.cols + j] += g[i * total + pc.offset + j];
        }
      });
  return tape->attach(std::move(result), node);
}

template <typename T>
Tensor<T> vstack(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(1),
              "vstack: column count mismatch");
  std::size_t ra = a.extent(0), rb = b.extent(0), c = a.extent(1);
  std::vector<T> out;
  out.reserve((ra + rb) * c);
  out.insert(out.end(), a.data(), a.data() + ra * c);
  out.insert(out.end(), b.data(), b.data() + rb * c);
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::finish_op<T>(
      "vstack", Shape{ra + rb, c}, std::move(out), {&a, &b},
      [na, nb, ta, tb, ra, c](const std::vector<T>& g, GradTape<T>& tape) {
        if (ta) {
          auto& da = tape.grad_buffer(na);
          for (std::size_t i = 0; i < ra * c; ++i) da[i] += g[i];
        }
        if (tb) {
          auto& db = tape.grad_buffer(nb);
          for (std::size_t i = 0; i < g.size() - ra * c; ++i) db[i] += g[ra * c + i];
        }
      });
}

// Broadcasts a length-C vector to R identical rows.
template <typename T>
Tensor<T> tile_row(const Tensor<T>& v, std::size_t rows) {
  check_shape(v.rank() == 1, "tile_row: expected rank-1 vector");
  std::size_t c = v.extent(0);
  std::vector<T> out(rows * c);
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(v.data(), v.data() + c, out.begin() + i * c);
  int nv = v.node();
  return detail::finish_op<T>("tile_row", Shape{rows, c}, std::move(out), {&v},
                              [nv, rows, c](const std::vector<T>& g, GradTape<T>& tape) {
                                auto& dv = tape.grad_buffer(nv);
                                for (std::size_t i = 0; i < rows; ++i)
                                  for (std::size_t j = 0; j < c; ++j) dv[j] += g[i * c + j];
                              });
}

// m[r, c] + v[c] for every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& m, const Tensor<T>& v) {
  check_shape(m.rank() == 2 && v.rank() == 1 && v.extent(0) == m.extent(1),
              "add_rowvec: vector length must equal column count");
  std::size_t r = m.extent(0), c = m.extent(1);
  std::vector<T> out(m.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.at(i, j) + v.at(j);
  int nm = m.node(), nv = v.node();
  bool tm = m.tracked(), tv = v.tracked();
  return detail::finish_op<T>(
      "add_rowvec", m.shape(), std::move(out), {&m, &v},
      [nm, nv, tm, tv, r, c](const std::vector<T>& g, GradTape<T>& tape) {
        if (tm) detail::axpy(tape.grad_buffer(nm), g, T(1));
        if (tv) {
          auto& dv = tape.grad_buffer(nv);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dv[j] += g[i * c + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix multiply. Computed with an ikj loop so the k-reduction order per
// output row is fixed; rows are split across threads.

namespace detail {

template <typename T>
void gemm_rowmajor(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, std::size_t{16384} / std::max<std::size_t>(k * n, 1) + 1,
               [&](std::size_t r0, std::size_t r1) {
                 for (std::size_t i = r0; i < r1; ++i) {
                   T* crow = c + i * n;
                   std::fill(crow, crow + n, T(0));
                   const T* arow = a + i * k;
                   for (std::size_t p = 0; p < k; ++p) {
                     T av = arow[p];
                     const T* brow = b + p * n;
                     for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                   }
                 }
               });
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 inputs");
  check_shape(a.extent(1) == b.extent(0),
              "matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<T> out(m * n);
  detail::gemm_rowmajor(a.data(), b.data(), out.data(), m, k, n);
  auto pa = a.shared_values();
  auto pb = b.shared_values();
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::finish_op<T>(
      "matmul", Shape{m, n}, std::move(out), {&a, &b},
      [na, nb, ta, tb, pa, pb, m, k, n](const std::vector<T>& g, GradTape<T>& tape) {
        if (ta) {
          // dA = g . B^T
          auto& da = tape.grad_buffer(na);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = T(0);
              const T* grow = g.data() + i * n;
              const T* brow = pb->data() + p * n;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              da[i * k + p] += acc;
            }
        }
        if (tb) {
          // dB = A^T . g
          auto& db = tape.grad_buffer(nb);
          for (std::size_t i = 0; i < m; ++i) {
            const T* arow = pa->data() + i * k;
            const T* grow = g.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              T av = arow[p];
              T* drow = db.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Tensor<T> sum(const Tensor<T>& t) {
  T acc = T(0);
  for (std::size_t i = 0; i < t.numel(); ++i) acc += t.at(i);
  int nt = t.node();
  std::size_t n = t.numel();
  return detail::finish_op<T>("sum", Shape{1}, std::vector<T>{acc}, {&t},
                              [nt, n](const std::vector<T>& g, GradTape<T>& tape) {
                                auto& dt = tape.grad_buffer(nt);
                                for (std::size_t i = 0; i < n; ++i) dt[i] += g[0];
                              });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& t) {
  check_shape(t.numel() > 0, "mean: empty tensor");
  return scale(sum(t), T(1) / static_cast<T>(t.numel()));
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, with max subtraction for stability.

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  check_shape(x.rank() >= 1, "softmax: scalar input");
  std::size_t n = x.extent(x.rank() - 1);
  std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data() + r * n;
    T* orow = out.data() + r * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= denom;
  }
  auto py = std::make_shared<std::vector<T>>(out);
  int nx = x.node();
  return detail::finish_op<T>(
      "softmax", x.shape(), std::move(out), {&x},
      [nx, py, rows, n](const std::vector<T>& g, GradTape<T>& tape) {
        auto& dx = tape.grad_buffer(nx);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = py->data() + r * n;
          const T* gr = g.data() + r * n;
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += y[j] * (gr[j] - dot);
        }
      });
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis (population variance, then affine).

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-6) {
  check_shape(x.rank() >= 1, "layer_norm: scalar input");
  std::size_t d = x.extent(x.rank() - 1);
  check_shape(gamma.numel() == d && beta.numel() == d,
              "layer_norm: gamma/beta length must equal last axis " + std::to_string(d));
  std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = row[j] - mu;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(inv);
    for (std::size_t j = 0; j < d; ++j) {
      T h = static_cast<T>((row[j] - mu) * inv);
      xhat[r * d + j] = h;
      out[r * d + j] = gamma.at(j) * h + beta.at(j);
    }
  }
  auto pxhat = std::make_shared<std::vector<T>>(std::move(xhat));
  auto pinv = std::make_shared<std::vector<T>>(std::move(inv_std));
  auto pgamma = gamma.shared_values();
  int nx = x.node(), ng = gamma.node(), nb = beta.node();
  bool tx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
  return detail::finish_op<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [nx, ng, nb, tx, tg, tb, pxhat, pinv, pgamma, rows, d](const std::vector<T>& g,
                                                             GradTape<T>& tape) {
        if (tg) {
          auto& dg = tape.grad_buffer(ng);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * (*pxhat)[r * d + j];
        }
        if (tb) {
          auto& db = tape.grad_buffer(nb);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
        }
        if (tx) {
          auto& dx = tape.grad_buffer(nx);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * d;
            const T* h = pxhat->data() + r * d;
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              double dh = static_cast<double>(gr[j]) * (*pgamma)[j];
              mean_dh += dh;
              mean_dh_h += dh * h[j];
            }
            mean_dh /= d;
            mean_dh_h /= d;
            for (std::size_t j = 0; j < d; ++j) {
              double dh = static_cast<double>(gr[j]) * (*pgamma)[j];
              dx[r * d + j] +=
                  static_cast<T>((*pinv)[r] * (dh - mean_dh - h[j] * mean_dh_h));
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Dropout with an explicit generator so training runs are reproducible.
// Keep probability scaling (inverted dropout); identity when rate == 0.

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng) {
  check_config(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uni(rng) < rate ? T(0) : keep_scale;
    out[i] = x.at(i) * (*mask)[i];
  }
  int nx = x.node();
  return detail::finish_op<T>("dropout", x.shape(), std::move(out), {&x},
                              [nx, mask](const std::vector<T>& g, GradTape<T>& tape) {
                                auto& dx = tape.grad_buffer(nx);
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  dx[i] += g[i] * (*mask)[i];
                              });
}

// Test/demo helper: permutes the rows of a rank-2 tensor (not differentiable).
template <typename T>
Tensor<T> permute_rows(const Tensor<T>& t, const std::vector<std::size_t>& perm) {
  check_shape(t.rank() == 2 && perm.size() == t.extent(0), "permute_rows: bad permutation");
  std::size_t c = t.extent(1);
  std::vector<T> out(t.numel());
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy(t.data() + perm[i] * c, t.data() + (perm[i] + 1) * c, out.begin() + i * c);
  return Tensor<T>(t.shape(), std::move(out));
}

}  // namespace dpt
