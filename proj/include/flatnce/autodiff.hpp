#pragma once

// Tape-based reverse-mode differentiation over Matrix<T>.
//
// A Tape records every node in creation order, which is already a topological order
// of the (acyclic) graph. Nodes created from leaves carry gradient; constants and
// detached nodes do not, and neither do nodes built only from them. The tape is
// rebuilt for every batch and must stay on one thread.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "flatnce/matrix.hpp"

namespace flatnce {

enum class Op : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  matmul,
  exp,
  log,
  relu,
  transpose,
  row_sum,
  row_mean,
  sum,
  mean,
  row_l2_normalize,
  add_row,
  diag,
  subtract_diagonal,
  reshape,
  logsumexp_row,
  logsumexp_row_offdiag,
  detach,
};

/// Order in which backward() visits nodes. Both are valid reverse topological orders.
enum class BackwardOrder { reverse_creation, depth_first };

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const { return tape->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable input (parameter).
  Var<T> leaf(Matrix<T> value) { return push(std::move(value), Op::leaf, {}, {}, true); }
  /// A constant input (data); never receives a meaningful gradient.
  Var<T> constant(Matrix<T> value) { return push(std::move(value), Op::constant, {}, {}, false); }

  const Matrix<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  Op op(Var<T> v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() root with respect to v (zeros if v does not
  /// depend on any leaf or was not reached).
  Matrix<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) return Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var<T> root, BackwardOrder order = BackwardOrder::reverse_creation) {
    const Matrix<T>& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw ShapeError("backward: root must be a scalar, got " + shape_str(rv));
    }
    for (auto& n : nodes_) n.grad = Matrix<T>();
    Node& r = nodes_[root.id];
    if (!r.requires_grad) return;
    r.grad = Matrix<T>::scalar(T(1));

    if (order == BackwardOrder::reverse_creation) {
      for (std::size_t i = root.id + 1; i-- > 0;) propagate(i);
    } else {
      for (auto it = postorder(root.id); !it.empty(); it.pop_back()) propagate(it.back());
    }
  }

  // Graph construction; used by the free op functions below.
  Var<T> push(Matrix<T> value, Op op, std::vector<std::size_t> inputs, T param,
              bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.inputs = std::move(inputs);
    n.param = param;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> push_op(Matrix<T> value, Op op, std::vector<std::size_t> inputs, T param = T(0)) {
    bool rg = false;
    for (auto id : inputs) rg = rg || nodes_.at(id).requires_grad;
    if (op == Op::detach) rg = false;
    return push(std::move(value), op, std::move(inputs), param, rg);
  }

 private:
  struct Node {
    Matrix<T> value;
    Op op = Op::constant;
    std::vector<std::size_t> inputs;
    T param = T(0);
    bool requires_grad = false;
    Matrix<T> grad;
  };

  std::vector<Node> nodes_;

  // Depth-first postorder from the root; reversed it is a topological order.
  std::vector<std::size_t> postorder(std::size_t root) const {
    std::vector<std::size_t> out;
    std::vector<std::uint8_t> state(nodes_.size(), 0);
    std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
    state[root] = 1;
    while (!stack.empty()) {
      auto& [id, next] = stack.back();
      const auto& ins = nodes_[id].inputs;
      if (next < ins.size()) {
        const std::size_t child = ins[next++];
        if (state[child] == 0) {
          state[child] = 1;
          stack.emplace_back(child, 0);
        }
      } else {
        out.push_back(id);
        stack.pop_back();
      }
    }
    // out is postorder (inputs before consumers); walking it backwards from the end
    // visits consumers first.
    return out;
  }

  Matrix<T>& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(std::size_t id, const Matrix<T>& g) {
    if (!nodes_[id].requires_grad) return;
    Matrix<T>& slot = grad_slot(id);
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  void propagate(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) return;
    const Matrix<T>& G = n.grad;
    const auto& in = n.inputs;
    auto input = [&](std::size_t k) -> const Matrix<T>& { return nodes_[in[k]].value; };
    auto wants = [&](std::size_t k) { return nodes_[in[k]].requires_grad; };

    switch (n.op) {
      case Op::leaf:
      case Op::constant:
      case Op::detach:
        break;
      case Op::add:
        accumulate(in[0], G);
        accumulate(in[1], G);
        break;
      case Op::sub:
        accumulate(in[0], G);
        if (wants(1)) accumulate(in[1], flatnce::scale(G, T(-1)));
        break;
      case Op::mul:
        if (wants(0)) accumulate(in[0], flatnce::mul(G, input(1)));
        if (wants(1)) accumulate(in[1], flatnce::mul(G, input(0)));
        break;
      case Op::scale:
        accumulate(in[0], flatnce::scale(G, n.param));
        break;
      case Op::add_scalar:
        accumulate(in[0], G);
        break;
      case Op::matmul:
        if (wants(0)) accumulate(in[0], flatnce::matmul(G, flatnce::transpose(input(1))));
        if (wants(1)) accumulate(in[1], flatnce::matmul(flatnce::transpose(input(0)), G));
        break;
      case Op::exp:
        accumulate(in[0], flatnce::mul(G, n.value));
        break;
      case Op::log:
        accumulate(in[0], detail::zip(G, input(0), "log", [](T g, T x) { return g / x; }));
        break;
      case Op::relu:
        accumulate(in[0], detail::zip(G, input(0), "relu",
                                      [](T g, T x) { return x > T(0) ? g : T(0); }));
        break;
      case Op::transpose:
        accumulate(in[0], flatnce::transpose(G));
        break;
      case Op::row_sum:
      case Op::row_mean: {
        const Matrix<T>& a = input(0);
        const T f = n.op == Op::row_mean ? T(1) / static_cast<T>(a.cols()) : T(1);
        Matrix<T> ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) ga(i, j) = G[i] * f;
        accumulate(in[0], ga);
        break;
      }
      case Op::sum:
      case Op::mean: {
        const Matrix<T>& a = input(0);
        const T f = n.op == Op::mean ? G[0] / static_cast<T>(a.size()) : G[0];
        accumulate(in[0], Matrix<T>(a.rows(), a.cols(), f));
        break;
      }
      case Op::row_l2_normalize: {
        const Matrix<T>& a = input(0);
        const Matrix<T>& y = n.value;
        Matrix<T> ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          T ss = 0, yg = 0;
          for (std::size_t j = 0; j < a.cols(); ++j) {
            ss += a(i, j) * a(i, j);
            yg += y(i, j) * G(i, j);
          }
          const T norm = std::sqrt(ss);
          if (norm < kNormalizeEps<T>) {
            for (std::size_t j = 0; j < a.cols(); ++j) ga(i, j) = G(i, j) / kNormalizeEps<T>;
          } else {
            for (std::size_t j = 0; j < a.cols(); ++j) ga(i, j) = (G(i, j) - y(i, j) * yg) / norm;
          }
        }
        accumulate(in[0], ga);
        break;
      }
      case Op::add_row: {
        accumulate(in[0], G);
        if (wants(1)) {
          Matrix<T> gr(1, G.cols());
          for (std::size_t i = 0; i < G.rows(); ++i)
            for (std::size_t j = 0; j < G.cols(); ++j) gr[j] += G(i, j);
          accumulate(in[1], gr);
        }
        break;
      }
      case Op::diag: {
        const Matrix<T>& a = input(0);
        Matrix<T> ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) ga(i, i) = G[i];
        accumulate(in[0], ga);
        break;
      }
      case Op::subtract_diagonal: {
        Matrix<T> ga = G;
        for (std::size_t i = 0; i < G.rows(); ++i) {
          T s = 0;
          for (T g : G.row(i)) s += g;
          ga(i, i) -= s;
        }
        accumulate(in[0], ga);
        break;
      }
      case Op::reshape: {
        const Matrix<T>& a = input(0);
        accumulate(in[0], flatnce::reshape(G, a.rows(), a.cols()));
        break;
      }
      case Op::logsumexp_row:
      case Op::logsumexp_row_offdiag: {
        const Matrix<T>& a = input(0);
        const bool offdiag = n.op == Op::logsumexp_row_offdiag;
        Matrix<T> ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          const T lse = n.value[i];
          for (std::size_t j = 0; j < a.cols(); ++j) {
            if (offdiag && j == i) continue;
            ga(i, j) = G[i] * std::exp(a(i, j) - lse);
          }
        }
        accumulate(in[0], ga);
        break;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Tape overloads of the value kernels.

namespace detail {
template <class T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
  return *a.tape;
}
}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& t = detail::same_tape(a, b);
  return t.push_op(flatnce::add(a.value(), b.value()), Op::add, {a.id, b.id});
}
template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& t = detail::same_tape(a, b);
  return t.push_op(flatnce::sub(a.value(), b.value()), Op::sub, {a.id, b.id});
}
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& t = detail::same_tape(a, b);
  return t.push_op(flatnce::mul(a.value(), b.value()), Op::mul, {a.id, b.id});
}
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& t = detail::same_tape(a, b);
  return t.push_op(flatnce::matmul(a.value(), b.value()), Op::matmul, {a.id, b.id});
}
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  auto& t = detail::same_tape(a, row);
  return t.push_op(flatnce::add_row(a.value(), row.value()), Op::add_row, {a.id, row.id});
}
template <class T, class S>
Var<T> scale(Var<T> a, S s) {
  const T st = static_cast<T>(s);
  return a.tape->push_op(flatnce::scale(a.value(), st), Op::scale, {a.id}, st);
}
template <class T, class S>
Var<T> add_scalar(Var<T> a, S s) {
  const T st = static_cast<T>(s);
  return a.tape->push_op(flatnce::add_scalar(a.value(), st), Op::add_scalar, {a.id}, st);
}

#define FLATNCE_UNARY_VAR_OP(name)                                            \
  template <class T>                                                          \
  Var<T> name(Var<T> a) {                                                     \
    return a.tape->push_op(flatnce::name(a.value()), Op::name, {a.id});       \
  }
FLATNCE_UNARY_VAR_OP(exp)
FLATNCE_UNARY_VAR_OP(log)
FLATNCE_UNARY_VAR_OP(relu)
FLATNCE_UNARY_VAR_OP(transpose)
FLATNCE_UNARY_VAR_OP(row_sum)
FLATNCE_UNARY_VAR_OP(row_mean)
FLATNCE_UNARY_VAR_OP(sum)
FLATNCE_UNARY_VAR_OP(mean)
FLATNCE_UNARY_VAR_OP(row_l2_normalize)
FLATNCE_UNARY_VAR_OP(diag)
FLATNCE_UNARY_VAR_OP(subtract_diagonal)
FLATNCE_UNARY_VAR_OP(logsumexp_row_offdiag)
FLATNCE_UNARY_VAR_OP(detach)
#undef FLATNCE_UNARY_VAR_OP

template <class T>
Var<T> logsumexp_row(Var<T> a, bool exclude_diagonal = false) {
  if (exclude_diagonal) return logsumexp_row_offdiag(a);
  return a.tape->push_op(flatnce::logsumexp_row(a.value()), Op::logsumexp_row, {a.id});
}

template <class T>
Var<T> reshape(Var<T> a, std::size_t rows, std::size_t cols) {
  return a.tape->push_op(flatnce::reshape(a.value(), rows, cols), Op::reshape, {a.id});
}

// ---------------------------------------------------------------------------
// Central finite differences; the oracle for every backward rule.

/// (f(θ + h e_k) − f(θ − h e_k)) / 2h for every coordinate k of a single matrix.
template <class T, class F>
Matrix<T> finite_difference_grad(F&& f, Matrix<T> params, T h) {
  if (!(h > T(0))) throw std::invalid_argument("finite_difference_grad: h must be positive");
  Matrix<T> g(params.rows(), params.cols());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const T orig = params[k];
    params[k] = orig + h;
    const T fp = f(static_cast<const Matrix<T>&>(params));
    params[k] = orig - h;
    const T fm = f(static_cast<const Matrix<T>&>(params));
    params[k] = orig;
    g[k] = (fp - fm) / (T(2) * h);
  }
  return g;
}

/// Same, over a list of parameter matrices; f receives the whole list.
template <class T, class F>
std::vector<Matrix<T>> finite_difference_grad(F&& f, std::vector<Matrix<T>> params, T h) {
  if (!(h > T(0))) throw std::invalid_argument("finite_difference_grad: h must be positive");
  std::vector<Matrix<T>> out;
  out.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix<T> g(params[p].rows(), params[p].cols());
    for (std::size_t k = 0; k < params[p].size(); ++k) {
      const T orig = params[p][k];
      params[p][k] = orig + h;
      const T fp = f(static_cast<const std::vector<Matrix<T>>&>(params));
      params[p][k] = orig - h;
      const T fm = f(static_cast<const std::vector<Matrix<T>>&>(params));
      params[p][k] = orig;
      g[k] = (fp - fm) / (T(2) * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace flatnce
