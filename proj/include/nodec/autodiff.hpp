#pragma once

// Tape-based reverse-mode automatic differentiation over dense row-major
// tensors of doubles.
//
// A Var is a handle to an immutable value. Vars created from a Tape (or
// produced by an op with at least one on-tape input) are recorded on that
// tape; everything else is a constant and costs nothing beyond its value.
// Evaluating the same code with constants or with tape variables runs the
// same forward kernels, so plain and recorded runs agree bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nodec::ad {

class Shape {
 public:
  static constexpr std::size_t max_rank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > max_rank) throw std::invalid_argument("Shape: rank exceeds 4");
    for (auto d : dims) dims_[rank_++] = d;
  }
  explicit Shape(std::span<const std::size_t> dims) {
    if (dims.size() > max_rank) throw std::invalid_argument("Shape: rank exceeds 4");
    for (auto d : dims) dims_[rank_++] = d;
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

  std::size_t size() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (std::size_t i = 0; i < rank_; ++i)
      if (dims_[i] != o.dims_[i]) return false;
    return true;
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? ", " : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  std::array<std::size_t, max_rank> dims_{};
  std::size_t rank_ = 0;
};

struct Tensor {
  Shape shape;
  std::vector<double> values = std::vector<double>(1, 0.0);

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(s), values(s.size(), fill) {}
  Tensor(Shape s, std::vector<double> v) : shape(s), values(std::move(v)) {
    if (values.size() != shape.size())
      throw std::invalid_argument("Tensor: shape " + shape.str() + " needs " +
                                  std::to_string(shape.size()) + " values, got " +
                                  std::to_string(values.size()));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const Shape s{v.size()};
    return Tensor(s, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  double at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }
  double item() const {
    if (values.size() != 1) throw std::invalid_argument("Tensor::item on shape " + shape.str());
    return values[0];
  }
  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

/// Raised when operand shapes are incompatible; carries both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
      : std::invalid_argument(op + ": incompatible shapes " + lhs.str() + " and " + rhs.str()),
        lhs_(lhs),
        rhs_(rhs) {}
  const Shape& lhs() const { return lhs_; }
  const Shape& rhs() const { return rhs_; }

 private:
  Shape lhs_, rhs_;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

class Var {
 public:
  Var() : value_(std::make_shared<const Tensor>()) {}
  explicit Var(Tensor t) : value_(std::make_shared<const Tensor>(std::move(t))) {}

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape; }
  std::size_t size() const { return value_->size(); }
  double item() const { return value_->item(); }
  double operator[](std::size_t i) const { return value_->values[i]; }

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Leaf gradients produced by Tape::backward. Interior nodes are released
/// during the sweep; leaves (parameters, inputs) keep their totals.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor>> by_id) : by_id_(std::move(by_id)) {}

  /// Total derivative of the loss w.r.t. `v`; zeros when `v` is unreachable.
  Tensor of(const Var& v) const {
    if (reached(v)) return *by_id_[v.id()];
    return Tensor(v.shape(), 0.0);
  }
  bool reached(const Var& v) const {
    return v.on_tape() && v.id() < by_id_.size() && by_id_[v.id()].has_value();
  }

 private:
  std::vector<std::optional<Tensor>> by_id_;
};

class Tape {
 public:
  /// Accumulates the upstream gradient into each parent's buffer. Buffers
  /// of constant parents are null.
  using Backprop = std::function<void(const Tensor& grad, std::span<Tensor* const> parents)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records a leaf (typically a trainable parameter).
  Var variable(Tensor t) { return push(std::make_shared<const Tensor>(std::move(t)), {}, {}); }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Reverse sweep from a scalar loss. Nodes are visited in strictly
  /// decreasing id order, each at most once.
  Gradients backward(const Var& loss) const {
    if (loss.size() != 1)
      throw AutodiffError("backward: loss must be scalar, got shape " + loss.shape().str());
    if (loss.tape() != this) throw AutodiffError("backward: loss is not recorded on this tape");

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[loss.id()].emplace(loss.shape(), 1.0);

    std::vector<Tensor*> parent_buf;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      if (!grads[id]) continue;
      const Node& node = nodes_[id];
      if (!node.backprop) continue;
      parent_buf.assign(node.parents.size(), nullptr);
      for (std::size_t k = 0; k < node.parents.size(); ++k) {
        const std::size_t p = node.parents[k];
        if (p == npos) continue;
        if (!grads[p]) grads[p].emplace(nodes_[p].value->shape, 0.0);
        parent_buf[k] = &*grads[p];
      }
      node.backprop(*grads[id], std::span<Tensor* const>(parent_buf));
      grads[id].reset();
    }
    return Gradients(std::move(grads));
  }

  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  /// Records the result of an op. Returns a constant when no input is on a tape.
  static Var record(Tensor out, std::span<const Var* const> inputs, Backprop bp) {
    Tape* tape = nullptr;
    for (const Var* in : inputs) {
      if (!in->on_tape()) continue;
      if (tape && tape != in->tape()) throw AutodiffError("op mixes variables from different tapes");
      tape = in->tape();
    }
    if (!tape) return Var(std::move(out));
    std::vector<std::size_t> parents(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) parents[k] = inputs[k]->on_tape() ? inputs[k]->id() : npos;
    return tape->push(std::make_shared<const Tensor>(std::move(out)), std::move(parents), std::move(bp));
  }
  static Var record(Tensor out, std::initializer_list<const Var*> inputs, Backprop bp) {
    return record(std::move(out), std::span<const Var* const>(inputs.begin(), inputs.size()), std::move(bp));
  }

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    std::vector<std::size_t> parents;
    Backprop backprop;
  };

  Var push(std::shared_ptr<const Tensor> value, std::vector<std::size_t> parents, Backprop bp) {
    Var v;
    v.value_ = value;
    v.tape_ = this;
    v.id_ = nodes_.size();
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(bp)});
    return v;
  }

  std::vector<Node> nodes_;
};

inline Var constant(Tensor t) { return Var(std::move(t)); }
inline Var scalar(double v) { return Var(Tensor::scalar(v)); }

// ---------------------------------------------------------------------------
// Elementwise ops

enum class Unary { neg, square, sin, cos, exp, sqrt, relu, elu };
enum class Binary { add, sub, mul };

namespace detail {

inline bool is_scalar(const Shape& s) { return s.rank() == 0; }

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = f(a.values[i]);
  return out;
}

}  // namespace detail

/// ELU uses alpha = 1.
inline Var elementwise(Unary kind, const Var& a) {
  const auto av = std::make_shared<const Tensor>(a.value());
  Tensor out(a.shape(), 0.0);
  const auto& x = a.value().values;
  auto& y = out.values;
  const std::size_t n = x.size();
  switch (kind) {
    case Unary::neg: for (std::size_t i = 0; i < n; ++i) y[i] = -x[i]; break;
    case Unary::square: for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * x[i]; break;
    case Unary::sin: for (std::size_t i = 0; i < n; ++i) y[i] = std::sin(x[i]); break;
    case Unary::cos: for (std::size_t i = 0; i < n; ++i) y[i] = std::cos(x[i]); break;
    case Unary::exp: for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]); break;
    case Unary::sqrt: for (std::size_t i = 0; i < n; ++i) y[i] = std::sqrt(x[i]); break;
    case Unary::relu: for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0; break;
    case Unary::elu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : std::expm1(x[i]);
      break;
  }
  if (!a.on_tape()) return Var(std::move(out));
  auto outv = std::make_shared<const Tensor>(out);
  return Tape::record(std::move(out), {&a}, [kind, av, outv](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    auto& d = p[0]->values;
    const auto& x = av->values;
    const auto& y = outv->values;
    const std::size_t n = x.size();
    switch (kind) {
      case Unary::neg: for (std::size_t i = 0; i < n; ++i) d[i] -= g.values[i]; break;
      case Unary::square: for (std::size_t i = 0; i < n; ++i) d[i] += 2.0 * x[i] * g.values[i]; break;
      case Unary::sin: for (std::size_t i = 0; i < n; ++i) d[i] += std::cos(x[i]) * g.values[i]; break;
      case Unary::cos: for (std::size_t i = 0; i < n; ++i) d[i] -= std::sin(x[i]) * g.values[i]; break;
      case Unary::exp: for (std::size_t i = 0; i < n; ++i) d[i] += y[i] * g.values[i]; break;
      case Unary::sqrt: for (std::size_t i = 0; i < n; ++i) d[i] += 0.5 / y[i] * g.values[i]; break;
      case Unary::relu: for (std::size_t i = 0; i < n; ++i) d[i] += x[i] > 0.0 ? g.values[i] : 0.0; break;
      case Unary::elu:
        for (std::size_t i = 0; i < n; ++i) d[i] += (x[i] > 0.0 ? 1.0 : y[i] + 1.0) * g.values[i];
        break;
    }
  });
}

/// Equal shapes, or one operand a rank-0 scalar.
inline Var elementwise(Binary kind, const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool a_scalar = detail::is_scalar(sa) && !detail::is_scalar(sb);
  const bool b_scalar = detail::is_scalar(sb) && !detail::is_scalar(sa);
  if (!(sa == sb) && !a_scalar && !b_scalar) {
    const char* name = kind == Binary::add ? "add" : kind == Binary::sub ? "sub" : "mul";
    throw ShapeError(name, sa, sb);
  }
  const Shape out_shape = a_scalar ? sb : sa;
  const std::size_t n = out_shape.size();
  const auto& x = a.value().values;
  const auto& y = b.value().values;
  Tensor out(out_shape, 0.0);
  auto& z = out.values;
  const std::size_t ia = a_scalar ? 0 : 1;
  const std::size_t ib = b_scalar ? 0 : 1;
  switch (kind) {
    case Binary::add: for (std::size_t i = 0; i < n; ++i) z[i] = x[i * ia] + y[i * ib]; break;
    case Binary::sub: for (std::size_t i = 0; i < n; ++i) z[i] = x[i * ia] - y[i * ib]; break;
    case Binary::mul: for (std::size_t i = 0; i < n; ++i) z[i] = x[i * ia] * y[i * ib]; break;
  }
  if (!a.on_tape() && !b.on_tape()) return Var(std::move(out));
  std::shared_ptr<const Tensor> av, bv;
  if (kind == Binary::mul) {
    if (b.on_tape()) av = std::make_shared<const Tensor>(a.value());
    if (a.on_tape()) bv = std::make_shared<const Tensor>(b.value());
  }
  return Tape::record(std::move(out), {&a, &b},
                      [kind, ia, ib, av, bv](const Tensor& g, std::span<Tensor* const> p) {
                        const std::size_t n = g.size();
                        const auto& gv = g.values;
                        if (p[0]) {
                          auto& d = p[0]->values;
                          if (kind == Binary::mul) {
                            const auto& y = bv->values;
                            for (std::size_t i = 0; i < n; ++i) d[i * ia] += gv[i] * y[i * ib];
                          } else {
                            for (std::size_t i = 0; i < n; ++i) d[i * ia] += gv[i];
                          }
                        }
                        if (p[1]) {
                          auto& d = p[1]->values;
                          if (kind == Binary::mul) {
                            const auto& x = av->values;
                            for (std::size_t i = 0; i < n; ++i) d[i * ib] += gv[i] * x[i * ia];
                          } else if (kind == Binary::sub) {
                            for (std::size_t i = 0; i < n; ++i) d[i * ib] -= gv[i];
                          } else {
                            for (std::size_t i = 0; i < n; ++i) d[i * ib] += gv[i];
                          }
                        }
                      });
}

inline Var add(const Var& a, const Var& b) { return elementwise(Binary::add, a, b); }
inline Var sub(const Var& a, const Var& b) { return elementwise(Binary::sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return elementwise(Binary::mul, a, b); }
inline Var neg(const Var& a) { return elementwise(Unary::neg, a); }
inline Var square(const Var& a) { return elementwise(Unary::square, a); }
inline Var sin(const Var& a) { return elementwise(Unary::sin, a); }
inline Var cos(const Var& a) { return elementwise(Unary::cos, a); }
inline Var exp(const Var& a) { return elementwise(Unary::exp, a); }
inline Var sqrt(const Var& a) { return elementwise(Unary::sqrt, a); }
inline Var relu(const Var& a) { return elementwise(Unary::relu, a); }
inline Var elu(const Var& a) { return elementwise(Unary::elu, a); }

/// a * c for a compile-time-free constant c.
inline Var scale(const Var& a, double c) {
  Tensor out = detail::map(a.value(), [c](double v) { return v * c; });
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [c](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) p[0]->values[i] += c * g.values[i];
  });
}

/// a + c elementwise.
inline Var shift(const Var& a, double c) {
  Tensor out = detail::map(a.value(), [c](double v) { return v + c; });
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) p[0]->values[i] += g.values[i];
  });
}

/// a + c * b, fused (the workhorse of explicit Runge-Kutta updates).
inline Var axpy(const Var& a, double c, const Var& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("axpy", a.shape(), b.shape());
  Tensor out(a.shape(), 0.0);
  const auto& x = a.value().values;
  const auto& y = b.value().values;
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x[i] + c * y[i];
  if (!a.on_tape() && !b.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a, &b}, [c](const Tensor& g, std::span<Tensor* const> p) {
    if (p[0])
      for (std::size_t i = 0; i < g.size(); ++i) p[0]->values[i] += g.values[i];
    if (p[1])
      for (std::size_t i = 0; i < g.size(); ++i) p[1]->values[i] += c * g.values[i];
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
inline Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() != 2 || (sb.rank() != 1 && sb.rank() != 2) || sa[1] != sb[0])
    throw ShapeError("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb.rank() == 2 ? sb[1] : 1;
  const Shape out_shape = sb.rank() == 2 ? Shape{m, n} : Shape{m};
  Tensor out(out_shape, 0.0);
  const double* A = a.value().values.data();
  const double* B = b.value().values.data();
  double* C = out.values.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = A[i * k + l];
      const double* brow = B + l * n;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += ail * brow[j];
    }
  if (!a.on_tape() && !b.on_tape()) return Var(std::move(out));
  auto av = b.on_tape() ? std::make_shared<const Tensor>(a.value()) : nullptr;
  auto bv = a.on_tape() ? std::make_shared<const Tensor>(b.value()) : nullptr;
  return Tape::record(std::move(out), {&a, &b},
                      [m, k, n, av, bv](const Tensor& g, std::span<Tensor* const> p) {
                        const double* G = g.values.data();
                        if (p[0]) {  // dA = G B^T
                          const double* B = bv->values.data();
                          double* dA = p[0]->values.data();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t l = 0; l < k; ++l) {
                              double s = 0.0;
                              for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[l * n + j];
                              dA[i * k + l] += s;
                            }
                        }
                        if (p[1]) {  // dB = A^T G
                          const double* A = av->values.data();
                          double* dB = p[1]->values.data();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t l = 0; l < k; ++l) {
                              const double ail = A[i * k + l];
                              for (std::size_t j = 0; j < n; ++j) dB[l * n + j] += ail * G[i * n + j];
                            }
                        }
                      });
}

/// Constant sparse matrix in compressed-row form.
struct SparseMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::size_t> col_idx;
  std::vector<double> values;
};

/// y = S x for a constant sparse S and x of shape [cols].
inline Var spmv(std::shared_ptr<const SparseMatrix> s, const Var& x) {
  if (x.shape().rank() != 1 || x.shape()[0] != s->cols)
    throw ShapeError("spmv", Shape{s->rows, s->cols}, x.shape());
  Tensor out(Shape{s->rows}, 0.0);
  const auto& xv = x.value().values;
  for (std::size_t r = 0; r < s->rows; ++r) {
    double acc = 0.0;
    for (std::size_t e = s->row_ptr[r]; e < s->row_ptr[r + 1]; ++e) acc += s->values[e] * xv[s->col_idx[e]];
    out.values[r] = acc;
  }
  if (!x.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&x}, [s](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    auto& d = p[0]->values;
    for (std::size_t r = 0; r < s->rows; ++r)
      for (std::size_t e = s->row_ptr[r]; e < s->row_ptr[r + 1]; ++e) d[s->col_idx[e]] += s->values[e] * g.values[r];
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { sum, mean, min, max };

/// Full reduction to a scalar. min/max route the gradient to the first
/// index attaining the extremum.
inline Var reduce(Reduce kind, const Var& a) {
  const auto& x = a.value().values;
  const std::size_t n = x.size();
  if (n == 0) throw AutodiffError("reduce: empty tensor");
  double v = 0.0;
  std::size_t arg = 0;
  switch (kind) {
    case Reduce::sum:
    case Reduce::mean:
      for (double e : x) v += e;
      if (kind == Reduce::mean) v /= static_cast<double>(n);
      break;
    case Reduce::min:
      arg = static_cast<std::size_t>(std::min_element(x.begin(), x.end()) - x.begin());
      v = x[arg];
      break;
    case Reduce::max:
      arg = static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
      v = x[arg];
      break;
  }
  Tensor out = Tensor::scalar(v);
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [kind, n, arg](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    auto& d = p[0]->values;
    const double gv = g.values[0];
    switch (kind) {
      case Reduce::sum: for (auto& e : d) e += gv; break;
      case Reduce::mean: for (auto& e : d) e += gv / static_cast<double>(n); break;
      case Reduce::min:
      case Reduce::max: d[arg] += gv; break;
    }
  });
}

inline Var sum(const Var& a) { return reduce(Reduce::sum, a); }
inline Var mean(const Var& a) { return reduce(Reduce::mean, a); }
inline Var min(const Var& a) { return reduce(Reduce::min, a); }
inline Var max(const Var& a) { return reduce(Reduce::max, a); }

/// Sum or mean along one axis; the axis is removed from the shape.
inline Var reduce_axis(Reduce kind, const Var& a, std::size_t axis) {
  if (kind != Reduce::sum && kind != Reduce::mean) throw AutodiffError("reduce_axis: only sum and mean");
  const Shape& s = a.shape();
  if (axis >= s.rank()) throw AutodiffError("reduce_axis: axis out of range for " + s.str());
  if (s[axis] == 0) throw AutodiffError("reduce_axis: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::array<std::size_t, Shape::max_rank> dims{};
  std::size_t r = 0;
  for (std::size_t i = 0; i < s.rank(); ++i)
    if (i != axis) dims[r++] = s[i];
  const Shape out_shape(std::span<const std::size_t>(dims.data(), r));
  const double w = kind == Reduce::mean ? 1.0 / static_cast<double>(len) : 1.0;
  Tensor out(out_shape, 0.0);
  const auto& x = a.value().values;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = x.data() + (o * len + l) * inner;
      double* dst = out.values.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (w != 1.0)
    for (auto& e : out.values) e *= w;
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [outer, inner, len, w](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    auto& d = p[0]->values;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l) {
        double* dst = d.data() + (o * len + l) * inner;
        const double* src = g.values.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
      }
  });
}

inline Var sum_axis(const Var& a, std::size_t axis) { return reduce_axis(Reduce::sum, a, axis); }
inline Var mean_axis(const Var& a, std::size_t axis) { return reduce_axis(Reduce::mean, a, axis); }

/// Softmax of a 1-D tensor, computed with max subtraction.
inline Var softmax(const Var& a) {
  if (a.shape().rank() != 1) throw ShapeError("softmax", a.shape(), Shape{a.size()});
  const auto& x = a.value().values;
  const std::size_t n = x.size();
  if (n == 0) throw AutodiffError("softmax: empty tensor");
  const double m = *std::max_element(x.begin(), x.end());
  Tensor out(a.shape(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += out.values[i] = std::exp(x[i] - m);
  for (auto& e : out.values) e /= z;
  if (!a.on_tape()) return Var(std::move(out));
  auto y = std::make_shared<const Tensor>(out);
  return Tape::record(std::move(out), {&a}, [y](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    const auto& yv = y->values;
    double dot = 0.0;
    for (std::size_t i = 0; i < yv.size(); ++i) dot += g.values[i] * yv[i];
    for (std::size_t i = 0; i < yv.size(); ++i) p[0]->values[i] += yv[i] * (g.values[i] - dot);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation and indexing

inline Var reshape(const Var& a, Shape s) {
  if (s.size() != a.size()) throw ShapeError("reshape", a.shape(), s);
  Tensor out(s, a.value().values);
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) p[0]->values[i] += g.values[i];
  });
}

/// Explicit broadcast: every axis of `a` must equal the target extent or be 1.
inline Var expand(const Var& a, Shape s) {
  const Shape& sa = a.shape();
  if (sa.rank() != s.rank()) throw ShapeError("expand", sa, s);
  for (std::size_t i = 0; i < s.rank(); ++i)
    if (sa[i] != s[i] && sa[i] != 1) throw ShapeError("expand", sa, s);
  const std::size_t rank = s.rank();
  // Source offset for each output element.
  auto src_index = std::make_shared<std::vector<std::size_t>>(s.size());
  {
    std::array<std::size_t, Shape::max_rank> src_stride{};
    std::size_t st = 1;
    for (std::size_t i = rank; i-- > 0;) {
      src_stride[i] = sa[i] == 1 ? 0 : st;
      st *= sa[i];
    }
    std::array<std::size_t, Shape::max_rank> idx{};
    for (std::size_t flat = 0; flat < s.size(); ++flat) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < rank; ++i) off += idx[i] * src_stride[i];
      (*src_index)[flat] = off;
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < s[i]) break;
        idx[i] = 0;
      }
    }
  }
  Tensor out(s, 0.0);
  for (std::size_t f = 0; f < out.size(); ++f) out.values[f] = a.value().values[(*src_index)[f]];
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [src_index](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    for (std::size_t f = 0; f < g.size(); ++f) p[0]->values[(*src_index)[f]] += g.values[f];
  });
}

/// Shared flat-index table; negative entries read as zero.
using Index = std::shared_ptr<const std::vector<std::ptrdiff_t>>;

inline Index make_index(std::vector<std::ptrdiff_t> idx) {
  return std::make_shared<const std::vector<std::ptrdiff_t>>(std::move(idx));
}

/// out.flat[p] = a.flat[idx[p]] (0 where idx[p] < 0).
inline Var gather(const Var& a, const Index& idx, Shape out_shape) {
  if (idx->size() != out_shape.size()) throw ShapeError("gather", Shape{idx->size()}, out_shape);
  const auto& x = a.value().values;
  Tensor out(out_shape, 0.0);
  for (std::size_t p = 0; p < idx->size(); ++p) {
    const auto k = (*idx)[p];
    if (k >= 0) {
      if (static_cast<std::size_t>(k) >= x.size()) throw AutodiffError("gather: index out of range");
      out.values[p] = x[static_cast<std::size_t>(k)];
    }
  }
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [idx](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    for (std::size_t q = 0; q < idx->size(); ++q) {
      const auto k = (*idx)[q];
      if (k >= 0) p[0]->values[static_cast<std::size_t>(k)] += g.values[q];
    }
  });
}

/// out.flat[idx[p]] += a.flat[p]; entries with idx[p] < 0 are dropped.
inline Var scatter_add(const Var& a, const Index& idx, Shape out_shape) {
  if (idx->size() != a.size()) throw ShapeError("scatter_add", a.shape(), Shape{idx->size()});
  Tensor out(out_shape, 0.0);
  for (std::size_t p = 0; p < idx->size(); ++p) {
    const auto k = (*idx)[p];
    if (k < 0) continue;
    if (static_cast<std::size_t>(k) >= out.size()) throw AutodiffError("scatter_add: index out of range");
    out.values[static_cast<std::size_t>(k)] += a.value().values[p];
  }
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [idx](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    for (std::size_t q = 0; q < idx->size(); ++q) {
      const auto k = (*idx)[q];
      if (k >= 0) p[0]->values[q] += g.values[static_cast<std::size_t>(k)];
    }
  });
}

/// Contiguous slice of the flat storage, reshaped to `s`.
inline Var slice(const Var& a, std::size_t offset, Shape s) {
  if (offset + s.size() > a.size()) throw ShapeError("slice", a.shape(), s);
  const auto& x = a.value().values;
  Tensor out(s, std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(offset),
                                    x.begin() + static_cast<std::ptrdiff_t>(offset + s.size())));
  if (!a.on_tape()) return Var(std::move(out));
  return Tape::record(std::move(out), {&a}, [offset](const Tensor& g, std::span<Tensor* const> p) {
    if (!p[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) p[0]->values[offset + i] += g.values[i];
  });
}

/// Row r of a 2-D tensor.
inline Var row(const Var& a, std::size_t r) {
  const Shape& s = a.shape();
  if (s.rank() != 2 || r >= s[0]) throw ShapeError("row", s, Shape{r});
  return slice(a, r * s[1], Shape{s[1]});
}

/// Stacks equally shaped tensors along a new leading axis.
inline Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw AutodiffError("stack: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.rank() >= Shape::max_rank) throw AutodiffError("stack: rank too large");
  std::array<std::size_t, Shape::max_rank> dims{};
  dims[0] = parts.size();
  for (std::size_t i = 0; i < s0.rank(); ++i) dims[i + 1] = s0[i];
  const Shape out_shape(std::span<const std::size_t>(dims.data(), s0.rank() + 1));
  Tensor out(out_shape, 0.0);
  const std::size_t len = s0.size();
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (!(parts[k].shape() == s0)) throw ShapeError("stack", s0, parts[k].shape());
    std::copy(parts[k].value().values.begin(), parts[k].value().values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(k * len));
  }
  std::vector<const Var*> inputs;
  inputs.reserve(parts.size());
  for (const auto& v : parts) inputs.push_back(&v);
  return Tape::record(std::move(out), inputs, [len](const Tensor& g, std::span<Tensor* const> p) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (!p[k]) continue;
      for (std::size_t i = 0; i < len; ++i) p[k]->values[i] += g.values[k * len + i];
    }
  });
}

inline Var stack(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return stack(std::span<const Var>(v));
}

}  // namespace nodec::ad
