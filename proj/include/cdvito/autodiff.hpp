#pragma once

// Minimal dense reverse-mode automatic differentiation.
//
// A Tape records every operation as a node holding its forward value and a
// closure that pushes the output gradient into the gradients of its inputs.
// Nodes are appended in evaluation order, which is a topological order, so
// backward() walks the node list in exact reverse. A tape is single-use:
// backward() consumes it and a second call is rejected.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdvito/error.hpp"

namespace cdvito::ad {

// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      std::ostringstream os;
      os << "matrix " << rows_ << "x" << cols_ << " built from " << data_.size() << " values";
      throw ShapeError(os.str());
    }
  }

  static Matrix row_vector(std::initializer_list<double> values) {
    return Matrix(1, values.size(), std::vector<double>(values));
  }
  static Matrix column_vector(std::initializer_list<double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values));
  }
  static Matrix scalar(double v) { return Matrix(1, 1, v); }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients of a scalar loss with respect to every requires_grad leaf.
class Gradients {
 public:
  const Matrix& operator[](const Var& v) const { return at(v.id()); }
  const Matrix& at(std::size_t id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw ContractError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  bool contains(const Var& v) const { return grads_.count(v.id()) != 0; }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Matrix> grads_;
};

// Receives the output gradient and the gradient buffers of the node's inputs;
// a buffer pointer is null when that input does not need a gradient.
using BackwardFn =
    std::function<void(const Tape&, const Matrix& out_grad, std::span<Matrix* const> in_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true) {
    if (!value.all_finite()) throw NumericError("leaf value contains non-finite entries");
    Node n;
    n.value = std::move(value);
    n.leaf = true;
    n.requires_grad = requires_grad;
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var record(const char* op, Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(const char* op, Matrix value, const std::vector<Var>& inputs, BackwardFn fn) {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
    Node n;
    n.value = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw ContractError(std::string(op) + ": input from another tape");
      n.inputs.push_back(in.id());
      n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  Gradients backward(const Var& loss) {
    if (consumed_) throw ContractError("backward() called twice on the same tape");
    if (nodes_.empty()) throw ContractError("backward() on an empty tape");
    if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
    const Matrix& lv = loss.value();
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward() needs a scalar loss, got " + lv.shape_string());
    }
    consumed_ = true;

    std::vector<Matrix> grads(nodes_.size());
    grads[loss.id()] = Matrix(1, 1, 1.0);
    std::vector<Matrix*> in_grads;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.leaf || grads[i].empty()) continue;
      in_grads.clear();
      for (std::size_t in : n.inputs) {
        if (nodes_[in].needs_grad) {
          if (grads[in].empty()) grads[in] = Matrix(nodes_[in].value.rows(), nodes_[in].value.cols());
          in_grads.push_back(&grads[in]);
        } else {
          in_grads.push_back(nullptr);
        }
      }
      n.backward(*this, grads[i], in_grads);
    }

    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.leaf || !n.requires_grad) continue;
      if (grads[i].empty()) grads[i] = Matrix(n.value.rows(), n.value.cols());
      out.grads_.emplace(i, std::move(grads[i]));
    }
    return out;
  }

 private:
  struct Node {
    Matrix value;
    bool leaf = false;
    bool requires_grad = false;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("item() on non-scalar " + v.shape_string());
  return v[0];
}

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

enum class Broadcast { none, row, column };

inline Broadcast broadcast_kind(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::none;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::column;
  shape_fail(op, a, b);
}

inline void accumulate_broadcast(Matrix& gb, const Matrix& g, Broadcast kind, double sign) {
  switch (kind) {
    case Broadcast::none:
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      break;
    case Broadcast::row:
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += sign * g(r, c);
      break;
    case Broadcast::column:
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb(r, 0) += sign * g(r, c);
      break;
  }
}

inline Var add_signed(const char* op, const Var& a, const Var& b, double sign) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Broadcast kind = broadcast_kind(op, av, bv);
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      const double bval = kind == Broadcast::none ? bv(r, c) : kind == Broadcast::row ? bv(0, c) : bv(r, 0);
      out(r, c) += sign * bval;
    }
  }
  return a.tape().record(op, std::move(out), {a, b},
                         [kind, sign](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           if (gin[0]) accumulate_broadcast(*gin[0], g, Broadcast::none, 1.0);
                           if (gin[1]) accumulate_broadcast(*gin[1], g, kind, sign);
                         });
}

inline Matrix matmul_values(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

// Row-wise log-sum-exp over the entries where `keep` is true (all if empty).
inline double masked_lse(std::span<const double> row, std::span<const char> keep) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < row.size(); ++j)
    if (keep.empty() || keep[j]) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (keep.empty() || keep[j]) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}

}  // namespace detail

// a + b; b may be a row vector (1 x cols) or column vector (rows x 1).
inline Var add(const Var& a, const Var& b) { return detail::add_signed("add", a, b, 1.0); }

// a - b with the same broadcasting rule as add.
inline Var subtract(const Var& a, const Var& b) { return detail::add_signed("subtract", a, b, -1.0); }

// Elementwise product; shapes must match exactly.
inline Var hadamard(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) detail::shape_fail("hadamard", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("hadamard", std::move(out), {a, b},
                         [ia, ib](const Tape& t, const Matrix& g, std::span<Matrix* const> gin) {
                           const Matrix& x = t.value(ia);
                           const Matrix& y = t.value(ib);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (gin[0]) (*gin[0])[i] += g[i] * y[i];
                             if (gin[1]) (*gin[1])[i] += g[i] * x[i];
                           }
                         });
}

inline Var scale(const Var& a, double s) {
  Matrix out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape().record("scale", std::move(out), {a},
                         [s](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += s * g[i];
                         });
}

inline Var matmul(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) detail::shape_fail("matmul", av, bv);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      "matmul", detail::matmul_values(av, bv), {a, b},
      [ia, ib](const Tape& t, const Matrix& g, std::span<Matrix* const> gin) {
        const Matrix& x = t.value(ia);
        const Matrix& y = t.value(ib);
        if (gin[0]) {
          Matrix& gx = *gin[0];
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < y.cols(); ++j) {
              const double gij = g(i, j);
              if (gij == 0.0) continue;
              for (std::size_t k = 0; k < x.cols(); ++k) gx(i, k) += gij * y(k, j);
            }
        }
        if (gin[1]) {
          Matrix& gy = *gin[1];
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t k = 0; k < x.cols(); ++k) {
              const double xik = x(i, k);
              if (xik == 0.0) continue;
              for (std::size_t j = 0; j < y.cols(); ++j) gy(k, j) += xik * g(i, j);
            }
        }
      });
}

inline Var transpose(const Var& a) {
  const Matrix& av = a.value();
  Matrix out(av.cols(), av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(c, r) = av(r, c);
  return a.tape().record("transpose", std::move(out), {a},
                         [](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (std::size_t r = 0; r < g.rows(); ++r)
                             for (std::size_t c = 0; c < g.cols(); ++c) (*gin[0])(c, r) += g(r, c);
                         });
}

inline Var row_softmax(const Var& a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const double lse = detail::masked_lse(av.row(r), {});
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = std::exp(av(r, c) - lse);
  }
  Matrix y = out;
  return a.tape().record("row_softmax", std::move(out), {a},
                         [y = std::move(y)](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (std::size_t r = 0; r < g.rows(); ++r) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
                             for (std::size_t c = 0; c < g.cols(); ++c)
                               (*gin[0])(r, c) += y(r, c) * (g(r, c) - dot);
                           }
                         });
}

inline Var log(const Var& a) {
  Matrix out = a.value();
  for (double& v : out.values()) v = std::log(v);
  const std::size_t ia = a.id();
  return a.tape().record("log", std::move(out), {a},
                         [ia](const Tape& t, const Matrix& g, std::span<Matrix* const> gin) {
                           const Matrix& x = t.value(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / x[i];
                         });
}

inline Var exp(const Var& a) {
  Matrix out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  Matrix y = out;
  return a.tape().record("exp", std::move(out), {a},
                         [y = std::move(y)](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * y[i];
                         });
}

// Sum of all entries as a 1x1 tensor.
inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record("sum", Matrix::scalar(s), {a},
                         [](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (double& v : gin[0]->values()) v += g[0];
                         });
}

// Mean of all entries as a 1x1 tensor.
inline Var mean(const Var& a) {
  const Matrix& av = a.value();
  if (av.empty()) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : av.values()) s += v;
  const double n = static_cast<double>(av.size());
  return a.tape().record("mean", Matrix::scalar(s / n), {a},
                         [n](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (double& v : gin[0]->values()) v += g[0] / n;
                         });
}

// Column-wise mean: (rows x cols) -> (1 x cols).
inline Var mean_rows(const Var& a) {
  const Matrix& av = a.value();
  if (av.rows() == 0) throw ShapeError("mean_rows: no rows");
  Matrix out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(0, c) += av(r, c);
  const double n = static_cast<double>(av.rows());
  for (double& v : out.values()) v /= n;
  return a.tape().record("mean_rows", std::move(out), {a},
                         [n](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           Matrix& ga = *gin[0];
                           for (std::size_t r = 0; r < ga.rows(); ++r)
                             for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g(0, c) / n;
                         });
}

// Each row divided by its Euclidean norm. A zero row is a numeric error.
inline Var l2_normalize_rows(const Var& a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  std::vector<double> norms(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double ss = 0.0;
    for (double v : av.row(r)) ss += v * v;
    const double n = std::sqrt(ss);
    if (!(n > 0.0)) throw NumericError("l2_normalize_rows: zero row " + std::to_string(r));
    norms[r] = n;
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = av(r, c) / n;
  }
  Matrix y = out;
  return a.tape().record(
      "l2_normalize_rows", std::move(out), {a},
      [y = std::move(y), norms = std::move(norms)](const Tape&, const Matrix& g,
                                                   std::span<Matrix* const> gin) {
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
          for (std::size_t c = 0; c < g.cols(); ++c)
            (*gin[0])(r, c) += (g(r, c) - y(r, c) * dot) / norms[r];
        }
      });
}

// Pairwise cosine similarity between the rows of a and the rows of b.
inline Var cosine_similarity_matrix(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) detail::shape_fail("cosine_similarity_matrix", a.value(), b.value());
  return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

// Mean smooth-L1 (Huber with transition at 1) between pred and target.
inline Var smooth_l1(const Var& pred, const Var& target) {
  const Matrix& p = pred.value();
  const Matrix& t = target.value();
  if (p.rows() != t.rows() || p.cols() != t.cols()) detail::shape_fail("smooth_l1", p, t);
  if (p.empty()) throw ShapeError("smooth_l1: empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    s += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  const double n = static_cast<double>(p.size());
  const std::size_t ip = pred.id(), it = target.id();
  return pred.tape().record(
      "smooth_l1", Matrix::scalar(s / n), {pred, target},
      [ip, it, n](const Tape& tape, const Matrix& g, std::span<Matrix* const> gin) {
        const Matrix& pv = tape.value(ip);
        const Matrix& tv = tape.value(it);
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const double d = std::clamp(pv[i] - tv[i], -1.0, 1.0) * g[0] / n;
          if (gin[0]) (*gin[0])[i] += d;
          if (gin[1]) (*gin[1])[i] -= d;
        }
      });
}

// Row mask for cross_entropy_with_logits: rows x cols, nonzero = candidate.
using LogitMask = std::vector<std::vector<char>>;

// Mean over rows of -log softmax(logits[r])[labels[r]]. When a mask is given
// only the kept entries of each row take part in the normalizer; the label
// entry of every row must be kept.
inline Var cross_entropy_with_logits(const Var& logits, const std::vector<std::size_t>& labels,
                                     const LogitMask& mask = {}) {
  const Matrix& z = logits.value();
  if (labels.size() != z.rows()) {
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(labels.size()) +
                     " labels for logits " + z.shape_string());
  }
  if (z.rows() == 0) throw ShapeError("cross_entropy_with_logits: no rows");
  if (!mask.empty() && mask.size() != z.rows()) throw ShapeError("cross_entropy_with_logits: mask rows");
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    std::span<const char> keep;
    if (!mask.empty()) {
      if (mask[r].size() != z.cols()) throw ShapeError("cross_entropy_with_logits: mask cols");
      keep = mask[r];
    }
    if (labels[r] >= z.cols()) throw ContractError("cross_entropy_with_logits: label out of range");
    if (!keep.empty() && !keep[labels[r]]) {
      throw ContractError("cross_entropy_with_logits: label of row " + std::to_string(r) + " is masked");
    }
    const double lse = detail::masked_lse(z.row(r), keep);
    total += lse - z(r, labels[r]);
    for (std::size_t c = 0; c < z.cols(); ++c)
      probs(r, c) = (keep.empty() || keep[c]) ? std::exp(z(r, c) - lse) : 0.0;
  }
  const double n = static_cast<double>(z.rows());
  return logits.tape().record(
      "cross_entropy_with_logits", Matrix::scalar(total / n), {logits},
      [probs = std::move(probs), labels, n](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
        Matrix& gz = *gin[0];
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          for (std::size_t c = 0; c < probs.cols(); ++c) gz(r, c) += g[0] * probs(r, c) / n;
          gz(r, labels[r]) -= g[0] / n;
        }
      });
}

// Rows [begin, begin + count).
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of " + av.shape_string());
  }
  Matrix out(count, av.cols());
  std::copy(av.values().begin() + static_cast<std::ptrdiff_t>(begin * av.cols()),
            av.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * av.cols()),
            out.values().begin());
  const std::size_t cols = av.cols();
  return a.tape().record("slice_rows", std::move(out), {a},
                         [begin, cols](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[begin * cols + i] += g[i];
                         });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> indices) {
  const Matrix& av = a.value();
  Matrix out(indices.size(), av.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy(av.row(indices[i]).begin(), av.row(indices[i]).end(), out.row(i).begin());
  }
  return a.tape().record("gather_rows", std::move(out), {a},
                         [indices = std::move(indices)](const Tape&, const Matrix& g,
                                                        std::span<Matrix* const> gin) {
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             for (std::size_t c = 0; c < g.cols(); ++c) (*gin[0])(indices[i], c) += g(i, c);
                         });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) detail::shape_fail("concat_rows", parts.front().value(), p.value());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    std::copy(p.value().values().begin(), p.value().values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(at * cols));
    at += p.rows();
  }
  return parts.front().tape().record(
      "concat_rows", std::move(out), parts,
      [offsets = std::move(offsets), cols](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
        for (std::size_t k = 0; k < gin.size(); ++k) {
          if (!gin[k]) continue;
          Matrix& gk = *gin[k];
          for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[offsets[k] * cols + i];
        }
      });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) detail::shape_fail("concat_cols", parts.front().value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    const Matrix& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, at + c) = pv(r, c);
    at += pv.cols();
  }
  return parts.front().tape().record(
      "concat_cols", std::move(out), parts,
      [offsets = std::move(offsets)](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
        for (std::size_t k = 0; k < gin.size(); ++k) {
          if (!gin[k]) continue;
          Matrix& gk = *gin[k];
          for (std::size_t r = 0; r < gk.rows(); ++r)
            for (std::size_t c = 0; c < gk.cols(); ++c) gk(r, c) += g(r, offsets[k] + c);
        }
      });
}

// Same values, new shape; rows * cols must be preserved.
inline Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  const Matrix& av = a.value();
  if (rows * cols != av.size()) {
    throw ShapeError("reshape: " + av.shape_string() + " to (" + std::to_string(rows) + "x" +
                     std::to_string(cols) + ")");
  }
  return a.tape().record("reshape", Matrix(rows, cols, av.values()), {a},
                         [](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                         });
}

// Row-wise maximum (rows x 1). The gradient flows to the first maximal entry.
inline Var row_max(const Var& a) {
  const Matrix& av = a.value();
  if (av.cols() == 0) throw ShapeError("row_max: no columns");
  Matrix out(av.rows(), 1);
  std::vector<std::size_t> arg(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const auto row = av.row(r);
    arg[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    out(r, 0) = row[arg[r]];
  }
  return a.tape().record("row_max", std::move(out), {a},
                         [arg = std::move(arg)](const Tape&, const Matrix& g, std::span<Matrix* const> gin) {
                           for (std::size_t r = 0; r < arg.size(); ++r) (*gin[0])(r, arg[r]) += g(r, 0);
                         });
}

// Loss closure for gradient checking: builds a scalar from parameter leaves.
using LossFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

inline double evaluate_loss(const LossFn& fn, const std::vector<Matrix>& point) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const Matrix& p : point) leaves.push_back(tape.leaf(p, false));
  return fn(tape, leaves).item();
}

// Compares reverse-mode gradients with central differences at `point`.
// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
inline GradCheckReport grad_check_report(const LossFn& fn, const std::vector<Matrix>& point, double eps) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const Matrix& p : point) leaves.push_back(tape.leaf(p, true));
  const Var loss = fn(tape, leaves);
  const double base = loss.item();
  const Gradients grads = tape.backward(loss);
  if (evaluate_loss(fn, point) != base) throw CheckError("grad_check: loss function is not deterministic");

  GradCheckReport report;
  std::vector<Matrix> probe = point;
  for (std::size_t p = 0; p < point.size(); ++p) {
    const Matrix& analytic = grads[leaves[p]];
    for (std::size_t i = 0; i < point[p].size(); ++i) {
      const double x0 = point[p][i];
      probe[p][i] = x0 + eps;
      const double up = evaluate_loss(fn, probe);
      probe[p][i] = x0 - eps;
      const double down = evaluate_loss(fn, probe);
      probe[p][i] = x0;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++report.coordinates;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = p;
        report.worst_index = i;
      }
    }
  }
  return report;
}

inline double grad_check(const LossFn& fn, const std::vector<Matrix>& point, double eps) {
  return grad_check_report(fn, point, eps).max_relative_error;
}

}  // namespace cdvito::ad
