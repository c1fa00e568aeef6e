#pragma once

// Tape-based reverse-mode automatic differentiation over smc::Tensor.
//
// Every primitive records one node holding its forward value, the ids of its
// inputs and a backward closure. Node ids are assigned in creation order, so
// the tape is topologically sorted by construction and the backward sweep is
// a single reverse scan.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "smc/tensor.hpp"

namespace smc {

enum class Op : std::uint8_t {
  leaf,
  add,
  multiply,
  scale,
  matmul,
  exp,
  log,
  sum,
  mean,
  max,
  softmax,
  log_softmax,
  l2_normalize,
  relu,
  concat,
  index_select,
  mask_apply,
};

inline constexpr std::array<Op, 16> kPrimitives = {
    Op::add,     Op::multiply,    Op::scale,        Op::matmul, Op::exp,    Op::log,
    Op::sum,     Op::mean,        Op::max,          Op::softmax, Op::log_softmax,
    Op::l2_normalize, Op::relu,   Op::concat,       Op::index_select, Op::mask_apply};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::multiply: return "multiply";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::max: return "max";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::l2_normalize: return "l2_normalize";
    case Op::relu: return "relu";
    case Op::concat: return "concat";
    case Op::index_select: return "index_select";
    case Op::mask_apply: return "mask_apply";
  }
  return "unknown";
}

inline std::optional<Op> op_from_name(std::string_view name) {
  for (auto op : kPrimitives)
    if (op_name(op) == name) return op;
  return std::nullopt;
}

struct TapeOptions {
  /// Test fixture: multiplies the upstream gradient of every node of this
  /// primitive by `corruption_factor` during backward.
  std::optional<Op> corrupt_backward;
  double corruption_factor = 1.5;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
  Tape& tape() const {
    require(tape_ != nullptr, "use of an unbound Var");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  bool bound() const noexcept { return tape_ != nullptr; }

private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct GradResult {
  double value = 0.0;
  std::vector<Tensor> grads;
};

class Tape {
public:
  /// Receives the gradient of the node's output and accumulates into inputs.
  using Backward = std::function<void(Tape&, const std::vector<double>& out_grad)>;

  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor t) { return push(Op::leaf, std::move(t), {}, true, nullptr); }
  Var constant(Tensor t) { return push(Op::leaf, std::move(t), {}, false, nullptr); }

  /// Records a primitive. The forward value is checked for NaN/Inf here.
  Var record(Op op, Tensor value, std::vector<std::size_t> inputs, Backward backward) {
    for (double v : value.values)
      if (!std::isfinite(v)) throw NumericFault(std::string(op_name(op)), "non-finite forward value");
    bool needs_grad = false;
    for (auto id : inputs) needs_grad = needs_grad || nodes_.at(id).requires_grad;
    return push(op, std::move(value), std::move(inputs), needs_grad, std::move(backward));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator of an input node during backward, or nullptr when
  /// the node does not lead to any variable.
  std::vector<double>* grad_sink(std::size_t id) {
    if (!nodes_[id].requires_grad) return nullptr;
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
    return &g;
  }

  /// Value of the scalar `root` and d(root)/d(p) for every p in `params`.
  /// Parameters that do not reach the root get zero gradients.
  GradResult eval_with_grad(Var root, std::span<const Var> params) {
    require(root.tape_ == this, "eval_with_grad: root belongs to another tape");
    const auto& root_value = nodes_.at(root.id_).value;
    require(root_value.is_scalar(), "eval_with_grad: root must be a scalar, got shape " + shape_string(root_value.shape));
    for (const auto& p : params) require(p.tape_ == this, "eval_with_grad: parameter belongs to another tape");

    grads_.assign(nodes_.size(), {});
    if (nodes_[root.id_].requires_grad) grads_[root.id_] = {1.0};

    for (std::size_t id = root.id_ + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (node.op == Op::leaf || !node.requires_grad || grads_[id].empty()) continue;
      auto upstream = grads_[id];
      if (options_.corrupt_backward && *options_.corrupt_backward == node.op)
        for (auto& g : upstream) g *= options_.corruption_factor;
      node.backward(*this, upstream);
      for (auto input : node.inputs) {
        for (double g : grads_[input])
          if (!std::isfinite(g)) throw NumericFault(std::string(op_name(node.op)), "non-finite gradient");
      }
    }

    GradResult result;
    result.value = root_value.values[0];
    result.grads.reserve(params.size());
    for (const auto& p : params) {
      Tensor g = Tensor::zeros(nodes_[p.id_].value.shape);
      if (!grads_[p.id_].empty()) g.values = grads_[p.id_];
      result.grads.push_back(std::move(g));
    }
    return result;
  }

  /// Count of l2_normalize rows whose norm fell below the degeneracy floor.
  std::size_t degenerate_normalizations() const noexcept { return degenerate_rows_; }
  void note_degenerate_rows(std::size_t n) noexcept { degenerate_rows_ += n; }

  const TapeOptions& options() const noexcept { return options_; }

private:
  struct Node {
    Op op;
    Tensor value;
    std::vector<std::size_t> inputs;
    bool requires_grad;
    Backward backward;
  };

  Var push(Op op, Tensor value, std::vector<std::size_t> inputs, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{op, std::move(value), std::move(inputs), requires_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  TapeOptions options_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::size_t degenerate_rows_ = 0;
};

inline const Tensor& Var::value() const { return tape().value(id_); }

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

enum class Broadcast { same, scalar, row };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape == b.shape) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (a.rank() == 2 && b.rows() == 1 && b.size() == a.cols()) return Broadcast::row;
  throw ContractViolation(std::string(what) + ": incompatible shapes " + shape_string(a.shape) + " and " +
                          shape_string(b.shape));
}

inline std::size_t broadcast_index(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::same: return i;
    case Broadcast::scalar: return 0;
    case Broadcast::row: return i % cols;
  }
  return i;
}

inline Tape& same_tape(const Var& a, const Var& b) {
  require(&a.tape() == &b.tape(), "operands live on different tapes");
  return a.tape();
}

}  // namespace detail

/// Elementwise a + b; b may also be a scalar or a row broadcast over a's rows.
inline Var add(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "add");
  const auto cols = av.cols();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv.values[detail::broadcast_index(kind, i, cols)];
  const auto ia = a.id(), ib = b.id();
  return tape.record(Op::add, std::move(out), {ia, ib}, [ia, ib, kind, cols](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = t.grad_sink(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[detail::broadcast_index(kind, i, cols)] += g[i];
  });
}

/// Elementwise product with the same broadcasting rules as add().
inline Var multiply(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "multiply");
  const auto cols = av.cols();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= bv.values[detail::broadcast_index(kind, i, cols)];
  const auto ia = a.id(), ib = b.id();
  return tape.record(Op::multiply, std::move(out), {ia, ib}, [ia, ib, kind, cols](Tape& t, const std::vector<double>& g) {
    const auto& x = t.value(ia).values;
    const auto& y = t.value(ib).values;
    if (auto* ga = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[detail::broadcast_index(kind, i, cols)];
    if (auto* gb = t.grad_sink(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[detail::broadcast_index(kind, i, cols)] += g[i] * x[i];
  });
}

inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.values) v *= factor;
  const auto ia = a.id();
  return a.tape().record(Op::scale, std::move(out), {ia}, [ia, factor](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += factor * g[i];
  });
}

inline Var subtract(Var a, Var b) { return add(a, scale(b, -1.0)); }

/// a (m×k) times b (k×n), or times bᵀ when `transpose_b` (b is n×k).
inline Var matmul(Var a, Var b, bool transpose_b = false) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2,
          "matmul: operands must be matrices, got " + shape_string(av.shape) + " and " + shape_string(bv.shape));
  const std::size_t m = av.shape[0], k = av.shape[1];
  const std::size_t bk = transpose_b ? bv.shape[1] : bv.shape[0];
  const std::size_t n = transpose_b ? bv.shape[0] : bv.shape[1];
  require(k == bk, "matmul: inner dimensions differ, " + shape_string(av.shape) + " and " + shape_string(bv.shape) +
                       (transpose_b ? " (transposed)" : ""));
  Tensor out = Tensor::zeros({m, n});
  detail::ConstMatrixMap A(av.values.data(), m, k);
  detail::ConstMatrixMap B(bv.values.data(), bv.shape[0], bv.shape[1]);
  detail::MatrixMap C(out.values.data(), m, n);
  if (transpose_b) C.noalias() = A * B.transpose();
  else C.noalias() = A * B;

  const auto ia = a.id(), ib = b.id();
  return tape.record(Op::matmul, std::move(out), {ia, ib}, [=](Tape& t, const std::vector<double>& g) {
    const auto& x = t.value(ia);
    const auto& y = t.value(ib);
    detail::ConstMatrixMap G(g.data(), m, n);
    detail::ConstMatrixMap X(x.values.data(), m, k);
    detail::ConstMatrixMap Y(y.values.data(), y.shape[0], y.shape[1]);
    if (auto* ga = t.grad_sink(ia)) {
      detail::MatrixMap GA(ga->data(), m, k);
      if (transpose_b) GA.noalias() += G * Y;
      else GA.noalias() += G * Y.transpose();
    }
    if (auto* gb = t.grad_sink(ib)) {
      detail::MatrixMap GB(gb->data(), y.shape[0], y.shape[1]);
      if (transpose_b) GB.noalias() += G.transpose() * X;
      else GB.noalias() += X.transpose() * G;
    }
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values) v = std::exp(v);
  const auto ia = a.id();
  auto saved = std::make_shared<std::vector<double>>(out.values);
  return a.tape().record(Op::exp, std::move(out), {ia}, [ia, saved](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia)) {
      const auto& y = *saved;
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
    }
  });
}

inline Var log(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values) v = std::log(v);
  const auto ia = a.id();
  return a.tape().record(Op::log, std::move(out), {ia}, [ia](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia)) {
      const auto& x = t.value(ia).values;
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
    }
  });
}

/// Sum of all entries, as a scalar.
inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values) total += v;
  const auto ia = a.id();
  return a.tape().record(Op::sum, Tensor::scalar(total), {ia}, [ia](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia))
      for (auto& v : *ga) v += g[0];
  });
}

inline Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  double total = 0.0;
  for (double v : a.value().values) total += v;
  const auto ia = a.id();
  return a.tape().record(Op::mean, Tensor::scalar(total / n), {ia}, [ia, n](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia))
      for (auto& v : *ga) v += g[0] / n;
  });
}

/// Largest entry, as a scalar. Ties route the gradient to the first maximum.
inline Var max(Var a) {
  const auto& v = a.value().values;
  const auto arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  const auto ia = a.id();
  return a.tape().record(Op::max, Tensor::scalar(v[arg]), {ia}, [ia, arg](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia)) (*ga)[arg] += g[0];
  });
}

/// Row-wise softmax, shifted by the row maximum before exponentiation.
inline Var softmax(Var a) {
  Tensor out = a.value();
  const auto rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.values.data() + r * cols;
    const double peak = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (row[c] = std::exp(row[c] - peak));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
  const auto ia = a.id();
  auto& tape = a.tape();
  auto probs = std::make_shared<std::vector<double>>(out.values);
  return tape.record(Op::softmax, std::move(out), {ia}, [ia, probs, rows, cols](Tape& t, const std::vector<double>& g) {
    auto* ga = t.grad_sink(ia);
    if (!ga) return;
    const auto& y = *probs;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

/// Row-wise log-softmax via the max-shifted log-sum-exp.
inline Var log_softmax(Var a) {
  Tensor out = a.value();
  const auto rows = out.rows(), cols = out.cols();
  auto probs = std::make_shared<std::vector<double>>(out.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.values.data() + r * cols;
    const double peak = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(row[c] - peak);
    const double lse = peak + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] -= lse;
      (*probs)[r * cols + c] = std::exp(row[c]);
    }
  }
  const auto ia = a.id();
  return a.tape().record(Op::log_softmax, std::move(out), {ia}, [ia, probs, rows, cols](Tape& t, const std::vector<double>& g) {
    auto* ga = t.grad_sink(ia);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += g[r * cols + c] - (*probs)[r * cols + c] * total;
    }
  });
}

inline constexpr double kDegenerateNorm = 1e-30;

/// Scales each row to unit Euclidean norm. Rows with norm below
/// kDegenerateNorm map to zero with zero gradient and bump the tape's
/// degenerate counter.
inline Var l2_normalize(Var a) {
  Tensor out = a.value();
  const auto rows = out.rows(), cols = out.cols();
  auto norms = std::make_shared<std::vector<double>>(rows, 0.0);
  std::size_t degenerate = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.values.data() + r * cols;
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += row[c] * row[c];
    const double norm = std::sqrt(sq);
    if (norm < kDegenerateNorm) {
      std::fill(row, row + cols, 0.0);
      ++degenerate;
      continue;
    }
    (*norms)[r] = norm;
    for (std::size_t c = 0; c < cols; ++c) row[c] /= norm;
  }
  auto& tape = a.tape();
  tape.note_degenerate_rows(degenerate);
  const auto ia = a.id();
  auto unit = std::make_shared<std::vector<double>>(out.values);
  return tape.record(Op::l2_normalize, std::move(out), {ia}, [ia, norms, unit, rows, cols](Tape& t, const std::vector<double>& g) {
    auto* ga = t.grad_sink(ia);
    if (!ga) return;
    const auto& y = *unit;
    for (std::size_t r = 0; r < rows; ++r) {
      const double norm = (*norms)[r];
      if (norm == 0.0) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        (*ga)[r * cols + c] += (g[r * cols + c] - y[r * cols + c] * dot) / norm;
    }
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values) v = v > 0.0 ? v : 0.0;
  const auto ia = a.id();
  return a.tape().record(Op::relu, std::move(out), {ia}, [ia](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia)) {
      const auto& x = t.value(ia).values;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) (*ga)[i] += g[i];
    }
  });
}

/// Stacks matrices with equal column counts along the row axis.
inline Var concat(std::span<const Var> parts) {
  require(!parts.empty(), "concat: no inputs");
  auto& tape = parts.front().tape();
  const auto cols = parts.front().cols();
  std::vector<double> values;
  std::vector<std::size_t> inputs, offsets;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(&p.tape() == &tape, "concat: operands live on different tapes");
    require(p.cols() == cols, "concat: column counts differ");
    offsets.push_back(values.size());
    const auto& v = p.value().values;
    values.insert(values.end(), v.begin(), v.end());
    inputs.push_back(p.id());
    rows += p.rows();
  }
  auto ids = inputs;
  return tape.record(Op::concat, Tensor({rows, cols}, std::move(values)), std::move(inputs),
                     [ids, offsets](Tape& t, const std::vector<double>& g) {
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (auto* gk = t.grad_sink(ids[k]))
                           for (std::size_t i = 0; i < gk->size(); ++i) (*gk)[i] += g[offsets[k] + i];
                       }
                     });
}

/// Gathers rows of a matrix; repeated indices accumulate in backward.
inline Var index_select(Var a, std::vector<std::size_t> indices) {
  const auto& av = a.value();
  require(av.rank() == 2, "index_select: input must be a matrix");
  require(!indices.empty(), "index_select: empty index list");
  const auto cols = av.cols();
  Tensor out = Tensor::zeros({indices.size(), cols});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    require(indices[r] < av.rows(), "index_select: row index " + std::to_string(indices[r]) + " out of range");
    std::copy_n(av.values.begin() + static_cast<std::ptrdiff_t>(indices[r] * cols), cols,
                out.values.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  const auto ia = a.id();
  return a.tape().record(Op::index_select, std::move(out), {ia},
                         [ia, indices = std::move(indices), cols](Tape& t, const std::vector<double>& g) {
                           if (auto* ga = t.grad_sink(ia))
                             for (std::size_t r = 0; r < indices.size(); ++r)
                               for (std::size_t c = 0; c < cols; ++c) (*ga)[indices[r] * cols + c] += g[r * cols + c];
                         });
}

/// Keeps entries where `keep` is nonzero and replaces the rest by `fill`.
/// Replaced entries receive no gradient.
inline Var mask_apply(Var a, std::vector<std::uint8_t> keep, double fill) {
  require(keep.size() == a.value().size(), "mask_apply: mask size differs from tensor size");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!keep[i]) out.values[i] = fill;
  const auto ia = a.id();
  return a.tape().record(Op::mask_apply, std::move(out), {ia}, [ia, keep = std::move(keep)](Tape& t, const std::vector<double>& g) {
    if (auto* ga = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (keep[i]) (*ga)[i] += g[i];
  });
}

}  // namespace smc
