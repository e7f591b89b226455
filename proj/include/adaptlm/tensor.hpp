#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adaptlm/rng.hpp"

namespace adaptlm {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Index = Eigen::Index;

inline std::string shape_str(Index r, Index c) {
  std::ostringstream os;
  os << "[" << r << " x " << c << "]";
  return os.str();
}

[[noreturn]] inline void op_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

// ---------------------------------------------------------------------------
// Parameter: a named dense value with an optional gradient accumulator.
// Layers hold Parameters through shared_ptr; weight tying is pointer aliasing,
// so one optimizer update moves every view of a tied tensor.
// ---------------------------------------------------------------------------

template <class Scalar>
struct Parameter {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Mat<Scalar> value;  // empty until materialized (shape-only mode for audits)
  Mat<Scalar> grad;   // lazily allocated on first backward
  bool requires_grad = true;

  Parameter(std::string n, Index r, Index c) : name(std::move(n)), rows(r), cols(c) {}

  Index size() const { return rows * cols; }
  bool materialized() const { return value.size() != 0; }

  void ensure_grad() {
    if (grad.size() == 0) grad = Mat<Scalar>::Zero(rows, cols);
  }
  void zero_grad() {
    if (grad.size() != 0) grad.setZero();
  }
};

template <class Scalar>
using ParamPtr = std::shared_ptr<Parameter<Scalar>>;

template <class Scalar>
inline void zero_grads(std::span<const ParamPtr<Scalar>> params) {
  for (const auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Tape: reverse-mode autodiff over Eigen matrices. Nodes are created in
// topological order; backward() walks ids in reverse, visiting each node
// exactly once. A Tape and its Vars are a single-threaded unit of work.
// ---------------------------------------------------------------------------

template <class Scalar>
class Tape;

// Lightweight handle to a tape node. Free functions below build the graph.
template <class Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;
};

template <class Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;

  // record_grad: build backward closures; training: dropout active.
  explicit Tape(bool record_grad = true, bool training = false, Rng* rng = nullptr)
      : record_(record_grad), training_(training), rng_(rng) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  bool training() const { return training_; }

  Rng& rng() {
    if (!rng_) throw std::logic_error("tape: dropout in training mode requires an rng");
    return *rng_;
  }

  Var<Scalar> leaf(const ParamPtr<Scalar>& p) {
    if (!p->materialized())
      throw std::logic_error("tape: parameter '" + p->name + "' is not materialized");
    Node n;
    n.external = &p->value;
    n.param = p;
    n.requires_grad = record_ && p->requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<Scalar> constant(M v) {
    Node n;
    n.owned = std::move(v);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<Scalar> make(M value, bool requires_grad,
                   std::function<void(Tape&, const M&)> backprop) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const M& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value(); }
  const M& val(Var<Scalar> v) const { return val(v.id); }

  Scalar scalar(Var<Scalar> v) const {
    const M& m = val(v);
    if (m.rows() != 1 || m.cols() != 1)
      op_error("scalar", "expected [1 x 1], got " + shape_str(m.rows(), m.cols()));
    return m(0, 0);
  }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool needs_grad(Var<Scalar> v) const { return needs_grad(v.id); }

  // Dense gradient accumulation into a node.
  void accum(int id, const M& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Zero-initialized gradient buffer for sparse/in-place accumulation.
  M& grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const M& v = n.value();
      n.grad = M::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  const M& grad_of(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  // Reverse pass from a scalar root. Leaf gradients accumulate into their
  // Parameters; calling backward twice without zero_grad doubles them.
  void backward(Var<Scalar> root) {
    if (root.tape != this) throw std::logic_error("backward: root from a different tape");
    const M& rv = val(root);
    if (rv.rows() != 1 || rv.cols() != 1)
      op_error("backward", "root must be scalar, got " + shape_str(rv.rows(), rv.cols()));
    for (std::size_t i = 0; i <= static_cast<std::size_t>(root.id); ++i)
      nodes_[i].grad.resize(0, 0);
    accum(root.id, M::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.param) {
        n.param->ensure_grad();
        n.param->grad += n.grad;
      }
      if (n.backprop) n.backprop(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M owned;
    const M* external = nullptr;  // leaves reference parameter storage
    ParamPtr<Scalar> param;       // keeps the storage alive
    M grad;
    bool requires_grad = false;
    std::function<void(Tape&, const M&)> backprop;

    const M& value() const { return external ? *external : owned; }
  };

  std::vector<Node> nodes_;
  bool record_;
  bool training_;
  Rng* rng_;
};

// ---------------------------------------------------------------------------
// Primitives. Each checks shapes up front and reports the op name plus the
// offending shapes. Non-differentiable points: relu'(0) = 0, max ties break
// to the first index.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Tape<S>& tape_of(Var<S> a) {
  if (!a.tape) op_error("tape", "unbound Var");
  return *a.tape;
}

template <class S>
Tape<S>& tape_of(Var<S> a, Var<S> b, const char* op) {
  if (!a.tape || a.tape != b.tape) op_error(op, "operands from different tapes");
  return *a.tape;
}

}  // namespace detail

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a, b, "matmul");
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (A.cols() != B.rows())
    op_error("matmul", "incompatible shapes " + shape_str(A.rows(), A.cols()) + " and " +
                           shape_str(B.rows(), B.cols()));
  bool rg = t.needs_grad(a) || t.needs_grad(b);
  int ai = a.id, bi = b.id;
  return t.make(A * B, rg, [ai, bi](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(ai)) tp.accum(ai, g * tp.val(bi).transpose());
    if (tp.needs_grad(bi)) tp.accum(bi, tp.val(ai).transpose() * g);
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  auto& t = detail::tape_of(a);
  int ai = a.id;
  return t.make(t.val(a).transpose(), t.needs_grad(a), [ai](Tape<S>& tp, const Mat<S>& g) {
    tp.accum(ai, g.transpose());
  });
}

// add: same shape, or broadcast of a [1 x C] row / [R x 1] column over rows/cols.
template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a, b, "add");
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  bool rg = t.needs_grad(a) || t.needs_grad(b);
  int ai = a.id, bi = b.id;
  if (A.rows() == B.rows() && A.cols() == B.cols()) {
    return t.make(A + B, rg, [ai, bi](Tape<S>& tp, const Mat<S>& g) {
      if (tp.needs_grad(ai)) tp.accum(ai, g);
      if (tp.needs_grad(bi)) tp.accum(bi, g);
    });
  }
  if (B.rows() == 1 && B.cols() == A.cols()) {
    Mat<S> out = A.rowwise() + B.row(0);
    return t.make(std::move(out), rg, [ai, bi](Tape<S>& tp, const Mat<S>& g) {
      if (tp.needs_grad(ai)) tp.accum(ai, g);
      if (tp.needs_grad(bi)) tp.accum(bi, g.colwise().sum());
    });
  }
  if (B.cols() == 1 && B.rows() == A.rows()) {
    Mat<S> out = A.colwise() + B.col(0);
    return t.make(std::move(out), rg, [ai, bi](Tape<S>& tp, const Mat<S>& g) {
      if (tp.needs_grad(ai)) tp.accum(ai, g);
      if (tp.needs_grad(bi)) tp.accum(bi, g.rowwise().sum());
    });
  }
  op_error("add", "incompatible shapes " + shape_str(A.rows(), A.cols()) + " and " +
                      shape_str(B.rows(), B.cols()));
}

template <class S>
Var<S> scale(Var<S> a, S k) {
  auto& t = detail::tape_of(a);
  int ai = a.id;
  return t.make(t.val(a) * k, t.needs_grad(a), [ai, k](Tape<S>& tp, const Mat<S>& g) {
    tp.accum(ai, g * k);
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  return add(a, scale(b, S(-1)));
}

// elementwise product
template <class S>
Var<S> cmul(Var<S> a, Var<S> b) {
  auto& t = detail::tape_of(a, b, "mul");
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    op_error("mul", "incompatible shapes " + shape_str(A.rows(), A.cols()) + " and " +
                        shape_str(B.rows(), B.cols()));
  bool rg = t.needs_grad(a) || t.needs_grad(b);
  int ai = a.id, bi = b.id;
  return t.make(A.cwiseProduct(B), rg, [ai, bi](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(ai)) tp.accum(ai, g.cwiseProduct(tp.val(bi)));
    if (tp.needs_grad(bi)) tp.accum(bi, g.cwiseProduct(tp.val(ai)));
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  auto& t = detail::tape_of(a);
  const auto& A = t.val(a);
  int ai = a.id;
  return t.make(A.cwiseMax(S(0)), t.needs_grad(a), [ai](Tape<S>& tp, const Mat<S>& g) {
    Mat<S> m = (tp.val(ai).array() > S(0)).template cast<S>().matrix();
    tp.accum(ai, g.cwiseProduct(m));
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  auto& t = detail::tape_of(a);
  Mat<S> y = (S(1) / (S(1) + (-t.val(a).array()).exp())).matrix();
  int ai = a.id;
  return t.make(std::move(y), t.needs_grad(a), [ai, self = int(t.size())](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y2 = tp.val(self);
    tp.accum(ai, (g.array() * y2.array() * (S(1) - y2.array())).matrix());
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  auto& t = detail::tape_of(a);
  Mat<S> y = t.val(a).array().tanh().matrix();
  int ai = a.id;
  return t.make(std::move(y), t.needs_grad(a), [ai, self = int(t.size())](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y2 = tp.val(self);
    tp.accum(ai, (g.array() * (S(1) - y2.array().square())).matrix());
  });
}

// row-wise softmax with max subtraction
template <class S>
Var<S> softmax_rows(Var<S> a) {
  auto& t = detail::tape_of(a);
  const auto& A = t.val(a);
  Mat<S> y(A.rows(), A.cols());
  for (Index r = 0; r < A.rows(); ++r) {
    S m = A.row(r).maxCoeff();
    y.row(r) = (A.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  int ai = a.id;
  return t.make(std::move(y), t.needs_grad(a), [ai, self = int(t.size())](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y2 = tp.val(self);
    Mat<S> gx(y2.rows(), y2.cols());
    for (Index r = 0; r < y2.rows(); ++r) {
      S dot = g.row(r).dot(y2.row(r));
      gx.row(r) = y2.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    tp.accum(ai, gx);
  });
}

template <class S>
Var<S> log_softmax_rows(Var<S> a) {
  auto& t = detail::tape_of(a);
  const auto& A = t.val(a);
  Mat<S> y(A.rows(), A.cols());
  for (Index r = 0; r < A.rows(); ++r) {
    S m = A.row(r).maxCoeff();
    S lse = std::log((A.row(r).array() - m).exp().sum());
    y.row(r) = A.row(r).array() - m - lse;
  }
  int ai = a.id;
  return t.make(std::move(y), t.needs_grad(a), [ai, self = int(t.size())](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y2 = tp.val(self);
    Mat<S> gx(y2.rows(), y2.cols());
    for (Index r = 0; r < y2.rows(); ++r) {
      S gs = g.row(r).sum();
      gx.row(r) = g.row(r) - (y2.row(r).array().exp() * gs).matrix();
    }
    tp.accum(ai, gx);
  });
}

// Softmax over a causal band: row r normalizes over columns 0..r of a square
// matrix; columns > r are exactly zero, so prefix outputs cannot depend on
// suffix values.
template <class S>
Var<S> causal_softmax_rows(Var<S> a) {
  auto& t = detail::tape_of(a);
  const auto& A = t.val(a);
  if (A.rows() != A.cols())
    op_error("causal_softmax", "expected square scores, got " + shape_str(A.rows(), A.cols()));
  Mat<S> y = Mat<S>::Zero(A.rows(), A.cols());
  for (Index r = 0; r < A.rows(); ++r) {
    S m = A.row(r).head(r + 1).maxCoeff();
    auto e = (A.row(r).head(r + 1).array() - m).exp();
    y.row(r).head(r + 1) = e / e.sum();
  }
  int ai = a.id;
  return t.make(std::move(y), t.needs_grad(a), [ai, self = int(t.size())](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y2 = tp.val(self);
    Mat<S> gx(y2.rows(), y2.cols());
    for (Index r = 0; r < y2.rows(); ++r) {
      S dot = g.row(r).dot(y2.row(r));  // masked entries have y == 0
      gx.row(r) = y2.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    tp.accum(ai, gx);
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization to mean 0 / variance 1 (epsilon inside the sqrt),
// then elementwise gain and bias ([1 x d] each).
template <class S>
Var<S> layer_norm_rows(Var<S> x, Var<S> gain, Var<S> bias) {
  auto& t = detail::tape_of(x, gain, "layer_norm");
  detail::tape_of(x, bias, "layer_norm");
  const auto& X = t.val(x);
  const auto& G = t.val(gain);
  const auto& B = t.val(bias);
  if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols())
    op_error("layer_norm", "gain/bias must be [1 x " + std::to_string(X.cols()) + "], got " +
                               shape_str(G.rows(), G.cols()) + " and " + shape_str(B.rows(), B.cols()));
  const Index n = X.cols();
  Mat<S> y(X.rows(), n);
  for (Index r = 0; r < X.rows(); ++r) {
    S mu = X.row(r).mean();
    S var = (X.row(r).array() - mu).square().sum() / S(n);
    S inv = S(1) / std::sqrt(var + S(kLayerNormEps));
    y.row(r) = (((X.row(r).array() - mu) * inv) * G.row(0).array() + B.row(0).array()).matrix();
  }
  bool rg = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
  int xi = x.id, gi = gain.id, bi = bias.id;
  return t.make(std::move(y), rg, [xi, gi, bi, n](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& X2 = tp.val(xi);
    const Mat<S>& G2 = tp.val(gi);
    Mat<S> gx(X2.rows(), n);
    Mat<S> ggain = Mat<S>::Zero(1, n);
    Mat<S> gbias = Mat<S>::Zero(1, n);
    for (Index r = 0; r < X2.rows(); ++r) {
      S mu = X2.row(r).mean();
      S var = (X2.row(r).array() - mu).square().sum() / S(n);
      S inv = S(1) / std::sqrt(var + S(kLayerNormEps));
      Eigen::Array<S, 1, Eigen::Dynamic> xhat = (X2.row(r).array() - mu) * inv;
      ggain += (g.row(r).array() * xhat).matrix();
      gbias += g.row(r);
      Eigen::Array<S, 1, Eigen::Dynamic> dxhat = g.row(r).array() * G2.row(0).array();
      S m1 = dxhat.mean();
      S m2 = (dxhat * xhat).mean();
      gx.row(r) = ((dxhat - m1 - xhat * m2) * inv).matrix();
    }
    if (tp.needs_grad(xi)) tp.accum(xi, gx);
    if (tp.needs_grad(gi)) tp.accum(gi, ggain);
    if (tp.needs_grad(bi)) tp.accum(bi, gbias);
  });
}

// Inverted dropout: kept entries scaled by 1/keep so evaluation mode is the
// identity. rate 1 zeroes everything (callers validate configs against it).
template <class S>
Var<S> dropout(Var<S> x, double rate) {
  auto& t = detail::tape_of(x);
  if (rate < 0.0 || rate > 1.0) op_error("dropout", "rate " + std::to_string(rate) + " outside [0, 1]");
  if (!t.training() || rate == 0.0) return x;
  const auto& X = t.val(x);
  Mat<S> mask(X.rows(), X.cols());
  if (rate == 1.0) {
    mask.setZero();
  } else {
    const S inv_keep = S(1.0 / (1.0 - rate));
    Rng& rng = t.rng();
    for (Index r = 0; r < X.rows(); ++r)
      for (Index c = 0; c < X.cols(); ++c) mask(r, c) = rng.uniform() >= rate ? inv_keep : S(0);
  }
  int xi = x.id;
  return t.make(X.cwiseProduct(mask), t.needs_grad(x),
                [xi, mask](Tape<S>& tp, const Mat<S>& g) { tp.accum(xi, g.cwiseProduct(mask)); });
}

// Row lookup by id (embedding). Gradient scatters into the table rows.
template <class S>
Var<S> lookup_rows(Var<S> table, const std::vector<int>& ids) {
  auto& t = detail::tape_of(table);
  const auto& T = t.val(table);
  Mat<S> out(static_cast<Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows())
      op_error("embedding_lookup", "id " + std::to_string(ids[i]) + " out of range for table " +
                                       shape_str(T.rows(), T.cols()));
    out.row(static_cast<Index>(i)) = T.row(ids[i]);
  }
  int ti = table.id;
  return t.make(std::move(out), t.needs_grad(table), [ti, ids](Tape<S>& tp, const Mat<S>& g) {
    Mat<S>& gt = tp.grad_buf(ti);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Index>(i));
  });
}

// Gather rows by index (general; a permutation reorders).
template <class S>
Var<S> gather_rows(Var<S> x, const std::vector<int>& idx) {
  auto& t = detail::tape_of(x);
  const auto& X = t.val(x);
  Mat<S> out(static_cast<Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= X.rows())
      op_error("gather_rows", "row " + std::to_string(idx[i]) + " out of range for " +
                                  shape_str(X.rows(), X.cols()));
    out.row(static_cast<Index>(i)) = X.row(idx[i]);
  }
  int xi = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xi, idx](Tape<S>& tp, const Mat<S>& g) {
    Mat<S>& gx = tp.grad_buf(xi);
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

template <class S>
Var<S> slice_rows(Var<S> x, Index start, Index count) {
  auto& t = detail::tape_of(x);
  const auto& X = t.val(x);
  if (start < 0 || count < 0 || start + count > X.rows())
    op_error("slice", "rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                          ") out of range for " + shape_str(X.rows(), X.cols()));
  int xi = x.id;
  return t.make(X.middleRows(start, count), t.needs_grad(x),
                [xi, start, count](Tape<S>& tp, const Mat<S>& g) {
                  tp.grad_buf(xi).middleRows(start, count) += g;
                });
}

template <class S>
Var<S> slice_cols(Var<S> x, Index start, Index count) {
  auto& t = detail::tape_of(x);
  const auto& X = t.val(x);
  if (start < 0 || count < 0 || start + count > X.cols())
    op_error("slice", "cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                          ") out of range for " + shape_str(X.rows(), X.cols()));
  int xi = x.id;
  return t.make(X.middleCols(start, count), t.needs_grad(x),
                [xi, start, count](Tape<S>& tp, const Mat<S>& g) {
                  tp.grad_buf(xi).middleCols(start, count) += g;
                });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) op_error("concat", "no inputs");
  auto& t = detail::tape_of(parts[0]);
  Index rows = 0;
  Index cols = t.val(parts[0]).cols();
  bool rg = false;
  for (auto p : parts) {
    const auto& P = t.val(p);
    if (P.cols() != cols)
      op_error("concat", "row concat needs equal cols; got " + shape_str(P.rows(), P.cols()) +
                             " vs [* x " + std::to_string(cols) + "]");
    rows += P.rows();
    rg = rg || t.needs_grad(p);
  }
  Mat<S> out(rows, cols);
  Index at = 0;
  std::vector<int> ids;
  std::vector<Index> lens;
  for (auto p : parts) {
    const auto& P = t.val(p);
    out.middleRows(at, P.rows()) = P;
    ids.push_back(p.id);
    lens.push_back(P.rows());
    at += P.rows();
  }
  return t.make(std::move(out), rg, [ids, lens](Tape<S>& tp, const Mat<S>& g) {
    Index at2 = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.needs_grad(ids[i])) tp.accum(ids[i], g.middleRows(at2, lens[i]));
      at2 += lens[i];
    }
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) op_error("concat", "no inputs");
  auto& t = detail::tape_of(parts[0]);
  Index cols = 0;
  Index rows = t.val(parts[0]).rows();
  bool rg = false;
  for (auto p : parts) {
    const auto& P = t.val(p);
    if (P.rows() != rows)
      op_error("concat", "col concat needs equal rows; got " + shape_str(P.rows(), P.cols()) +
                             " vs [" + std::to_string(rows) + " x *]");
    cols += P.cols();
    rg = rg || t.needs_grad(p);
  }
  Mat<S> out(rows, cols);
  Index at = 0;
  std::vector<int> ids;
  std::vector<Index> lens;
  for (auto p : parts) {
    const auto& P = t.val(p);
    out.middleCols(at, P.cols()) = P;
    ids.push_back(p.id);
    lens.push_back(P.cols());
    at += P.cols();
  }
  return t.make(std::move(out), rg, [ids, lens](Tape<S>& tp, const Mat<S>& g) {
    Index at2 = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.needs_grad(ids[i])) tp.accum(ids[i], g.middleCols(at2, lens[i]));
      at2 += lens[i];
    }
  });
}

// Per-row element pick: out[t, 0] = x(t, cols[t]).
template <class S>
Var<S> pick_per_row(Var<S> x, const std::vector<int>& cols) {
  auto& t = detail::tape_of(x);
  const auto& X = t.val(x);
  if (static_cast<Index>(cols.size()) != X.rows())
    op_error("pick", "need one column per row: " + std::to_string(cols.size()) + " for " +
                         shape_str(X.rows(), X.cols()));
  Mat<S> out(X.rows(), 1);
  for (Index r = 0; r < X.rows(); ++r) {
    if (cols[static_cast<std::size_t>(r)] < 0 || cols[static_cast<std::size_t>(r)] >= X.cols())
      op_error("pick", "column " + std::to_string(cols[static_cast<std::size_t>(r)]) +
                           " out of range for " + shape_str(X.rows(), X.cols()));
    out(r, 0) = X(r, cols[static_cast<std::size_t>(r)]);
  }
  int xi = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xi, cols](Tape<S>& tp, const Mat<S>& g) {
    Mat<S>& gx = tp.grad_buf(xi);
    for (Index r = 0; r < g.rows(); ++r) gx(r, cols[static_cast<std::size_t>(r)]) += g(r, 0);
  });
}

// Column-wise max over rows -> [1 x C]. Ties break to the first row.
template <class S>
Var<S> max_over_rows(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.val(x);
  if (X.rows() < 1) op_error("max_over_axis", "empty input " + shape_str(X.rows(), X.cols()));
  Mat<S> out(1, X.cols());
  std::vector<Index> arg(static_cast<std::size_t>(X.cols()));
  for (Index c = 0; c < X.cols(); ++c) {
    Index best = 0;
    for (Index r = 1; r < X.rows(); ++r)
      if (X(r, c) > X(best, c)) best = r;
    arg[static_cast<std::size_t>(c)] = best;
    out(0, c) = X(best, c);
  }
  int xi = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xi, arg](Tape<S>& tp, const Mat<S>& g) {
    Mat<S>& gx = tp.grad_buf(xi);
    for (Index c = 0; c < g.cols(); ++c) gx(arg[static_cast<std::size_t>(c)], c) += g(0, c);
  });
}

template <class S>
Var<S> sum(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.val(x);
  Mat<S> out(1, 1);
  out(0, 0) = X.sum();
  const Index r = X.rows(), c = X.cols();
  int xi = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xi, r, c](Tape<S>& tp, const Mat<S>& g) {
    tp.accum(xi, Mat<S>::Constant(r, c, g(0, 0)));
  });
}

template <class S>
Var<S> mean(Var<S> x) {
  auto& t = detail::tape_of(x);
  const auto& X = t.val(x);
  return scale(sum(x), S(1) / S(X.size()));
}

// Fused per-word character convolution: valid 1-d convolution of width w over
// the character axis (zero padding when the word is shorter than w), tanh,
// then max pooling over positions. chars [L x C], kernel [(w*C) x F],
// bias [1 x F] -> [1 x F].
template <class S>
Var<S> char_conv_tanh_max(Var<S> chars, Var<S> kernel, Var<S> bias, int width) {
  auto& t = detail::tape_of(chars, kernel, "char_conv");
  detail::tape_of(chars, bias, "char_conv");
  const auto& X = t.val(chars);
  const auto& K = t.val(kernel);
  const auto& B = t.val(bias);
  const Index L = X.rows(), C = X.cols(), F = K.cols();
  if (width < 1 || K.rows() != width * C || B.rows() != 1 || B.cols() != F)
    op_error("char_conv", "kernel " + shape_str(K.rows(), K.cols()) + " / bias " +
                              shape_str(B.rows(), B.cols()) + " inconsistent with width " +
                              std::to_string(width) + " and chars " + shape_str(L, C));
  if (L < 1) op_error("char_conv", "empty word");
  const Index P = std::max<Index>(1, L - width + 1);
  Mat<S> pre(P, F);
  Eigen::Matrix<S, 1, Eigen::Dynamic> window(width * C);
  for (Index p = 0; p < P; ++p) {
    window.setZero();
    for (Index r = 0; r < width; ++r)
      if (p + r < L) window.segment(r * C, C) = X.row(p + r);
    pre.row(p) = (window * K + B).array().tanh().matrix();
  }
  Mat<S> out(1, F);
  std::vector<Index> arg(static_cast<std::size_t>(F));
  for (Index f = 0; f < F; ++f) {
    Index best = 0;
    for (Index p = 1; p < P; ++p)
      if (pre(p, f) > pre(best, f)) best = p;
    arg[static_cast<std::size_t>(f)] = best;
    out(0, f) = pre(best, f);
  }
  bool rg = t.needs_grad(chars) || t.needs_grad(kernel) || t.needs_grad(bias);
  int ci = chars.id, ki = kernel.id, bi = bias.id;
  return t.make(std::move(out), rg,
                [ci, ki, bi, width, L, C, arg, self = int(t.size())](Tape<S>& tp, const Mat<S>& g) {
                  const Mat<S>& y = tp.val(self);
                  const Mat<S>& X2 = tp.val(ci);
                  const Mat<S>& K2 = tp.val(ki);
                  for (Index f = 0; f < y.cols(); ++f) {
                    S c = g(0, f) * (S(1) - y(0, f) * y(0, f));
                    if (c == S(0)) continue;
                    Index p = arg[static_cast<std::size_t>(f)];
                    if (tp.needs_grad(bi)) tp.grad_buf(bi)(0, f) += c;
                    for (Index r = 0; r < width; ++r) {
                      if (p + r >= L) continue;
                      if (tp.needs_grad(ki))
                        tp.grad_buf(ki).block(r * C, f, C, 1) += c * X2.row(p + r).transpose();
                      if (tp.needs_grad(ci))
                        tp.grad_buf(ci).row(p + r) += c * K2.block(r * C, f, C, 1).transpose();
                    }
                  }
                });
}

template <class S>
Var<S> operator+(Var<S> a, Var<S> b) {
  return add(a, b);
}
template <class S>
Var<S> operator-(Var<S> a, Var<S> b) {
  return sub(a, b);
}
template <class S>
Var<S> operator*(Var<S> a, Var<S> b) {
  return matmul(a, b);
}
template <class S>
Var<S> operator*(S k, Var<S> a) {
  return scale(a, k);
}
template <class S>
Var<S> operator*(Var<S> a, S k) {
  return scale(a, k);
}

}  // namespace adaptlm
