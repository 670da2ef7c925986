#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "piattnp/errors.hpp"

namespace piattnp::nn {

using Matrix = Eigen::MatrixXd;

struct NonScalarLoss : NumericalError {
  NonScalarLoss() : NumericalError("backward requires a 1x1 loss node") {}
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Trainable parameter. Lives outside the tape; each forward pass mounts it
/// as a leaf node and backward() adds the leaf gradient into `grad`.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;

  Param() = default;
  Param(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
  long size() const { return value.size(); }
};

class Tape;

/// Handle to a node on a tape. Valid until the tape is cleared.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  long rows() const { return value().rows(); }
  long cols() const { return value().cols(); }
};

/// Records the forward computation as an append-only node arena; the
/// reverse sweep walks creation order backwards, so topological order holds
/// by construction. Nodes the loss never reached are skipped.
class Tape {
 public:
  Var constant(Matrix v) { return emit(std::move(v), nullptr); }

  Var leaf(Param& p) {
    Param* pp = &p;
    const int self = size();
    return emit(p.value, [self, pp](Tape& t) { pp->grad += t.grad(self); });
  }

  Var emit(Matrix v, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(v), Matrix(), false, std::move(back)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Matrix& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool grad_set(int id) const { return nodes_[static_cast<size_t>(id)].grad_set; }

  void accumulate(int id, const Matrix& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw ShapeMismatch("gradient shape disagrees with node value");
    if (!n.grad_set) {
      n.grad = g;
      n.grad_set = true;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var& loss) {
    if (loss.tape != this) throw ShapeMismatch("loss lives on a different tape");
    const Matrix& lv = value(loss.id);
    if (lv.rows() != 1 || lv.cols() != 1) throw NonScalarLoss();
    accumulate(loss.id, Matrix::Ones(1, 1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad_set && n.back) n.back(*this);
    }
  }

  void clear() { nodes_.clear(); }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool grad_set = false;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace ops {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": operand shapes differ");
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id, self = t.size();
  return t.emit(a.value() + b.value(), [self, ia, ib](Tape& t) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

/// a is B x C, bias is 1 x C broadcast over rows.
inline Var add_row_broadcast(const Var& a, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw ShapeMismatch("add_row_broadcast: bias must be 1 x cols(a)");
  Tape& t = *a.tape;
  const int ia = a.id, ib = bias.id, self = t.size();
  Matrix v = a.value();
  v.rowwise() += bias.value().row(0);
  return t.emit(std::move(v), [self, ia, ib](Tape& t) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g.colwise().sum());
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id, self = t.size();
  return t.emit(a.value() - b.value(), [self, ia, ib](Tape& t) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id, self = t.size();
  return t.emit(a.value().cwiseProduct(b.value()), [self, ia, ib](Tape& t) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

inline Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id, self = t.size();
  return t.emit(a.value().cwiseQuotient(b.value()), [self, ia, ib](Tape& t) {
    const Matrix& g = t.grad(self);
    const Matrix& bv = t.value(ib);
    t.accumulate(ia, g.cwiseQuotient(bv));
    t.accumulate(ib, -g.cwiseProduct(t.value(self)).cwiseQuotient(bv));
  });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id, self = t.size();
  return t.emit(a.value() * b.value(), [self, ia, ib](Tape& t) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g * t.value(ib).transpose());
    t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

inline Var transpose(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit(a.value().transpose(),
                [self, ia](Tape& t) { t.accumulate(ia, t.grad(self).transpose()); });
}

inline Var relu(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit(a.value().cwiseMax(0.0), [self, ia](Tape& t) {
    const Matrix mask = (t.value(ia).array() > 0.0).cast<double>();
    t.accumulate(ia, t.grad(self).cwiseProduct(mask));
  });
}

/// softplus(x) = max(x, 0) + log1p(exp(-|x|)); overflow-free in both tails.
inline Var softplus(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  const auto& x = a.value().array();
  Matrix v = (x.cwiseMax(0.0) + (-x.abs()).exp().log1p()).matrix();
  return t.emit(std::move(v), [self, ia](Tape& t) {
    // d softplus / dx = sigmoid(x), written via tanh for stability
    const Matrix sig = (0.5 * (1.0 + (0.5 * t.value(ia).array()).tanh())).matrix();
    t.accumulate(ia, t.grad(self).cwiseProduct(sig));
  });
}

inline Var exp(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit(a.value().array().exp().matrix(), [self, ia](Tape& t) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

inline Var log(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit(a.value().array().log().matrix(), [self, ia](Tape& t) {
    t.accumulate(ia, t.grad(self).cwiseQuotient(t.value(ia)));
  });
}

inline Var sqrt(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit(a.value().array().sqrt().matrix(), [self, ia](Tape& t) {
    t.accumulate(ia, (t.grad(self).array() / (2.0 * t.value(self).array())).matrix());
  });
}

inline Var scalar_mul(const Var& a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit(s * a.value(), [self, ia, s](Tape& t) { t.accumulate(ia, s * t.grad(self)); });
}

inline Var scalar_add(const Var& a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit((a.value().array() + s).matrix(),
                [self, ia](Tape& t) { t.accumulate(ia, t.grad(self)); });
}

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  Matrix v = a.value();
  for (long r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    v.row(r) = (v.row(r).array() - m).exp();
    v.row(r) /= v.row(r).sum();
  }
  return t.emit(std::move(v), [self, ia](Tape& t) {
    // dX = (g - rowsum(g .* y)) .* y, assembled without forming the Jacobian
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const Eigen::VectorXd rowsum = g.cwiseProduct(y).rowwise().sum();
    t.accumulate(ia, (g - rowsum.replicate(1, y.cols())).cwiseProduct(y));
  });
}

inline Var sum_all(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return t.emit(std::move(v), [self, ia](Tape& t) {
    const double g = t.grad(self)(0, 0);
    const Matrix& av = t.value(ia);
    t.accumulate(ia, Matrix::Constant(av.rows(), av.cols(), g));
  });
}

inline Var mean_all(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  const double n = static_cast<double>(a.rows() * a.cols());
  Matrix v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return t.emit(std::move(v), [self, ia, n](Tape& t) {
    const double g = t.grad(self)(0, 0) / n;
    const Matrix& av = t.value(ia);
    t.accumulate(ia, Matrix::Constant(av.rows(), av.cols(), g));
  });
}

/// B x C -> 1 x C column means (order-invariant context aggregation).
inline Var mean_rows(const Var& a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  const double b = static_cast<double>(a.rows());
  return t.emit(a.value().colwise().mean(), [self, ia, b](Tape& t) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g.replicate(t.value(ia).rows(), 1) / b);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no operands");
  Tape& t = *parts[0].tape;
  const long rows = parts[0].rows();
  long cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::vector<int> ids;
  std::vector<long> widths;
  long at = 0;
  for (const Var& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    ids.push_back(p.id);
    widths.push_back(p.cols());
    at += p.cols();
  }
  const int self = t.size();
  return t.emit(std::move(v), [self, ids, widths](Tape& t) {
    const Matrix& g = t.grad(self);
    long at = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      t.accumulate(ids[k], g.middleCols(at, widths[k]));
      at += widths[k];
    }
  });
}

inline Var slice_cols(const Var& a, long start, long n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw ShapeMismatch("slice_cols: out of range");
  Tape& t = *a.tape;
  const int ia = a.id, self = t.size();
  return t.emit(a.value().middleCols(start, n), [self, ia, start, n](Tape& t) {
    const Matrix& av = t.value(ia);
    Matrix g = Matrix::Zero(av.rows(), av.cols());
    g.middleCols(start, n) = t.grad(self);
    t.accumulate(ia, g);
  });
}

}  // namespace ops

}  // namespace piattnp::nn
