#pragma once

// Reverse-mode differentiation over dense matrices. A Tape records each
// operation's value and a closure that pushes its output gradient to its inputs.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "goflow/errors.hpp"
#include "goflow/types.hpp"

namespace goflow::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const MatX& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  Eigen::Index size() const { return val().size(); }
  double scalar() const { return val()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const MatX& out_grad)>;

  Var constant(MatX value) { return push(std::move(value), false, {}); }
  Var leaf(MatX value) { return push(std::move(value), true, {}); }

  const MatX& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient of the last backward() target with respect to v (zeros if unreached).
  MatX grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.size() ? n.grad : MatX::Zero(n.value.rows(), n.value.cols());
  }

  void accumulate(Var v, const MatX& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }

  Var push(MatX value, bool needs_grad, Backward back) {
    nodes_.push_back(Node{std::move(value), MatX(), std::move(back), needs_grad});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Back-propagates from a 1x1 node.
  void backward(Var out) {
    for (Node& n : nodes_) n.grad.resize(0, 0);
    if (value(out).size() != 1) throw StructuralError("backward() needs a scalar output");
    if (!nodes_[out.id].needs_grad) return;
    nodes_[out.id].grad = MatX::Ones(1, 1);
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
      const MatX g = n.grad;
      n.back(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    MatX value;
    MatX grad;
    Backward back;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

inline const MatX& Var::val() const { return tape->value(*this); }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->needs_grad(v)) return true;
  return false;
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw StructuralError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

/// Elementwise unary op with derivative f'(x) given as a matrix of the same shape.
inline Var unary(Var a, MatX value, MatX deriv) {
  Tape& t = *a.tape;
  return t.push(std::move(value), t.needs_grad(a),
                [a, d = std::move(deriv)](Tape& tp, const MatX& g) { tp.accumulate(a, g.cwiseProduct(d)); });
}

}  // namespace detail

inline Var constant(Tape& t, MatX value) { return t.constant(std::move(value)); }

inline Var detach(Var a) { return a.tape->constant(a.val()); }

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows())
    throw StructuralError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " + std::to_string(b.rows()));
  Tape& t = *a.tape;
  return t.push(a.val() * b.val(), detail::any_grad({a, b}), [a, b](Tape& tp, const MatX& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * b.val().transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, a.val().transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  detail::check_same_shape(a, b, "add");
  Tape& t = *a.tape;
  return t.push(a.val() + b.val(), detail::any_grad({a, b}), [a, b](Tape& tp, const MatX& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_shape(a, b, "sub");
  Tape& t = *a.tape;
  return t.push(a.val() - b.val(), detail::any_grad({a, b}), [a, b](Tape& tp, const MatX& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

/// a (n x k) plus row vector b (1 x k) broadcast over rows.
inline Var add_row(Var a, Var b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw StructuralError("add_row: bias shape mismatch");
  Tape& t = *a.tape;
  MatX v = a.val();
  v.rowwise() += b.val().row(0);
  return t.push(std::move(v), detail::any_grad({a, b}), [a, b](Tape& tp, const MatX& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.accumulate(b, g.colwise().sum());
  });
}

inline Var mul(Var a, Var b) {
  detail::check_same_shape(a, b, "mul");
  Tape& t = *a.tape;
  return t.push(a.val().cwiseProduct(b.val()), detail::any_grad({a, b}), [a, b](Tape& tp, const MatX& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(b.val()));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(a.val()));
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.push(a.val() * s, t.needs_grad(a), [a, s](Tape& tp, const MatX& g) { tp.accumulate(a, g * s); });
}

inline Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  return t.push(a.val().array() + s, t.needs_grad(a), [a](Tape& tp, const MatX& g) { tp.accumulate(a, g); });
}

/// Multiplies row i of a by w[i].
inline Var scale_rows(Var a, const VecX& w) {
  if (w.size() != a.rows()) throw StructuralError("scale_rows: weight count mismatch");
  Tape& t = *a.tape;
  return t.push(w.asDiagonal() * a.val(), t.needs_grad(a),
                [a, w](Tape& tp, const MatX& g) { tp.accumulate(a, w.asDiagonal() * g); });
}

inline Var silu(Var a) {
  const Eigen::ArrayXXd x = a.val().array();
  const Eigen::ArrayXXd s = 1.0 / (1.0 + (-x).exp());
  return detail::unary(a, (x * s).matrix(), (s * (1.0 + x * (1.0 - s))).matrix());
}

inline Var sin(Var a) { return detail::unary(a, a.val().array().sin().matrix(), a.val().array().cos().matrix()); }
inline Var cos(Var a) { return detail::unary(a, a.val().array().cos().matrix(), (-a.val().array().sin()).matrix()); }

inline Var tanh(Var a) {
  const Eigen::ArrayXXd y = a.val().array().tanh();
  return detail::unary(a, y.matrix(), (1.0 - y.square()).matrix());
}

inline Var exp(Var a) {
  MatX e = a.val().array().exp().matrix();
  return detail::unary(a, e, e);
}

inline Var log(Var a) { return detail::unary(a, a.val().array().log().matrix(), a.val().array().inverse().matrix()); }

inline Var square(Var a) { return detail::unary(a, a.val().array().square().matrix(), 2.0 * a.val()); }

/// Elementwise max(a, floor); gradient passes where a > floor.
inline Var floor_at(Var a, double floor) {
  const MatX v = a.val().cwiseMax(floor);
  const MatX mask = (a.val().array() > floor).cast<double>().matrix();
  return detail::unary(a, v, mask);
}

/// Sum of all entries as a 1x1 node.
inline Var sum(Var a) {
  Tape& t = *a.tape;
  MatX v(1, 1);
  v(0, 0) = a.val().sum();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(std::move(v), t.needs_grad(a),
                [a, r, c](Tape& tp, const MatX& g) { tp.accumulate(a, MatX::Constant(r, c, g(0, 0))); });
}

/// Row sums as an n x 1 column.
inline Var row_sum(Var a) {
  Tape& t = *a.tape;
  const Eigen::Index c = a.cols();
  return t.push(a.val().rowwise().sum(), t.needs_grad(a),
                [a, c](Tape& tp, const MatX& g) { tp.accumulate(a, g.replicate(1, c)); });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw StructuralError("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool grad = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw StructuralError("concat_cols: row count mismatch");
    cols += p.cols();
    grad = grad || t.needs_grad(p);
  }
  MatX v(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleCols(off, p.cols()) = p.val();
    off += p.cols();
  }
  return t.push(std::move(v), grad, [parts](Tape& tp, const MatX& g) {
    Eigen::Index o = 0;
    for (const Var& p : parts) {
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleCols(o, p.cols()));
      o += p.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw StructuralError("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool grad = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw StructuralError("concat_rows: column count mismatch");
    rows += p.rows();
    grad = grad || t.needs_grad(p);
  }
  MatX v(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleRows(off, p.rows()) = p.val();
    off += p.rows();
  }
  return t.push(std::move(v), grad, [parts](Tape& tp, const MatX& g) {
    Eigen::Index o = 0;
    for (const Var& p : parts) {
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleRows(o, p.rows()));
      o += p.rows();
    }
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) throw StructuralError("slice_cols: range out of bounds");
  Tape& t = *a.tape;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(a.val().middleCols(start, n), t.needs_grad(a), [a, start, n, r, c](Tape& tp, const MatX& g) {
    MatX full = MatX::Zero(r, c);
    full.middleCols(start, n) = g;
    tp.accumulate(a, full);
  });
}

/// Rows a[idx[0]], a[idx[1]], ...
inline Var gather_rows(Var a, std::vector<int> idx) {
  Tape& t = *a.tape;
  MatX v(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.rows()) throw StructuralError("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(k)) = a.val().row(idx[k]);
  }
  const Eigen::Index r = a.rows();
  return t.push(std::move(v), t.needs_grad(a), [a, idx = std::move(idx), r](Tape& tp, const MatX& g) {
    MatX full = MatX::Zero(r, g.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) full.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
    tp.accumulate(a, full);
  });
}

/// out[seg[k]] += a[k]; out has num_segments rows.
inline Var segment_sum(Var a, std::vector<int> seg, Eigen::Index num_segments) {
  if (static_cast<Eigen::Index>(seg.size()) != a.rows()) throw StructuralError("segment_sum: segment count mismatch");
  Tape& t = *a.tape;
  MatX v = MatX::Zero(num_segments, a.cols());
  for (std::size_t k = 0; k < seg.size(); ++k) {
    if (seg[k] < 0 || seg[k] >= num_segments) throw StructuralError("segment_sum: segment out of range");
    v.row(seg[k]) += a.val().row(static_cast<Eigen::Index>(k));
  }
  return t.push(std::move(v), t.needs_grad(a), [a, seg = std::move(seg)](Tape& tp, const MatX& g) {
    MatX ga(static_cast<Eigen::Index>(seg.size()), g.cols());
    for (std::size_t k = 0; k < seg.size(); ++k) ga.row(static_cast<Eigen::Index>(k)) = g.row(seg[k]);
    tp.accumulate(a, ga);
  });
}

inline Var segment_mean(Var a, const std::vector<int>& seg, Eigen::Index num_segments) {
  VecX counts = VecX::Zero(num_segments);
  for (int s : seg) counts[s] += 1.0;
  return scale_rows(segment_sum(a, seg, num_segments), counts.cwiseMax(1.0).cwiseInverse());
}

/// Row-major reshape: entry (i, j) of the result is entry i * cols + j of a read row by row.
inline Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.size()) throw StructuralError("reshape: size mismatch");
  Tape& t = *a.tape;
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMat src = a.val();
  const MatX v = Eigen::Map<const RowMat>(src.data(), rows, cols);
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(v, t.needs_grad(a), [a, r0, c0](Tape& tp, const MatX& g) {
    const RowMat gr = g;
    tp.accumulate(a, MatX(Eigen::Map<const RowMat>(gr.data(), r0, c0)));
  });
}

// ---------------------------------------------------------------------------
// Quaternion rows (w, x, y, z) and rotation-vector rows.

namespace detail {

inline Eigen::Matrix4d left_mult(const Eigen::Vector4d& p) {
  Eigen::Matrix4d l;
  l << p[0], -p[1], -p[2], -p[3],
       p[1],  p[0], -p[3],  p[2],
       p[2],  p[3],  p[0], -p[1],
       p[3], -p[2],  p[1],  p[0];
  return l;
}

inline Eigen::Matrix4d right_mult(const Eigen::Vector4d& q) {
  Eigen::Matrix4d r;
  r << q[0], -q[1], -q[2], -q[3],
       q[1],  q[0],  q[3], -q[2],
       q[2], -q[3],  q[0],  q[1],
       q[3],  q[2], -q[1],  q[0];
  return r;
}

/// exp of a rotation vector to a quaternion, and its 4x3 Jacobian.
inline Eigen::Vector4d quat_exp_row(const Eigen::Vector3d& v, Eigen::Matrix<double, 4, 3>* jac) {
  const double th = v.norm();
  double s, gs;  // s = sin(th/2)/th, gs = (ds/dth)/th
  if (th < 1e-4) {
    const double t2 = th * th;
    s = 0.5 - t2 / 48.0;
    gs = -1.0 / 24.0 + t2 / 960.0;
  } else {
    s = std::sin(0.5 * th) / th;
    gs = (0.5 * th * std::cos(0.5 * th) - std::sin(0.5 * th)) / (th * th * th);
  }
  Eigen::Vector4d q;
  q << std::cos(0.5 * th), s * v;
  if (jac) {
    jac->row(0) = -0.5 * s * v.transpose();
    jac->bottomRows<3>() = s * Eigen::Matrix3d::Identity() + gs * v * v.transpose();
  }
  return q;
}

/// Rotation vector of a quaternion (canonical sign w >= 0), and its 3x4 Jacobian.
inline Eigen::Vector3d quat_log_row(Eigen::Vector4d q, Eigen::Matrix<double, 3, 4>* jac) {
  double sign = 1.0;
  if (q[0] < 0) {
    sign = -1.0;
    q = -q;
  }
  const double w = q[0];
  const Eigen::Vector3d u = q.tail<3>();
  const double n = u.norm();
  const double rho2 = n * n + w * w;
  double f, gf;  // f = alpha/n with alpha = 2 atan2(n, w); gf = (df/dn)/n
  if (n < 1e-6) {
    f = 2.0 / w - 2.0 * n * n / (3.0 * w * w * w);
    gf = -4.0 / (3.0 * w * w * w);
  } else {
    const double alpha = 2.0 * std::atan2(n, w);
    f = alpha / n;
    gf = (2.0 * w / rho2 * n - alpha) / (n * n * n);
  }
  if (jac) {
    // d/dw of f u: u * (dalpha/dw)/n with dalpha/dw = -2n/rho2.
    jac->col(0) = -2.0 / rho2 * u;
    jac->rightCols<3>() = f * Eigen::Matrix3d::Identity() + gf * u * u.transpose();
    *jac *= sign;
  }
  return f * u;
}

}  // namespace detail

/// Row-wise Hamilton product of B x 4 quaternion rows.
inline Var quat_mul(Var a, Var b) {
  if (a.cols() != 4 || b.cols() != 4 || a.rows() != b.rows()) throw StructuralError("quat_mul: expects matching B x 4");
  Tape& t = *a.tape;
  MatX v(a.rows(), 4);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    v.row(i) = (detail::left_mult(a.val().row(i).transpose()) * b.val().row(i).transpose()).transpose();
  return t.push(std::move(v), detail::any_grad({a, b}), [a, b](Tape& tp, const MatX& g) {
    MatX ga(a.rows(), 4), gb(a.rows(), 4);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const Eigen::Vector4d gi = g.row(i).transpose();
      ga.row(i) = (detail::right_mult(b.val().row(i).transpose()).transpose() * gi).transpose();
      gb.row(i) = (detail::left_mult(a.val().row(i).transpose()).transpose() * gi).transpose();
    }
    tp.accumulate(a, ga);
    tp.accumulate(b, gb);
  });
}

/// Row-wise exponential map B x 3 -> B x 4.
inline Var quat_exp(Var v) {
  if (v.cols() != 3) throw StructuralError("quat_exp: expects B x 3");
  Tape& t = *v.tape;
  const Eigen::Index b = v.rows();
  MatX out(b, 4);
  std::vector<Eigen::Matrix<double, 4, 3>> jacs(b);
  for (Eigen::Index i = 0; i < b; ++i)
    out.row(i) = detail::quat_exp_row(v.val().row(i).transpose(), &jacs[i]).transpose();
  return t.push(std::move(out), t.needs_grad(v), [v, jacs = std::move(jacs)](Tape& tp, const MatX& g) {
    MatX gv(g.rows(), 3);
    for (Eigen::Index i = 0; i < g.rows(); ++i) gv.row(i) = (jacs[i].transpose() * g.row(i).transpose()).transpose();
    tp.accumulate(v, gv);
  });
}

/// Row-wise logarithm B x 4 -> B x 3 (shortest rotation).
inline Var quat_log(Var q) {
  if (q.cols() != 4) throw StructuralError("quat_log: expects B x 4");
  Tape& t = *q.tape;
  const Eigen::Index b = q.rows();
  MatX out(b, 3);
  std::vector<Eigen::Matrix<double, 3, 4>> jacs(b);
  for (Eigen::Index i = 0; i < b; ++i)
    out.row(i) = detail::quat_log_row(q.val().row(i).transpose(), &jacs[i]).transpose();
  return t.push(std::move(out), t.needs_grad(q), [q, jacs = std::move(jacs)](Tape& tp, const MatX& g) {
    MatX gq(g.rows(), 4);
    for (Eigen::Index i = 0; i < g.rows(); ++i) gq.row(i) = (jacs[i].transpose() * g.row(i).transpose()).transpose();
    tp.accumulate(q, gq);
  });
}

/// Row-wise rotation matrices, B x 4 -> B x 9 (row-major entries of R).
inline Var quat_to_matrix(Var q) {
  if (q.cols() != 4) throw StructuralError("quat_to_matrix: expects B x 4");
  Tape& t = *q.tape;
  const Eigen::Index b = q.rows();
  MatX out(b, 9);
  for (Eigen::Index i = 0; i < b; ++i) {
    const double w = q.val()(i, 0), x = q.val()(i, 1), y = q.val()(i, 2), z = q.val()(i, 3);
    out.row(i) << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y), 2 * (x * y + w * z),
        1 - 2 * (x * x + z * z), 2 * (y * z - w * x), 2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  }
  return t.push(std::move(out), t.needs_grad(q), [q](Tape& tp, const MatX& g) {
    MatX gq(g.rows(), 4);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double w = q.val()(i, 0), x = q.val()(i, 1), y = q.val()(i, 2), z = q.val()(i, 3);
      // d entries / d (w, x, y, z), rows follow the output layout above.
      Eigen::Matrix<double, 9, 4> d;
      d << 0, 0, -4 * y, -4 * z,
           -2 * z, 2 * y, 2 * x, -2 * w,
           2 * y, 2 * z, 2 * w, 2 * x,
           2 * z, 2 * y, 2 * x, 2 * w,
           0, -4 * x, 0, -4 * z,
           -2 * x, -2 * w, 2 * z, 2 * y,
           -2 * y, 2 * z, -2 * w, 2 * x,
           2 * x, 2 * w, 2 * z, 2 * y,
           0, -4 * x, -4 * y, 0;
      gq.row(i) = (d.transpose() * g.row(i).transpose()).transpose();
    }
    tp.accumulate(q, gq);
  });
}

/// Wraps entries to (-pi, pi]; values already inside are untouched. The shift is
/// piecewise constant so the gradient is the identity.
inline Var wrap_angles(Var a) {
  MatX v = a.val();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    double& x = v.data()[i];
    if (!(x > -std::numbers::pi && x <= std::numbers::pi)) x = std::atan2(std::sin(x), std::cos(x));
  }
  return detail::unary(a, std::move(v), MatX::Ones(a.rows(), a.cols()));
}

/// Constant sparse matrix times a.
inline Var sparse_matmul(const Eigen::SparseMatrix<double>& m, Var a) {
  if (m.cols() != a.rows()) throw StructuralError("sparse_matmul: inner dimensions differ");
  Tape& t = *a.tape;
  return t.push(MatX(m * a.val()), t.needs_grad(a),
                [m, a](Tape& tp, const MatX& g) { tp.accumulate(a, MatX(m.transpose() * g)); });
}

/// Row-wise log of the exponential-chart volume factor of SO(3),
/// log(2 (1 - cos|v|) / |v|^2), B x 3 -> B x 1.
inline Var so3_log_volume(Var v) {
  if (v.cols() != 3) throw StructuralError("so3_log_volume: expects B x 3");
  Tape& t = *v.tape;
  const Eigen::Index b = v.rows();
  MatX out(b, 1), dir(b, 3);
  for (Eigen::Index i = 0; i < b; ++i) {
    const Eigen::Vector3d r = v.val().row(i).transpose();
    const double a = r.norm();
    double coef;  // d/dv log J = coef * v
    if (a < 1e-4) {
      out(i, 0) = -a * a / 12.0;
      coef = -1.0 / 6.0 - a * a / 360.0;
    } else {
      out(i, 0) = std::log(2.0 * (1.0 - std::cos(a)) / (a * a));
      coef = (1.0 / std::tan(0.5 * a) - 2.0 / a) / a;
    }
    dir.row(i) = coef * r.transpose();
  }
  return t.push(std::move(out), t.needs_grad(v),
                [v, dir](Tape& tp, const MatX& g) { tp.accumulate(v, g.col(0).asDiagonal() * dir); });
}

/// Row-wise cross product of B x 3 rows.
inline Var cross_rows(Var a, Var b) {
  if (a.cols() != 3 || b.cols() != 3 || a.rows() != b.rows()) throw StructuralError("cross_rows: expects matching B x 3");
  Tape& t = *a.tape;
  MatX v(a.rows(), 3);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    v.row(i) = Eigen::Vector3d(a.val().row(i).transpose()).cross(Eigen::Vector3d(b.val().row(i).transpose())).transpose();
  return t.push(std::move(v), detail::any_grad({a, b}), [a, b](Tape& tp, const MatX& g) {
    MatX ga(a.rows(), 3), gb(a.rows(), 3);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const Eigen::Vector3d av = a.val().row(i).transpose(), bv = b.val().row(i).transpose(), gi = g.row(i).transpose();
      ga.row(i) = bv.cross(gi).transpose();
      gb.row(i) = gi.cross(av).transpose();
    }
    tp.accumulate(a, ga);
    tp.accumulate(b, gb);
  });
}

}  // namespace goflow::ad
