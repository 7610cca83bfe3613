#include "vtrfeat/diff.hpp"

#include <algorithm>
#include <cmath>

#include "vtrfeat/errors.hpp"
#include "vtrfeat/estimator.hpp"

namespace vtrfeat {

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<int>(nodes_.size()) - 1};
}

NodeId Tape::constant(Matrix value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::parameter(Matrix value) {
  Node n;
  n.op = "parameter";
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_parameter = true;
  return push(std::move(n));
}

NodeId Tape::record(std::string op, Matrix value, std::vector<NodeId> inputs, BackwardFn fn) {
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  for (NodeId in : inputs) {
    if (in.index < 0 || in.index >= static_cast<int>(nodes_.size()))
      throw ShapeError("Tape::record: input node does not exist");
    n.requires_grad = n.requires_grad || nodes_[in.index].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

void Tape::accumulate(NodeId id, const Matrix& g) {
  const Node& n = nodes_.at(id.index);
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw ShapeError("Tape::accumulate: gradient shape mismatch at op '" + n.op + "'");
  if (!has_grad_[id.index]) {
    grads_[id.index] = g;
    has_grad_[id.index] = 1;
  } else {
    grads_[id.index] += g;
  }
}

GradientMap Tape::backward(NodeId output) {
  const Node& out = nodes_.at(output.index);
  if (out.value.rows() != 1 || out.value.cols() != 1)
    throw ShapeError("Tape::backward: output must be a scalar node");

  grads_.assign(nodes_.size(), Matrix());
  has_grad_.assign(nodes_.size(), 0);
  accumulate(output, Matrix::Ones(1, 1));

  for (int i = output.index; i >= 0; --i) {
    if (!has_grad_[i]) continue;
    Node& n = nodes_[i];
    if (n.backward) n.backward(grads_[i], *this);
    if (!n.is_parameter) {
      grads_[i].resize(0, 0);  // release intermediate buffers early
    }
  }

  GradientMap result;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].is_parameter) continue;
    if (has_grad_[i]) {
      result.emplace(static_cast<int>(i), std::move(grads_[i]));
    } else {
      result.emplace(static_cast<int>(i),
                     Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols()));
    }
  }
  grads_.clear();
  has_grad_.clear();
  return result;
}

namespace ad {
namespace {

void require_same_shape(const Tape& t, NodeId a, NodeId b, const char* op) {
  const Matrix& x = t.value(a);
  const Matrix& y = t.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw ShapeError(std::string(op) + ": operand shapes differ");
}

}  // namespace

NodeId add(Tape& t, NodeId a, NodeId b) {
  require_same_shape(t, a, b, "add");
  return t.record("add", t.value(a) + t.value(b), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

NodeId sub(Tape& t, NodeId a, NodeId b) {
  require_same_shape(t, a, b, "sub");
  return t.record("sub", t.value(a) - t.value(b), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

NodeId mul(Tape& t, NodeId a, NodeId b) {
  require_same_shape(t, a, b, "mul");
  return t.record("mul", t.value(a).cwiseProduct(t.value(b)), {a, b},
                  [a, b](const Matrix& g, Tape& tp) {
                    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
                    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
                  });
}

NodeId div(Tape& t, NodeId a, NodeId b) {
  require_same_shape(t, a, b, "div");
  return t.record("div", t.value(a).cwiseQuotient(t.value(b)), {a, b},
                  [a, b](const Matrix& g, Tape& tp) {
                    const Matrix& y = tp.value(b);
                    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseQuotient(y));
                    if (tp.requires_grad(b))
                      tp.accumulate(b, -g.cwiseProduct(tp.value(a)).cwiseQuotient(y.cwiseProduct(y)));
                  });
}

NodeId sqrt(Tape& t, NodeId a) {
  const NodeId self{static_cast<int>(t.size())};
  return t.record("sqrt", t.value(a).cwiseSqrt(), {a}, [a, self](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g.cwiseQuotient(2.0 * tp.value(self)));
  });
}

NodeId exp(Tape& t, NodeId a) {
  const NodeId self{static_cast<int>(t.size())};
  return t.record("exp", t.value(a).array().exp().matrix(), {a}, [a, self](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g.cwiseProduct(tp.value(self)));
  });
}

NodeId log(Tape& t, NodeId a) {
  return t.record("log", t.value(a).array().log().matrix(), {a},
                  [a](const Matrix& g, Tape& tp) { tp.accumulate(a, g.cwiseQuotient(tp.value(a))); });
}

NodeId scale(Tape& t, NodeId a, double s) {
  return t.record("scale", s * t.value(a), {a},
                  [a, s](const Matrix& g, Tape& tp) { tp.accumulate(a, s * g); });
}

NodeId matmul(Tape& t, NodeId a, NodeId b) {
  if (t.value(a).cols() != t.value(b).rows()) throw ShapeError("matmul: inner dimensions differ");
  return t.record("matmul", t.value(a) * t.value(b), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

NodeId softmax_rows(Tape& t, NodeId a) {
  const Matrix& x = t.value(a);
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  const NodeId self{static_cast<int>(t.size())};
  return t.record("softmax", std::move(y), {a}, [a, self](const Matrix& g, Tape& tp) {
    const Matrix& y = tp.value(self);
    Matrix gx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double dot = y.row(i).dot(g.row(i));
      gx.row(i) = y.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    tp.accumulate(a, gx);
  });
}

NodeId sum(Tape& t, NodeId a) {
  Matrix s(1, 1);
  s(0, 0) = t.value(a).sum();
  const Eigen::Index r = t.value(a).rows();
  const Eigen::Index c = t.value(a).cols();
  return t.record("sum", s, {a}, [a, r, c](const Matrix& g, Tape& tp) {
    tp.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

NodeId gather_rows(Tape& t, NodeId a, std::span<const int> rows) {
  const Matrix& x = t.value(a);
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix y(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(k)) = x.row(idx[k]);
  }
  const Eigen::Index r = x.rows();
  return t.record("gather", std::move(y), {a}, [a, idx, r](const Matrix& g, Tape& tp) {
    Matrix gx = Matrix::Zero(r, g.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) gx.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
    tp.accumulate(a, gx);
  });
}

}  // namespace ad

Vector finite_diff(const std::function<double(const Vector&)>& f, const Vector& x, double h,
                   bool relative_step) {
  Vector grad(x.size());
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double hi = relative_step ? h * std::max(1.0, std::abs(x[i])) : h;
    xp[i] = x[i] + hi;
    const double fp = f(xp);
    xp[i] = x[i] - hi;
    const double fm = f(xp);
    xp[i] = x[i];
    grad[i] = (fp - fm) / (2.0 * hi);
  }
  return grad;
}

AlignmentGradient svd_alignment_gradient(const Matrix& source, const Matrix& target,
                                         const Vector& weights, const Eigen::Matrix3d& dC,
                                         const Eigen::Vector3d& dr) {
  const AlignmentSolution sol = solve_alignment({source, target, weights});
  const Mat3& C = sol.pose.rotation();
  const Eigen::Index n = source.rows();

  // Translation r = mt - C ms.
  const Vec3 g_mt = dr;
  const Vec3 g_ms = -(C.transpose() * dr);
  Mat3 g_C = dC - dr * sol.source_mean.transpose();

  // With W = C P, P = V diag(s) V^T symmetric, a perturbation dC = C Omega
  // satisfies (V^T Omega V)_ij (s_i + s_j) = (V^T (C^T dW - dW^T C) V)_ij.
  const Mat3 A = sol.V.transpose() * C.transpose() * g_C * sol.V;
  const Vec3& s = sol.signed_singular;
  const double scale = std::max(std::abs(s[0]), 1e-300);
  Mat3 B = Mat3::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double denom = s[i] + s[j];
      if (std::abs(denom) <= 1e-8 * scale)
        throw DegenerateGradient("svd_alignment_gradient: singular values nearly cancel");
      B(i, j) = A(i, j) / denom;
    }
  }
  const Mat3 g_W = C * sol.V * (B - B.transpose()) * sol.V.transpose();

  AlignmentGradient out;
  out.source = Matrix::Zero(n, 3);
  out.target = Matrix::Zero(n, 3);
  out.weights = Vector::Zero(n);
  const double wsum = sol.weight_sum;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[i];
    const Vec3 xs = source.row(i).transpose() - sol.source_mean;
    const Vec3 yt = target.row(i).transpose() - sol.target_mean;
    // W = sum_i w_i (y_i - mt)(x_i - ms)^T; mean terms cancel in dW/dx_i, dW/dy_i.
    const Vec3 gy = (w / wsum) * (g_W * xs) + (w / wsum) * g_mt;
    const Vec3 gx = (w / wsum) * (g_W.transpose() * yt) + (w / wsum) * g_ms;
    out.target.row(i) = gy.transpose();
    out.source.row(i) = gx.transpose();
    out.weights[i] = (yt.transpose() * g_W * xs)(0, 0) / wsum + (g_mt.dot(yt) + g_ms.dot(xs)) / wsum;
  }
  // Weights enter only through w_i / sum(w): subtracting the common mode
  // accounts for the normalizer (a uniform rescale has zero effect).
  const double common = weights.dot(out.weights) / wsum;
  out.weights.array() -= common;
  return out;
}

}  // namespace vtrfeat
