#pragma once

#include <Eigen/Core>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace vtrfeat {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Index of a node on a Tape.
struct NodeId {
  int index = -1;
  bool valid() const { return index >= 0; }
  friend bool operator==(NodeId, NodeId) = default;
};

/// node index -> d(output)/d(node), one entry per parameter node.
using GradientMap = std::map<int, Matrix>;

/// Reverse-mode record of coarse primitives.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. Each non-leaf node owns a closure that, given the
/// gradient flowing into the node, accumulates contributions into its inputs
/// via accumulate(). Leaves are either parameters (gradients reported) or
/// constants (gradients dropped).
class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& grad_out, Tape& tape)>;

  NodeId constant(Matrix value);
  NodeId parameter(Matrix value);

  /// Appends an operation node. `fn` is only retained if some input needs a
  /// gradient. The new node's index is size() at the time of the call, so a
  /// closure can read its own output back through the tape.
  NodeId record(std::string op, Matrix value, std::vector<NodeId> inputs, BackwardFn fn);

  const Matrix& value(NodeId id) const { return nodes_.at(id.index).value; }
  const std::string& op(NodeId id) const { return nodes_.at(id.index).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id.index).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  bool is_parameter(NodeId id) const { return nodes_.at(id.index).is_parameter; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient buffer of `id`; no-op for nodes that do not
  /// require gradients. Only meaningful while backward() runs.
  void accumulate(NodeId id, const Matrix& g);

  /// Reverse accumulation from a 1x1 node. Throws ShapeError otherwise.
  GradientMap backward(NodeId output);

 private:
  struct Node {
    std::string op;
    Matrix value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_parameter = false;
  };

  NodeId push(Node node);

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  std::vector<char> has_grad_;
};

namespace ad {

// Elementwise primitives; shapes must match (ShapeError otherwise).
NodeId add(Tape& t, NodeId a, NodeId b);
NodeId sub(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);
NodeId div(Tape& t, NodeId a, NodeId b);
NodeId sqrt(Tape& t, NodeId a);
NodeId exp(Tape& t, NodeId a);
NodeId log(Tape& t, NodeId a);
NodeId scale(Tape& t, NodeId a, double s);
NodeId matmul(Tape& t, NodeId a, NodeId b);
/// Row-wise softmax, max-subtracted.
NodeId softmax_rows(Tape& t, NodeId a);
/// Sum of all entries, 1x1.
NodeId sum(Tape& t, NodeId a);
/// Selects rows by index (gather), e.g. for gated subsets.
NodeId gather_rows(Tape& t, NodeId a, std::span<const int> rows);

}  // namespace ad

/// Central differences (f(x + h_i e_i) - f(x - h_i e_i)) / (2 h_i) with
/// h_i = h * max(1, |x_i|) when `relative_step`, else h_i = h.
Vector finite_diff(const std::function<double(const Vector&)>& f, const Vector& x, double h,
                   bool relative_step = false);

/// Gradients of a scalar loss through the weighted rigid alignment.
struct AlignmentGradient {
  Matrix source;  // N x 3
  Matrix target;  // N x 3
  Vector weights; // N
};

/// Back-propagates dL/dC (3x3) and dL/dr (3) through the weighted SVD
/// alignment of `source` onto `target`. Throws DegenerateGradient when a pair
/// of signed singular values nearly cancels.
AlignmentGradient svd_alignment_gradient(const Matrix& source, const Matrix& target,
                                         const Vector& weights, const Eigen::Matrix3d& dC,
                                         const Eigen::Vector3d& dr);

}  // namespace vtrfeat
