#pragma once

#include <cstdint>
#include <vector>

#include "vtrfeat/diff.hpp"
#include "vtrfeat/geometry.hpp"

namespace vtrfeat {

/// Matched 3D point pairs: rows of `source` (N x 3) should map onto rows of
/// `target` (N x 3) with per-pair weights in [0, 1].
struct AlignmentProblem {
  Matrix source;
  Matrix target;
  Vector weights;
};

/// Closed-form weighted alignment plus the decomposition needed to
/// differentiate through it.
struct AlignmentSolution {
  SE3Pose pose;
  Mat3 U;
  Mat3 V;
  /// Singular values of the cross-covariance with the reflection sign folded
  /// into the last one.
  Vec3 signed_singular;
  Vec3 source_mean;
  Vec3 target_mean;
  double weight_sum = 0.0;
};

/// Minimizes sum_i w_i |C p_s_i + r - p_t_i|^2 via SVD of the weighted
/// cross-covariance, with det(C) = +1 enforced. Throws DegenerateGeometry for
/// fewer than 3 positive weights, a non-positive weight sum, or a collinear
/// configuration.
AlignmentSolution solve_alignment(const AlignmentProblem& prob);

inline SE3Pose weighted_alignment(const AlignmentProblem& prob) {
  return solve_alignment(prob).pose;
}

/// The cost minimized by weighted_alignment, evaluated at T.
double alignment_cost(const AlignmentProblem& prob, const SE3Pose& T);

struct RansacParams {
  int iterations = 200;
  double inlier_threshold = 0.1;
  int min_inliers = 6;
  std::uint64_t seed = 0;
};

struct RansacResult {
  SE3Pose pose;
  std::vector<bool> inliers;
  int inlier_count = 0;
};

/// Hypothesize-and-verify over 3-point minimal sets drawn from pairs with
/// positive weight; the returned pose is weighted_alignment on the largest
/// consensus set. Residuals are 3D distances.
///
/// Throws InsufficientMatches for fewer than 3 usable pairs and
/// LocalizationFailure when the best consensus is below min_inliers.
RansacResult ransac_pose(const AlignmentProblem& prob, const RansacParams& params);

/// Indices of pairs whose planar (x, y) error under the ground-truth pose is
/// within `threshold`.
std::vector<int> gt_outlier_gate(const Matrix& source, const Matrix& target, const SE3Pose& gt,
                                 double threshold);

namespace ad {

/// Differentiable weighted alignment. Inputs: N x 3 source, N x 3 target,
/// N x 1 weights. Output: 3 x 4 [C | r].
NodeId weighted_alignment(Tape& t, NodeId source, NodeId target, NodeId weights);

}  // namespace ad

}  // namespace vtrfeat
