#include "vtrfeat/estimator.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <random>

#include "vtrfeat/errors.hpp"

namespace vtrfeat {

namespace {

void check_problem(const AlignmentProblem& prob) {
  const Eigen::Index n = prob.source.rows();
  if (prob.source.cols() != 3 || prob.target.cols() != 3 || prob.target.rows() != n ||
      prob.weights.size() != n)
    throw ShapeError("alignment: expected N x 3 points and N weights");
}

}  // namespace

AlignmentSolution solve_alignment(const AlignmentProblem& prob) {
  check_problem(prob);
  const Eigen::Index n = prob.source.rows();

  // Plain sequential sums: appending a zero-weight pair must not perturb the
  // result, so no vectorized reductions here.
  double wsum = 0.0;
  int positive = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = prob.weights[i];
    if (w < 0.0 || !std::isfinite(w)) throw DegenerateGeometry("alignment: weights must be finite and >= 0");
    wsum += w;
    if (w > 0.0) ++positive;
  }
  if (positive < 3 || !(wsum > 0.0))
    throw DegenerateGeometry("alignment: need at least 3 pairs with positive weight");

  Vec3 ms = Vec3::Zero();
  Vec3 mt = Vec3::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = prob.weights[i] / wsum;
    for (int k = 0; k < 3; ++k) {
      ms[k] += w * prob.source(i, k);
      mt[k] += w * prob.target(i, k);
    }
  }

  Mat3 W = Mat3::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = prob.weights[i] / wsum;
    for (int a = 0; a < 3; ++a) {
      const double yt = prob.target(i, a) - mt[a];
      for (int b = 0; b < 3; ++b) W(a, b) += w * yt * (prob.source(i, b) - ms[b]);
    }
  }

  Eigen::JacobiSVD<Mat3> svd(W, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv[0] > 0.0) || sv[1] <= 1e-10 * sv[0])
    throw DegenerateGeometry("alignment: point configuration is collinear or degenerate");

  Mat3 U = svd.matrixU();
  const Mat3 V = svd.matrixV();
  const double det = (U * V.transpose()).determinant();
  Vec3 signed_sv = sv;
  if (det < 0.0) {
    U.col(2) = -U.col(2);
    signed_sv[2] = -sv[2];
  }
  const Mat3 C = U * V.transpose();

  AlignmentSolution sol;
  sol.pose = SE3Pose(C, mt - C * ms);
  sol.U = U;
  sol.V = V;
  sol.signed_singular = signed_sv;
  sol.source_mean = ms;
  sol.target_mean = mt;
  sol.weight_sum = wsum;
  return sol;
}

double alignment_cost(const AlignmentProblem& prob, const SE3Pose& T) {
  check_problem(prob);
  double cost = 0.0;
  for (Eigen::Index i = 0; i < prob.source.rows(); ++i) {
    const Vec3 e = T.apply(prob.source.row(i).transpose()) - prob.target.row(i).transpose();
    cost += prob.weights[i] * e.squaredNorm();
  }
  return cost;
}

RansacResult ransac_pose(const AlignmentProblem& prob, const RansacParams& params) {
  check_problem(prob);
  if (params.iterations < 1 || !(params.inlier_threshold > 0.0))
    throw ConfigError("ransac: iterations >= 1 and inlier_threshold > 0 required");

  std::vector<int> usable;
  for (Eigen::Index i = 0; i < prob.weights.size(); ++i)
    if (prob.weights[i] > 0.0) usable.push_back(static_cast<int>(i));
  if (usable.size() < 3) throw InsufficientMatches("ransac: fewer than 3 usable matches");

  const Eigen::Index n = prob.source.rows();
  const double thr2 = params.inlier_threshold * params.inlier_threshold;
  auto consensus = [&](const SE3Pose& T, std::vector<bool>& mask) {
    int count = 0;
    mask.assign(static_cast<std::size_t>(n), false);
    for (int i : usable) {
      const Vec3 e = T.apply(prob.source.row(i).transpose()) - prob.target.row(i).transpose();
      if (e.squaredNorm() < thr2) {
        mask[static_cast<std::size_t>(i)] = true;
        ++count;
      }
    }
    return count;
  };

  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
  std::vector<bool> best_mask;
  std::vector<bool> mask;
  int best = -1;

  AlignmentProblem minimal{Matrix(3, 3), Matrix(3, 3), Vector::Ones(3)};
  for (int it = 0; it < params.iterations; ++it) {
    std::size_t a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || a == c || b == c) continue;
    const int idx[3] = {usable[a], usable[b], usable[c]};
    for (int k = 0; k < 3; ++k) {
      minimal.source.row(k) = prob.source.row(idx[k]);
      minimal.target.row(k) = prob.target.row(idx[k]);
    }
    SE3Pose hypothesis;
    try {
      hypothesis = weighted_alignment(minimal);
    } catch (const DegenerateGeometry&) {
      continue;
    }
    const int count = consensus(hypothesis, mask);
    if (count > best) {
      best = count;
      best_mask = mask;
    }
  }

  if (best < std::max(3, params.min_inliers))
    throw LocalizationFailure("ransac: consensus of " + std::to_string(std::max(best, 0)) +
                              " below minimum " + std::to_string(params.min_inliers));

  AlignmentProblem refined{prob.source, prob.target, Vector::Zero(n)};
  for (Eigen::Index i = 0; i < n; ++i)
    if (best_mask[static_cast<std::size_t>(i)]) refined.weights[i] = prob.weights[i];

  RansacResult result;
  try {
    result.pose = weighted_alignment(refined);
  } catch (const DegenerateGeometry& e) {
    throw LocalizationFailure(std::string("ransac: consensus set degenerate: ") + e.what());
  }
  result.inliers = std::move(best_mask);
  result.inlier_count = best;
  return result;
}

std::vector<int> gt_outlier_gate(const Matrix& source, const Matrix& target, const SE3Pose& gt,
                                 double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("gt_outlier_gate: threshold must be positive");
  if (source.rows() != target.rows() || source.cols() != 3 || target.cols() != 3)
    throw ShapeError("gt_outlier_gate: expected matching N x 3 point sets");
  std::vector<int> kept;
  for (Eigen::Index i = 0; i < source.rows(); ++i) {
    const Vec3 e = gt.apply(source.row(i).transpose()) - target.row(i).transpose();
    if (e.head<2>().norm() <= threshold) kept.push_back(static_cast<int>(i));
  }
  return kept;
}

namespace ad {

NodeId weighted_alignment(Tape& t, NodeId source, NodeId target, NodeId weights) {
  const Matrix& ps = t.value(source);
  const Matrix& pt = t.value(target);
  const Matrix& w = t.value(weights);
  if (w.cols() != 1) throw ShapeError("weighted_alignment: weights must be N x 1");
  const AlignmentSolution sol = solve_alignment({ps, pt, w.col(0)});
  // Fail at record time so callers can drop the sample before backward().
  const Vec3& s = sol.signed_singular;
  const double floor = 1e-8 * std::abs(s[0]);
  if (std::abs(s[0] + s[1]) <= floor || std::abs(s[0] + s[2]) <= floor ||
      std::abs(s[1] + s[2]) <= floor)
    throw DegenerateGradient("weighted_alignment: singular values nearly cancel");
  Matrix out(3, 4);
  out.leftCols<3>() = sol.pose.rotation();
  out.col(3) = sol.pose.translation();
  return t.record("svd_alignment", std::move(out), {source, target, weights},
                  [source, target, weights](const Matrix& g, Tape& tp) {
                    const Mat3 dC = g.leftCols<3>();
                    const Vec3 dr = g.col(3);
                    AlignmentGradient ag =
                        svd_alignment_gradient(tp.value(source), tp.value(target),
                                               tp.value(weights).col(0), dC, dr);
                    tp.accumulate(source, ag.source);
                    tp.accumulate(target, ag.target);
                    tp.accumulate(weights, Matrix(ag.weights));
                  });
}

}  // namespace ad

}  // namespace vtrfeat
