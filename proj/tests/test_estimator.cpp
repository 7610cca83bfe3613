#include <numbers>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "vtrfeat/errors.hpp"
#include "vtrfeat/estimator.hpp"

using namespace vtrfeat;
using vtrfeat::testing::random_matrix;

namespace {

Matrix transform(const SE3Pose& T, const Matrix& p) {
  return (p * T.rotation().transpose()).rowwise() + T.translation().transpose();
}

double pose_gap(const SE3Pose& a, const SE3Pose& b) {
  return std::max((a.rotation() - b.rotation()).norm(), (a.translation() - b.translation()).norm());
}

// Exhaustive heading grid; for each heading the best planar translation is
// the weighted mean xy residual.
PlanarPose grid_search(const AlignmentProblem& p, double step) {
  const double wsum = p.weights.sum();
  double best = std::numeric_limits<double>::infinity();
  PlanarPose arg;
  for (double g = -std::numbers::pi; g < std::numbers::pi; g += step) {
    const Mat3 R = rot_z(g);
    Vec3 r = Vec3::Zero();
    for (int i = 0; i < p.source.rows(); ++i)
      r += p.weights[i] * (p.target.row(i).transpose() - R * p.source.row(i).transpose());
    r /= wsum;
    r.z() = 0.0;
    const double c = alignment_cost(p, SE3Pose(R, r));
    if (c < best) {
      best = c;
      arg = {r.x(), r.y(), g};
    }
  }
  return arg;
}

}  // namespace

TEST_CASE("weighted_alignment exact cases") {
  std::mt19937_64 rng(1);
  const Matrix ps = random_matrix(rng, 5, 3, -2.0, 2.0);
  const Vector w = Vector::Ones(5);

  const SE3Pose I = weighted_alignment({ps, ps, w});
  CHECK((I.matrix() - Mat4::Identity()).cwiseAbs().maxCoeff() <= 1e-12);

  for (int trial = 0; trial < 20; ++trial) {
    const Matrix p = random_matrix(rng, 5, 3, -2.0, 2.0);
    const SE3Pose T = planar_to_se3({1.0, 2.0, std::numbers::pi / 2});
    const SE3Pose est = weighted_alignment({p, transform(T, p), w});
    CHECK((est.rotation() - T.rotation()).norm() <= 1e-9);
    CHECK((est.translation() - T.translation()).norm() <= 1e-9);
    CHECK(est.is_valid(1e-9));
  }
}

TEST_CASE("zero-weight pairs leave the solution bitwise unchanged") {
  std::mt19937_64 rng(2);
  const Matrix ps = random_matrix(rng, 6, 3, -2.0, 2.0);
  const Matrix pt = transform(planar_to_se3({0.3, -0.2, 0.4}), ps) + random_matrix(rng, 6, 3, -0.05, 0.05);
  const Vector w = random_matrix(rng, 6, 1, 0.1, 1.0).col(0);
  const SE3Pose base = weighted_alignment({ps, pt, w});

  Matrix ps2(7, 3), pt2(7, 3);
  ps2 << ps, Eigen::RowVector3d(100.0, -50.0, 3.0);
  pt2 << pt, Eigen::RowVector3d(-7.0, 9.0, 1e3);
  Vector w2(7);
  w2 << w, 0.0;
  const SE3Pose more = weighted_alignment({ps2, pt2, w2});
  CHECK(more.matrix() == base.matrix());
}

TEST_CASE("weight rescaling invariance") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix ps = random_matrix(rng, 8, 3, -2.0, 2.0);
    const Matrix pt = transform(planar_to_se3({0.1, 0.2, -0.5}), ps) + random_matrix(rng, 8, 3, -0.1, 0.1);
    const Vector w = random_matrix(rng, 8, 1, 0.1, 1.0).col(0);
    const SE3Pose a = weighted_alignment({ps, pt, w});
    const SE3Pose b = weighted_alignment({ps, pt, 37.5 * w});
    CHECK((a.matrix() - b.matrix()).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("reflection optimum still yields a proper rotation") {
  Matrix ps(4, 3);
  ps << 1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1;
  Matrix pt = ps;
  pt.col(2) *= -1.0;  // mirror image
  const SE3Pose T = weighted_alignment({ps, pt, Vector::Ones(4)});
  CHECK(T.is_valid(1e-9));
  CHECK(T.rotation().determinant() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("degenerate configurations throw") {
  Matrix line(5, 3);
  for (int i = 0; i < 5; ++i) line.row(i) = Eigen::RowVector3d(i, 2.0 * i, -i);
  CHECK_THROWS_AS(weighted_alignment({line, line, Vector::Ones(5)}), DegenerateGeometry);
  std::mt19937_64 rng(4);
  const Matrix p = random_matrix(rng, 5, 3);
  Vector w = Vector::Zero(5);
  w[0] = w[1] = 1.0;
  CHECK_THROWS_AS(weighted_alignment({p, p, w}), DegenerateGeometry);
  CHECK_THROWS_AS(weighted_alignment({p, p, Vector::Zero(5)}), DegenerateGeometry);
}

TEST_CASE("returned pose is locally optimal") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 0.05);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix ps = random_matrix(rng, 10, 3, -2.0, 2.0);
    const Matrix pt = transform(planar_to_se3({0.4, 0.1, 0.2}), ps) + random_matrix(rng, 10, 3, -0.2, 0.2);
    const AlignmentProblem prob{ps, pt, random_matrix(rng, 10, 1, 0.1, 1.0).col(0)};
    const SE3Pose T = weighted_alignment(prob);
    const double c = alignment_cost(prob, T);
    CHECK(c <= alignment_cost(prob, SE3Pose::identity()));
    for (int k = 0; k < 100; ++k) {
      const Eigen::Vector3d axis = random_matrix(rng, 3, 1).col(0).normalized();
      const Mat3 dR = Eigen::AngleAxisd(n(rng), axis).toRotationMatrix();
      const Vec3 dt(n(rng), n(rng), n(rng));
      CHECK(c <= alignment_cost(prob, SE3Pose(dR * T.rotation(), T.translation() + dt)));
    }
  }
}

TEST_CASE("matches a heading grid search on noisy planar instances") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0.0, 0.02);
  std::uniform_real_distribution<double> a(-0.5, 0.5), b(-0.2, 0.2), g(-0.6, 0.6);
  const double step = 1e-3;
  for (int trial = 0; trial < 50; ++trial) {
    // Ground-plane points with in-plane noise: the unconstrained optimum is
    // itself planar, so a planar grid is an exhaustive oracle.
    Matrix ps = random_matrix(rng, 12, 3, -2.0, 2.0);
    ps.col(2).setConstant(ps(0, 2) + 3.0);
    const PlanarPose truth{a(rng), b(rng), g(rng)};
    Matrix pt = transform(planar_to_se3(truth), ps);
    for (Eigen::Index i = 0; i < pt.rows(); ++i) {
      pt(i, 0) += noise(rng);
      pt(i, 1) += noise(rng);
    }
    const AlignmentProblem prob{ps, pt, random_matrix(rng, 12, 1, 0.2, 1.0).col(0)};
    const PlanarPose est = se3_to_planar(weighted_alignment(prob));
    const PlanarPose ref = grid_search(prob, step);
    const Vec3 ms = (prob.weights.transpose() * ps / prob.weights.sum()).transpose();
    CHECK(std::abs(normalize_angle(est.gamma - ref.gamma)) <= step);
    // A heading off by one grid cell moves the best translation by at most
    // step * |weighted source centroid|.
    const double tol = step * (1.0 + ms.head<2>().norm());
    CHECK(std::abs(est.alpha - ref.alpha) <= tol);
    CHECK(std::abs(est.beta - ref.beta) <= tol);
  }
}

TEST_CASE("ransac without outliers") {
  std::mt19937_64 rng(7);
  const Matrix ps = random_matrix(rng, 20, 3, -3.0, 3.0);
  const AlignmentProblem prob{ps, transform(planar_to_se3({0.2, 0.1, 0.3}), ps), Vector::Ones(20)};
  const RansacResult r = ransac_pose(prob, RansacParams{});
  CHECK(r.inlier_count == 20);
  CHECK(std::all_of(r.inliers.begin(), r.inliers.end(), [](bool b) { return b; }));
  CHECK(r.pose.matrix() == weighted_alignment(prob).matrix());
}

TEST_CASE("ransac with 30 percent gross outliers") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> a(-0.5, 0.5), g(-0.5, 0.5);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 30, bad = 9;
    const Matrix ps = random_matrix(rng, n, 3, -3.0, 3.0);
    const SE3Pose truth = planar_to_se3({a(rng), a(rng), g(rng)});
    Matrix pt = transform(truth, ps);
    for (int i = 0; i < bad; ++i) {
      const Vec3 dir = random_matrix(rng, 3, 1).col(0).normalized();
      pt.row(i) += 5.0 * dir.transpose();
    }
    RansacParams params;
    params.iterations = 500;
    params.seed = static_cast<std::uint64_t>(trial);
    const RansacResult r = ransac_pose({ps, pt, Vector::Ones(n)}, params);
    CHECK(pose_gap(r.pose, truth) <= 1e-6);
    for (int i = 0; i < n; ++i) CHECK(r.inliers[static_cast<std::size_t>(i)] == (i >= bad));
    const RansacResult again = ransac_pose({ps, pt, Vector::Ones(n)}, params);
    CHECK(again.pose.matrix() == r.pose.matrix());
    CHECK(again.inliers == r.inliers);
  }
}

TEST_CASE("ransac failure modes") {
  std::mt19937_64 rng(9);
  const Matrix p2 = random_matrix(rng, 2, 3);
  CHECK_THROWS_AS(ransac_pose({p2, p2, Vector::Ones(2)}, RansacParams{}), InsufficientMatches);
  // Pure noise: no hypothesis gathers min_inliers.
  const Matrix ps = random_matrix(rng, 12, 3, -5.0, 5.0);
  const Matrix pt = random_matrix(rng, 12, 3, -5.0, 5.0);
  CHECK_THROWS_AS(ransac_pose({ps, pt, Vector::Ones(12)}, RansacParams{}), LocalizationFailure);
}

TEST_CASE("ground-truth gate") {
  std::mt19937_64 rng(10);
  const SE3Pose gt = planar_to_se3({0.3, 0.0, 0.1});
  const Matrix ps = random_matrix(rng, 10, 3, -2.0, 2.0);
  Matrix pt = transform(gt, ps);
  CHECK(gt_outlier_gate(ps, pt, gt, 0.5).size() == 10);
  pt(4, 0) += 1.0;  // 2x threshold
  const std::vector<int> kept = gt_outlier_gate(ps, pt, gt, 0.5);
  CHECK(kept.size() == 9);
  CHECK(std::find(kept.begin(), kept.end(), 4) == kept.end());

  Matrix noisy = pt + random_matrix(rng, 10, 3, -0.5, 0.5);
  noisy.col(2).array() += 100.0;  // z never gates
  for (double t1 : {0.05, 0.1, 0.2, 0.4}) {
    const std::vector<int> small = gt_outlier_gate(ps, noisy, gt, t1);
    const std::vector<int> large = gt_outlier_gate(ps, noisy, gt, 2 * t1);
    CHECK(std::includes(large.begin(), large.end(), small.begin(), small.end()));
  }
  CHECK(gt_outlier_gate(ps, noisy, gt, 10.0).size() == 10);
}
