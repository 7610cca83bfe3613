#include "vtrfeat/geometry.hpp"

#include <cmath>
#include <numbers>

#include "vtrfeat/errors.hpp"

namespace vtrfeat {

Mat4 SE3Pose::matrix() const {
  Mat4 T = Mat4::Identity();
  T.topLeftCorner<3, 3>() = C_;
  T.topRightCorner<3, 1>() = r_;
  return T;
}

SE3Pose SE3Pose::compose(const SE3Pose& other) const {
  return {C_ * other.C_, C_ * other.r_ + r_};
}

SE3Pose SE3Pose::inverse() const {
  const Mat3 Ct = C_.transpose();
  return {Ct, -(Ct * r_)};
}

bool SE3Pose::is_valid(double tol) const {
  if (!C_.allFinite() || !r_.allFinite()) return false;
  const double ortho = (C_ * C_.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(C_.determinant() - 1.0) <= tol;
}

double normalize_angle(double a) {
  constexpr double kPi = std::numbers::pi;
  a = std::remainder(a, 2.0 * kPi);  // [-pi, pi]
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

Mat3 rot_z(double gamma) {
  const double c = std::cos(gamma);
  const double s = std::sin(gamma);
  Mat3 C;
  C << c, -s, 0.0,
       s, c, 0.0,
       0.0, 0.0, 1.0;
  return C;
}

SE3Pose planar_to_se3(const PlanarPose& pp) {
  return {rot_z(normalize_angle(pp.gamma)), Vec3(pp.alpha, pp.beta, 0.0)};
}

PlanarPose se3_to_planar(const SE3Pose& T) {
  const Mat3& C = T.rotation();
  return {T.translation().x(), T.translation().y(), std::atan2(C(1, 0), C(0, 0))};
}

StereoObservation project(const Vec3& p, const CameraIntrinsics& K) {
  if (!(p.z() > 0.0)) throw DegenerateDepth("project: point depth must be positive");
  const double inv_z = 1.0 / p.z();
  return {K.fu * p.x() * inv_z + K.cu, K.fv * p.y() * inv_z + K.cv, K.fu * K.b * inv_z};
}

Vec3 backproject(const StereoObservation& y, const CameraIntrinsics& K) {
  if (!y.valid()) throw InvalidDisparity("backproject: disparity must exceed 1e-6 px");
  const double s = K.b / y.d;
  return {s * (y.u - K.cu), s * (K.fu / K.fv) * (y.v - K.cv), s * K.fu};
}

Mat3 backproject_jacobian(const StereoObservation& y, const CameraIntrinsics& K) {
  if (!y.valid()) throw InvalidDisparity("backproject: disparity must exceed 1e-6 px");
  const double s = K.b / y.d;
  const double ds = -K.b / (y.d * y.d);
  const double ratio = K.fu / K.fv;
  Mat3 J;
  J << s, 0.0, ds * (y.u - K.cu),
       0.0, s * ratio, ds * ratio * (y.v - K.cv),
       0.0, 0.0, ds * K.fu;
  return J;
}

}  // namespace vtrfeat
