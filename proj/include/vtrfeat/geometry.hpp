#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace vtrfeat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Rectified stereo rig: focal lengths and principal point in pixels,
/// baseline in metres (scene units).
struct CameraIntrinsics {
  double fu = 1.0;
  double fv = 1.0;
  double cu = 0.0;
  double cv = 0.0;
  double b = 1.0;

  bool valid() const { return fu > 0.0 && fv > 0.0 && b > 0.0; }
};

/// Disparities at or below this are treated as invalid observations.
inline constexpr double kMinDisparity = 1e-6;

/// Left-image pixel plus disparity u_l - u_r.
struct StereoObservation {
  double u = 0.0;
  double v = 0.0;
  double d = 0.0;

  bool valid() const { return d > kMinDisparity; }
};

/// Rigid transform p' = C p + r.
class SE3Pose {
 public:
  SE3Pose() : C_(Mat3::Identity()), r_(Vec3::Zero()) {}
  SE3Pose(const Mat3& C, const Vec3& r) : C_(C), r_(r) {}

  static SE3Pose identity() { return {}; }

  const Mat3& rotation() const { return C_; }
  const Vec3& translation() const { return r_; }

  Mat4 matrix() const;

  SE3Pose compose(const SE3Pose& other) const;  // this * other
  SE3Pose inverse() const;
  Vec3 apply(const Vec3& p) const { return C_ * p + r_; }

  /// Orthonormality and det(C) = +1 within `tol`.
  bool is_valid(double tol = 1e-9) const;

 private:
  Mat3 C_;
  Vec3 r_;
};

/// Planar motion: longitudinal alpha, lateral beta, heading gamma about z.
struct PlanarPose {
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
};

/// Wraps an angle into (-pi, pi].
double normalize_angle(double a);

Mat3 rot_z(double gamma);

/// C = Rz(gamma), r = (alpha, beta, 0). The returned heading is normalized.
SE3Pose planar_to_se3(const PlanarPose& pp);

/// Extracts (r_x, r_y, yaw) from an arbitrary rigid transform.
PlanarPose se3_to_planar(const SE3Pose& T);

StereoObservation project(const Vec3& p, const CameraIntrinsics& K);

Vec3 backproject(const StereoObservation& y, const CameraIntrinsics& K);

/// d p / d (u, v, d), columns ordered as the observation fields.
Mat3 backproject_jacobian(const StereoObservation& y, const CameraIntrinsics& K);

}  // namespace vtrfeat
