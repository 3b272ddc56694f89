#pragma once

#include "circle/common.hpp"

#include <filesystem>
#include <utility>
#include <vector>

namespace circle::geom {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// Rigid transform x -> R x + t. Camera poses map camera coordinates to world.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 rotate(const Vec3& v) const { return rotation * v; }
  Pose inverse() const;
  Pose operator*(const Pose& rhs) const;
};

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }
inline Vec3 apply(const Pose& a, const Vec3& p) { return a.apply(p); }
inline Pose inverse(const Pose& a) { return a.inverse(); }

/// Twist (v, w): v translational in meters, w rotational in radians.
struct Twist {
  Vec3 v = Vec3::Zero();
  Vec3 w = Vec3::Zero();

  Vec6 vector() const;
  static Twist from_vector(const Vec6& x);
};

Mat3 skew(const Vec3& w);
Mat3 so3_exp(const Vec3& w);
Vec3 so3_log(const Mat3& r);
/// Left Jacobian of SO(3); maps w to the translation factor of se3_exp.
Mat3 so3_left_jacobian(const Vec3& w);

Pose se3_exp(const Twist& xi);
Twist se3_log(const Pose& pose);

/// 6x6 left Jacobian of SE(3) in (v, w) ordering:
/// se3_exp(xi + dxi) ~= se3_exp(J dxi) * se3_exp(xi).
Mat6 se3_left_jacobian(const Twist& xi);

/// Pinhole intrinsics. Camera looks down +z, x right, y down.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const;
};

struct Ray {
  Vec3 origin;
  Vec3 direction;
};

/// Unnormalized camera-frame direction ((u - cx) / fx, (v - cy) / fy, 1).
Vec3 camera_ray(const Intrinsics& k, double u, double v);
Ray ray_from_pixel(const Intrinsics& k, const Pose& pose, double u, double v);

struct IndexedPose {
  int frame = 0;
  Pose pose;
};

/// One frame per line: index followed by the row-major 3x4 [R | t].
std::vector<IndexedPose> read_poses(const std::filesystem::path& path);
void write_poses(const std::filesystem::path& path, const std::vector<IndexedPose>& poses);
/// `fx fy cx cy width height`
Intrinsics read_intrinsics(const std::filesystem::path& path);
void write_intrinsics(const std::filesystem::path& path, const Intrinsics& k);

}  // namespace circle::geom
