#include "circle/geom.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace circle::geom {

namespace {

constexpr double kSmallAngle = 1e-6;
constexpr double kSeriesAngle = 0.05;

}  // namespace

Pose Pose::inverse() const {
  Pose out;
  out.rotation = rotation.transpose();
  out.translation = -(out.rotation * translation);
  return out;
}

Pose Pose::operator*(const Pose& rhs) const {
  Pose out;
  out.rotation = rotation * rhs.rotation;
  out.translation = rotation * rhs.translation + translation;
  return out;
}

Vec6 Twist::vector() const {
  Vec6 x;
  x << v, w;
  return x;
}

Twist Twist::from_vector(const Vec6& x) { return {x.head<3>(), x.tail<3>()}; }

Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
      -w.y(), w.x(), 0.0;
  return s;
}

Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 W = skew(w);
  if (theta < kSmallAngle) return Mat3::Identity() + W + 0.5 * W * W;
  return Mat3::Identity() + (std::sin(theta) / theta) * W +
         ((1.0 - std::cos(theta)) / (theta * theta)) * W * W;
}

Vec3 so3_log(const Mat3& r) {
  const Vec3 vee(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double s = 0.5 * vee.norm();
  const double c = 0.5 * (r.trace() - 1.0);
  const double theta = std::atan2(s, c);
  if (theta < kSmallAngle) return 0.5 * vee * (1.0 + theta * theta / 6.0);
  if (theta < M_PI - 1e-4) return (theta / (2.0 * std::sin(theta))) * vee;
  const Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 W = skew(w);
  double a;
  double b;
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    a = 0.5 - t2 / 24.0;
    b = 1.0 / 6.0 - t2 / 120.0;
  } else {
    a = (1.0 - std::cos(theta)) / (theta * theta);
    b = (theta - std::sin(theta)) / (theta * theta * theta);
  }
  return Mat3::Identity() + a * W + b * W * W;
}

namespace {

Mat3 so3_left_jacobian_inverse(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 W = skew(w);
  double c;
  if (theta < 1e-4) {
    c = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    c = 1.0 / (theta * theta) - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Mat3::Identity() - 0.5 * W + c * W * W;
}

}  // namespace

Pose se3_exp(const Twist& xi) {
  Pose out;
  out.rotation = so3_exp(xi.w);
  out.translation = so3_left_jacobian(xi.w) * xi.v;
  return out;
}

Twist se3_log(const Pose& pose) {
  Twist xi;
  xi.w = so3_log(pose.rotation);
  xi.v = so3_left_jacobian_inverse(xi.w) * pose.translation;
  return xi;
}

Mat6 se3_left_jacobian(const Twist& xi) {
  const double theta = xi.w.norm();
  const Mat3 P = skew(xi.w);
  const Mat3 V = skew(xi.v);
  double c1;
  double c2;
  double c3;
  if (theta < kSeriesAngle) {
    const double t2 = theta * theta;
    const double t4 = t2 * t2;
    c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0;
    c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0;
    c3 = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0;
  } else {
    const double s = std::sin(theta);
    const double c = std::cos(theta);
    const double t2 = theta * theta;
    c1 = (theta - s) / (t2 * theta);
    c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2);
    c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta);
  }
  const Mat3 PV = P * V;
  const Mat3 VP = V * P;
  const Mat3 PVP = PV * P;
  const Mat3 Q = 0.5 * V + c1 * (PV + VP + PVP) + c2 * (P * PV + VP * P - 3.0 * PVP) +
                 c3 * (PVP * P + P * PVP);
  const Mat3 J = so3_left_jacobian(xi.w);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = J;
  out.topRightCorner<3, 3>() = Q;
  out.bottomRightCorner<3, 3>() = J;
  return out;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || width <= 0 || height <= 0 || cx < 0.0 || cx >= width ||
      cy < 0.0 || cy >= height) {
    throw Error(ErrorCode::InvalidArgument, "invalid camera intrinsics");
  }
}

Vec3 camera_ray(const Intrinsics& k, double u, double v) {
  return {(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0};
}

Ray ray_from_pixel(const Intrinsics& k, const Pose& pose, double u, double v) {
  return {pose.translation, pose.rotate(camera_ray(k, u, v).normalized())};
}

std::vector<IndexedPose> read_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open pose file " + path.string());
  std::vector<IndexedPose> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ss(line);
    IndexedPose p;
    ss >> p.frame;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) ss >> p.pose.rotation(r, c);
      ss >> p.pose.translation(r);
    }
    if (!ss) throw Error(ErrorCode::Format, "malformed pose line: " + line);
    out.push_back(p);
  }
  return out;
}

void write_poses(const std::filesystem::path& path, const std::vector<IndexedPose>& poses) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write pose file " + path.string());
  out << std::setprecision(17);
  for (const auto& p : poses) {
    out << p.frame;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << ' ' << p.pose.rotation(r, c);
      out << ' ' << p.pose.translation(r);
    }
    out << '\n';
  }
}

Intrinsics read_intrinsics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open intrinsics file " + path.string());
  Intrinsics k;
  in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height;
  if (!in) throw Error(ErrorCode::Format, "malformed intrinsics file " + path.string());
  k.validate();
  return k;
}

void write_intrinsics(const std::filesystem::path& path, const Intrinsics& k) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write intrinsics file " + path.string());
  out << std::setprecision(17) << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' '
      << k.width << ' ' << k.height << '\n';
}

}  // namespace circle::geom
