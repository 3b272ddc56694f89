#include "circle/field.hpp"

#include <algorithm>
#include <cmath>

namespace circle {

AnalyticField::AnalyticField(Distance distance, double voxel_size, double truncation,
                             Gradient gradient)
    : distance_(std::move(distance)),
      gradient_(std::move(gradient)),
      voxel_size_(voxel_size),
      truncation_(truncation) {
  if (!(voxel_size > 0.0) || !(truncation > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "voxel size and truncation must be positive");
  }
}

double AnalyticField::sdf(const Key&, const Vec3& p) const {
  return std::clamp(distance_(p) / truncation_, -1.0, 1.0);
}

FieldSample AnalyticField::sample(const Key&, const Vec3& p) const {
  FieldSample out;
  const double raw = distance_(p) / truncation_;
  out.sdf = std::clamp(raw, -1.0, 1.0);
  if (raw <= -1.0 || raw >= 1.0) return out;
  if (gradient_) {
    out.gradient = gradient_(p);
  } else {
    const double h = 1e-7;
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = h;
      out.gradient[a] = (distance_(p + e) - distance_(p - e)) / (2 * h);
    }
  }
  return out;
}

}  // namespace circle
