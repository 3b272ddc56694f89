#pragma once

#include "circle/common.hpp"

#include <functional>

namespace circle {

/// Normalized SDF value and its world-space gradient d(s * tau) / dp.
struct FieldSample {
  double sdf = 1.0;
  Vec3 gradient = Vec3::Zero();
};

/// Per-voxel signed distance field as seen by the renderer. Values are in
/// normalized units (world distance / truncation), clamped to [-1, 1]; `voxel`
/// names the active voxel whose local function is evaluated at p.
class SdfField {
 public:
  virtual ~SdfField() = default;
  virtual double voxel_size() const = 0;
  virtual double truncation() const = 0;
  virtual double sdf(const Key& voxel, const Vec3& p) const = 0;
  virtual FieldSample sample(const Key& voxel, const Vec3& p) const = 0;
};

/// Closed-form world SDF, normalized by `truncation` and clamped.
class AnalyticField final : public SdfField {
 public:
  using Distance = std::function<double(const Vec3&)>;
  using Gradient = std::function<Vec3(const Vec3&)>;

  /// Without `gradient` the world gradient is taken by central differences.
  AnalyticField(Distance distance, double voxel_size, double truncation, Gradient gradient = {});

  double voxel_size() const override { return voxel_size_; }
  double truncation() const override { return truncation_; }
  double sdf(const Key& voxel, const Vec3& p) const override;
  FieldSample sample(const Key& voxel, const Vec3& p) const override;
  double world(const Vec3& p) const { return distance_(p); }

 private:
  Distance distance_;
  Gradient gradient_;
  double voxel_size_;
  double truncation_;
};

}  // namespace circle
