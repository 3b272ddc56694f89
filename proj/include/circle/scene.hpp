#pragma once

#include "circle/common.hpp"
#include "circle/geom.hpp"
#include "circle/ingest.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace circle::scene {

/// Solid primitive; its signed distance is negative inside.
struct Primitive {
  enum class Kind { Box, Sphere, Cylinder, Room };
  Kind kind = Kind::Sphere;
  Vec3 center = Vec3::Zero();
  /// Box and Room: half extents. Sphere: x = radius. Cylinder (axis z): x = radius, z = half height.
  Vec3 size = Vec3::Ones();

  double distance(const Vec3& p) const;
  /// Boundary area inside the box [lo, hi] (exact for boxes and rooms, the
  /// full area otherwise) and an area-uniform point on that part.
  double area(const Vec3& lo, const Vec3& hi) const;
  Vec3 sample_surface(const Vec3& lo, const Vec3& hi, std::mt19937_64& rng) const;
};

/// Room primitives are the complement of a box: solid everywhere outside it.
struct CsgTerm {
  enum class Op { Union, Subtract };
  Op op = Op::Union;
  Primitive primitive;
};

/// Exact signed-distance oracle: terms folded left to right starting from
/// "empty space" (+infinity), then restricted to an axis-aligned region.
class GtScene {
 public:
  GtScene() = default;
  GtScene(std::vector<CsgTerm> terms, Vec3 bounds_lo, Vec3 bounds_hi);

  double sdf(const Vec3& p) const;
  /// Unit gradient by central differences.
  Vec3 normal(const Vec3& p, double h = 1e-7) const;
  bool in_bounds(const Vec3& p) const;

  const std::vector<CsgTerm>& terms() const { return terms_; }
  const Vec3& lo() const { return lo_; }
  const Vec3& hi() const { return hi_; }

  /// Points on the zero set inside the bounds, area-uniform over the visible
  /// part of every primitive boundary. Deterministic under seed.
  std::vector<Vec3> sample_surface(std::size_t n, std::uint64_t seed) const;

  /// First surface hit along o + t d with t in (0, t_max], or 0 when the ray
  /// leaves the bounds first.
  double trace(const Vec3& o, const Vec3& d, double t_max = 10.0) const;

  /// Text form, one term per line.
  void save(const std::filesystem::path& path) const;
  static GtScene load(const std::filesystem::path& path);

 private:
  std::vector<CsgTerm> terms_;
  Vec3 lo_ = Vec3::Constant(-1.0);
  Vec3 hi_ = Vec3::Constant(1.0);
};

struct RoomOptions {
  double width = 1.0;
  double depth = 1.0;
  double wall_height = 0.6;
  int min_objects = 2;
  int max_objects = 5;
};

/// Procedural room: floor and four walls (open top) plus 2-5 objects, offset
/// from the voxel lattice by a seed-dependent sub-voxel shift.
GtScene make_room(std::uint64_t seed, const RoomOptions& options = {});

struct CameraPath {
  int frames = 10;
  int width = 64;
  int height = 48;
  double focal = 48.0;
  double radius = 0.3;
  double height_above_floor = 0.45;
};

/// Cameras on a horizontal circle inside the room looking across and down.
std::vector<geom::Pose> circular_poses(const GtScene& scene, const CameraPath& path);
/// Exact depth frames of the oracle; pixels whose ray leaves the bounds are 0.
std::vector<ingest::DepthFrame> render_frames(const GtScene& scene, const CameraPath& path);

}  // namespace circle::scene
