#pragma once

#include "circle/circnet.hpp"
#include "circle/common.hpp"
#include "circle/field.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

namespace circle::extract_eval {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::int32_t, 3>> triangles;

  bool empty() const { return triangles.empty(); }
  /// Throws Format when an index is out of range.
  void check() const;
  double area() const;
};

/// Zero level set of `field` over the active finest voxels, on a lattice of
/// spacing h = b / subdivisions anchored at the world origin. A lattice point
/// takes its value from the voxel that contains it (faces belong to the upper
/// voxel); cells with a corner in an inactive voxel are skipped. v < 0 is inside.
TriangleMesh marching_cubes(const SdfField& field, std::span<const Key> active, int subdivisions = 2);
TriangleMesh marching_cubes(const circnet::LocalImplicitField& field, int subdivisions = 2);

/// Binary little-endian PLY with double vertices and int faces. Reading also
/// accepts float vertices, and a vertex-only file gives a mesh without faces.
void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh);
TriangleMesh read_ply(const std::filesystem::path& path);

/// Area-weighted uniform samples. Throws EmptyMesh when there is no face of
/// positive area and n > 0.
std::vector<Vec3> sample_mesh_points(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed);

/// Exact nearest-neighbour distances over a uniform hash grid.
class NearestIndex {
 public:
  /// Throws EmptySet on an empty set.
  explicit NearestIndex(std::span<const Vec3> points);
  double distance(const Vec3& q) const;
  /// distance() for each query, in order.
  std::vector<double> distances(std::span<const Vec3> queries) const;

 private:
  struct Cell {
    std::int64_t x, y, z;
    friend bool operator==(const Cell&, const Cell&) = default;
  };
  struct CellHash {
    std::size_t operator()(const Cell& c) const noexcept;
  };
  Cell cell_of(const Vec3& p) const;

  std::vector<Vec3> points_;
  double cell_ = 1.0;
  Cell lo_{}, hi_{};
  std::unordered_map<Cell, std::vector<std::uint32_t>, CellHash> cells_;
};

/// sqrt(dx² + dy² + dz²), summed in that order.
double point_distance(const Vec3& a, const Vec3& b);

/// ½ (mean_A min_B + mean_B min_A).
double chamfer(std::span<const Vec3> a, std::span<const Vec3> b);
/// Root mean squared distance from each predicted point to the nearest gt point.
double rmse(std::span<const Vec3> pred, std::span<const Vec3> gt);

struct PrecisionRecall {
  double precision = 0.0;  // percent
  double recall = 0.0;
  double fscore = 0.0;
};

/// A point counts when its nearest distance is strictly below tau.
PrecisionRecall precision_recall_fscore(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau = 0.02);

struct MetricReport {
  double rmse = 0.0;
  double chamfer = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double fscore = 0.0;
  double tau = 0.02;
  std::size_t pred_points = 0;
  std::size_t gt_points = 0;
};

/// All metrics from one pair of nearest-distance passes.
MetricReport evaluate(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau = 0.02);

}  // namespace circle::extract_eval
