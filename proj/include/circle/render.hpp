#pragma once

#include "circle/circnet.hpp"
#include "circle/common.hpp"
#include "circle/field.hpp"
#include "circle/geom.hpp"
#include "circle/ingest.hpp"

#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

namespace circle::render {

/// Parent-closed voxel sets per level, level 0 = finest with side b.
class OctreeIndex {
 public:
  OctreeIndex() = default;
  /// Missing ancestors are added. `levels` must be at least 1.
  OctreeIndex(std::vector<Key> finest, int levels, double voxel_size);
  /// Explicit keys per level, finest first.
  OctreeIndex(std::vector<std::vector<Key>> levels, double voxel_size);

  static OctreeIndex from_pyramid(const circnet::SparsityPyramid& pyramid, double voxel_size);

  double voxel_size() const { return voxel_size_; }
  int level_count() const { return static_cast<int>(levels_.size()); }
  bool empty() const { return levels_.empty() || levels_.front().empty(); }
  /// Sorted keys of one level.
  const std::vector<Key>& level(int k) const { return levels_.at(static_cast<std::size_t>(k)); }
  bool contains(int level, const Key& key) const;

  /// Axis-aligned box of the coarsest level, or nothing when empty.
  std::optional<std::pair<Vec3, Vec3>> bounds() const;

 private:
  double voxel_size_ = 0.05;
  std::vector<std::vector<Key>> levels_;
  std::vector<std::unordered_set<Key, KeyHash>> sets_;
};

/// Parametric range [enter, exit) of a ray inside one cube.
struct Interval {
  double enter = 0.0;
  double exit = 0.0;
};

/// Slab test of the cube of `key` at `level` (side b * 2^level). A zero
/// direction component keeps the half-open rule lo <= o < hi. Nothing when the
/// range is empty.
std::optional<Interval> slab_interval(const Key& key, int level, double voxel_size, const Vec3& o,
                                      const Vec3& d);

/// One finest voxel on a ray: t = max(enter, 0).
struct Intersection {
  double t = 0.0;
  double t_exit = 0.0;
  Key key;
};

/// Finest voxels crossed by the ray in [0, t_max), found by descending the
/// octree, ordered by (t, key).
std::vector<Intersection> intersect_ray(const OctreeIndex& octree, const Vec3& o, const Vec3& d,
                                        double t_max);

struct TraceConfig {
  double safety = 0.9;
  double min_step = 1e-5;  // meters
  double iso = 1e-4;       // normalized units
  int max_steps = 64;
  double t_max = 10.0;
  /// Hits with |<d, grad f>| below this are left out of the backward pass.
  double grazing = 0.01;

  void validate() const;
};

struct VoxelTrace {
  std::optional<double> t;
  int evaluations = 0;
};

/// Sphere tracing confined to one voxel, starting at t_start. Stepping past the
/// voxel's exit ends the trace without a hit. `path` receives every evaluated t.
VoxelTrace sphere_trace_voxel(const SdfField& field, const Key& voxel, const Vec3& o, const Vec3& d,
                              double t_start, const TraceConfig& config = {},
                              std::vector<double>* path = nullptr);

struct HitRecord {
  bool hit = false;
  int pixel = -1;
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();  // unit length
  double t = 0.0;
  Key voxel;
  Vec3 point = Vec3::Zero();
  Vec3 gradient = Vec3::Zero();  // world sdf gradient at the hit
  double gamma = 0.0;            // 1 / <d, gradient>
  int evaluations = 0;
  int voxels = 0;                // voxels entered before the trace stopped
};

/// First hit along a unit ray: voxels in list order, first success wins.
HitRecord trace_ray(const SdfField& field, const OctreeIndex& octree, const Vec3& o, const Vec3& d,
                    const TraceConfig& config = {});

struct RenderStats {
  std::size_t rays = 0;
  std::size_t hits = 0;
  std::size_t evaluations = 0;
  std::size_t retained_states = 0;
  std::vector<int> evaluations_per_ray;
  std::vector<int> retained_per_ray;

  double mean_evaluations() const;
  double mean_retained() const;
};

struct RenderResult {
  ingest::DepthFrame depth;      // z-depth, 0 where nothing was hit or rendered
  std::vector<HitRecord> rays;   // one per rendered pixel, in request order
  RenderStats stats;
};

/// Renders `pixels` (row-major indices), or the whole image when null.
RenderResult render_depth(const SdfField& field, const OctreeIndex& octree,
                          const geom::Intrinsics& intrinsics, const geom::Pose& pose,
                          const std::vector<int>* pixels = nullptr, const TraceConfig& config = {});

/// Scalar implicit derivatives of a single hit.
inline double dt_dtheta(const HitRecord& h, double df_dtheta) { return -h.gamma * df_dtheta; }
inline Vec3 dt_dorigin(const HitRecord& h) { return -h.gamma * h.gradient; }
inline Vec3 dt_ddirection(const HitRecord& h) { return -h.gamma * h.t * h.gradient; }

/// d t / d xi for the left increment exp(xi) * T acting on the ray, (v, w) order.
geom::Vec6 ray_twist_gradient(const Vec3& o, const Vec3& d, const Vec3& dt_do, const Vec3& dt_dd);

bool is_grazing(const HitRecord& h, const TraceConfig& config);

struct ImplicitGradients {
  RowMatrix latents;          // grid rows x L
  std::vector<Vec3> origin;   // d loss / d o per ray
  std::vector<Vec3> direction;
  std::vector<int> dropped;   // grazing hits, reported as DegenerateHit
  std::size_t retained_states = 0;
};

/// d loss / d latents and d loss / d (o, d) from cached hits and d loss / d t
/// per ray. Misses and grazing hits contribute nothing.
ImplicitGradients backward_implicit(const circnet::LocalImplicitField& field,
                                    std::span<const HitRecord> hits, std::span<const double> dloss_dt,
                                    const TraceConfig& config = {});

/// Unrolled tracing: every step of the hit voxel is kept for the reverse sweep.
struct AdRay {
  std::vector<double> steps;  // t of every evaluated point in the hit voxel
  int recorded = 0;           // every point evaluated along the ray
};

struct AdRender {
  RenderResult render;
  std::vector<AdRay> tapes;
};

AdRender render_depth_ad(const SdfField& field, const OctreeIndex& octree,
                         const geom::Intrinsics& intrinsics, const geom::Pose& pose,
                         const std::vector<int>* pixels = nullptr, const TraceConfig& config = {});

/// Reverse sweep through the recorded steps of every hit ray.
RowMatrix backward_ad(const circnet::LocalImplicitField& field, const AdRender& ad,
                      std::span<const double> dloss_dt, const TraceConfig& config = {});

/// Baselines for evaluation counts. Both treat points outside the active set
/// as empty space at the truncation distance.
struct MarchResult {
  std::optional<double> t;
  int evaluations = 0;
};
/// `samples` equally spaced queries over (0, t_max], first sign change interpolated.
MarchResult uniform_march(const SdfField& field, const OctreeIndex& octree, const Vec3& o,
                          const Vec3& d, double t_max, int samples = 256);
/// Sphere tracing from the origin over the whole ray.
MarchResult global_sphere_trace(const SdfField& field, const OctreeIndex& octree, const Vec3& o,
                                const Vec3& d, double t_max, const TraceConfig& config = {},
                                int max_steps = 4096);

/// Far end of the octree's bounding box along the ray, or 0 when it is missed.
double far_bound(const OctreeIndex& octree, const Vec3& o, const Vec3& d);

}  // namespace circle::render
