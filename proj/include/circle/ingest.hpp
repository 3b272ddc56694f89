#pragma once

#include "circle/common.hpp"
#include "circle/geom.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace circle::ingest {

/// Depth image in meters along the optical axis; 0 marks an invalid pixel.
struct DepthFrame {
  geom::Intrinsics intrinsics;
  geom::Pose pose;
  int frame_id = 0;
  std::vector<double> depth;  // row-major, width * height

  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }
  double at(int u, int v) const { return depth[static_cast<std::size_t>(v) * width() + u]; }
  double& at(int u, int v) { return depth[static_cast<std::size_t>(v) * width() + u]; }

  static DepthFrame blank(const geom::Intrinsics& k, const geom::Pose& pose, int id = 0);
};

struct OrientedPointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;

  std::size_t size() const { return points.size(); }
  void append(const OrientedPointCloud& other);
};

struct LocalPoint {
  Vec3 local;   // (p - c_m) / b, each component in [0, 1)
  Vec3 normal;
};

struct VoxelBinning {
  double voxel_size = 0.05;
  std::map<Key, std::vector<LocalPoint>> voxels;

  std::size_t point_count() const;
};

/// World-space point of pixel (u, v) at its stored depth.
Vec3 unproject_pixel(const DepthFrame& frame, int u, int v);
/// Camera-space point of pixel (u, v) at depth d.
Vec3 backproject(const geom::Intrinsics& k, double u, double v, double d);

/// Per-pixel world-frame normals from neighbor cross products, oriented toward
/// the camera. Pixels whose right or lower neighbor is invalid get no normal.
std::vector<std::optional<Vec3>> estimate_normals(const DepthFrame& frame);

/// Oriented points of every valid pixel that also has a normal.
/// Throws EmptyFrame when the frame has no valid pixel at all.
OrientedPointCloud unproject_frame(const DepthFrame& frame);

DepthFrame add_depth_noise(const DepthFrame& frame, double sigma, std::uint64_t seed);
geom::Pose perturb_pose(const geom::Pose& pose, double sigma_t, double sigma_r, std::uint64_t seed);

OrientedPointCloud accumulate(std::span<const DepthFrame> frames);
VoxelBinning bin_points(const OrientedPointCloud& cloud, double voxel_size);

/// 16-bit PNG, millimeters.
DepthFrame read_depth_png(const std::filesystem::path& path, const geom::Intrinsics& k,
                          const geom::Pose& pose, int frame_id);
void write_depth_png(const std::filesystem::path& path, const DepthFrame& frame);

struct SceneLoadOptions {
  int frame_stride = 1;
  double depth_noise = 0.0;
  double pose_noise_t = 0.0;
  double pose_noise_r = 0.0;  // radians
  std::uint64_t seed = 0;
};

/// Loads `depth/%06d.png`, `poses.txt` and `intrinsics.txt` from a scene directory.
std::vector<DepthFrame> load_scene(const std::filesystem::path& dir,
                                   const SceneLoadOptions& options = {});
void save_scene_frames(const std::filesystem::path& dir, std::span<const DepthFrame> frames);

/// Applies the noise settings of `options` to in-memory frames. Each frame gets
/// its own stream derived from the seed and frame id.
std::vector<DepthFrame> apply_noise(std::span<const DepthFrame> frames,
                                    const SceneLoadOptions& options);

}  // namespace circle::ingest
