#include "circle/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

namespace circle::ingest {

DepthFrame DepthFrame::blank(const geom::Intrinsics& k, const geom::Pose& pose, int id) {
  DepthFrame f;
  f.intrinsics = k;
  f.pose = pose;
  f.frame_id = id;
  f.depth.assign(static_cast<std::size_t>(k.width) * k.height, 0.0);
  return f;
}

void OrientedPointCloud::append(const OrientedPointCloud& other) {
  points.insert(points.end(), other.points.begin(), other.points.end());
  normals.insert(normals.end(), other.normals.begin(), other.normals.end());
}

std::size_t VoxelBinning::point_count() const {
  std::size_t n = 0;
  for (const auto& [key, pts] : voxels) n += pts.size();
  return n;
}

Vec3 backproject(const geom::Intrinsics& k, double u, double v, double d) {
  return {(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d};
}

Vec3 unproject_pixel(const DepthFrame& frame, int u, int v) {
  return frame.pose.apply(backproject(frame.intrinsics, u, v, frame.at(u, v)));
}

std::vector<std::optional<Vec3>> estimate_normals(const DepthFrame& frame) {
  const int w = frame.width();
  const int h = frame.height();
  std::vector<std::optional<Vec3>> normals(static_cast<std::size_t>(w) * h);
  for (int v = 0; v + 1 < h; ++v) {
    for (int u = 0; u + 1 < w; ++u) {
      const double d = frame.at(u, v);
      const double dr = frame.at(u + 1, v);
      const double dd = frame.at(u, v + 1);
      if (d <= 0.0 || dr <= 0.0 || dd <= 0.0) continue;
      const Vec3 p = backproject(frame.intrinsics, u, v, d);
      const Vec3 pr = backproject(frame.intrinsics, u + 1, v, dr);
      const Vec3 pd = backproject(frame.intrinsics, u, v + 1, dd);
      Vec3 n = (pr - p).cross(pd - p);
      const double len = n.norm();
      if (!(len > 0.0)) continue;
      n /= len;
      if (n.dot(p) > 0.0) n = -n;
      normals[static_cast<std::size_t>(v) * w + u] = frame.pose.rotate(n);
    }
  }
  return normals;
}

OrientedPointCloud unproject_frame(const DepthFrame& frame) {
  bool any_valid = false;
  for (double d : frame.depth) any_valid |= d > 0.0;
  if (!any_valid) throw Error(ErrorCode::EmptyFrame, "depth frame has no valid pixel");

  const auto normals = estimate_normals(frame);
  OrientedPointCloud cloud;
  for (int v = 0; v < frame.height(); ++v) {
    for (int u = 0; u < frame.width(); ++u) {
      const auto& n = normals[static_cast<std::size_t>(v) * frame.width() + u];
      if (frame.at(u, v) <= 0.0 || !n) continue;
      cloud.points.push_back(unproject_pixel(frame, u, v));
      cloud.normals.push_back(*n);
    }
  }
  return cloud;
}

DepthFrame add_depth_noise(const DepthFrame& frame, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw Error(ErrorCode::InvalidArgument, "negative depth noise");
  DepthFrame out = frame;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (double& d : out.depth) {
    if (d > 0.0) d = std::max(d + noise(rng), 1e-6);
  }
  return out;
}

geom::Pose perturb_pose(const geom::Pose& pose, double sigma_t, double sigma_r,
                        std::uint64_t seed) {
  if (sigma_t < 0.0 || sigma_r < 0.0) throw Error(ErrorCode::InvalidArgument, "negative pose noise");
  if (sigma_t == 0.0 && sigma_r == 0.0) return pose;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  geom::Twist xi;
  for (int i = 0; i < 3; ++i) xi.v(i) = sigma_t * unit(rng);
  for (int i = 0; i < 3; ++i) xi.w(i) = sigma_r * unit(rng);
  return geom::se3_exp(xi) * pose;
}

OrientedPointCloud accumulate(std::span<const DepthFrame> frames) {
  OrientedPointCloud cloud;
  for (const auto& f : frames) cloud.append(unproject_frame(f));
  return cloud;
}

VoxelBinning bin_points(const OrientedPointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0)) throw Error(ErrorCode::InvalidArgument, "voxel size must be positive");
  if (cloud.points.size() != cloud.normals.size()) {
    throw Error(ErrorCode::ShapeMismatch, "points and normals differ in length");
  }
  VoxelBinning bins;
  bins.voxel_size = voxel_size;
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Key k = voxel_key(cloud.points[i], voxel_size);
    Vec3 local = local_coords(cloud.points[i], k, voxel_size);
    // Rounding in p / b - k can land exactly on 1.
    for (int a = 0; a < 3; ++a) local(a) = std::clamp(local(a), 0.0, std::nextafter(1.0, 0.0));
    bins.voxels[k].push_back({local, cloud.normals[i]});
  }
  return bins;
}

std::vector<DepthFrame> apply_noise(std::span<const DepthFrame> frames,
                                    const SceneLoadOptions& options) {
  std::vector<DepthFrame> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    const std::uint64_t base = options.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(f.frame_id);
    DepthFrame g = add_depth_noise(f, options.depth_noise, base ^ 0xD1B54A32D192ED03ull);
    g.pose = perturb_pose(g.pose, options.pose_noise_t, options.pose_noise_r,
                          base ^ 0x8CB92BA72F3D8DD7ull);
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<DepthFrame> load_scene(const std::filesystem::path& dir,
                                   const SceneLoadOptions& options) {
  if (options.frame_stride < 1) throw Error(ErrorCode::InvalidArgument, "frame stride must be >= 1");
  const auto k = geom::read_intrinsics(dir / "intrinsics.txt");
  const auto poses = geom::read_poses(dir / "poses.txt");
  std::vector<DepthFrame> frames;
  for (std::size_t i = 0; i < poses.size(); i += static_cast<std::size_t>(options.frame_stride)) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", poses[i].frame);
    frames.push_back(read_depth_png(dir / "depth" / name, k, poses[i].pose, poses[i].frame));
  }
  if (options.depth_noise > 0.0 || options.pose_noise_t > 0.0 || options.pose_noise_r > 0.0) {
    return apply_noise(frames, options);
  }
  return frames;
}

void save_scene_frames(const std::filesystem::path& dir, std::span<const DepthFrame> frames) {
  if (frames.empty()) throw Error(ErrorCode::InvalidArgument, "no frames to save");
  std::filesystem::create_directories(dir / "depth");
  geom::write_intrinsics(dir / "intrinsics.txt", frames.front().intrinsics);
  std::vector<geom::IndexedPose> poses;
  for (const auto& f : frames) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", f.frame_id);
    write_depth_png(dir / "depth" / name, f);
    poses.push_back({f.frame_id, f.pose});
  }
  geom::write_poses(dir / "poses.txt", poses);
}

}  // namespace circle::ingest
