#include "circle/ingest.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

using namespace circle;
using namespace circle::ingest;
using geom::Intrinsics;
using geom::Pose;

namespace {

DepthFrame constant_frame(const Intrinsics& k, double d, const Pose& pose = {}) {
  DepthFrame f = DepthFrame::blank(k, pose);
  for (auto& v : f.depth) v = d;
  return f;
}

}  // namespace

TEST(Unproject, UnitIntrinsicsArithmetic) {
  DepthFrame f = DepthFrame::blank(Intrinsics{1, 1, 0, 0, 3, 3}, Pose{});
  f.at(1, 0) = 2.0;
  EXPECT_LT((unproject_pixel(f, 1, 0) - Vec3(2, 0, 2)).norm(), 1e-15);
}

TEST(Unproject, PrincipalPointMapsToOpticalAxis) {
  Pose pose = geom::se3_exp({Vec3(0.1, 0.2, 0.3), Vec3(0.2, -0.1, 0.4)});
  DepthFrame f = DepthFrame::blank(Intrinsics{50, 50, 4, 3, 8, 6}, pose);
  f.at(4, 3) = 1.5;
  EXPECT_LT((unproject_pixel(f, 4, 3) - pose.apply(Vec3(0, 0, 1.5))).norm(), 1e-12);
}

TEST(Unproject, AllZeroFrameThrows) {
  const DepthFrame f = DepthFrame::blank(Intrinsics{1, 1, 0, 0, 4, 4}, Pose{});
  try {
    unproject_frame(f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyFrame);
  }
}

TEST(Unproject, ProjectionRoundTrip) {
  const Intrinsics k{60, 55, 16, 12, 32, 24};
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> depth(0.5, 3.0);
  const Pose pose = geom::se3_exp({Vec3(1, -2, 0.5), Vec3(0.3, 0.2, -0.6)});
  DepthFrame f = DepthFrame::blank(k, pose);
  for (auto& d : f.depth) d = depth(rng);
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const Vec3 c = pose.inverse().apply(unproject_pixel(f, u, v));
      EXPECT_NEAR(k.fx * c.x() / c.z() + k.cx, u, 1e-6);
      EXPECT_NEAR(k.fy * c.y() / c.z() + k.cy, v, 1e-6);
      EXPECT_NEAR(c.z(), f.at(u, v), 1e-6);
    }
  }
}

TEST(Normals, FrontoParallelPlaneFacesCamera) {
  const DepthFrame f = constant_frame(Intrinsics{100, 100, 10, 10, 20, 20}, 2.0);
  const auto normals = estimate_normals(f);
  int count = 0;
  for (const auto& n : normals) {
    if (!n) continue;
    ++count;
    EXPECT_LT((*n - Vec3(0, 0, -1)).norm(), 1e-9);
  }
  EXPECT_EQ(count, 19 * 19);
}

TEST(Normals, DepthRampMatchesFittedPlane) {
  const Intrinsics k{100, 100, 20, 15, 40, 30};
  DepthFrame f = DepthFrame::blank(k, Pose{});
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) f.at(u, v) = 1.0 + 0.01 * u;
  }
  // Oracle: least-squares plane through the 3x3 neighborhood of each pixel.
  const auto normals = estimate_normals(f);
  for (int v = 2; v < k.height - 2; ++v) {
    for (int u = 2; u < k.width - 2; ++u) {
      Eigen::MatrixXd pts(9, 3);
      for (int j = 0; j < 9; ++j) pts.row(j) = unproject_pixel(f, u - 1 + j % 3, v - 1 + j / 3);
      const Eigen::RowVector3d centroid = pts.colwise().mean();
      const Eigen::MatrixXd centered = pts.rowwise() - centroid;
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
      Vec3 plane = svd.matrixV().col(2);
      if (plane.dot(Vec3(centroid.transpose())) > 0) plane = -plane;
      const auto& n = normals[v * k.width + u];
      ASSERT_TRUE(n.has_value());
      EXPECT_GT(std::abs(n->x()), 0.1);
      const double angle = std::acos(std::clamp(n->dot(plane), -1.0, 1.0));
      EXPECT_LT(angle, 1.0 * std::numbers::pi / 180);
    }
  }
}

TEST(Normals, RotatedPosePlaneWithinOneDegree) {
  const Intrinsics k{80, 80, 16, 16, 32, 32};
  const Pose pose = geom::se3_exp({Vec3(0.2, 0.1, -0.3), Vec3(0.1, 0.4, 0.2)});
  // Plane n_c . x = 1.5 in camera coordinates.
  const Vec3 nc = Vec3(0.2, -0.3, -1.0).normalized();
  DepthFrame f = DepthFrame::blank(k, pose);
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const Vec3 ray = geom::camera_ray(k, u, v);
      f.at(u, v) = -1.5 / nc.dot(ray);
    }
  }
  const Vec3 expected = pose.rotate(nc);
  const auto normals = estimate_normals(f);
  for (int v = 1; v < k.height - 1; ++v) {
    for (int u = 1; u < k.width - 1; ++u) {
      const auto& n = normals[v * k.width + u];
      ASSERT_TRUE(n.has_value());
      EXPECT_LT(std::acos(std::clamp(n->dot(expected), -1.0, 1.0)), std::numbers::pi / 180);
    }
  }
}

TEST(Normals, IsolatedPixelIsDropped) {
  DepthFrame f = DepthFrame::blank(Intrinsics{10, 10, 2, 2, 5, 5}, Pose{});
  f.at(2, 2) = 1.0;
  EXPECT_FALSE(estimate_normals(f)[2 * 5 + 2].has_value());
  EXPECT_EQ(unproject_frame(f).size(), 0u);
}

TEST(Noise, ZeroSigmaIsBitIdentical) {
  DepthFrame f = constant_frame(Intrinsics{10, 10, 2, 2, 5, 5}, 1.25);
  f.at(1, 1) = 0.0;
  const DepthFrame g = add_depth_noise(f, 0.0, 42);
  EXPECT_EQ(f.depth, g.depth);
}

TEST(Noise, SampleMeanIsZeroWithinThreeSigma) {
  const DepthFrame f = constant_frame(Intrinsics{500, 500, 500, 500, 1000, 1000}, 2.0);
  const double sigma = 0.01;
  const DepthFrame g = add_depth_noise(f, sigma, 99);
  double mean = 0.0;
  for (std::size_t i = 0; i < f.depth.size(); ++i) mean += g.depth[i] - f.depth[i];
  mean /= static_cast<double>(f.depth.size());
  EXPECT_LT(std::abs(mean), 3.0 * sigma / std::sqrt(static_cast<double>(f.depth.size())));
}

TEST(Noise, DeterministicAndInvalidPixelsUntouched) {
  DepthFrame f = constant_frame(Intrinsics{10, 10, 5, 5, 10, 10}, 1.0);
  f.at(3, 3) = 0.0;
  const DepthFrame a = add_depth_noise(f, 0.05, 7);
  const DepthFrame b = add_depth_noise(f, 0.05, 7);
  EXPECT_EQ(a.depth, b.depth);
  EXPECT_EQ(a.at(3, 3), 0.0);
  EXPECT_NE(a.depth, add_depth_noise(f, 0.05, 8).depth);
}

TEST(PosePerturbation, ZeroSigmaIsIdentity) {
  const Pose p = geom::se3_exp({Vec3(1, 2, 3), Vec3(0.1, 0.2, 0.3)});
  const Pose q = perturb_pose(p, 0.0, 0.0, 5);
  EXPECT_LT((p.rotation - q.rotation).norm(), 1e-15);
  EXPECT_LT((p.translation - q.translation).norm(), 1e-15);
}

TEST(PosePerturbation, DeterministicUnderSeed) {
  const Pose p;
  const Pose a = perturb_pose(p, 0.03, 0.035, 5);
  const Pose b = perturb_pose(p, 0.03, 0.035, 5);
  EXPECT_EQ(a.translation, b.translation);
  EXPECT_EQ(a.rotation, b.rotation);
}

TEST(PosePerturbation, TranslationOffsetFollowsMaxwellMean) {
  // For an identity base pose and rotational sigma 0 the offset is an isotropic
  // 3D Gaussian, whose norm has mean sigma * sqrt(8 / pi).
  const double sigma = 0.03;
  const int n = 10000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = perturb_pose(Pose{}, sigma, 0.0, 1000 + i).translation.norm();
    sum += r;
    sum_sq += r * r;
  }
  const double mean = sum / n;
  const double expected = sigma * std::sqrt(8.0 / std::numbers::pi);
  const double sd = std::sqrt(sum_sq / n - mean * mean);
  EXPECT_LT(std::abs(mean - expected), 4.0 * sd / std::sqrt(double(n)));
  EXPECT_NEAR(sum_sq / n, 3.0 * sigma * sigma, 0.1 * 3.0 * sigma * sigma);
}

TEST(PosePerturbation, RotationAngleMatchesSigma) {
  const double sigma_r = 0.035;
  double sum_sq = 0.0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const Pose q = perturb_pose(Pose{}, 0.0, sigma_r, 50000 + i);
    sum_sq += geom::so3_log(q.rotation).squaredNorm();
  }
  EXPECT_NEAR(sum_sq / n, 3 * sigma_r * sigma_r, 0.1 * 3 * sigma_r * sigma_r);
}

TEST(Binning, Arithmetic) {
  OrientedPointCloud c;
  c.points = {Vec3(0.07, 0.01, 0.12)};
  c.normals = {Vec3(0, 0, 1)};
  const VoxelBinning b = bin_points(c, 0.05);
  ASSERT_EQ(b.voxels.size(), 1u);
  const auto& [key, pts] = *b.voxels.begin();
  EXPECT_EQ(key, (Key{1, 0, 2}));
  EXPECT_LT((pts[0].local - Vec3(0.4, 0.2, 0.4)).norm(), 1e-12);
}

TEST(Binning, CornerUsesHalfOpenRule) {
  OrientedPointCloud c;
  c.points = {Vec3(0.05, 0, 0)};
  c.normals = {Vec3(1, 0, 0)};
  const VoxelBinning b = bin_points(c, 0.05);
  EXPECT_EQ(b.voxels.begin()->first, (Key{1, 0, 0}));
  EXPECT_LT(b.voxels.begin()->second[0].local.norm(), 1e-12);
}

TEST(Binning, PartitionsTheCloud) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  OrientedPointCloud c;
  for (int i = 0; i < 5000; ++i) {
    c.points.emplace_back(u(rng), u(rng), u(rng));
    c.normals.push_back(Vec3(u(rng), u(rng), u(rng)).normalized());
  }
  c.points.emplace_back(0.01, 0.02, 0.03);
  c.points.emplace_back(0.011, 0.021, 0.031);
  c.normals.resize(c.points.size(), Vec3(0, 0, 1));
  const VoxelBinning b = bin_points(c, 0.05);
  EXPECT_EQ(b.point_count(), c.size());
  for (const auto& [k, pts] : b.voxels) {
    for (const auto& p : pts) {
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(p.local[a], 0.0);
        EXPECT_LT(p.local[a], 1.0);
      }
    }
  }
  EXPECT_GE(b.voxels.at(Key{0, 0, 0}).size(), 2u);
}

TEST(DepthPng, RoundTripAtMillimeterResolution) {
  const auto dir = std::filesystem::temp_directory_path() / "circle_png";
  std::filesystem::create_directories(dir);
  const Intrinsics k{50, 50, 8, 6, 16, 12};
  DepthFrame f = DepthFrame::blank(k, Pose{});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.2, 5.0);
  for (auto& d : f.depth) d = std::round(u(rng) * 1000.0) / 1000.0;
  f.at(0, 0) = 0.0;
  write_depth_png(dir / "d.png", f);
  const DepthFrame g = read_depth_png(dir / "d.png", k, Pose{}, 0);
  for (std::size_t i = 0; i < f.depth.size(); ++i) EXPECT_NEAR(f.depth[i], g.depth[i], 1e-12);
  EXPECT_THROW(read_depth_png(dir / "nope.png", k, Pose{}, 0), Error);
}

TEST(Scene, SaveAndLoadWithStride) {
  const auto dir = std::filesystem::temp_directory_path() / "circle_scene_io";
  std::filesystem::remove_all(dir);
  const Intrinsics k{50, 50, 8, 6, 16, 12};
  std::vector<DepthFrame> frames;
  for (int i = 0; i < 4; ++i) {
    DepthFrame f = constant_frame(k, 1.0 + 0.25 * i, geom::se3_exp({Vec3(0.1 * i, 0, 0), Vec3::Zero()}));
    f.frame_id = i;
    frames.push_back(f);
  }
  save_scene_frames(dir, frames);
  const auto all = load_scene(dir);
  ASSERT_EQ(all.size(), 4u);
  EXPECT_NEAR(all[3].at(5, 5), 1.75, 1e-12);
  EXPECT_NEAR(all[2].pose.translation.x(), 0.2, 1e-15);
  SceneLoadOptions opt;
  opt.frame_stride = 2;
  const auto half = load_scene(dir, opt);
  ASSERT_EQ(half.size(), 2u);
  EXPECT_EQ(half[1].frame_id, 2);
}
