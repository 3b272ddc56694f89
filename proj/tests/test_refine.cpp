#include "circle/refine.hpp"
#include "toy_fit.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace circle;
using namespace circle::refine;

namespace {

geom::Intrinsics wide_intrinsics() {
  geom::Intrinsics k;
  k.fx = k.fy = 32.0;
  k.cx = 15.5;
  k.cy = 11.5;
  k.width = 32;
  k.height = 24;
  return k;
}

ingest::DepthFrame observe(const circnet::LocalImplicitField& field, const render::OctreeIndex& octree,
                           const geom::Intrinsics& k, const geom::Pose& pose, int id) {
  auto frame = render::render_depth(field, octree, k, pose).depth;
  frame.frame_id = id;
  return frame;
}

std::vector<geom::Pose> ring_poses(int n) {
  std::vector<geom::Pose> out;
  const Vec3 target(0.1, 0.1, 0.05);
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * std::numbers::pi * (i + 0.3) / n;
    out.push_back(toy::look_at(target + Vec3(0.25 * std::cos(a), 0.25 * std::sin(a), 0.2), target));
  }
  return out;
}

render::TraceConfig tight() {
  render::TraceConfig c;
  c.iso = 1e-11;
  c.min_step = 1e-13;
  c.max_steps = 400;
  return c;
}

render::RenderResult fake_render(const std::vector<double>& depth, const std::vector<bool>& hit) {
  geom::Intrinsics k;
  k.width = static_cast<int>(depth.size());
  k.height = 1;
  render::RenderResult r;
  r.depth = ingest::DepthFrame::blank(k, geom::Pose{});
  for (std::size_t i = 0; i < depth.size(); ++i) {
    render::HitRecord h;
    h.pixel = static_cast<int>(i);
    h.hit = hit[i];
    if (h.hit) r.depth.depth[i] = depth[i];
    r.rays.push_back(h);
  }
  return r;
}

class BlockToy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { toy_ = new toy::FittedToy(toy::fit_toy(toy::block_scene(toy::toy_model()), 300)); }
  static void TearDownTestSuite() { delete toy_; }
  static toy::FittedToy* toy_;
};
toy::FittedToy* BlockToy::toy_ = nullptr;

}  // namespace

TEST(DepthResidual, IdenticalIsZero) {
  const auto r = fake_render({1.0, 2.0, 3.0}, {true, true, true});
  ingest::DepthFrame obs = r.depth;
  EXPECT_EQ(depth_residual(obs, r).value, 0.0);
}

TEST(DepthResidual, ConstantBias) {
  const auto r = fake_render({1.005, 2.005, 3.005, 0.0}, {true, true, true, false});
  ingest::DepthFrame obs = r.depth;
  obs.depth = {1.0, 2.0, 3.0, 4.0};
  const auto res = depth_residual(obs, r);
  EXPECT_NEAR(res.value, 0.005, 1e-12);
  EXPECT_EQ(res.used, 3u);
  EXPECT_DOUBLE_EQ(res.excluded_fraction, 0.25);
}

TEST(DepthResidual, AllMissesHaveNoOverlap) {
  const auto r = fake_render({0.0, 0.0}, {false, false});
  ingest::DepthFrame obs = r.depth;
  obs.depth = {1.0, 1.0};
  try {
    depth_residual(obs, r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoOverlap);
  }
}

TEST_F(BlockToy, ZeroIterationsReturnInputs) {
  circnet::LocalImplicitField field = *toy_->field;
  const auto k = wide_intrinsics();
  const auto poses = ring_poses(2);
  std::vector<ingest::DepthFrame> frames{observe(field, toy_->octree, k, poses[0], 0),
                                         observe(field, toy_->octree, k, poses[1], 1)};
  RefineConfig c;
  c.iterations = 0;
  const auto out = refine::refine(frames, field, toy_->octree, c);
  EXPECT_EQ(out.grid.latents, toy_->field->grid().latents);
  ASSERT_EQ(out.poses.size(), 2u);
  EXPECT_EQ(out.poses[1].translation, poses[1].translation);
  EXPECT_TRUE(out.residuals.empty());
}

TEST_F(BlockToy, NoNoiseIsANoOp) {
  circnet::LocalImplicitField field = *toy_->field;
  const auto k = wide_intrinsics();
  std::vector<ingest::DepthFrame> frames;
  const auto poses = ring_poses(5);
  for (int i = 0; i < 5; ++i) frames.push_back(observe(field, toy_->octree, k, poses[i], i));
  const auto weights = toy_->net->params().get("dec.w0").value.to_vector();
  RefineConfig c;
  c.iterations = 50;
  c.rays_per_frame = 256;
  const auto out = refine::refine(frames, field, toy_->octree, c);
  EXPECT_LT((out.grid.latents - toy_->field->grid().latents).norm(), 1e-4);
  for (const auto& r : out.residuals) EXPECT_LT(r.value, 1e-12);
  for (int i = 0; i < 5; ++i) EXPECT_LT((out.poses[i].translation - poses[i].translation).norm(), 1e-6);
  EXPECT_EQ(toy_->net->params().get("dec.w0").value.to_vector(), weights);
}

TEST_F(BlockToy, ForwardOffsetPullsCameraBack) {
  const auto& field = *toy_->field;
  const auto k = wide_intrinsics();
  geom::Pose pose;  // looking straight down
  pose.rotation = Vec3(1, -1, -1).asDiagonal();
  pose.translation = Vec3(0.1, 0.1, 0.35);
  std::vector<ingest::DepthFrame> frames{observe(field, toy_->octree, k, pose, 0)};
  frames[0].pose.translation.z() -= 0.01;
  RefineConfig c;
  c.rays_per_frame = 0;
  const auto g = residual_gradients(RefineState::start(field, 1), frames, field, toy_->octree, c);
  const geom::Vec6 step = -g.twists[0];
  EXPECT_GT(step[2], 0.0);
  EXPECT_GT(std::abs(step[2]), 3 * std::abs(step[0]));
  EXPECT_GT(std::abs(step[2]), 3 * std::abs(step[1]));
}

TEST_F(BlockToy, TwistGradientMatchesFiniteDifferences) {
  const auto& field = *toy_->field;
  const auto k = wide_intrinsics();
  const auto poses = ring_poses(3);
  std::vector<ingest::DepthFrame> frames;
  for (int i = 0; i < 3; ++i) {
    frames.push_back(observe(field, toy_->octree, k, poses[i], i));
    frames.back().pose = ingest::perturb_pose(poses[i], 0.004, 0.01, 40 + i);
  }
  RefineConfig c;
  c.rays_per_frame = 300;
  c.trace = tight();
  RefineState s = RefineState::start(field, 3);
  s.twists[1].v = Vec3(0.002, -0.001, 0.001);
  s.twists[1].w = Vec3(0.01, 0.02, -0.01);
  const auto g = residual_gradients(s, frames, field, toy_->octree, c);
  for (std::size_t t = 0; t < 3; ++t) {
    geom::Vec6 fd;
    for (int a = 0; a < 6; ++a) {
      auto at = [&](double delta) {
        RefineState p = s;
        geom::Vec6 x = p.twists[t].vector();
        x[a] += delta;
        p.twists[t] = geom::Twist::from_vector(x);
        return residual_gradients(p, frames, field, toy_->octree, c).residual.value;
      };
      fd[a] = (at(1e-8) - at(-1e-8)) / 2e-8;
    }
    EXPECT_LT((fd - g.twists[t]).norm(), 1e-3 * g.twists[t].norm()) << "frame " << t;
  }
}

/// A toy network fitted to the standard 1 m room, seen from its default camera path.
class RoomToy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto gt = scene::make_room(1);
    observed_ = new std::vector<ingest::DepthFrame>(scene::render_frames(gt, scene::CameraPath{}));
    toy_ = new toy::FittedToy(toy::fit_toy(train::make_training_scene(gt, *observed_, toy::toy_model()), 150));
  }
  static void TearDownTestSuite() {
    delete toy_;
    delete observed_;
  }
  static toy::FittedToy* toy_;
  static std::vector<ingest::DepthFrame>* observed_;
};
toy::FittedToy* RoomToy::toy_ = nullptr;
std::vector<ingest::DepthFrame>* RoomToy::observed_ = nullptr;

TEST_F(RoomToy, NoisyPosesImprove) {
  circnet::LocalImplicitField field = *toy_->field;
  std::vector<ingest::DepthFrame> frames;
  std::vector<geom::Pose> poses;
  double before = 0.0;
  for (int i = 0; i < 5; ++i) {
    const auto& g = (*observed_)[static_cast<std::size_t>(2 * i)];
    poses.push_back(g.pose);
    frames.push_back(observe(field, toy_->octree, g.intrinsics, g.pose, i));
    frames.back().pose = ingest::perturb_pose(g.pose, 0.03, 2.0 * std::numbers::pi / 180.0, 90 + i);
    before += (frames.back().pose.translation - g.pose.translation).norm() / 5;
  }
  RefineConfig c;
  c.rays_per_frame = 256;
  const auto out = refine::refine(frames, field, toy_->octree, c);
  double after = 0.0;
  for (int i = 0; i < 5; ++i) after += (out.poses[i].translation - poses[i].translation).norm() / 5;
  EXPECT_LT(after, 0.5 * before);
  EXPECT_LT(out.residuals.back().value, 0.5 * out.residuals.front().value);
}

TEST_F(BlockToy, Deterministic) {
  const auto k = wide_intrinsics();
  const auto poses = ring_poses(2);
  auto run = [&] {
    circnet::LocalImplicitField field = *toy_->field;
    std::vector<ingest::DepthFrame> frames;
    for (int i = 0; i < 2; ++i) {
      frames.push_back(observe(field, toy_->octree, k, poses[i], i));
      frames.back().pose = ingest::perturb_pose(poses[i], 0.01, 0.01, 7 + i);
    }
    RefineConfig c;
    c.iterations = 5;
    c.rays_per_frame = 128;
    return refine::refine(frames, field, toy_->octree, c);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.grid.latents, b.grid.latents);
  EXPECT_EQ(a.poses[0].translation, b.poses[0].translation);
  EXPECT_EQ(a.residuals.back().value, b.residuals.back().value);
}
