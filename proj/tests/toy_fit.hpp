#pragma once

#include "circle/render.hpp"
#include "circle/train.hpp"

#include <memory>

namespace circle::toy {

inline circnet::ModelConfig toy_model() {
  circnet::ModelConfig c;
  c.latent_dim = 16;
  c.encoder_hidden = 8;
  c.unet_channels = {8, 8, 12};
  c.decoder_hidden = 32;
  c.seed = 5;
  return c;
}

inline train::TrainingScene make_toy_scene(const circnet::ModelConfig& m, std::vector<scene::CsgTerm> terms) {
  train::TrainingScene s;
  s.gt = scene::GtScene(std::move(terms), Vec3(0.001, 0.001, 0.001), Vec3(0.199, 0.199, 0.199));
  s.bins.voxel_size = m.voxel_size;
  for (const Vec3& p : s.gt.sample_surface(600, 11)) {
    const Key k = voxel_key(p, m.voxel_size);
    s.bins.voxels[k].push_back({local_coords(p, k, m.voxel_size), s.gt.normal(p)});
  }
  s.pyramid = train::gt_sparsity_pyramid(s.gt, m.voxel_size, m.levels());
  return s;
}

/// Sphere of radius 0.07 around (0.1, 0.1, 0.1) inside [0, 0.2]^3.
inline train::TrainingScene sphere_scene(const circnet::ModelConfig& m) {
  const scene::Primitive ball{scene::Primitive::Kind::Sphere, Vec3(0.1, 0.1, 0.1), Vec3(0.07, 0, 0)};
  return make_toy_scene(m, {{scene::CsgTerm::Op::Union, ball}});
}

/// Floor at z = 0.03 with a 6 cm cube and a ball on it.
inline train::TrainingScene block_scene(const circnet::ModelConfig& m) {
  using scene::Primitive;
  const Primitive floor{Primitive::Kind::Box, Vec3(0.1, 0.1, -4.97), Vec3(5, 5, 5)};
  const Primitive cube{Primitive::Kind::Box, Vec3(0.07, 0.08, 0.06), Vec3(0.03, 0.03, 0.03)};
  const Primitive ball{Primitive::Kind::Sphere, Vec3(0.14, 0.13, 0.06), Vec3(0.035, 0, 0)};
  return make_toy_scene(m, {{scene::CsgTerm::Op::Union, floor},
                            {scene::CsgTerm::Op::Union, cube},
                            {scene::CsgTerm::Op::Union, ball}});
}

/// A small network trained on a toy scene, its teacher grid and octree.
struct FittedToy {
  std::unique_ptr<circnet::CircNet> net;
  train::TrainingScene scene;
  std::unique_ptr<circnet::LocalImplicitField> field;
  render::OctreeIndex octree;
};

inline FittedToy fit_toy(train::TrainingScene scene, int iterations) {
  FittedToy toy;
  const auto m = toy_model();
  toy.net = std::make_unique<circnet::CircNet>(m);
  toy.scene = std::move(scene);
  train::TrainConfig c;
  c.iterations = iterations;
  train::Trainer trainer(*toy.net, c);
  trainer.fit(std::span<const train::TrainingScene>(&toy.scene, 1));
  toy.field = std::make_unique<circnet::LocalImplicitField>(*toy.net, train::teacher_grid(*toy.net, toy.scene));
  toy.octree = render::OctreeIndex(toy.field->grid().keys, m.levels(), m.voxel_size);
  return toy;
}

inline FittedToy fit_sphere_toy(int iterations = 400) { return fit_toy(sphere_scene(toy_model()), iterations); }

/// Camera at `eye` looking at `target` with the image x axis horizontal.
inline geom::Pose look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = z.cross(Vec3::UnitZ()).normalized();
  geom::Pose p;
  p.rotation.col(0) = x;
  p.rotation.col(1) = z.cross(x);
  p.rotation.col(2) = z;
  p.translation = eye;
  return p;
}

/// 16 x 12 camera 0.3 m in front of the sphere, looking along +z.
inline geom::Intrinsics toy_intrinsics() {
  geom::Intrinsics k;
  k.fx = k.fy = 40.0;
  k.cx = 7.5;
  k.cy = 5.5;
  k.width = 16;
  k.height = 12;
  return k;
}

inline geom::Pose toy_pose() {
  geom::Pose p;
  p.translation = Vec3(0.1, 0.1, -0.3);
  return p;
}

}  // namespace circle::toy
