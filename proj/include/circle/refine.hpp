#pragma once

#include "circle/circnet.hpp"
#include "circle/geom.hpp"
#include "circle/ingest.hpp"
#include "circle/render.hpp"
#include "circle/train.hpp"

#include <functional>
#include <span>
#include <vector>

namespace circle::refine {

struct RefineConfig {
  int iterations = 200;
  /// Sampled pixels per frame and step; 0 renders every pixel.
  int rays_per_frame = 1024;
  double lr_latent = 1e-5;
  double lr_pose = 1e-3;
  std::uint64_t seed = 0;
  render::TraceConfig trace;  // grazing cutoff included

  void validate() const;
};

/// Latents and per-frame twists; frame t is seen from se3_exp(twists[t]) * frames[t].pose.
struct RefineState {
  RowMatrix latents;
  std::vector<geom::Twist> twists;
  train::AdamState latent_moments;
  std::vector<train::AdamState> pose_moments;
  long iteration = 0;

  static RefineState start(const circnet::LocalImplicitField& field, std::size_t frames);
  geom::Pose pose(const ingest::DepthFrame& frame, std::size_t t) const;
};

struct Residual {
  double value = 0.0;  // mean |D - D'| in meters
  std::size_t used = 0;
  double excluded_fraction = 0.0;
};

/// Mean absolute depth error over the rendered pixels that are hit and valid
/// in the observation. Throws NoOverlap when none is.
Residual depth_residual(const ingest::DepthFrame& observed, const render::RenderResult& rendered);

struct Gradients {
  Residual residual;
  RowMatrix latents;
  std::vector<geom::Vec6> twists;
  std::size_t dropped = 0;  // grazing hits left out
};

/// Residual of the step's ray sample and its gradients for the field's current
/// latents. The sample depends on the seed, the state's iteration and the frame.
Gradients residual_gradients(const RefineState& state, std::span<const ingest::DepthFrame> frames,
                             const circnet::LocalImplicitField& field, const render::OctreeIndex& octree,
                             const RefineConfig& config);

/// One Adam update of latents and twists. `field` tracks the state's latents.
Residual refine_step(RefineState& state, std::span<const ingest::DepthFrame> frames,
                     circnet::LocalImplicitField& field, const render::OctreeIndex& octree,
                     const RefineConfig& config);

struct RefineResult {
  circnet::SparseFeatureGrid grid;
  std::vector<geom::Pose> poses;
  std::vector<Residual> residuals;  // one per step, before its update
};

/// Runs `config.iterations` steps from a fresh state. The octree stays fixed.
RefineResult refine(std::span<const ingest::DepthFrame> frames, circnet::LocalImplicitField& field,
                    const render::OctreeIndex& octree, const RefineConfig& config,
                    const std::function<void(int, const Residual&)>& on_step = {});

}  // namespace circle::refine
