#include "circle/refine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace circle::refine {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  h ^= h >> 31;
  h *= 0xBF58476D1CE4E5B9ull;
  h ^= h >> 29;
  return h;
}

std::vector<int> sample_pixels(const ingest::DepthFrame& frame, int count, std::uint64_t seed) {
  const int total = frame.width() * frame.height();
  std::vector<int> all(static_cast<std::size_t>(total));
  std::iota(all.begin(), all.end(), 0);
  if (count <= 0 || count >= total) return all;
  std::vector<int> out;
  std::mt19937_64 rng(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(out), count, rng);
  return out;
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

bool usable(const ingest::DepthFrame& observed, const render::HitRecord& h) {
  return h.hit && observed.depth[static_cast<std::size_t>(h.pixel)] > 0.0;
}

}  // namespace

void RefineConfig::validate() const {
  if (iterations < 0 || rays_per_frame < 0 || !(lr_latent > 0.0) || !(lr_pose > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "invalid refinement configuration");
  }
  trace.validate();
}

RefineState RefineState::start(const circnet::LocalImplicitField& field, std::size_t frames) {
  RefineState s;
  s.latents = field.grid().latents;
  s.twists.resize(frames);
  s.pose_moments.resize(frames);
  return s;
}

geom::Pose RefineState::pose(const ingest::DepthFrame& frame, std::size_t t) const {
  return geom::se3_exp(twists.at(t)) * frame.pose;
}

Residual depth_residual(const ingest::DepthFrame& observed, const render::RenderResult& rendered) {
  Residual r;
  double sum = 0.0;
  for (const auto& h : rendered.rays) {
    if (!usable(observed, h)) continue;
    sum += std::abs(rendered.depth.depth[static_cast<std::size_t>(h.pixel)] -
                    observed.depth[static_cast<std::size_t>(h.pixel)]);
    ++r.used;
  }
  if (r.used == 0) throw Error(ErrorCode::NoOverlap, "no sampled pixel is both observed and rendered");
  r.value = sum / static_cast<double>(r.used);
  r.excluded_fraction = 1.0 - static_cast<double>(r.used) / static_cast<double>(rendered.rays.size());
  return r;
}

Gradients residual_gradients(const RefineState& state, std::span<const ingest::DepthFrame> frames,
                             const circnet::LocalImplicitField& field, const render::OctreeIndex& octree,
                             const RefineConfig& config) {
  if (state.twists.size() != frames.size()) {
    throw Error(ErrorCode::ShapeMismatch, "one twist per frame");
  }
  std::vector<render::RenderResult> renders;
  std::size_t used = 0, sampled = 0;
  double sum = 0.0;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto pixels = sample_pixels(
        frames[t], config.rays_per_frame,
        mix(mix(config.seed, static_cast<std::uint64_t>(state.iteration)), t));
    renders.push_back(render::render_depth(field, octree, frames[t].intrinsics, state.pose(frames[t], t),
                                           &pixels, config.trace));
    for (const auto& h : renders.back().rays) {
      ++sampled;
      if (!usable(frames[t], h)) continue;
      const auto p = static_cast<std::size_t>(h.pixel);
      sum += std::abs(renders.back().depth.depth[p] - frames[t].depth[p]);
      ++used;
    }
  }
  if (used == 0) throw Error(ErrorCode::NoOverlap, "no sampled pixel is both observed and rendered");

  Gradients g;
  g.residual.value = sum / static_cast<double>(used);
  g.residual.used = used;
  g.residual.excluded_fraction = 1.0 - static_cast<double>(used) / static_cast<double>(sampled);
  g.latents = RowMatrix::Zero(field.grid().latents.rows(), field.grid().latents.cols());
  const double n = static_cast<double>(used);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto& r = renders[t];
    const auto& k = frames[t].intrinsics;
    std::vector<double> dl(r.rays.size(), 0.0);
    for (std::size_t i = 0; i < r.rays.size(); ++i) {
      const auto& h = r.rays[i];
      if (!usable(frames[t], h)) continue;
      const auto p = static_cast<std::size_t>(h.pixel);
      const double ray_scale = geom::camera_ray(k, h.pixel % k.width, h.pixel / k.width).norm();
      dl[i] = sign(r.depth.depth[p] - frames[t].depth[p]) / (n * ray_scale);
    }
    const auto b = render::backward_implicit(field, r.rays, dl, config.trace);
    g.latents += b.latents;
    g.dropped += b.dropped.size();
    geom::Vec6 left = geom::Vec6::Zero();
    for (std::size_t i = 0; i < r.rays.size(); ++i) {
      if (dl[i] == 0.0) continue;
      left += render::ray_twist_gradient(r.rays[i].origin, r.rays[i].direction, b.origin[i], b.direction[i]);
    }
    g.twists.push_back(geom::se3_left_jacobian(state.twists[t]).transpose() * left);
  }
  return g;
}

Residual refine_step(RefineState& state, std::span<const ingest::DepthFrame> frames,
                     circnet::LocalImplicitField& field, const render::OctreeIndex& octree,
                     const RefineConfig& config) {
  const Gradients g = residual_gradients(state, frames, field, octree, config);
  train::adam_step(std::span<double>(state.latents.data(), static_cast<std::size_t>(state.latents.size())),
                   std::span<const double>(g.latents.data(), static_cast<std::size_t>(g.latents.size())),
                   state.latent_moments, train::AdamConfig{config.lr_latent});
  for (std::size_t t = 0; t < frames.size(); ++t) {
    geom::Vec6 x = state.twists[t].vector();
    train::adam_step(std::span<double>(x.data(), 6), std::span<const double>(g.twists[t].data(), 6),
                     state.pose_moments[t], train::AdamConfig{config.lr_pose});
    state.twists[t] = geom::Twist::from_vector(x);
  }
  field.set_latents(state.latents);
  ++state.iteration;
  return g.residual;
}

RefineResult refine(std::span<const ingest::DepthFrame> frames, circnet::LocalImplicitField& field,
                    const render::OctreeIndex& octree, const RefineConfig& config,
                    const std::function<void(int, const Residual&)>& on_step) {
  config.validate();
  RefineState state = RefineState::start(field, frames.size());
  RefineResult out;
  for (int it = 0; it < config.iterations; ++it) {
    out.residuals.push_back(refine_step(state, frames, field, octree, config));
    if (on_step) on_step(it, out.residuals.back());
  }
  out.grid = field.grid();
  for (std::size_t t = 0; t < frames.size(); ++t) out.poses.push_back(state.pose(frames[t], t));
  return out;
}

}  // namespace circle::refine
