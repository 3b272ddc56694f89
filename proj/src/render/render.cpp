#include "circle/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace circle::render {

namespace {

double plane(std::int32_t k, int level, double voxel_size) {
  return static_cast<double>(static_cast<std::int64_t>(k) * (std::int64_t{1} << level)) * voxel_size;
}

bool admissible(const Interval& i, double t_max) { return i.exit > 0.0 && std::max(i.enter, 0.0) < t_max; }

/// Sums per-chunk gradient buffers in chunk order so the result does not
/// depend on the worker count.
RowMatrix chunked_sum(std::size_t n, Eigen::Index rows, Eigen::Index cols,
                      const std::function<void(std::size_t, RowMatrix&)>& fn) {
  constexpr std::size_t chunk = 256;
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<RowMatrix> parts(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    parts[c] = RowMatrix::Zero(rows, cols);
    const std::size_t end = std::min(n, (c + 1) * chunk);
    for (std::size_t i = c * chunk; i < end; ++i) fn(i, parts[c]);
  });
  RowMatrix total = RowMatrix::Zero(rows, cols);
  for (const auto& p : parts) total += p;
  return total;
}

double field_or_empty(const SdfField& field, const OctreeIndex& octree, const Vec3& p) {
  const Key k = voxel_key(p, octree.voxel_size());
  return octree.contains(0, k) ? field.sdf(k, p) : 1.0;
}

}  // namespace

OctreeIndex::OctreeIndex(std::vector<Key> finest, int levels, double voxel_size)
    : OctreeIndex([&] {
        if (levels < 1) throw Error(ErrorCode::InvalidArgument, "octree needs at least one level");
        std::vector<std::vector<Key>> l(static_cast<std::size_t>(levels));
        l[0] = std::move(finest);
        return l;
      }(),
                  voxel_size) {}

OctreeIndex::OctreeIndex(std::vector<std::vector<Key>> levels, double voxel_size)
    : voxel_size_(voxel_size) {
  if (!(voxel_size > 0.0)) throw Error(ErrorCode::InvalidArgument, "voxel size must be positive");
  if (levels.empty()) throw Error(ErrorCode::InvalidArgument, "octree needs at least one level");
  sets_.resize(levels.size());
  for (std::size_t k = 0; k < levels.size(); ++k) {
    sets_[k].insert(levels[k].begin(), levels[k].end());
    if (k + 1 < levels.size()) {
      for (const Key& key : sets_[k]) levels[k + 1].push_back(key.parent());
    }
  }
  for (std::size_t k = 0; k < levels.size(); ++k) {
    sets_[k].insert(levels[k].begin(), levels[k].end());
    levels_.emplace_back(sets_[k].begin(), sets_[k].end());
    std::sort(levels_.back().begin(), levels_.back().end());
  }
}

OctreeIndex OctreeIndex::from_pyramid(const circnet::SparsityPyramid& pyramid, double voxel_size) {
  std::vector<std::vector<Key>> levels;
  for (const auto& l : pyramid.levels) levels.push_back(l.keys);
  if (levels.empty()) levels.emplace_back();
  return OctreeIndex(std::move(levels), voxel_size);
}

bool OctreeIndex::contains(int level, const Key& key) const {
  if (level < 0 || level >= level_count()) return false;
  return sets_[static_cast<std::size_t>(level)].count(key) > 0;
}

std::optional<std::pair<Vec3, Vec3>> OctreeIndex::bounds() const {
  if (empty()) return std::nullopt;
  const int top = level_count() - 1;
  const auto& keys = levels_.back();
  Key lo = keys.front(), hi = keys.front();
  for (const Key& k : keys) {
    lo = {std::min(lo.x, k.x), std::min(lo.y, k.y), std::min(lo.z, k.z)};
    hi = {std::max(hi.x, k.x), std::max(hi.y, k.y), std::max(hi.z, k.z)};
  }
  return std::make_pair(
      Vec3(plane(lo.x, top, voxel_size_), plane(lo.y, top, voxel_size_), plane(lo.z, top, voxel_size_)),
      Vec3(plane(hi.x + 1, top, voxel_size_), plane(hi.y + 1, top, voxel_size_),
           plane(hi.z + 1, top, voxel_size_)));
}

std::optional<Interval> slab_interval(const Key& key, int level, double voxel_size, const Vec3& o,
                                      const Vec3& d) {
  const std::int32_t k[3] = {key.x, key.y, key.z};
  double enter = -std::numeric_limits<double>::infinity();
  double exit = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double lo = plane(k[a], level, voxel_size);
    const double hi = plane(k[a] + 1, level, voxel_size);
    if (d[a] == 0.0) {
      if (!(o[a] >= lo && o[a] < hi)) return std::nullopt;
      continue;
    }
    double t0 = (lo - o[a]) / d[a];
    double t1 = (hi - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    enter = std::max(enter, t0);
    exit = std::min(exit, t1);
  }
  if (!(enter < exit)) return std::nullopt;
  return Interval{enter, exit};
}

std::vector<Intersection> intersect_ray(const OctreeIndex& octree, const Vec3& o, const Vec3& d,
                                        double t_max) {
  std::vector<Intersection> out;
  if (octree.empty()) return out;
  const double b = octree.voxel_size();
  struct Node {
    Key key;
    int level;
  };
  std::vector<Node> stack;
  const int top = octree.level_count() - 1;
  for (const Key& k : octree.level(top)) stack.push_back({k, top});
  while (!stack.empty()) {
    const Node n = stack.back();
    stack.pop_back();
    const auto i = slab_interval(n.key, n.level, b, o, d);
    if (!i || !admissible(*i, t_max)) continue;
    if (n.level == 0) {
      out.push_back({std::max(i->enter, 0.0), i->exit, n.key});
      continue;
    }
    for (int s = 0; s < 8; ++s) {
      const Key c = n.key.child(s);
      if (octree.contains(n.level - 1, c)) stack.push_back({c, n.level - 1});
    }
  }
  std::sort(out.begin(), out.end(), [](const Intersection& a, const Intersection& b) {
    return a.t < b.t || (a.t == b.t && a.key < b.key);
  });
  return out;
}

void TraceConfig::validate() const {
  if (!(safety > 0.0) || !(min_step > 0.0) || !(iso > 0.0) || max_steps <= 0 || !(t_max > 0.0) ||
      !(grazing >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "invalid tracing configuration");
  }
}

VoxelTrace sphere_trace_voxel(const SdfField& field, const Key& voxel, const Vec3& o, const Vec3& d,
                              double t_start, const TraceConfig& config, std::vector<double>* path) {
  VoxelTrace out;
  const auto range = slab_interval(voxel, 0, field.voxel_size(), o, d);
  if (!range) return out;
  const double tau = field.truncation();
  double t = t_start;
  for (int i = 0; i < config.max_steps && t < range->exit; ++i) {
    const double s = field.sdf(voxel, o + t * d);
    ++out.evaluations;
    if (path) path->push_back(t);
    if (std::abs(s) < config.iso) {
      out.t = t;
      return out;
    }
    t += std::max(s * tau * config.safety, config.min_step);
  }
  return out;
}

HitRecord trace_ray(const SdfField& field, const OctreeIndex& octree, const Vec3& o, const Vec3& d,
                    const TraceConfig& config) {
  HitRecord h;
  h.origin = o;
  h.direction = d;
  for (const auto& i : intersect_ray(octree, o, d, config.t_max)) {
    const VoxelTrace v = sphere_trace_voxel(field, i.key, o, d, i.t, config);
    h.evaluations += v.evaluations;
    ++h.voxels;
    if (!v.t) continue;
    h.hit = true;
    h.t = *v.t;
    h.voxel = i.key;
    h.point = o + h.t * d;
    h.gradient = field.sample(i.key, h.point).gradient;
    h.gamma = 1.0 / d.dot(h.gradient);
    break;
  }
  return h;
}

double RenderStats::mean_evaluations() const {
  return rays == 0 ? 0.0 : static_cast<double>(evaluations) / static_cast<double>(rays);
}

double RenderStats::mean_retained() const {
  return rays == 0 ? 0.0 : static_cast<double>(retained_states) / static_cast<double>(rays);
}

RenderResult render_depth(const SdfField& field, const OctreeIndex& octree,
                          const geom::Intrinsics& intrinsics, const geom::Pose& pose,
                          const std::vector<int>* pixels, const TraceConfig& config) {
  config.validate();
  intrinsics.validate();
  RenderResult out;
  out.depth = ingest::DepthFrame::blank(intrinsics, pose);
  const int w = intrinsics.width;
  const std::size_t total = static_cast<std::size_t>(w) * intrinsics.height;
  std::vector<int> all;
  if (!pixels) {
    all.resize(total);
    for (std::size_t i = 0; i < total; ++i) all[i] = static_cast<int>(i);
    pixels = &all;
  }
  for (int p : *pixels) {
    if (p < 0 || static_cast<std::size_t>(p) >= total) {
      throw Error(ErrorCode::InvalidArgument, "pixel index outside the image");
    }
  }
  out.rays.resize(pixels->size());
  parallel_for(pixels->size(), [&](std::size_t i) {
    const int p = (*pixels)[i];
    const int u = p % w;
    const int v = p / w;
    const geom::Ray r = geom::ray_from_pixel(intrinsics, pose, u, v);
    HitRecord h = trace_ray(field, octree, r.origin, r.direction, config);
    h.pixel = p;
    if (h.hit) out.depth.depth[static_cast<std::size_t>(p)] = h.t / geom::camera_ray(intrinsics, u, v).norm();
    out.rays[i] = h;
  });
  auto& s = out.stats;
  s.rays = out.rays.size();
  for (const auto& h : out.rays) {
    s.hits += h.hit;
    s.evaluations += static_cast<std::size_t>(h.evaluations);
    s.evaluations_per_ray.push_back(h.evaluations);
    s.retained_per_ray.push_back(h.hit ? 1 : 0);
    s.retained_states += h.hit ? 1 : 0;
  }
  return out;
}

geom::Vec6 ray_twist_gradient(const Vec3& o, const Vec3& d, const Vec3& dt_do, const Vec3& dt_dd) {
  geom::Vec6 g;
  g.head<3>() = dt_do;
  g.tail<3>() = o.cross(dt_do) + d.cross(dt_dd);
  return g;
}

bool is_grazing(const HitRecord& h, const TraceConfig& config) {
  return !(std::abs(h.direction.dot(h.gradient)) >= config.grazing);
}

ImplicitGradients backward_implicit(const circnet::LocalImplicitField& field,
                                    std::span<const HitRecord> hits, std::span<const double> dloss_dt,
                                    const TraceConfig& config) {
  if (hits.size() != dloss_dt.size()) throw Error(ErrorCode::ShapeMismatch, "one loss gradient per ray");
  ImplicitGradients out;
  out.origin.assign(hits.size(), Vec3::Zero());
  out.direction.assign(hits.size(), Vec3::Zero());
  std::vector<char> used(hits.size(), 0);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto& h = hits[i];
    if (!h.hit) continue;
    if (is_grazing(h, config)) {
      out.dropped.push_back(static_cast<int>(i));
      continue;
    }
    used[i] = 1;
    ++out.retained_states;
    out.origin[i] = dloss_dt[i] * dt_dorigin(h);
    out.direction[i] = dloss_dt[i] * dt_ddirection(h);
  }
  out.latents = chunked_sum(hits.size(), static_cast<Eigen::Index>(field.grid().size()),
                            field.latent_dim(), [&](std::size_t i, RowMatrix& g) {
                              if (!used[i] || dloss_dt[i] == 0.0) return;
                              const auto& h = hits[i];
                              field.accumulate_latent_gradient(h.voxel, h.point, -h.gamma * dloss_dt[i], g);
                            });
  return out;
}

AdRender render_depth_ad(const SdfField& field, const OctreeIndex& octree,
                         const geom::Intrinsics& intrinsics, const geom::Pose& pose,
                         const std::vector<int>* pixels, const TraceConfig& config) {
  AdRender out;
  out.render = render_depth(field, octree, intrinsics, pose, pixels, config);
  auto& rays = out.render.rays;
  out.tapes.resize(rays.size());
  parallel_for(rays.size(), [&](std::size_t i) {
    const auto& h = rays[i];
    AdRay& tape = out.tapes[i];
    tape.recorded = h.evaluations;
    if (!h.hit) return;
    const auto range = slab_interval(h.voxel, 0, field.voxel_size(), h.origin, h.direction);
    sphere_trace_voxel(field, h.voxel, h.origin, h.direction, std::max(range->enter, 0.0), config,
                       &tape.steps);
  });
  auto& s = out.render.stats;
  s.retained_states = 0;
  s.retained_per_ray.clear();
  for (const auto& tape : out.tapes) {
    s.retained_per_ray.push_back(tape.recorded);
    s.retained_states += static_cast<std::size_t>(tape.recorded);
  }
  return out;
}

RowMatrix backward_ad(const circnet::LocalImplicitField& field, const AdRender& ad,
                      std::span<const double> dloss_dt, const TraceConfig& config) {
  const auto& rays = ad.render.rays;
  if (rays.size() != dloss_dt.size()) throw Error(ErrorCode::ShapeMismatch, "one loss gradient per ray");
  const double tau = field.truncation();
  return chunked_sum(rays.size(), static_cast<Eigen::Index>(field.grid().size()), field.latent_dim(),
                     [&](std::size_t i, RowMatrix& g) {
                       const auto& h = rays[i];
                       const auto& steps = ad.tapes[i].steps;
                       if (!h.hit || dloss_dt[i] == 0.0 || steps.empty()) return;
                       // t_{j+1} = t_j + max(safety * f(o + t_j d), min_step); t_0 is constant.
                       double adj = dloss_dt[i];
                       for (std::size_t j = steps.size() - 1; j-- > 0;) {
                         const Vec3 p = h.origin + steps[j] * h.direction;
                         const FieldSample fs = field.sample(h.voxel, p);
                         if (fs.sdf * tau * config.safety < config.min_step) continue;
                         field.accumulate_latent_gradient(h.voxel, p, adj * config.safety, g);
                         adj *= 1.0 + config.safety * h.direction.dot(fs.gradient);
                       }
                     });
}

double far_bound(const OctreeIndex& octree, const Vec3& o, const Vec3& d) {
  const auto box = octree.bounds();
  if (!box) return 0.0;
  double enter = -std::numeric_limits<double>::infinity();
  double exit = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (!(o[a] >= box->first[a] && o[a] < box->second[a])) return 0.0;
      continue;
    }
    double t0 = (box->first[a] - o[a]) / d[a];
    double t1 = (box->second[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    enter = std::max(enter, t0);
    exit = std::min(exit, t1);
  }
  return enter < exit && exit > 0.0 ? exit : 0.0;
}

MarchResult uniform_march(const SdfField& field, const OctreeIndex& octree, const Vec3& o,
                          const Vec3& d, double t_max, int samples) {
  if (samples < 1) throw Error(ErrorCode::InvalidArgument, "at least one sample per ray");
  MarchResult out;
  double prev_t = 0.0;
  double prev = 0.0;
  for (int i = 1; i <= samples; ++i) {
    const double t = t_max * i / samples;
    const double s = field_or_empty(field, octree, o + t * d);
    ++out.evaluations;
    if (!out.t && i > 1 && prev > 0.0 && s <= 0.0) out.t = prev_t + (t - prev_t) * prev / (prev - s);
    prev_t = t;
    prev = s;
  }
  return out;
}

MarchResult global_sphere_trace(const SdfField& field, const OctreeIndex& octree, const Vec3& o,
                                const Vec3& d, double t_max, const TraceConfig& config, int max_steps) {
  MarchResult out;
  const double tau = field.truncation();
  double t = 0.0;
  for (int i = 0; i < max_steps && t < t_max; ++i) {
    const double s = field_or_empty(field, octree, o + t * d);
    ++out.evaluations;
    if (std::abs(s) < config.iso) {
      out.t = t;
      break;
    }
    t += std::max(s * tau * config.safety, config.min_step);
  }
  return out;
}

}  // namespace circle::render
