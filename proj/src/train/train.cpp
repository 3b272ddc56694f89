#include "circle/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace circle::train {

using tape::Tape;
using tape::Tensor;
using tape::Var;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  h ^= h >> 31;
  h *= 0xBF58476D1CE4E5B9ull;
  h ^= h >> 29;
  return h;
}

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha >= 0.0 && beta >= 0.0 && delta >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "loss weights must be non-negative");
  }
  if (!(learning_rate > 0.0) || !(final_lr_scale > 0.0 && final_lr_scale <= 1.0) || uniform_per_voxel <= 0 || band_per_voxel < 0 ||
      !(band_half_width >= 0.0) || iterations < 0 || !(patch_size > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "invalid training configuration");
  }
}

SupervisionBatch sample_supervision(const scene::GtScene& gt, const tape::KeyIndex& occupied,
                                    double voxel_size, int n_u, std::size_t n_n,
                                    double band_half_width, std::uint64_t seed) {
  if (n_u <= 0) throw Error(ErrorCode::InvalidArgument, "uniform sample count must be positive");
  SupervisionBatch batch;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto push = [&](const Vec3& p, int row, const Key& k) {
    batch.points.push_back(p);
    batch.queries.voxel_rows.push_back(row);
    batch.queries.local.push_back(local_coords(p, k, voxel_size));
    batch.sdf.push_back(gt.sdf(p));
  };

  const std::size_t total_u = occupied.size() * static_cast<std::size_t>(n_u);
  batch.points.reserve(total_u + n_n);
  for (std::size_t m = 0; m < occupied.size(); ++m) {
    const Key& k = occupied.keys()[m];
    const Vec3 origin = voxel_origin(k, voxel_size);
    for (int i = 0; i < n_u; ++i) {
      const Vec3 p = origin + voxel_size * Vec3(unit(rng), unit(rng), unit(rng));
      push(p, static_cast<int>(m), k);
      batch.queries.local.back() = batch.queries.local.back().cwiseMax(0.0).cwiseMin(1.0);
    }
  }
  if (n_n == 0 || occupied.empty()) return batch;

  std::uniform_real_distribution<double> eta(-band_half_width, band_half_width);
  std::size_t attempts = 0;
  while (batch.band_rows.size() < n_n) {
    const auto surface = gt.sample_surface(2 * (n_n - batch.band_rows.size()) + 16, rng());
    for (const Vec3& s : surface) {
      if (batch.band_rows.size() >= n_n) break;
      const Vec3 n = gt.normal(s);
      const Vec3 q = s + eta(rng) * n;
      const Key k = voxel_key(q, voxel_size);
      const int row = occupied.find(k);
      if (row < 0) continue;
      batch.band_rows.push_back(static_cast<int>(batch.points.size()));
      batch.band_normals.push_back(n);
      push(q, row, k);
    }
    if (++attempts > 64) throw Error(ErrorCode::EmptySet, "surface misses the occupied voxels");
  }
  return batch;
}

circnet::SparsityPyramid gt_sparsity_pyramid(const scene::GtScene& gt, double voxel_size, int levels) {
  if (levels < 1) throw Error(ErrorCode::InvalidArgument, "pyramid needs at least one level");
  const Key lo = voxel_key(gt.lo(), voxel_size);
  const Key hi = voxel_key(gt.hi(), voxel_size);
  const double reach = voxel_size * std::sqrt(3.0) / 2.0;
  std::vector<Key> finest;
  const int nx = hi.x - lo.x + 1;
  const int ny = hi.y - lo.y + 1;
  // Corner values shared between neighbouring voxels.
  std::vector<double> corner(static_cast<std::size_t>(nx + 1) * (ny + 1) * 2);
  auto fill_layer = [&](int z, int slot) {
    for (int y = 0; y <= ny; ++y) {
      for (int x = 0; x <= nx; ++x) {
        const Vec3 p = voxel_origin({lo.x + x, lo.y + y, z}, voxel_size);
        corner[(static_cast<std::size_t>(slot) * (ny + 1) + y) * (nx + 1) + x] = gt.sdf(p);
      }
    }
  };
  fill_layer(lo.z, 0);
  for (int z = lo.z; z <= hi.z; ++z) {
    const int below = (z - lo.z) & 1;
    fill_layer(z + 1, below ^ 1);
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        const Key k{lo.x + x, lo.y + y, z};
        const double c = gt.sdf(voxel_origin(k, voxel_size) + Vec3::Constant(voxel_size / 2));
        if (!(std::abs(c) <= reach)) continue;
        double mn = c, mx = c;
        for (int s = 0; s < 8; ++s) {
          const int slot = (s >> 2) ? below ^ 1 : below;
          const double v =
              corner[(static_cast<std::size_t>(slot) * (ny + 1) + y + ((s >> 1) & 1)) * (nx + 1) + x +
                     (s & 1)];
          mn = std::min(mn, v);
          mx = std::max(mx, v);
        }
        if (mn <= 0.0 && mx >= 0.0) finest.push_back(k);
      }
    }
  }
  return circnet::SparsityPyramid::from_finest(std::move(finest), levels);
}

Var loss_sdf(const Var& pred, std::span<const double> gt_world, double truncation) {
  if (pred.value().size() != gt_world.size()) {
    throw Error(ErrorCode::ShapeMismatch, "one gt value per prediction");
  }
  Tensor target = Tensor::matrix(gt_world.size(), 1);
  for (std::size_t i = 0; i < gt_world.size(); ++i) {
    target[i] = -std::clamp(gt_world[i] / truncation, -1.0, 1.0);
  }
  return tape::mean(tape::abs(tape::add_const(pred, target)));
}

Var loss_norm(const Var& gradient, std::span<const int> band_rows, std::span<const Vec3> band_normals) {
  if (gradient.value().cols() != 3 || band_rows.size() != band_normals.size()) {
    throw Error(ErrorCode::ShapeMismatch, "gradients are rows x 3 with one normal per band row");
  }
  Tape& t = *gradient.tape();
  const std::size_t n = gradient.value().rows();
  const Var eik = tape::mean(tape::abs(tape::add_const(tape::row_norm(gradient), Tensor::matrix(n, 1, -1.0))));
  if (band_rows.empty()) return eik;
  Tensor normals = Tensor::matrix(band_normals.size(), 3);
  for (std::size_t i = 0; i < band_normals.size(); ++i) {
    for (int a = 0; a < 3; ++a) normals[i * 3 + a] = band_normals[i][a];
  }
  const Var g = tape::gather_rows(gradient, std::vector<int>(band_rows.begin(), band_rows.end()));
  const Var cosine = tape::mean(tape::row_dot(g, t.constant(std::move(normals))));
  return tape::add_const(tape::sub(eik, cosine), Tensor::scalar(1.0));
}

Var loss_struct(std::span<const Var> confidence, const std::vector<std::vector<double>>& labels) {
  if (confidence.size() != labels.size() || confidence.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "one label list per confidence level");
  }
  std::size_t count = 0;
  std::vector<Var> parts;
  for (std::size_t l = 0; l < confidence.size(); ++l) {
    if (labels[l].empty()) continue;
    count += labels[l].size();
    parts.push_back(tape::bce_sum(confidence[l], labels[l]));
  }
  if (count == 0) throw Error(ErrorCode::EmptySet, "no candidate sites");
  const Var total = parts.size() == 1 ? parts[0] : tape::sum(tape::concat_rows(parts));
  return tape::scale(total, 1.0 / static_cast<double>(count));
}

Var latent_reg(const Var& latents) { return tape::sum(tape::row_norm(latents)); }

Var total_loss(const LossVars& terms, const TrainConfig& config) {
  Var total = terms.sdf;
  if (terms.norm.valid()) total = tape::add(total, tape::scale(terms.norm, config.alpha));
  if (terms.structure.valid()) total = tape::add(total, tape::scale(terms.structure, config.beta));
  if (terms.reg.valid()) total = tape::add(total, tape::scale(terms.reg, config.delta));
  return total;
}

std::vector<std::vector<double>> struct_labels(const std::vector<std::vector<Key>>& candidates,
                                               const circnet::SparsityPyramid& gt) {
  std::vector<std::vector<double>> labels(candidates.size());
  for (std::size_t l = 0; l < candidates.size(); ++l) {
    const auto& keys = gt.levels.at(l).keys;
    for (const auto& k : candidates[l]) {
      labels[l].push_back(std::binary_search(keys.begin(), keys.end(), k) ? 1.0 : 0.0);
    }
  }
  return labels;
}

void adam_step(std::span<double> x, std::span<const double> g, AdamState& state,
               const AdamConfig& config) {
  if (x.size() != g.size()) throw Error(ErrorCode::ShapeMismatch, "adam: gradient size");
  if (state.m.size() != x.size()) {
    state.m.assign(x.size(), 0.0);
    state.v.assign(x.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < x.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g[i] * g[i];
    x[i] -= config.learning_rate * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + config.epsilon);
  }
}

void Adam::step(tape::ParameterStore& params) {
  auto& all = params.all();
  states_.resize(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& p = *all[i];
    if (p.grad.size() != p.value.size()) continue;
    adam_step(p.value.values(), p.grad.values(), states_[i], config_);
  }
}

TrainingScene make_training_scene(const scene::GtScene& gt, std::span<const ingest::DepthFrame> frames,
                                  const circnet::ModelConfig& model) {
  TrainingScene s;
  s.gt = gt;
  s.bins = ingest::bin_points(ingest::accumulate(frames), model.voxel_size);
  s.pyramid = gt_sparsity_pyramid(gt, model.voxel_size, model.levels());
  return s;
}

std::vector<TrainingScene> split_patches(const TrainingScene& scene, double patch_size, int levels) {
  const auto per_patch = static_cast<std::int32_t>(std::lround(patch_size / scene.bins.voxel_size));
  if (per_patch <= 0) throw Error(ErrorCode::InvalidArgument, "patch smaller than a voxel");
  auto patch_of = [&](const Key& k) {
    return Key{floor_div(k.x, per_patch), floor_div(k.y, per_patch), floor_div(k.z, per_patch)};
  };
  std::map<Key, ingest::VoxelBinning> bins;
  for (const auto& [k, pts] : scene.bins.voxels) {
    auto& b = bins[patch_of(k)];
    b.voxel_size = scene.bins.voxel_size;
    b.voxels[k] = pts;
  }
  std::map<Key, std::vector<Key>> finest;
  for (const auto& k : scene.pyramid.levels.at(0).keys) finest[patch_of(k)].push_back(k);
  std::vector<TrainingScene> out;
  for (auto& [p, b] : bins) {
    auto it = finest.find(p);
    if (it == finest.end()) continue;
    TrainingScene s;
    s.gt = scene.gt;
    s.bins = std::move(b);
    s.pyramid = circnet::SparsityPyramid::from_finest(std::move(it->second), levels);
    out.push_back(std::move(s));
  }
  return out;
}

Trainer::Trainer(circnet::CircNet& net, TrainConfig config)
    : net_(net), config_(config), adam_(AdamConfig{config.learning_rate}) {
  config_.validate();
}

LossValues Trainer::evaluate(const TrainingScene& scene, std::uint64_t iteration, bool backward) {
  Tape t;
  const auto v0 = net_.encode(t, scene.bins);
  const auto r = net_.unet(t, v0, &scene.pyramid);
  if (!cached_index_ || cached_scene_ != &scene || cached_index_->keys() != r.latents.keys()) {
    cached_scene_ = &scene;
    cached_index_ = r.latents.index;
    cached_layout_ = circnet::CornerLayout::build(*cached_index_);
  }
  const double b = net_.config().voxel_size;
  const auto batch = sample_supervision(
      scene.gt, *cached_index_, b, config_.uniform_per_voxel,
      static_cast<std::size_t>(config_.band_per_voxel) * cached_index_->size(),
      config_.band_half_width, mix(config_.seed, iteration));

  const Var corners = net_.propagate_corners(t, r.latents.features, cached_layout_);
  const auto dec = net_.decode(t, corners, cached_layout_, batch.queries, true);
  LossVars terms;
  terms.sdf = loss_sdf(dec.sdf, batch.sdf, net_.config().truncation());
  terms.norm = loss_norm(dec.gradient, batch.band_rows, batch.band_normals);
  terms.structure = loss_struct(r.confidence, struct_labels(r.candidates, scene.pyramid));
  terms.reg = latent_reg(r.latents.features);
  const Var total = total_loss(terms, config_);

  if (backward) {
    net_.params().zero_grad();
    t.backward(total);
  }
  return {terms.sdf.value()[0], terms.norm.value()[0], terms.structure.value()[0],
          terms.reg.value()[0], total.value()[0]};
}

LossValues Trainer::step(const TrainingScene& scene, std::uint64_t iteration) {
  const LossValues v = evaluate(scene, iteration, true);
  adam_.step(net_.params());
  return v;
}

void Trainer::fit(std::span<const TrainingScene> scenes,
                  const std::function<void(int, const LossValues&)>& on_step) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyScene, "no training scenes");
  const double s = config_.final_lr_scale;
  for (int it = 0; it < config_.iterations; ++it) {
    const double phase = std::numbers::pi * it / std::max(config_.iterations - 1, 1);
    adam_.set_learning_rate(config_.learning_rate * (s + (1.0 - s) * 0.5 * (1.0 + std::cos(phase))));
    const LossValues v = step(scenes[static_cast<std::size_t>(it) % scenes.size()],
                              static_cast<std::uint64_t>(it));
    if (on_step) on_step(it, v);
  }
}

circnet::SparseFeatureGrid teacher_grid(circnet::CircNet& net, const TrainingScene& scene) {
  Tape t;
  const auto r = net.unet(t, net.encode(t, scene.bins), &scene.pyramid);
  circnet::SparseFeatureGrid grid;
  grid.voxel_size = net.config().voxel_size;
  grid.keys = r.latents.keys();
  grid.latents = r.latents.features.value().mat();
  return grid;
}

double sparsity_accuracy(circnet::CircNet& net, const TrainingScene& scene) {
  const auto& gt = scene.pyramid.levels.at(0).keys;
  std::vector<Key> kept, candidates;
  try {
    Tape t;
    const auto r = net.unet(t, net.encode(t, scene.bins), nullptr);
    kept = r.pyramid.levels[0].keys;
    candidates = r.candidates[0];
  } catch (const Error& e) {
    if (e.code() != ErrorCode::AllPruned) throw;
  }
  std::sort(kept.begin(), kept.end());
  std::vector<Key> sites = candidates;
  sites.insert(sites.end(), gt.begin(), gt.end());
  std::sort(sites.begin(), sites.end());
  sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
  if (sites.empty()) return 1.0;
  std::size_t correct = 0;
  for (const auto& k : sites) {
    correct += std::binary_search(kept.begin(), kept.end(), k) ==
               std::binary_search(gt.begin(), gt.end(), k);
  }
  return static_cast<double>(correct) / static_cast<double>(sites.size());
}

std::pair<double, std::size_t> eikonal_residual(const circnet::LocalImplicitField& field,
                                                std::span<const Vec3> points) {
  double total = 0.0;
  std::size_t used = 0;
  for (const Vec3& p : points) {
    const Key k = voxel_key(p, field.voxel_size());
    if (!field.index().contains(k)) continue;
    total += std::abs(field.sample(k, p).gradient.norm() - 1.0);
    ++used;
  }
  if (used == 0) throw Error(ErrorCode::EmptySet, "no point inside the active set");
  return {total / static_cast<double>(used), used};
}

}  // namespace circle::train
