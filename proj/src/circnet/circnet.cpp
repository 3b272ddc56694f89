#include "circle/circnet.hpp"

#include <algorithm>
#include <set>
#include <string>

namespace circle::circnet {

using tape::SparseTensor;
using tape::Tape;
using tape::Tensor;
using tape::Var;

void ModelConfig::validate() const {
  if (latent_dim <= 0 || encoder_layers <= 0 || encoder_hidden <= 0 || decoder_layers <= 0 ||
      decoder_hidden <= 0 || unet_channels.empty() || !(voxel_size > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "model sizes must be positive");
  }
  for (int c : unet_channels) {
    if (c <= 0) throw Error(ErrorCode::InvalidArgument, "U-Net channels must be positive");
  }
}

void SparsityPyramid::close_parents() {
  for (std::size_t l = 0; l + 1 < levels.size(); ++l) {
    std::set<Key> parents(levels[l + 1].keys.begin(), levels[l + 1].keys.end());
    for (const auto& k : levels[l].keys) {
      if (parents.insert(k.parent()).second) {
        levels[l + 1].keys.push_back(k.parent());
        levels[l + 1].confidence.push_back(1.0);
      }
    }
    if (levels[l + 1].confidence.size() != levels[l + 1].keys.size()) {
      levels[l + 1].confidence.resize(levels[l + 1].keys.size(), 1.0);
    }
  }
  for (auto& level : levels) {
    std::vector<std::size_t> order(level.keys.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return level.keys[a] < level.keys[b]; });
    Level sorted;
    for (std::size_t i : order) {
      sorted.keys.push_back(level.keys[i]);
      sorted.confidence.push_back(i < level.confidence.size() ? level.confidence[i] : 1.0);
    }
    level = std::move(sorted);
  }
}

SparsityPyramid SparsityPyramid::from_finest(std::vector<Key> finest, int levels) {
  if (levels < 1) throw Error(ErrorCode::InvalidArgument, "pyramid needs at least one level");
  SparsityPyramid p;
  p.levels.resize(levels);
  std::sort(finest.begin(), finest.end());
  finest.erase(std::unique(finest.begin(), finest.end()), finest.end());
  p.levels[0].keys = std::move(finest);
  for (int l = 1; l < levels; ++l) {
    std::vector<Key> up;
    up.reserve(p.levels[l - 1].keys.size());
    for (const auto& k : p.levels[l - 1].keys) up.push_back(k.parent());
    std::sort(up.begin(), up.end());
    up.erase(std::unique(up.begin(), up.end()), up.end());
    p.levels[l].keys = std::move(up);
  }
  for (auto& level : p.levels) level.confidence.assign(level.keys.size(), 1.0);
  return p;
}

CornerLayout CornerLayout::build(const tape::KeyIndex& voxels) {
  CornerLayout layout;
  std::vector<Key> all;
  all.reserve(voxels.size() * 8);
  for (const auto& k : voxels.keys()) {
    for (int s = 0; s < 8; ++s) all.push_back(k + corner_offset(s));
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  const tape::KeyIndex corner_index(all);
  layout.corners = std::move(all);

  auto rules = std::make_shared<tape::Rulebook>();
  rules->out_rows = layout.corners.size();
  rules->taps.resize(8);
  layout.voxel_corners.resize(voxels.size() * 8);
  for (std::size_t m = 0; m < voxels.size(); ++m) {
    for (int s = 0; s < 8; ++s) {
      const int c = corner_index.find(voxels.keys()[m] + corner_offset(s));
      layout.voxel_corners[m * 8 + s] = c;
      rules->taps[s].emplace_back(static_cast<int>(m), c);
    }
  }
  layout.rules = std::move(rules);
  return layout;
}

std::array<double, 8> trilinear_weights(const Vec3& x) {
  std::array<double, 8> w{};
  for (int s = 0; s < 8; ++s) {
    double v = 1.0;
    for (int a = 0; a < 3; ++a) v *= ((s >> a) & 1) ? x[a] : 1.0 - x[a];
    w[s] = v;
  }
  return w;
}

Eigen::Matrix<double, 8, 3> trilinear_weight_gradients(const Vec3& x) {
  Eigen::Matrix<double, 8, 3> g;
  for (int s = 0; s < 8; ++s) {
    for (int a = 0; a < 3; ++a) {
      double v = ((s >> a) & 1) ? 1.0 : -1.0;
      for (int b = 0; b < 3; ++b) {
        if (b != a) v *= ((s >> b) & 1) ? x[b] : 1.0 - x[b];
      }
      g(s, a) = v;
    }
  }
  return g;
}

CircNet::CircNet(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const double a = config_.slope;
  const auto u = [](int v) { return static_cast<std::size_t>(v); };
  const int L = config_.latent_dim;

  int in = 6;
  for (int i = 0; i < config_.encoder_layers; ++i) {
    const int out = i + 1 == config_.encoder_layers ? L : config_.encoder_hidden;
    params_.add_kaiming("enc.w" + std::to_string(i), {u(in), u(out)}, u(in), a, rng);
    params_.add("enc.b" + std::to_string(i), {1, u(out)});
    in = out;
  }

  const auto& ch = config_.unet_channels;
  auto add_norm = [&](const std::string& name, int c) {
    params_.add(name + ".gamma", {1, u(c)}).value.fill(1.0);
    params_.add(name + ".beta", {1, u(c)});
  };
  for (int l = 0; l < config_.levels(); ++l) {
    if (l > 0) {
      const std::string d = "unet.down" + std::to_string(l);
      params_.add_kaiming(d, {8, u(ch[l - 1]), u(ch[l])}, u(8 * ch[l - 1]), a, rng);
      add_norm(d, ch[l]);
    }
    const std::string e = "unet.enc" + std::to_string(l);
    const int cin = l == 0 ? L : ch[l];
    params_.add_kaiming(e, {27, u(cin), u(ch[l])}, u(27 * cin), a, rng);
    add_norm(e, ch[l]);
  }
  for (int l = config_.levels() - 2; l >= 0; --l) {
    const std::string up = "unet.up" + std::to_string(l);
    params_.add_kaiming(up, {8, u(ch[l + 1]), u(ch[l])}, u(ch[l + 1]), a, rng);
    add_norm(up, ch[l]);
    const std::string head = "unet.head" + std::to_string(l);
    params_.add_kaiming(head + ".w", {u(ch[l]), 1}, u(ch[l]), 1.0, rng);
    params_.add(head + ".b", {1, 1});
    const std::string dec = "unet.dec" + std::to_string(l);
    params_.add_kaiming(dec, {27, u(ch[l]), u(ch[l])}, u(27 * ch[l]), a, rng);
    add_norm(dec, ch[l]);
  }
  params_.add_kaiming("unet.out.w", {u(ch[0]), u(L)}, u(ch[0]), 1.0, rng);
  params_.add("unet.out.b", {1, u(L)});

  params_.add_kaiming("corner.w", {8, u(L), u(L)}, u(8 * L), 1.0, rng);

  in = 3 + L;
  for (int i = 0; i < config_.decoder_layers; ++i) {
    const int out = i + 1 == config_.decoder_layers ? 1 : config_.decoder_hidden;
    params_.add_kaiming("dec.w" + std::to_string(i), {u(in), u(out)}, u(in), a, rng);
    params_.add("dec.b" + std::to_string(i), {1, u(out)});
    in = out;
  }
}

Var CircNet::param(Tape& t, const std::string& name) { return t.parameter(params_.get(name)); }

Var CircNet::norm_act(Tape& t, const Var& x, const std::string& name) {
  return tape::leaky_relu(
      tape::instance_norm(x, param(t, name + ".gamma"), param(t, name + ".beta")), config_.slope);
}

SparseTensor CircNet::conv_block(Tape& t, const SparseTensor& x, const std::string& name) {
  SparseTensor y = tape::sparse_conv(x, param(t, name));
  y.features = norm_act(t, y.features, name);
  return y;
}

SparseTensor CircNet::encode(Tape& t, const ingest::VoxelBinning& bins) {
  if (bins.voxels.empty()) throw Error(ErrorCode::EmptyScene, "no occupied voxels to encode");
  const std::size_t n = bins.point_count();
  Tensor feats = Tensor::matrix(n, 6);
  std::vector<int> segment;
  segment.reserve(n);
  std::vector<Key> keys;
  keys.reserve(bins.voxels.size());
  std::size_t r = 0;
  for (const auto& [key, pts] : bins.voxels) {
    if (pts.empty()) throw Error(ErrorCode::EmptySet, "voxel without points in binning");
    for (const auto& p : pts) {
      for (int a = 0; a < 3; ++a) {
        feats[r * 6 + a] = p.local[a];
        feats[r * 6 + 3 + a] = p.normal[a];
      }
      segment.push_back(static_cast<int>(keys.size()));
      ++r;
    }
    keys.push_back(key);
  }
  Var h = t.constant(std::move(feats));
  for (int i = 0; i < config_.encoder_layers; ++i) {
    h = tape::linear(h, param(t, "enc.w" + std::to_string(i)), param(t, "enc.b" + std::to_string(i)));
    if (i + 1 < config_.encoder_layers) h = tape::leaky_relu(h, config_.slope);
  }
  const std::size_t voxels = keys.size();
  return {tape::make_index(std::move(keys)), 0, tape::segment_mean(h, segment, voxels)};
}

UnetResult CircNet::unet(Tape& t, const SparseTensor& v0, const SparsityPyramid* teacher) {
  const int levels = config_.levels();
  const int top = levels - 1;
  if (teacher && static_cast<int>(teacher->levels.size()) != levels) {
    throw Error(ErrorCode::ShapeMismatch, "teacher pyramid has the wrong number of levels");
  }
  std::vector<SparseTensor> enc(levels);
  enc[0] = conv_block(t, v0, "unet.enc0");
  for (int l = 1; l < levels; ++l) {
    const std::string d = "unet.down" + std::to_string(l);
    SparseTensor down = tape::sparse_down(enc[l - 1], param(t, d));
    down.features = norm_act(t, down.features, d);
    enc[l] = conv_block(t, down, "unet.enc" + std::to_string(l));
  }

  auto gather_skip = [](const SparseTensor& source, const std::vector<Key>& keys) {
    std::vector<int> rows(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) rows[i] = source.index->find(keys[i]);
    return tape::gather_rows(source.features, std::move(rows));
  };

  UnetResult result;
  result.pyramid.levels.resize(levels);
  result.candidates.resize(levels - 1);
  result.confidence.resize(levels - 1);

  SparseTensor h;
  if (teacher) {
    const auto& keys = teacher->levels[top].keys;
    if (keys.empty()) throw Error(ErrorCode::AllPruned, "teacher pyramid is empty");
    h = {tape::make_index(keys), top, gather_skip(enc[top], keys)};
  } else {
    h = enc[top];
  }
  result.pyramid.levels[top].keys = h.keys();
  result.pyramid.levels[top].confidence.assign(h.size(), 1.0);

  for (int l = top - 1; l >= 0; --l) {
    const std::string up = "unet.up" + std::to_string(l);
    auto candidates = tape::children_index(*h.index);
    SparseTensor u = tape::sparse_up(h, param(t, up), candidates);
    u.features = norm_act(t, u.features, up);
    const std::string head = "unet.head" + std::to_string(l);
    const Var conf = tape::sigmoid(
        tape::linear(u.features, param(t, head + ".w"), param(t, head + ".b")));

    std::vector<int> kept;
    if (teacher) {
      const tape::KeyIndex gt(teacher->levels[l].keys);
      for (std::size_t i = 0; i < candidates->size(); ++i) {
        if (gt.contains(candidates->keys()[i])) kept.push_back(static_cast<int>(i));
      }
    } else {
      const Tensor& c = conf.value();
      for (std::size_t i = 0; i < candidates->size(); ++i) {
        if (c[i] >= 0.5) kept.push_back(static_cast<int>(i));
      }
    }
    result.candidates[l] = candidates->keys();
    result.confidence[l] = conf;
    if (kept.empty()) {
      throw Error(ErrorCode::AllPruned, "every voxel pruned at level " + std::to_string(l));
    }

    std::vector<Key> kept_keys;
    auto& level = result.pyramid.levels[l];
    for (int i : kept) {
      kept_keys.push_back(candidates->keys()[i]);
      level.keys.push_back(candidates->keys()[i]);
      level.confidence.push_back(conf.value()[i]);
    }
    const Var survivors = tape::gather_rows(u.features, kept);
    const Var merged = tape::add(survivors, gather_skip(enc[l], kept_keys));
    h = conv_block(t, {tape::make_index(std::move(kept_keys)), l, merged},
                   "unet.dec" + std::to_string(l));
  }
  result.latents = {h.index, 0,
                    tape::linear(h.features, param(t, "unet.out.w"), param(t, "unet.out.b"))};
  return result;
}

Var CircNet::propagate_corners(Tape& t, const Var& latents, const CornerLayout& layout) {
  return tape::rulebook_conv(latents, param(t, "corner.w"), layout.rules);
}

DecodeResult CircNet::decode(Tape& t, const Var& corner_features, const CornerLayout& layout,
                             const QueryBatch& queries, bool with_gradient) {
  const std::size_t n = queries.size();
  std::vector<int> index(n * 8);
  std::vector<double> weights(n * 8);
  std::array<std::vector<double>, 3> dweights;
  for (auto& d : dweights) d.resize(n * 8);
  Tensor local = Tensor::matrix(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& x = queries.local[i];
    const auto w = trilinear_weights(x);
    const auto dw = trilinear_weight_gradients(x);
    for (int s = 0; s < 8; ++s) {
      index[i * 8 + s] = layout.voxel_corners[static_cast<std::size_t>(queries.voxel_rows[i]) * 8 + s];
      weights[i * 8 + s] = w[s];
      for (int a = 0; a < 3; ++a) dweights[a][i * 8 + s] = dw(s, a);
    }
    for (int a = 0; a < 3; ++a) local[i * 3 + a] = x[a];
  }

  const Var lhat = tape::weighted_gather(corner_features, index, weights, 8);
  std::array<Var, 2> parts{t.constant(std::move(local)), lhat};
  Var h = tape::concat_cols(parts);
  std::vector<Var> weights_vars, pre;
  for (int i = 0; i < config_.decoder_layers; ++i) {
    const Var w = param(t, "dec.w" + std::to_string(i));
    weights_vars.push_back(w);
    const Var z = tape::linear(h, w, param(t, "dec.b" + std::to_string(i)));
    pre.push_back(z);
    h = i + 1 < config_.decoder_layers ? tape::leaky_relu(z, config_.slope) : z;
  }
  DecodeResult out;
  out.sdf = tape::clamp(h, -1.0, 1.0);
  if (!with_gradient) return out;

  const double unit = config_.truncation() / config_.voxel_size;
  std::array<Var, 3> columns;
  for (int a = 0; a < 3; ++a) {
    Tensor seed = Tensor::matrix(n, 3);
    for (std::size_t i = 0; i < n; ++i) seed[i * 3 + a] = 1.0;
    std::array<Var, 2> tparts{t.constant(std::move(seed)),
                              tape::weighted_gather(corner_features, index, dweights[a], 8)};
    Var tangent = tape::concat_cols(tparts);
    for (int i = 0; i < config_.decoder_layers; ++i) {
      tangent = tape::matmul(tangent, weights_vars[i]);
      const Tensor mask = i + 1 < config_.decoder_layers
                              ? tape::leaky_relu_mask(pre[i].value(), config_.slope)
                              : tape::clamp_mask(pre[i].value(), -1.0, 1.0);
      tangent = tape::mul_const(tangent, mask);
    }
    columns[a] = unit == 1.0 ? tangent : tape::scale(tangent, unit);
  }
  out.gradient = tape::concat_cols(columns);
  return out;
}

SparseFeatureGrid CircNet::infer(const ingest::VoxelBinning& bins, SparsityPyramid* pyramid) {
  Tape t;
  const SparseTensor v0 = encode(t, bins);
  UnetResult r = unet(t, v0, nullptr);
  SparseFeatureGrid grid;
  grid.voxel_size = config_.voxel_size;
  grid.keys = r.latents.keys();
  grid.latents = r.latents.features.value().mat();
  if (pyramid) *pyramid = std::move(r.pyramid);
  return grid;
}

}  // namespace circle::circnet
