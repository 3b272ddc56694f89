#include "circle/circnet.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

using namespace circle;
using namespace circle::circnet;
using tape::Tape;
using tape::Tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.latent_dim = 8;
  c.encoder_hidden = 8;
  c.unet_channels = {8, 8, 12};
  c.decoder_hidden = 16;
  c.seed = 3;
  return c;
}

ingest::VoxelBinning plane_bins(double z, double extent, double b, std::uint64_t seed,
                                Vec3 shift = Vec3::Zero()) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, extent);
  ingest::OrientedPointCloud cloud;
  for (int i = 0; i < 2000; ++i) {
    cloud.points.push_back(Vec3(u(rng), u(rng), z) + shift);
    cloud.normals.emplace_back(0, 0, 1);
  }
  return ingest::bin_points(cloud, b);
}

SparseFeatureGrid random_grid(const std::vector<Key>& keys, int L, double b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SparseFeatureGrid g;
  g.voxel_size = b;
  g.keys = keys;
  g.latents.resize(static_cast<Eigen::Index>(keys.size()), L);
  for (Eigen::Index i = 0; i < g.latents.size(); ++i) g.latents.data()[i] = u(rng);
  return g;
}

std::vector<Key> block_keys(int nx, int ny, int nz) {
  std::vector<Key> keys;
  for (int x = 0; x < nx; ++x)
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z) keys.push_back({x, y, z});
  return keys;
}

Vec3 random_interior(const Key& k, double b, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  return (Vec3(k.x, k.y, k.z) + Vec3(u(rng), u(rng), u(rng))) * b;
}

}  // namespace

TEST(Encode, SingletonVoxelEqualsPointMlp) {
  CircNet net(small_config());
  ingest::VoxelBinning bins;
  bins.voxel_size = 0.05;
  bins.voxels[{1, 2, 3}] = {{Vec3(0.1, 0.2, 0.3), Vec3(0, 0.6, 0.8)}};
  Tape t;
  const auto v0 = net.encode(t, bins);
  ASSERT_EQ(v0.size(), 1u);

  Eigen::RowVectorXd h(6);
  h << 0.1, 0.2, 0.3, 0, 0.6, 0.8;
  const auto& P = net.params();
  for (int i = 0; i < 4; ++i) {
    const auto& w = P.get("enc.w" + std::to_string(i)).value;
    const auto& b = P.get("enc.b" + std::to_string(i)).value;
    h = h * Eigen::Map<const RowMatrix>(w.data(), w.shape()[0], w.shape()[1]) +
        Eigen::Map<const Eigen::RowVectorXd>(b.data(), b.size());
    if (i < 3) h = h.unaryExpr([](double v) { return v > 0 ? v : 0.01 * v; });
  }
  EXPECT_LT((v0.features.value().mat().row(0) - h).norm(), 1e-12);
}

TEST(Encode, PermutationAndDuplicationInvariant) {
  CircNet net(small_config());
  auto bins = plane_bins(0.12, 0.2, 0.05, 1);
  Tape t;
  const auto base = net.encode(t, bins).features.value();
  auto permuted = bins;
  for (auto& [k, pts] : permuted.voxels) std::reverse(pts.begin(), pts.end());
  auto doubled = bins;
  for (auto& [k, pts] : doubled.voxels) {
    const auto copy = pts;
    pts.insert(pts.end(), copy.begin(), copy.end());
  }
  const auto a = net.encode(t, permuted).features.value();
  const auto b = net.encode(t, doubled).features.value();
  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_NEAR(base[i], a[i], 1e-12);
    EXPECT_NEAR(base[i], b[i], 1e-12);
  }
  EXPECT_THROW(net.encode(t, ingest::VoxelBinning{}), Error);
}

TEST(Unet, TeacherForcingReproducesGtFinest) {
  CircNet net;
  const auto bins = plane_bins(0.12, 0.4, 0.05, 2);
  std::vector<Key> gt;
  for (int x = -1; x < 9; ++x)
    for (int y = 0; y < 8; ++y) gt.push_back({x, y, 2});
  gt.push_back({3, 3, 3});
  const auto teacher = SparsityPyramid::from_finest(gt, net.config().levels());
  Tape t;
  const auto r = net.unet(t, net.encode(t, bins), &teacher);
  EXPECT_EQ(r.latents.keys(), teacher.levels[0].keys);
  for (int l = 0; l < net.config().levels(); ++l) EXPECT_EQ(r.pyramid.levels[l].keys, teacher.levels[l].keys);
  EXPECT_EQ(r.latents.features.value().cols(), 32u);
}

TEST(Unet, CandidatesAreChildrenOfKeptParents) {
  CircNet net;
  const auto bins = plane_bins(0.12, 0.4, 0.05, 3);
  Tape t;
  const auto r = net.unet(t, net.encode(t, bins));
  for (int l = 0; l + 1 < net.config().levels(); ++l) {
    const std::set<Key> parents(r.pyramid.levels[l + 1].keys.begin(), r.pyramid.levels[l + 1].keys.end());
    EXPECT_EQ(r.candidates[l].size(), parents.size() * 8);
    for (const auto& k : r.pyramid.levels[l].keys) EXPECT_TRUE(parents.count(k.parent()));
    for (double c : r.pyramid.levels[l].confidence) {
      EXPECT_GE(c, 0.5);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(Unet, StrongNegativeHeadBiasPrunesEverything) {
  CircNet net(small_config());
  for (int l = 0; l + 1 < net.config().levels(); ++l) {
    net.params().get("unet.head" + std::to_string(l) + ".b").value.fill(-100.0);
  }
  const auto bins = plane_bins(0.12, 0.2, 0.05, 4);
  try {
    net.infer(bins);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AllPruned);
  }
}

TEST(Unet, TranslationEquivariantUnderAlignedShift) {
  // A shift by a multiple of 2^(levels-1) voxels keeps every downsampling
  // cell aligned, so outputs must shift identically.
  CircNet net;
  const double b = 0.05;
  const int shift = 16;
  const auto a = plane_bins(0.12, 0.4, b, 5);
  const auto s = plane_bins(0.12, 0.4, b, 5, Vec3(shift * b, 0, 0));
  SparsityPyramid pa, ps;
  const auto ga = net.infer(a, &pa);
  const auto gs = net.infer(s, &ps);
  ASSERT_EQ(ga.keys.size(), gs.keys.size());
  for (std::size_t i = 0; i < ga.keys.size(); ++i) {
    EXPECT_EQ(ga.keys[i] + (Key{shift, 0, 0}), gs.keys[i]);
  }
  EXPECT_LT((ga.latents - gs.latents).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Pyramid, FromFinestAndClosure) {
  const auto p = SparsityPyramid::from_finest({{5, 5, 5}}, 5);
  for (int l = 0; l < 5; ++l) ASSERT_EQ(p.levels[l].keys.size(), 1u);
  EXPECT_EQ(p.levels[4].keys[0], (Key{0, 0, 0}));
  std::vector<Key> sib;
  for (int s = 0; s < 8; ++s) sib.push_back(Key{2, 2, 2}.child(s));
  EXPECT_EQ(SparsityPyramid::from_finest(sib, 2).levels[1].keys.size(), 1u);
  SparsityPyramid q;
  q.levels.resize(3);
  q.levels[0].keys = {{9, 0, 0}, {0, 0, 0}};
  q.levels[0].confidence = {0.7, 0.9};
  q.close_parents();
  EXPECT_EQ(q.levels[1].keys.size(), 2u);
  EXPECT_EQ(q.levels[2].keys.size(), 2u);
  EXPECT_EQ(q.levels[0].keys[0], (Key{0, 0, 0}));
  EXPECT_EQ(q.levels[0].confidence[0], 0.9);
}

TEST(Corners, SingleIncidentVoxelUsesItsTap) {
  CircNet net(small_config());
  const auto grid = random_grid({{0, 0, 0}}, 8, 0.05, 1);
  const LocalImplicitField f(net, grid);
  const auto& W = net.params().get("corner.w").value;
  for (int s = 0; s < 8; ++s) {
    const int c = f.layout().voxel_corners[s];
    const Eigen::RowVectorXd expected =
        grid.latents.row(0) * Eigen::Map<const RowMatrix>(W.data() + s * 64, 8, 8);
    EXPECT_LT((f.corner_features().row(c) - expected).norm(), 1e-13);
  }
}

TEST(Corners, IdenticalLatentsGiveTapSum) {
  CircNet net(small_config());
  auto grid = random_grid(block_keys(2, 2, 2), 8, 0.05, 2);
  for (Eigen::Index r = 1; r < 8; ++r) grid.latents.row(r) = grid.latents.row(0);
  const LocalImplicitField f(net, grid);
  const auto& W = net.params().get("corner.w").value;
  RowMatrix S = RowMatrix::Zero(8, 8);
  for (int s = 0; s < 8; ++s) S += Eigen::Map<const RowMatrix>(W.data() + s * 64, 8, 8);
  const tape::KeyIndex corners(f.layout().corners);
  const int center = corners.find({1, 1, 1});
  ASSERT_GE(center, 0);
  EXPECT_LT((f.corner_features().row(center) - grid.latents.row(0) * S).norm(), 1e-12);
}

TEST(Corners, MatchDenseMaskedConvolution) {
  CircNet net(small_config());
  const std::vector<Key> keys = {{0, 0, 0}, {1, 0, 0}, {1, 1, 1}};
  const auto grid = random_grid(keys, 8, 0.05, 3);
  const LocalImplicitField f(net, grid);
  const auto& W = net.params().get("corner.w").value;
  // Dense oracle over a 4^3 lattice of corner positions.
  for (int cx = 0; cx < 4; ++cx)
    for (int cy = 0; cy < 4; ++cy)
      for (int cz = 0; cz < 4; ++cz) {
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(8);
        bool touched = false;
        for (int s = 0; s < 8; ++s) {
          const Key v = Key{cx, cy, cz} - corner_offset(s);
          const auto it = std::find(keys.begin(), keys.end(), v);
          if (it == keys.end()) continue;
          touched = true;
          acc += grid.latents.row(it - keys.begin()) *
                 Eigen::Map<const RowMatrix>(W.data() + s * 64, 8, 8);
        }
        const auto& cs = f.layout().corners;
        const auto it = std::find(cs.begin(), cs.end(), Key{cx, cy, cz});
        ASSERT_EQ(touched, it != cs.end());
        if (touched) EXPECT_LT((f.corner_features().row(it - cs.begin()) - acc).norm(), 1e-13);
      }
}

TEST(Corners, TapeConvolutionMatchesFastPath) {
  CircNet net(small_config());
  const auto grid = random_grid(block_keys(3, 2, 2), 8, 0.05, 4);
  const LocalImplicitField f(net, grid);
  Tape t;
  Tensor lat = Tensor::matrix(grid.size(), 8);
  lat.mat() = grid.latents;
  const auto c = net.propagate_corners(t, t.constant(lat), f.layout());
  EXPECT_LT((c.value().mat() - f.corner_features()).norm(), 1e-12);
}

TEST(Interpolation, CornersCentersAndPartitionOfUnity) {
  CircNet net(small_config());
  const double b = 0.05;
  const auto grid = random_grid(block_keys(2, 2, 1), 8, b, 5);
  const LocalImplicitField f(net, grid);
  const Key k{1, 0, 0};
  const int row = f.index().find(k);
  const Vec3 corner = Vec3(1, 0, 0) * b;
  const int c0 = f.layout().voxel_corners[row * 8 + 0];
  EXPECT_LT((f.interpolate_feature(corner).transpose() - f.corner_features().row(c0)).norm(), 1e-12);
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(8);
  for (int s = 0; s < 8; ++s) mean += f.corner_features().row(f.layout().voxel_corners[row * 8 + s]) / 8.0;
  EXPECT_LT((f.interpolate_feature(Vec3(1.5, 0.5, 0.5) * b).transpose() - mean).norm(), 1e-12);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 1000; ++i) {
    const auto w = trilinear_weights(Vec3(u(rng), u(rng), u(rng)));
    double sum = 0;
    for (double x : w) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  try {
    f.interpolate_feature(Vec3(5, 5, 5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OutsideGrid);
  }
}

TEST(Decoder, ZeroWeightsGiveZero) {
  CircNet net(small_config());
  for (auto& p : net.params().all()) {
    if (p->name.rfind("dec.", 0) == 0) p->value.fill(0.0);
  }
  const auto grid = random_grid(block_keys(2, 1, 1), 8, 0.05, 6);
  const LocalImplicitField f(net, grid);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Vec3 p = random_interior(grid.keys[i % 2], 0.05, rng);
    EXPECT_EQ(f.query_sdf(p), 0.0);
    EXPECT_EQ(f.query_sdf_gradient(p), Vec3::Zero());
  }
}

TEST(Decoder, OutputAlwaysClamped) {
  CircNet net(small_config());
  auto grid = random_grid(block_keys(2, 2, 2), 8, 0.05, 7);
  grid.latents *= 50.0;
  const LocalImplicitField f(net, grid);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const double s = f.query_sdf(random_interior(grid.keys[i % 8], 0.05, rng));
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Decoder, GradientMatchesFiniteDifferences) {
  CircNet net(small_config());
  const double b = 0.05;
  auto grid = random_grid(block_keys(3, 3, 2), 8, b, 8);
  grid.latents *= 0.2;
  const LocalImplicitField f(net, grid);
  std::mt19937_64 rng(4);
  const double h = 1e-7;
  int checked = 0;
  for (int i = 0; i < 300; ++i) {
    const Vec3 p = random_interior(grid.keys[i % grid.size()], b, rng);
    if (std::abs(f.query_sdf(p)) > 0.99) continue;
    const Vec3 g = f.query_sdf_gradient(p);
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = h;
      const double fd = (f.query_world_sdf(p + e) - f.query_world_sdf(p - e)) / (2 * h);
      EXPECT_NEAR(g[a], fd, 1e-5);
    }
    ++checked;
  }
  EXPECT_GT(checked, 100);
}

TEST(Decoder, TapeDecodeMatchesFastPath) {
  CircNet net(small_config());
  const double b = 0.05;
  auto grid = random_grid(block_keys(3, 2, 2), 8, b, 9);
  grid.latents *= 0.3;
  const LocalImplicitField f(net, grid);
  std::mt19937_64 rng(5);
  QueryBatch q;
  std::vector<Vec3> world;
  for (int i = 0; i < 64; ++i) {
    const int row = i % static_cast<int>(grid.size());
    const Vec3 p = random_interior(grid.keys[row], b, rng);
    q.voxel_rows.push_back(row);
    q.local.push_back(local_coords(p, grid.keys[row], b));
    world.push_back(p);
  }
  Tape t;
  Tensor lat = Tensor::matrix(grid.size(), 8);
  lat.mat() = grid.latents;
  const auto corners = net.propagate_corners(t, t.constant(lat), f.layout());
  const auto out = net.decode(t, corners, f.layout(), q, true);
  for (int i = 0; i < 64; ++i) {
    EXPECT_NEAR(out.sdf.value()[i], f.query_sdf(world[i]), 1e-12);
    const Vec3 g = f.query_sdf_gradient(world[i]);
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(out.gradient.value()[i * 3 + a], g[a], 1e-12);
  }
}

TEST(Decoder, GradientOutputIsDifferentiable) {
  // Eikonal-style loss on the tangent gradients, checked against central
  // differences in the decoder weights and corner features.
  CircNet net(small_config());
  const double b = 0.05;
  auto grid = random_grid(block_keys(2, 2, 1), 8, b, 10);
  grid.latents *= 0.3;
  const LocalImplicitField f(net, grid);
  std::mt19937_64 rng(6);
  QueryBatch q;
  for (int i = 0; i < 12; ++i) {
    const int row = i % 4;
    q.voxel_rows.push_back(row);
    q.local.push_back(local_coords(random_interior(grid.keys[row], b, rng), grid.keys[row], b));
  }
  Tensor lat = Tensor::matrix(grid.size(), 8);
  lat.mat() = grid.latents;
  auto loss_of = [&](tape::Tape& t, const tape::Var& latents) {
    const auto corners = net.propagate_corners(t, latents, f.layout());
    const auto out = net.decode(t, corners, f.layout(), q, true);
    return tape::add(tape::mean(tape::abs(tape::add_const(tape::row_norm(out.gradient),
                                                          Tensor::matrix(q.size(), 1, -1.0)))),
                     tape::mean(out.sdf));
  };
  net.params().zero_grad();
  Tape t;
  const auto lv = t.leaf(lat);
  t.backward(loss_of(t, lv));
  const Tensor lat_grad = t.grad(lv);

  auto eval = [&]() {
    Tape s;
    return loss_of(s, s.constant(lat)).value()[0];
  };
  const double eps = 1e-6;
  double worst = 0.0;
  auto check = [&](double& x, double analytic) {
    const double saved = x;
    x = saved + eps;
    const double up = eval();
    x = saved - eps;
    const double down = eval();
    x = saved;
    const double fd = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-6}));
  };
  for (std::size_t i = 0; i < lat.size(); i += 3) check(lat[i], lat_grad[i]);
  for (const char* name : {"dec.w0", "dec.w1", "dec.w2", "corner.w"}) {
    auto& p = net.params().get(name);
    for (std::size_t i = 0; i < p.value.size(); i += 7) check(p.value[i], p.grad[i]);
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Decoder, LatentGradientMatchesFiniteDifferences) {
  CircNet net(small_config());
  const double b = 0.05;
  auto grid = random_grid(block_keys(3, 3, 3), 8, b, 11);
  grid.latents *= 0.3;
  LocalImplicitField f(net, grid);
  std::mt19937_64 rng(7);
  const Key center{1, 1, 1};
  for (int trial = 0; trial < 5; ++trial) {
    const Vec3 p = random_interior(center, b, rng);
    RowMatrix g = RowMatrix::Zero(grid.latents.rows(), grid.latents.cols());
    f.accumulate_latent_gradient(center, p, 1.0, g);
    RowMatrix lat = grid.latents;
    const double eps = 1e-6;
    for (Eigen::Index r = 0; r < lat.rows(); ++r) {
      for (Eigen::Index c = 0; c < lat.cols(); c += 3) {
        const double saved = lat(r, c);
        lat(r, c) = saved + eps;
        f.set_latents(lat);
        const double up = f.query_world_sdf(p);
        lat(r, c) = saved - eps;
        f.set_latents(lat);
        const double down = f.query_world_sdf(p);
        lat(r, c) = saved;
        EXPECT_NEAR(g(r, c), (up - down) / (2 * eps), 1e-7);
      }
    }
    f.set_latents(grid.latents);
  }
}

TEST(Continuity, InterpolatedFeatureAgreesOnSharedFaces) {
  CircNet net(small_config());
  const double b = 0.05;
  const auto grid = random_grid(block_keys(2, 2, 2), 8, b, 12);
  const LocalImplicitField f(net, grid);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.05, 1.95);
  for (int i = 0; i < 200; ++i) {
    Vec3 p(u(rng) * b, u(rng) * b, u(rng) * b);
    const int axis = i % 3;
    p[axis] = b;
    Vec3 e = Vec3::Zero();
    e[axis] = 1e-6;
    Key below = voxel_key(p - e, b), above = voxel_key(p + e, b);
    ASSERT_NE(below, above);
    EXPECT_LT((f.interpolate_feature(below, p) - f.interpolate_feature(above, p)).norm(), 1e-12);
  }
}

TEST(Continuity, SdfContinuousWhenDecoderIgnoresLocalPosition) {
  CircNet net(small_config());
  auto& w0 = net.params().get("dec.w0").value;
  for (std::size_t i = 0; i < 3 * w0.shape()[1]; ++i) w0[i] = 0.0;
  const double b = 0.05;
  auto grid = random_grid(block_keys(2, 2, 2), 8, b, 13);
  grid.latents *= 0.3;
  const LocalImplicitField f(net, grid);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.05, 1.95);
  for (int i = 0; i < 200; ++i) {
    Vec3 p(u(rng) * b, u(rng) * b, u(rng) * b);
    const int axis = i % 3;
    p[axis] = b;
    Vec3 e = Vec3::Zero();
    e[axis] = 1e-6;
    EXPECT_LT(std::abs(f.query_sdf(p + e) - f.query_sdf(p - e)), 1e-5);
  }
}

TEST(Grid, SaveLoadRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "circle_grid.bin";
  const auto g = random_grid({{-3, 4, 5}, {0, 0, 0}, {7, -8, 1}}, 32, 0.05, 14);
  save_grid(path, g);
  const auto h = load_grid(path);
  EXPECT_EQ(h.keys, g.keys);
  EXPECT_EQ(h.voxel_size, g.voxel_size);
  EXPECT_EQ(h.latents, g.latents);
  EXPECT_THROW(load_grid(path.string() + ".none"), Error);
}
