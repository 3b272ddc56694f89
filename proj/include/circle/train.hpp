#pragma once

#include "circle/circnet.hpp"
#include "circle/common.hpp"
#include "circle/ingest.hpp"
#include "circle/scene.hpp"
#include "circle/tape.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace circle::train {

struct TrainConfig {
  double alpha = 0.1;   // L_norm weight
  double beta = 1.0;    // L_struct weight
  double delta = 0.001; // latent norm weight
  double learning_rate = 1e-3;
  /// Cosine decay from learning_rate to learning_rate * final_lr_scale over
  /// the run; 1 keeps the rate constant.
  double final_lr_scale = 1.0;
  /// Supervision per occupied finest voxel and step.
  int uniform_per_voxel = 8;
  int band_per_voxel = 4;
  double band_half_width = 2.5e-3;
  int iterations = 2000;
  double patch_size = 3.2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Query points with their ground truth. Band rows index into the point list.
struct SupervisionBatch {
  std::vector<Vec3> points;
  circnet::QueryBatch queries;   // owner voxel row and local coords, aligned with points
  std::vector<double> sdf;       // world meters
  std::vector<int> band_rows;
  std::vector<Vec3> band_normals;

  std::size_t size() const { return points.size(); }
};

/// n_u uniform points in every voxel of `occupied`, then n_n surface samples
/// pushed along the gt normal by eta ~ U[-w, w]. Band points that leave the
/// occupied set are redrawn.
SupervisionBatch sample_supervision(const scene::GtScene& gt, const tape::KeyIndex& occupied,
                                    double voxel_size, int n_u, std::size_t n_n,
                                    double band_half_width, std::uint64_t seed);

/// Finest level: voxels of the scene bounds whose 8 corners and center show a
/// sign change (or a zero) and whose center lies within b*sqrt(3)/2 of the
/// surface. Coarser levels by parent closure.
circnet::SparsityPyramid gt_sparsity_pyramid(const scene::GtScene& gt, double voxel_size, int levels);

// Loss terms over tape nodes.
/// mean |pred - clamp(gt / tau, -1, 1)|
tape::Var loss_sdf(const tape::Var& pred, std::span<const double> gt_world, double truncation);
/// mean | |g| - 1 | over all rows + mean (1 - <g, n>) over the band rows.
tape::Var loss_norm(const tape::Var& gradient, std::span<const int> band_rows,
                    std::span<const Vec3> band_normals);
/// Binary cross-entropy summed over every level's candidates, divided by the
/// total candidate count.
tape::Var loss_struct(std::span<const tape::Var> confidence,
                      const std::vector<std::vector<double>>& labels);
/// Sum of Euclidean row norms.
tape::Var latent_reg(const tape::Var& latents);

struct LossValues {
  double sdf = 0.0;
  double norm = 0.0;
  double structure = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

struct LossVars {
  tape::Var sdf, norm, structure, reg;
};

tape::Var total_loss(const LossVars& terms, const TrainConfig& config);

/// Teacher labels for every candidate list: 1 where the key is in the gt level.
std::vector<std::vector<double>> struct_labels(const std::vector<std::vector<Key>>& candidates,
                                               const circnet::SparsityPyramid& gt);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// In-place Adam update with bias correction. The state is sized on first use.
void adam_step(std::span<double> x, std::span<const double> g, AdamState& state,
               const AdamConfig& config);

/// Adam over every parameter of a store, one state per parameter.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(tape::ParameterStore& params);
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  AdamConfig config_;
  std::vector<AdamState> states_;
};

/// Observed input and ground truth for one training region.
struct TrainingScene {
  scene::GtScene gt;
  ingest::VoxelBinning bins;
  circnet::SparsityPyramid pyramid;
};

/// Accumulates the frames, bins them, and builds the gt pyramid.
TrainingScene make_training_scene(const scene::GtScene& gt,
                                  std::span<const ingest::DepthFrame> frames,
                                  const circnet::ModelConfig& model);

/// Splits a scene into cubic patches of `patch_size` aligned to the world
/// origin. Patches without observations or gt voxels are dropped.
std::vector<TrainingScene> split_patches(const TrainingScene& scene, double patch_size, int levels);

class Trainer {
 public:
  Trainer(circnet::CircNet& net, TrainConfig config);

  /// One teacher-forced step on `scene` with fresh supervision drawn from `iteration`.
  LossValues step(const TrainingScene& scene, std::uint64_t iteration);
  /// Losses and gradients without an update.
  LossValues evaluate(const TrainingScene& scene, std::uint64_t iteration, bool backward);

  /// Runs `config.iterations` steps cycling over the scenes. The callback sees
  /// every iteration's losses.
  void fit(std::span<const TrainingScene> scenes,
           const std::function<void(int, const LossValues&)>& on_step = {});

  const TrainConfig& config() const { return config_; }

 private:
  circnet::CircNet& net_;
  TrainConfig config_;
  Adam adam_;
  const TrainingScene* cached_scene_ = nullptr;
  tape::KeyIndexPtr cached_index_;
  circnet::CornerLayout cached_layout_;
};

/// Finest grid of a teacher-forced forward pass (the gt active set).
circnet::SparseFeatureGrid teacher_grid(circnet::CircNet& net, const TrainingScene& scene);

/// Fraction of finest sites classified correctly by inference, over the union
/// of the predicted candidates and the gt finest voxels. AllPruned counts as
/// predicting every site empty.
double sparsity_accuracy(circnet::CircNet& net, const TrainingScene& scene);

/// mean | |grad f| - 1 | of a field over points inside its active set, and the
/// number of points used.
std::pair<double, std::size_t> eikonal_residual(const circnet::LocalImplicitField& field,
                                                std::span<const Vec3> points);

}  // namespace circle::train
