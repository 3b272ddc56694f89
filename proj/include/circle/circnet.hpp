#pragma once

#include "circle/common.hpp"
#include "circle/field.hpp"
#include "circle/ingest.hpp"
#include "circle/sparse.hpp"
#include "circle/tape.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

namespace circle::circnet {

struct ModelConfig {
  int latent_dim = 32;
  int encoder_layers = 4;
  int encoder_hidden = 32;
  /// Channel width per U-Net level; the level count is its size.
  std::vector<int> unet_channels = {32, 64, 128, 256, 256};
  int decoder_layers = 3;
  int decoder_hidden = 64;
  double voxel_size = 0.05;
  double slope = 0.01;
  std::uint64_t seed = 1;

  int levels() const { return static_cast<int>(unet_channels.size()); }
  /// World distance of a normalized decoder output of 1.
  double truncation() const { return voxel_size; }
  void validate() const;
};

/// Per-level voxel sets, index 0 = finest. Confidences are in [0, 1]; ground
/// truth pyramids carry 1 everywhere.
struct SparsityPyramid {
  struct Level {
    std::vector<Key> keys;
    std::vector<double> confidence;
  };
  std::vector<Level> levels;

  bool empty() const { return levels.empty() || levels.front().keys.empty(); }
  /// Adds every missing ancestor so each level-k key has its parent at k + 1.
  void close_parents();
  /// Builds all coarser levels of a finest set by parent closure.
  static SparsityPyramid from_finest(std::vector<Key> finest, int levels);
};

/// Finest voxel keys and their latent vectors: the scene representation.
struct SparseFeatureGrid {
  double voxel_size = 0.05;
  std::vector<Key> keys;
  RowMatrix latents;  // keys.size() x L

  std::size_t size() const { return keys.size(); }
};

/// Manifest text (magic, voxel size, count, latent size) then little-endian
/// records of three int32 key components and L float64 values.
void save_grid(const std::filesystem::path& path, const SparseFeatureGrid& grid);
SparseFeatureGrid load_grid(const std::filesystem::path& path);

/// Corner bookkeeping for a finest active set: the unique corner lattice
/// points, the 8 corner rows of every voxel, and the 2x2x2 rulebook that
/// gathers the up to 8 voxels incident to each corner.
struct CornerLayout {
  std::vector<Key> corners;
  std::vector<int> voxel_corners;  // voxel row * 8 + slot
  std::shared_ptr<const tape::Rulebook> rules;

  static CornerLayout build(const tape::KeyIndex& voxels);
};

/// Trilinear weights of the 8 corners at local coordinates x, slot bits as in
/// `corner_offset`.
std::array<double, 8> trilinear_weights(const Vec3& x);
/// d(weight_s) / d(x_a), row s.
Eigen::Matrix<double, 8, 3> trilinear_weight_gradients(const Vec3& x);

/// Points to decode: the active voxel row that owns each point and its local
/// coordinates in that voxel.
struct QueryBatch {
  std::vector<int> voxel_rows;
  std::vector<Vec3> local;

  std::size_t size() const { return voxel_rows.size(); }
};

struct DecodeResult {
  tape::Var sdf;       // P x 1, normalized
  tape::Var gradient;  // P x 3, world units; invalid unless requested
};

struct UnetResult {
  tape::SparseTensor latents;  // finest kept voxels, L channels
  SparsityPyramid pyramid;     // kept keys per level
  /// Decoder levels 0 .. levels-2: every candidate site and its confidence (rows x 1).
  std::vector<std::vector<Key>> candidates;
  std::vector<tape::Var> confidence;
};

/// phi_E, phi_U, corner convolution and phi_D over one parameter store.
class CircNet {
 public:
  explicit CircNet(ModelConfig config = {});

  const ModelConfig& config() const { return config_; }
  tape::ParameterStore& params() { return params_; }
  const tape::ParameterStore& params() const { return params_; }

  /// Shared point MLP on every (p^l, n) followed by a mean per voxel.
  tape::SparseTensor encode(tape::Tape& t, const ingest::VoxelBinning& bins);
  /// With a teacher, its occupancy replaces thresholding for pruning, skips
  /// and the next candidate set. Throws AllPruned when nothing survives.
  UnetResult unet(tape::Tape& t, const tape::SparseTensor& v0,
                  const SparsityPyramid* teacher = nullptr);
  /// Corner features l' (corners x L).
  tape::Var propagate_corners(tape::Tape& t, const tape::Var& latents, const CornerLayout& layout);
  /// phi_D at every query; the world gradient is propagated as three forward
  /// tangents so that it stays differentiable.
  DecodeResult decode(tape::Tape& t, const tape::Var& corner_features, const CornerLayout& layout,
                      const QueryBatch& queries, bool with_gradient);

  /// Inference: encode, prune, and read out the finest grid.
  SparseFeatureGrid infer(const ingest::VoxelBinning& bins, SparsityPyramid* pyramid = nullptr);

  void save(const std::filesystem::path& path) const { params_.save(path); }
  void load(const std::filesystem::path& path) { params_.load(path); }

 private:
  tape::Var param(tape::Tape& t, const std::string& name);
  tape::SparseTensor conv_block(tape::Tape& t, const tape::SparseTensor& x, const std::string& name);
  tape::Var norm_act(tape::Tape& t, const tape::Var& x, const std::string& name);

  ModelConfig config_;
  tape::ParameterStore params_;
};

/// Frozen decoder plus a grid: fast per-point queries without a tape.
class LocalImplicitField final : public SdfField {
 public:
  LocalImplicitField(const CircNet& net, SparseFeatureGrid grid);

  double voxel_size() const override { return grid_.voxel_size; }
  double truncation() const override { return truncation_; }
  double sdf(const Key& voxel, const Vec3& p) const override;
  FieldSample sample(const Key& voxel, const Vec3& p) const override;

  const SparseFeatureGrid& grid() const { return grid_; }
  const tape::KeyIndex& index() const { return *index_; }
  const CornerLayout& layout() const { return layout_; }
  const RowMatrix& corner_features() const { return corners_; }
  int latent_dim() const { return static_cast<int>(grid_.latents.cols()); }

  /// Replaces the latents (same active set) and recomputes corner features.
  void set_latents(const RowMatrix& latents);

  /// Row of the active voxel containing p. Throws OutsideGrid.
  int locate(const Vec3& p) const;
  Eigen::VectorXd interpolate_feature(const Vec3& p) const;
  /// Feature from voxel's corners at p, which may lie on the voxel's boundary.
  Eigen::VectorXd interpolate_feature(const Key& voxel, const Vec3& p) const;
  double query_sdf(const Vec3& p) const;
  double query_world_sdf(const Vec3& p) const { return query_sdf(p) * truncation_; }
  Vec3 query_sdf_gradient(const Vec3& p) const;

  /// Adds scale * d(s * tau)/d(latents) at p, evaluated in `voxel`, into `grad`
  /// (rows aligned with the grid).
  void accumulate_latent_gradient(const Key& voxel, const Vec3& p, double scale,
                                  RowMatrix& grad) const;

 private:
  struct Eval {
    double raw = 0.0;
    double sdf = 0.0;
    Eigen::VectorXd input_grad;  // d s / d (p^l, l_hat)
    std::array<int, 8> corner_rows{};
    std::array<double, 8> weights{};
    Vec3 local;
  };
  Eval evaluate(int row, const Vec3& p, bool backward) const;
  int row_of(const Key& voxel) const;

  SparseFeatureGrid grid_;
  tape::KeyIndexPtr index_;
  CornerLayout layout_;
  RowMatrix corners_;
  std::vector<RowMatrix> corner_taps_;  // 8 x (L x L)
  std::vector<RowMatrix> weights_;
  std::vector<Eigen::RowVectorXd> biases_;
  double slope_;
  double truncation_;
};

}  // namespace circle::circnet
