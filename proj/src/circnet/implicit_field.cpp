#include "circle/circnet.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace circle::circnet {

namespace {

RowMatrix to_matrix(const tape::Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return Eigen::Map<const RowMatrix>(t.data() + offset, static_cast<Eigen::Index>(rows),
                                     static_cast<Eigen::Index>(cols));
}

}  // namespace

LocalImplicitField::LocalImplicitField(const CircNet& net, SparseFeatureGrid grid)
    : grid_(std::move(grid)),
      slope_(net.config().slope),
      truncation_(net.config().truncation()) {
  const int L = net.config().latent_dim;
  if (grid_.latents.cols() != L || static_cast<std::size_t>(grid_.latents.rows()) != grid_.keys.size()) {
    throw Error(ErrorCode::ShapeMismatch, "grid latents do not match the model");
  }
  if (std::abs(grid_.voxel_size - net.config().voxel_size) > 1e-12) {
    throw Error(ErrorCode::InvalidArgument, "grid voxel size differs from the model");
  }
  index_ = tape::make_index(grid_.keys);
  layout_ = CornerLayout::build(*index_);

  const auto& cw = net.params().get("corner.w").value;
  for (int s = 0; s < 8; ++s) {
    corner_taps_.push_back(to_matrix(cw, L, L, static_cast<std::size_t>(s) * L * L));
  }
  for (int i = 0; i < net.config().decoder_layers; ++i) {
    const auto& w = net.params().get("dec.w" + std::to_string(i)).value;
    const auto& b = net.params().get("dec.b" + std::to_string(i)).value;
    weights_.push_back(to_matrix(w, w.shape()[0], w.shape()[1]));
    biases_.push_back(to_matrix(b, 1, b.size()));
  }
  set_latents(grid_.latents);
}

void LocalImplicitField::set_latents(const RowMatrix& latents) {
  if (latents.rows() != grid_.latents.rows() || latents.cols() != grid_.latents.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "latent update changes the grid shape");
  }
  grid_.latents = latents;
  corners_ = RowMatrix::Zero(static_cast<Eigen::Index>(layout_.corners.size()), latents.cols());
  for (int s = 0; s < 8; ++s) {
    for (const auto& [in, out] : layout_.rules->taps[s]) {
      corners_.row(out).noalias() += latents.row(in) * corner_taps_[s];
    }
  }
}

int LocalImplicitField::row_of(const Key& voxel) const {
  const int row = index_->find(voxel);
  if (row < 0) throw Error(ErrorCode::OutsideGrid, "voxel is not active");
  return row;
}

int LocalImplicitField::locate(const Vec3& p) const {
  return row_of(voxel_key(p, grid_.voxel_size));
}

LocalImplicitField::Eval LocalImplicitField::evaluate(int row, const Vec3& p, bool backward) const {
  Eval e;
  const Key& k = grid_.keys[row];
  e.local = local_coords(p, k, grid_.voxel_size);
  e.weights = trilinear_weights(e.local);
  const int L = latent_dim();
  Eigen::RowVectorXd x(3 + L);
  x.head<3>() = e.local.transpose();
  auto lhat = x.tail(L);
  lhat.setZero();
  for (int s = 0; s < 8; ++s) {
    e.corner_rows[s] = layout_.voxel_corners[static_cast<std::size_t>(row) * 8 + s];
    lhat.noalias() += e.weights[s] * corners_.row(e.corner_rows[s]);
  }

  const std::size_t n = weights_.size();
  std::vector<Eigen::RowVectorXd> pre(n);
  Eigen::RowVectorXd h = x;
  for (std::size_t i = 0; i < n; ++i) {
    pre[i].noalias() = h * weights_[i];
    pre[i] += biases_[i];
    if (i + 1 < n) {
      h = pre[i].unaryExpr([this](double v) { return v > 0.0 ? v : slope_ * v; });
    }
  }
  e.raw = pre[n - 1][0];
  e.sdf = std::clamp(e.raw, -1.0, 1.0);
  if (!backward) return e;

  Eigen::RowVectorXd g = Eigen::RowVectorXd::Constant(1, (e.raw > -1.0 && e.raw < 1.0) ? 1.0 : 0.0);
  for (std::size_t i = n; i-- > 0;) {
    if (i + 1 < n) {
      for (Eigen::Index j = 0; j < g.size(); ++j) {
        if (pre[i][j] <= 0.0) g[j] *= slope_;
      }
    }
    g = g * weights_[i].transpose();
  }
  e.input_grad = g.transpose();
  return e;
}

double LocalImplicitField::sdf(const Key& voxel, const Vec3& p) const {
  return evaluate(row_of(voxel), p, false).sdf;
}

FieldSample LocalImplicitField::sample(const Key& voxel, const Vec3& p) const {
  const Eval e = evaluate(row_of(voxel), p, true);
  const int L = latent_dim();
  const auto dw = trilinear_weight_gradients(e.local);
  Vec3 g = e.input_grad.head<3>();
  const auto gl = e.input_grad.tail(L);
  for (int s = 0; s < 8; ++s) {
    const double c = corners_.row(e.corner_rows[s]).dot(gl);
    g += c * dw.row(s).transpose();
  }
  return {e.sdf, g * (truncation_ / grid_.voxel_size)};
}

Eigen::VectorXd LocalImplicitField::interpolate_feature(const Vec3& p) const {
  return interpolate_feature(grid_.keys[locate(p)], p);
}

Eigen::VectorXd LocalImplicitField::interpolate_feature(const Key& voxel, const Vec3& p) const {
  const int row = row_of(voxel);
  const auto w = trilinear_weights(local_coords(p, grid_.keys[row], grid_.voxel_size));
  Eigen::VectorXd out = Eigen::VectorXd::Zero(latent_dim());
  for (int s = 0; s < 8; ++s) {
    out += w[s] * corners_.row(layout_.voxel_corners[static_cast<std::size_t>(row) * 8 + s]).transpose();
  }
  return out;
}

double LocalImplicitField::query_sdf(const Vec3& p) const {
  return evaluate(locate(p), p, false).sdf;
}

Vec3 LocalImplicitField::query_sdf_gradient(const Vec3& p) const {
  return sample(grid_.keys[locate(p)], p).gradient;
}

void LocalImplicitField::accumulate_latent_gradient(const Key& voxel, const Vec3& p, double scale,
                                                    RowMatrix& grad) const {
  const Eval e = evaluate(row_of(voxel), p, true);
  const int L = latent_dim();
  const Eigen::RowVectorXd gl = e.input_grad.tail(L).transpose() * (scale * truncation_);
  for (int s = 0; s < 8; ++s) {
    const Key corner = layout_.corners[e.corner_rows[s]];
    const Eigen::RowVectorXd gc = e.weights[s] * gl;
    for (int tap = 0; tap < 8; ++tap) {
      const int m = index_->find(corner - corner_offset(tap));
      if (m >= 0) grad.row(m).noalias() += gc * corner_taps_[tap].transpose();
    }
  }
}

static_assert(std::endian::native == std::endian::little,
              "grid payload is written as native little-endian values");

void save_grid(const std::filesystem::path& path, const SparseFeatureGrid& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write grid " + path.string());
  out.precision(17);
  out << "CIRCGRID1\n" << grid.voxel_size << ' ' << grid.keys.size() << ' ' << grid.latents.cols()
      << "\nDATA\n";
  for (std::size_t i = 0; i < grid.keys.size(); ++i) {
    const std::int32_t k[3] = {grid.keys[i].x, grid.keys[i].y, grid.keys[i].z};
    out.write(reinterpret_cast<const char*>(k), sizeof(k));
    out.write(reinterpret_cast<const char*>(grid.latents.row(static_cast<Eigen::Index>(i)).data()),
              static_cast<std::streamsize>(grid.latents.cols() * sizeof(double)));
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing grid " + path.string());
}

SparseFeatureGrid load_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open grid " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "CIRCGRID1") throw Error(ErrorCode::Format, "not a CIRCGRID1 file: " + path.string());
  std::getline(in, line);
  std::istringstream header(line);
  SparseFeatureGrid grid;
  std::size_t n = 0;
  Eigen::Index cols = 0;
  header >> grid.voxel_size >> n >> cols;
  if (!header || cols <= 0) throw Error(ErrorCode::Format, "malformed grid header");
  std::getline(in, line);
  if (line != "DATA") throw Error(ErrorCode::Format, "grid header not terminated");
  grid.keys.resize(n);
  grid.latents.resize(static_cast<Eigen::Index>(n), cols);
  for (std::size_t i = 0; i < n; ++i) {
    std::int32_t k[3];
    in.read(reinterpret_cast<char*>(k), sizeof(k));
    grid.keys[i] = {k[0], k[1], k[2]};
    in.read(reinterpret_cast<char*>(grid.latents.row(static_cast<Eigen::Index>(i)).data()),
            static_cast<std::streamsize>(cols * sizeof(double)));
  }
  if (!in) throw Error(ErrorCode::Format, "truncated grid payload");
  return grid;
}

}  // namespace circle::circnet
