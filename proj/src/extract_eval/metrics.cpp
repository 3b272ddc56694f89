#include "circle/extract_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace circle::extract_eval {

double point_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

std::size_t NearestIndex::CellHash::operator()(const Cell& c) const noexcept {
  std::uint64_t h = static_cast<std::uint64_t>(c.x);
  h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(c.y);
  h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(c.z);
  h ^= h >> 29;
  return static_cast<std::size_t>(h * 0xBF58476D1CE4E5B9ull);
}

NearestIndex::NearestIndex(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  if (points_.empty()) throw Error(ErrorCode::EmptySet, "nearest-neighbour index over an empty set");
  Vec3 lo = points_.front(), hi = points_.front();
  for (const auto& p : points_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 extent = (hi - lo).cwiseMax(Vec3::Constant(1e-9));
  // About two points per cell for a surface-like set.
  const double area = extent.x() * extent.y() + extent.y() * extent.z() + extent.x() * extent.z();
  cell_ = std::max(std::sqrt(2.0 * area / static_cast<double>(points_.size())), 1e-9);
  lo_ = cell_of(lo);
  hi_ = cell_of(hi);
  for (std::size_t i = 0; i < points_.size(); ++i) cells_[cell_of(points_[i])].push_back(static_cast<std::uint32_t>(i));
}

NearestIndex::Cell NearestIndex::cell_of(const Vec3& p) const {
  return {static_cast<std::int64_t>(std::floor(p.x() / cell_)), static_cast<std::int64_t>(std::floor(p.y() / cell_)),
          static_cast<std::int64_t>(std::floor(p.z() / cell_))};
}

double NearestIndex::distance(const Vec3& q) const {
  const Cell c = cell_of(q);
  auto gap = [](std::int64_t v, std::int64_t lo, std::int64_t hi) {
    return v < lo ? lo - v : (v > hi ? v - hi : std::int64_t{0});
  };
  auto reach = [](std::int64_t v, std::int64_t lo, std::int64_t hi) { return std::max(v - lo, hi - v); };
  const std::int64_t first = std::max({gap(c.x, lo_.x, hi_.x), gap(c.y, lo_.y, hi_.y), gap(c.z, lo_.z, hi_.z)});
  const std::int64_t last = std::max({reach(c.x, lo_.x, hi_.x), reach(c.y, lo_.y, hi_.y), reach(c.z, lo_.z, hi_.z)});

  double best = std::numeric_limits<double>::infinity();
  auto visit = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    if (x < lo_.x || x > hi_.x || y < lo_.y || y > hi_.y || z < lo_.z || z > hi_.z) return;
    const auto it = cells_.find({x, y, z});
    if (it == cells_.end()) return;
    for (auto i : it->second) best = std::min(best, point_distance(q, points_[i]));
  };
  for (std::int64_t r = first; r <= last; ++r) {
    const std::int64_t z0 = std::max(-r, lo_.z - c.z), z1 = std::min(r, hi_.z - c.z);
    const std::int64_t y0 = std::max(-r, lo_.y - c.y), y1 = std::min(r, hi_.y - c.y);
    const std::int64_t x0 = std::max(-r, lo_.x - c.x), x1 = std::min(r, hi_.x - c.x);
    for (std::int64_t dz = z0; dz <= z1; ++dz) {
      for (std::int64_t dy = y0; dy <= y1; ++dy) {
        if (std::abs(dz) == r || std::abs(dy) == r) {
          for (std::int64_t dx = x0; dx <= x1; ++dx) visit(c.x + dx, c.y + dy, c.z + dz);
        } else {
          visit(c.x - r, c.y + dy, c.z + dz);
          if (r > 0) visit(c.x + r, c.y + dy, c.z + dz);
        }
      }
    }
    // Unvisited points lie at least r cells away; half a cell absorbs rounding in cell_of.
    if (best <= (static_cast<double>(r) - 0.5) * cell_) break;
  }
  return best;
}

std::vector<double> NearestIndex::distances(std::span<const Vec3> queries) const {
  std::vector<double> out(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) { out[i] = distance(queries[i]); });
  return out;
}

namespace {

std::vector<double> nearest(std::span<const Vec3> from, std::span<const Vec3> to) {
  if (from.empty()) throw Error(ErrorCode::EmptySet, "metric over an empty point set");
  return NearestIndex(to).distances(from);
}

double mean(const std::vector<double>& d) {
  double s = 0.0;
  for (double x : d) s += x;
  return s / static_cast<double>(d.size());
}

double rms(const std::vector<double>& d) {
  double s = 0.0;
  for (double x : d) s += x * x;
  return std::sqrt(s / static_cast<double>(d.size()));
}

double percent_below(const std::vector<double>& d, double tau) {
  std::size_t n = 0;
  for (double x : d) n += x < tau ? 1 : 0;
  return 100.0 * static_cast<double>(n) / static_cast<double>(d.size());
}

PrecisionRecall combine(double precision, double recall) {
  PrecisionRecall out{precision, recall, 0.0};
  if (precision + recall > 0.0) out.fscore = 2.0 * precision * recall / (precision + recall);
  return out;
}

}  // namespace

double chamfer(std::span<const Vec3> a, std::span<const Vec3> b) {
  return 0.5 * (mean(nearest(a, b)) + mean(nearest(b, a)));
}

double rmse(std::span<const Vec3> pred, std::span<const Vec3> gt) { return rms(nearest(pred, gt)); }

PrecisionRecall precision_recall_fscore(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau) {
  return combine(percent_below(nearest(pred, gt), tau), percent_below(nearest(gt, pred), tau));
}

MetricReport evaluate(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau) {
  const auto to_gt = nearest(pred, gt);
  const auto to_pred = nearest(gt, pred);
  MetricReport r;
  r.rmse = rms(to_gt);
  r.chamfer = 0.5 * (mean(to_gt) + mean(to_pred));
  const auto prf = combine(percent_below(to_gt, tau), percent_below(to_pred, tau));
  r.precision = prf.precision;
  r.recall = prf.recall;
  r.fscore = prf.fscore;
  r.tau = tau;
  r.pred_points = pred.size();
  r.gt_points = gt.size();
  return r;
}

}  // namespace circle::extract_eval
