#include "circle/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <vector>

namespace circle {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyFrame: return "EmptyFrame";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::EmptyScene: return "EmptyScene";
    case ErrorCode::EmptyMesh: return "EmptyMesh";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::AllPruned: return "AllPruned";
    case ErrorCode::OutsideGrid: return "OutsideGrid";
    case ErrorCode::NoOverlap: return "NoOverlap";
    case ErrorCode::DegenerateHit: return "DegenerateHit";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Format: return "Format";
  }
  return "Unknown";
}

Key voxel_key(const Vec3& p, double voxel_size) {
  return {static_cast<std::int32_t>(std::floor(p.x() / voxel_size)),
          static_cast<std::int32_t>(std::floor(p.y() / voxel_size)),
          static_cast<std::int32_t>(std::floor(p.z() / voxel_size))};
}

Vec3 local_coords(const Vec3& p, const Key& k, double voxel_size) {
  return {p.x() / voxel_size - k.x, p.y() / voxel_size - k.y, p.z() / voxel_size - k.z};
}

Vec3 voxel_origin(const Key& k, double voxel_size) {
  return Vec3(k.x, k.y, k.z) * voxel_size;
}

namespace {
std::atomic<int> g_workers{1};
}

void set_worker_count(int threads) { g_workers = std::max(1, threads); }
int worker_count() { return g_workers.load(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(g_workers.load()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace circle
