#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace circle {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ErrorCode {
  EmptyFrame,
  EmptySet,
  EmptyScene,
  EmptyMesh,
  ShapeMismatch,
  AllPruned,
  OutsideGrid,
  NoOverlap,
  DegenerateHit,
  InvalidArgument,
  Io,
  Format,
};

std::string_view to_string(ErrorCode code);

/// Library-wide exception. `code()` is stable and is what the CLI reports.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Integer voxel coordinate. At level k the voxel covers [key, key + 1) * b * 2^k.
struct Key {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  friend constexpr bool operator==(const Key&, const Key&) = default;
  friend constexpr auto operator<=>(const Key&, const Key&) = default;

  constexpr Key operator+(const Key& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Key operator-(const Key& o) const { return {x - o.x, y - o.y, z - o.z}; }

  /// Parent at the next coarser level (floor division by two).
  constexpr Key parent() const { return {x >> 1, y >> 1, z >> 1}; }
  /// Child slot 0..7 inside the parent, bit 0 = x, bit 1 = y, bit 2 = z.
  constexpr int child_slot() const { return (x & 1) | ((y & 1) << 1) | ((z & 1) << 2); }
  constexpr Key child(int slot) const {
    return {2 * x + (slot & 1), 2 * y + ((slot >> 1) & 1), 2 * z + ((slot >> 2) & 1)};
  }
};

constexpr Key corner_offset(int slot) {
  return {slot & 1, (slot >> 1) & 1, (slot >> 2) & 1};
}

struct KeyHash {
  std::size_t operator()(const Key& k) const noexcept {
    std::uint64_t h = static_cast<std::uint32_t>(k.x);
    h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint32_t>(k.y);
    h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint32_t>(k.z);
    h ^= h >> 29;
    return static_cast<std::size_t>(h * 0xBF58476D1CE4E5B9ull);
  }
};

/// Voxel containing p with the half-open rule p in [k*b, (k+1)*b).
Key voxel_key(const Vec3& p, double voxel_size);
/// Local coordinates (p - c_m) / b of p relative to voxel k.
Vec3 local_coords(const Vec3& p, const Key& k, double voxel_size);
Vec3 voxel_origin(const Key& k, double voxel_size);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// visited exactly once; the caller owns determinism of any reduction.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);
void set_worker_count(int threads);
int worker_count();

}  // namespace circle
