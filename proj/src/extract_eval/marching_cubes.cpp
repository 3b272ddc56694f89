#include "circle/extract_eval.hpp"

#include "mc_tables.hpp"

#include <algorithm>
#include <cmath>

namespace circle::extract_eval {

namespace {

struct Lattice {
  std::int64_t x, y, z;
  friend bool operator==(const Lattice&, const Lattice&) = default;
};

struct EdgeKey {
  Lattice lo;
  int axis;
  friend bool operator==(const EdgeKey&, const EdgeKey&) = default;
};

struct EdgeHash {
  std::size_t operator()(const EdgeKey& e) const noexcept {
    std::uint64_t h = static_cast<std::uint64_t>(e.lo.x);
    h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(e.lo.y);
    h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(e.lo.z);
    h = h * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(e.axis);
    h ^= h >> 29;
    return static_cast<std::size_t>(h * 0xBF58476D1CE4E5B9ull);
  }
};

constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
// Edge e joins corners kEdge[e][0] and kEdge[e][1].
constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {3, 2}, {0, 3}, {4, 5}, {5, 6},
                              {7, 6}, {4, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

std::int64_t floor_div(std::int64_t a, std::int64_t n) {
  std::int64_t q = a / n;
  if ((a % n != 0) && ((a < 0) != (n < 0))) --q;
  return q;
}

}  // namespace

void TriangleMesh::check() const {
  const auto n = static_cast<std::int64_t>(vertices.size());
  for (const auto& t : triangles) {
    for (auto i : t) {
      if (i < 0 || i >= n) throw Error(ErrorCode::Format, "triangle index out of range");
    }
  }
}

double TriangleMesh::area() const {
  double a = 0.0;
  for (const auto& t : triangles) {
    a += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
  }
  return a;
}

TriangleMesh marching_cubes(const SdfField& field, std::span<const Key> active, int subdivisions) {
  if (subdivisions < 1) throw Error(ErrorCode::InvalidArgument, "subdivisions must be at least 1");
  std::vector<Key> keys(active.begin(), active.end());
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  std::unordered_map<Key, std::size_t, KeyHash> row;
  for (std::size_t i = 0; i < keys.size(); ++i) row.emplace(keys[i], i);

  const std::int64_t n = subdivisions;
  const double h = field.voxel_size() / static_cast<double>(n);
  const std::size_t per_voxel = static_cast<std::size_t>(n * n * n);
  auto position = [h](const Lattice& g) {
    return Vec3(static_cast<double>(g.x) * h, static_cast<double>(g.y) * h, static_cast<double>(g.z) * h);
  };

  // Values of the lattice points owned by each voxel, x fastest.
  std::vector<double> values(keys.size() * per_voxel);
  parallel_for(keys.size(), [&](std::size_t i) {
    const Key& k = keys[i];
    std::size_t j = i * per_voxel;
    for (std::int64_t z = 0; z < n; ++z) {
      for (std::int64_t y = 0; y < n; ++y) {
        for (std::int64_t x = 0; x < n; ++x) {
          values[j++] = field.sdf(k, position({k.x * n + x, k.y * n + y, k.z * n + z}));
        }
      }
    }
  });
  auto value_at = [&](const Lattice& g, double& out) {
    const Key owner{static_cast<std::int32_t>(floor_div(g.x, n)), static_cast<std::int32_t>(floor_div(g.y, n)),
                    static_cast<std::int32_t>(floor_div(g.z, n))};
    const auto it = row.find(owner);
    if (it == row.end()) return false;
    const std::int64_t lx = g.x - owner.x * n, ly = g.y - owner.y * n, lz = g.z - owner.z * n;
    out = values[it->second * per_voxel + static_cast<std::size_t>((lz * n + ly) * n + lx)];
    return true;
  };

  TriangleMesh mesh;
  std::unordered_map<EdgeKey, std::int32_t, EdgeHash> edge_vertex;
  for (const Key& k : keys) {
    for (std::int64_t z = 0; z < n; ++z) {
      for (std::int64_t y = 0; y < n; ++y) {
        for (std::int64_t x = 0; x < n; ++x) {
          const Lattice base{k.x * n + x, k.y * n + y, k.z * n + z};
          Lattice corner[8];
          double v[8];
          bool complete = true;
          int index = 0;
          for (int c = 0; c < 8 && complete; ++c) {
            corner[c] = {base.x + kCorner[c][0], base.y + kCorner[c][1], base.z + kCorner[c][2]};
            complete = value_at(corner[c], v[c]);
            if (complete && v[c] < 0.0) index |= 1 << c;
          }
          if (!complete || index == 0 || index == 255) continue;

          auto vertex = [&](int e) {
            const int a = kEdge[e][0], b = kEdge[e][1];
            int axis = 0;
            while (kCorner[a][axis] == kCorner[b][axis]) ++axis;
            const EdgeKey key{corner[a], axis};
            const auto [it, inserted] = edge_vertex.try_emplace(key, static_cast<std::int32_t>(mesh.vertices.size()));
            if (inserted) {
              const double t = v[a] / (v[a] - v[b]);
              const Vec3 p0 = position(corner[a]);
              mesh.vertices.push_back(p0 + t * (position(corner[b]) - p0));
            }
            return it->second;
          };
          for (const std::int8_t* e = detail::kTriTable[index]; *e >= 0; e += 3) {
            // Table winding faces inward; swap to point normals toward positive values.
            const std::array<std::int32_t, 3> tri{vertex(e[0]), vertex(e[2]), vertex(e[1])};
            if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) continue;
            const Vec3& p = mesh.vertices[tri[0]];
            if ((mesh.vertices[tri[1]] - p).cross(mesh.vertices[tri[2]] - p).squaredNorm() == 0.0) continue;
            mesh.triangles.push_back(tri);
          }
        }
      }
    }
  }
  return mesh;
}

TriangleMesh marching_cubes(const circnet::LocalImplicitField& field, int subdivisions) {
  return marching_cubes(static_cast<const SdfField&>(field), field.grid().keys, subdivisions);
}

}  // namespace circle::extract_eval
