#include "circle/extract_eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace circle::extract_eval {

static_assert(std::endian::native == std::endian::little, "PLY I/O assumes a little-endian host");

namespace {

struct Property {
  std::string name;
  std::string type;
  std::string count_type;  // set for list properties
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
};

std::size_t type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  throw Error(ErrorCode::Format, "unknown PLY type " + t);
}

double read_scalar(std::istream& in, const std::string& t) {
  char buf[8];
  const std::size_t n = type_size(t);
  if (!in.read(buf, static_cast<std::streamsize>(n))) throw Error(ErrorCode::Format, "truncated PLY body");
  auto as = [&]<typename T>(T) {
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return static_cast<double>(v);
  };
  if (t == "char" || t == "int8") return as(std::int8_t{});
  if (t == "uchar" || t == "uint8") return as(std::uint8_t{});
  if (t == "short" || t == "int16") return as(std::int16_t{});
  if (t == "ushort" || t == "uint16") return as(std::uint16_t{});
  if (t == "int" || t == "int32") return as(std::int32_t{});
  if (t == "uint" || t == "uint32") return as(std::uint32_t{});
  if (t == "float" || t == "float32") return as(float{});
  return as(double{});
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh) {
  mesh.check();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\n"
      << "element vertex " << mesh.vertices.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\n"
      << "element face " << mesh.triangles.size() << "\n"
      << "property list uchar int vertex_indices\nend_header\n";
  for (const auto& v : mesh.vertices) {
    put(out, v.x());
    put(out, v.y());
    put(out, v.z());
  }
  for (const auto& t : mesh.triangles) {
    put(out, std::uint8_t{3});
    for (auto i : t) put(out, i);
  }
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

TriangleMesh read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "ply") throw Error(ErrorCode::Format, "not a PLY file");
  std::vector<Element> elements;
  bool binary = false;
  while (true) {
    if (!std::getline(in, line)) throw Error(ErrorCode::Format, "PLY header has no end_header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "end_header") break;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      binary = fmt == "binary_little_endian";
    } else if (word == "element") {
      Element e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) throw Error(ErrorCode::Format, "PLY property before element");
      Property p;
      ls >> p.type;
      if (p.type == "list") ls >> p.count_type >> p.type;
      ls >> p.name;
      elements.back().properties.push_back(p);
    }
  }
  if (!binary) throw Error(ErrorCode::Format, "only binary_little_endian PLY is supported");

  TriangleMesh mesh;
  for (const auto& e : elements) {
    for (std::size_t i = 0; i < e.count; ++i) {
      Vec3 v = Vec3::Zero();
      for (const auto& p : e.properties) {
        if (!p.count_type.empty()) {
          const auto m = static_cast<std::size_t>(read_scalar(in, p.count_type));
          std::vector<std::int32_t> idx(m);
          for (auto& x : idx) x = static_cast<std::int32_t>(read_scalar(in, p.type));
          if (e.name == "face" && p.name == "vertex_indices") {
            for (std::size_t k = 2; k < m; ++k) mesh.triangles.push_back({idx[0], idx[k - 1], idx[k]});
          }
          continue;
        }
        const double x = read_scalar(in, p.type);
        if (e.name != "vertex") continue;
        if (p.name == "x") v.x() = x;
        if (p.name == "y") v.y() = x;
        if (p.name == "z") v.z() = x;
      }
      if (e.name == "vertex") mesh.vertices.push_back(v);
    }
  }
  mesh.check();
  return mesh;
}

std::vector<Vec3> sample_mesh_points(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n == 0) return {};
  std::vector<double> cumulative;
  cumulative.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& t : mesh.triangles) {
    const Vec3& a = mesh.vertices.at(t[0]);
    total += 0.5 * (mesh.vertices.at(t[1]) - a).cross(mesh.vertices.at(t[2]) - a).norm();
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) throw Error(ErrorCode::EmptyMesh, "mesh has no surface to sample");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) --it;
    const auto& t = mesh.triangles[static_cast<std::size_t>(it - cumulative.begin())];
    const double r1 = std::sqrt(unit(rng));
    const double r2 = unit(rng);
    out.push_back((1.0 - r1) * mesh.vertices[t[0]] + r1 * (1.0 - r2) * mesh.vertices[t[1]] +
                  r1 * r2 * mesh.vertices[t[2]]);
  }
  return out;
}

}  // namespace circle::extract_eval
