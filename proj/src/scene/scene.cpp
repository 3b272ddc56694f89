#include "circle/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace circle::scene {

namespace {

double box_distance(const Vec3& p, const Vec3& c, const Vec3& h) {
  const Vec3 q = (p - c).cwiseAbs() - h;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

/// One axis-aligned face of a box clipped to [lo, hi]: the face lies at
/// coordinate `level` on `axis` and spans [a0, a1] x [b0, b1] on the others.
struct Face {
  int axis = 0;
  double level = 0.0;
  double a0 = 0.0, a1 = 0.0, b0 = 0.0, b1 = 0.0;

  double area() const { return std::max(a1 - a0, 0.0) * std::max(b1 - b0, 0.0); }
};

std::array<Face, 6> box_faces(const Vec3& c, const Vec3& h, const Vec3& lo, const Vec3& hi) {
  std::array<Face, 6> faces;
  for (int axis = 0; axis < 3; ++axis) {
    const int a = (axis + 1) % 3;
    const int b = (axis + 2) % 3;
    for (int side = 0; side < 2; ++side) {
      Face& f = faces[axis * 2 + side];
      f.axis = axis;
      f.level = c[axis] + (side ? h[axis] : -h[axis]);
      f.a0 = std::max(c[a] - h[a], lo[a]);
      f.a1 = std::min(c[a] + h[a], hi[a]);
      f.b0 = std::max(c[b] - h[b], lo[b]);
      f.b1 = std::min(c[b] + h[b], hi[b]);
      if (f.level < lo[axis] || f.level > hi[axis]) f.a1 = f.a0;
    }
  }
  return faces;
}

Vec3 unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    const Vec3 v(g(rng), g(rng), g(rng));
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

const char* kind_name(Primitive::Kind k) {
  switch (k) {
    case Primitive::Kind::Box: return "box";
    case Primitive::Kind::Sphere: return "sphere";
    case Primitive::Kind::Cylinder: return "cylinder";
    case Primitive::Kind::Room: return "room";
  }
  return "?";
}

Primitive::Kind parse_kind(const std::string& s) {
  if (s == "box") return Primitive::Kind::Box;
  if (s == "sphere") return Primitive::Kind::Sphere;
  if (s == "cylinder") return Primitive::Kind::Cylinder;
  if (s == "room") return Primitive::Kind::Room;
  throw Error(ErrorCode::Format, "unknown primitive " + s);
}

}  // namespace

double Primitive::distance(const Vec3& p) const {
  switch (kind) {
    case Kind::Box: return box_distance(p, center, size);
    case Kind::Room: return -box_distance(p, center, size);
    case Kind::Sphere: return (p - center).norm() - size.x();
    case Kind::Cylinder: {
      const Vec3 q = p - center;
      const double dr = std::hypot(q.x(), q.y()) - size.x();
      const double dz = std::abs(q.z()) - size.z();
      return std::min(std::max(dr, dz), 0.0) + std::hypot(std::max(dr, 0.0), std::max(dz, 0.0));
    }
  }
  return 0.0;
}

double Primitive::area(const Vec3& lo, const Vec3& hi) const {
  switch (kind) {
    case Kind::Box:
    case Kind::Room: {
      double a = 0.0;
      for (const Face& f : box_faces(center, size, lo, hi)) a += f.area();
      return a;
    }
    case Kind::Sphere: return 4.0 * std::numbers::pi * size.x() * size.x();
    case Kind::Cylinder: {
      const double r = size.x();
      return 2.0 * std::numbers::pi * r * (2.0 * size.z()) + 2.0 * std::numbers::pi * r * r;
    }
  }
  return 0.0;
}

Vec3 Primitive::sample_surface(const Vec3& lo, const Vec3& hi, std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (kind) {
    case Kind::Box:
    case Kind::Room: {
      const auto faces = box_faces(center, size, lo, hi);
      std::array<double, 6> w{};
      for (int i = 0; i < 6; ++i) w[i] = faces[i].area();
      std::discrete_distribution<int> pick(w.begin(), w.end());
      const Face& f = faces[pick(rng)];
      Vec3 p;
      p[f.axis] = f.level;
      p[(f.axis + 1) % 3] = f.a0 + u(rng) * (f.a1 - f.a0);
      p[(f.axis + 2) % 3] = f.b0 + u(rng) * (f.b1 - f.b0);
      return p;
    }
    case Kind::Sphere: return center + size.x() * unit_vector(rng);
    case Kind::Cylinder: {
      const double r = size.x();
      const double h = size.z();
      const double side = 2.0 * std::numbers::pi * r * 2.0 * h;
      const double cap = std::numbers::pi * r * r;
      const double pick = u(rng) * (side + 2.0 * cap);
      const double phi = 2.0 * std::numbers::pi * u(rng);
      if (pick < side) {
        return center + Vec3(r * std::cos(phi), r * std::sin(phi), -h + 2.0 * h * u(rng));
      }
      const double rr = r * std::sqrt(u(rng));
      const double z = pick < side + cap ? -h : h;
      return center + Vec3(rr * std::cos(phi), rr * std::sin(phi), z);
    }
  }
  return center;
}

GtScene::GtScene(std::vector<CsgTerm> terms, Vec3 bounds_lo, Vec3 bounds_hi)
    : terms_(std::move(terms)), lo_(bounds_lo), hi_(bounds_hi) {
  if ((hi_.array() <= lo_.array()).any()) {
    throw Error(ErrorCode::InvalidArgument, "scene bounds are empty");
  }
}

double GtScene::sdf(const Vec3& p) const {
  double s = std::numeric_limits<double>::infinity();
  for (const auto& term : terms_) {
    const double d = term.primitive.distance(p);
    s = term.op == CsgTerm::Op::Union ? std::min(s, d) : std::max(s, -d);
  }
  return s;
}

Vec3 GtScene::normal(const Vec3& p, double h) const {
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = h;
    g[a] = (sdf(p + e) - sdf(p - e)) / (2.0 * h);
  }
  const double n = g.norm();
  return n > 0.0 ? Vec3(g / n) : Vec3::Zero();
}

bool GtScene::in_bounds(const Vec3& p) const {
  return (p.array() >= lo_.array()).all() && (p.array() <= hi_.array()).all();
}

std::vector<Vec3> GtScene::sample_surface(std::size_t n, std::uint64_t seed) const {
  std::vector<Vec3> out;
  if (n == 0) return out;
  std::vector<double> areas;
  for (const auto& term : terms_) areas.push_back(term.primitive.area(lo_, hi_));
  if (terms_.empty() || *std::max_element(areas.begin(), areas.end()) <= 0.0) {
    throw Error(ErrorCode::EmptyScene, "scene has no surface inside its bounds");
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  out.reserve(n);
  const std::size_t max_tries = 1000 * n + 1000;
  for (std::size_t tries = 0; out.size() < n; ++tries) {
    if (tries > max_tries) throw Error(ErrorCode::EmptyScene, "visible surface too small to sample");
    const Vec3 p = terms_[pick(rng)].primitive.sample_surface(lo_, hi_, rng);
    if (in_bounds(p) && std::abs(sdf(p)) < 1e-9) out.push_back(p);
  }
  return out;
}

double GtScene::trace(const Vec3& o, const Vec3& d, double t_max) const {
  const Vec3 dir = d.normalized();
  double t = 0.0;
  for (int i = 0; i < 100000 && t <= t_max; ++i) {
    const Vec3 p = o + t * dir;
    if (!in_bounds(p)) return 0.0;
    const double s = sdf(p);
    if (s < 1e-10) return t;
    t += s;
  }
  return 0.0;
}

void GtScene::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.precision(17);
  out << "bounds " << lo_.transpose() << ' ' << hi_.transpose() << '\n';
  for (const auto& t : terms_) {
    const auto& p = t.primitive;
    out << (t.op == CsgTerm::Op::Union ? "union " : "subtract ") << kind_name(p.kind) << ' '
        << p.center.transpose() << ' ' << p.size.transpose() << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

GtScene GtScene::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line, word;
  Vec3 lo, hi;
  std::getline(in, line);
  {
    std::istringstream s(line);
    s >> word >> lo.x() >> lo.y() >> lo.z() >> hi.x() >> hi.y() >> hi.z();
    if (!s || word != "bounds") throw Error(ErrorCode::Format, "missing scene bounds");
  }
  std::vector<CsgTerm> terms;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream s(line);
    std::string op, kind;
    CsgTerm t;
    s >> op >> kind >> t.primitive.center.x() >> t.primitive.center.y() >> t.primitive.center.z() >>
        t.primitive.size.x() >> t.primitive.size.y() >> t.primitive.size.z();
    if (!s || (op != "union" && op != "subtract")) {
      throw Error(ErrorCode::Format, "malformed scene term: " + line);
    }
    t.op = op == "union" ? CsgTerm::Op::Union : CsgTerm::Op::Subtract;
    t.primitive.kind = parse_kind(kind);
    terms.push_back(t);
  }
  return GtScene(std::move(terms), lo, hi);
}

GtScene make_room(std::uint64_t seed, const RoomOptions& options) {
  if (options.min_objects < 0 || options.max_objects < options.min_objects) {
    throw Error(ErrorCode::InvalidArgument, "bad object count range");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double a, double b) { return a + (b - a) * u(rng); };

  const Vec3 origin(range(0.003, 0.047), range(0.003, 0.047), range(0.003, 0.047));
  const double w = options.width, dp = options.depth, wh = options.wall_height;
  std::vector<CsgTerm> terms;
  Primitive room;
  room.kind = Primitive::Kind::Room;
  room.center = origin + Vec3(w / 2, dp / 2, 10.0);
  room.size = Vec3(w / 2, dp / 2, 10.0);
  terms.push_back({CsgTerm::Op::Union, room});

  const double margin = 0.2;
  const int count = std::uniform_int_distribution<int>(options.min_objects, options.max_objects)(rng);
  std::vector<CsgTerm> carves;
  for (int i = 0; i < count; ++i) {
    Primitive p;
    const Vec3 spot(origin.x() + range(margin, w - margin), origin.y() + range(margin, dp - margin),
                    origin.z());
    switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
      case 0: {
        p.kind = Primitive::Kind::Box;
        p.size = Vec3(range(0.05, 0.12), range(0.05, 0.12), range(0.04, 0.12));
        p.center = spot + Vec3(0, 0, p.size.z());
        if (u(rng) < 0.5) {
          Primitive bowl;
          bowl.kind = Primitive::Kind::Sphere;
          bowl.size.x() = 0.6 * std::min({p.size.x(), p.size.y(), 2.0 * p.size.z()});
          bowl.center = p.center + Vec3(0, 0, p.size.z());
          carves.push_back({CsgTerm::Op::Subtract, bowl});
        }
        break;
      }
      case 1: {
        p.kind = Primitive::Kind::Sphere;
        p.size.x() = range(0.05, 0.1);
        p.center = spot + Vec3(0, 0, 0.8 * p.size.x());
        break;
      }
      default: {
        p.kind = Primitive::Kind::Cylinder;
        p.size = Vec3(range(0.04, 0.08), 0.0, range(0.05, 0.15));
        p.center = spot + Vec3(0, 0, p.size.z());
        break;
      }
    }
    terms.push_back({CsgTerm::Op::Union, p});
  }
  terms.insert(terms.end(), carves.begin(), carves.end());
  return GtScene(std::move(terms), origin - Vec3::Constant(0.1),
                 origin + Vec3(w + 0.1, dp + 0.1, wh));
}

std::vector<geom::Pose> circular_poses(const GtScene& scene, const CameraPath& path) {
  if (path.frames <= 0) throw Error(ErrorCode::InvalidArgument, "camera path needs at least one frame");
  const Vec3 mid = 0.5 * (scene.lo() + scene.hi());
  const Vec3 floor_center(mid.x(), mid.y(), scene.lo().z() + 0.1);
  std::vector<geom::Pose> poses;
  for (int i = 0; i < path.frames; ++i) {
    const double a = 2.0 * std::numbers::pi * i / path.frames;
    const Vec3 radial(std::cos(a), std::sin(a), 0.0);
    const Vec3 eye = floor_center + path.radius * radial + Vec3(0, 0, path.height_above_floor);
    const Vec3 target = floor_center - 0.25 * radial + Vec3(0, 0, 0.05);
    const Vec3 z = (target - eye).normalized();
    const Vec3 x = z.cross(Vec3::UnitZ()).normalized();
    const Vec3 y = z.cross(x);
    geom::Pose pose;
    pose.rotation.col(0) = x;
    pose.rotation.col(1) = y;
    pose.rotation.col(2) = z;
    pose.translation = eye;
    poses.push_back(pose);
  }
  return poses;
}

std::vector<ingest::DepthFrame> render_frames(const GtScene& scene, const CameraPath& path) {
  geom::Intrinsics k;
  k.fx = k.fy = path.focal;
  k.cx = 0.5 * (path.width - 1);
  k.cy = 0.5 * (path.height - 1);
  k.width = path.width;
  k.height = path.height;
  k.validate();
  const auto poses = circular_poses(scene, path);
  std::vector<ingest::DepthFrame> frames;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    auto frame = ingest::DepthFrame::blank(k, poses[i], static_cast<int>(i));
    parallel_for(static_cast<std::size_t>(k.height), [&](std::size_t v) {
      for (int u = 0; u < k.width; ++u) {
        const Vec3 dc = geom::camera_ray(k, u, static_cast<double>(v));
        const Vec3 dw = poses[i].rotate(dc);
        const double t = scene.trace(poses[i].translation, dw / dw.norm());
        frame.at(u, static_cast<int>(v)) = t > 0.0 ? t / dw.norm() : 0.0;
      }
    });
    frames.push_back(std::move(frame));
  }
  return frames;
}

}  // namespace circle::scene
