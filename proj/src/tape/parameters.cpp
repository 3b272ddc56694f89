#include "circle/tape.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace circle::tape {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as native little-endian doubles");

Parameter& ParameterStore::add(const std::string& name, std::vector<std::size_t> shape) {
  if (find(name)) throw Error(ErrorCode::InvalidArgument, "duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor(shape);
  p->grad = Tensor(std::move(shape));
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::add_kaiming(const std::string& name, std::vector<std::size_t> shape,
                                       std::size_t fan_in, double slope, std::mt19937_64& rng) {
  Parameter& p = add(name, std::move(shape));
  const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value.values()) v = dist(rng);
  return p;
}

Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown parameter " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  if (const Parameter* p = find(name)) return *p;
  throw Error(ErrorCode::InvalidArgument, "unknown parameter " + name);
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    if (!p->grad.same_shape(p->value)) p->grad = Tensor(p->value.shape());
    p->grad.fill(0.0);
  }
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string());
  out << "CIRC1\n" << params_.size() << '\n';
  std::size_t offset = 0;
  for (const auto& p : params_) {
    out << p->name << ' ' << p->value.shape().size();
    for (auto d : p->value.shape()) out << ' ' << d;
    out << ' ' << offset << '\n';
    offset += p->value.size();
  }
  out << "DATA\n";
  for (const auto& p : params_) {
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing checkpoint " + path.string());
}

void ParameterStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "CIRC1") throw Error(ErrorCode::Format, "not a CIRC1 checkpoint: " + path.string());
  std::getline(in, line);
  const std::size_t count = std::stoul(line);
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    std::getline(in, line);
    std::istringstream ss(line);
    Entry e;
    std::size_t rank = 0;
    ss >> e.name >> rank;
    e.shape.resize(rank);
    for (auto& d : e.shape) ss >> d;
    ss >> e.offset;
    if (!ss) throw Error(ErrorCode::Format, "malformed checkpoint manifest line: " + line);
    entries.push_back(std::move(e));
  }
  std::getline(in, line);
  if (line != "DATA") throw Error(ErrorCode::Format, "checkpoint manifest not terminated");
  const auto payload_start = in.tellg();
  for (const auto& e : entries) {
    Parameter& p = get(e.name);
    if (p.value.shape() != e.shape) {
      throw Error(ErrorCode::ShapeMismatch, "checkpoint shape differs for " + e.name);
    }
    in.seekg(payload_start + static_cast<std::streamoff>(e.offset * sizeof(double)));
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!in) throw Error(ErrorCode::Format, "truncated checkpoint payload for " + e.name);
  }
}

}  // namespace circle::tape
