#pragma once

#include "circle/circnet.hpp"
#include "circle/refine.hpp"
#include "circle/render.hpp"
#include "circle/scene.hpp"
#include "circle/train.hpp"

#include <json.hpp>

#include <filesystem>

namespace circle::cli {

struct SynthConfig {
  scene::RoomOptions room;
  scene::CameraPath path;
  std::size_t gt_samples = 100000;
};

/// Degradation applied to scene frames as they are loaded.
struct IngestConfig {
  int frame_stride = 1;
  double depth_noise = 0.0;     // meters
  double pose_noise_t = 0.0;    // meters
  double pose_noise_deg = 0.0;

  ingest::SceneLoadOptions options(std::uint64_t seed) const;
};

struct EvalConfig {
  std::size_t samples = 100000;
  double tau = 0.02;
};

/// Every tunable of every command. One `seed` drives all randomness.
struct Config {
  std::uint64_t seed = 0;
  int threads = 1;
  circnet::ModelConfig model;
  train::TrainConfig train;
  refine::RefineConfig refine;
  render::TraceConfig render;
  SynthConfig synth;
  IngestConfig ingest;
  int extract_subdivisions = 2;
  EvalConfig eval;

  /// Copies the global seed into the per-module configs and validates them.
  void resolve();
};

nlohmann::json to_json(const Config& config);
/// Keys present in `j` override `config`; absent keys keep their value.
void merge(Config& config, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// `<output>.config.json`, written next to every output.
std::filesystem::path sidecar(const std::filesystem::path& output);

}  // namespace circle::cli
