#include "config.hpp"

#include <fstream>
#include <numbers>

namespace circle {

namespace circnet {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, latent_dim, encoder_layers, encoder_hidden,
                                                unet_channels, decoder_layers, decoder_hidden, voxel_size,
                                                slope, seed)
}
namespace train {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, alpha, beta, delta, learning_rate, final_lr_scale,
                                                uniform_per_voxel, band_per_voxel, band_half_width,
                                                iterations, patch_size, seed)
}
namespace render {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TraceConfig, safety, min_step, iso, max_steps, t_max, grazing)
}
namespace refine {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RefineConfig, iterations, rays_per_frame, lr_latent, lr_pose,
                                                seed, trace)
}
namespace scene {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RoomOptions, width, depth, wall_height, min_objects,
                                                max_objects)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CameraPath, frames, width, height, focal, radius,
                                                height_above_floor)
}
namespace cli {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, room, path, gt_samples)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(IngestConfig, frame_stride, depth_noise, pose_noise_t,
                                                pose_noise_deg)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, samples, tau)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Config, seed, threads, model, train, refine, render, synth,
                                                ingest, extract_subdivisions, eval)

ingest::SceneLoadOptions IngestConfig::options(std::uint64_t seed) const {
  ingest::SceneLoadOptions o;
  o.frame_stride = frame_stride;
  o.depth_noise = depth_noise;
  o.pose_noise_t = pose_noise_t;
  o.pose_noise_r = pose_noise_deg * std::numbers::pi / 180.0;
  o.seed = seed;
  return o;
}

void Config::resolve() {
  model.seed = seed;
  train.seed = seed;
  refine.seed = seed;
  if (threads < 1) throw Error(ErrorCode::InvalidArgument, "threads must be at least 1");
  if (extract_subdivisions < 1) throw Error(ErrorCode::InvalidArgument, "extract_subdivisions must be at least 1");
  if (eval.tau <= 0.0) throw Error(ErrorCode::InvalidArgument, "eval tau must be positive");
  if (ingest.frame_stride < 1) throw Error(ErrorCode::InvalidArgument, "frame stride must be at least 1");
  if (ingest.depth_noise < 0.0 || ingest.pose_noise_t < 0.0 || ingest.pose_noise_deg < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "noise levels must be non-negative");
  }
  if (synth.path.frames < 1) throw Error(ErrorCode::InvalidArgument, "at least one frame is required");
  model.validate();
  train.validate();
  refine.validate();
  render.validate();
}

nlohmann::json to_json(const Config& config) {
  nlohmann::json j = config;
  return j;
}

void merge(Config& config, const nlohmann::json& j) {
  nlohmann::json base = config;
  base.merge_patch(j);
  try {
    config = base.get<Config>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format, std::string("bad configuration: ") + e.what());
  }
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::Format, path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::filesystem::path sidecar(const std::filesystem::path& output) {
  return std::filesystem::path(output.string() + ".config.json");
}

}  // namespace cli
}  // namespace circle
