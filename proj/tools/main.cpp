#include "config.hpp"

#include "circle/extract_eval.hpp"
#include "circle/ingest.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

using namespace circle;
using nlohmann::json;

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool verbose = false;

  std::string out, scene, grid, ckpt, log, grid_out, poses_out, stats, method = "implicit", pred, gt;
  std::optional<int> frames, iters, frame, samples, frame_stride, checkpoint_every;
  std::optional<double> res, tau, voxel_size, depth_noise;
  std::vector<double> pose_noise;  // meters, degrees
};

void fail_json(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << std::endl;
}

class Log {
 public:
  explicit Log(bool on) : on_(on), start_(std::chrono::steady_clock::now()) {}
  template <typename... T>
  void operator()(const char* fmt, T... args) const {
    if (!on_) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::fprintf(stderr, "[%8.1fs] ", s);
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
  }

 private:
  bool on_;
  std::chrono::steady_clock::time_point start_;
};

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.precision(17);
  return out;
}

cli::Config resolve_config(const Args& a) {
  cli::Config c;
  if (!a.ckpt.empty() && std::filesystem::exists(cli::sidecar(a.ckpt))) {
    const json side = cli::read_json(cli::sidecar(a.ckpt));
    if (side.contains("model")) cli::merge(c, json{{"model", side["model"]}});
  }
  if (!a.config.empty()) cli::merge(c, cli::read_json(a.config));
  if (a.seed) c.seed = *a.seed;
  if (a.threads) c.threads = *a.threads;
  if (a.frames) c.synth.path.frames = *a.frames;
  if (a.samples) {
    c.synth.gt_samples = static_cast<std::size_t>(*a.samples);
    c.eval.samples = static_cast<std::size_t>(*a.samples);
  }
  if (a.iters) {
    c.train.iterations = *a.iters;
    c.refine.iterations = *a.iters;
  }
  if (a.tau) c.eval.tau = *a.tau;
  if (a.voxel_size) c.model.voxel_size = *a.voxel_size;
  if (a.frame_stride) c.ingest.frame_stride = *a.frame_stride;
  if (a.depth_noise) c.ingest.depth_noise = *a.depth_noise;
  if (a.pose_noise.size() == 2) {
    c.ingest.pose_noise_t = a.pose_noise[0];
    c.ingest.pose_noise_deg = a.pose_noise[1];
  }
  if (a.res) {
    const double n = c.model.voxel_size / *a.res;
    if (!(n >= 1.0) || std::abs(n - std::round(n)) > 1e-9) {
      throw Error(ErrorCode::InvalidArgument, "--res must divide the voxel size");
    }
    c.extract_subdivisions = static_cast<int>(std::round(n));
  }
  c.resolve();
  set_worker_count(c.threads);
  return c;
}

struct Loaded {
  std::unique_ptr<circnet::CircNet> net;
  std::unique_ptr<circnet::LocalImplicitField> field;
  render::OctreeIndex octree;
};

Loaded load_field(const cli::Config& c, const Args& a) {
  Loaded l;
  l.net = std::make_unique<circnet::CircNet>(c.model);
  l.net->load(a.ckpt);
  auto grid = circnet::load_grid(a.grid);
  l.octree = render::OctreeIndex(grid.keys, c.model.levels(), grid.voxel_size);
  l.field = std::make_unique<circnet::LocalImplicitField>(*l.net, std::move(grid));
  return l;
}

struct Input {
  std::vector<ingest::DepthFrame> frames;
  std::optional<scene::GtScene> gt;
};

/// Frames of `--scene`, a directory or `synthetic:<seed>`, with the ingest settings applied.
Input load_input(const std::string& scene_arg, const cli::Config& c) {
  const auto options = c.ingest.options(c.seed);
  const std::string prefix = "synthetic:";
  Input in;
  if (scene_arg.rfind(prefix, 0) == 0) {
    const std::string digits = scene_arg.substr(prefix.size());
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorCode::InvalidArgument, "expected synthetic:<seed>, got " + scene_arg);
    }
    in.gt = scene::make_room(std::stoull(digits), c.synth.room);
    const auto all = scene::render_frames(*in.gt, c.synth.path);
    std::vector<ingest::DepthFrame> kept;
    for (std::size_t i = 0; i < all.size(); i += static_cast<std::size_t>(options.frame_stride)) kept.push_back(all[i]);
    in.frames = ingest::apply_noise(kept, options);
    return in;
  }
  const std::filesystem::path dir = scene_arg;
  in.frames = ingest::load_scene(dir, options);
  if (std::filesystem::exists(dir / "scene.txt")) in.gt = scene::GtScene::load(dir / "scene.txt");
  return in;
}

std::vector<Vec3> mesh_points(const extract_eval::TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (mesh.triangles.empty()) return mesh.vertices;
  return extract_eval::sample_mesh_points(mesh, n, seed);
}

void cmd_synth(const Args& a, const Log& log) {
  const auto c = resolve_config(a);
  const std::filesystem::path dir = a.out;
  const auto gt = scene::make_room(c.seed, c.synth.room);
  const auto frames = scene::render_frames(gt, c.synth.path);
  log("rendered %zu frames", frames.size());
  ingest::save_scene_frames(dir, frames);
  gt.save(dir / "scene.txt");
  extract_eval::TriangleMesh points;
  points.vertices = gt.sample_surface(c.synth.gt_samples, c.seed);
  extract_eval::write_ply(dir / "gt.ply", points);
  cli::write_json(dir / "config.json", cli::to_json(c));
  log("wrote %s", dir.c_str());
}

void cmd_fit(const Args& a, const Log& log) {
  const auto c = resolve_config(a);
  const auto in = load_input(a.scene, c);
  if (!in.gt) throw Error(ErrorCode::Io, "fit needs ground truth: " + a.scene + "/scene.txt is missing");
  circnet::CircNet net(c.model);
  const auto whole = train::make_training_scene(*in.gt, in.frames, c.model);
  const auto patches = train::split_patches(whole, c.train.patch_size, c.model.levels());
  if (patches.empty()) throw Error(ErrorCode::EmptyScene, "no patch has both observations and ground truth");
  log("%zu patches, %zu observed voxels", patches.size(), whole.bins.voxels.size());

  std::ofstream csv;
  if (!a.log.empty()) {
    csv = open_out(a.log);
    csv << "iter,L_sdf,L_norm,L_struct,L_reg,total\n";
  }
  auto save_checkpoint = [&] {
    net.save(a.out);
    cli::write_json(cli::sidecar(a.out), cli::to_json(c));
  };
  const int every = a.checkpoint_every.value_or(0);
  train::Trainer trainer(net, c.train);
  trainer.fit(patches, [&](int it, const train::LossValues& v) {
    if (csv.is_open()) {
      csv << it << ',' << v.sdf << ',' << v.norm << ',' << v.structure << ',' << v.reg << ',' << v.total << '\n';
    }
    if (it % 50 == 0) log("iter %d total %.5f", it, v.total);
    if (every > 0 && (it + 1) % every == 0) save_checkpoint();
  });
  save_checkpoint();
  const std::filesystem::path grid_path =
      a.grid_out.empty() ? std::filesystem::path(a.out).parent_path() / "scene.grid" : std::filesystem::path(a.grid_out);
  const auto grid = net.infer(whole.bins);
  circnet::save_grid(grid_path, grid);
  cli::write_json(cli::sidecar(grid_path), cli::to_json(c));
  log("grid with %zu voxels", grid.size());
}

void cmd_render(const Args& a, const Log& log) {
  const auto c = resolve_config(a);
  const auto l = load_field(c, a);
  const auto frames = load_input(a.scene, c).frames;
  const auto index = static_cast<std::size_t>(a.frame.value_or(0));
  if (index >= frames.size()) throw Error(ErrorCode::InvalidArgument, "--frame is out of range");
  const auto& f = frames[index];
  render::RenderResult r;
  if (a.method == "implicit") {
    r = render::render_depth(*l.field, l.octree, f.intrinsics, f.pose, nullptr, c.render);
  } else {
    r = render::render_depth_ad(*l.field, l.octree, f.intrinsics, f.pose, nullptr, c.render).render;
  }
  r.depth.frame_id = f.frame_id;
  ingest::write_depth_png(a.out, r.depth);
  const auto& s = r.stats;
  const json report{{"method", a.method},
                    {"frame", f.frame_id},
                    {"rays", s.rays},
                    {"hits", s.hits},
                    {"evaluations", s.evaluations},
                    {"retained_states", s.retained_states},
                    {"mean_evaluations_per_ray", s.mean_evaluations()},
                    {"mean_retained_per_ray", s.mean_retained()}};
  if (!a.stats.empty()) cli::write_json(a.stats, report);
  cli::write_json(cli::sidecar(a.out), cli::to_json(c));
  log("%zu of %zu rays hit", s.hits, s.rays);
}

void cmd_refine(const Args& a, const Log& log) {
  const auto c = resolve_config(a);
  auto l = load_field(c, a);
  const auto frames = load_input(a.scene, c).frames;

  std::ofstream csv;
  if (!a.log.empty()) {
    csv = open_out(a.log);
    csv << "iter,residual,used,excluded_fraction\n";
  }
  const auto result = refine::refine(frames, *l.field, l.octree, c.refine, [&](int it, const refine::Residual& r) {
    if (csv.is_open()) csv << it << ',' << r.value << ',' << r.used << ',' << r.excluded_fraction << '\n';
    if (it % 20 == 0) log("iter %d residual %.6f", it, r.value);
  });
  circnet::save_grid(a.out, result.grid);
  cli::write_json(cli::sidecar(a.out), cli::to_json(c));
  if (!a.poses_out.empty()) {
    std::vector<geom::IndexedPose> poses;
    for (std::size_t t = 0; t < frames.size(); ++t) poses.push_back({frames[t].frame_id, result.poses[t]});
    geom::write_poses(a.poses_out, poses);
  }
}

void cmd_extract(const Args& a, const Log& log) {
  const auto c = resolve_config(a);
  const auto l = load_field(c, a);
  const auto mesh = extract_eval::marching_cubes(*l.field, c.extract_subdivisions);
  extract_eval::write_ply(a.out, mesh);
  cli::write_json(cli::sidecar(a.out), cli::to_json(c));
  log("%zu vertices, %zu triangles", mesh.vertices.size(), mesh.triangles.size());
}

void cmd_eval(const Args& a, const Log& log) {
  const auto c = resolve_config(a);
  const auto pred = mesh_points(extract_eval::read_ply(a.pred), c.eval.samples, c.seed);
  const auto gt = mesh_points(extract_eval::read_ply(a.gt), c.eval.samples, c.seed + 1);
  const auto r = extract_eval::evaluate(pred, gt, c.eval.tau);
  const json report{{"rmse", r.rmse},           {"chamfer", r.chamfer},       {"precision", r.precision},
                    {"recall", r.recall},       {"fscore", r.fscore},         {"tau", r.tau},
                    {"pred_points", r.pred_points}, {"gt_points", r.gt_points}};
  if (a.out.empty()) {
    std::cout << report.dump(2) << std::endl;
  } else {
    cli::write_json(a.out, report);
    cli::write_json(cli::sidecar(a.out), cli::to_json(c));
  }
  log("chamfer %.6f fscore %.2f", r.chamfer, r.fscore);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse local implicit scene reconstruction"};
  app.require_subcommand(1);
  Args a;
  app.add_option("--config", a.config, "JSON configuration; flags override it");
  app.add_option("--seed", a.seed, "Seed for every random choice");
  app.add_option("--threads", a.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", a.verbose, "Progress on stderr");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic room with depth frames and gt samples");
  synth->add_option("--out", a.out, "Scene directory")->required();
  synth->add_option("--frames", a.frames, "Frames on the camera circle");
  synth->add_option("--samples", a.samples, "Ground-truth surface samples");

  auto* fit = app.add_subcommand("fit", "Train the network on a synthetic scene");
  fit->add_option("--scene", a.scene, "Scene directory or synthetic:<seed>")->required();
  fit->add_option("--out", a.out, "Checkpoint path")->required();
  fit->add_option("--iters", a.iters, "Training iterations");
  fit->add_option("--log", a.log, "Loss CSV");
  fit->add_option("--grid-out", a.grid_out, "Inferred latent grid (default scene.grid next to the checkpoint)");
  fit->add_option("--checkpoint-every", a.checkpoint_every, "Save the checkpoint every n iterations")
      ->check(CLI::PositiveNumber);
  fit->add_option("--voxel-size", a.voxel_size, "Finest voxel side in meters")->check(CLI::PositiveNumber);

  auto* rend = app.add_subcommand("render", "Sphere-trace one frame of a latent grid");
  rend->add_option("--grid", a.grid, "Latent grid")->required();
  rend->add_option("--ckpt", a.ckpt, "Checkpoint")->required();
  rend->add_option("--scene", a.scene, "Scene directory or synthetic:<seed> with the camera poses")->required();
  rend->add_option("--frame", a.frame, "Frame index");
  rend->add_option("--method", a.method, "Gradient bookkeeping")->check(CLI::IsMember({"implicit", "ad"}));
  rend->add_option("--out", a.out, "Depth PNG")->required();
  rend->add_option("--stats", a.stats, "Render statistics JSON");

  auto* ref = app.add_subcommand("refine", "Jointly refine latents and camera poses");
  ref->add_option("--grid", a.grid, "Latent grid")->required();
  ref->add_option("--ckpt", a.ckpt, "Checkpoint")->required();
  ref->add_option("--scene", a.scene, "Scene directory or synthetic:<seed>")->required();
  ref->add_option("--iters", a.iters, "Refinement iterations");
  ref->add_option("--out", a.out, "Refined grid")->required();
  ref->add_option("--poses-out", a.poses_out, "Refined poses");
  ref->add_option("--log", a.log, "Residual CSV");

  for (auto* sub : {fit, ref}) {
    sub->add_option("--frame-stride", a.frame_stride, "Use every n-th frame")->check(CLI::PositiveNumber);
    sub->add_option("--depth-noise", a.depth_noise, "Gaussian depth noise sigma in meters")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--pose-noise", a.pose_noise, "Pose noise sigmas: meters and degrees")
        ->expected(2)
        ->check(CLI::NonNegativeNumber);
  }

  auto* ext = app.add_subcommand("extract", "Marching cubes over the active voxels");
  ext->add_option("--grid", a.grid, "Latent grid")->required();
  ext->add_option("--ckpt", a.ckpt, "Checkpoint")->required();
  ext->add_option("--out", a.out, "Mesh PLY")->required();
  ext->add_option("--res", a.res, "Cell size; must divide the voxel size");

  auto* ev = app.add_subcommand("eval", "Compare a predicted mesh with ground truth");
  ev->add_option("--pred", a.pred, "Predicted mesh PLY")->required();
  ev->add_option("--gt", a.gt, "Ground-truth mesh or point PLY")->required();
  ev->add_option("--samples", a.samples, "Points sampled from each mesh");
  ev->add_option("--tau", a.tau, "Distance threshold in meters");
  ev->add_option("--out", a.out, "Report JSON (stdout when absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_json("Usage", e.what());
    return 2;
  }

  const Log log(a.verbose);
  try {
    if (synth->parsed()) cmd_synth(a, log);
    if (fit->parsed()) cmd_fit(a, log);
    if (rend->parsed()) cmd_render(a, log);
    if (ref->parsed()) cmd_refine(a, log);
    if (ext->parsed()) cmd_extract(a, log);
    if (ev->parsed()) cmd_eval(a, log);
  } catch (const Error& e) {
    fail_json(std::string(to_string(e.code())), e.what());
    return 1;
  } catch (const std::exception& e) {
    fail_json("Internal", e.what());
    return 1;
  }
  return 0;
}
