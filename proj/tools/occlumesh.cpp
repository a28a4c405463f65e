#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "occlumesh/dataset.hpp"
#include "occlumesh/error.hpp"
#include "occlumesh/kernels.hpp"
#include "occlumesh/metrics.hpp"
#include "occlumesh/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace occlumesh;

namespace {

constexpr int kSchema = 1;
constexpr int kUsageExit = 2;
constexpr int kFailureExit = 1;

// Removes outputs created by a command that did not finish.
class OutputGuard {
 public:
  void track(const fs::path& p) {
    if (!p.empty() && !fs::exists(p)) created_.push_back(p);
  }
  void commit() { created_.clear(); }
  ~OutputGuard() {
    std::error_code ec;
    for (auto it = created_.rbegin(); it != created_.rend(); ++it) fs::remove_all(*it, ec);
  }

 private:
  std::vector<fs::path> created_;
};

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

void echo_config(const std::string& command, const json& config) {
  std::cerr << json({{"schema", kSchema}, {"command", command}, {"config", config}}).dump() << std::endl;
}

std::vector<fs::path> select_scenes(const fs::path& root, const std::string& range) {
  auto all = data::list_scenes(root);
  if (range.empty()) return all;
  const auto colon = range.find(':');
  require(colon != std::string::npos, ErrorCode::kInvalidArgument, "scene range must be first:last");
  const int first = std::stoi(range.substr(0, colon));
  const int last = std::stoi(range.substr(colon + 1));
  require(first >= 0 && last > first && last <= static_cast<int>(all.size()),
          ErrorCode::kInvalidArgument, "scene range " + range + " is outside the dataset");
  return {all.begin() + first, all.begin() + last};
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchema, "malformed JSON in " + p.string() + ": " + e.what());
  }
}

// --- gen ---------------------------------------------------------------------

struct GenArgs {
  int scenes = 64;
  int views = 10;
  int res = 128;
  int mesh_res = 96;
  std::uint64_t seed = 0;
  fs::path out;
};

void add_gen(CLI::App& app, GenArgs& a) {
  auto* c = app.add_subcommand("gen", "Generate a synthetic hand-object dataset");
  c->add_option("--scenes", a.scenes, "Number of scenes")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--views", a.views, "Views per scene")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--res", a.res, "Image width and height in pixels")->capture_default_str()->check(CLI::Range(8, 4096));
  c->add_option("--mesh-res", a.mesh_res, "Ground-truth mesh grid resolution")->capture_default_str()->check(CLI::Range(8, 1024));
  c->add_option("--seed", a.seed, "Dataset seed")->capture_default_str();
  c->add_option("--out", a.out, "Output directory")->required();
}

int run_gen(const GenArgs& a) {
  synth::SynthConfig cfg;
  cfg.views = a.views;
  cfg.width = cfg.height = a.res;
  cfg.mesh_resolution = a.mesh_res;
  echo_config("gen", {{"scenes", a.scenes}, {"seed", a.seed}, {"synth", data::synth_config_json(cfg)}});
  OutputGuard guard;
  guard.track(a.out);
  const auto dirs = data::write_dataset(a.out, a.scenes, a.seed, cfg);
  guard.commit();
  emit({{"schema", kSchema}, {"command", "gen"}, {"out", a.out.string()}, {"scenes", dirs.size()}});
  return 0;
}

// --- pretrain / finetune -------------------------------------------------------

struct TrainArgs {
  train::Stage stage = train::Stage::kPretrain;
  fs::path data;
  fs::path out;
  fs::path config_file;
  fs::path ckpt;
  fs::path amodal_cache;
  std::string scene_range;
  std::string profile = "paper";
  std::int64_t iterations = 0;
  int rays = 0;
  int views = 0;
  double lr = 0;
  double lr_floor = 0;
  std::uint64_t seed = 0;
  double pose_noise_sigma = 0;
  double amodal_weight = 0;
  std::int64_t checkpoint_every = 0;
  int n_coarse = 0;
  int n_fine = 0;
  int eikonal_samples = 0;
  int smoothness_k = 0;
  int reference_view = -1;
  std::vector<int> holdout;
  bool zero_amodal = false;
  bool deterministic = false;
  CLI::App* cmd = nullptr;
};

void add_train(CLI::App& app, TrainArgs& a, train::Stage stage) {
  a.stage = stage;
  const auto d = train::TrainConfig::defaults(stage, train::Profile::kPaper);
  a.iterations = d.iterations;
  a.rays = d.rays_per_view;
  a.views = d.supervision_views;
  a.lr = d.lr;
  a.lr_floor = d.lr_floor;
  a.seed = d.seed;
  a.pose_noise_sigma = d.pose_noise_sigma;
  a.amodal_weight = d.amodal_weight;
  a.reference_view = d.reference_view;
  a.n_coarse = d.n_coarse;
  a.n_fine = d.n_fine;
  a.eikonal_samples = d.eikonal_samples;
  a.smoothness_k = d.smoothness_k;
  const bool fine = stage == train::Stage::kFinetune;
  auto* c = app.add_subcommand(train::to_string(stage),
                               fine ? "Finetune on hand-occluded views with the frozen amodal head"
                                    : "Pretrain on occlusion-free supervision");
  a.cmd = c;
  c->add_option("--data", a.data, "Dataset directory")->required();
  c->add_option("--out", a.out, "Run output directory")->required();
  c->add_option("--scenes", a.scene_range, "Scene subset as first:last (half-open)");
  c->add_option("--config", a.config_file, "JSON file mirroring the training config; flags override it");
  auto* ck = c->add_option("--ckpt", a.ckpt, fine ? "Pretrained checkpoint" : "Checkpoint to resume from");
  if (fine) {
    ck->required();
    c->add_option("--amodal-cache", a.amodal_cache, "Directory caching predicted amodal masks");
    c->add_flag("--zero-amodal", a.zero_amodal, "Force the predicted amodal mask to zero (ablation)");
  }
  c->add_option("--profile", a.profile, "Model and sampling profile")
      ->capture_default_str()
      ->check(CLI::IsMember({"paper", "desk"}));
  c->add_option("--iterations", a.iterations, "Training iterations")->capture_default_str();
  c->add_option("--rays", a.rays, "Rays per supervision view")->capture_default_str();
  c->add_option("--views", a.views, "Supervision views per iteration")->capture_default_str();
  c->add_option("--lr", a.lr, "Initial learning rate")->capture_default_str();
  c->add_option("--lr-floor", a.lr_floor, "Cosine decay floor")->capture_default_str();
  c->add_option("--seed", a.seed, "Training seed")->capture_default_str();
  c->add_option("--pose-noise-sigma", a.pose_noise_sigma, "Hand pose noise per joint, radians")
      ->capture_default_str();
  if (!fine)
    c->add_option("--amodal-weight", a.amodal_weight, "Weight of the amodal mask loss")->capture_default_str();
  c->add_option("--coarse-samples", a.n_coarse, "Coarse samples per ray")->capture_default_str();
  c->add_option("--fine-samples", a.n_fine, "Importance samples per ray")->capture_default_str();
  c->add_option("--eikonal-samples", a.eikonal_samples, "Eikonal box samples per iteration")->capture_default_str();
  c->add_option("--smoothness-k", a.smoothness_k, "Neighbours for the normal smoothness term")
      ->capture_default_str();
  c->add_option("--reference-view", a.reference_view, "Fixed reference view, -1 for random")
      ->capture_default_str();
  c->add_option("--holdout", a.holdout, "Views never used for supervision");
  c->add_option("--checkpoint-every", a.checkpoint_every, "Intermediate checkpoint period, 0 for none")
      ->capture_default_str();
  c->add_flag("--deterministic", a.deterministic, "Fixed-order gradient reduction");
}

train::TrainConfig resolve_config(const TrainArgs& a) {
  const auto profile = train::parse_profile(a.profile);
  auto cfg = train::TrainConfig::defaults(a.stage, profile);
  if (!a.config_file.empty()) cfg = train::TrainConfig::from_json(read_json_file(a.config_file), cfg);
  cfg.stage = a.stage;
  auto given = [&](const std::string& flag) { return a.cmd->count(flag) > 0; };
  if (given("--profile")) cfg.profile = profile;
  if (given("--iterations")) cfg.iterations = a.iterations;
  if (given("--rays")) cfg.rays_per_view = a.rays;
  if (given("--views")) cfg.supervision_views = a.views;
  if (given("--lr")) cfg.lr = a.lr;
  if (given("--lr-floor")) cfg.lr_floor = a.lr_floor;
  if (given("--seed")) cfg.seed = a.seed;
  if (given("--pose-noise-sigma")) cfg.pose_noise_sigma = a.pose_noise_sigma;
  if (a.stage == train::Stage::kPretrain && given("--amodal-weight")) cfg.amodal_weight = a.amodal_weight;
  if (given("--coarse-samples")) cfg.n_coarse = a.n_coarse;
  if (given("--fine-samples")) cfg.n_fine = a.n_fine;
  if (given("--eikonal-samples")) cfg.eikonal_samples = a.eikonal_samples;
  if (given("--smoothness-k")) cfg.smoothness_k = a.smoothness_k;
  if (given("--reference-view")) cfg.reference_view = a.reference_view;
  if (given("--holdout")) cfg.holdout_views = a.holdout;
  if (given("--checkpoint-every")) cfg.checkpoint_every = a.checkpoint_every;
  if (a.zero_amodal) cfg.zero_amodal = true;
  if (a.deterministic || kernels::deterministic_mode_from_env()) cfg.deterministic = true;
  cfg.validate();
  return cfg;
}

int run_train(const TrainArgs& a) {
  const auto cfg = resolve_config(a);
  const auto scenes = select_scenes(a.data, a.scene_range);
  std::optional<train::Checkpoint> start;
  if (!a.ckpt.empty()) start = train::load_checkpoint(a.ckpt);
  echo_config(train::to_string(a.stage), {{"train", cfg.to_json()},
                                          {"config_hash", cfg.hash()},
                                          {"scenes", scenes.size()},
                                          {"start", start ? start->hash() : ""}});
  OutputGuard guard;
  guard.track(a.out);
  if (!a.amodal_cache.empty()) guard.track(a.amodal_cache);
  data::AccessLog log;
  train::RunOptions opt;
  opt.out_dir = a.out;
  opt.amodal_cache = a.amodal_cache;
  opt.access_log = &log;
  const auto ckpt = train::run_training(cfg, scenes, start, opt);
  guard.commit();
  emit({{"schema", kSchema},
        {"command", train::to_string(a.stage)},
        {"checkpoint", (a.out / "checkpoint.ckpt").string()},
        {"checkpoint_hash", ckpt.hash()},
        {"iterations", ckpt.iteration}});
  return 0;
}

// --- render / mesh / eval ---------------------------------------------------------

struct ViewArgs {
  fs::path ckpt;
  fs::path scene;
  int ref_view = 0;
  double pose_noise_sigma = 0;
  std::uint64_t seed = 0;
};

void add_view_options(CLI::App* c, ViewArgs& a, bool required) {
  auto* ck = c->add_option("--ckpt", a.ckpt, "Trained checkpoint");
  auto* sc = c->add_option("--scene", a.scene, "Scene directory");
  if (required) {
    ck->required();
    sc->required();
  }
  c->add_option("--ref-view", a.ref_view, "Reference view index")->capture_default_str();
  c->add_option("--seed", a.seed, "Seed for pose noise")->capture_default_str();
}

struct Loaded {
  train::Checkpoint ckpt;
  train::SceneData scene;
};

Loaded load_for_inference(const ViewArgs& a) {
  Loaded l{train::load_checkpoint(a.ckpt),
           train::load_scene(data::SceneReader(a.scene), train::Stage::kPretrain)};
  require(a.ref_view >= 0 && a.ref_view < l.scene.views(), ErrorCode::kInvalidArgument,
          "reference view out of range");
  return l;
}

train::Reference reference_for(const Loaded& l, int view, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return train::make_reference(l.scene, view, train::noisy_joints(l.scene.spec, sigma, rng));
}

struct RenderArgs {
  ViewArgs view;
  int target_view = 1;
  int samples = 64;
  fs::path out;
};

void add_render(CLI::App& app, RenderArgs& a) {
  auto* c = app.add_subcommand("render", "Render a novel view of the reconstructed object");
  add_view_options(c, a.view, true);
  c->add_option("--target-view", a.target_view, "Camera index of the view to render")->capture_default_str();
  c->add_option("--samples", a.samples, "Coarse and fine samples per ray")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--out", a.out, "Output PNG")->required();
}

int run_render(const RenderArgs& a) {
  echo_config("render", {{"ckpt", a.view.ckpt.string()},
                         {"scene", a.view.scene.string()},
                         {"ref_view", a.view.ref_view},
                         {"target_view", a.target_view},
                         {"samples", a.samples}});
  const auto l = load_for_inference(a.view);
  require(a.target_view >= 0 && a.target_view < l.scene.views(), ErrorCode::kInvalidArgument,
          "target view out of range");
  const auto ref = reference_for(l, a.view.ref_view, 0.0, a.view.seed);
  const auto out = train::render_view(l.ckpt.spec, l.ckpt.params, ref, l.scene.spec.cameras[a.target_view],
                                      l.scene.bounds(a.target_view), a.samples, a.samples);
  OutputGuard guard;
  guard.track(a.out);
  write_png(a.out, out.rgb);
  guard.commit();
  emit({{"schema", kSchema}, {"command", "render"}, {"out", a.out.string()}});
  return 0;
}

struct MeshArgs {
  ViewArgs view;
  int res = metrics::kDefaultMcResolution;
  fs::path out;
};

void add_mesh(CLI::App& app, MeshArgs& a) {
  auto* c = app.add_subcommand("mesh", "Extract a coloured mesh by marching cubes");
  add_view_options(c, a.view, true);
  c->add_option("--res", a.res, "Marching-cubes resolution")->capture_default_str()->check(CLI::Range(8, 1024));
  c->add_option("--out", a.out, "Output OBJ")->required();
}

int run_mesh(const MeshArgs& a) {
  echo_config("mesh", {{"ckpt", a.view.ckpt.string()},
                       {"scene", a.view.scene.string()},
                       {"ref_view", a.view.ref_view},
                       {"res", a.res}});
  const auto l = load_for_inference(a.view);
  const auto mesh = train::extract_field_mesh(l.ckpt.spec, l.ckpt.params,
                                              reference_for(l, a.view.ref_view, 0.0, a.view.seed), a.res);
  OutputGuard guard;
  guard.track(a.out);
  metrics::write_obj(a.out, mesh);
  guard.commit();
  emit({{"schema", kSchema},
        {"command", "mesh"},
        {"out", a.out.string()},
        {"vertices", mesh.vertices.size()},
        {"faces", mesh.faces.size()}});
  return 0;
}

struct EvalArgs {
  ViewArgs view;
  fs::path pred_mesh;
  fs::path gt_mesh;
  fs::path pred_image;
  fs::path gt_image;
  fs::path mask;
  int points = metrics::kDefaultSurfacePoints;
  int res = metrics::kDefaultMcResolution;
  int target_view = -1;
  std::vector<double> noise_levels;
  CLI::App* cmd = nullptr;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* c = app.add_subcommand("eval", "Score meshes or rendered views against ground truth");
  a.cmd = c;
  add_view_options(c, a.view, false);
  c->add_option("--pred-mesh", a.pred_mesh, "Predicted OBJ");
  c->add_option("--gt-mesh", a.gt_mesh, "Ground-truth OBJ (defaults to the scene's)");
  c->add_option("--pred-image", a.pred_image, "Predicted PNG");
  c->add_option("--gt-image", a.gt_image, "Ground-truth PNG");
  c->add_option("--mask", a.mask, "Evaluation mask PNG");
  c->add_option("--points", a.points, "Surface samples per mesh")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--res", a.res, "Marching-cubes resolution with --ckpt")->capture_default_str();
  c->add_option("--target-view", a.target_view, "With --ckpt, also score a rendered view")->capture_default_str();
  c->add_option("--pose-noise-sigma", a.noise_levels,
                "Hand pose noise levels in radians; one report per level (default 0)");
}

metrics::MetricReport score_meshes(const metrics::Mesh& pred, const metrics::Mesh& gt, int points,
                                   std::uint64_t seed) {
  if (pred.empty()) {
    // Nothing reconstructed: every ground-truth point is missed.
    metrics::MetricReport r;
    r.has_geometry = true;
    r.chamfer = std::numeric_limits<double>::infinity();
    return r;
  }
  // Same stream for both meshes, so identical meshes give identical samples.
  std::mt19937_64 rng_p(seed), rng_g(seed);
  return metrics::geometry_report(metrics::sample_surface(pred, points, rng_p),
                                  metrics::sample_surface(gt, points, rng_g));
}

json report_json(const metrics::MetricReport& r) {
  auto j = r.to_json();
  j["schema"] = kSchema;
  return j;
}

int run_eval(const EvalArgs& a) {
  const bool by_ckpt = !a.view.ckpt.empty();
  const bool by_mesh = !a.pred_mesh.empty();
  const bool by_image = !a.pred_image.empty();
  if (by_ckpt + by_mesh + by_image != 1)
    throw CLI::ValidationError("eval needs exactly one of --ckpt, --pred-mesh or --pred-image");
  if (!a.noise_levels.empty() && !by_ckpt)
    throw CLI::ValidationError("--pose-noise-sigma needs --ckpt and --scene");
  echo_config("eval", {{"ckpt", a.view.ckpt.string()},
                       {"scene", a.view.scene.string()},
                       {"pred_mesh", a.pred_mesh.string()},
                       {"gt_mesh", a.gt_mesh.string()},
                       {"pred_image", a.pred_image.string()},
                       {"points", a.points},
                       {"res", a.res},
                       {"pose_noise_sigma", a.noise_levels}});
  if (by_mesh) {
    if (a.gt_mesh.empty()) throw CLI::ValidationError("--pred-mesh needs --gt-mesh");
    emit(report_json(score_meshes(metrics::read_obj(a.pred_mesh), metrics::read_obj(a.gt_mesh), a.points,
                                  a.view.seed)));
    return 0;
  }
  if (by_image) {
    if (a.gt_image.empty() || a.mask.empty())
      throw CLI::ValidationError("--pred-image needs --gt-image and --mask");
    metrics::MetricReport r;
    const auto pred = read_png(a.pred_image), gt = read_png(a.gt_image), mask = read_png(a.mask);
    r.psnr = metrics::psnr(pred, gt, mask);
    r.ssim = metrics::ssim(pred, gt, mask);
    r.has_image = true;
    emit(report_json(r));
    return 0;
  }
  if (a.view.scene.empty()) throw CLI::ValidationError("--ckpt needs --scene");
  const auto l = load_for_inference(a.view);
  const auto gt = a.gt_mesh.empty() ? data::SceneReader(a.view.scene).ground_truth() : metrics::read_obj(a.gt_mesh);
  const auto levels = a.noise_levels.empty() ? std::vector<double>{0.0} : a.noise_levels;
  json reports = json::array();
  for (double sigma : levels) {
    require(sigma >= 0, ErrorCode::kInvalidArgument, "pose noise must be non-negative");
    const auto ref = reference_for(l, a.view.ref_view, sigma, a.view.seed);
    auto r = score_meshes(train::extract_field_mesh(l.ckpt.spec, l.ckpt.params, ref, a.res), gt, a.points,
                          a.view.seed);
    if (a.target_view >= 0) {
      require(a.target_view < l.scene.views(), ErrorCode::kInvalidArgument, "target view out of range");
      const auto view = train::render_view(l.ckpt.spec, l.ckpt.params, ref, l.scene.spec.cameras[a.target_view],
                                           l.scene.bounds(a.target_view));
      r.psnr = metrics::psnr(view.rgb, l.scene.rgb_free[a.target_view], l.scene.mask_full[a.target_view]);
      r.ssim = metrics::ssim(view.rgb, l.scene.rgb_free[a.target_view], l.scene.mask_full[a.target_view]);
      r.has_image = true;
    }
    auto j = report_json(r);
    j["pose_noise_sigma"] = sigma;
    reports.push_back(j);
  }
  emit(reports.size() == 1 && a.noise_levels.empty()
           ? reports[0]
           : json({{"schema", kSchema}, {"reports", reports}}));
  return 0;
}

void report_error(const std::string& code, const std::string& message) {
  std::cerr << json({{"schema", kSchema}, {"error", code}, {"message", message}}).dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occlumesh: single-view hand-held object reconstruction"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads, 0 for all cores")->capture_default_str();

  GenArgs gen;
  TrainArgs pre, fine;
  RenderArgs render;
  MeshArgs mesh;
  EvalArgs eval;
  add_gen(app, gen);
  add_train(app, pre, train::Stage::kPretrain);
  add_train(app, fine, train::Stage::kFinetune);
  add_render(app, render);
  add_mesh(app, mesh);
  add_eval(app, eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return kUsageExit;
  }
  kernels::configure_threads(threads);

  try {
    const auto* sub = app.get_subcommands().front();
    const auto name = sub->get_name();
    if (name == "gen") return run_gen(gen);
    if (name == "pretrain") return run_train(pre);
    if (name == "finetune") return run_train(fine);
    if (name == "render") return run_render(render);
    if (name == "mesh") return run_mesh(mesh);
    return run_eval(eval);
  } catch (const CLI::ValidationError& e) {
    report_error("usage", e.what());
    return kUsageExit;
  } catch (const Error& e) {
    report_error(std::string(to_string(e.code())), e.what());
    return kFailureExit;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return kFailureExit;
  }
}
