#include "occlumesh/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>

#include "occlumesh/archive.hpp"
#include "occlumesh/kernels.hpp"
#include "occlumesh/metrics.hpp"
#include "occlumesh/ops.hpp"

namespace occlumesh::train {

namespace {

bool has_prefix(const std::string& name, const std::string& prefix) {
  return name.rfind(prefix, 0) == 0;
}

bool is_field_param(const std::string& name) {
  return has_prefix(name, render::kGeometryPrefix) || has_prefix(name, render::kColorPrefix) ||
         name == render::kSharpnessName;
}

ParamMap field_params(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, v] : params)
    if (is_field_param(name)) out.emplace(name, v);
  return out;
}

double quantize8(double x) { return std::round(std::clamp(x, 0.0, 1.0) * 255.0) / 255.0; }

render::Conditioning conditioning_for(const ModelSpec& spec, const Reference& ref, tensor::Var map) {
  render::Conditioning c;
  c.color_map = map;
  c.color_ratio = conditioning::kFeatureRatio;
  c.semantic_map = &ref.semantic;
  c.reference_camera = ref.camera;
  c.joints_normalized = ref.joints_normalized;
  c.hand_k = spec.hand_k;
  c.centre = ref.centre;
  c.scale = ref.scale;
  return c;
}

// Rectangle around the nonzero region of `mask`, grown by `margin` pixels.
Mask padded_box(const Mask& mask, int margin) {
  const auto box = geometry::mask_bounding_box(mask);
  Mask out = make_mask(mask.width(), mask.height());
  for (int y = std::max(0, box.y0 - margin); y <= std::min(mask.height() - 1, box.y1 + margin); ++y)
    for (int x = std::max(0, box.x0 - margin); x <= std::min(mask.width() - 1, box.x1 + margin); ++x)
      out.at(x, y) = 1.0;
  return out;
}

tensor::Var white_composite(tensor::Var color, tensor::Var opacity) {
  tensor::Var o3 = ops::concat_cols({opacity, opacity, opacity});
  return ops::add(color, ops::add_scalar(ops::scale(o3, -1.0), 1.0));
}

}  // namespace

std::string to_string(Stage stage) { return stage == Stage::kPretrain ? "pretrain" : "finetune"; }
std::string to_string(Profile profile) { return profile == Profile::kDesk ? "desk" : "paper"; }

Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "finetune") return Stage::kFinetune;
  fail(ErrorCode::kConfig, "unknown stage '" + s + "'");
}

Profile parse_profile(const std::string& s) {
  if (s == "desk") return Profile::kDesk;
  if (s == "paper") return Profile::kPaper;
  fail(ErrorCode::kConfig, "unknown profile '" + s + "'");
}

// --- model ----------------------------------------------------------------------

ModelSpec ModelSpec::make(Profile profile, int hand_k) {
  require(hand_k >= 1 && hand_k <= 16, ErrorCode::kConfig, "hand K must be in [1, 16]");
  ModelSpec s;
  s.profile = profile;
  s.hand_k = hand_k;
  if (profile == Profile::kDesk) {
    s.encoder = conditioning::EncoderSpec{32, 16, 32, 32};
    s.fields = render::desk_field_specs(s.encoder.channels, hand_k);
    s.amodal = amodal::AmodalSpec{s.encoder.channels, 16};
  } else {
    s.encoder = conditioning::EncoderSpec{256, 64, 128, 256};
    s.fields = render::paper_field_specs(s.encoder.channels, hand_k);
    s.amodal = amodal::AmodalSpec{s.encoder.channels, 64};
  }
  return s;
}

nlohmann::json ModelSpec::to_json() const {
  return {{"profile", to_string(profile)}, {"hand_k", hand_k}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  return make(parse_profile(j.at("profile").get<std::string>()), j.at("hand_k").get<int>());
}

ParamMap init_model(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamMap params;
  conditioning::init_encoder(spec.encoder, rng, params);
  render::init_fields(spec.fields, rng, params, spec.init_radius);
  amodal::init_amodal(spec.amodal, rng, params);
  return params;
}

// --- configuration --------------------------------------------------------------

TrainConfig TrainConfig::defaults(Stage stage, Profile profile) {
  TrainConfig c;
  c.stage = stage;
  c.profile = profile;
  c.lr = stage == Stage::kPretrain ? kPretrainLr : kFinetuneLr;
  if (profile == Profile::kDesk) {
    c.iterations = stage == Stage::kPretrain ? 5000 : 1000;
    c.rays_per_view = 64;
    c.supervision_views = 1;
    c.n_coarse = 24;
    c.n_fine = 24;
    c.eikonal_samples = 64;
    c.reference_view = 0;
  }
  return c;
}

void TrainConfig::validate() const {
  require(iterations >= 1, ErrorCode::kConfig, "iterations must be positive");
  require(rays_per_view >= 1, ErrorCode::kConfig, "rays per view must be positive");
  require(supervision_views >= 1, ErrorCode::kConfig, "supervision views must be positive");
  require(lr_floor > 0 && lr >= lr_floor, ErrorCode::kConfig, "learning rate must be >= floor > 0");
  require(n_coarse >= 2 && n_fine >= 0, ErrorCode::kConfig, "bad sample counts");
  require(eikonal_samples >= 0, ErrorCode::kConfig, "eikonal samples must be non-negative");
  require(smoothness_k >= 1 && smoothness_k <= rays_per_view, ErrorCode::kConfig,
          "smoothness K must be in [1, rays per view]");
  require(pose_noise_sigma >= 0, ErrorCode::kConfig, "pose noise sigma must be non-negative");
  require(amodal_weight >= 0, ErrorCode::kConfig, "amodal weight must be non-negative");
  require(checkpoint_every >= 0, ErrorCode::kConfig, "checkpoint interval must be non-negative");
  if (stage == Stage::kFinetune)
    require(freeze_amodal, ErrorCode::kConfig, "finetuning requires a frozen amodal head");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage", to_string(stage)},
          {"profile", to_string(profile)},
          {"iterations", iterations},
          {"rays_per_view", rays_per_view},
          {"supervision_views", supervision_views},
          {"lr", lr},
          {"lr_floor", lr_floor},
          {"seed", seed},
          {"pose_noise_sigma", pose_noise_sigma},
          {"amodal_weight", amodal_weight},
          {"freeze_amodal", freeze_amodal},
          {"zero_amodal", zero_amodal},
          {"weights",
           {{"eikonal", weights.eikonal},
            {"mask", weights.mask},
            {"normal_orientation", weights.normal_orientation},
            {"normal_smoothness", weights.normal_smoothness}}},
          {"n_coarse", n_coarse},
          {"n_fine", n_fine},
          {"eikonal_samples", eikonal_samples},
          {"smoothness_k", smoothness_k},
          {"reference_view", reference_view},
          {"holdout_views", holdout_views},
          {"checkpoint_every", checkpoint_every},
          {"deterministic", deterministic}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  require(j.is_object(), ErrorCode::kConfig, "training config must be a JSON object");
  nlohmann::json merged = base.to_json();
  for (const auto& [key, value] : j.items()) {
    require(merged.contains(key), ErrorCode::kConfig, "unknown config key '" + key + "'");
    if (key == "weights") {
      require(value.is_object(), ErrorCode::kConfig, "weights must be an object");
      for (const auto& [wk, wv] : value.items()) {
        require(merged["weights"].contains(wk), ErrorCode::kConfig, "unknown loss weight '" + wk + "'");
        merged["weights"][wk] = wv;
      }
    } else {
      merged[key] = value;
    }
  }
  TrainConfig c;
  try {
    c.stage = parse_stage(merged.at("stage").get<std::string>());
    c.profile = parse_profile(merged.at("profile").get<std::string>());
    c.iterations = merged.at("iterations").get<std::int64_t>();
    c.rays_per_view = merged.at("rays_per_view").get<int>();
    c.supervision_views = merged.at("supervision_views").get<int>();
    c.lr = merged.at("lr").get<double>();
    c.lr_floor = merged.at("lr_floor").get<double>();
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.pose_noise_sigma = merged.at("pose_noise_sigma").get<double>();
    c.amodal_weight = merged.at("amodal_weight").get<double>();
    c.freeze_amodal = merged.at("freeze_amodal").get<bool>();
    c.zero_amodal = merged.at("zero_amodal").get<bool>();
    const auto& w = merged.at("weights");
    c.weights.eikonal = w.at("eikonal").get<double>();
    c.weights.mask = w.at("mask").get<double>();
    c.weights.normal_orientation = w.at("normal_orientation").get<double>();
    c.weights.normal_smoothness = w.at("normal_smoothness").get<double>();
    c.n_coarse = merged.at("n_coarse").get<int>();
    c.n_fine = merged.at("n_fine").get<int>();
    c.eikonal_samples = merged.at("eikonal_samples").get<int>();
    c.smoothness_k = merged.at("smoothness_k").get<int>();
    c.reference_view = merged.at("reference_view").get<int>();
    c.holdout_views = merged.at("holdout_views").get<std::vector<int>>();
    c.checkpoint_every = merged.at("checkpoint_every").get<std::int64_t>();
    c.deterministic = merged.at("deterministic").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, std::string("bad config value: ") + e.what());
  }
  return c;
}

std::string TrainConfig::hash() const { return io::hex64(io::fnv1a(to_json().dump())); }

double cosine_lr(double lr0, double floor, std::int64_t t, std::int64_t total) {
  require(total >= 1, ErrorCode::kInvalidArgument, "schedule length must be positive");
  if (total == 1) return lr0;
  const double progress =
      static_cast<double>(std::clamp<std::int64_t>(t, 0, total - 1)) / static_cast<double>(total - 1);
  return floor + (lr0 - floor) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

// --- checkpoints ----------------------------------------------------------------

namespace {

io::TensorArchive to_archive(const Checkpoint& c) {
  io::TensorArchive a;
  a.header = {{"schema", 1},
              {"kind", "occlumesh-checkpoint"},
              {"model", c.spec.to_json()},
              {"config", c.config.to_json()},
              {"config_hash", c.config.hash()},
              {"iteration", c.iteration},
              {"parent", c.parent},
              {"adam",
               {{"step", c.adam.step},
                {"beta1", c.adam.beta1},
                {"beta2", c.adam.beta2},
                {"epsilon", c.adam.epsilon}}}};
  for (const auto& [name, v] : c.params) a.entries.emplace("param/" + name, v);
  for (const auto& [name, v] : c.adam.first_moment) a.entries.emplace("adam_m/" + name, v);
  for (const auto& [name, v] : c.adam.second_moment) a.entries.emplace("adam_v/" + name, v);
  return a;
}

}  // namespace

std::string Checkpoint::hash() const { return io::hex64(io::fnv1a([&] {
  const auto bytes = io::encode_archive(to_archive(*this));
  return std::string(bytes.begin(), bytes.end());
}())); }

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  io::write_archive(path, to_archive(ckpt));
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto a = io::read_archive(path);
  Checkpoint c;
  try {
    require(a.header.at("kind").get<std::string>() == "occlumesh-checkpoint", ErrorCode::kSchema,
            path.string() + " is not a checkpoint");
    c.spec = ModelSpec::from_json(a.header.at("model"));
    const TrainConfig base = TrainConfig::defaults(Stage::kPretrain, c.spec.profile);
    c.config = TrainConfig::from_json(a.header.at("config"), base);
    require(c.config.hash() == a.header.at("config_hash").get<std::string>(), ErrorCode::kSchema,
            "config hash mismatch in " + path.string());
    c.iteration = a.header.at("iteration").get<std::int64_t>();
    c.parent = a.header.at("parent").get<std::string>();
    const auto& adam = a.header.at("adam");
    c.adam.step = adam.at("step").get<std::int64_t>();
    c.adam.beta1 = adam.at("beta1").get<double>();
    c.adam.beta2 = adam.at("beta2").get<double>();
    c.adam.epsilon = adam.at("epsilon").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, "malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  for (const auto& [key, v] : a.entries) {
    const auto slash = key.find('/');
    require(slash != std::string::npos, ErrorCode::kSchema, "bad checkpoint entry " + key);
    const auto group = key.substr(0, slash);
    const auto name = key.substr(slash + 1);
    if (group == "param") c.params.emplace(name, v);
    else if (group == "adam_m") c.adam.first_moment.emplace(name, v);
    else if (group == "adam_v") c.adam.second_moment.emplace(name, v);
    else fail(ErrorCode::kSchema, "bad checkpoint entry " + key);
  }
  // Every expected parameter must be present with the right shape.
  const auto expected = init_model(c.spec, 0);
  for (const auto& [name, v] : expected) {
    auto it = c.params.find(name);
    require(it != c.params.end() && it->second.shape() == v.shape(), ErrorCode::kSchema,
            "checkpoint lacks parameter " + name);
  }
  return c;
}

// --- scenes ---------------------------------------------------------------------

geometry::NearFar SceneData::bounds(int view) const {
  return geometry::near_far_from_sphere(spec.cameras.at(view), spec.centre, 0.5 * scale);
}

SceneData load_scene(const data::SceneReader& reader, Stage stage) {
  SceneData s;
  s.dir = reader.dir();
  s.spec = reader.spec();
  s.scale = kBoxScale * s.spec.object_radius;
  require(s.scale > 0, ErrorCode::kSchema, "scene has no object radius: " + s.dir.string());
  for (int v = 0; v < reader.views(); ++v) {
    s.rgb.push_back(reader.rgb(v));
    s.mask.push_back(reader.mask(v));
    s.parts.push_back(reader.parts(v));
    if (stage == Stage::kPretrain) {
      s.rgb_free.push_back(reader.rgb_free(v));
      s.mask_full.push_back(reader.mask_full(v));
    }
    require(s.rgb[v].same_size(s.rgb[0]) && s.mask[v].same_size(s.rgb[0]), ErrorCode::kSchema,
            "inconsistent image sizes in " + s.dir.string());
  }
  const auto skel = hand::HandSkeleton::standard();
  s.joints = hand::forward_kinematics(skel, s.spec.pose);
  return s;
}

Reference make_reference(const SceneData& scene, int view, const hand::JointTransforms& joints) {
  require(view >= 0 && view < scene.views(), ErrorCode::kInvalidArgument, "reference view out of range");
  Reference r;
  r.image = conditioning::masked_image_tensor(scene.rgb[view], scene.mask[view]);
  r.semantic = conditioning::semantic_map_from_labels(scene.parts[view], scene.width(),
                                                      scene.height(), scene.mask[view]);
  r.camera = scene.spec.cameras[view];
  r.centre = scene.spec.centre;
  r.scale = scene.scale;
  r.joints_normalized = conditioning::normalize_joints(joints, r.centre, r.scale);
  return r;
}

hand::JointTransforms noisy_joints(const synth::SceneSpec& spec, double sigma, std::mt19937_64& rng) {
  const auto skel = hand::HandSkeleton::standard();
  if (sigma <= 0) return hand::forward_kinematics(skel, spec.pose);
  hand::HandPose pose = spec.pose;
  std::normal_distribution<double> g(0.0, sigma);
  for (auto& a : pose.angles) a += g(rng);
  return hand::forward_kinematics(skel, pose);
}

Mask predict_amodal(const ModelSpec& spec, const ParamMap& params, const Image& rgb,
                    const Mask& mask) {
  const auto fmap = conditioning::encode_reference(spec.encoder, params,
                                                   conditioning::masked_image_tensor(rgb, mask));
  return amodal::recover_amodal(spec.amodal, params, fmap);
}

// --- trainer --------------------------------------------------------------------

Trainer::Trainer(Checkpoint ckpt, std::vector<SceneData> scenes)
    : ckpt_(std::move(ckpt)), scenes_(std::move(scenes)) {
  const auto& cfg = ckpt_.config;
  cfg.validate();
  require(!scenes_.empty(), ErrorCode::kEmptyInput, "no training scenes");
  for (const auto& s : scenes_) {
    require(cfg.reference_view < s.views(), ErrorCode::kSchema,
            "reference view " + std::to_string(cfg.reference_view) + " not in " + s.dir.string());
    for (int h : cfg.holdout_views)
      require(h >= 0 && h < s.views(), ErrorCode::kSchema, "holdout view out of range");
    require(static_cast<int>(cfg.holdout_views.size()) < s.views(), ErrorCode::kSchema,
            "every view is held out");
    if (cfg.stage == Stage::kPretrain)
      require(static_cast<int>(s.rgb_free.size()) == s.views(), ErrorCode::kSchema,
              "pretraining needs occlusion-free views");
    require(s.width() % 8 == 0 && s.height() % 8 == 0, ErrorCode::kSchema,
            "image size must be a multiple of 8");
  }
}

double Trainer::current_lr() const {
  return cosine_lr(ckpt_.config.lr, ckpt_.config.lr_floor, ckpt_.iteration, ckpt_.config.iterations);
}

Mask Trainer::finetune_target(int scene, int view) const {
  const auto& s = scenes_[scene];
  Mask predicted = make_mask(s.width(), s.height());
  if (!ckpt_.config.zero_amodal) {
    if (amodal_) {
      predicted = amodal_(scene, view);
    } else {
      auto it = predicted_.find({scene, view});
      if (it == predicted_.end()) {
        Mask m = predict_amodal(ckpt_.spec, ckpt_.params, s.rgb[view], s.mask[view]);
        for (auto& v : m.data()) v = quantize8(v);
        it = predicted_.emplace(std::make_pair(scene, view), std::move(m)).first;
      }
      predicted = it->second;
    }
  }
  return amodal::amodal_union(predicted, s.mask[view]);
}

StepBatch Trainer::sample_batch(std::int64_t iteration) const {
  const auto& cfg = ckpt_.config;
  std::mt19937_64 rng(synth::split_seed(cfg.seed, static_cast<std::uint64_t>(iteration)));
  StepBatch b;
  b.scene = scenes_.size() > 1 ? static_cast<int>(rng() % scenes_.size()) : 0;
  const auto& s = scenes_[b.scene];
  b.reference = cfg.reference_view >= 0 ? cfg.reference_view : static_cast<int>(rng() % s.views());

  std::vector<int> candidates;
  for (int v = 0; v < s.views(); ++v)
    if (std::find(cfg.holdout_views.begin(), cfg.holdout_views.end(), v) == cfg.holdout_views.end())
      candidates.push_back(v);
  // Partial Fisher-Yates with explicit draws keeps the order library-independent.
  const int count = std::min<int>(cfg.supervision_views, static_cast<int>(candidates.size()));
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng() % (candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }
  b.targets.assign(candidates.begin(), candidates.begin() + count);

  const auto joints = noisy_joints(s.spec, cfg.pose_noise_sigma, rng);
  b.ref = make_reference(s, b.reference, joints);

  const int margin = std::max(2, s.width() / 8);
  const int eik_per_view =
      cfg.eikonal_samples == 0 ? 0 : std::max(1, cfg.eikonal_samples / static_cast<int>(b.targets.size()));
  std::uniform_real_distribution<double> box(-0.5, 0.5);
  for (int v : b.targets) {
    ViewBatch vb;
    if (cfg.stage == Stage::kPretrain) {
      vb.rays = geometry::sample_training_rays(padded_box(s.mask_full[v], margin), s.rgb_free[v],
                                               s.mask_full[v], s.spec.cameras[v], cfg.rays_per_view,
                                               s.bounds(v), rng);
      vb.color_weight.assign(vb.rays.size(), 1.0);
    } else {
      const Mask target = finetune_target(b.scene, v);
      vb.rays = geometry::sample_training_rays(padded_box(target, margin), s.rgb[v], target,
                                               s.spec.cameras[v], cfg.rays_per_view, s.bounds(v), rng);
      for (const auto& r : vb.rays) vb.color_weight.push_back(s.mask[v].at(r.x, r.y) > 0.5 ? 1.0 : 0.0);
    }
    vb.eikonal_points = Tensor({eik_per_view, 3});
    for (auto& x : vb.eikonal_points.values()) x = box(rng);
    b.views.push_back(std::move(vb));
    b.render_seeds.push_back(rng());
  }
  if (cfg.stage == Stage::kPretrain)
    b.amodal_target = amodal::mask_to_tensor(amodal::amodal_target(s.mask_full[b.reference], s.mask[b.reference]));
  return b;
}

StepResult Trainer::evaluate(const StepBatch& batch, const std::vector<Tensor>* fixed_depths,
                             const ParamMap* params_override) const {
  const auto& cfg = ckpt_.config;
  const auto& spec = ckpt_.spec;
  const ParamMap& params = params_override ? *params_override : ckpt_.params;
  const bool pretrain = cfg.stage == Stage::kPretrain;
  const bool deterministic = cfg.deterministic || kernels::deterministic_mode_from_env();
  std::vector<std::string> frozen;
  if (!pretrain) frozen.push_back(amodal::kAmodalPrefix);
  const int views = static_cast<int>(batch.views.size());
  require(views >= 1, ErrorCode::kEmptyInput, "batch has no target views");
  if (fixed_depths)
    require(static_cast<int>(fixed_depths->size()) == views, ErrorCode::kShape, "fixed depths per view");

  tensor::Tape main;
  const auto main_vars = tensor::bind_parameters(main, params, true, frozen);
  const auto color_map =
      conditioning::encode_reference(spec.encoder, main_vars, main.constant(batch.ref.image));
  const Tensor& fmap = color_map.value();
  const ParamMap fields = field_params(params);

  StepResult result;
  result.depths.resize(views);
  std::vector<tensor::Gradients> view_grads(views);
  std::vector<losses::LossReport> view_reports(views);
  std::vector<std::exception_ptr> errors(views);
  tensor::Gradients fast_sum;

#pragma omp parallel for schedule(dynamic, 1)
  for (int v = 0; v < views; ++v) {
    try {
      const auto& vb = batch.views[v];
      tensor::Tape tape;
      const auto vars = tensor::bind_parameters(tape, fields);
      const auto cond = conditioning_for(spec, batch.ref, tape.parameter(kFeatureLeaf, fmap));
      std::vector<geometry::Ray> rays;
      const auto n = static_cast<std::int64_t>(vb.rays.size());
      Tensor target_rgb({n, 3}), target_mask({n, 1}), dirs({n, 3});
      double weight_sum = 0;
      for (std::int64_t r = 0; r < n; ++r) {
        rays.push_back(vb.rays[r].ray);
        for (int c = 0; c < 3; ++c) {
          target_rgb.at(r, c) = vb.rays[r].color[c];
          dirs.at(r, c) = vb.rays[r].ray.direction[c];
        }
        target_mask[r] = vb.rays[r].mask_value;
        weight_sum += vb.color_weight[r];
      }
      render::RenderOptions opt;
      opt.n_coarse = cfg.n_coarse;
      opt.n_fine = cfg.n_fine;
      opt.fixed_depths = fixed_depths ? &(*fixed_depths)[v] : nullptr;
      std::mt19937_64 rng(batch.render_seeds[v]);
      const auto out = render::render_batch(spec.fields, vars, cond, rays, opt, &rng);
      result.depths[v] = out.depths;

      losses::LossTerms terms;
      const auto pred = white_composite(out.color, out.opacity);
      if (weight_sum == static_cast<double>(n)) {
        terms.color = losses::color_loss(pred, target_rgb);
      } else if (weight_sum == 0) {
        terms.color = tape.constant(Tensor::scalar(0.0));
      } else {
        Tensor w({n, 3});
        for (std::int64_t r = 0; r < n; ++r)
          for (int c = 0; c < 3; ++c) w.at(r, c) = vb.color_weight[r];
        const auto diff = ops::abs(ops::sub(pred, tape.constant(target_rgb)));
        terms.color = ops::scale(ops::sum(ops::mul(diff, tape.constant(w))), 1.0 / (3.0 * weight_sum));
      }
      terms.mask = pretrain ? losses::mask_loss_pretrain(out.opacity, target_mask)
                            : losses::amodal_mask_weighted_loss(out.opacity, target_mask);
      tensor::Var grads = out.sample_gradient;
      if (vb.eikonal_points.rows() > 0) {
        Tensor world(vb.eikonal_points.shape());
        for (std::int64_t r = 0; r < world.rows(); ++r)
          for (int d = 0; d < 3; ++d)
            world.at(r, d) = batch.ref.centre[d] + batch.ref.scale * vb.eikonal_points.at(r, d);
        const auto geo = render::eval_geometric_field(spec.fields, vars, vb.eikonal_points,
                                                      cond.features(world));
        grads = ops::concat_rows({grads, geo.gradient});
      }
      terms.eikonal = losses::eikonal_loss(grads);
      terms.normal_orientation = losses::normal_orientation_loss(out.normal, dirs);
      terms.normal_smoothness =
          losses::normal_smoothness_loss(out.normal, out.surface, std::min<int>(cfg.smoothness_k, n));
      const auto total = losses::total_loss(terms, cfg.weights, &view_reports[v]);
      auto g = tape.backward(ops::scale(total, 1.0 / views));
      if (deterministic) {
        view_grads[v] = std::move(g);
      } else {
#pragma omp critical(occlumesh_grad_reduce)
        for (auto& [name, t] : g) {
          auto it = fast_sum.find(name);
          if (it == fast_sum.end()) fast_sum.emplace(name, std::move(t));
          else it->second.matrix() += t.matrix();
        }
      }
    } catch (...) {
      errors[v] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  tensor::Gradients summed = std::move(fast_sum);
  if (deterministic) {
    for (auto& g : view_grads)
      for (auto& [name, t] : g) {
        auto it = summed.find(name);
        if (it == summed.end()) summed.emplace(name, std::move(t));
        else it->second.matrix() += t.matrix();
      }
  }

  auto& rep = result.report;
  for (const auto& r : view_reports) {
    rep.color += r.color / views;
    rep.eikonal += r.eikonal / views;
    rep.mask += r.mask / views;
    rep.normal_orientation += r.normal_orientation / views;
    rep.normal_smoothness += r.normal_smoothness / views;
    rep.total += r.total / views;
  }

  // Chain the feature-map gradient through the encoder, plus the amodal term.
  tensor::Var objective =
      ops::sum(ops::mul(color_map, main.constant(summed.at(kFeatureLeaf).reshaped(fmap.shape()))));
  summed.erase(kFeatureLeaf);
  if (pretrain) {
    const auto pred = amodal::recover_amodal(spec.amodal, main_vars, color_map);
    const auto la = losses::amodal_pretrain_loss(pred, batch.amodal_target);
    rep.amodal = la.value().item();
    require(std::isfinite(rep.amodal), ErrorCode::kNonFinite, "non-finite loss term: amodal");
    objective = ops::add(objective, ops::scale(la, cfg.amodal_weight));
  }
  rep.objective = rep.total + cfg.amodal_weight * rep.amodal;
  for (auto& [name, t] : main.backward(objective)) {
    if (is_field_param(name)) continue;
    summed.emplace(name, std::move(t));
  }
  // Frozen parameters report an identically zero gradient.
  for (const auto& [name, v] : params)
    if (!summed.contains(name)) summed.emplace(name, Tensor(v.shape(), 0.0));
  result.gradients = std::move(summed);
  return result;
}

losses::LossReport Trainer::step() {
  const auto batch = sample_batch(ckpt_.iteration);
  auto result = evaluate(batch);
  const double lr = current_lr();
  tensor::Gradients trainable;
  for (auto& [name, g] : result.gradients) {
    if (ckpt_.config.stage == Stage::kFinetune && has_prefix(name, amodal::kAmodalPrefix)) continue;
    trainable.emplace(name, std::move(g));
  }
  nn::adam_step(ckpt_.params, trainable, ckpt_.adam, lr, {{render::kSharpnessName, kSharpnessLrScale}});
  result.report.iter = ckpt_.iteration;
  ++ckpt_.iteration;
  return result.report;
}

// --- driver ---------------------------------------------------------------------

namespace {

void write_nan_dump(const fs::path& path, const Trainer& trainer, std::int64_t iteration,
                    const std::string& what) {
  const auto batch = trainer.sample_batch(iteration);
  nlohmann::json rays = nlohmann::json::array();
  for (std::size_t v = 0; v < batch.views.size(); ++v)
    for (const auto& r : batch.views[v].rays)
      rays.push_back({{"view", batch.targets[v]},
                      {"x", r.x},
                      {"y", r.y},
                      {"z_near", r.ray.z_near},
                      {"z_far", r.ray.z_far},
                      {"mask", r.mask_value}});
  const nlohmann::json dump = {{"schema", 1},
                               {"iteration", iteration},
                               {"error", what},
                               {"scene", trainer.scenes()[batch.scene].dir.string()},
                               {"reference", batch.reference},
                               {"targets", batch.targets},
                               {"rays", rays}};
  std::ofstream out(path);
  out << dump.dump(2) << '\n';
}

}  // namespace

Checkpoint run_training(const TrainConfig& cfg, const std::vector<fs::path>& scene_dirs,
                        const std::optional<Checkpoint>& start, const RunOptions& options) {
  cfg.validate();
  require(!scene_dirs.empty(), ErrorCode::kEmptyInput, "no scenes given");
  if (cfg.stage == Stage::kFinetune)
    require(start.has_value(), ErrorCode::kConfig, "finetuning needs a pretrain checkpoint");

  const auto policy =
      cfg.stage == Stage::kFinetune ? data::AccessPolicy::kOccludedOnly : data::AccessPolicy::kAll;
  std::vector<SceneData> scenes;
  for (const auto& dir : scene_dirs)
    scenes.push_back(load_scene(data::SceneReader(dir, policy, options.access_log), cfg.stage));

  Checkpoint ckpt;
  bool resume = false;
  if (start) {
    ckpt.spec = start->spec;
    ckpt.params = start->params;
    require(ckpt.spec.profile == cfg.profile, ErrorCode::kConfig,
            "checkpoint profile differs from the requested profile");
    resume = start->config.hash() == cfg.hash() && start->iteration < cfg.iterations;
    if (resume) {
      ckpt.adam = start->adam;
      ckpt.iteration = start->iteration;
      ckpt.parent = start->parent;
    } else {
      ckpt.parent = start->hash();
    }
  } else {
    ckpt.spec = ModelSpec::make(cfg.profile);
    ckpt.params = init_model(ckpt.spec, cfg.seed);
  }
  ckpt.config = cfg;

  Trainer trainer(std::move(ckpt), std::move(scenes));
  if (cfg.stage == Stage::kFinetune && !cfg.zero_amodal) {
    // M_hat depends only on the frozen head and the view, so it is computed
    // once per view and cached on disk under the starting checkpoint's hash.
    const std::string key = start->hash();
    auto cache = std::make_shared<std::map<std::pair<int, int>, Mask>>();
    const auto spec = trainer.checkpoint().spec;
    const auto params = trainer.checkpoint().params;
    const auto* scenes_ptr = &trainer.scenes();
    const fs::path cache_dir = options.amodal_cache;
    trainer.set_amodal_provider([=](int scene, int view) {
      auto it = cache->find({scene, view});
      if (it != cache->end()) return it->second;
      const auto& s = (*scenes_ptr)[scene];
      Mask m;
      fs::path file;
      if (!cache_dir.empty()) {
        file = cache_dir / (s.dir.filename().string() + "_" +
                            data::view_file_name(view, "amodal_" + key));
        if (fs::exists(file)) m = read_png(file);
      }
      if (m.empty()) {
        m = predict_amodal(spec, params, s.rgb[view], s.mask[view]);
        for (auto& v : m.data()) v = quantize8(v);
        if (!file.empty()) {
          fs::create_directories(cache_dir);
          write_png(file, m);
        }
      }
      cache->emplace(std::make_pair(scene, view), m);
      return m;
    });
  }

  fs::create_directories(options.out_dir);
  {
    std::ofstream cfg_out(options.out_dir / "config.json");
    cfg_out << nlohmann::json({{"schema", 1}, {"config", cfg.to_json()}, {"config_hash", cfg.hash()}}).dump(2)
            << '\n';
  }
  std::ofstream log(options.out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  require(static_cast<bool>(log), ErrorCode::kIo, "cannot open the loss log");

  while (trainer.checkpoint().iteration < cfg.iterations) {
    const auto it = trainer.checkpoint().iteration;
    const double lr = trainer.current_lr();
    losses::LossReport report;
    try {
      report = trainer.step();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kNonFinite) write_nan_dump(options.out_dir / "nan_dump.json", trainer, it, e.what());
      throw;
    }
    auto line = report.to_json();
    line["lr"] = lr;
    line["stage"] = to_string(cfg.stage);
    log << line.dump() << '\n';
    if (options.on_step) options.on_step(report, lr);
    const auto done = trainer.checkpoint().iteration;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint_%08lld.ckpt", static_cast<long long>(done));
      save_checkpoint(options.out_dir / name, trainer.checkpoint());
    }
  }
  log.flush();
  save_checkpoint(options.out_dir / "checkpoint.ckpt", trainer.checkpoint());
  if (options.access_log) options.access_log->write(options.out_dir / "access.log");
  return trainer.checkpoint();
}

// --- inference ------------------------------------------------------------------

RenderedView render_view(const ModelSpec& spec, const ParamMap& params, const Reference& ref,
                         const geometry::Camera& camera, geometry::NearFar bounds, int n_coarse,
                         int n_fine, const Mask* region) {
  const auto fmap = conditioning::encode_reference(spec.encoder, params, ref.image);
  const ParamMap fields = field_params(params);
  const int w = camera.width(), h = camera.height();
  RenderedView out{Image(w, h, 3, 1.0), make_mask(w, h)};
  std::vector<std::array<int, 2>> pixels;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (!region || region->at(x, y) > 0.5) pixels.push_back({x, y});
  constexpr std::size_t kChunk = 64;
  const auto chunks = static_cast<std::int64_t>((pixels.size() + kChunk - 1) / kChunk);
  std::vector<std::exception_ptr> errors(chunks);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t c = 0; c < chunks; ++c) {
    try {
      const std::size_t begin = c * kChunk, end = std::min(pixels.size(), begin + kChunk);
      tensor::Tape tape;
      const auto vars = tensor::bind_parameters(tape, fields, false);
      const auto cond = conditioning_for(spec, ref, tape.constant(fmap.data));
      std::vector<geometry::Ray> rays;
      for (std::size_t i = begin; i < end; ++i)
        rays.push_back(geometry::pixel_to_ray(camera, pixels[i][0] + 0.5, pixels[i][1] + 0.5,
                                              bounds.z_near, bounds.z_far));
      render::RenderOptions opt;
      opt.n_coarse = n_coarse;
      opt.n_fine = n_fine;
      opt.stratified = false;
      const auto r = render::render_batch(spec.fields, vars, cond, rays, opt, nullptr);
      const auto rgb = white_composite(r.color, r.opacity).value();
      for (std::size_t i = begin; i < end; ++i) {
        const auto [x, y] = pixels[i];
        for (int ch = 0; ch < 3; ++ch) out.rgb.at(x, y, ch) = rgb.at(i - begin, ch);
        out.opacity.at(x, y) = r.opacity.value()[i - begin];
      }
    } catch (...) {
      errors[c] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

metrics::Mesh extract_field_mesh(const ModelSpec& spec, const ParamMap& params,
                                 const Reference& ref, int resolution) {
  const auto fmap = conditioning::encode_reference(spec.encoder, params, ref.image);
  const ParamMap fields = field_params(params);
  ParamMap geo;
  for (const auto& [name, v] : fields)
    if (has_prefix(name, render::kGeometryPrefix)) geo.emplace(name, v);

  auto to_tensor = [](const std::vector<Vector3d>& pts, std::size_t begin, std::size_t end) {
    Tensor t({static_cast<std::int64_t>(end - begin), 3});
    for (std::size_t i = begin; i < end; ++i)
      for (int d = 0; d < 3; ++d) t.at(i - begin, d) = pts[i][d];
    return t;
  };
  constexpr std::size_t kChunk = 2048;
  const metrics::BatchSdf sdf = [&](const std::vector<Vector3d>& pts) {
    std::vector<double> out(pts.size());
    const auto chunks = static_cast<std::int64_t>((pts.size() + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t c = 0; c < chunks; ++c) {
      const std::size_t begin = c * kChunk, end = std::min(pts.size(), begin + kChunk);
      tensor::Tape tape;
      const auto cond = conditioning_for(spec, ref, tape.constant(fmap.data));
      const Tensor world = to_tensor(pts, begin, end);
      const auto v = render::eval_sdf_values(spec.fields, geo, cond.normalize(world),
                                             cond.features(world).value());
      std::copy(v.begin(), v.end(), out.begin() + begin);
    }
    return out;
  };
  const Vector3d half = Vector3d::Constant(0.5 * ref.scale);
  auto mesh = metrics::extract_mesh(sdf, metrics::Bounds{ref.centre - half, ref.centre + half}, resolution);
  if (mesh.empty()) return mesh;

  mesh.colors.assign(mesh.vertices.size(), Vector3d::Zero());
  const auto chunks = static_cast<std::int64_t>((mesh.vertices.size() + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t c = 0; c < chunks; ++c) {
    const std::size_t begin = c * kChunk, end = std::min(mesh.vertices.size(), begin + kChunk);
    tensor::Tape tape;
    const auto vars = tensor::bind_parameters(tape, fields, false);
    const auto cond = conditioning_for(spec, ref, tape.constant(fmap.data));
    const Tensor world = to_tensor(mesh.vertices, begin, end);
    const auto f_con = cond.features(world);
    const auto g = render::eval_geometric_field(spec.fields, vars, cond.normalize(world), f_con);
    const auto n = static_cast<std::int64_t>(end - begin);
    Tensor dirs({n, 3});
    for (std::int64_t r = 0; r < n; ++r) {
      Vector3d d(g.gradient.value().at(r, 0), g.gradient.value().at(r, 1), g.gradient.value().at(r, 2));
      d = d.norm() > 0 ? Vector3d(-d.normalized()) : Vector3d(0, 0, 1);
      for (int k = 0; k < 3; ++k) dirs.at(r, k) = d[k];
    }
    const auto f_c = ops::slice_cols(f_con, spec.fields.cond_width - spec.fields.color_channels,
                                     spec.fields.cond_width);
    const auto rgb = render::eval_color_field(spec.fields, vars, f_c, dirs, g.gradient, g.feature).value();
    for (std::int64_t r = 0; r < n; ++r)
      mesh.colors[begin + r] = Vector3d(rgb.at(r, 0), rgb.at(r, 1), rgb.at(r, 2));
  }
  return mesh;
}

}  // namespace occlumesh::train
