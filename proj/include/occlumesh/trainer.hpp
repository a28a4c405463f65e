#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "occlumesh/adam.hpp"
#include "occlumesh/amodal.hpp"
#include "occlumesh/camera.hpp"
#include "occlumesh/conditioning.hpp"
#include "occlumesh/dataset.hpp"
#include "occlumesh/losses.hpp"
#include "occlumesh/mesh.hpp"
#include "occlumesh/renderer.hpp"

namespace occlumesh::train {

namespace fs = std::filesystem;
using Eigen::Vector3d;
using tensor::ParamMap;
using tensor::Tensor;

enum class Stage { kPretrain, kFinetune };
enum class Profile { kDesk, kPaper };

std::string to_string(Stage stage);
std::string to_string(Profile profile);
Stage parse_stage(const std::string& s);
Profile parse_profile(const std::string& s);

inline constexpr double kPretrainLr = 1e-3;
inline constexpr double kFinetuneLr = 4e-4;
inline constexpr double kLrFloor = 5e-5;
inline constexpr std::int64_t kPaperIterations = 300000;
inline constexpr int kPaperRaysPerView = 150;
inline constexpr int kPaperSupervisionViews = 8;
// Normalisation: P_n = (P - centre) / (kBoxScale * object radius), so the
// object sits inside the unit-diameter box.
inline constexpr double kBoxScale = 2.2;
inline const std::string kFeatureLeaf = "__color_map";
// Adam step multiplier for the log-sharpness, so h can sharpen by orders of
// magnitude within a short schedule.
inline constexpr double kSharpnessLrScale = 10.0;

// Network sizes. Serialised by profile name and hand K only.
struct ModelSpec {
  Profile profile = Profile::kDesk;
  int hand_k = 6;
  conditioning::EncoderSpec encoder;
  render::FieldSpecs fields;
  amodal::AmodalSpec amodal;
  double init_radius = 0.3;  // sphere initialisation, normalised units

  static ModelSpec make(Profile profile, int hand_k = 6);
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

ParamMap init_model(const ModelSpec& spec, std::uint64_t seed);

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  Profile profile = Profile::kPaper;
  std::int64_t iterations = kPaperIterations;
  int rays_per_view = kPaperRaysPerView;
  int supervision_views = kPaperSupervisionViews;
  double lr = kPretrainLr;
  double lr_floor = kLrFloor;
  std::uint64_t seed = 0;
  double pose_noise_sigma = 0.0;  // radians, per joint angle
  double amodal_weight = 1.0;
  bool freeze_amodal = true;      // finetuning requires true
  bool zero_amodal = false;       // finetune ablation: M_hat forced to 0
  losses::LossWeights weights;
  int n_coarse = 64;
  int n_fine = 64;
  int eikonal_samples = 256;      // box samples per iteration
  int smoothness_k = losses::kDefaultSmoothnessK;
  int reference_view = -1;        // -1: random per iteration
  std::vector<int> holdout_views;  // never supervised
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  bool deterministic = false;

  // Stage and profile defaults.
  static TrainConfig defaults(Stage stage, Profile profile);
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep the defaults of `base`; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  std::string hash() const;
};

// lr(t) = floor + (lr0 - floor)(1 + cos(pi t / (T - 1))) / 2.
double cosine_lr(double lr0, double floor, std::int64_t t, std::int64_t total);

struct Checkpoint {
  ModelSpec spec;
  ParamMap params;
  nn::AdamState adam;
  std::int64_t iteration = 0;
  TrainConfig config;
  std::string parent;  // hash of the checkpoint a finetune started from

  std::string hash() const;  // parameters, optimiser state and config
};

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

// Everything one scene contributes to training or inference, in memory.
struct SceneData {
  fs::path dir;
  synth::SceneSpec spec;
  double scale = 1.0;  // normalisation scale
  std::vector<Image> rgb;
  std::vector<Mask> mask;
  std::vector<std::vector<std::uint8_t>> parts;
  std::vector<Image> rgb_free;   // pretraining only
  std::vector<Mask> mask_full;   // pretraining only
  hand::JointTransforms joints;  // world frame, ground-truth pose

  int views() const { return static_cast<int>(spec.cameras.size()); }
  int width() const { return rgb.front().width(); }
  int height() const { return rgb.front().height(); }
  geometry::NearFar bounds(int view) const;
};

// Reads a scene. Finetuning reads hand-occluded files only.
SceneData load_scene(const data::SceneReader& reader, Stage stage);

// Reference-view conditioning inputs (value only).
struct Reference {
  Tensor image;  // I (.) S_o, [3, H, W]
  geometry::FeatureMap semantic;
  geometry::Camera camera;
  hand::JointTransforms joints_normalized;
  Vector3d centre = Vector3d::Zero();
  double scale = 1.0;
};

Reference make_reference(const SceneData& scene, int view, const hand::JointTransforms& joints);

// Per-joint Gaussian angle noise; sigma = 0 returns the ground-truth FK.
hand::JointTransforms noisy_joints(const synth::SceneSpec& spec, double sigma, std::mt19937_64& rng);

struct ViewBatch {
  std::vector<geometry::TrainingRay> rays;
  std::vector<double> color_weight;  // 1 where colour is supervised
  Tensor eikonal_points;             // [E, 3] normalised
};

// The sampled inputs of one optimisation step.
struct StepBatch {
  int scene = 0;
  int reference = 0;
  std::vector<int> targets;
  Reference ref;
  std::vector<ViewBatch> views;
  Tensor amodal_target;  // [1, H, W], pretraining only
  std::vector<std::uint64_t> render_seeds;  // per view, stratified sampling
};

struct StepResult {
  losses::LossReport report;
  tensor::Gradients gradients;  // of the objective, every trainable parameter
  std::vector<Tensor> depths;   // per view sample depths actually used
};

// Finetuning mask target per view: min(M_hat + M, 1) with M_hat from the
// frozen head (or zero for the ablation).
using AmodalProvider = std::function<Mask(int scene, int view)>;

class Trainer {
 public:
  Trainer(Checkpoint ckpt, std::vector<SceneData> scenes);

  const Checkpoint& checkpoint() const { return ckpt_; }
  Checkpoint& checkpoint() { return ckpt_; }
  const TrainConfig& config() const { return ckpt_.config; }
  const std::vector<SceneData>& scenes() const { return scenes_; }

  void set_amodal_provider(AmodalProvider provider) { amodal_ = std::move(provider); }

  // Deterministic in (seed, iteration).
  StepBatch sample_batch(std::int64_t iteration) const;

  // Loss and gradients at the current parameters. `fixed_depths` reuses the
  // per-view sample depths of an earlier evaluation.
  StepResult evaluate(const StepBatch& batch, const std::vector<Tensor>* fixed_depths = nullptr,
                      const ParamMap* params = nullptr) const;

  // One Adam step at the scheduled learning rate; advances the iteration.
  losses::LossReport step();

  double current_lr() const;

 private:
  Mask finetune_target(int scene, int view) const;

  Checkpoint ckpt_;
  std::vector<SceneData> scenes_;
  AmodalProvider amodal_;
  mutable std::map<std::pair<int, int>, Mask> predicted_;
};

// M_hat for one hand-occluded view from the amodal head.
Mask predict_amodal(const ModelSpec& spec, const ParamMap& params, const Image& rgb,
                    const Mask& mask);

struct RunOptions {
  fs::path out_dir;
  fs::path amodal_cache;  // finetuning; empty disables the PNG cache
  data::AccessLog* access_log = nullptr;
  std::function<void(const losses::LossReport&, double lr)> on_step;
};

// Loads scenes, trains for cfg.iterations from `start` (or a fresh model),
// writes checkpoints and a JSON-lines loss log to the output directory and
// returns the final checkpoint.
Checkpoint run_training(const TrainConfig& cfg, const std::vector<fs::path>& scene_dirs,
                        const std::optional<Checkpoint>& start, const RunOptions& options);

// --- inference -------------------------------------------------------------------

struct RenderedView {
  Image rgb;    // over white
  Mask opacity;
};

// Pixels outside `region` (when given) stay white with zero opacity.

RenderedView render_view(const ModelSpec& spec, const ParamMap& params, const Reference& ref,
                         const geometry::Camera& camera, geometry::NearFar bounds, int n_coarse = 64,
                         int n_fine = 64, const Mask* region = nullptr);

// Marching cubes of the conditioned SDF over the reconstruction box, in
// world coordinates, with vertex colours from the colour field viewed along
// the inward normal.
metrics::Mesh extract_field_mesh(const ModelSpec& spec, const ParamMap& params,
                                 const Reference& ref, int resolution);

}  // namespace occlumesh::train
