#pragma once

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "occlumesh/camera.hpp"
#include "occlumesh/hand.hpp"
#include "occlumesh/mlp.hpp"
#include "occlumesh/tensor.hpp"

namespace occlumesh::render {

using Eigen::Vector3d;
using tensor::ParamMap;
using tensor::Tensor;
using tensor::Var;
using tensor::VarMap;

inline const std::string kGeometryPrefix = "geo";
inline const std::string kColorPrefix = "col";
inline const std::string kSharpnessName = "sharpness.eta";
inline constexpr double kInitialSharpness = 3.33;

struct FieldSpecs {
  nn::MlpSpec geometry;  // in: E_P(P) then F_con; out: SDF then feature
  nn::MlpSpec color;     // in: F_c, E_D(D), normal, feature
  int position_freq = 6;
  int direction_freq = 4;
  int feature_dim = 32;
  int color_channels = 32;  // width of F_c inside F_con (its trailing block)
  int cond_width = 0;       // |F_con|
};

// Desk profile: 4x64 geometry MLP (skip at 2), 3x64 colour MLP.
FieldSpecs desk_field_specs(int color_channels, int hand_k, int feature_dim = 32);
// Paper profile: 8x512 geometry MLP (skip at 4, 256 features), 4x512 colour MLP.
FieldSpecs paper_field_specs(int color_channels, int hand_k);

// Sphere-shaped SDF initialisation for the geometry MLP, uniform colour MLP,
// and eta = ln(kInitialSharpness).
void init_fields(const FieldSpecs& specs, std::mt19937_64& rng, ParamMap& params,
                 double sphere_radius = 0.5);

struct GeometryOutput {
  Var sdf;       // [N, 1]
  Var feature;   // [N, feature_dim]
  Var gradient;  // [N, 3], d sdf / d P with F_con held fixed
};

// `points` are in the normalised frame; f_con is [N, cond_width].
GeometryOutput eval_geometric_field(const FieldSpecs& specs, const VarMap& params,
                                    const Tensor& points, Var f_con);
// Value-only SDF, no tangents.
std::vector<double> eval_sdf_values(const FieldSpecs& specs, const ParamMap& params,
                                    const Tensor& points, const Tensor& f_con);

// RGB in (0, 1). dirs [N, 3] unit rows.
Var eval_color_field(const FieldSpecs& specs, const VarMap& params, Var f_c, const Tensor& dirs,
                     Var normals, Var feature);

Var sharpness(const VarMap& params);

double sdf_to_alpha(double s, double s_next, double h);

// Per-scene conditioning state for one reference view.
struct Conditioning {
  Var color_map;  // F_c^I on the active tape
  double color_ratio = 0.25;
  const geometry::FeatureMap* semantic_map = nullptr;
  geometry::Camera reference_camera;
  hand::JointTransforms joints_normalized;
  int hand_k = 6;
  Vector3d centre = Vector3d::Zero();  // normalisation: P_n = (P - centre) / scale
  double scale = 1.0;

  Tensor normalize(const Tensor& world_points) const;
  // F_con rows for world points, recorded on color_map's tape.
  Var features(const Tensor& world_points) const;
};

struct RenderOptions {
  int n_coarse = 40;
  int n_fine = 40;
  bool stratified = true;
  // Reuse sample depths [R, n] from an earlier render instead of sampling.
  const Tensor* fixed_depths = nullptr;
};

struct BatchRender {
  Var color;            // [R, 3] composited over black
  Var opacity;          // [R, 1]
  Var normal;           // [R, 3]
  Var sample_gradient;  // [R * n, 3]
  Var weights;          // [R, n]
  Tensor depths;        // [R, n] sample depths
  Tensor surface;       // [R, 3] expected surface point (normalised frame, value only)
  Tensor expected_depth;  // [R] weight-normalised interval-midpoint depth
  Tensor sample_points;   // [R * n, 3] normalised
};

// Renders rays on the tape of cond.color_map using params bound there.
BatchRender render_batch(const FieldSpecs& specs, const VarMap& params, const Conditioning& cond,
                         const std::vector<geometry::Ray>& rays, const RenderOptions& options,
                         std::mt19937_64* rng);

struct RenderOutput {
  std::array<double, 3> color{};
  double opacity = 0;
  Vector3d normal = Vector3d::Zero();
  Vector3d surface = Vector3d::Zero();
  double depth = 0;
};

struct RaySamples {
  std::vector<double> depths;
  std::vector<double> sdf;
  std::vector<double> weights;
};

// Inverse-CDF sampling of a coarse weight distribution (weights + 1e-5) over
// the intervals between coarse depths, merged and strictly sorted. With no
// rng the quantiles are the deterministic midpoints (j + 0.5) / n_fine.
std::vector<double> hierarchical_upsample(const std::vector<double>& depths,
                                          const std::vector<double>& weights, int n_fine,
                                          double z_near, double z_far, std::mt19937_64* rng);

// Coarse depths in [z_near, z_far]: midpoints or stratified jitter.
std::vector<double> coarse_depths(double z_near, double z_far, int n, std::mt19937_64* rng);

// Closed-form field for testing the renderer without an MLP.
struct AnalyticField {
  std::function<double(const Vector3d&)> sdf;
  std::function<Vector3d(const Vector3d&)> gradient;
  std::function<Vector3d(const Vector3d&, const Vector3d&)> color;
};

RenderOutput render_ray_analytic(const AnalyticField& field, const geometry::Ray& ray, int n_coarse,
                                 int n_fine, double h, std::mt19937_64* rng,
                                 RaySamples* samples = nullptr);

AnalyticField analytic_sphere(const Vector3d& centre, double radius,
                              const Vector3d& rgb = Vector3d(0.8, 0.4, 0.2));

}  // namespace occlumesh::render
