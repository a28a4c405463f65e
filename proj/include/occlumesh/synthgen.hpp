#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "json.hpp"
#include "occlumesh/camera.hpp"
#include "occlumesh/hand.hpp"
#include "occlumesh/image.hpp"
#include "occlumesh/mesh.hpp"

namespace occlumesh::synth {

using Eigen::Vector3d;

// Superquadric in its local frame: (|x/a|^(2/e2) + |y/b|^(2/e2))^(e2/e1) + |z/c|^(2/e1) = 1.
struct Superquadric {
  Vector3d centre = Vector3d::Zero();
  Vector3d scale = Vector3d::Constant(0.05);
  double e1 = 1.0;
  double e2 = 1.0;
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Vector3d color = Vector3d::Constant(0.5);
  int part_id = 1;

  double inside_outside(const Vector3d& p) const;
  // Distance from p to the surface along the ray from the centre; exact sign,
  // approximately metric near the surface.
  double radial_distance(const Vector3d& p) const;

  nlohmann::json to_json() const;
  static Superquadric from_json(const nlohmann::json& j);
};

// Union of 2-4 superquadric parts.
struct ObjectSpec {
  std::vector<Superquadric> parts;

  double sdf(const Vector3d& p) const;
  int nearest_part(const Vector3d& p) const;  // index into parts
  Vector3d albedo(const Vector3d& p) const;
  // Conservative bounding sphere of the union.
  double bounding_radius(const Vector3d& centre) const;

  nlohmann::json to_json() const;
  static ObjectSpec from_json(const nlohmann::json& j);
};

struct SynthConfig {
  int views = 10;
  int width = 128;
  int height = 128;
  int mesh_resolution = 96;  // ground-truth mesh grid
  double min_radius = 0.5;   // camera trajectory, metres
  double max_radius = 0.8;
  double elevation_deg = 15.0;
  double min_cover = 0.05;   // at least one view with this hand-covered fraction
  int max_attempts = 24;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int attempt = 0;
  ObjectSpec object;
  hand::HandPose pose;
  Vector3d centre = Vector3d::Zero();  // object centroid (mesh AABB centre)
  double object_radius = 0;            // max mesh vertex distance from centre
  double trajectory_radius = 0;
  std::vector<geometry::Camera> cameras;

  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

// Per-scene RNG seed for scene `index` of a dataset drawn with `base_seed`.
std::uint64_t split_seed(std::uint64_t base_seed, std::uint64_t index);

// Object, cameras and grasp for one attempt. Throws kGraspFailure (message
// names the seed) when no grasp puts three finger capsules within 5 mm.
SceneSpec generate_scene(std::uint64_t seed, const SynthConfig& config, int attempt = 0);

// Ground-truth surface of the object union with per-vertex colour and
// per-face part id.
metrics::Mesh object_mesh(const ObjectSpec& object, const Vector3d& centre, double radius,
                          int resolution);

struct RasterOutput {
  Image rgb;
  std::vector<double> depth;         // camera z, +inf for background
  Mask object_mask;                  // nearest hit is an object face
  std::vector<std::uint8_t> labels;  // part id, 255 for hand, 0 background
  int degenerate_triangles = 0;
};

// Z-buffered, flat-shaded render of a mesh plus capsules. Either may be empty.
RasterOutput rasterize(const metrics::Mesh& mesh, const std::vector<hand::Capsule>& capsules,
                       const geometry::Camera& cam, const Vector3d& background = Vector3d::Ones());

struct ViewSample {
  Image rgb;        // hand-object image, white background
  Mask mask;        // visible object mask M
  Image rgb_free;   // occlusion-free image, white background
  Mask mask_full;   // complete object mask M^co
  std::vector<std::uint8_t> parts;  // labels of the hand-object render
};

struct SceneSample {
  SceneSpec spec;
  metrics::Mesh mesh;
  std::vector<ViewSample> views;
};

SceneSample render_views(const SceneSpec& spec, const metrics::Mesh& mesh);

// |M^co - M| / |M^co| for one view (0 when M^co is empty).
double covered_fraction(const ViewSample& view);

// Regenerates with further attempts until some view reaches config.min_cover.
SceneSample generate_sample(std::uint64_t seed, const SynthConfig& config);

}  // namespace occlumesh::synth
