#pragma once

#include <array>
#include <random>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "json.hpp"
#include "occlumesh/image.hpp"
#include "occlumesh/tensor.hpp"

namespace occlumesh::geometry {

using Eigen::Matrix3d;
using Eigen::Matrix4d;
using Eigen::Vector3d;

// Pinhole camera. Pixel convention: u to the right, v downward, +z forward in
// the camera frame; pixel (x, y) covers [x, x+1) x [y, y+1).
class Camera {
 public:
  Camera() = default;
  Camera(double fx, double fy, double cx, double cy, const Matrix4d& cam_to_world, int width,
         int height);

  double fx() const { return fx_; }
  double fy() const { return fy_; }
  double cx() const { return cx_; }
  double cy() const { return cy_; }
  int width() const { return width_; }
  int height() const { return height_; }

  Matrix3d intrinsics() const;
  const Matrix4d& cam_to_world() const { return cam_to_world_; }
  Matrix4d world_to_cam() const;
  Vector3d center() const { return cam_to_world_.block<3, 1>(0, 3); }
  Matrix3d rotation() const { return cam_to_world_.block<3, 3>(0, 0); }

  nlohmann::json to_json() const;
  static Camera from_json(const nlohmann::json& j);

 private:
  double fx_ = 1, fy_ = 1, cx_ = 0, cy_ = 0;
  Matrix4d cam_to_world_ = Matrix4d::Identity();
  int width_ = 1, height_ = 1;
};

// Camera at `eye` looking at `target`, world up +y.
Camera look_at(const Vector3d& eye, const Vector3d& target, double fx, double fy, double cx,
               double cy, int width, int height);

struct Ray {
  Vector3d origin = Vector3d::Zero();
  Vector3d direction = Vector3d::UnitZ();
  double z_near = 0.1;
  double z_far = 1.0;

  Vector3d at(double z) const { return origin + z * direction; }
};

struct Projection {
  double u = 0;
  double v = 0;
  double depth = 0;
};

Ray pixel_to_ray(const Camera& cam, double u, double v, double z_near, double z_far);
Projection project_point(const Camera& cam, const Vector3d& point);

// [C, H, W] feature grid. `ratio` = map width / source image width.
struct FeatureMap {
  tensor::Tensor data;
  double ratio = 1.0;

  int channels() const { return static_cast<int>(data.dim(0)); }
  int height() const { return static_cast<int>(data.dim(1)); }
  int width() const { return static_cast<int>(data.dim(2)); }
};

// Image-pixel (u, v) to continuous texel coordinates of a map at `ratio`.
std::array<double, 2> image_to_texel(double u, double v, double ratio);

std::vector<double> bilinear_sample(const FeatureMap& map, double u, double v);

// Differentiable fetch of [N, C] features at image coordinates.
tensor::Var sample_feature_map(tensor::Var map, double ratio,
                               const std::vector<std::array<double, 2>>& image_uv);

struct TrainingRay {
  int x = 0;
  int y = 0;
  Ray ray;
  std::array<double, 3> color{};
  double mask_value = 0;
};

struct NearFar {
  double z_near;
  double z_far;
};

// Scene-level bounds from a bounding sphere (centre, radius) with 10% margin.
NearFar near_far_from_sphere(const Camera& cam, const Vector3d& centre, double radius);

// Draws m pixels uniformly inside the tight bounding box of the nonzero
// region of `bbox_mask`; targets are read from `image` and `target_mask`.
std::vector<TrainingRay> sample_training_rays(const Mask& bbox_mask, const Image& image,
                                              const Mask& target_mask, const Camera& cam,
                                              int m, NearFar bounds, std::mt19937_64& rng);

struct PixelBox {
  int x0, y0, x1, y1;  // inclusive
};
PixelBox mask_bounding_box(const Mask& mask);

}  // namespace occlumesh::geometry
