#include "occlumesh/camera.hpp"

#include <algorithm>
#include <cmath>

#include "occlumesh/ops.hpp"

namespace occlumesh::geometry {

Camera::Camera(double fx, double fy, double cx, double cy, const Matrix4d& cam_to_world,
               int width, int height)
    : fx_(fx), fy_(fy), cx_(cx), cy_(cy), cam_to_world_(cam_to_world), width_(width),
      height_(height) {
  require(fx > 0 && fy > 0 && std::isfinite(fx) && std::isfinite(fy), ErrorCode::kDegenerateCamera,
          "focal lengths must be positive");
  require(width > 0 && height > 0, ErrorCode::kDegenerateCamera, "image size must be positive");
  const Matrix3d r = rotation();
  const double ortho = (r.transpose() * r - Matrix3d::Identity()).cwiseAbs().maxCoeff();
  require(ortho < 1e-9 && r.determinant() > 0, ErrorCode::kDegenerateCamera,
          "cam_to_world rotation is not orthonormal");
}

Matrix3d Camera::intrinsics() const {
  Matrix3d k = Matrix3d::Zero();
  k(0, 0) = fx_;
  k(1, 1) = fy_;
  k(0, 2) = cx_;
  k(1, 2) = cy_;
  k(2, 2) = 1.0;
  return k;
}

Matrix4d Camera::world_to_cam() const {
  Matrix4d inv = Matrix4d::Identity();
  const Matrix3d rt = rotation().transpose();
  inv.block<3, 3>(0, 0) = rt;
  inv.block<3, 1>(0, 3) = -rt * center();
  return inv;
}

nlohmann::json Camera::to_json() const {
  const Matrix3d k = intrinsics();
  std::vector<double> kv, pv;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) kv.push_back(k(r, c));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) pv.push_back(cam_to_world_(r, c));
  return {{"intrinsics", kv}, {"cam_to_world", pv}, {"width", width_}, {"height", height_}};
}

Camera Camera::from_json(const nlohmann::json& j) {
  const auto kv = j.at("intrinsics").get<std::vector<double>>();
  const auto pv = j.at("cam_to_world").get<std::vector<double>>();
  require(kv.size() == 9 && pv.size() == 16, ErrorCode::kSchema, "camera JSON has wrong sizes");
  Matrix4d pose;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) pose(r, c) = pv[r * 4 + c];
  return Camera(kv[0], kv[4], kv[2], kv[5], pose, j.at("width").get<int>(),
                j.at("height").get<int>());
}

Camera look_at(const Vector3d& eye, const Vector3d& target, double fx, double fy, double cx,
               double cy, int width, int height) {
  const Vector3d forward = (target - eye).normalized();
  Vector3d right = forward.cross(Vector3d::UnitY());
  if (right.norm() < 1e-9) right = forward.cross(Vector3d::UnitZ());
  right.normalize();
  const Vector3d down = forward.cross(right).normalized();
  Matrix4d pose = Matrix4d::Identity();
  pose.block<3, 1>(0, 0) = right;
  pose.block<3, 1>(0, 1) = down;
  pose.block<3, 1>(0, 2) = forward;
  pose.block<3, 1>(0, 3) = eye;
  return Camera(fx, fy, cx, cy, pose, width, height);
}

Ray pixel_to_ray(const Camera& cam, double u, double v, double z_near, double z_far) {
  require(std::isfinite(u) && std::isfinite(v), ErrorCode::kInvalidArgument,
          "pixel coordinates must be finite");
  require(0 < z_near && z_near < z_far, ErrorCode::kInvalidArgument, "need 0 < z_near < z_far");
  const Vector3d local((u - cam.cx()) / cam.fx(), (v - cam.cy()) / cam.fy(), 1.0);
  Ray ray;
  ray.origin = cam.center();
  ray.direction = (cam.rotation() * local).normalized();
  ray.z_near = z_near;
  ray.z_far = z_far;
  return ray;
}

Projection project_point(const Camera& cam, const Vector3d& point) {
  require(point.allFinite(), ErrorCode::kInvalidArgument, "point must be finite");
  const Vector3d local = cam.rotation().transpose() * (point - cam.center());
  require(local.z() > 1e-9, ErrorCode::kBehindCamera, "point is behind the camera");
  return {cam.fx() * local.x() / local.z() + cam.cx(), cam.fy() * local.y() / local.z() + cam.cy(),
          local.z()};
}

std::array<double, 2> image_to_texel(double u, double v, double ratio) {
  return {u * ratio - 0.5, v * ratio - 0.5};
}

std::vector<double> bilinear_sample(const FeatureMap& map, double u, double v) {
  tensor::Tape tape;
  auto m = tape.constant(map.data);
  auto out = sample_feature_map(m, map.ratio, {{u, v}});
  const auto& vals = out.value().values();
  return {vals.begin(), vals.end()};
}

tensor::Var sample_feature_map(tensor::Var map, double ratio,
                               const std::vector<std::array<double, 2>>& image_uv) {
  std::vector<std::array<double, 2>> texels(image_uv.size());
  std::transform(image_uv.begin(), image_uv.end(), texels.begin(),
                 [ratio](const auto& uv) { return image_to_texel(uv[0], uv[1], ratio); });
  return ops::bilinear_gather(map, texels);
}

NearFar near_far_from_sphere(const Camera& cam, const Vector3d& centre, double radius) {
  const double dist = (cam.center() - centre).norm();
  const double margin = 1.1 * radius;
  const double z_near = std::max(dist - margin, 1e-3);
  require(dist + margin > z_near, ErrorCode::kInvalidArgument, "degenerate near/far bounds");
  return {z_near, dist + margin};
}

PixelBox mask_bounding_box(const Mask& mask) {
  PixelBox box{mask.width(), mask.height(), -1, -1};
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.at(x, y) > 0) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x);
        box.y1 = std::max(box.y1, y);
      }
  require(box.x1 >= 0, ErrorCode::kEmptyInput, "mask has no nonzero pixels");
  return box;
}

std::vector<TrainingRay> sample_training_rays(const Mask& bbox_mask, const Image& image,
                                              const Mask& target_mask, const Camera& cam,
                                              int m, NearFar bounds, std::mt19937_64& rng) {
  require(m >= 1, ErrorCode::kInvalidArgument, "need at least one ray");
  require(bbox_mask.same_size(image) && bbox_mask.same_size(target_mask), ErrorCode::kShape,
          "mask and image sizes differ");
  const PixelBox box = mask_bounding_box(bbox_mask);
  std::uniform_int_distribution<int> xs(box.x0, box.x1);
  std::uniform_int_distribution<int> ys(box.y0, box.y1);
  std::vector<TrainingRay> rays;
  rays.reserve(m);
  for (int i = 0; i < m; ++i) {
    TrainingRay tr;
    tr.x = xs(rng);
    tr.y = ys(rng);
    tr.ray = pixel_to_ray(cam, tr.x + 0.5, tr.y + 0.5, bounds.z_near, bounds.z_far);
    for (int c = 0; c < 3; ++c) tr.color[c] = image.at(tr.x, tr.y, std::min(c, image.channels() - 1));
    tr.mask_value = target_mask.at(tr.x, tr.y);
    rays.push_back(tr);
  }
  return rays;
}

}  // namespace occlumesh::geometry
