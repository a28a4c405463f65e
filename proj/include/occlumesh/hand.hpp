#pragma once

#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "json.hpp"
#include "occlumesh/tensor.hpp"

namespace occlumesh::hand {

using Eigen::Matrix4d;
using Eigen::Vector3d;

struct Joint {
  int parent = -1;
  Vector3d offset = Vector3d::Zero();  // in the parent's frame, metres
  Vector3d axis = Vector3d::UnitZ();   // unit rotation axis, own frame
};

// Simplified articulated hand: one revolute axis per joint. Leaf joints carry
// a tip offset so each finger ends in a capsule.
class HandSkeleton {
 public:
  HandSkeleton(std::vector<Joint> joints, std::vector<Vector3d> tip_offsets,
               double capsule_radius);

  // Wrist root plus five fingers of three joints each.
  static HandSkeleton standard();

  int joint_count() const { return static_cast<int>(joints_.size()); }
  const Joint& joint(int j) const { return joints_[j]; }
  const std::vector<Joint>& joints() const { return joints_; }
  // Zero vector for joints with children.
  const Vector3d& tip_offset(int j) const { return tips_[j]; }
  bool is_leaf(int j) const;
  double capsule_radius() const { return capsule_radius_; }

  nlohmann::json to_json() const;
  static HandSkeleton from_json(const nlohmann::json& j);

 private:
  std::vector<Joint> joints_;
  std::vector<Vector3d> tips_;
  std::vector<bool> has_child_;
  double capsule_radius_;
};

struct HandPose {
  std::vector<double> angles;
  Matrix4d root = Matrix4d::Identity();

  nlohmann::json to_json() const;
  static HandPose from_json(const nlohmann::json& j);
};

using JointTransforms = std::vector<Matrix4d>;

Matrix4d rigid(const Eigen::Matrix3d& rotation, const Vector3d& translation);
Matrix4d rigid_inverse(const Matrix4d& t);

JointTransforms forward_kinematics(const HandSkeleton& skeleton, const HandPose& pose);

// Nearest-K joint embedding of a point: the point expressed in each of the K
// nearest joint frames, nearest first (ties by lower joint index).
std::vector<double> hand_embedding(const Vector3d& point, const JointTransforms& joints, int k);

// Embedding of every row of points[N, 3] -> [N, 3K]. Joint positions and
// points share one frame (the caller normalises both).
tensor::Tensor hand_embedding_batch(const tensor::Tensor& points, const JointTransforms& joints,
                                    int k);

struct Capsule {
  Vector3d a;
  Vector3d b;
  double radius;
};

// Bone capsules: parent->child joint segments plus leaf tips.
std::vector<Capsule> hand_capsules(const HandSkeleton& skeleton, const JointTransforms& joints);

double point_segment_distance(const Vector3d& p, const Vector3d& a, const Vector3d& b);

}  // namespace occlumesh::hand
