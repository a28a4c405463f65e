#include "occlumesh/hand.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "occlumesh/error.hpp"

namespace occlumesh::hand {

namespace {

std::vector<double> vec3_json(const Vector3d& v) { return {v.x(), v.y(), v.z()}; }

Vector3d vec3_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  require(v.size() == 3, ErrorCode::kSchema, "expected 3-vector");
  return {v[0], v[1], v[2]};
}

}  // namespace

HandSkeleton::HandSkeleton(std::vector<Joint> joints, std::vector<Vector3d> tip_offsets,
                           double capsule_radius)
    : joints_(std::move(joints)), tips_(std::move(tip_offsets)), capsule_radius_(capsule_radius) {
  require(!joints_.empty(), ErrorCode::kInvalidArgument, "skeleton needs at least one joint");
  require(tips_.size() == joints_.size(), ErrorCode::kInvalidArgument,
          "one tip offset per joint required");
  require(capsule_radius_ > 0, ErrorCode::kInvalidArgument, "capsule radius must be positive");
  require(joints_[0].parent == -1, ErrorCode::kInvalidArgument, "joint 0 must be the root");
  has_child_.assign(joints_.size(), false);
  for (std::size_t j = 0; j < joints_.size(); ++j) {
    const auto& jt = joints_[j];
    if (j > 0)
      require(jt.parent >= 0 && jt.parent < static_cast<int>(j), ErrorCode::kInvalidArgument,
              "joint " + std::to_string(j) + " parent must precede it (no cycles)");
    require(jt.offset.allFinite(), ErrorCode::kInvalidArgument, "non-finite joint offset");
    require(std::abs(jt.axis.norm() - 1.0) < 1e-9, ErrorCode::kInvalidArgument,
            "joint axis must be unit length");
    if (jt.parent >= 0) has_child_[jt.parent] = true;
  }
}

bool HandSkeleton::is_leaf(int j) const { return !has_child_[j]; }

HandSkeleton HandSkeleton::standard() {
  std::vector<Joint> joints;
  std::vector<Vector3d> tips;
  joints.push_back({-1, Vector3d::Zero(), Vector3d::UnitZ()});
  tips.push_back(Vector3d::Zero());

  struct Finger {
    Vector3d base;
    Vector3d direction;
    Vector3d axis;
    double lengths[3];
  };
  const double s = std::sqrt(0.5);
  // Fingers extend along +x, the palm faces -y, flexion curls toward -y.
  const Finger fingers[5] = {
      {{0.030, -0.010, 0.040}, {s, 0, s}, {s, 0, -s}, {0.040, 0.032, 0.028}},
      {{0.090, 0.0, 0.025}, {1, 0, 0}, {0, 0, -1}, {0.045, 0.028, 0.022}},
      {{0.095, 0.0, 0.005}, {1, 0, 0}, {0, 0, -1}, {0.050, 0.030, 0.023}},
      {{0.090, 0.0, -0.015}, {1, 0, 0}, {0, 0, -1}, {0.046, 0.028, 0.022}},
      {{0.080, 0.0, -0.033}, {1, 0, 0}, {0, 0, -1}, {0.036, 0.022, 0.020}},
  };
  for (const auto& f : fingers) {
    const int base = static_cast<int>(joints.size());
    joints.push_back({0, f.base, f.axis});
    joints.push_back({base, f.direction * f.lengths[0], f.axis});
    joints.push_back({base + 1, f.direction * f.lengths[1], f.axis});
    tips.push_back(Vector3d::Zero());
    tips.push_back(Vector3d::Zero());
    tips.push_back(f.direction * f.lengths[2]);
  }
  return HandSkeleton(std::move(joints), std::move(tips), 0.008);
}

nlohmann::json HandSkeleton::to_json() const {
  nlohmann::json parents = nlohmann::json::array(), offsets = nlohmann::json::array(),
                 axes = nlohmann::json::array(), tips = nlohmann::json::array();
  for (std::size_t j = 0; j < joints_.size(); ++j) {
    parents.push_back(joints_[j].parent);
    offsets.push_back(vec3_json(joints_[j].offset));
    axes.push_back(vec3_json(joints_[j].axis));
    tips.push_back(vec3_json(tips_[j]));
  }
  return {{"parents", parents},
          {"offsets", offsets},
          {"axes", axes},
          {"tip_offsets", tips},
          {"capsule_radius", capsule_radius_}};
}

HandSkeleton HandSkeleton::from_json(const nlohmann::json& j) {
  const auto parents = j.at("parents").get<std::vector<int>>();
  const auto& offsets = j.at("offsets");
  const auto& axes = j.at("axes");
  const auto& tips = j.at("tip_offsets");
  require(offsets.size() == parents.size() && axes.size() == parents.size() &&
              tips.size() == parents.size(),
          ErrorCode::kSchema, "skeleton arrays differ in length");
  std::vector<Joint> joints;
  std::vector<Vector3d> tip_offsets;
  for (std::size_t i = 0; i < parents.size(); ++i) {
    joints.push_back({parents[i], vec3_from(offsets[i]), vec3_from(axes[i])});
    tip_offsets.push_back(vec3_from(tips[i]));
  }
  return HandSkeleton(std::move(joints), std::move(tip_offsets),
                      j.at("capsule_radius").get<double>());
}

nlohmann::json HandPose::to_json() const {
  std::vector<double> r;
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 4; ++c) r.push_back(root(i, c));
  return {{"angles", angles}, {"root", r}};
}

HandPose HandPose::from_json(const nlohmann::json& j) {
  HandPose pose;
  pose.angles = j.at("angles").get<std::vector<double>>();
  const auto r = j.at("root").get<std::vector<double>>();
  require(r.size() == 16, ErrorCode::kSchema, "root transform must have 16 entries");
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 4; ++c) pose.root(i, c) = r[i * 4 + c];
  return pose;
}

Matrix4d rigid(const Eigen::Matrix3d& rotation, const Vector3d& translation) {
  Matrix4d t = Matrix4d::Identity();
  t.block<3, 3>(0, 0) = rotation;
  t.block<3, 1>(0, 3) = translation;
  return t;
}

Matrix4d rigid_inverse(const Matrix4d& t) {
  const Eigen::Matrix3d rt = t.block<3, 3>(0, 0).transpose();
  return rigid(rt, -rt * t.block<3, 1>(0, 3));
}

JointTransforms forward_kinematics(const HandSkeleton& skeleton, const HandPose& pose) {
  require(static_cast<int>(pose.angles.size()) == skeleton.joint_count(),
          ErrorCode::kInvalidArgument,
          "pose has " + std::to_string(pose.angles.size()) + " angles for " +
              std::to_string(skeleton.joint_count()) + " joints");
  JointTransforms out(skeleton.joint_count());
  for (int j = 0; j < skeleton.joint_count(); ++j) {
    const auto& jt = skeleton.joint(j);
    const Matrix4d local =
        rigid(Eigen::AngleAxisd(pose.angles[j], jt.axis).toRotationMatrix(), jt.offset);
    out[j] = (jt.parent < 0 ? pose.root : out[jt.parent]) * local;
  }
  return out;
}

namespace {

std::vector<int> nearest_joints(const Vector3d& point, const JointTransforms& joints, int k) {
  std::vector<double> dist(joints.size());
  for (std::size_t j = 0; j < joints.size(); ++j)
    dist[j] = (joints[j].block<3, 1>(0, 3) - point).squaredNorm();
  std::vector<int> order(joints.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  });
  order.resize(k);
  return order;
}

}  // namespace

std::vector<double> hand_embedding(const Vector3d& point, const JointTransforms& joints, int k) {
  require(k >= 1 && k <= static_cast<int>(joints.size()), ErrorCode::kInvalidArgument,
          "K must lie in [1, joint count]");
  std::vector<double> out;
  out.reserve(3 * k);
  for (int j : nearest_joints(point, joints, k)) {
    const Vector3d local =
        joints[j].block<3, 3>(0, 0).transpose() * (point - joints[j].block<3, 1>(0, 3));
    out.insert(out.end(), {local.x(), local.y(), local.z()});
  }
  return out;
}

tensor::Tensor hand_embedding_batch(const tensor::Tensor& points, const JointTransforms& joints,
                                    int k) {
  require(points.cols() == 3, ErrorCode::kShape, "points must be [N, 3]");
  const auto n = points.rows();
  tensor::Tensor out({n, 3 * static_cast<std::int64_t>(k)});
  for (std::int64_t r = 0; r < n; ++r) {
    const auto e = hand_embedding({points.at(r, 0), points.at(r, 1), points.at(r, 2)}, joints, k);
    std::copy(e.begin(), e.end(), out.values().begin() + r * 3 * k);
  }
  return out;
}

std::vector<Capsule> hand_capsules(const HandSkeleton& skeleton, const JointTransforms& joints) {
  std::vector<Capsule> caps;
  const double r = skeleton.capsule_radius();
  for (int j = 0; j < skeleton.joint_count(); ++j) {
    const Vector3d p = joints[j].block<3, 1>(0, 3);
    const int parent = skeleton.joint(j).parent;
    if (parent >= 0) caps.push_back({joints[parent].block<3, 1>(0, 3), p, r});
    if (skeleton.is_leaf(j) && skeleton.tip_offset(j).norm() > 0) {
      const Vector3d tip = (joints[j] * skeleton.tip_offset(j).homogeneous()).head<3>();
      caps.push_back({p, tip, r});
    }
  }
  return caps;
}

double point_segment_distance(const Vector3d& p, const Vector3d& a, const Vector3d& b) {
  const Vector3d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

}  // namespace occlumesh::hand
