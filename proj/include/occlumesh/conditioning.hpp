#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "occlumesh/camera.hpp"
#include "occlumesh/hand.hpp"
#include "occlumesh/image.hpp"
#include "occlumesh/tensor.hpp"

namespace occlumesh::conditioning {

using tensor::ParamMap;
using tensor::Tensor;
using tensor::Var;
using tensor::VarMap;

// Label reserved for hand pixels in part-label maps; 0 is background.
inline constexpr std::uint8_t kHandLabel = 255;
inline constexpr int kMaxPartId = 16;

// Three stride-2 stages (16, 32, 32 channels) fused at 1/4 resolution:
// avgpool(stage 1), stage 2 and upsampled stage 3 go through a 1x1
// bottleneck to `channels`; a global-pooled stage-3 vector goes through a
// linear bottleneck of the same width and is added at every texel.
struct EncoderSpec {
  int channels = 32;
  int stage1 = 16;
  int stage2 = 32;
  int stage3 = 32;
};

inline constexpr double kFeatureRatio = 0.25;

void init_encoder(const EncoderSpec& spec, std::mt19937_64& rng, ParamMap& params);

// RGB image times object mask as a [3, H, W] tensor.
Tensor masked_image_tensor(const Image& rgb, const Mask& object_mask);

// F_c map [channels, H/4, W/4]. H and W must be multiples of 8.
Var encode_reference(const EncoderSpec& spec, const VarMap& params, Var image_masked);
geometry::FeatureMap encode_reference(const EncoderSpec& spec, const ParamMap& params,
                                      const Tensor& image_masked);

struct PcaBasis {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // [D, 3], orthonormal columns
  Eigen::Vector3d explained_variance;
};

// descriptors: one row per sample.
PcaBasis fit_pca(const Eigen::MatrixXd& descriptors);
Eigen::Vector3d pca_project(const PcaBasis& basis, const Eigen::VectorXd& descriptor);

enum class SemanticMode { kGeneratorLabels, kLearned };

struct SemanticProvider {
  SemanticMode mode = SemanticMode::kGeneratorLabels;
  PcaBasis basis;  // learned mode only
};

// Fixed unit 3-vector for a part ID in [1, kMaxPartId].
Eigen::Vector3d part_color(int part_id);

// 3-channel F_s map at image resolution (ratio 1), zero outside the mask.
geometry::FeatureMap semantic_map_from_labels(const std::vector<std::uint8_t>& labels, int width,
                                              int height, const Mask& object_mask);
// descriptors [D, H, W] projected through the basis, zero outside the mask.
geometry::FeatureMap semantic_map_from_descriptors(const PcaBasis& basis, const Tensor& descriptors,
                                                   const Mask& object_mask);

struct PointFeatures {
  std::vector<double> semantic;  // F_s, 3
  std::vector<double> hand;      // F_h, 3K
  std::vector<double> color;     // F_c, c
  std::vector<double> concatenated() const;  // Cat(F_s, F_h, F_c)
};

// Width of Cat(F_s, F_h, F_c).
inline int conditioning_width(int channels, int k) { return 3 + 3 * k + channels; }

PointFeatures fetch_point_features(const geometry::FeatureMap& color_map,
                                   const geometry::FeatureMap& semantic_map,
                                   const geometry::Camera& cam, const Eigen::Vector3d& point,
                                   const hand::JointTransforms& joints, int k);

// Batched, differentiable in the colour map. `points` are world points
// [N, 3]; `embed_joints` and `embed_points` are the frame in which F_h is
// expressed (usually the normalised reconstruction box).
Var fetch_batch(Var color_map, double color_ratio, const geometry::FeatureMap& semantic_map,
                const geometry::Camera& cam, const Tensor& points, const Tensor& embed_points,
                const hand::JointTransforms& embed_joints, int k);

// Joint transforms re-expressed in the frame x' = (x - centre) / scale.
hand::JointTransforms normalize_joints(const hand::JointTransforms& joints,
                                       const Eigen::Vector3d& centre, double scale);

}  // namespace occlumesh::conditioning
