#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "occlumesh/tensor.hpp"

namespace occlumesh::losses {

using tensor::Tensor;
using tensor::Var;

inline constexpr double kBceClamp = 1e-7;
inline constexpr int kDefaultSmoothnessK = 16;

struct LossWeights {
  double eikonal = 1.0;
  double mask = 1.0;
  double normal_orientation = 1e3;
  double normal_smoothness = 1e-2;
};

// Mean |pred - target| over rays and channels.
Var color_loss(Var pred, const Tensor& target);
// Mean of (||g|| - 1)^2 over rows of g[N, 3].
Var eikonal_loss(Var gradients);
// Mean BCE(target, p) with p clamped to [1e-7, 1 - 1e-7].
Var bce_loss(Var prob, const Tensor& target);
Var mask_loss_pretrain(Var opacity, const Tensor& complete_mask);
Var amodal_mask_weighted_loss(Var opacity, const Tensor& union_target);
// Mean of min(0, -n.D)^2 over rays.
Var normal_orientation_loss(Var normals, const Tensor& dirs);
// Mean over rays and components of (n_k - mean of the K nearest normals)^2,
// neighbourhoods by Euclidean distance between surface points (self included).
Var normal_smoothness_loss(Var normals, const Tensor& surface, int k = kDefaultSmoothnessK);
Var amodal_pretrain_loss(Var prediction, const Tensor& target);

// K nearest rows of points[N, 3] for every row, nearest first, ties by index.
std::vector<std::vector<int>> knn_neighbourhoods(const Tensor& points, int k);

struct LossTerms {
  Var color, eikonal, mask, normal_orientation, normal_smoothness;
};

struct LossReport {
  std::int64_t iter = 0;
  double color = 0, eikonal = 0, mask = 0, normal_orientation = 0, normal_smoothness = 0;
  double total = 0;
  double amodal = 0;     // pretraining only, added outside the weighted total
  double objective = 0;  // total + amodal weight * amodal

  nlohmann::json to_json() const;
};

// Weighted sum; throws kNonFinite naming the first non-finite term.
Var total_loss(const LossTerms& terms, const LossWeights& weights, LossReport* report);
LossReport total_loss(const LossReport& terms, const LossWeights& weights);

}  // namespace occlumesh::losses
