#pragma once

#include <random>
#include <string>

#include "occlumesh/camera.hpp"
#include "occlumesh/image.hpp"
#include "occlumesh/tensor.hpp"

namespace occlumesh::amodal {

using tensor::ParamMap;
using tensor::Tensor;
using tensor::Var;
using tensor::VarMap;

inline const std::string kAmodalPrefix = "amodal";

// Two nearest-neighbour 2x upsampling stages, each followed by a 3x3 conv;
// the last conv has one output channel and a sigmoid.
struct AmodalSpec {
  int in_channels = 32;
  int hidden = 16;
};

void init_amodal(const AmodalSpec& spec, std::mt19937_64& rng, ParamMap& params);

// F_c^I [C, H/4, W/4] -> covered-region probability [1, H, W].
Var recover_amodal(const AmodalSpec& spec, const VarMap& params, Var feature_map);
Mask recover_amodal(const AmodalSpec& spec, const ParamMap& params,
                    const geometry::FeatureMap& feature_map);

// max(M_co - M, 0): object pixels hidden by the hand.
Mask amodal_target(const Mask& complete, const Mask& visible);
// min(M_hat + M, 1): soft union used as the finetuning mask target.
Mask amodal_union(const Mask& predicted, const Mask& visible);

Tensor mask_to_tensor(const Mask& mask);
Mask tensor_to_mask(const Tensor& t, int width, int height);

}  // namespace occlumesh::amodal
