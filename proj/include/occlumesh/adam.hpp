#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "occlumesh/tensor.hpp"

namespace occlumesh::nn {

struct AdamState {
  tensor::ParamMap first_moment;
  tensor::ParamMap second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam update of every parameter that has a gradient entry.
// Parameters without a gradient (frozen) are left untouched. `lr_scale`
// multiplies the step of the named parameters.
void adam_step(tensor::ParamMap& params, const tensor::Gradients& grads, AdamState& state,
               double lr, const std::map<std::string, double>& lr_scale = {});

}  // namespace occlumesh::nn
