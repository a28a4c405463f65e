#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "occlumesh/ops.hpp"
#include "occlumesh/tensor.hpp"

namespace occlumesh::nn {

using tensor::ParamMap;
using tensor::Tensor;
using tensor::Var;
using tensor::VarMap;

enum class Activation { kSoftplus, kRelu, kSigmoid, kNone };

// Stack of `layer_count` linear layers. `hidden_activation` follows every
// layer but the last, `output_activation` follows the last. Layers listed in
// `skip_layers` take Cat(previous hidden code, network input) * skip_scale.
struct MlpSpec {
  int layer_count = 1;
  int hidden_dim = 64;
  int in_dim = 3;
  int out_dim = 1;
  Activation hidden_activation = Activation::kSoftplus;
  Activation output_activation = Activation::kNone;
  double softplus_beta = 100.0;
  std::set<int> skip_layers;
  double skip_scale = 0.70710678118654752440;

  void validate() const;
  int layer_in_dim(int layer) const;
  int layer_out_dim(int layer) const;
};

std::string weight_name(const std::string& prefix, int layer);
std::string bias_name(const std::string& prefix, int layer);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
void init_mlp(const MlpSpec& spec, const std::string& prefix, std::mt19937_64& rng,
              ParamMap& params);

Var eval_mlp(const MlpSpec& spec, const VarMap& params, const std::string& prefix, Var input);

struct TangentOutput {
  Var output;
  // d output / d direction, stacked [k * N, out_dim] for k input directions.
  Var tangent;
};

// Forward evaluation that also pushes k input-space directions through the
// network. `input_tangent` is [k * N, t] and covers the first t input
// columns; the remaining input columns are treated as constants. The tangent
// is itself recorded on the tape, so losses on it are differentiable.
TangentOutput eval_mlp_with_tangent(const MlpSpec& spec, const VarMap& params,
                                    const std::string& prefix, Var input, Var input_tangent);

// Value-only encoding of a 3-vector: [v, sin(2^0 pi v), cos(2^0 pi v), ...].
std::vector<double> positional_encode(const std::array<double, 3>& v, int num_freq);
inline int encoded_width(int num_freq) { return 3 + 6 * num_freq; }
// d E(v) / d v for each row of v[N, 3], stacked as [3 * N, 3 + 6F]: block d
// holds the derivative with respect to component d.
Tensor positional_encode_jacobian(const Tensor& v, int num_freq);

}  // namespace occlumesh::nn
