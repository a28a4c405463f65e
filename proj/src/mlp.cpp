#include "occlumesh/mlp.hpp"

#include <cmath>
#include <numbers>

namespace occlumesh::nn {

void MlpSpec::validate() const {
  require(layer_count >= 1 && hidden_dim >= 1 && in_dim >= 1 && out_dim >= 1,
          ErrorCode::kInvalidArgument, "MLP dimensions must be positive");
  require(softplus_beta > 0, ErrorCode::kInvalidArgument, "softplus beta must be positive");
  for (int s : skip_layers)
    require(s >= 1 && s < layer_count, ErrorCode::kInvalidArgument,
            "skip layer " + std::to_string(s) + " outside [1, layer_count)");
}

int MlpSpec::layer_in_dim(int layer) const {
  if (layer == 0) return in_dim;
  return hidden_dim + (skip_layers.contains(layer) ? in_dim : 0);
}

int MlpSpec::layer_out_dim(int layer) const {
  return layer == layer_count - 1 ? out_dim : hidden_dim;
}

std::string weight_name(const std::string& prefix, int layer) {
  return prefix + ".l" + std::to_string(layer) + ".w";
}

std::string bias_name(const std::string& prefix, int layer) {
  return prefix + ".l" + std::to_string(layer) + ".b";
}

void init_mlp(const MlpSpec& spec, const std::string& prefix, std::mt19937_64& rng,
              ParamMap& params) {
  spec.validate();
  for (int l = 0; l < spec.layer_count; ++l) {
    const int in = spec.layer_in_dim(l);
    const int out = spec.layer_out_dim(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w({out, in});
    for (auto& v : w.values()) v = dist(rng);
    params[weight_name(prefix, l)] = std::move(w);
    params[bias_name(prefix, l)] = Tensor({out}, 0.0);
  }
}

namespace {

Var activate(Activation act, double beta, Var z) {
  switch (act) {
    case Activation::kSoftplus: return ops::softplus(z, beta);
    case Activation::kRelu: return ops::relu(z);
    case Activation::kSigmoid: return ops::sigmoid(z);
    case Activation::kNone: return z;
  }
  return z;
}

// Derivative of the activation at z, or an invalid Var for the identity.
Var activation_slope(Activation act, double beta, Var z, Var activated) {
  switch (act) {
    case Activation::kSoftplus: return ops::softplus_slope(z, beta);
    case Activation::kRelu: return ops::relu_slope(z);
    case Activation::kSigmoid: {
      // s (1 - s)
      return ops::mul(activated, ops::add_scalar(ops::scale(activated, -1.0), 1.0));
    }
    case Activation::kNone: return Var();
  }
  return Var();
}

void check_input(const MlpSpec& spec, const Var& input) {
  require(input.value().cols() == spec.in_dim, ErrorCode::kShape,
          "MLP layer 0: input width " + std::to_string(input.value().cols()) + ", expected " +
              std::to_string(spec.in_dim));
}

void check_layer(const MlpSpec& spec, const VarMap& params, const std::string& prefix, int l) {
  const auto& w = tensor::lookup(params, weight_name(prefix, l)).value();
  const auto& b = tensor::lookup(params, bias_name(prefix, l)).value();
  const tensor::Shape expected{spec.layer_out_dim(l), spec.layer_in_dim(l)};
  require(w.shape() == expected && static_cast<int>(b.size()) == spec.layer_out_dim(l),
          ErrorCode::kShape,
          "MLP layer " + std::to_string(l) + " of '" + prefix + "': weight shape " +
              tensor::shape_string(w.shape()) + ", expected " + tensor::shape_string(expected));
}

}  // namespace

Var eval_mlp(const MlpSpec& spec, const VarMap& params, const std::string& prefix, Var input) {
  spec.validate();
  check_input(spec, input);
  Var h = input;
  for (int l = 0; l < spec.layer_count; ++l) {
    check_layer(spec, params, prefix, l);
    Var layer_in = h;
    if (spec.skip_layers.contains(l))
      layer_in = ops::scale(ops::concat_cols({h, input}), spec.skip_scale);
    Var z = ops::linear(layer_in, tensor::lookup(params, weight_name(prefix, l)),
                        tensor::lookup(params, bias_name(prefix, l)));
    const bool last = l == spec.layer_count - 1;
    h = activate(last ? spec.output_activation : spec.hidden_activation, spec.softplus_beta, z);
  }
  return h;
}

TangentOutput eval_mlp_with_tangent(const MlpSpec& spec, const VarMap& params,
                                    const std::string& prefix, Var input, Var input_tangent) {
  spec.validate();
  check_input(spec, input);
  const std::int64_t t_cols = input_tangent.value().cols();
  require(t_cols <= spec.in_dim && input.value().rows() > 0 &&
              input_tangent.value().rows() % input.value().rows() == 0,
          ErrorCode::kShape, "input tangent layout does not match MLP input");

  Var h = input;
  Var t;  // tangent of h; invalid means "equals input_tangent" at layer 0
  for (int l = 0; l < spec.layer_count; ++l) {
    check_layer(spec, params, prefix, l);
    const Var& w = tensor::lookup(params, weight_name(prefix, l));
    const Var& b = tensor::lookup(params, bias_name(prefix, l));
    Var z, dz;
    if (l == 0) {
      z = ops::linear(h, w, b);
      dz = ops::linear(input_tangent, ops::slice_cols(w, 0, t_cols));
    } else if (spec.skip_layers.contains(l)) {
      z = ops::linear(ops::scale(ops::concat_cols({h, input}), spec.skip_scale), w, b);
      const auto hd = spec.hidden_dim;
      dz = ops::scale(ops::add(ops::linear(t, ops::slice_cols(w, 0, hd)),
                               ops::linear(input_tangent, ops::slice_cols(w, hd, hd + t_cols))),
                      spec.skip_scale);
    } else {
      z = ops::linear(h, w, b);
      dz = ops::linear(t, w);
    }
    const bool last = l == spec.layer_count - 1;
    const Activation act = last ? spec.output_activation : spec.hidden_activation;
    h = activate(act, spec.softplus_beta, z);
    Var slope = activation_slope(act, spec.softplus_beta, z, h);
    t = slope.valid() ? ops::mul_tiled(dz, slope) : dz;
  }
  return {h, t};
}

std::vector<double> positional_encode(const std::array<double, 3>& v, int num_freq) {
  require(num_freq >= 0, ErrorCode::kInvalidArgument, "num_freq must be non-negative");
  std::vector<double> out(static_cast<std::size_t>(encoded_width(num_freq)));
  for (int d = 0; d < 3; ++d) out[d] = v[d];
  for (int k = 0; k < num_freq; ++k) {
    const double f = std::numbers::pi * std::ldexp(1.0, k);
    for (int d = 0; d < 3; ++d) {
      out[3 + 6 * k + d] = std::sin(f * v[d]);
      out[3 + 6 * k + 3 + d] = std::cos(f * v[d]);
    }
  }
  return out;
}

Tensor positional_encode_jacobian(const Tensor& v, int num_freq) {
  require(v.cols() == 3, ErrorCode::kShape, "positional_encode_jacobian expects [N, 3]");
  const std::int64_t n = v.rows();
  const int width = encoded_width(num_freq);
  Tensor jac({3 * n, width}, 0.0);
  for (int d = 0; d < 3; ++d) {
    for (std::int64_t r = 0; r < n; ++r) {
      const std::int64_t row = d * n + r;
      const double x = v.at(r, d);
      jac.at(row, d) = 1.0;
      for (int k = 0; k < num_freq; ++k) {
        const double f = std::numbers::pi * std::ldexp(1.0, k);
        jac.at(row, 3 + 6 * k + d) = f * std::cos(f * x);
        jac.at(row, 3 + 6 * k + 3 + d) = -f * std::sin(f * x);
      }
    }
  }
  return jac;
}

}  // namespace occlumesh::nn
