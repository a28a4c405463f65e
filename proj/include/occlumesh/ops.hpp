#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "occlumesh/tensor.hpp"

// Differentiable primitives recorded on a Tape. All inputs of one op must
// live on the same tape.
namespace occlumesh::ops {

using tensor::Shape;
using tensor::Tensor;
using tensor::Var;

// Elementwise, same shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var square(Var a);
Var abs(Var a);
Var log(Var a);
Var exp(Var a);
Var sqrt(Var a);
Var sigmoid(Var a);
Var relu(Var a);
// Gradient passes only where lo < x < hi.
Var clamp(Var a, double lo, double hi);
Var softplus(Var a, double beta);
// d/dx softplus_beta(x) = sigmoid(beta * x); differentiable once more.
Var softplus_slope(Var a, double beta);
// Step function of the input; recorded as a constant.
Var relu_slope(Var a);

// x[N, C] + b[C]
Var add_row(Var x, Var b);
// x[N, C] * s where s has a single element.
Var mul_scalar_var(Var x, Var s);
// t[k*N, C] * s[N, C], s repeated for each of the k row blocks.
Var mul_tiled(Var t, Var s);

// y = x W^T (+ b). x[N, in], W[out, in], b[out].
Var linear(Var x, Var w);
Var linear(Var x, Var w, Var b);
// Columns [begin, end) of w[out, in]; used to apply a slice of a layer.
Var slice_cols(Var x, std::int64_t begin, std::int64_t end);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, std::int64_t begin, std::int64_t end);
Var reshape(Var x, Shape shape);

Var sum(Var x);
Var mean(Var x);
// [N, C] -> [N, 1]
Var row_sum(Var x);
Var row_dot(Var a, Var b);
Var row_norm(Var x);

// NeuS-style discrete weights. sdf[R, n] sample SDF values in depth order,
// sharpness[1] = h > 0. Returns w[R, n] with w_i = T_i * alpha_i and
// alpha_i = max((Phi(h s_i) - Phi(h s_{i+1})) / max(Phi(h s_i), eps), 0);
// the last sample of a ray has no successor and gets alpha = 0.
Var neus_weights(Var sdf, Var sharpness);
// out[r] = sum_i w[r, i] * x[r * n + i]; w[R, n], x[R*n, k] -> [R, k].
Var composite(Var weights, Var x);
// out[r] = mean of x[j] over j in neighbours[r].
Var neighbor_mean(Var x, const std::vector<std::vector<int>>& neighbours);

// Sample a [C, H, W] map at continuous texel coordinates (x right, y down,
// texel centres at integers); coordinates clamp to the border texel.
Var bilinear_gather(Var map, const std::vector<std::array<double, 2>>& coords);

// Raw input followed by sin/cos of pi * 2^k * v for k < num_freq.
Var positional_encode(Var v, int num_freq);

// Image ops on [C, H, W] tensors.
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var upsample_nearest2x(Var x);
Var avg_pool2x(Var x);
Var global_avg_pool(Var x);
// x[C, H, W] + g[C] broadcast over pixels.
Var add_channel_vector(Var x, Var g);
Var concat_channels(const std::vector<Var>& parts);

}  // namespace occlumesh::ops
