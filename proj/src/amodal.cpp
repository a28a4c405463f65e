#include "occlumesh/amodal.hpp"

#include <algorithm>
#include <cmath>

#include "occlumesh/ops.hpp"

namespace occlumesh::amodal {

namespace {

void init_conv(const std::string& name, int out, int in, std::mt19937_64& rng, ParamMap& params) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * 9));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({out, in, 3, 3});
  for (auto& v : w.values()) v = dist(rng);
  params[name + ".w"] = std::move(w);
  params[name + ".b"] = Tensor({out}, 0.0);
}

void require_same(const Mask& a, const Mask& b) {
  require(a.same_size(b) && a.channels() == 1 && b.channels() == 1, ErrorCode::kShape,
          "mask resolutions differ");
}

}  // namespace

void init_amodal(const AmodalSpec& spec, std::mt19937_64& rng, ParamMap& params) {
  init_conv(kAmodalPrefix + ".up1", spec.hidden, spec.in_channels, rng, params);
  init_conv(kAmodalPrefix + ".up2", 1, spec.hidden, rng, params);
}

Var recover_amodal(const AmodalSpec& spec, const VarMap& params, Var feature_map) {
  require(feature_map.value().shape().size() == 3 && feature_map.value().dim(0) == spec.in_channels,
          ErrorCode::kShape, "amodal head: feature map channel mismatch");
  auto p = [&](const std::string& n) { return tensor::lookup(params, kAmodalPrefix + n); };
  Var x = ops::upsample_nearest2x(feature_map);
  x = ops::relu(ops::conv2d(x, p(".up1.w"), p(".up1.b"), 1, 1));
  x = ops::upsample_nearest2x(x);
  return ops::sigmoid(ops::conv2d(x, p(".up2.w"), p(".up2.b"), 1, 1));
}

Mask recover_amodal(const AmodalSpec& spec, const ParamMap& params,
                    const geometry::FeatureMap& feature_map) {
  tensor::Tape tape;
  auto vars = tensor::bind_parameters(tape, params, false);
  const Tensor& out = recover_amodal(spec, vars, tape.constant(feature_map.data)).value();
  return tensor_to_mask(out, static_cast<int>(out.dim(2)), static_cast<int>(out.dim(1)));
}

Mask amodal_target(const Mask& complete, const Mask& visible) {
  require_same(complete, visible);
  Mask out(complete.width(), complete.height(), 1);
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = std::max(complete.data()[i] - visible.data()[i], 0.0);
  return out;
}

Mask amodal_union(const Mask& predicted, const Mask& visible) {
  require_same(predicted, visible);
  Mask out(predicted.width(), predicted.height(), 1);
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = std::min(predicted.data()[i] + visible.data()[i], 1.0);
  return out;
}

Tensor mask_to_tensor(const Mask& mask) {
  return Tensor({1, mask.height(), mask.width()}, mask.data());
}

Mask tensor_to_mask(const Tensor& t, int width, int height) {
  require(static_cast<int>(t.size()) == width * height, ErrorCode::kShape,
          "tensor does not match mask size");
  Mask m(width, height, 1);
  std::copy(t.values().begin(), t.values().end(), m.data().begin());
  return m;
}

}  // namespace occlumesh::amodal
