#include "occlumesh/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "occlumesh/ops.hpp"

namespace occlumesh::losses {

namespace {

void require_nonempty(const Var& v, const char* what) {
  require(v.valid() && v.value().size() > 0, ErrorCode::kEmptyInput,
          std::string(what) + ": empty batch");
}

void require_finite(double value, const char* name) {
  require(std::isfinite(value), ErrorCode::kNonFinite,
          std::string("loss term '") + name + "' is not finite");
}

}  // namespace

Var color_loss(Var pred, const Tensor& target) {
  require_nonempty(pred, "color_loss");
  require(pred.value().size() == target.size(), ErrorCode::kShape, "color_loss: size mismatch");
  auto& tape = pred.tape();
  return ops::mean(ops::abs(ops::sub(pred, tape.constant(target.reshaped(pred.shape())))));
}

Var eikonal_loss(Var gradients) {
  require_nonempty(gradients, "eikonal_loss");
  require(gradients.value().cols() == 3, ErrorCode::kShape, "eikonal_loss expects [N, 3]");
  return ops::mean(ops::square(ops::add_scalar(ops::row_norm(gradients), -1.0)));
}

Var bce_loss(Var prob, const Tensor& target) {
  require_nonempty(prob, "bce_loss");
  require(prob.value().size() == target.size(), ErrorCode::kShape, "bce_loss: size mismatch");
  auto& tape = prob.tape();
  Tensor t = target.reshaped(prob.shape());
  Tensor one_minus_t(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) one_minus_t[i] = 1.0 - t[i];
  Var p = ops::clamp(prob, kBceClamp, 1.0 - kBceClamp);
  Var pos = ops::mul(tape.constant(std::move(t)), ops::log(p));
  Var neg = ops::mul(tape.constant(std::move(one_minus_t)),
                     ops::log(ops::add_scalar(ops::scale(p, -1.0), 1.0)));
  return ops::scale(ops::mean(ops::add(pos, neg)), -1.0);
}

Var mask_loss_pretrain(Var opacity, const Tensor& complete_mask) {
  return bce_loss(opacity, complete_mask);
}

Var amodal_mask_weighted_loss(Var opacity, const Tensor& union_target) {
  return bce_loss(opacity, union_target);
}

Var normal_orientation_loss(Var normals, const Tensor& dirs) {
  require_nonempty(normals, "normal_orientation_loss");
  require(normals.value().shape() == dirs.shape() && dirs.cols() == 3, ErrorCode::kShape,
          "normal_orientation_loss: normals and directions must both be [R, 3]");
  // min(0, -n.D)^2 = relu(n.D)^2
  Var facing = ops::row_dot(normals, normals.tape().constant(dirs));
  return ops::mean(ops::square(ops::relu(facing)));
}

std::vector<std::vector<int>> knn_neighbourhoods(const Tensor& points, int k) {
  const auto n = static_cast<int>(points.rows());
  require(points.cols() == 3, ErrorCode::kShape, "knn expects [N, 3]");
  require(k >= 1 && k <= n, ErrorCode::kInvalidArgument,
          "batch of " + std::to_string(n) + " points is smaller than K = " + std::to_string(k));
  std::vector<std::vector<int>> out(n);
  std::vector<int> order(n);
  std::vector<double> dist(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        const double d = points.at(i, c) - points.at(j, c);
        d2 += d * d;
      }
      dist[j] = d2;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
    });
    out[i].assign(order.begin(), order.begin() + k);
  }
  return out;
}

Var normal_smoothness_loss(Var normals, const Tensor& surface, int k) {
  require_nonempty(normals, "normal_smoothness_loss");
  require(normals.value().rows() == surface.rows(), ErrorCode::kShape,
          "normal_smoothness_loss: one surface point per normal");
  const auto nb = knn_neighbourhoods(surface, k);
  return ops::mean(ops::square(ops::sub(normals, ops::neighbor_mean(normals, nb))));
}

Var amodal_pretrain_loss(Var prediction, const Tensor& target) {
  require(prediction.value().size() == target.size(), ErrorCode::kShape,
          "amodal_pretrain_loss: resolution mismatch");
  return bce_loss(prediction, target);
}

nlohmann::json LossReport::to_json() const {
  return {{"schema", 1},
          {"iter", iter},
          {"color", color},
          {"eik", eikonal},
          {"mask", mask},
          {"n_ori", normal_orientation},
          {"n_smo", normal_smoothness},
          {"total", total},
          {"amodal", amodal},
          {"objective", objective}};
}

LossReport total_loss(const LossReport& terms, const LossWeights& w) {
  require_finite(terms.color, "color");
  require_finite(terms.eikonal, "eik");
  require_finite(terms.mask, "mask");
  require_finite(terms.normal_orientation, "n_ori");
  require_finite(terms.normal_smoothness, "n_smo");
  require(w.eikonal >= 0 && w.mask >= 0 && w.normal_orientation >= 0 && w.normal_smoothness >= 0,
          ErrorCode::kInvalidArgument, "loss weights must be non-negative");
  LossReport r = terms;
  r.total = terms.color + w.eikonal * terms.eikonal + w.mask * terms.mask +
            w.normal_orientation * terms.normal_orientation +
            w.normal_smoothness * terms.normal_smoothness;
  r.objective = r.total;
  return r;
}

Var total_loss(const LossTerms& t, const LossWeights& w, LossReport* report) {
  LossReport values;
  values.color = t.color.value().item();
  values.eikonal = t.eikonal.value().item();
  values.mask = t.mask.value().item();
  values.normal_orientation = t.normal_orientation.value().item();
  values.normal_smoothness = t.normal_smoothness.value().item();
  const LossReport r = total_loss(values, w);
  if (report) *report = r;
  Var total = t.color;
  total = ops::add(total, ops::scale(t.eikonal, w.eikonal));
  total = ops::add(total, ops::scale(t.mask, w.mask));
  total = ops::add(total, ops::scale(t.normal_orientation, w.normal_orientation));
  total = ops::add(total, ops::scale(t.normal_smoothness, w.normal_smoothness));
  return total;
}

}  // namespace occlumesh::losses
