#include "occlumesh/adam.hpp"

#include <cmath>

namespace occlumesh::nn {

void adam_step(tensor::ParamMap& params, const tensor::Gradients& grads, AdamState& state,
               double lr, const std::map<std::string, double>& lr_scale) {
  require(lr > 0, ErrorCode::kInvalidArgument, "learning rate must be positive");
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    require(it != params.end(), ErrorCode::kShape, "gradient for unknown parameter " + name);
    require(it->second.shape() == g.shape(), ErrorCode::kShape,
            "gradient shape mismatch for " + name);
    require(g.all_finite(), ErrorCode::kNonFinite, "non-finite gradient for " + name);
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);

  for (const auto& [name, g] : grads) {
    tensor::Tensor& p = params.at(name);
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.shape() != p.shape()) m = tensor::Tensor(p.shape(), 0.0);
    if (v.shape() != p.shape()) v = tensor::Tensor(p.shape(), 0.0);
    const auto scaled = lr_scale.find(name);
    const double step = scaled == lr_scale.end() ? lr : lr * scaled->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= step * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

}  // namespace occlumesh::nn
