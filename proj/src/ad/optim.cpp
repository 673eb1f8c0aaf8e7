#include "qgvr/ad/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace qgvr::ad {

double clip_gradients(ModelParameters& params, double threshold) {
  const double norm = params.grad_norm();
  if (norm > threshold) {
    const double factor = threshold / norm;
    for (auto& p : params.items()) {
      for (double& g : p.tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

AdamState AdamState::for_parameters(const ModelParameters& params, AdamConfig config) {
  AdamState state;
  state.config = config;
  for (const auto& p : params.items()) {
    state.moments[p.name] = {std::vector<double>(p.tensor.size(), 0.0), std::vector<double>(p.tensor.size(), 0.0)};
  }
  return state;
}

void adam_step(AdamState& state, ModelParameters& params) {
  if (state.moments.size() != params.items().size()) {
    throw std::invalid_argument("adam_step: optimizer tracks " + std::to_string(state.moments.size()) +
                                " tensors but the model has " + std::to_string(params.items().size()));
  }
  for (const auto& p : params.items()) {
    auto it = state.moments.find(p.name);
    if (it == state.moments.end()) throw std::invalid_argument("adam_step: no moments for " + p.name);
    if (it->second.first.size() != p.tensor.size() || it->second.second.size() != p.tensor.size()) {
      throw std::invalid_argument("adam_step: moment shape drift for " + p.name);
    }
  }
  const auto& cfg = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& p : params.items()) {
    auto& mom = state.moments.at(p.name);
    auto values = p.tensor.mutable_values();
    auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      mom.first[i] = cfg.beta1 * mom.first[i] + (1.0 - cfg.beta1) * g;
      mom.second[i] = cfg.beta2 * mom.second[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = mom.first[i] / bc1;
      const double v_hat = mom.second[i] / bc2;
      values[i] -= cfg.alpha * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

}  // namespace qgvr::ad
