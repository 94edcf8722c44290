#include "multirep/adam.hpp"

#include <cmath>
#include <string>

namespace multirep {

void adam_step(std::span<float> values, std::span<const float> grads, std::vector<float>& first,
               std::vector<float>& second, std::uint64_t& step, const AdamHyper& hyper) {
  if (grads.size() != values.size()) {
    throw ShapeError("adam: " + std::to_string(grads.size()) + " gradients for " + std::to_string(values.size()) +
                     " values");
  }
  if (first.size() != values.size()) first.assign(values.size(), 0.0f);
  if (second.size() != values.size()) second.assign(values.size(), 0.0f);
  ++step;
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  const float b1 = static_cast<float>(hyper.beta1), b2 = static_cast<float>(hyper.beta2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float g = grads[i];
    first[i] = b1 * first[i] + (1.0f - b1) * g;
    second[i] = b2 * second[i] + (1.0f - b2) * g * g;
    const double m_hat = first[i] / c1;
    const double v_hat = second[i] / c2;
    values[i] -= static_cast<float>(hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon));
  }
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamHyper& hyper) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  }
  if (state.first.size() < params.size()) {
    state.first.resize(params.size());
    state.second.resize(params.size());
    state.steps.resize(params.size(), 0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_step(params[i]->data(), grads[i].data(), state.first[i], state.second[i], state.steps[i], hyper);
  }
}

}  // namespace multirep
