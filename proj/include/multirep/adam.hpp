#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "multirep/tensor.hpp"

namespace multirep {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators and step counters, one slot per parameter. Slots are
/// created on first use.
struct AdamState {
  std::vector<std::vector<float>> first;
  std::vector<std::vector<float>> second;
  std::vector<std::uint64_t> steps;
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamHyper& hyper);

/// Same update on raw buffers, for optimisation over non-parameter tensors.
void adam_step(std::span<float> values, std::span<const float> grads, std::vector<float>& first,
               std::vector<float>& second, std::uint64_t& step, const AdamHyper& hyper);

}  // namespace multirep
