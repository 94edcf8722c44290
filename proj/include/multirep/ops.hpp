#pragma once

#include <cstdint>
#include <span>

#include "multirep/tape.hpp"

namespace multirep::ops {

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

enum class Reduction { sum, mean };

/// x [B, in] · w [in, out] + b [out].
Var dense(Var x, Var w, Var b);
/// x [B, C, H, W], w [O, C, kh, kw], b [O]; zero padding.
Var conv2d(Var x, Var w, Var b, Conv2dSpec spec);
Var relu(Var x);
/// [B, C, H, W] -> [B, C]
Var global_avg_pool(Var x);
/// [B, ...] -> [B, prod(...)]
Var flatten(Var x);
/// Elementwise a + b, equal shapes.
Var add(Var a, Var b);
/// x[:, c, ...] - offset[c], a fixed (non-trainable) per-channel shift.
Var channel_shift(Var x, std::span<const float> offset);
Var scale(Var x, float factor);
Var sum(Var x);
/// sum_i x_i * weights_i with constant weights; used for vector-Jacobian seeds.
Var weighted_sum(Var x, std::span<const float> weights);
Var sum_squares(Var x);
/// Max-shifted log-softmax cross entropy; logits [B, C], labels in [0, C).
Var softmax_cross_entropy(Var logits, std::span<const std::int32_t> labels, Reduction reduction = Reduction::mean);
/// Binary log loss on raw scores [B] or [B, 1] against targets in {0, 1}.
Var sigmoid_cross_entropy(Var scores, std::span<const float> targets, Reduction reduction = Reduction::mean);

}  // namespace multirep::ops
