#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "multirep/tensor.hpp"

namespace multirep {

class Tape;

enum class OpKind {
  leaf,
  dense,
  conv2d,
  relu,
  global_avg_pool,
  flatten,
  add,
  channel_shift,
  scale,
  sum,
  weighted_sum,
  sum_squares,
  softmax_cross_entropy,
  sigmoid_cross_entropy,
};

std::string_view op_name(OpKind kind);

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// One recorded operation: kind, input ids and output id.
struct OpRecord {
  OpKind kind;
  std::vector<std::size_t> inputs;
  std::size_t output;
};

/// Define-by-run gradient tape. Records are appended in execution order, which
/// is a topological order; backward walks them once in reverse.
///
/// A tape is single-owner. Share graphs across threads, never tapes.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  /// With `record` false no backward closures or saved intermediates are kept.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward seed with respect to `v`; empty if `v`
  /// did not participate.
  std::span<const float> grad(Var v) const;
  bool needs_grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 for a scalar loss and propagates.
  void backward(Var loss);
  /// Vector-Jacobian product: seeds `upstream` (same size as `out`).
  void backward(Var out, std::span<const float> upstream);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<OpRecord>& records() const { return records_; }

  // Op-author interface.
  Var push(OpKind kind, Tensor value, std::vector<std::size_t> inputs, Backprop backprop);
  bool node_needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  std::span<const float> node_grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient accumulator for `id`, zero-initialised on first access.
  std::vector<float>& grad_accumulator(std::size_t id);

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    std::vector<float> grad;
    Backprop backprop;
  };

  void check_owned(Var v) const;
  void run_backward(std::size_t from);

  bool record_;
  std::vector<Node> nodes_;
  std::vector<OpRecord> records_;
};

}  // namespace multirep
