#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "multirep/ops.hpp"
#include "multirep/tape.hpp"

namespace multirep {

struct ParamId {
  std::size_t index = 0;
  auto operator<=>(const ParamId&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
};

enum class LayerKind { input_shift, dense, conv2d, relu, global_avg_pool, flatten, push_skip, add_skip };

struct Layer {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  LayerKind kind;
  std::size_t weight = none;
  std::size_t bias = none;
  ops::Conv2dSpec conv{};
  std::vector<float> shift;
};

/// Gradients from one backward pass, indexed by parameter registry order.
struct GradientMap {
  std::vector<Tensor> params;
  Tensor input;
  bool has_input = false;
};

/// An ordered layer stack over a parameter registry. Parameter ids are stable
/// for the lifetime of the graph; the layer program is fixed once built.
class Graph {
 public:
  explicit Graph(Shape input_shape) : input_shape_(std::move(input_shape)) {}

  ParamId add_parameter(std::string name, Tensor value);
  void add_input_shift(std::vector<float> per_channel);
  void add_dense(ParamId weight, ParamId bias);
  void add_conv2d(ParamId weight, ParamId bias, ops::Conv2dSpec spec);
  void add_relu();
  void add_global_avg_pool();
  void add_flatten();
  /// Saves the current activation for a later add_skip.
  void push_skip();
  /// Adds the most recently saved activation.
  void add_skip();
  /// Adds the saved activation after a projection convolution.
  void add_skip(ParamId weight, ParamId bias, ops::Conv2dSpec spec);
  /// Names the activation produced by the most recent layer.
  void mark(const std::string& name);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& parameters() { return params_; }
  const Parameter& parameter(ParamId id) const { return params_.at(id.index); }
  Parameter& parameter(ParamId id) { return params_.at(id.index); }
  std::size_t parameter_count() const;
  bool has_mark(const std::string& name) const { return marks_.count(name) != 0; }

  /// Inference without gradient recording. A graph with no layers is the identity.
  Tensor forward(const Tensor& input) const;
  /// Activation at a marked layer, without gradient recording.
  Tensor forward_to(const Tensor& input, const std::string& mark) const;

  /// Throws ShapeError unless `input` is [B, input_shape...].
  void check_input(const Shape& input) const;

 private:
  friend class ForwardPass;

  Shape input_shape_;
  std::vector<Parameter> params_;
  std::vector<Layer> layers_;
  std::map<std::string, std::size_t> marks_;  // name -> number of layers executed
};

enum class GradMode { none, params, input, params_and_input };

/// One recorded forward evaluation of a graph. Owns its tape.
class ForwardPass {
 public:
  ForwardPass(const Graph& graph, Tensor input, GradMode mode = GradMode::none,
              std::size_t end_layer = std::numeric_limits<std::size_t>::max());

  ForwardPass(const ForwardPass&) = delete;
  ForwardPass& operator=(const ForwardPass&) = delete;

  Tape& tape() { return *tape_; }
  Var output_var() const { return output_; }
  const Tensor& output() const { return output_.value(); }
  Var input_var() const { return input_; }
  Var param_var(ParamId id) const { return params_.at(id.index); }
  const Tensor& tap(const std::string& mark) const;

  /// Backpropagates `loss` (scalar, recorded on tape()).
  GradientMap backward(Var loss);
  /// Vector-Jacobian product of the output with `upstream`.
  GradientMap backward_output(std::span<const float> upstream);

 private:
  GradientMap collect();

  const Graph* graph_;
  GradMode mode_;
  std::unique_ptr<Tape> tape_;
  Var input_;
  Var output_;
  std::vector<Var> params_;
  std::map<std::string, Var> taps_;
};

}  // namespace multirep
