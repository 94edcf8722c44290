#include "multirep/graph.hpp"

#include <stdexcept>

namespace multirep {

namespace {
Layer make_layer(LayerKind kind) {
  Layer l;
  l.kind = kind;
  return l;
}
}  // namespace

ParamId Graph::add_parameter(std::string name, Tensor value) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  params_.push_back(Parameter{std::move(name), std::move(value)});
  return ParamId{params_.size() - 1};
}

void Graph::add_input_shift(std::vector<float> per_channel) {
  Layer l = make_layer(LayerKind::input_shift);
  l.shift = std::move(per_channel);
  layers_.push_back(std::move(l));
}

void Graph::add_dense(ParamId weight, ParamId bias) {
  Layer l = make_layer(LayerKind::dense);
  l.weight = weight.index;
  l.bias = bias.index;
  layers_.push_back(l);
}

void Graph::add_conv2d(ParamId weight, ParamId bias, ops::Conv2dSpec spec) {
  Layer l = make_layer(LayerKind::conv2d);
  l.weight = weight.index;
  l.bias = bias.index;
  l.conv = spec;
  layers_.push_back(l);
}

void Graph::add_relu() { layers_.push_back(make_layer(LayerKind::relu)); }
void Graph::add_global_avg_pool() { layers_.push_back(make_layer(LayerKind::global_avg_pool)); }
void Graph::add_flatten() { layers_.push_back(make_layer(LayerKind::flatten)); }
void Graph::push_skip() { layers_.push_back(make_layer(LayerKind::push_skip)); }
void Graph::add_skip() { layers_.push_back(make_layer(LayerKind::add_skip)); }

void Graph::add_skip(ParamId weight, ParamId bias, ops::Conv2dSpec spec) {
  Layer l = make_layer(LayerKind::add_skip);
  l.weight = weight.index;
  l.bias = bias.index;
  l.conv = spec;
  layers_.push_back(l);
}

void Graph::mark(const std::string& name) { marks_[name] = layers_.size(); }

std::size_t Graph::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Graph::check_input(const Shape& input) const {
  bool ok = input.size() == input_shape_.size() + 1;
  for (std::size_t i = 0; ok && i < input_shape_.size(); ++i) ok = input[i + 1] == input_shape_[i];
  if (!ok) {
    throw ShapeError("graph expects input [B, " + shape_str(input_shape_).substr(1) + " but got " +
                     shape_str(input));
  }
}

Tensor Graph::forward(const Tensor& input) const {
  ForwardPass pass(*this, input, GradMode::none);
  return pass.output();
}

Tensor Graph::forward_to(const Tensor& input, const std::string& mark) const {
  auto it = marks_.find(mark);
  if (it == marks_.end()) throw std::invalid_argument("graph has no mark named " + mark);
  ForwardPass pass(*this, input, GradMode::none, it->second);
  return pass.output();
}

ForwardPass::ForwardPass(const Graph& graph, Tensor input, GradMode mode, std::size_t end_layer)
    : graph_(&graph), mode_(mode), tape_(std::make_unique<Tape>(mode != GradMode::none)) {
  graph.check_input(input.shape());
  Tape& t = *tape_;
  const bool grad_input = mode == GradMode::input || mode == GradMode::params_and_input;
  const bool grad_params = mode == GradMode::params || mode == GradMode::params_and_input;
  input_ = grad_input ? t.variable(std::move(input)) : t.constant(std::move(input));
  params_.reserve(graph.params_.size());
  for (const auto& p : graph.params_) params_.push_back(grad_params ? t.variable(p.value) : t.constant(p.value));

  std::vector<Var> skips;
  Var h = input_;
  const std::size_t end = std::min(end_layer, graph.layers_.size());
  auto tap_marks = [&](std::size_t executed) {
    for (const auto& [name, pos] : graph.marks_) {
      if (pos == executed) taps_[name] = h;
    }
  };
  tap_marks(0);
  for (std::size_t i = 0; i < end; ++i) {
    const Layer& l = graph.layers_[i];
    switch (l.kind) {
      case LayerKind::input_shift: h = ops::channel_shift(h, l.shift); break;
      case LayerKind::dense: h = ops::dense(h, params_[l.weight], params_[l.bias]); break;
      case LayerKind::conv2d: h = ops::conv2d(h, params_[l.weight], params_[l.bias], l.conv); break;
      case LayerKind::relu: h = ops::relu(h); break;
      case LayerKind::global_avg_pool: h = ops::global_avg_pool(h); break;
      case LayerKind::flatten: h = ops::flatten(h); break;
      case LayerKind::push_skip: skips.push_back(h); break;
      case LayerKind::add_skip: {
        if (skips.empty()) throw std::logic_error("add_skip without a matching push_skip");
        Var s = skips.back();
        skips.pop_back();
        if (l.weight != Layer::none) s = ops::conv2d(s, params_[l.weight], params_[l.bias], l.conv);
        h = ops::add(h, s);
        break;
      }
    }
    tap_marks(i + 1);
  }
  output_ = h;
}

const Tensor& ForwardPass::tap(const std::string& mark) const {
  auto it = taps_.find(mark);
  if (it == taps_.end()) throw std::invalid_argument("no activation recorded for mark " + mark);
  return it->second.value();
}

GradientMap ForwardPass::collect() {
  GradientMap out;
  const bool grad_params = mode_ == GradMode::params || mode_ == GradMode::params_and_input;
  if (grad_params) {
    out.params.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto g = tape_->grad(params_[i]);
      const Shape& shape = graph_->params_[i].value.shape();
      out.params.push_back(g.empty() ? Tensor(shape) : Tensor(shape, std::vector<float>(g.begin(), g.end())));
    }
  }
  if (mode_ == GradMode::input || mode_ == GradMode::params_and_input) {
    const auto g = tape_->grad(input_);
    const Shape& shape = input_.shape();
    out.input = g.empty() ? Tensor(shape) : Tensor(shape, std::vector<float>(g.begin(), g.end()));
    out.has_input = true;
  }
  return out;
}

GradientMap ForwardPass::backward(Var loss) {
  if (mode_ == GradMode::none) throw std::logic_error("backward requested on a forward pass without gradients");
  tape_->backward(loss);
  return collect();
}

GradientMap ForwardPass::backward_output(std::span<const float> upstream) {
  if (mode_ == GradMode::none) throw std::logic_error("backward requested on a forward pass without gradients");
  tape_->backward(output_, upstream);
  return collect();
}

}  // namespace multirep
