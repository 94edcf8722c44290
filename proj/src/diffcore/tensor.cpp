#include "multirep/tensor.hpp"

#include <functional>
#include <numeric>

namespace multirep {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                     " values but " + std::to_string(data_.size()) + " were given");
  }
}

void Tensor::set_grad(std::vector<float> g) {
  if (g.size() != data_.size()) {
    throw ShapeError("gradient of " + std::to_string(g.size()) + " values does not match tensor " +
                     shape_str(shape_));
  }
  grad_ = std::move(g);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

}  // namespace multirep
