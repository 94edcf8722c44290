#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "multirep/adam.hpp"
#include "multirep/data.hpp"
#include "multirep/graph.hpp"
#include "multirep/rng.hpp"

namespace multirep {

struct BlockSpec {
  std::size_t filters = 16;
  std::size_t stride = 1;
  bool residual = true;
  bool operator==(const BlockSpec&) const = default;
};

/// Shape of the residual convolutional classifier:
///   shift -> conv3x3(stem) -> ReLU -> blocks -> global average pool
///   -> dense(R) -> ReLU [penultimate] -> dense(C)
/// Each block is conv3x3(stride) -> ReLU -> conv3x3 -> (+ skip) -> ReLU, where
/// the skip is a 1x1 projection whenever the block changes width or stride.
struct ArchConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t stem_filters = 16;
  std::vector<BlockSpec> blocks = {{16, 1, true}, {32, 2, true}};
  std::size_t penultimate_width = 64;
  std::size_t classes = 10;
  /// Fixed per-channel offset subtracted from the input before the stem.
  std::vector<float> input_mean = {0.5f, 0.5f, 0.5f};

  /// CIFAR-10 sized default.
  static ArchConfig desk();
  /// 16x16 variant with half-width convolutions and R = 16, used with the synthetic data.
  static ArchConfig compact();

  Shape input_shape() const { return {channels, height, width}; }
  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 128;
  AdamHyper adam{};
  double flip_probability = 0.5;
  std::size_t crop_padding = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainingMeta {
  std::size_t epochs = 0;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
  std::vector<double> epoch_loss;
  double holdout_accuracy = std::numeric_limits<double>::quiet_NaN();
};

class Classifier {
 public:
  static constexpr const char* kPenultimate = "penultimate";

  Classifier(ArchConfig arch, std::uint64_t seed, Graph graph, ParamId final_weight, ParamId final_bias);

  const ArchConfig& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  const Graph& graph() const { return graph_; }
  Graph& graph() { return graph_; }
  TrainingMeta meta;

  Tensor logits(const Tensor& batch) const;
  /// argmax of the logits, ties to the lowest class index.
  std::vector<std::int32_t> predict(const Tensor& batch) const;
  /// Activations feeding the final dense layer, [B, R].
  Tensor penultimate(const Tensor& batch) const;
  /// The final dense layer on its own: representations [B, R] to logits.
  Tensor final_dense(const Tensor& representations) const;
  /// d/dx of loss_scale * sum_i CE(logits(x_i), y_i).
  Tensor input_gradient(const Tensor& x, std::span<const std::int32_t> labels, float loss_scale = 1.0f) const;

  /// Flat copy of every parameter in registry order.
  std::vector<float> flat_parameters() const;

 private:
  ArchConfig arch_;
  std::uint64_t seed_;
  Graph graph_;
  ParamId final_weight_;
  ParamId final_bias_;
};

/// He-normal (fan-in) weights and zero biases from a stream derived from `seed`.
Classifier build_classifier(const ArchConfig& arch, std::uint64_t seed);

/// Random horizontal flip, then a crop of the original size from the
/// zero-padded image with offsets uniform over {0..2*pad}^2.
void augment(std::span<const float> image, std::span<float> out, std::size_t channels, std::size_t height,
             std::size_t width, double flip_probability, std::size_t pad, Rng& rng);
Tensor augment(const Tensor& image, double flip_probability, std::size_t pad, Rng& rng);
/// Mirror along the width axis; [C, H, W] or [B, C, H, W].
Tensor flip_horizontal(const Tensor& image);

/// Mini-batch Adam on softmax cross entropy with augmentation. When
/// `holdout` is given its accuracy is recorded in the report and in
/// `classifier.meta`.
TrainReport train(Classifier& classifier, const Dataset& data, const TrainConfig& cfg,
                  const Dataset* holdout = nullptr);

std::vector<std::int32_t> predict_dataset(const Classifier& classifier, const Dataset& data,
                                          std::size_t batch_size = 256);
double accuracy(const Classifier& classifier, const Dataset& data, std::size_t batch_size = 256);

/// Index of the first maximum in each row of a [B, C] tensor.
std::vector<std::int32_t> argmax_rows(const Tensor& logits);

/// Versioned binary container: magic "MRCLSF01", key=value header, then
/// every parameter as little-endian f32 in registry order.
void save_classifier(const Classifier& classifier, const std::filesystem::path& file);
Classifier load_classifier(const std::filesystem::path& file);

}  // namespace multirep
