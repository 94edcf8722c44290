#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "multirep/tensor.hpp"

namespace multirep {

/// Malformed or missing input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images stored N x C x H x W in [0, 1], with integer class labels.
struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 10;
  std::vector<float> pixels;
  std::vector<std::int32_t> labels;
  std::string split;
  std::string source;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  Shape image_shape() const { return {channels, height, width}; }
  std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }

  /// [n, C, H, W] tensor of the given rows.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor batch(std::size_t begin, std::size_t end) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  /// Throws DataError unless pixels are in [0, 1] and labels in [0, classes).
  void validate() const;
};

/// Byte intensity to [0, 1]: exactly v / 255.
inline float scale_byte(std::uint8_t v) { return static_cast<float>(static_cast<double>(v) / 255.0); }

/// Nearest 1/255 level of a value already clipped to [0, 1], rounding half away from zero.
std::uint8_t quantize_byte(float v);

/// Parses one CIFAR-10 binary batch: 3073-byte records of label then 1024 R,
/// 1024 G, 1024 B bytes (row-major 32x32).
Dataset read_cifar10_batch(const std::filesystem::path& file, const std::string& split);

/// data_batch_1..5.bin as train and test_batch.bin as test.
std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& directory);

/// First `per_class` images of each class, in file order.
Dataset stratified_head(const Dataset& data, std::size_t per_class);

/// Parameters of the class-conditional synthetic image generator.
///
/// Each class owns a faint colour grating (class-specific spatial frequency,
/// orientation and colour, random phase) plus a very faint high-frequency
/// colour texture. Every image also carries a random tint, random Gaussian
/// colour blobs as clutter, and pixel noise. Output is clipped and quantized
/// to the 1/255 grid, like CIFAR-10 bytes.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t samples_per_class = 100;
  double grating_amplitude = 0.05;
  double texture_amplitude = 4.0 / 255.0;
  double clutter_amplitude = 0.05;
  std::size_t clutter_blobs = 3;
  double tint = 0.1;
  double noise = 0.02;
  /// Seeds the class prototypes; train and test sets must share it.
  std::uint64_t prototype_seed = 123;

  /// Strong gratings and little clutter: a small CNN separates the classes
  /// within a few epochs. The defaults are deliberately harder, so that
  /// models lean on fragile texture cues and attacks bite.
  static SyntheticSpec easy();
};

/// Deterministic in (spec, seed); classes are interleaved so that any prefix
/// is close to balanced.
Dataset synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Clean images and index-aligned adversarial counterparts.
struct PairedSet {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<float> clean;
  std::vector<float> adversarial;
  std::vector<std::uint32_t> source_ids;
  std::vector<std::int32_t> labels;

  std::size_t size() const { return source_ids.size(); }
  std::size_t image_size() const { return channels * height * width; }
  PairedSet subset(std::span<const std::size_t> indices) const;
  /// Expansion to 2 instances per pair: clean rows first, then adversarial,
  /// with detection targets 0 and 1.
  std::pair<Tensor, std::vector<float>> expand() const;
};

struct PairSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Random split of pair indices 0..pairs-1. The test side gets
/// round(test_fraction * pairs) pairs, clamped to [1, pairs - 1].
PairSplit split_pairs(std::size_t pairs, double test_fraction, std::uint64_t seed);

/// Pair-preserving split: a clean image and its counterpart always land on the same side.
std::pair<PairedSet, PairedSet> pair_split(const PairedSet& pairs, double test_fraction, std::uint64_t seed);

}  // namespace multirep
