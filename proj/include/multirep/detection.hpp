#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "multirep/models.hpp"

namespace multirep {

/// Penultimate representations of one instance list under several models.
/// Every block has the same rows in the same order.
struct RepMatrix {
  std::vector<Tensor> blocks;  // model -> [instances, R]
  std::vector<float> labels;   // 0 clean, 1 adversarial
  std::vector<std::uint32_t> pair_ids;

  std::size_t rows() const { return labels.size(); }
  std::size_t width() const { return blocks.empty() ? 0 : blocks.front().dim(1); }
  std::size_t models() const { return blocks.size(); }
  void validate() const;
};

/// Blocks of penultimate activations, one per model, for `instances`.
std::vector<Tensor> extract(std::span<const Classifier* const> models, const Tensor& instances, std::size_t jobs = 1,
                            std::size_t batch_size = 256);

/// Assembles a RepMatrix for the given pair indices: clean rows for every
/// pair first, then the adversarial rows, labelled 0 and 1.
RepMatrix paired_reps(std::span<const Tensor> clean_blocks, std::span<const Tensor> adv_blocks,
                      std::span<const std::size_t> pairs, std::span<const std::uint32_t> pair_ids);

/// Mirrors the defaults of a common MLP library: Adam, L2 penalty
/// 0.5 * alpha * ||W||^2 / batch, mini-batches of min(200, n), shuffled every
/// epoch, stopping after `n_iter_no_change` epochs without a `tol` improvement
/// of the training loss or after `max_epochs`.
struct DetectorConfig {
  std::size_t hidden = 100;
  double alpha = 1e-4;
  double learning_rate = 1e-3;
  std::size_t batch_size = 200;
  std::size_t max_epochs = 200;
  double tol = 1e-4;
  std::size_t n_iter_no_change = 10;
};

/// D -> 100 ReLU -> 1 sigmoid.
class Detector {
 public:
  Detector() = default;
  Detector(Tensor w1, Tensor b1, Tensor w2, Tensor b2, std::uint64_t seed);

  std::size_t input_width() const { return w1_.dim(0); }
  std::size_t hidden_width() const { return w1_.dim(1); }
  std::uint64_t seed() const { return seed_; }
  std::size_t epochs_run = 0;
  std::vector<double> loss_curve;

  /// Adversarial probability per row of features [n, D].
  std::vector<double> probability(const Tensor& features) const;
  std::vector<float> flat_parameters() const;

 private:
  friend Detector train_detector(const Tensor&, std::span<const float>, std::uint64_t, const DetectorConfig&);
  Tensor w1_, b1_, w2_, b2_;
  std::uint64_t seed_ = 0;
};

Detector train_detector(const Tensor& features, std::span<const float> labels, std::uint64_t seed,
                        const DetectorConfig& cfg = {});

enum class Pipeline { modelwise, unitwise };
enum class Arm { treatment, control };
std::string pipeline_name(Pipeline p);
std::string arm_name(Arm a);
Pipeline parse_pipeline(const std::string& s);
Arm parse_arm(const std::string& s);

/// One detector-training request, recorded for auditing arm symmetry.
struct DetectorCall {
  std::vector<std::size_t> models;
  std::vector<std::size_t> units;  // empty: whole representation row
  std::uint64_t seed = 0;
  bool operator==(const DetectorCall&) const = default;
};
using CallTrace = std::vector<DetectorCall>;

/// Detectors trained within one trial on one training set, keyed by call.
/// Model-wise arms that share a (model, seed) request reuse the result.
using DetectorCache = std::map<std::pair<std::size_t, std::uint64_t>, Detector>;

/// Features for one detector: columns of the chosen blocks.
Tensor select_features(const RepMatrix& reps, std::span<const std::size_t> models, std::span<const std::size_t> units);

struct ModelwiseEnsemble {
  std::vector<std::size_t> models;
  std::vector<Detector> detectors;
  /// P = (1/N) * sum_i P_i, detector i reading block models[i].
  std::vector<double> probability(const RepMatrix& reps) const;
};

struct UnitwiseDetector {
  std::vector<std::size_t> models;
  std::vector<std::size_t> units;
  Detector detector;
  std::vector<double> probability(const RepMatrix& reps) const;
};

/// Seed of detector `index` within a trial; arm-independent so that N = 1
/// arms issue identical requests.
std::uint64_t modelwise_detector_seed(std::uint64_t trial_seed, std::size_t index);
std::uint64_t unitwise_detector_seed(std::uint64_t trial_seed, std::size_t n);

/// `pool` lists model ids in the trial's random order. Treatment uses
/// pool[0..N-1], one detector each; control trains N detectors with distinct
/// seeds on pool[0] alone.
ModelwiseEnsemble modelwise(Arm arm, std::size_t n, std::span<const std::size_t> pool, const RepMatrix& train,
                            std::uint64_t trial_seed, const DetectorConfig& cfg = {}, CallTrace* trace = nullptr,
                            DetectorCache* cache = nullptr);

/// Unit indices for a unit-wise arm. Treatment draws one unit per model
/// independently (repeats allowed); control draws N distinct units of one
/// model. Throws if control asks for more units than R.
std::vector<std::size_t> draw_units(Arm arm, std::size_t n, std::size_t width, std::uint64_t trial_seed);

/// One detector on an N-wide feature array: treatment takes one unit from
/// each of pool[0..N-1], control takes N units of pool[0].
UnitwiseDetector unitwise(Arm arm, std::size_t n, std::span<const std::size_t> pool, const RepMatrix& train,
                          std::uint64_t trial_seed, const DetectorConfig& cfg = {}, CallTrace* trace = nullptr);

/// Fraction of rows where (P > threshold) matches the label; P equal to the
/// threshold counts as clean.
double evaluate(std::span<const double> probabilities, std::span<const float> labels, double threshold = 0.5);

}  // namespace multirep
