#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "multirep/data.hpp"
#include "multirep/graph.hpp"
#include "multirep/models.hpp"

namespace multirep {

enum class AttackKind { fgsm, bim, cw };

std::string attack_name(AttackKind kind);
/// "fgsm", "bim" or "cw" (case-insensitive); throws invalid_argument otherwise.
AttackKind parse_attack(const std::string& name);

struct CwParams {
  double learning_rate = 0.005;
  std::size_t binary_steps = 5;
  std::size_t max_iterations = 200;
  double confidence = 100.0;
  double initial_const = 1e-2;
  /// Per instance: stop once the objective fails to improve by 0.01% over a
  /// tenth of the iteration budget.
  bool abort_early = true;
};

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 3.0 / 255.0;
  double alpha = 1.0 / 255.0;
  std::size_t iterations = 10;
  CwParams cw{};

  static AttackConfig defaults(AttackKind kind);
  void validate() const;
};

/// sign(0) = 0.
inline float sign_of(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

/// Clip to [0, 1], then round(v * 255) / 255 with halves rounded away from zero.
float postprocess_value(float v);
void postprocess(std::span<float> values);
Tensor postprocess(Tensor x);

/// Gradient of the summed softmax cross entropy with respect to the input.
Tensor loss_input_gradient(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels);

/// x + epsilon * sign(grad_x J), not post-processed.
Tensor fgsm(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels, double epsilon);

/// `iterations` FGSM steps of size alpha, each followed by clipping to the
/// epsilon-ball around x and to [0, 1]. Not post-processed.
Tensor bim(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels, double alpha,
           std::size_t iterations, double epsilon);

struct CwResult {
  Tensor adversarial;
  /// True where some iterate met the confidence margin.
  std::vector<std::uint8_t> success;
  /// Squared L2 distance of the returned image from x.
  std::vector<double> l2_squared;
  std::vector<double> final_const;
};

/// Untargeted Carlini-Wagner L2 with the tanh change of variables and a
/// per-instance binary search over the constant c. Instances are
/// independent: the result for a row does not depend on its batch mates.
CwResult cw_l2(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels, const CwParams& params);

/// Runs the configured attack on a batch and post-processes the result.
Tensor run_attack(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels,
                  const AttackConfig& cfg);

/// Perturbed counterparts of the test images the attacked model classifies
/// correctly, with provenance and per-instance verdicts.
struct AdversarialSet {
  AttackConfig config;
  std::string attacked_model;
  std::string toolkit_version;
  PairedSet pairs;
  /// 1 when the attacked model misclassifies the post-processed image.
  std::vector<std::uint8_t> fooled;

  std::size_t size() const { return pairs.size(); }
  double success_rate() const;
};

/// Indices of `data` that `model` classifies correctly.
std::vector<std::size_t> correctly_classified(const Classifier& model, const Dataset& data);

/// Attacks every correctly classified image of `test` in shards of
/// `shard_size` across `jobs` threads. Every perturbed image is kept,
/// whether or not it fools the attacked model.
AdversarialSet attack_population(const Classifier& model, const Dataset& test, const AttackConfig& cfg,
                                 const std::string& model_id, std::size_t jobs = 1,
                                 std::size_t shard_size = 32);

struct TransferStats {
  std::vector<double> accuracies;
  double mean = 0.0;
  double std = 0.0;
};

/// Accuracy of each model on the perturbed images, with the (n-1) sample std.
TransferStats transfer_eval(std::span<const Classifier> models, const AdversarialSet& adv, std::size_t jobs = 1);
TransferStats transfer_eval(std::span<const Classifier* const> models, const AdversarialSet& adv,
                            std::size_t jobs = 1);

/// Container "MRADVS01": key=value provenance header, per-instance records,
/// then clean and perturbed images as u8 levels.
void save_adversarial_set(const AdversarialSet& set, const std::filesystem::path& file);
AdversarialSet load_adversarial_set(const std::filesystem::path& file);

/// Binary PPM with one row per class and columns original / FGSM / BIM / CW,
/// using the first image of each class present in every set.
void write_attack_grid(const std::filesystem::path& file, const AdversarialSet& fgsm_set,
                       const AdversarialSet& bim_set, const AdversarialSet& cw_set, std::size_t classes,
                       std::size_t zoom = 4);

}  // namespace multirep
