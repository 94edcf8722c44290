#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "multirep/attacks.hpp"
#include "multirep/data.hpp"
#include "multirep/detection.hpp"
#include "multirep/models.hpp"

namespace multirep {

/// Invalid or unknown configuration content.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A named stage failed; the message names the stage.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage " + stage + " failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DataSource {
  /// "synthetic" or "cifar10:<dir>".
  std::string spec = "synthetic";
  /// Synthetic generator settings; image size and class count follow the architecture.
  SyntheticSpec synthetic = [] {
    SyntheticSpec s;
    s.samples_per_class = 1000;
    return s;
  }();
  std::size_t synthetic_test_per_class = 100;
  /// CIFAR-10: first N per class of the training files, first `test_limit` test images.
  std::size_t train_per_class = 1000;
  std::size_t test_limit = 10000;

  bool is_synthetic() const { return spec == "synthetic"; }
};

struct ArmGrid {
  std::vector<std::size_t> treatment;
  std::vector<std::size_t> control;
  bool empty() const { return treatment.empty() && control.empty(); }
};

struct ExperimentConfig {
  DataSource data{};
  std::size_t population = 16;
  ArchConfig arch = ArchConfig::desk();
  TrainConfig train{};
  std::map<AttackKind, AttackConfig> attacks = {{AttackKind::fgsm, AttackConfig::defaults(AttackKind::fgsm)},
                                                {AttackKind::bim, AttackConfig::defaults(AttackKind::bim)},
                                                {AttackKind::cw, AttackConfig::defaults(AttackKind::cw)}};
  DetectorConfig detector{};
  ArmGrid modelwise{{1, 2, 4, 8, 16}, {1, 2, 4, 8, 16}};
  ArmGrid unitwise{{8, 16}, {8, 16, 32, 64}};
  double test_fraction = 0.1;
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  std::string out = "runs/desk";

  static ExperimentConfig desk();
  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
};

ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& file);
std::string config_to_json(const ExperimentConfig& cfg);

struct TrialResult {
  Pipeline pipeline = Pipeline::modelwise;
  Arm arm = Arm::treatment;
  AttackKind train_attack = AttackKind::fgsm;
  AttackKind test_attack = AttackKind::fgsm;
  std::size_t n = 1;
  std::size_t trial = 0;
  double accuracy = 0.0;
};

std::string trial_to_json(const TrialResult& r);
TrialResult trial_from_json(const std::string& line);

struct CellKey {
  Pipeline pipeline;
  Arm arm;
  AttackKind train_attack;
  AttackKind test_attack;
  std::size_t n;
  auto operator<=>(const CellKey&) const = default;
};

struct SummaryCell {
  double mean = 0.0;
  double std = 0.0;
  std::size_t trials = 0;
  /// Set when a single trial leaves the sample std undefined (reported as 0).
  bool std_undefined = false;
};

using Summary = std::map<CellKey, SummaryCell>;

/// Mean and (n-1) sample std per cell; throws if cells have unequal trial counts.
Summary summarize(const std::vector<TrialResult>& results);

/// Everything the detection stage needs from the earlier stages.
struct TrialInputs {
  std::size_t population = 0;
  std::vector<Tensor> clean_blocks;                       // model -> [P, R]
  std::map<AttackKind, std::vector<Tensor>> adv_blocks;  // attack -> model -> [P, R]
  std::vector<std::uint32_t> pair_ids;
};

/// All detection results of one trial, in a fixed order. When `trace` is
/// given, model-wise detector requests are recorded per (arm, train attack, N).
std::vector<TrialResult> run_trial(const ExperimentConfig& cfg, const TrialInputs& in, std::size_t trial,
                                   std::map<std::string, CallTrace>* trace = nullptr);

std::uint64_t trial_seed(std::uint64_t master, std::size_t trial);

/// On-disk layout of a run directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path attacks() const { return root / "attacks"; }
  std::filesystem::path detection() const { return root / "detection"; }
  std::filesystem::path report() const { return root / "report"; }
  std::filesystem::path attacked_model() const { return models() / "attacked.mrc"; }
  std::filesystem::path rep_model(std::size_t k) const;
  std::filesystem::path adversarial(AttackKind kind) const;
  std::filesystem::path results() const { return detection() / "results.jsonl"; }
};

using Logger = std::function<void(const std::string&)>;

struct RunOptions {
  std::size_t jobs = 1;
  Logger log;
};

/// Stages. Each is skipped when its outputs already exist for the same
/// stage fingerprint, and throws StageError on failure.
void stage_train_models(const ExperimentConfig& cfg, const RunOptions& opt);
void stage_attack(const ExperimentConfig& cfg, const RunOptions& opt);
void stage_detect(const ExperimentConfig& cfg, const RunOptions& opt);
void stage_report(const ExperimentConfig& cfg, const RunOptions& opt);
void run_all(const ExperimentConfig& cfg, const RunOptions& opt);

/// Loads the datasets named by the config (train, test).
std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& cfg);

std::vector<TrialResult> read_results(const std::filesystem::path& file);

/// CSV with columns pipeline,arm,train_attack,test_attack,N,mean,std,trials.
void write_summary_csv(const Summary& summary, const std::filesystem::path& file);
/// One SVG per (pipeline, train attack, test attack): control and treatment
/// mean lines over N with mean +/- std bands. Returns the files written.
std::vector<std::filesystem::path> write_summary_svgs(const Summary& summary, const std::filesystem::path& dir);

}  // namespace multirep
