#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "multirep/harness.hpp"

using namespace multirep;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrialResult result(Pipeline p, Arm a, std::size_t n, std::size_t trial, double acc) {
  TrialResult r;
  r.pipeline = p;
  r.arm = a;
  r.n = n;
  r.trial = trial;
  r.accuracy = acc;
  return r;
}

// Smallest configuration that still exercises every stage.
ExperimentConfig micro(const fs::path& out) {
  ExperimentConfig cfg = config_from_json(R"({
    "data": {"source": "synthetic", "synthetic": {"train_per_class": 8, "test_per_class": 4}},
    "population": 2,
    "arch": {"height": 8, "width": 8, "stem_filters": 2,
             "blocks": [{"filters": 4, "stride": 2, "residual": true}], "penultimate_width": 4},
    "train": {"epochs": 1, "batch_size": 16},
    "attacks": {"cw": {"binary_steps": 1, "max_iterations": 5}},
    "detector": {"hidden": 8, "max_epochs": 5},
    "grid": {"modelwise": {"treatment": [1], "control": [1]},
             "unitwise": {"treatment": [1], "control": [1]}},
    "trials": 1,
    "seed": 3
  })");
  cfg.out = out.string();
  return cfg;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys at every level") {
  CHECK_NOTHROW(config_from_json("{}"));
  CHECK_THROWS_AS(config_from_json(R"({"trails": 3})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"train": {"epoch": 3}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"attacks": {"cw": {"kappa": 3}}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"arch": {"blocks": [{"filters": 4, "strides": 1}]}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"data": {"synthetic": {"noise_level": 1}}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"grid": {"modelwise": {"treatment": [1], "ctrl": [1]}}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"trials": "many"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{not json"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(ExperimentConfig::desk().validate());
  CHECK_THROWS_AS(config_from_json(R"({"population": 8})").validate(), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"grid": {"modelwise": {"treatment": [4, 2], "control": [1]}}})").validate(),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"grid": {"unitwise": {"treatment": [8], "control": [128]}}})").validate(),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"test_fraction": 1.5})").validate(), ConfigError);
}

TEST_CASE("config serialization round trips") {
  ExperimentConfig cfg = ExperimentConfig::desk();
  cfg.seed = 18446744073709551615ULL;
  cfg.trials = 7;
  cfg.unitwise.control = {8, 32};
  const std::string text = config_to_json(cfg);
  CHECK(config_to_json(config_from_json(text)) == text);
  CHECK(config_from_json(text).seed == cfg.seed);
}

TEST_CASE("trial results survive a JSON line round trip") {
  TrialResult r = result(Pipeline::unitwise, Arm::control, 32, 4, 0.8125);
  r.train_attack = AttackKind::cw;
  r.test_attack = AttackKind::bim;
  TrialResult back = trial_from_json(trial_to_json(r));
  CHECK(back.pipeline == r.pipeline);
  CHECK(back.arm == r.arm);
  CHECK(back.train_attack == r.train_attack);
  CHECK(back.test_attack == r.test_attack);
  CHECK(back.n == 32);
  CHECK(back.trial == 4);
  CHECK(back.accuracy == 0.8125);
  CHECK_THROWS_AS(trial_from_json("{}"), DataError);
  CHECK_THROWS_AS(trial_from_json("nope"), DataError);
}

TEST_CASE("summaries") {
  SUBCASE("mean and sample std") {
    Summary s = summarize({result(Pipeline::modelwise, Arm::treatment, 1, 0, 0.5),
                           result(Pipeline::modelwise, Arm::treatment, 1, 1, 0.7)});
    const SummaryCell& c = s.begin()->second;
    CHECK(c.mean == doctest::Approx(0.6));
    CHECK(c.std == doctest::Approx(0.141421356).epsilon(1e-6));
    CHECK(c.trials == 2);
    CHECK_FALSE(c.std_undefined);
  }
  SUBCASE("single trial") {
    Summary s = summarize({result(Pipeline::modelwise, Arm::treatment, 1, 0, 0.5)});
    CHECK(s.begin()->second.std == 0.0);
    CHECK(s.begin()->second.std_undefined);
  }
  SUBCASE("constant accuracies") {
    Summary s = summarize({result(Pipeline::modelwise, Arm::control, 2, 0, 0.75),
                           result(Pipeline::modelwise, Arm::control, 2, 1, 0.75),
                           result(Pipeline::modelwise, Arm::control, 2, 2, 0.75)});
    CHECK(s.begin()->second.std == 0.0);
  }
  SUBCASE("mismatched counts") {
    CHECK_THROWS(summarize({result(Pipeline::modelwise, Arm::control, 2, 0, 0.75),
                            result(Pipeline::modelwise, Arm::control, 2, 1, 0.75),
                            result(Pipeline::modelwise, Arm::treatment, 2, 0, 0.75)}));
  }
}

TEST_CASE("csv and svg reports") {
  std::vector<TrialResult> rs;
  for (Arm a : {Arm::treatment, Arm::control}) {
    for (std::size_t n : {1, 2, 4}) {
      for (std::size_t t = 0; t < 3; ++t) rs.push_back(result(Pipeline::modelwise, a, n, t, 0.6 + 0.01 * t));
    }
  }
  const fs::path dir = fs::temp_directory_path() / "multirep_unit_report";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Summary s = summarize(rs);
  write_summary_csv(s, dir / "summary.csv");
  const std::string csv = slurp(dir / "summary.csv");
  CHECK(csv.rfind("pipeline,arm,train_attack,test_attack,N,mean,std,trials\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(csv.find("modelwise,treatment,fgsm,fgsm,4,0.610000,0.010000,3") != std::string::npos);

  auto files = write_summary_svgs(s, dir);
  REQUIRE(files.size() == 1);
  const std::string svg = slurp(files[0]);
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("class=\"band treatment\"") != std::string::npos);
  CHECK(svg.find("class=\"band control\"") != std::string::npos);
  CHECK(svg.find("class=\"mean treatment\"") != std::string::npos);

  CHECK_THROWS(write_summary_csv(s, "/proc/no_such_dir/summary.csv"));
}

TEST_CASE("a micro run completes, fills the grid and is reproducible") {
  const fs::path a = fs::temp_directory_path() / "multirep_unit_run_a";
  const fs::path b = fs::temp_directory_path() / "multirep_unit_run_b";
  fs::remove_all(a);
  fs::remove_all(b);
  RunOptions opt;
  run_all(micro(a), opt);
  opt.jobs = 2;
  run_all(micro(b), opt);
  const auto results = read_results(RunPaths{a}.results());
  // 2 pipelines x 2 arms x 3 train x 3 test attacks, one N each.
  CHECK(results.size() == 36);
  CHECK(summarize(results).size() == 36);
  CHECK(slurp(RunPaths{a}.results()) == slurp(RunPaths{b}.results()));
  CHECK(slurp(RunPaths{a}.report() / "summary.csv") == slurp(RunPaths{b}.report() / "summary.csv"));

  // A second invocation reuses every completed stage.
  const auto stamp = fs::last_write_time(RunPaths{a}.attacked_model());
  run_all(micro(a), RunOptions{});
  CHECK(fs::last_write_time(RunPaths{a}.attacked_model()) == stamp);

  // Changing the seed invalidates the stored models.
  ExperimentConfig changed = micro(a);
  changed.seed = 4;
  stage_train_models(changed, RunOptions{});
  CHECK(fs::last_write_time(RunPaths{a}.attacked_model()) != stamp);
}

TEST_CASE("stage failures name the stage") {
  ExperimentConfig cfg = micro("/proc/multirep_cannot_write_here");
  try {
    stage_train_models(cfg, RunOptions{});
    FAIL("expected a failure");
  } catch (const StageError& e) {
    CHECK(e.stage() == "train-models");
  } catch (const DataError&) {
    // also acceptable: the output location itself is unusable
  }
  ExperimentConfig missing = micro(fs::temp_directory_path() / "multirep_unit_missing");
  fs::remove_all(missing.out);
  CHECK_THROWS(stage_detect(missing, RunOptions{}));

  ExperimentConfig cifar = micro(fs::temp_directory_path() / "multirep_unit_cifar");
  cifar.data.spec = "cifar10:/nonexistent";
  CHECK_THROWS_AS(stage_train_models(cifar, RunOptions{}), DataError);
}
