#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "multirep/harness.hpp"
#include "multirep/version.hpp"

using namespace multirep;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kStage = 3 };

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  std::size_t jobs = 1;
};

void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config (defaults to the desk config)");
  cmd->add_option("--out", f.out, "run directory (overrides the config)");
  cmd->add_option("--seed", f.seed, "master seed (overrides the config)");
  cmd->add_option("--dataset", f.dataset, "synthetic or cifar10:<dir> (overrides the config)");
  cmd->add_option("--jobs", f.jobs, "worker threads, 0 for all cores")->check(CLI::NonNegativeNumber);
}

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig::desk() : load_config(f.config);
  if (!f.out.empty()) cfg.out = f.out;
  if (f.seed) cfg.seed = *f.seed;
  if (!f.dataset.empty()) cfg.data.spec = f.dataset;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial-example detection from many models' hidden representations"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Flags flags;
  struct Command {
    const char* name;
    const char* help;
    void (*run)(const ExperimentConfig&, const RunOptions&);
  };
  const Command commands[] = {
      {"train-models", "train the attacked model and the representation population", stage_train_models},
      {"attack", "generate FGSM, BIM and CW sets against the attacked model", stage_attack},
      {"detect", "run every detection trial of the configured grid", stage_detect},
      {"report", "summarize results into CSV, SVG charts and an image grid", stage_report},
      {"all", "run every stage in order, skipping completed ones", run_all},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_flags(sub, flags);
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  RunOptions opt;
  opt.jobs = flags.jobs;
  opt.log = [](const std::string& msg) { std::cerr << "[multirep] " << msg << std::endl; };

  try {
    const ExperimentConfig cfg = resolve(flags);
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) cmd->run(cfg, opt);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const StageError& e) {
    std::cerr << e.what() << "\n";
    return kStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStage;
  }
  return kOk;
}
