#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "json.hpp"
#include "multirep/harness.hpp"
#include "multirep/parallel.hpp"
#include "multirep/rng.hpp"

namespace multirep {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr AttackKind kAttacks[] = {AttackKind::fgsm, AttackKind::bim, AttackKind::cw};

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& file, const std::string& text) {
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, file);
}

void log(const RunOptions& opt, const std::string& msg) {
  if (opt.log) opt.log(msg);
}

// Stage inputs that determine its outputs, as canonical JSON text.
std::string models_fingerprint(const ExperimentConfig& cfg) {
  auto j = ordered_json::parse(config_to_json(cfg));
  return ordered_json{{"data", j["data"]}, {"population", j["population"]}, {"arch", j["arch"]}, {"train", j["train"]},
                      {"seed", j["seed"]}}
      .dump();
}

std::string attacks_fingerprint(const ExperimentConfig& cfg) {
  auto j = ordered_json::parse(config_to_json(cfg));
  return ordered_json{{"models", models_fingerprint(cfg)}, {"attacks", j["attacks"]}}.dump();
}

std::string detect_fingerprint(const ExperimentConfig& cfg) {
  auto j = ordered_json::parse(config_to_json(cfg));
  return ordered_json{{"attacks", attacks_fingerprint(cfg)},
                      {"detector", j["detector"]},
                      {"grid", j["grid"]},
                      {"test_fraction", j["test_fraction"]},
                      {"trials", j["trials"]}}
      .dump();
}

// Prepares a stage directory. Returns true when the stage already completed
// with the same fingerprint; clears stale outputs when the fingerprint changed.
bool open_stage(const fs::path& dir, const std::string& fingerprint) {
  fs::create_directories(dir);
  const fs::path fp = dir / "fingerprint.json";
  if (read_text(fp) != fingerprint) {
    for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    write_text(fp, fingerprint);
    return false;
  }
  return fs::exists(dir / "COMPLETE");
}

using Clock = std::chrono::steady_clock;

// Marks a stage complete. Wall time is summed over resumed invocations.
void close_stage(const fs::path& dir, Clock::time_point start) {
  const fs::path file = dir / "elapsed_seconds";
  double total = std::chrono::duration<double>(Clock::now() - start).count();
  if (fs::exists(file)) total += std::stod(read_text(file));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f\n", total);
  write_text(file, buf);
  write_text(dir / "COMPLETE", "ok\n");
}

template <typename F>
void guarded(const std::string& stage, F&& body) {
  try {
    body();
  } catch (const StageError&) {
    throw;
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::uint64_t attacked_seed(std::uint64_t master) { return derive_seed(master, "attacked-model"); }
std::uint64_t rep_seed(std::uint64_t master, std::size_t k) { return derive_seed(master, "representation-model", k); }

struct Population {
  Classifier attacked;
  std::vector<Classifier> reps;
};

Population load_population(const ExperimentConfig& cfg) {
  RunPaths paths{cfg.out};
  if (!fs::exists(paths.models() / "COMPLETE")) {
    throw StageError("attack", "models are missing; run train-models first");
  }
  Population p{load_classifier(paths.attacked_model()), {}};
  for (std::size_t k = 0; k < cfg.population; ++k) p.reps.push_back(load_classifier(paths.rep_model(k)));
  return p;
}

}  // namespace

fs::path RunPaths::rep_model(std::size_t k) const {
  char name[32];
  std::snprintf(name, sizeof name, "rep_%03zu.mrc", k);
  return models() / name;
}

fs::path RunPaths::adversarial(AttackKind kind) const { return attacks() / (attack_name(kind) + ".mradv"); }

std::uint64_t trial_seed(std::uint64_t master, std::size_t trial) { return derive_seed(master, "trial", trial); }

std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& cfg) {
  const ArchConfig& a = cfg.arch;
  std::pair<Dataset, Dataset> out;
  if (cfg.data.is_synthetic()) {
    SyntheticSpec s = cfg.data.synthetic;
    s.classes = a.classes;
    s.channels = a.channels;
    s.height = a.height;
    s.width = a.width;
    out.first = synthetic_dataset(s, derive_seed(cfg.seed, "synthetic-train"));
    out.first.split = "train";
    s.samples_per_class = cfg.data.synthetic_test_per_class;
    out.second = synthetic_dataset(s, derive_seed(cfg.seed, "synthetic-test"));
    out.second.split = "test";
  } else {
    const fs::path dir = cfg.data.spec.substr(std::string("cifar10:").size());
    auto [train, test] = load_cifar10(dir);
    out.first = stratified_head(train, cfg.data.train_per_class);
    if (test.size() > cfg.data.test_limit) {
      std::vector<std::size_t> head(cfg.data.test_limit);
      for (std::size_t i = 0; i < head.size(); ++i) head[i] = i;
      test = test.subset(head);
    }
    out.second = std::move(test);
  }
  for (const Dataset* d : {&out.first, &out.second}) {
    if (d->channels != a.channels || d->height != a.height || d->width != a.width || d->classes != a.classes) {
      throw DataError("dataset images are " + shape_str(d->image_shape()) + " with " + std::to_string(d->classes) +
                      " classes but the architecture expects " + shape_str(a.input_shape()) + " with " +
                      std::to_string(a.classes));
    }
    d->validate();
  }
  return out;
}

void stage_train_models(const ExperimentConfig& cfg, const RunOptions& opt) {
  RunPaths paths{cfg.out};
  guarded("train-models", [&] {
    const auto start = Clock::now();
    if (open_stage(paths.models(), models_fingerprint(cfg))) {
      log(opt, "train-models: up to date");
      return;
    }
    auto [train_set, test_set] = load_datasets(cfg);
    log(opt, "train-models: " + std::to_string(train_set.size()) + " training and " + std::to_string(test_set.size()) +
                 " test images (" + train_set.source + ")");
    std::mutex mu;
    parallel_for(cfg.population + 1, opt.jobs, [&](std::size_t i) {
      const bool attacked = i == 0;
      const fs::path file = attacked ? paths.attacked_model() : paths.rep_model(i - 1);
      if (fs::exists(file)) return;
      const std::uint64_t seed = attacked ? attacked_seed(cfg.seed) : rep_seed(cfg.seed, i - 1);
      Classifier c = build_classifier(cfg.arch, seed);
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      const TrainReport r = train(c, train_set, tc, &test_set);
      const fs::path tmp = file.string() + ".tmp";
      save_classifier(c, tmp);
      fs::rename(tmp, file);
      std::lock_guard lock(mu);
      log(opt, "train-models: " + file.filename().string() + " loss " + std::to_string(r.epoch_loss.front()) + " -> " +
                   std::to_string(r.epoch_loss.back()) + ", test accuracy " + std::to_string(r.holdout_accuracy));
    });
    close_stage(paths.models(), start);
  });
}

void stage_attack(const ExperimentConfig& cfg, const RunOptions& opt) {
  RunPaths paths{cfg.out};
  guarded("attack", [&] {
    const auto start = Clock::now();
    if (open_stage(paths.attacks(), attacks_fingerprint(cfg))) {
      log(opt, "attack: up to date");
      return;
    }
    const Population pop = load_population(cfg);
    auto [train_set, test_set] = load_datasets(cfg);
    std::vector<const Classifier*> reps;
    for (const auto& r : pop.reps) reps.push_back(&r);

    ordered_json stats;
    stats["attacked_clean_accuracy"] = accuracy(pop.attacked, test_set);
    ordered_json clean_acc = ordered_json::array();
    for (const auto& r : pop.reps) clean_acc.push_back(r.meta.test_accuracy);
    stats["representation_clean_accuracy"] = clean_acc;
    for (AttackKind kind : kAttacks) {
      const fs::path file = paths.adversarial(kind);
      AdversarialSet set;
      if (fs::exists(file)) {
        set = load_adversarial_set(file);
      } else {
        set = attack_population(pop.attacked, test_set, cfg.attacks.at(kind), "attacked", opt.jobs);
        const fs::path tmp = file.string() + ".tmp";
        save_adversarial_set(set, tmp);
        fs::rename(tmp, file);
      }
      ordered_json a;
      a["population"] = set.size();
      a["attacked_accuracy"] = 1.0 - set.success_rate();
      if (reps.size() >= 2) {
        const TransferStats t = transfer_eval(std::span<const Classifier* const>(reps), set, opt.jobs);
        a["transfer_mean"] = t.mean;
        a["transfer_std"] = t.std;
        a["transfer_accuracies"] = t.accuracies;
      }
      log(opt, "attack: " + attack_name(kind) + " on " + std::to_string(set.size()) + " images, attacked-model accuracy " +
                   std::to_string(1.0 - set.success_rate()));
      stats[attack_name(kind)] = a;
    }
    write_text(paths.attacks() / "stats.json", stats.dump(2) + "\n");
    close_stage(paths.attacks(), start);
  });
}

std::vector<TrialResult> run_trial(const ExperimentConfig& cfg, const TrialInputs& in, std::size_t trial,
                                   std::map<std::string, CallTrace>* trace) {
  const std::uint64_t ts = trial_seed(cfg.seed, trial);
  const std::size_t P = in.pair_ids.size();
  const PairSplit split = split_pairs(P, cfg.test_fraction, derive_seed(ts, "pair-split"));
  {
    std::set<std::uint32_t> train_ids;
    for (std::size_t i : split.train) train_ids.insert(in.pair_ids[i]);
    for (std::size_t i : split.test) {
      if (train_ids.count(in.pair_ids[i])) throw std::logic_error("pair split leaked a source image into both sides");
    }
  }
  const std::vector<std::size_t> pool = Rng(derive_seed(ts, "model-order")).permutation(in.population);

  std::map<AttackKind, RepMatrix> test_reps;
  for (AttackKind b : kAttacks) test_reps[b] = paired_reps(in.clean_blocks, in.adv_blocks.at(b), split.test, in.pair_ids);

  std::vector<TrialResult> out;
  auto record = [&](Pipeline p, Arm arm, AttackKind a, std::size_t n, auto&& probability) {
    for (AttackKind b : kAttacks) {
      const RepMatrix& test = test_reps.at(b);
      const auto prob = probability(test);
      out.push_back({p, arm, a, b, n, trial, evaluate(prob, test.labels)});
    }
  };

  for (AttackKind a : kAttacks) {
    const RepMatrix train = paired_reps(in.clean_blocks, in.adv_blocks.at(a), split.train, in.pair_ids);
    DetectorCache cache;
    for (Arm arm : {Arm::treatment, Arm::control}) {
      const auto& ns = arm == Arm::treatment ? cfg.modelwise.treatment : cfg.modelwise.control;
      for (std::size_t n : ns) {
        CallTrace* t = nullptr;
        if (trace) t = &(*trace)["modelwise/" + arm_name(arm) + "/" + attack_name(a) + "/" + std::to_string(n)];
        const ModelwiseEnsemble ens = modelwise(arm, n, pool, train, ts, cfg.detector, t, &cache);
        record(Pipeline::modelwise, arm, a, n, [&](const RepMatrix& r) { return ens.probability(r); });
      }
    }
    for (Arm arm : {Arm::treatment, Arm::control}) {
      const auto& ns = arm == Arm::treatment ? cfg.unitwise.treatment : cfg.unitwise.control;
      for (std::size_t n : ns) {
        CallTrace* t = nullptr;
        if (trace) t = &(*trace)["unitwise/" + arm_name(arm) + "/" + attack_name(a) + "/" + std::to_string(n)];
        const UnitwiseDetector det = unitwise(arm, n, pool, train, ts, cfg.detector, t);
        record(Pipeline::unitwise, arm, a, n, [&](const RepMatrix& r) { return det.probability(r); });
      }
    }
  }
  return out;
}

void stage_detect(const ExperimentConfig& cfg, const RunOptions& opt) {
  RunPaths paths{cfg.out};
  guarded("detect", [&] {
    const auto start = Clock::now();
    if (open_stage(paths.detection(), detect_fingerprint(cfg))) {
      log(opt, "detect: up to date");
      return;
    }
    if (!fs::exists(paths.attacks() / "COMPLETE")) throw StageError("detect", "attack sets are missing; run attack first");
    const Population pop = load_population(cfg);
    std::vector<const Classifier*> reps;
    for (const auto& r : pop.reps) reps.push_back(&r);

    TrialInputs in;
    in.population = cfg.population;
    std::map<AttackKind, AdversarialSet> sets;
    for (AttackKind kind : kAttacks) sets[kind] = load_adversarial_set(paths.adversarial(kind));
    const PairedSet& ref = sets.at(AttackKind::fgsm).pairs;
    for (AttackKind kind : kAttacks) {
      if (sets.at(kind).pairs.source_ids != ref.source_ids) {
        throw StageError("detect", "attack sets cover different source images");
      }
    }
    in.pair_ids = ref.source_ids;
    const Shape shape = {ref.size(), ref.channels, ref.height, ref.width};
    in.clean_blocks = extract(reps, Tensor(shape, ref.clean), opt.jobs);
    for (AttackKind kind : kAttacks) {
      in.adv_blocks[kind] = extract(reps, Tensor(shape, sets.at(kind).pairs.adversarial), opt.jobs);
    }

    const fs::path trial_dir = paths.detection() / "trials";
    fs::create_directories(trial_dir);
    auto trial_file = [&](std::size_t t) {
      char name[32];
      std::snprintf(name, sizeof name, "trial_%04zu.jsonl", t);
      return trial_dir / name;
    };
    std::mutex mu;
    std::size_t done = 0;
    parallel_for(cfg.trials, opt.jobs, [&](std::size_t t) {
      if (fs::exists(trial_file(t))) return;
      std::string text;
      for (const auto& r : run_trial(cfg, in, t)) text += trial_to_json(r) + "\n";
      write_text(trial_file(t), text);
      std::lock_guard lock(mu);
      log(opt, "detect: trial " + std::to_string(t) + " done (" + std::to_string(++done) + " this run)");
    });
    std::string all;
    for (std::size_t t = 0; t < cfg.trials; ++t) all += read_text(trial_file(t));
    write_text(paths.results(), all);
    close_stage(paths.detection(), start);
  });
}

void stage_report(const ExperimentConfig& cfg, const RunOptions& opt) {
  RunPaths paths{cfg.out};
  guarded("report", [&] {
    if (!fs::exists(paths.detection() / "COMPLETE")) throw StageError("report", "detection results are missing; run detect first");
    fs::create_directories(paths.report());
    const Summary summary = summarize(read_results(paths.results()));
    if (summary.empty()) throw StageError("report", "no results to report");
    write_summary_csv(summary, paths.report() / "summary.csv");
    const auto svgs = write_summary_svgs(summary, paths.report());

    std::map<AttackKind, AdversarialSet> sets;
    for (AttackKind kind : kAttacks) sets[kind] = load_adversarial_set(paths.adversarial(kind));
    write_attack_grid(paths.report() / "attack_grid.ppm", sets.at(AttackKind::fgsm), sets.at(AttackKind::bim),
                      sets.at(AttackKind::cw), cfg.arch.classes);

    const auto stats = ordered_json::parse(read_text(paths.attacks() / "stats.json"));
    std::string csv = "attack,population,attacked_accuracy,transfer_mean,transfer_std\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "clean,,%.6f,,\n", stats.at("attacked_clean_accuracy").get<double>());
    csv += buf;
    for (AttackKind kind : kAttacks) {
      const auto& a = stats.at(attack_name(kind));
      std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%s,%s\n", attack_name(kind).c_str(), a.at("population").get<std::size_t>(),
                    a.at("attacked_accuracy").get<double>(),
                    a.contains("transfer_mean") ? std::to_string(a.at("transfer_mean").get<double>()).c_str() : "",
                    a.contains("transfer_std") ? std::to_string(a.at("transfer_std").get<double>()).c_str() : "");
      csv += buf;
    }
    write_text(paths.report() / "attacks.csv", csv);
    log(opt, "report: " + std::to_string(summary.size()) + " cells, " + std::to_string(svgs.size()) + " charts in " +
                 paths.report().string());
  });
}

void run_all(const ExperimentConfig& cfg, const RunOptions& opt) {
  fs::create_directories(cfg.out);
  write_text(fs::path(cfg.out) / "config.json", config_to_json(cfg));
  stage_train_models(cfg, opt);
  stage_attack(cfg, opt);
  stage_detect(cfg, opt);
  stage_report(cfg, opt);
}

}  // namespace multirep
