#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "multirep/harness.hpp"

namespace multirep {

using nlohmann::ordered_json;

namespace {

void check_keys(const ordered_json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError("unknown key '" + key + "' in " + where + " (allowed: " + list + ")");
    }
  }
}

template <typename T>
void read(const ordered_json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void read_size(const ordered_json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(where + "." + key + " must be a non-negative integer");
  out = v.get<std::size_t>();
}

void read_sizes(const ordered_json& j, const char* key, std::vector<std::size_t>& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array()) throw ConfigError(where + "." + key + " must be an array of integers");
  out.clear();
  for (const auto& e : v) {
    if (!e.is_number_unsigned()) throw ConfigError(where + "." + key + " must hold non-negative integers");
    out.push_back(e.get<std::size_t>());
  }
}

void parse_arch(const ordered_json& j, ArchConfig& a) {
  const std::string w = "arch";
  check_keys(j, {"channels", "height", "width", "stem_filters", "blocks", "penultimate_width", "classes", "input_mean"},
             w);
  read_size(j, "channels", a.channels, w);
  read_size(j, "height", a.height, w);
  read_size(j, "width", a.width, w);
  read_size(j, "stem_filters", a.stem_filters, w);
  read_size(j, "penultimate_width", a.penultimate_width, w);
  read_size(j, "classes", a.classes, w);
  read(j, "input_mean", a.input_mean, w);
  if (j.contains("blocks")) {
    if (!j.at("blocks").is_array()) throw ConfigError("arch.blocks must be an array");
    a.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      check_keys(b, {"filters", "stride", "residual"}, "arch.blocks[]");
      BlockSpec spec;
      read_size(b, "filters", spec.filters, "arch.blocks[]");
      read_size(b, "stride", spec.stride, "arch.blocks[]");
      read(b, "residual", spec.residual, "arch.blocks[]");
      a.blocks.push_back(spec);
    }
  }
}

void parse_train(const ordered_json& j, TrainConfig& t) {
  const std::string w = "train";
  check_keys(j, {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "epsilon", "flip_probability", "crop_padding"},
             w);
  read_size(j, "epochs", t.epochs, w);
  read_size(j, "batch_size", t.batch_size, w);
  read(j, "learning_rate", t.adam.learning_rate, w);
  read(j, "beta1", t.adam.beta1, w);
  read(j, "beta2", t.adam.beta2, w);
  read(j, "epsilon", t.adam.epsilon, w);
  read(j, "flip_probability", t.flip_probability, w);
  read_size(j, "crop_padding", t.crop_padding, w);
}

void parse_data(const ordered_json& j, DataSource& d) {
  const std::string w = "data";
  check_keys(j, {"source", "synthetic", "train_per_class", "test_limit"}, w);
  read(j, "source", d.spec, w);
  read_size(j, "train_per_class", d.train_per_class, w);
  read_size(j, "test_limit", d.test_limit, w);
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    const std::string ws = "data.synthetic";
    check_keys(s, {"train_per_class", "test_per_class", "grating_amplitude", "texture_amplitude", "clutter_amplitude",
                   "clutter_blobs", "tint", "noise", "prototype_seed"},
               ws);
    read_size(s, "train_per_class", d.synthetic.samples_per_class, ws);
    read_size(s, "test_per_class", d.synthetic_test_per_class, ws);
    read(s, "grating_amplitude", d.synthetic.grating_amplitude, ws);
    read(s, "texture_amplitude", d.synthetic.texture_amplitude, ws);
    read(s, "clutter_amplitude", d.synthetic.clutter_amplitude, ws);
    read_size(s, "clutter_blobs", d.synthetic.clutter_blobs, ws);
    read(s, "tint", d.synthetic.tint, ws);
    read(s, "noise", d.synthetic.noise, ws);
    read(s, "prototype_seed", d.synthetic.prototype_seed, ws);
  }
}

void parse_attacks(const ordered_json& j, std::map<AttackKind, AttackConfig>& attacks) {
  check_keys(j, {"fgsm", "bim", "cw"}, "attacks");
  if (j.contains("fgsm")) {
    const auto& a = j.at("fgsm");
    check_keys(a, {"epsilon"}, "attacks.fgsm");
    read(a, "epsilon", attacks[AttackKind::fgsm].epsilon, "attacks.fgsm");
  }
  if (j.contains("bim")) {
    const auto& a = j.at("bim");
    check_keys(a, {"epsilon", "alpha", "iterations"}, "attacks.bim");
    auto& c = attacks[AttackKind::bim];
    read(a, "epsilon", c.epsilon, "attacks.bim");
    read(a, "alpha", c.alpha, "attacks.bim");
    read_size(a, "iterations", c.iterations, "attacks.bim");
  }
  if (j.contains("cw")) {
    const auto& a = j.at("cw");
    const std::string w = "attacks.cw";
    check_keys(a, {"learning_rate", "binary_steps", "max_iterations", "confidence", "initial_const", "abort_early"}, w);
    auto& c = attacks[AttackKind::cw].cw;
    read(a, "learning_rate", c.learning_rate, w);
    read_size(a, "binary_steps", c.binary_steps, w);
    read_size(a, "max_iterations", c.max_iterations, w);
    read(a, "confidence", c.confidence, w);
    read(a, "initial_const", c.initial_const, w);
    read(a, "abort_early", c.abort_early, w);
  }
}

void parse_detector(const ordered_json& j, DetectorConfig& d) {
  const std::string w = "detector";
  check_keys(j, {"hidden", "alpha", "learning_rate", "batch_size", "max_epochs", "tol", "n_iter_no_change"}, w);
  read_size(j, "hidden", d.hidden, w);
  read(j, "alpha", d.alpha, w);
  read(j, "learning_rate", d.learning_rate, w);
  read_size(j, "batch_size", d.batch_size, w);
  read_size(j, "max_epochs", d.max_epochs, w);
  read(j, "tol", d.tol, w);
  read_size(j, "n_iter_no_change", d.n_iter_no_change, w);
}

void parse_grid(const ordered_json& j, ExperimentConfig& cfg) {
  check_keys(j, {"modelwise", "unitwise"}, "grid");
  for (auto [name, grid] : {std::pair{"modelwise", &cfg.modelwise}, std::pair{"unitwise", &cfg.unitwise}}) {
    const std::string w = std::string("grid.") + name;
    if (!j.contains(name)) {
      *grid = {};
      continue;
    }
    check_keys(j.at(name), {"treatment", "control"}, w);
    grid->treatment.clear();
    grid->control.clear();
    read_sizes(j.at(name), "treatment", grid->treatment, w);
    read_sizes(j.at(name), "control", grid->control, w);
  }
}

ordered_json sizes_json(const std::vector<std::size_t>& v) {
  ordered_json a = ordered_json::array();
  for (auto x : v) a.push_back(x);
  return a;
}

bool ascending(const std::vector<std::size_t>& v) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] <= v[i - 1]) return false;
  }
  return true;
}

}  // namespace

ExperimentConfig ExperimentConfig::desk() { return ExperimentConfig{}; }

void ExperimentConfig::validate() const {
  try {
    arch.validate();
    train.validate();
    for (const auto& [kind, a] : attacks) a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (AttackKind k : {AttackKind::fgsm, AttackKind::bim, AttackKind::cw}) {
    if (!attacks.count(k) || attacks.at(k).kind != k) throw ConfigError("attack " + attack_name(k) + " is not configured");
  }
  if (!data.is_synthetic() && data.spec.rfind("cifar10:", 0) != 0) {
    throw ConfigError("data.source must be 'synthetic' or 'cifar10:<dir>', got '" + data.spec + "'");
  }
  if (trials < 1) throw ConfigError("trials must be >= 1");
  if (population < 1) throw ConfigError("population must be >= 1");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0, 1)");
  if (detector.hidden < 1 || detector.batch_size < 1 || detector.max_epochs < 1) {
    throw ConfigError("detector hidden, batch_size and max_epochs must be >= 1");
  }
  if (modelwise.empty() && unitwise.empty()) throw ConfigError("grid configures no pipeline");
  const std::pair<const char*, const std::vector<std::size_t>*> lists[] = {
      {"grid.modelwise.treatment", &modelwise.treatment},
      {"grid.modelwise.control", &modelwise.control},
      {"grid.unitwise.treatment", &unitwise.treatment},
      {"grid.unitwise.control", &unitwise.control}};
  for (const auto& [name, v] : lists) {
    if (!ascending(*v)) throw ConfigError(std::string(name) + " must be strictly ascending");
    if (!v->empty() && v->front() < 1) throw ConfigError(std::string(name) + " values must be >= 1");
  }
  auto max_of = [](const std::vector<std::size_t>& v) { return v.empty() ? std::size_t{0} : v.back(); };
  const std::size_t need = std::max(max_of(modelwise.treatment), max_of(unitwise.treatment));
  if (population < need) {
    throw ConfigError("population K = " + std::to_string(population) + " is smaller than the largest treatment N = " +
                      std::to_string(need));
  }
  if (max_of(unitwise.control) > arch.penultimate_width) {
    throw ConfigError("grid.unitwise.control asks for N = " + std::to_string(max_of(unitwise.control)) +
                      " units but the penultimate width R is " + std::to_string(arch.penultimate_width));
  }
}

ExperimentConfig config_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"data", "population", "arch", "train", "attacks", "detector", "grid", "test_fraction", "trials", "seed",
                 "out"},
             "config");
  ExperimentConfig cfg = ExperimentConfig::desk();
  if (j.contains("data")) parse_data(j.at("data"), cfg.data);
  read_size(j, "population", cfg.population, "config");
  if (j.contains("arch")) parse_arch(j.at("arch"), cfg.arch);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("attacks")) parse_attacks(j.at("attacks"), cfg.attacks);
  if (j.contains("detector")) parse_detector(j.at("detector"), cfg.detector);
  if (j.contains("grid")) parse_grid(j.at("grid"), cfg);
  read(j, "test_fraction", cfg.test_fraction, "config");
  read_size(j, "trials", cfg.trials, "config");
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("config.seed must be a non-negative integer");
    cfg.seed = j.at("seed").get<std::uint64_t>();
  }
  read(j, "out", cfg.out, "config");
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  const SyntheticSpec& s = cfg.data.synthetic;
  j["data"] = {{"source", cfg.data.spec},
               {"synthetic",
                {{"train_per_class", s.samples_per_class},
                 {"test_per_class", cfg.data.synthetic_test_per_class},
                 {"grating_amplitude", s.grating_amplitude},
                 {"texture_amplitude", s.texture_amplitude},
                 {"clutter_amplitude", s.clutter_amplitude},
                 {"clutter_blobs", s.clutter_blobs},
                 {"tint", s.tint},
                 {"noise", s.noise},
                 {"prototype_seed", s.prototype_seed}}},
               {"train_per_class", cfg.data.train_per_class},
               {"test_limit", cfg.data.test_limit}};
  j["population"] = cfg.population;
  ordered_json blocks = ordered_json::array();
  for (const auto& b : cfg.arch.blocks) blocks.push_back({{"filters", b.filters}, {"stride", b.stride}, {"residual", b.residual}});
  j["arch"] = {{"channels", cfg.arch.channels},
               {"height", cfg.arch.height},
               {"width", cfg.arch.width},
               {"stem_filters", cfg.arch.stem_filters},
               {"blocks", blocks},
               {"penultimate_width", cfg.arch.penultimate_width},
               {"classes", cfg.arch.classes},
               {"input_mean", cfg.arch.input_mean}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.adam.learning_rate},
                {"beta1", cfg.train.adam.beta1},
                {"beta2", cfg.train.adam.beta2},
                {"epsilon", cfg.train.adam.epsilon},
                {"flip_probability", cfg.train.flip_probability},
                {"crop_padding", cfg.train.crop_padding}};
  const auto& f = cfg.attacks.at(AttackKind::fgsm);
  const auto& b = cfg.attacks.at(AttackKind::bim);
  const auto& c = cfg.attacks.at(AttackKind::cw).cw;
  j["attacks"] = {{"fgsm", {{"epsilon", f.epsilon}}},
                  {"bim", {{"epsilon", b.epsilon}, {"alpha", b.alpha}, {"iterations", b.iterations}}},
                  {"cw",
                   {{"learning_rate", c.learning_rate},
                    {"binary_steps", c.binary_steps},
                    {"max_iterations", c.max_iterations},
                    {"confidence", c.confidence},
                    {"initial_const", c.initial_const},
                    {"abort_early", c.abort_early}}}};
  const auto& d = cfg.detector;
  j["detector"] = {{"hidden", d.hidden},         {"alpha", d.alpha}, {"learning_rate", d.learning_rate},
                   {"batch_size", d.batch_size}, {"max_epochs", d.max_epochs}, {"tol", d.tol},
                   {"n_iter_no_change", d.n_iter_no_change}};
  ordered_json grid = ordered_json::object();
  if (!cfg.modelwise.empty()) {
    grid["modelwise"] = {{"treatment", sizes_json(cfg.modelwise.treatment)}, {"control", sizes_json(cfg.modelwise.control)}};
  }
  if (!cfg.unitwise.empty()) {
    grid["unitwise"] = {{"treatment", sizes_json(cfg.unitwise.treatment)}, {"control", sizes_json(cfg.unitwise.control)}};
  }
  j["grid"] = grid;
  j["test_fraction"] = cfg.test_fraction;
  j["trials"] = cfg.trials;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  return j.dump(2) + "\n";
}

}  // namespace multirep
