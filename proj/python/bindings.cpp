#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "multirep/harness.hpp"
#include "multirep/version.hpp"

namespace py = pybind11;
using namespace multirep;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<std::int32_t> to_labels(const LabelArray& a) { return {a.data(), a.data() + a.size()}; }

py::tuple dataset_arrays(const Dataset& d) {
  FloatArray images({static_cast<py::ssize_t>(d.size()), static_cast<py::ssize_t>(d.channels),
                     static_cast<py::ssize_t>(d.height), static_cast<py::ssize_t>(d.width)});
  std::copy(d.pixels.begin(), d.pixels.end(), images.mutable_data());
  LabelArray labels(std::vector<py::ssize_t>{static_cast<py::ssize_t>(d.size())});
  std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
  return py::make_tuple(images, labels);
}

Dataset to_dataset(const FloatArray& images, const LabelArray& labels, std::size_t classes) {
  if (images.ndim() != 4) throw ShapeError("images must be [N, C, H, W]");
  if (labels.size() != images.shape(0)) throw ShapeError("one label per image is required");
  Dataset d;
  d.channels = static_cast<std::size_t>(images.shape(1));
  d.height = static_cast<std::size_t>(images.shape(2));
  d.width = static_cast<std::size_t>(images.shape(3));
  d.classes = classes;
  d.pixels.assign(images.data(), images.data() + images.size());
  d.labels = to_labels(labels);
  d.validate();
  return d;
}

ArchConfig preset(const std::string& name) {
  if (name == "desk") return ArchConfig::desk();
  if (name == "compact") return ArchConfig::compact();
  throw std::invalid_argument("unknown architecture preset '" + name + "' (desk or compact)");
}

py::dict result_dict(const TrialResult& r) {
  py::dict d;
  d["pipeline"] = pipeline_name(r.pipeline);
  d["arm"] = arm_name(r.arm);
  d["train_attack"] = attack_name(r.train_attack);
  d["test_attack"] = attack_name(r.test_attack);
  d["N"] = r.n;
  d["trial"] = r.trial;
  d["accuracy"] = r.accuracy;
  return d;
}

}  // namespace

PYBIND11_MODULE(multirep, m) {
  m.doc() = "Multi-representation adversarial detection experiments";
  m.attr("__version__") = kVersion;

  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("postprocess", [](const FloatArray& x) { return to_array(postprocess(to_tensor(x))); }, py::arg("x"),
        "Clip to [0, 1] and quantize to the nearest k/255.");

  m.def(
      "synthetic_dataset",
      [](std::size_t samples_per_class, std::uint64_t seed, std::size_t size, std::size_t classes, bool easy) {
        SyntheticSpec s = easy ? SyntheticSpec::easy() : SyntheticSpec{};
        s.samples_per_class = samples_per_class;
        s.height = s.width = size;
        s.classes = classes;
        return dataset_arrays(synthetic_dataset(s, seed));
      },
      py::arg("samples_per_class") = 100, py::arg("seed") = 0, py::arg("size") = 16, py::arg("classes") = 10,
      py::arg("easy") = false, "Procedural image dataset as (images [N, C, H, W], labels).");

  m.def("read_cifar10_batch",
        [](const std::string& file) { return dataset_arrays(read_cifar10_batch(file, "batch")); }, py::arg("file"),
        "One CIFAR-10 binary batch as (images, labels).");

  m.def(
      "split_pairs",
      [](std::size_t pairs, double test_fraction, std::uint64_t seed) {
        const PairSplit s = split_pairs(pairs, test_fraction, seed);
        return py::make_tuple(s.train, s.test);
      },
      py::arg("pairs"), py::arg("test_fraction"), py::arg("seed"), "Random (train, test) split of pair indices.");

  py::class_<Classifier>(m, "Classifier")
      .def_static(
          "build", [](const std::string& arch, std::uint64_t seed) { return build_classifier(preset(arch), seed); },
          py::arg("arch") = "compact", py::arg("seed") = 0)
      .def_static("load", [](const std::string& file) { return load_classifier(file); }, py::arg("file"))
      .def("save", [](const Classifier& c, const std::string& file) { save_classifier(c, file); }, py::arg("file"))
      .def_property_readonly("seed", &Classifier::seed)
      .def_property_readonly("parameter_count", [](const Classifier& c) { return c.flat_parameters().size(); })
      .def_property_readonly("input_shape", [](const Classifier& c) { return c.arch().input_shape(); })
      .def("logits", [](const Classifier& c, const FloatArray& x) { return to_array(c.logits(to_tensor(x))); })
      .def("predict", [](const Classifier& c, const FloatArray& x) { return c.predict(to_tensor(x)); })
      .def("penultimate", [](const Classifier& c, const FloatArray& x) { return to_array(c.penultimate(to_tensor(x))); })
      .def("input_gradient",
           [](const Classifier& c, const FloatArray& x, const LabelArray& y) {
             return to_array(c.input_gradient(to_tensor(x), to_labels(y)));
           })
      .def(
          "train",
          [](Classifier& c, const FloatArray& images, const LabelArray& labels, std::size_t epochs,
             std::size_t batch_size, std::uint64_t seed) {
            TrainConfig cfg;
            cfg.epochs = epochs;
            cfg.batch_size = batch_size;
            cfg.seed = seed;
            const Dataset d = to_dataset(images, labels, c.arch().classes);
            py::gil_scoped_release release;
            return train(c, d, cfg).epoch_loss;
          },
          py::arg("images"), py::arg("labels"), py::arg("epochs") = 1, py::arg("batch_size") = 64,
          py::arg("seed") = 0, "Trains in place; returns the mean loss of each epoch.");

  m.def(
      "attack",
      [](const Classifier& c, const FloatArray& images, const LabelArray& labels, const std::string& kind,
         std::optional<double> epsilon, std::optional<double> alpha, std::optional<std::size_t> iterations,
         std::optional<double> confidence) {
        AttackConfig cfg = AttackConfig::defaults(parse_attack(kind));
        if (epsilon) cfg.epsilon = *epsilon;
        if (alpha) cfg.alpha = *alpha;
        if (iterations) cfg.iterations = *iterations;
        if (confidence) cfg.cw.confidence = *confidence;
        cfg.validate();
        const Tensor x = to_tensor(images);
        const auto y = to_labels(labels);
        Tensor adv;
        {
          py::gil_scoped_release release;
          adv = run_attack(c.graph(), x, y, cfg);
        }
        return to_array(adv);
      },
      py::arg("classifier"), py::arg("images"), py::arg("labels"), py::arg("kind"), py::arg("epsilon") = py::none(),
      py::arg("alpha") = py::none(), py::arg("iterations") = py::none(), py::arg("confidence") = py::none(),
      "FGSM, BIM or CW perturbations, post-processed to the 1/255 grid.");

  m.def(
      "load_config",
      [](const std::string& file) {
        const ExperimentConfig cfg = load_config(file);
        cfg.validate();
        return config_to_json(cfg);
      },
      py::arg("file"), "Validated config, re-serialized with every default filled in.");

  m.def(
      "run",
      [](const std::string& stage, const std::string& config, std::optional<std::string> out,
         std::optional<std::uint64_t> seed, std::size_t jobs) {
        ExperimentConfig cfg = load_config(config);
        if (out) cfg.out = *out;
        if (seed) cfg.seed = *seed;
        cfg.validate();
        RunOptions opt;
        opt.jobs = jobs;
        const std::map<std::string, void (*)(const ExperimentConfig&, const RunOptions&)> stages = {
            {"train-models", stage_train_models}, {"attack", stage_attack}, {"detect", stage_detect},
            {"report", stage_report},             {"all", run_all}};
        auto it = stages.find(stage);
        if (it == stages.end()) throw std::invalid_argument("unknown stage '" + stage + "'");
        py::gil_scoped_release release;
        it->second(cfg, opt);
      },
      py::arg("stage"), py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(),
      py::arg("jobs") = 1, "Runs one pipeline stage (or all) as the command-line tool does.");

  m.def(
      "read_results",
      [](const std::string& file) {
        py::list out;
        for (const auto& r : read_results(file)) out.append(result_dict(r));
        return out;
      },
      py::arg("file"), "Per-trial detection results of a run.");

  m.def(
      "summarize",
      [](const std::string& file) {
        py::list out;
        for (const auto& [k, c] : summarize(read_results(file))) {
          py::dict d;
          d["pipeline"] = pipeline_name(k.pipeline);
          d["arm"] = arm_name(k.arm);
          d["train_attack"] = attack_name(k.train_attack);
          d["test_attack"] = attack_name(k.test_attack);
          d["N"] = k.n;
          d["mean"] = c.mean;
          d["std"] = c.std;
          d["trials"] = c.trials;
          out.append(d);
        }
        return out;
      },
      py::arg("file"), "Mean and sample std per cell, as in summary.csv.");
}
