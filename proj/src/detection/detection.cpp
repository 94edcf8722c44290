#include "multirep/detection.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "multirep/adam.hpp"
#include "multirep/parallel.hpp"
#include "multirep/rng.hpp"

namespace multirep {

void RepMatrix::validate() const {
  if (pair_ids.size() != labels.size()) throw std::invalid_argument("RepMatrix: pair ids and labels differ in count");
  for (const auto& b : blocks) {
    if (b.rank() != 2 || b.dim(0) != rows() || b.dim(1) != width()) {
      throw ShapeError("RepMatrix block " + shape_str(b.shape()) + " does not match " + std::to_string(rows()) +
                       " rows of width " + std::to_string(width()));
    }
  }
}

std::vector<Tensor> extract(std::span<const Classifier* const> models, const Tensor& instances, std::size_t jobs,
                            std::size_t batch_size) {
  if (models.empty()) return {};
  const ArchConfig& arch = models.front()->arch();
  for (const Classifier* m : models) {
    if (!(m->arch() == arch)) throw std::invalid_argument("extract: models do not share one architecture");
  }
  models.front()->graph().check_input(instances.shape());
  const std::size_t n = instances.dim(0);
  const std::size_t d = n ? instances.size() / n : 0;
  std::vector<Tensor> out(models.size());
  parallel_for(models.size(), jobs, [&](std::size_t i) {
    Tensor block({n, arch.penultimate_width});
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      Shape s = instances.shape();
      s[0] = end - start;
      Tensor x(s, std::vector<float>(instances.data().begin() + start * d, instances.data().begin() + end * d));
      const Tensor r = models[i]->penultimate(x);
      std::copy(r.data().begin(), r.data().end(), block.data().begin() + start * arch.penultimate_width);
    }
    out[i] = std::move(block);
  });
  return out;
}

RepMatrix paired_reps(std::span<const Tensor> clean_blocks, std::span<const Tensor> adv_blocks,
                      std::span<const std::size_t> pairs, std::span<const std::uint32_t> pair_ids) {
  if (clean_blocks.size() != adv_blocks.size()) throw std::invalid_argument("paired_reps: block counts differ");
  RepMatrix out;
  const std::size_t n = pairs.size();
  for (std::size_t m = 0; m < clean_blocks.size(); ++m) {
    const std::size_t R = clean_blocks[m].dim(1);
    if (adv_blocks[m].dim(0) != clean_blocks[m].dim(0) || adv_blocks[m].dim(1) != R) {
      throw ShapeError("paired_reps: clean " + shape_str(clean_blocks[m].shape()) + " vs adversarial " +
                       shape_str(adv_blocks[m].shape()));
    }
    Tensor b({2 * n, R});
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(clean_blocks[m].data().begin() + pairs[r] * R, R, b.data().begin() + r * R);
      std::copy_n(adv_blocks[m].data().begin() + pairs[r] * R, R, b.data().begin() + (n + r) * R);
    }
    out.blocks.push_back(std::move(b));
  }
  out.labels.assign(2 * n, 0.0f);
  std::fill(out.labels.begin() + static_cast<std::ptrdiff_t>(n), out.labels.end(), 1.0f);
  for (int side = 0; side < 2; ++side) {
    for (std::size_t p : pairs) out.pair_ids.push_back(pair_ids[p]);
  }
  return out;
}

Detector::Detector(Tensor w1, Tensor b1, Tensor w2, Tensor b2, std::uint64_t seed)
    : w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)), seed_(seed) {}

std::vector<double> Detector::probability(const Tensor& features) const {
  if (features.rank() != 2 || features.dim(1) != input_width()) {
    throw ShapeError("detector expects [n, " + std::to_string(input_width()) + "], got " + shape_str(features.shape()));
  }
  Tape tape(false);
  Var h = ops::relu(ops::dense(tape.constant(features), tape.constant(w1_), tape.constant(b1_)));
  Var s = ops::dense(h, tape.constant(w2_), tape.constant(b2_));
  const Tensor& z = s.value();
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    p[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return p;
}

std::vector<float> Detector::flat_parameters() const {
  std::vector<float> out;
  for (const Tensor* t : {&w1_, &b1_, &w2_, &b2_}) out.insert(out.end(), t->data().begin(), t->data().end());
  return out;
}

namespace {

Tensor glorot(std::size_t fan_in, std::size_t fan_out, Shape shape, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

Detector train_detector(const Tensor& features, std::span<const float> labels, std::uint64_t seed,
                        const DetectorConfig& cfg) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("train_detector: features " + shape_str(features.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const bool has0 = std::find(labels.begin(), labels.end(), 0.0f) != labels.end();
  const bool has1 = std::find(labels.begin(), labels.end(), 1.0f) != labels.end();
  if (!has0 || !has1) throw std::invalid_argument("train_detector needs both clean (0) and adversarial (1) labels");

  const std::size_t n = features.dim(0), D = features.dim(1), H = cfg.hidden;
  Rng rng(derive_seed(seed, "detector"));
  Tensor w1 = glorot(D, H, {D, H}, rng);
  Tensor b1 = glorot(D, H, {H}, rng);
  Tensor w2 = glorot(H, 1, {H, 1}, rng);
  Tensor b2 = glorot(H, 1, {1}, rng);
  std::array<Tensor*, 4> params = {&w1, &b1, &w2, &b2};
  AdamState state;
  AdamHyper hyper;
  hyper.learning_rate = cfg.learning_rate;

  Detector det;
  const std::size_t batch = std::clamp<std::size_t>(cfg.batch_size, 1, n);
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t no_improve = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t m = std::min(batch, n - start);
      Tensor xb({m, D});
      std::vector<float> yb(m);
      for (std::size_t r = 0; r < m; ++r) {
        const std::size_t i = order[start + r];
        std::copy_n(features.data().begin() + i * D, D, xb.data().begin() + r * D);
        yb[r] = labels[i];
      }
      Tape tape;
      Var vw1 = tape.variable(w1), vb1 = tape.variable(b1), vw2 = tape.variable(w2), vb2 = tape.variable(b2);
      Var h = ops::relu(ops::dense(tape.constant(std::move(xb)), vw1, vb1));
      Var s = ops::dense(h, vw2, vb2);
      Var data_loss = ops::sigmoid_cross_entropy(s, yb);
      Var penalty = ops::scale(ops::add(ops::sum_squares(vw1), ops::sum_squares(vw2)),
                               static_cast<float>(0.5 * cfg.alpha / static_cast<double>(m)));
      Var loss = ops::add(data_loss, penalty);
      tape.backward(loss);
      epoch_loss += static_cast<double>(loss.value()[0]) * static_cast<double>(m);
      std::array<Tensor, 4> grads;
      const std::array<Var, 4> vars = {vw1, vb1, vw2, vb2};
      for (std::size_t k = 0; k < 4; ++k) {
        const auto g = tape.grad(vars[k]);
        grads[k] = Tensor(params[k]->shape(), std::vector<float>(g.begin(), g.end()));
      }
      adam_step(params, grads, state, hyper);
    }
    epoch_loss /= static_cast<double>(n);
    det.loss_curve.push_back(epoch_loss);
    det.epochs_run = epoch + 1;
    if (epoch_loss > best_loss - cfg.tol) {
      ++no_improve;
    } else {
      no_improve = 0;
    }
    best_loss = std::min(best_loss, epoch_loss);
    if (no_improve > cfg.n_iter_no_change) break;
  }

  Detector out(std::move(w1), std::move(b1), std::move(w2), std::move(b2), seed);
  out.epochs_run = det.epochs_run;
  out.loss_curve = std::move(det.loss_curve);
  return out;
}

std::string pipeline_name(Pipeline p) { return p == Pipeline::modelwise ? "modelwise" : "unitwise"; }
std::string arm_name(Arm a) { return a == Arm::treatment ? "treatment" : "control"; }

Pipeline parse_pipeline(const std::string& s) {
  if (s == "modelwise") return Pipeline::modelwise;
  if (s == "unitwise") return Pipeline::unitwise;
  throw std::invalid_argument("unknown pipeline '" + s + "' (expected modelwise or unitwise)");
}

Arm parse_arm(const std::string& s) {
  if (s == "treatment") return Arm::treatment;
  if (s == "control") return Arm::control;
  throw std::invalid_argument("unknown arm '" + s + "' (expected treatment or control)");
}

Tensor select_features(const RepMatrix& reps, std::span<const std::size_t> models, std::span<const std::size_t> units) {
  const std::size_t n = reps.rows(), R = reps.width();
  if (units.empty()) {
    if (models.size() != 1) throw std::invalid_argument("whole-row features need exactly one model");
    return reps.blocks.at(models[0]);
  }
  if (models.size() != units.size()) throw std::invalid_argument("one model per selected unit expected");
  Tensor out({n, units.size()});
  for (std::size_t j = 0; j < units.size(); ++j) {
    if (units[j] >= R) throw std::out_of_range("unit " + std::to_string(units[j]) + " >= R = " + std::to_string(R));
    const Tensor& b = reps.blocks.at(models[j]);
    for (std::size_t r = 0; r < n; ++r) out[r * units.size() + j] = b[r * R + units[j]];
  }
  return out;
}

std::vector<double> ModelwiseEnsemble::probability(const RepMatrix& reps) const {
  std::vector<double> p(reps.rows(), 0.0);
  for (std::size_t i = 0; i < detectors.size(); ++i) {
    const auto pi = detectors[i].probability(reps.blocks.at(models[i]));
    for (std::size_t r = 0; r < p.size(); ++r) p[r] += pi[r];
  }
  for (double& v : p) v /= static_cast<double>(detectors.size());
  return p;
}

std::vector<double> UnitwiseDetector::probability(const RepMatrix& reps) const {
  return detector.probability(select_features(reps, models, units));
}

std::uint64_t modelwise_detector_seed(std::uint64_t trial_seed, std::size_t index) {
  return derive_seed(trial_seed, "modelwise-detector", index);
}

std::uint64_t unitwise_detector_seed(std::uint64_t trial_seed, std::size_t n) {
  return derive_seed(trial_seed, "unitwise-detector", n);
}

ModelwiseEnsemble modelwise(Arm arm, std::size_t n, std::span<const std::size_t> pool, const RepMatrix& train,
                            std::uint64_t trial_seed, const DetectorConfig& cfg, CallTrace* trace,
                            DetectorCache* cache) {
  if (n < 1) throw std::invalid_argument("model-wise N must be >= 1");
  if (pool.empty() || (arm == Arm::treatment && pool.size() < n)) {
    throw std::invalid_argument("model-wise " + arm_name(arm) + " with N = " + std::to_string(n) + " needs " +
                                std::to_string(arm == Arm::treatment ? n : 1) + " models, pool has " +
                                std::to_string(pool.size()));
  }
  ModelwiseEnsemble ens;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t model = arm == Arm::treatment ? pool[i] : pool[0];
    const std::uint64_t seed = modelwise_detector_seed(trial_seed, i);
    if (trace) trace->push_back({{model}, {}, seed});
    ens.models.push_back(model);
    if (cache) {
      auto it = cache->find({model, seed});
      if (it == cache->end()) {
        it = cache->emplace(std::pair{model, seed}, train_detector(train.blocks.at(model), train.labels, seed, cfg)).first;
      }
      ens.detectors.push_back(it->second);
    } else {
      ens.detectors.push_back(train_detector(train.blocks.at(model), train.labels, seed, cfg));
    }
  }
  return ens;
}

std::vector<std::size_t> draw_units(Arm arm, std::size_t n, std::size_t width, std::uint64_t trial_seed) {
  if (arm == Arm::control) {
    if (n > width) {
      throw std::invalid_argument("unit-wise control with N = " + std::to_string(n) + " exceeds the penultimate width R = " +
                                  std::to_string(width) + "; a single model only has R units, so use N <= R");
    }
    Rng rng(derive_seed(trial_seed, "unitwise-control-units", n));
    auto perm = rng.permutation(width);
    perm.resize(n);
    return perm;
  }
  Rng rng(derive_seed(trial_seed, "unitwise-treatment-units", n));
  std::vector<std::size_t> units(n);
  for (auto& u : units) u = static_cast<std::size_t>(rng.below(width));
  return units;
}

UnitwiseDetector unitwise(Arm arm, std::size_t n, std::span<const std::size_t> pool, const RepMatrix& train,
                          std::uint64_t trial_seed, const DetectorConfig& cfg, CallTrace* trace) {
  if (n < 1) throw std::invalid_argument("unit-wise N must be >= 1");
  if (pool.empty() || (arm == Arm::treatment && pool.size() < n)) {
    throw std::invalid_argument("unit-wise treatment with N = " + std::to_string(n) + " needs " + std::to_string(n) +
                                " models, pool has " + std::to_string(pool.size()));
  }
  UnitwiseDetector det;
  det.units = draw_units(arm, n, train.width(), trial_seed);
  for (std::size_t i = 0; i < n; ++i) det.models.push_back(arm == Arm::treatment ? pool[i] : pool[0]);
  const std::uint64_t seed = unitwise_detector_seed(trial_seed, n);
  if (trace) trace->push_back({det.models, det.units, seed});
  det.detector = train_detector(select_features(train, det.models, det.units), train.labels, seed, cfg);
  return det;
}

double evaluate(std::span<const double> probabilities, std::span<const float> labels, double threshold) {
  if (probabilities.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (probabilities.size() != labels.size()) throw std::invalid_argument("evaluate: probability/label count mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool flagged = probabilities[i] > threshold;
    correct += flagged == (labels[i] > 0.5f);
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace multirep
