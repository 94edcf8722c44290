#include <cmath>

#include "doctest.h"
#include "multirep/attacks.hpp"
#include "multirep/ops.hpp"
#include "oracles.hpp"

using namespace multirep;
namespace fs = std::filesystem;

namespace {

// A classifier that predicts `cls` for every input.
Classifier constant_classifier(std::size_t cls, std::uint64_t seed = 1) {
  Classifier c = build_classifier(ArchConfig::compact(), seed);
  for (auto& p : c.graph().parameters()) {
    if (p.name == "logits.w") std::fill(p.value.storage().begin(), p.value.storage().end(), 0.0f);
    if (p.name == "logits.b") p.value[cls] = 10.0f;
  }
  return c;
}

Dataset tiny_test(std::size_t per_class) {
  SyntheticSpec s;
  s.samples_per_class = per_class;
  return synthetic_dataset(s, 31);
}

bool on_grid(float v) {
  const double k = static_cast<double>(v) * 255.0;
  return std::fabs(k - std::round(k)) < 1e-4 && v >= 0.0f && v <= 1.0f;
}

}  // namespace

TEST_CASE("post-processing") {
  CHECK(postprocess_value(1.2f) == 1.0f);
  CHECK(postprocess_value(-0.3f) == 0.0f);
  CHECK(postprocess_value(0.0039f) == scale_byte(1));
  CHECK(postprocess_value(0.5f / 255.0f) == scale_byte(1));
  CHECK(postprocess_value(0.49f / 255.0f) == 0.0f);
  Rng rng(2);
  for (int t = 0; t < 10000; ++t) {
    const float v = static_cast<float>(rng.uniform(-0.2, 1.2));
    const float q = postprocess_value(v);
    CHECK(on_grid(q));
    CHECK(postprocess_value(q) == q);
    if (v >= 0.0f && v <= 1.0f) CHECK(std::fabs(q - v) <= 0.5 / 255.0 + 1e-7);
  }
}

TEST_CASE("fgsm follows the gradient sign with sign(0) = 0") {
  // Label 0, so grad_x CE = p1 * (w_1 - w_0) = p1 * [0.3, -0.2, 0].
  Graph g = oracle::linear_model(3, {0.0f, 0.3f, 0.0f, -0.2f, 0.0f, 0.0f}, {0.0f, 0.0f});
  Tensor x({1, 3}, 0.5f);
  std::vector<std::int32_t> y = {0};
  Tensor grad = loss_input_gradient(g, x, y);
  CHECK(grad[0] > 0.0f);
  CHECK(grad[1] < 0.0f);
  CHECK(grad[2] == 0.0f);
  const float eps = 3.0f / 255.0f;
  Tensor adv = fgsm(g, x, y, eps);
  CHECK(adv[0] - x[0] == doctest::Approx(eps));
  CHECK(adv[1] - x[1] == doctest::Approx(-eps));
  CHECK(adv[2] == x[2]);
  CHECK(fgsm(g, x, y, 0.0) == x);
  std::vector<std::int32_t> bad = {2};
  CHECK_THROWS(fgsm(g, x, bad, eps));
}

TEST_CASE("bim") {
  Graph g = oracle::linear_model(4, {0, 1, 0, 2, 0, 0.5f, 0, 3}, {0, 0});
  std::vector<std::int32_t> y = {0};
  Tensor x({1, 4}, 0.5f);
  SUBCASE("one step of size epsilon equals fgsm") {
    CHECK(postprocess(bim(g, x, y, 3.0 / 255, 1, 3.0 / 255)) == postprocess(fgsm(g, x, y, 3.0 / 255)));
  }
  SUBCASE("a constant positive gradient sign saturates at epsilon") {
    Tensor adv = postprocess(bim(g, x, y, 1.0 / 255, 10, 3.0 / 255));
    for (std::size_t i = 0; i < 4; ++i) CHECK(adv[i] == postprocess_value(0.5f + 3.0f / 255.0f));
  }
  SUBCASE("the image box is respected") {
    Tensor edge({1, 4}, 0.999f);
    Tensor adv = bim(g, edge, y, 1.0 / 255, 10, 3.0 / 255);
    for (float v : adv.data()) CHECK(v <= 1.0f);
  }
}

TEST_CASE("cw returns the input for an instance that is already misclassified") {
  Graph g = oracle::linear_model(2, {1, -1, 1, -1}, {0, 0});
  Tensor x({1, 2}, {0.4f, 0.3f});  // z = [0.7, -0.7], so label 1 is wrong already
  std::vector<std::int32_t> y = {1};
  CwParams p;
  p.confidence = 0.0;
  CwResult r = cw_l2(g, x, y, p);
  CHECK(r.success[0] == 1);
  CHECK(r.l2_squared[0] < 1e-10);
  std::vector<std::int32_t> two = {1, 0};
  CHECK_THROWS(cw_l2(g, x, two, p));
}

TEST_CASE("cw distance matches the analytic boundary distance of a trained linear model") {
  for (double kappa : {0.0, 1.0}) {
    const oracle::CwOracleReport r = oracle::cw_linear_oracle(kappa);
    INFO("kappa " << kappa << ": " << r.within << " of " << r.checked << " within 10%, worst " << r.worst);
    CHECK(r.checked >= 50);
    CHECK(r.within == r.checked);
  }
}

TEST_CASE("attack population") {
  Dataset test = tiny_test(3);
  SUBCASE("no correct prediction is an error") {
    std::vector<std::size_t> not_zero;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (test.labels[i] != 0) not_zero.push_back(i);
    }
    Dataset others = test.subset(not_zero);
    CHECK_THROWS_AS(attack_population(constant_classifier(0), others, AttackConfig::defaults(AttackKind::fgsm), "m"),
                    DataError);
  }
  SUBCASE("fooled flags agree with the attacked model and pixels are on the grid") {
    SyntheticSpec s = SyntheticSpec::easy();
    s.samples_per_class = 20;
    Dataset train_set = synthetic_dataset(s, 5);
    Classifier c = build_classifier(ArchConfig::compact(), 9);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 32;
    train(c, train_set, cfg);
    for (AttackKind kind : {AttackKind::fgsm, AttackKind::bim, AttackKind::cw}) {
      AttackConfig ac = AttackConfig::defaults(kind);
      ac.cw.max_iterations = 20;
      ac.cw.binary_steps = 2;
      AdversarialSet set = attack_population(c, train_set, ac, "m", 2, 7);
      REQUIRE(set.size() > 0);
      const std::size_t n = set.size();
      Tensor adv({n, 3, 16, 16}, std::vector<float>(set.pairs.adversarial));
      const auto pred = c.predict(adv);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(set.fooled[i] == (pred[i] != set.pairs.labels[i]));
        correct += pred[i] == set.pairs.labels[i];
      }
      CHECK(set.success_rate() == doctest::Approx(1.0 - static_cast<double>(correct) / n));
      for (float v : set.pairs.adversarial) CHECK(on_grid(v));
      if (kind != AttackKind::cw) {
        for (std::size_t i = 0; i < set.pairs.adversarial.size(); ++i) {
          CHECK(std::fabs(set.pairs.adversarial[i] - set.pairs.clean[i]) <= ac.epsilon + 0.5 / 255.0 + 1e-6);
        }
      }
    }
  }
}

TEST_CASE("transfer statistics") {
  AdversarialSet set;
  set.pairs.channels = 3;
  set.pairs.height = 16;
  set.pairs.width = 16;
  for (std::size_t i = 0; i < 10; ++i) {
    set.pairs.labels.push_back(i < 4 ? 0 : 1);
    set.pairs.source_ids.push_back(static_cast<std::uint32_t>(i));
  }
  set.pairs.clean.assign(10 * 768, 0.5f);
  set.pairs.adversarial = set.pairs.clean;
  set.fooled.assign(10, 0);

  std::vector<Classifier> split = {constant_classifier(0), constant_classifier(1)};
  TransferStats s = transfer_eval(split, set);
  CHECK(s.accuracies == std::vector<double>{0.4, 0.6});
  CHECK(s.mean == doctest::Approx(0.5));
  CHECK(s.std == doctest::Approx(std::sqrt(0.02)));

  std::vector<Classifier> same = {constant_classifier(1, 1), constant_classifier(1, 2), constant_classifier(1, 3)};
  TransferStats t = transfer_eval(same, set);
  CHECK(t.std == 0.0);
  CHECK_THROWS(transfer_eval(std::span<const Classifier>(same.data(), 1), set));
}

TEST_CASE("adversarial set container round trip and attack grid") {
  Dataset test = tiny_test(2);
  Classifier c = constant_classifier(0);
  AttackConfig ac = AttackConfig::defaults(AttackKind::bim);
  AdversarialSet set = attack_population(c, test, ac, "models/attacked.mrc");
  const fs::path file = fs::temp_directory_path() / "multirep_unit_set.mradv";
  save_adversarial_set(set, file);
  AdversarialSet back = load_adversarial_set(file);
  CHECK(back.pairs.clean == set.pairs.clean);
  CHECK(back.pairs.adversarial == set.pairs.adversarial);
  CHECK(back.pairs.labels == set.pairs.labels);
  CHECK(back.pairs.source_ids == set.pairs.source_ids);
  CHECK(back.fooled == set.fooled);
  CHECK(back.attacked_model == "models/attacked.mrc");
  CHECK(back.config.kind == AttackKind::bim);
  CHECK(back.config.iterations == ac.iterations);
  CHECK(back.config.epsilon == ac.epsilon);

  const fs::path grid = fs::temp_directory_path() / "multirep_unit_grid.ppm";
  write_attack_grid(grid, set, set, set, 10, 2);
  std::ifstream in(grid, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  CHECK(magic == "P6");
  CHECK(maxval == 255);
  CHECK(w % (4 * 16 * 2) < 4 * 16 * 2);
  CHECK(fs::file_size(grid) > w * h * 3);
}
