#include <cmath>
#include <set>

#include "doctest.h"
#include "multirep/models.hpp"
#include "oracles.hpp"

using namespace multirep;
namespace fs = std::filesystem;

namespace {

Dataset small_synthetic(std::size_t per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.samples_per_class = per_class;
  return synthetic_dataset(s, seed);
}

double summed_ce(const Classifier& c, const Tensor& x, std::span<const std::int32_t> y) {
  const Tensor z = c.logits(x);
  const std::size_t C = z.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < z.dim(0); ++b) {
    double m = -1e300;
    for (std::size_t k = 0; k < C; ++k) m = std::max(m, static_cast<double>(z[b * C + k]));
    double se = 0.0;
    for (std::size_t k = 0; k < C; ++k) se += std::exp(z[b * C + k] - m);
    total += m + std::log(se) - z[b * C + y[b]];
  }
  return total;
}

}  // namespace

TEST_CASE("build is deterministic per seed") {
  const ArchConfig arch = ArchConfig::compact();
  CHECK(build_classifier(arch, 7).flat_parameters() == build_classifier(arch, 7).flat_parameters());
  CHECK(build_classifier(arch, 7).flat_parameters() != build_classifier(arch, 8).flat_parameters());
}

TEST_CASE("parameter count matches the per-layer formula") {
  for (const ArchConfig& arch : {ArchConfig::desk(), ArchConfig::compact()}) {
    Classifier c = build_classifier(arch, 1);
    CHECK(c.graph().parameter_count() == oracle::arch_parameter_count(arch));
    CHECK(c.flat_parameters().size() == oracle::arch_parameter_count(arch));
  }
}

TEST_CASE("training lowers the loss on a 2-image set and is deterministic") {
  Dataset d = small_synthetic(1, 3);
  d = d.subset(std::vector<std::size_t>{0, 1});
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.flip_probability = 0.0;
  cfg.crop_padding = 0;
  Classifier a = build_classifier(ArchConfig::compact(), 5);
  Classifier b = build_classifier(ArchConfig::compact(), 5);
  const Tensor x = d.batch(0, 2);
  const double before = summed_ce(a, x, d.labels);
  cfg.epochs = 10;
  train(a, d, cfg);
  train(b, d, cfg);
  CHECK(summed_ce(a, x, d.labels) < before);
  CHECK(a.flat_parameters() == b.flat_parameters());

  Dataset empty = d.subset(std::vector<std::size_t>{});
  CHECK_THROWS_AS(train(a, empty, cfg), DataError);
}

TEST_CASE("a briefly trained model beats chance on its training data") {
  Dataset d = small_synthetic(60, 4);
  Classifier c = build_classifier(ArchConfig::compact(), 6);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 32;
  train(c, d, cfg);
  CHECK(accuracy(c, d) > 1.0 / 10.0);
}

TEST_CASE("augmentation") {
  Rng rng(1);
  Tensor img({2, 3, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i);
  CHECK(augment(img, 0.0, 0, rng) == img);
  CHECK(flip_horizontal(flip_horizontal(img)) == img);
  CHECK(flip_horizontal(img)[0] == img[3]);

  // pad 4 on 32x32: the crop offset must cover all of {0..8} in each axis.
  Tensor ones({1, 32, 32}, 1.0f);
  std::set<std::pair<int, int>> offsets;
  for (int t = 0; t < 4000; ++t) {
    Tensor out = augment(ones, 0.0, 4, rng);
    int zero_rows_top = 0, zero_cols_left = 0, zero_rows_bottom = 0, zero_cols_right = 0;
    while (zero_rows_top < 32 && out[zero_rows_top * 32 + 16] == 0.0f) ++zero_rows_top;
    while (zero_rows_bottom < 32 && out[(31 - zero_rows_bottom) * 32 + 16] == 0.0f) ++zero_rows_bottom;
    while (zero_cols_left < 32 && out[16 * 32 + zero_cols_left] == 0.0f) ++zero_cols_left;
    while (zero_cols_right < 32 && out[16 * 32 + 31 - zero_cols_right] == 0.0f) ++zero_cols_right;
    const int oy = zero_rows_top > 0 ? 4 - zero_rows_top : 4 + zero_rows_bottom;
    const int ox = zero_cols_left > 0 ? 4 - zero_cols_left : 4 + zero_cols_right;
    CHECK(oy >= 0);
    CHECK(oy <= 8);
    offsets.insert({oy, ox});
  }
  CHECK(offsets.size() == 81);
}

TEST_CASE("argmax rows and prediction ties") {
  std::vector<float> first(10, 0.0f), second(10, 0.0f);
  first[0] = 0.1f;
  first[1] = 0.9f;
  second[0] = 1.0f;
  second[1] = 1.0f;
  std::vector<float> both = first;
  both.insert(both.end(), second.begin(), second.end());
  CHECK(argmax_rows(Tensor({2, 10}, both)) == std::vector<std::int32_t>{1, 0});
}

TEST_CASE("penultimate and logits") {
  Classifier c = build_classifier(ArchConfig::compact(), 2);
  Dataset d = small_synthetic(2, 8);
  Tensor x = d.batch(0, 4);
  Tensor p = c.penultimate(x);
  CHECK(p.shape() == Shape{4, c.arch().penultimate_width});
  Tensor z = c.logits(x);
  Tensor z2 = c.final_dense(p);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(z2[i]).epsilon(1e-5));

  std::vector<std::size_t> twice = {1, 1};
  Tensor same = c.penultimate(d.batch(twice));
  for (std::size_t r = 0; r < p.dim(1); ++r) CHECK(same[r] == same[p.dim(1) + r]);

  CHECK_THROWS_AS(c.penultimate(Tensor({1, 3, 8, 8})), ShapeError);
  CHECK_THROWS_AS(c.final_dense(Tensor({1, 5})), ShapeError);
}

TEST_CASE("input gradient matches finite differences") {
  // Per-pixel differences on a 16x16 model drown in f32 rounding of the
  // logits, so the oracle runs on a 6x6 model with high-contrast inputs.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Classifier c = build_classifier(oracle::small_arch(), seed);
    Rng rng(seed + 100);
    Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng, 0.0, 1.0);
    std::vector<std::int32_t> y = {0, 2};
    CHECK(c.input_gradient(x, y).shape() == x.shape());
    auto r = oracle::check_input_gradient(c, x, y);
    INFO("seed " << seed << " skipped " << r.skipped);
    CHECK(r.checked * 2 >= x.size());
    CHECK(r.rel_error < 1e-3);
  }
  Classifier c = build_classifier(ArchConfig::compact(), 4);
  Dataset d = small_synthetic(1, 5);
  std::vector<std::int32_t> bad = {0, 10};
  CHECK_THROWS(c.input_gradient(d.batch(0, 2), bad));
}

TEST_CASE("classifier container round trip is bit-exact") {
  Classifier c = build_classifier(ArchConfig::compact(), 12);
  c.meta.epochs = 3;
  c.meta.test_accuracy = 0.8125;
  const fs::path file = fs::temp_directory_path() / "multirep_unit_model.mrc";
  save_classifier(c, file);
  Classifier back = load_classifier(file);
  CHECK(back.flat_parameters() == c.flat_parameters());
  CHECK(back.arch() == c.arch());
  CHECK(back.seed() == 12);
  CHECK(back.meta.epochs == 3);
  CHECK(back.meta.test_accuracy == 0.8125);
  CHECK_THROWS_AS(load_classifier(fs::temp_directory_path() / "multirep_missing.mrc"), DataError);

  std::ofstream(file, std::ios::binary) << "garbage";
  CHECK_THROWS_AS(load_classifier(file), DataError);
}
