#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "multirep/data.hpp"
#include "multirep/models.hpp"
#include "oracles.hpp"

using namespace multirep;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "multirep_unit";
  fs::create_directories(dir);
  return dir / name;
}

PairedSet toy_pairs(std::size_t n) {
  PairedSet p;
  p.channels = 1;
  p.height = 1;
  p.width = 2;
  for (std::size_t i = 0; i < n; ++i) {
    p.clean.insert(p.clean.end(), {static_cast<float>(i), 0.0f});
    p.adversarial.insert(p.adversarial.end(), {static_cast<float>(i), 1.0f});
    p.source_ids.push_back(static_cast<std::uint32_t>(1000 + i));
    p.labels.push_back(static_cast<std::int32_t>(i % 10));
  }
  return p;
}

}  // namespace

TEST_CASE("cifar reader on a hand-built 2-record fixture") {
  const fs::path file = scratch("fixture.bin");
  oracle::write_cifar_fixture(file);
  Dataset d = read_cifar10_batch(file, "train");
  REQUIRE(d.size() == 2);
  CHECK(d.channels == 3);
  CHECK(d.height == 32);
  CHECK(d.width == 32);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(d.labels[r] == oracle::fixture_label(r));
    auto img = d.image(r);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p : {0u, 1u, 31u, 32u, 517u, 1023u}) {
        CHECK(img[c * 1024 + p] == scale_byte(oracle::fixture_byte(r, c, p)));
      }
    }
  }
  // Offset 1 of record 0 is the first red byte.
  CHECK(d.image(0)[0] == 0.0f);
}

TEST_CASE("cifar reader errors") {
  CHECK_THROWS_AS(read_cifar10_batch(scratch("does_not_exist.bin"), "train"), DataError);

  const fs::path truncated = scratch("truncated.bin");
  oracle::write_cifar_fixture(truncated);
  fs::resize_file(truncated, 3073 + 100);
  CHECK_THROWS_AS(read_cifar10_batch(truncated, "train"), DataError);

  const fs::path bad_label = scratch("bad_label.bin");
  oracle::write_cifar_fixture(bad_label, 3);  // third record has label 11
  CHECK_THROWS_AS(read_cifar10_batch(bad_label, "train"), DataError);

  CHECK_THROWS_AS(load_cifar10(scratch("no_such_dir")), DataError);
}

TEST_CASE("byte scaling round trips through quantization") {
  CHECK(scale_byte(255) == 1.0f);
  CHECK(scale_byte(0) == 0.0f);
  for (int v = 0; v < 256; ++v) {
    const auto b = static_cast<std::uint8_t>(v);
    CHECK(quantize_byte(scale_byte(b)) == b);
  }
}

TEST_CASE("stratified head keeps file order per class") {
  Dataset d;
  d.channels = 1;
  d.height = 1;
  d.width = 1;
  d.classes = 2;
  d.labels = {0, 1, 1, 0, 1, 0};
  d.pixels = {0, 1, 2, 3, 4, 5};
  Dataset h = stratified_head(d, 2);
  CHECK(h.labels == std::vector<std::int32_t>{0, 1, 1, 0});
  CHECK(h.pixels == std::vector<float>{0, 1, 2, 3});
}

TEST_CASE("synthetic dataset") {
  SyntheticSpec s;
  s.classes = 2;
  s.samples_per_class = 100;
  Dataset a = synthetic_dataset(s, 9);
  CHECK(a.size() == 200);
  CHECK(a.pixels == synthetic_dataset(s, 9).pixels);
  CHECK(a.labels == synthetic_dataset(s, 9).labels);
  CHECK(a.pixels != synthetic_dataset(s, 10).pixels);
  CHECK_NOTHROW(a.validate());
  for (float v : a.pixels) CHECK(quantize_byte(v) == std::lround(v * 255.0f));
  CHECK(std::count(a.labels.begin(), a.labels.end(), 1) == 100);
}

TEST_CASE("easy synthetic data is learned by the desk CNN within 5 epochs") {
  SyntheticSpec s = SyntheticSpec::easy();
  s.samples_per_class = 200;
  Dataset train_set = synthetic_dataset(s, 1);
  s.samples_per_class = 50;
  Dataset test_set = synthetic_dataset(s, 2);
  ArchConfig arch = ArchConfig::desk();
  arch.height = s.height;
  arch.width = s.width;
  Classifier c = build_classifier(arch, 3);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  train(c, train_set, cfg);
  CHECK(accuracy(c, test_set) >= 0.95);
}

TEST_CASE("pair split sizes and errors") {
  PairSplit s = split_pairs(10, 0.1, 4);
  CHECK(s.train.size() == 9);
  CHECK(s.test.size() == 1);
  CHECK_THROWS(split_pairs(1, 0.1, 4));
  CHECK_THROWS(split_pairs(10, 0.0, 4));
  CHECK_THROWS(split_pairs(10, 1.0, 4));
  CHECK(split_pairs(3, 0.01, 1).test.size() == 1);
  CHECK(split_pairs(3, 0.99, 1).train.size() == 1);
}

TEST_CASE("pair split never separates a pair, over 100 seeds") {
  const PairedSet pairs = toy_pairs(137);
  const std::size_t expected_test = static_cast<std::size_t>(std::lround(0.1 * 137));
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto [tr, te] = pair_split(pairs, 0.1, derive_seed(seed, "unit-split"));
    CHECK(te.size() + 1 >= expected_test);
    CHECK(te.size() <= expected_test + 1);
    CHECK(tr.size() + te.size() == pairs.size());
    std::set<std::uint32_t> train_ids(tr.source_ids.begin(), tr.source_ids.end());
    std::set<std::uint32_t> all(train_ids);
    for (std::size_t i = 0; i < te.size(); ++i) {
      CHECK(train_ids.count(te.source_ids[i]) == 0);
      all.insert(te.source_ids[i]);
    }
    CHECK(all.size() == pairs.size());
    for (const PairedSet* side : {&tr, &te}) {
      for (std::size_t i = 0; i < side->size(); ++i) {
        // clean and adversarial rows still describe the same source image
        CHECK(side->clean[2 * i] == side->adversarial[2 * i]);
        CHECK(side->source_ids[i] == 1000 + static_cast<std::uint32_t>(side->clean[2 * i]));
      }
    }
  }
  auto a = split_pairs(50, 0.1, 77), b = split_pairs(50, 0.1, 77);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
}

TEST_CASE("paired set expansion puts clean rows first") {
  auto [x, y] = toy_pairs(3).expand();
  CHECK(x.shape() == Shape{6, 1, 1, 2});
  CHECK(y == std::vector<float>{0, 0, 0, 1, 1, 1});
  CHECK(x[1] == 0.0f);
  CHECK(x[7] == 1.0f);
}
