#include "multirep/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "multirep/rng.hpp"

namespace multirep {

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t d = image_size();
  Tensor out({indices.size(), channels, height, width});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto img = image(indices[r]);
    std::copy(img.begin(), img.end(), out.data().begin() + r * d);
  }
  return out;
}

Tensor Dataset::batch(std::size_t begin, std::size_t end) const {
  end = std::min(end, size());
  const std::size_t d = image_size();
  const std::size_t n = end > begin ? end - begin : 0;
  return Tensor({n, channels, height, width},
                std::vector<float>(pixels.begin() + begin * d, pixels.begin() + (begin + n) * d));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out = *this;
  const std::size_t d = image_size();
  out.pixels.resize(indices.size() * d);
  out.labels.resize(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto img = image(indices[r]);
    std::copy(img.begin(), img.end(), out.pixels.begin() + r * d);
    out.labels[r] = labels[indices[r]];
  }
  return out;
}

void Dataset::validate() const {
  if (pixels.size() != labels.size() * image_size()) {
    throw DataError("dataset holds " + std::to_string(pixels.size()) + " pixel values for " +
                    std::to_string(labels.size()) + " images of " + std::to_string(image_size()));
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("pixel value " + std::to_string(v) + " outside [0, 1]");
  }
  for (std::int32_t y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

std::uint8_t quantize_byte(float v) {
  const double scaled = std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::floor(scaled + 0.5));
}

Dataset read_cifar10_batch(const std::filesystem::path& file, const std::string& split) {
  constexpr std::size_t kRecord = 3073;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("missing CIFAR-10 file: " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kRecord != 0) {
    throw DataError("truncated record in " + file.string() + ": " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of 3073");
  }
  Dataset out;
  out.split = split;
  out.source = "cifar10:" + file.filename().string();
  const std::size_t n = bytes.size() / kRecord;
  out.labels.resize(n);
  out.pixels.resize(n * 3072);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kRecord;
    if (rec[0] > 9) {
      throw DataError("label byte " + std::to_string(rec[0]) + " > 9 in record " + std::to_string(r) + " of " +
                      file.string());
    }
    out.labels[r] = rec[0];
    // Channel planes are already in C x H x W order.
    for (std::size_t i = 0; i < 3072; ++i) out.pixels[r * 3072 + i] = scale_byte(rec[1 + i]);
  }
  return out;
}

std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& directory) {
  Dataset train;
  train.split = "train";
  train.source = "cifar10:" + directory.string();
  for (int b = 1; b <= 5; ++b) {
    Dataset part = read_cifar10_batch(directory / ("data_batch_" + std::to_string(b) + ".bin"), "train");
    train.pixels.insert(train.pixels.end(), part.pixels.begin(), part.pixels.end());
    train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
  }
  Dataset test = read_cifar10_batch(directory / "test_batch.bin", "test");
  test.source = "cifar10:" + directory.string();
  return {std::move(train), std::move(test)};
}

Dataset stratified_head(const Dataset& data, std::size_t per_class) {
  std::vector<std::size_t> taken(data.classes, 0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& count = taken[static_cast<std::size_t>(data.labels[i])];
    if (count < per_class) {
      keep.push_back(i);
      ++count;
    }
  }
  return data.subset(keep);
}

namespace {

struct Frequency {
  int fy, fx;
};

// Cycles per image along y and x. Flipping horizontally maps each pattern to
// a phase-shifted copy of itself, so augmentation never changes the class.
constexpr Frequency kFrequencies[] = {{1, 0}, {0, 1}, {2, 0}, {0, 2}, {1, 1}, {2, 2}, {3, 0}, {0, 3},
                                      {1, 2}, {2, 1}, {3, 3}, {1, 3}, {3, 1}, {4, 0}, {0, 4}, {2, 3}};

}  // namespace

SyntheticSpec SyntheticSpec::easy() {
  SyntheticSpec s;
  s.grating_amplitude = 0.4;
  s.clutter_amplitude = 0.0;
  s.tint = 0.05;
  s.noise = 0.02;
  return s;
}

Dataset synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  const std::size_t C = spec.channels, H = spec.height, W = spec.width, K = spec.classes;
  Dataset out;
  out.channels = C;
  out.height = H;
  out.width = W;
  out.classes = K;
  out.split = "synthetic";
  out.source = "synthetic:" + std::to_string(seed);

  // Class prototypes: grating colour per class.
  Rng proto(derive_seed(spec.prototype_seed, "synthetic-prototypes"));
  std::vector<std::vector<double>> colour(K, std::vector<double>(C));
  for (auto& col : colour) {
    double norm = 0.0;
    for (double& v : col) {
      v = proto.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : col) v /= norm > 0.0 ? norm : 1.0;
  }

  const std::size_t n = K * spec.samples_per_class;
  const std::size_t d = C * H * W;
  out.pixels.resize(n * d);
  out.labels.resize(n);
  Rng rng(derive_seed(seed, "synthetic-instances"));
  std::vector<double> img(d);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % K;
    out.labels[i] = static_cast<std::int32_t>(k);
    for (std::size_t c = 0; c < C; ++c) {
      const double base = 0.5 + rng.uniform(-spec.tint, spec.tint);
      std::fill(img.begin() + c * H * W, img.begin() + (c + 1) * H * W, base);
    }

    const Frequency f = kFrequencies[k % std::size(kFrequencies)];
    const double p1 = rng.uniform(0.0, two_pi), p2 = rng.uniform(0.0, two_pi);
    for (std::size_t y = 0; y < H; ++y) {
      const double gy = f.fy ? std::sin(two_pi * f.fy * static_cast<double>(y) / H + p1) : 1.0;
      for (std::size_t x = 0; x < W; ++x) {
        const double gx = f.fx ? std::sin(two_pi * f.fx * static_cast<double>(x) / W + p2) : 1.0;
        for (std::size_t c = 0; c < C; ++c) img[(c * H + y) * W + x] += spec.grating_amplitude * colour[k][c] * gy * gx;
      }
    }

    for (std::size_t b = 0; b < spec.clutter_blobs; ++b) {
      const double by = rng.uniform(0.0, static_cast<double>(H)), bx = rng.uniform(0.0, static_cast<double>(W));
      const double s = rng.uniform(1.0, 3.0);
      std::vector<double> col(C);
      for (double& v : col) v = rng.uniform(-1.0, 1.0);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double dy = static_cast<double>(y) - by, dx = static_cast<double>(x) - bx;
          const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * s * s));
          for (std::size_t c = 0; c < C; ++c) img[(c * H + y) * W + x] += spec.clutter_amplitude * col[c] * g;
        }
      }
    }

    if (spec.texture_amplitude > 0.0) {
      // Checkerboard, horizontal or vertical stripes at the pixel scale, in
      // one colour channel (or grey for classes past the ninth).
      const std::size_t pattern = k % 3;
      const std::size_t tex_channel = (k / 3) % 3;
      const bool grey = k >= 9 || C < 3;
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t parity = pattern == 0 ? y + x : (pattern == 1 ? y : x);
          const double s = (parity % 2 == 0) ? sign : -sign;
          for (std::size_t c = 0; c < C; ++c) {
            const double w = grey ? 1.0 / std::sqrt(static_cast<double>(C)) : (c == tex_channel ? 1.0 : 0.0);
            img[(c * H + y) * W + x] += spec.texture_amplitude * w * s;
          }
        }
      }
    }

    float* dst = out.pixels.data() + i * d;
    for (std::size_t p = 0; p < d; ++p) {
      const double v = img[p] + spec.noise * rng.normal();
      dst[p] = scale_byte(quantize_byte(static_cast<float>(std::clamp(v, 0.0, 1.0))));
    }
  }
  return out;
}

PairedSet PairedSet::subset(std::span<const std::size_t> indices) const {
  PairedSet out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  const std::size_t d = image_size();
  out.clean.resize(indices.size() * d);
  out.adversarial.resize(indices.size() * d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    std::copy_n(clean.begin() + i * d, d, out.clean.begin() + r * d);
    std::copy_n(adversarial.begin() + i * d, d, out.adversarial.begin() + r * d);
    out.source_ids.push_back(source_ids[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

std::pair<Tensor, std::vector<float>> PairedSet::expand() const {
  const std::size_t n = size();
  std::vector<float> data(clean);
  data.insert(data.end(), adversarial.begin(), adversarial.end());
  std::vector<float> targets(2 * n, 0.0f);
  std::fill(targets.begin() + n, targets.end(), 1.0f);
  return {Tensor({2 * n, channels, height, width}, std::move(data)), std::move(targets)};
}

PairSplit split_pairs(std::size_t pairs, double test_fraction, std::uint64_t seed) {
  if (pairs < 2) throw std::invalid_argument("pair split needs at least 2 pairs, got " + std::to_string(pairs));
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test fraction must lie in (0, 1)");
  }
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(pairs)));
  n_test = std::clamp<std::size_t>(n_test, 1, pairs - 1);
  Rng rng(derive_seed(seed, "pair-split"));
  std::vector<std::size_t> order = rng.permutation(pairs);
  PairSplit split;
  split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(split.test.begin(), split.test.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

std::pair<PairedSet, PairedSet> pair_split(const PairedSet& pairs, double test_fraction, std::uint64_t seed) {
  const PairSplit s = split_pairs(pairs.size(), test_fraction, seed);
  return {pairs.subset(s.train), pairs.subset(s.test)};
}

}  // namespace multirep
