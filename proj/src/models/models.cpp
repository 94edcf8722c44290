#include "multirep/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "common/binio.hpp"

namespace multirep {

ArchConfig ArchConfig::desk() { return ArchConfig{}; }

ArchConfig ArchConfig::compact() {
  ArchConfig a;
  a.height = 16;
  a.width = 16;
  a.stem_filters = 8;
  a.blocks = {{8, 1, true}, {16, 2, true}};
  a.penultimate_width = 16;
  return a;
}

void ArchConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw std::invalid_argument("input shape must be non-empty");
  if (stem_filters == 0) throw std::invalid_argument("stem needs at least one filter");
  if (penultimate_width < 1) throw std::invalid_argument("penultimate width must be >= 1");
  if (classes < 2) throw std::invalid_argument("a classifier needs at least 2 classes");
  if (input_mean.size() != channels) {
    throw std::invalid_argument("input_mean has " + std::to_string(input_mean.size()) + " entries for " +
                                std::to_string(channels) + " channels");
  }
  for (const auto& b : blocks) {
    if (b.filters == 0 || b.stride == 0) throw std::invalid_argument("blocks need filters >= 1 and stride >= 1");
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (flip_probability < 0.0 || flip_probability > 1.0) throw std::invalid_argument("flip probability outside [0, 1]");
}

Classifier::Classifier(ArchConfig arch, std::uint64_t seed, Graph graph, ParamId final_weight, ParamId final_bias)
    : arch_(std::move(arch)), seed_(seed), graph_(std::move(graph)), final_weight_(final_weight),
      final_bias_(final_bias) {}

Tensor Classifier::logits(const Tensor& batch) const { return graph_.forward(batch); }

std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::int32_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (logits[r * cols + c] > logits[r * cols + best]) best = c;
    }
    out[r] = static_cast<std::int32_t>(best);
  }
  return out;
}

std::vector<std::int32_t> Classifier::predict(const Tensor& batch) const { return argmax_rows(logits(batch)); }

Tensor Classifier::penultimate(const Tensor& batch) const { return graph_.forward_to(batch, kPenultimate); }

Tensor Classifier::final_dense(const Tensor& representations) const {
  Tape tape(false);
  Var r = tape.constant(representations);
  Var out = ops::dense(r, tape.constant(graph_.parameter(final_weight_).value),
                       tape.constant(graph_.parameter(final_bias_).value));
  return out.value();
}

Tensor Classifier::input_gradient(const Tensor& x, std::span<const std::int32_t> labels, float loss_scale) const {
  ForwardPass pass(graph_, x, GradMode::input);
  Var loss = ops::softmax_cross_entropy(pass.output_var(), labels, ops::Reduction::sum);
  if (loss_scale != 1.0f) loss = ops::scale(loss, loss_scale);
  return pass.backward(loss).input;
}

std::vector<float> Classifier::flat_parameters() const {
  std::vector<float> out;
  out.reserve(graph_.parameter_count());
  for (const auto& p : graph_.parameters()) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
  return out;
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (float& v : t.data()) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace

Classifier build_classifier(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, "classifier-init"));
  Graph g(arch.input_shape());

  auto conv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t k) {
    ParamId w = g.add_parameter(name + ".w", he_normal({out, in, k, k}, in * k * k, rng));
    ParamId b = g.add_parameter(name + ".b", Tensor({out}));
    return std::pair{w, b};
  };

  g.add_input_shift(arch.input_mean);
  auto [sw, sb] = conv("stem", arch.channels, arch.stem_filters, 3);
  g.add_conv2d(sw, sb, {1, 1});
  g.add_relu();

  std::size_t width = arch.stem_filters;
  for (std::size_t i = 0; i < arch.blocks.size(); ++i) {
    const BlockSpec& blk = arch.blocks[i];
    const std::string prefix = "block" + std::to_string(i);
    if (blk.residual) g.push_skip();
    auto [w1, b1] = conv(prefix + ".conv1", width, blk.filters, 3);
    g.add_conv2d(w1, b1, {blk.stride, 1});
    g.add_relu();
    auto [w2, b2] = conv(prefix + ".conv2", blk.filters, blk.filters, 3);
    g.add_conv2d(w2, b2, {1, 1});
    if (blk.residual) {
      if (blk.filters != width || blk.stride != 1) {
        auto [pw, pb] = conv(prefix + ".proj", width, blk.filters, 1);
        g.add_skip(pw, pb, {blk.stride, 0});
      } else {
        g.add_skip();
      }
    }
    g.add_relu();
    width = blk.filters;
  }
  g.add_global_avg_pool();

  ParamId pw = g.add_parameter("penultimate.w", he_normal({width, arch.penultimate_width}, width, rng));
  ParamId pb = g.add_parameter("penultimate.b", Tensor({arch.penultimate_width}));
  g.add_dense(pw, pb);
  g.add_relu();
  g.mark(Classifier::kPenultimate);

  ParamId lw = g.add_parameter("logits.w",
                               he_normal({arch.penultimate_width, arch.classes}, arch.penultimate_width, rng));
  ParamId lb = g.add_parameter("logits.b", Tensor({arch.classes}));
  g.add_dense(lw, lb);
  return Classifier(arch, seed, std::move(g), lw, lb);
}

void augment(std::span<const float> image, std::span<float> out, std::size_t channels, std::size_t height,
             std::size_t width, double flip_probability, std::size_t pad, Rng& rng) {
  const bool flip = rng.bernoulli(flip_probability);
  const auto oy = static_cast<long>(rng.below(2 * pad + 1));
  const auto ox = static_cast<long>(rng.below(2 * pad + 1));
  const long p = static_cast<long>(pad);
  const long H = static_cast<long>(height), W = static_cast<long>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = image.data() + c * height * width;
    float* dst = out.data() + c * height * width;
    for (long y = 0; y < H; ++y) {
      const long sy = y + oy - p;
      for (long x = 0; x < W; ++x) {
        long sx = x + ox - p;
        float v = 0.0f;
        if (sy >= 0 && sy < H && sx >= 0 && sx < W) {
          if (flip) sx = W - 1 - sx;
          v = src[sy * W + sx];
        }
        dst[y * W + x] = v;
      }
    }
  }
}

Tensor augment(const Tensor& image, double flip_probability, std::size_t pad, Rng& rng) {
  if (image.rank() != 3) throw ShapeError("augment expects [C, H, W], got " + shape_str(image.shape()));
  Tensor out(image.shape());
  augment(image.data(), out.data(), image.dim(0), image.dim(1), image.dim(2), flip_probability, pad, rng);
  return out;
}

Tensor flip_horizontal(const Tensor& image) {
  if (image.rank() < 2) throw ShapeError("flip needs at least [H, W]");
  const std::size_t W = image.dim(image.rank() - 1);
  Tensor out(image.shape());
  for (std::size_t row = 0; row < image.size() / W; ++row) {
    for (std::size_t x = 0; x < W; ++x) out[row * W + x] = image[row * W + (W - 1 - x)];
  }
  return out;
}

TrainReport train(Classifier& classifier, const Dataset& data, const TrainConfig& cfg, const Dataset* holdout) {
  cfg.validate();
  if (data.size() == 0) throw DataError("cannot train on an empty dataset");
  classifier.graph().check_input({1, data.channels, data.height, data.width});

  Graph& graph = classifier.graph();
  std::vector<Tensor*> params;
  for (auto& p : graph.parameters()) params.push_back(&p.value);
  AdamState state;
  Rng rng(derive_seed(cfg.seed, "classifier-train"));
  const std::size_t d = data.image_size();
  TrainReport report;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = rng.permutation(data.size());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      Tensor batch({n, data.channels, data.height, data.width});
      std::vector<std::int32_t> labels(n);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t idx = order[start + r];
        augment(data.image(idx), batch.data().subspan(r * d, d), data.channels, data.height, data.width,
                cfg.flip_probability, cfg.crop_padding, rng);
        labels[r] = data.labels[idx];
      }
      ForwardPass pass(graph, std::move(batch), GradMode::params);
      Var loss = ops::softmax_cross_entropy(pass.output_var(), labels);
      loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(n);
      GradientMap grads = pass.backward(loss);
      adam_step(params, grads.params, state, cfg.adam);
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(data.size()));
  }
  classifier.meta.epochs += cfg.epochs;
  if (holdout != nullptr) {
    report.holdout_accuracy = accuracy(classifier, *holdout);
    classifier.meta.test_accuracy = report.holdout_accuracy;
  }
  return report;
}

std::vector<std::int32_t> predict_dataset(const Classifier& classifier, const Dataset& data, std::size_t batch_size) {
  std::vector<std::int32_t> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto p = classifier.predict(data.batch(start, start + batch_size));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double accuracy(const Classifier& classifier, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  const auto pred = predict_dataset(classifier, data, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

constexpr std::string_view kClassifierMagic = "MRCLSF01";

std::string blocks_str(const std::vector<BlockSpec>& blocks) {
  std::string out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(blocks[i].filters) + ":" + std::to_string(blocks[i].stride) + ":" +
           (blocks[i].residual ? "1" : "0");
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

void save_classifier(const Classifier& classifier, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  const ArchConfig& a = classifier.arch();
  binio::Header h;
  h["format_version"] = "1";
  h["channels"] = std::to_string(a.channels);
  h["height"] = std::to_string(a.height);
  h["width"] = std::to_string(a.width);
  h["stem_filters"] = std::to_string(a.stem_filters);
  h["blocks"] = blocks_str(a.blocks);
  h["penultimate_width"] = std::to_string(a.penultimate_width);
  h["classes"] = std::to_string(a.classes);
  std::string means;
  for (std::size_t i = 0; i < a.input_mean.size(); ++i) {
    means += (i ? "," : "") + binio::fmt_double(static_cast<double>(a.input_mean[i]));
  }
  h["input_mean"] = means;
  h["seed"] = std::to_string(classifier.seed());
  h["epochs"] = std::to_string(classifier.meta.epochs);
  h["test_accuracy"] = std::isnan(classifier.meta.test_accuracy) ? "nan" : binio::fmt_double(classifier.meta.test_accuracy);
  h["parameter_count"] = std::to_string(classifier.graph().parameter_count());

  binio::put_bytes(out, kClassifierMagic.data(), kClassifierMagic.size());
  binio::put_header(out, h);
  const auto& params = classifier.graph().parameters();
  binio::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    binio::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    binio::put_bytes(out, p.name.data(), p.name.size());
    binio::put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t dim : p.value.shape()) binio::put_u32(out, static_cast<std::uint32_t>(dim));
    binio::put_f32s(out, p.value.data().data(), p.value.size());
  }
  if (!out) throw DataError("failed writing " + file.string());
}

Classifier load_classifier(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("missing classifier file: " + file.string());
  binio::check_magic(in, kClassifierMagic);
  const binio::Header h = binio::get_header(in);
  if (binio::require_key(h, "format_version") != "1") throw DataError("unsupported classifier format version");

  ArchConfig a;
  a.channels = binio::parse_u64(binio::require_key(h, "channels"));
  a.height = binio::parse_u64(binio::require_key(h, "height"));
  a.width = binio::parse_u64(binio::require_key(h, "width"));
  a.stem_filters = binio::parse_u64(binio::require_key(h, "stem_filters"));
  a.penultimate_width = binio::parse_u64(binio::require_key(h, "penultimate_width"));
  a.classes = binio::parse_u64(binio::require_key(h, "classes"));
  a.blocks.clear();
  for (const auto& spec : split(binio::require_key(h, "blocks"), ',')) {
    const auto parts = split(spec, ':');
    if (parts.size() != 3) throw DataError("malformed block spec " + spec);
    a.blocks.push_back({binio::parse_u64(parts[0]), binio::parse_u64(parts[1]), parts[2] == "1"});
  }
  a.input_mean.clear();
  for (const auto& m : split(binio::require_key(h, "input_mean"), ',')) {
    a.input_mean.push_back(static_cast<float>(binio::parse_double(m)));
  }
  const std::uint64_t seed = binio::parse_u64(binio::require_key(h, "seed"));

  Classifier c = build_classifier(a, seed);
  c.meta.epochs = binio::parse_u64(binio::require_key(h, "epochs"));
  const std::string& acc = binio::require_key(h, "test_accuracy");
  c.meta.test_accuracy = acc == "nan" ? std::numeric_limits<double>::quiet_NaN() : binio::parse_double(acc);

  auto& params = c.graph().parameters();
  if (binio::get_u32(in) != params.size()) throw DataError("parameter count does not match the architecture");
  for (auto& p : params) {
    std::string name(binio::get_u32(in), '\0');
    binio::get_bytes(in, name.data(), name.size());
    if (name != p.name) throw DataError("expected parameter " + p.name + ", found " + name);
    Shape shape(binio::get_u32(in));
    for (auto& dim : shape) dim = binio::get_u32(in);
    if (shape != p.value.shape()) throw DataError("parameter " + name + " has shape " + shape_str(shape));
    binio::get_f32s(in, p.value.data().data(), p.value.size());
  }
  return c;
}

}  // namespace multirep
