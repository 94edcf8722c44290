#include "multirep/attacks.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "common/binio.hpp"
#include "multirep/adam.hpp"
#include "multirep/parallel.hpp"
#include "multirep/version.hpp"

namespace multirep {

std::string attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::bim: return "bim";
    case AttackKind::cw: return "cw";
  }
  return "?";
}

AttackKind parse_attack(const std::string& name) {
  std::string lower(name);
  for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "fgsm") return AttackKind::fgsm;
  if (lower == "bim") return AttackKind::bim;
  if (lower == "cw") return AttackKind::cw;
  throw std::invalid_argument("unknown attack '" + name + "' (expected fgsm, bim or cw)");
}

AttackConfig AttackConfig::defaults(AttackKind kind) {
  AttackConfig c;
  c.kind = kind;
  return c;
}

void AttackConfig::validate() const {
  if (kind == AttackKind::cw) {
    if (!(cw.confidence >= 0.0)) throw std::invalid_argument("cw confidence must be >= 0");
    if (cw.binary_steps < 1) throw std::invalid_argument("cw binary_steps must be >= 1");
    if (cw.max_iterations < 1) throw std::invalid_argument("cw max_iterations must be >= 1");
    if (!(cw.learning_rate > 0.0)) throw std::invalid_argument("cw learning_rate must be > 0");
    if (!(cw.initial_const > 0.0)) throw std::invalid_argument("cw initial_const must be > 0");
    return;
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument(attack_name(kind) + " epsilon must be > 0");
  if (kind == AttackKind::bim) {
    if (!(alpha > 0.0) || alpha > epsilon) throw std::invalid_argument("bim alpha must lie in (0, epsilon]");
    if (iterations < 1) throw std::invalid_argument("bim iterations must be >= 1");
  }
}

float postprocess_value(float v) {
  return static_cast<float>(static_cast<double>(quantize_byte(v)) / 255.0);
}

void postprocess(std::span<float> values) {
  for (float& v : values) v = postprocess_value(v);
}

Tensor postprocess(Tensor x) {
  postprocess(x.data());
  return x;
}

Tensor loss_input_gradient(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels) {
  ForwardPass pass(model, x, GradMode::input);
  Var loss = ops::softmax_cross_entropy(pass.output_var(), labels, ops::Reduction::sum);
  return pass.backward(loss).input;
}

Tensor fgsm(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels, double epsilon) {
  const Tensor g = loss_input_gradient(model, x, labels);
  const auto eps = static_cast<float>(epsilon);
  Tensor out(x);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += eps * sign_of(g[i]);
  return out;
}

Tensor bim(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels, double alpha,
           std::size_t iterations, double epsilon) {
  const auto a = static_cast<float>(alpha);
  const auto eps = static_cast<float>(epsilon);
  Tensor adv(x);
  for (std::size_t t = 0; t < iterations; ++t) {
    const Tensor g = loss_input_gradient(model, adv, labels);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const float v = adv[i] + a * sign_of(g[i]);
      adv[i] = std::clamp(std::clamp(v, x[i] - eps, x[i] + eps), 0.0f, 1.0f);
    }
  }
  return adv;
}

namespace {

struct Margin {
  double real;
  double other;
  std::size_t other_index;
};

Margin margin_of(const Tensor& logits, std::size_t row, std::int32_t label) {
  const std::size_t C = logits.dim(1);
  if (label < 0 || static_cast<std::size_t>(label) >= C) {
    throw std::out_of_range("label " + std::to_string(label) + " outside [0, " + std::to_string(C) + ")");
  }
  const auto y = static_cast<std::size_t>(label);
  Margin m{logits[row * C + y], -std::numeric_limits<double>::infinity(), C};
  for (std::size_t c = 0; c < C; ++c) {
    if (c == y) continue;
    if (m.other_index == C || logits[row * C + c] > m.other) {
      m.other = logits[row * C + c];
      m.other_index = c;
    }
  }
  return m;
}

}  // namespace

CwResult cw_l2(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels, const CwParams& params) {
  model.check_input(x.shape());
  const std::size_t B = x.dim(0);
  if (labels.size() != B) throw std::invalid_argument("cw_l2 needs one label per instance");
  const std::size_t d = x.size() / std::max<std::size_t>(B, 1);
  const double kappa = params.confidence;
  constexpr double kLow = 1e-3, kHigh = 1e10;

  Shape row_shape = x.shape();
  CwResult res;
  res.adversarial = Tensor(x.shape());
  res.success.assign(B, 0);
  res.l2_squared.assign(B, 0.0);
  std::vector<double> c(B, std::clamp(params.initial_const, kLow, kHigh));
  std::vector<double> lo(B, 0.0), hi(B, kHigh);
  std::vector<double> best_l2(B, std::numeric_limits<double>::infinity());
  Tensor best(x.shape());
  Tensor last(x);

  AdamHyper hyper;
  hyper.learning_rate = params.learning_rate;
  const std::size_t check_every = std::max<std::size_t>(1, params.max_iterations / 10);

  for (std::size_t step = 0; step < params.binary_steps; ++step) {
    std::vector<float> w(B * d);
    for (std::size_t i = 0; i < B * d; ++i) {
      w[i] = static_cast<float>(std::atanh((2.0 * std::clamp(static_cast<double>(x[i]), 0.0, 1.0) - 1.0) * 0.999999));
    }
    std::vector<std::vector<float>> m1(B), m2(B);
    std::vector<std::uint64_t> steps(B, 0);
    std::vector<double> prev_loss(B, std::numeric_limits<double>::infinity());
    std::vector<std::uint8_t> succeeded(B, 0);
    std::vector<std::size_t> active(B);
    std::iota(active.begin(), active.end(), std::size_t{0});

    for (std::size_t it = 0; it < params.max_iterations && !active.empty(); ++it) {
      const std::size_t n = active.size();
      row_shape[0] = n;
      Tensor xa(row_shape);
      Tensor x0(row_shape);
      std::vector<double> dxa_dw(n * d);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = active[r];
        for (std::size_t k = 0; k < d; ++k) {
          const double t = std::tanh(static_cast<double>(w[i * d + k]));
          xa[r * d + k] = static_cast<float>((t + 1.0) / 2.0);
          x0[r * d + k] = std::clamp(x[i * d + k], 0.0f, 1.0f);
          dxa_dw[r * d + k] = (1.0 - t * t) / 2.0;
        }
      }
      ForwardPass pass(model, xa, GradMode::input);
      const Tensor& Z = pass.output();
      const std::size_t C = Z.dim(1);
      std::vector<float> upstream(n * C, 0.0f);
      std::vector<double> loss(n), l2(n);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = active[r];
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = static_cast<double>(xa[r * d + k]) - x0[r * d + k];
          s += diff * diff;
        }
        l2[r] = s;
        const Margin m = margin_of(Z, r, labels[i]);
        const double f = std::max(m.real - m.other, -kappa);
        loss[r] = s + c[i] * f;
        if (m.other > m.real + kappa) {
          succeeded[i] = 1;
          if (s < best_l2[i]) {
            best_l2[i] = s;
            std::copy_n(xa.data().begin() + r * d, d, best.data().begin() + i * d);
          }
        }
        if (m.real - m.other > -kappa) {
          upstream[r * C + static_cast<std::size_t>(labels[i])] = static_cast<float>(c[i]);
          upstream[r * C + m.other_index] = static_cast<float>(-c[i]);
        }
      }
      const Tensor gz = pass.backward_output(upstream).input;

      std::vector<std::size_t> still;
      still.reserve(n);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = active[r];
        std::vector<float> g(d);
        for (std::size_t k = 0; k < d; ++k) {
          const double dl = 2.0 * (static_cast<double>(xa[r * d + k]) - x0[r * d + k]) + gz[r * d + k];
          g[k] = static_cast<float>(dl * dxa_dw[r * d + k]);
        }
        adam_step(std::span<float>(w.data() + i * d, d), g, m1[i], m2[i], steps[i], hyper);
        bool keep = true;
        if (params.abort_early && it % check_every == 0) {
          if (loss[r] > prev_loss[i] * 0.9999) keep = false;
          prev_loss[i] = loss[r];
        }
        if (keep) still.push_back(i);
      }
      active = std::move(still);
    }

    for (std::size_t i = 0; i < B * d; ++i) last[i] = static_cast<float>((std::tanh(static_cast<double>(w[i])) + 1.0) / 2.0);
    for (std::size_t i = 0; i < B; ++i) {
      if (succeeded[i]) {
        hi[i] = std::min(hi[i], c[i]);
        c[i] = (lo[i] + hi[i]) / 2.0;
      } else {
        lo[i] = std::max(lo[i], c[i]);
        c[i] = hi[i] < kHigh ? (lo[i] + hi[i]) / 2.0 : c[i] * 2.0;
      }
      c[i] = std::clamp(c[i], kLow, kHigh);
    }
  }

  res.final_const = c;
  for (std::size_t i = 0; i < B; ++i) {
    const bool found = std::isfinite(best_l2[i]);
    res.success[i] = found;
    const Tensor& src = found ? best : last;
    std::copy_n(src.data().begin() + i * d, d, res.adversarial.data().begin() + i * d);
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = static_cast<double>(res.adversarial[i * d + k]) - std::clamp(x[i * d + k], 0.0f, 1.0f);
      s += diff * diff;
    }
    res.l2_squared[i] = s;
  }
  return res;
}

Tensor run_attack(const Graph& model, const Tensor& x, std::span<const std::int32_t> labels,
                  const AttackConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case AttackKind::fgsm: return postprocess(fgsm(model, x, labels, cfg.epsilon));
    case AttackKind::bim: return postprocess(bim(model, x, labels, cfg.alpha, cfg.iterations, cfg.epsilon));
    case AttackKind::cw: return postprocess(cw_l2(model, x, labels, cfg.cw).adversarial);
  }
  throw std::logic_error("unreachable attack kind");
}

double AdversarialSet::success_rate() const {
  if (fooled.empty()) return 0.0;
  const auto hits = std::count(fooled.begin(), fooled.end(), std::uint8_t{1});
  return static_cast<double>(hits) / static_cast<double>(fooled.size());
}

std::vector<std::size_t> correctly_classified(const Classifier& model, const Dataset& data) {
  const auto pred = predict_dataset(model, data);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == data.labels[i]) out.push_back(i);
  }
  return out;
}

AdversarialSet attack_population(const Classifier& model, const Dataset& test, const AttackConfig& cfg,
                                 const std::string& model_id, std::size_t jobs, std::size_t shard_size) {
  cfg.validate();
  const std::vector<std::size_t> population = correctly_classified(model, test);
  if (population.empty()) throw DataError("the attacked model classifies no test image correctly");

  AdversarialSet out;
  out.config = cfg;
  out.attacked_model = model_id;
  out.toolkit_version = kVersion;
  PairedSet& p = out.pairs;
  p.channels = test.channels;
  p.height = test.height;
  p.width = test.width;
  const std::size_t d = test.image_size();
  const std::size_t n = population.size();
  p.clean.resize(n * d);
  p.adversarial.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    p.source_ids.push_back(static_cast<std::uint32_t>(population[i]));
    p.labels.push_back(test.labels[population[i]]);
    const auto img = test.image(population[i]);
    std::copy(img.begin(), img.end(), p.clean.begin() + i * d);
  }
  out.fooled.assign(n, 0);

  shard_size = std::max<std::size_t>(1, shard_size);
  const std::size_t shards = (n + shard_size - 1) / shard_size;
  parallel_for(shards, jobs, [&](std::size_t s) {
    const std::size_t begin = s * shard_size, end = std::min(n, begin + shard_size);
    const std::size_t m = end - begin;
    Tensor x({m, p.channels, p.height, p.width},
             std::vector<float>(p.clean.begin() + begin * d, p.clean.begin() + end * d));
    std::span<const std::int32_t> y(p.labels.data() + begin, m);
    const Tensor adv = run_attack(model.graph(), x, y, cfg);
    std::copy(adv.data().begin(), adv.data().end(), p.adversarial.begin() + begin * d);
    const auto pred = model.predict(adv);
    for (std::size_t r = 0; r < m; ++r) out.fooled[begin + r] = pred[r] != y[r];
  });
  return out;
}

namespace {

TransferStats finish_stats(std::vector<double> acc) {
  TransferStats s;
  s.accuracies = std::move(acc);
  const double n = static_cast<double>(s.accuracies.size());
  double sum = 0.0;
  for (double a : s.accuracies) sum += a;
  s.mean = sum / n;
  double ss = 0.0;
  for (double a : s.accuracies) ss += (a - s.mean) * (a - s.mean);
  s.std = std::sqrt(ss / (n - 1.0));
  return s;
}

}  // namespace

TransferStats transfer_eval(std::span<const Classifier* const> models, const AdversarialSet& adv, std::size_t jobs) {
  if (models.size() < 2) throw std::invalid_argument("transfer_eval needs at least 2 models");
  const PairedSet& p = adv.pairs;
  Dataset perturbed;
  perturbed.channels = p.channels;
  perturbed.height = p.height;
  perturbed.width = p.width;
  perturbed.classes = models[0]->arch().classes;
  perturbed.pixels = p.adversarial;
  perturbed.labels = p.labels;
  std::vector<double> acc(models.size());
  parallel_for(models.size(), jobs, [&](std::size_t i) { acc[i] = accuracy(*models[i], perturbed); });
  return finish_stats(std::move(acc));
}

TransferStats transfer_eval(std::span<const Classifier> models, const AdversarialSet& adv, std::size_t jobs) {
  std::vector<const Classifier*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return transfer_eval(std::span<const Classifier* const>(ptrs), adv, jobs);
}

namespace {

constexpr std::string_view kAdvMagic = "MRADVS01";

std::vector<std::uint8_t> to_bytes(const std::vector<float>& v) {
  std::vector<std::uint8_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = quantize_byte(v[i]);
  return out;
}

std::vector<float> from_bytes(const std::vector<std::uint8_t>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = scale_byte(v[i]);
  return out;
}

}  // namespace

void save_adversarial_set(const AdversarialSet& set, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  const AttackConfig& c = set.config;
  binio::Header h;
  h["format_version"] = "1";
  h["toolkit_version"] = set.toolkit_version.empty() ? kVersion : set.toolkit_version;
  h["attack"] = attack_name(c.kind);
  h["epsilon"] = binio::fmt_double(c.epsilon);
  h["alpha"] = binio::fmt_double(c.alpha);
  h["iterations"] = std::to_string(c.iterations);
  h["cw.learning_rate"] = binio::fmt_double(c.cw.learning_rate);
  h["cw.binary_steps"] = std::to_string(c.cw.binary_steps);
  h["cw.max_iterations"] = std::to_string(c.cw.max_iterations);
  h["cw.confidence"] = binio::fmt_double(c.cw.confidence);
  h["cw.initial_const"] = binio::fmt_double(c.cw.initial_const);
  h["cw.abort_early"] = c.cw.abort_early ? "1" : "0";
  h["attacked_model"] = set.attacked_model;
  h["channels"] = std::to_string(set.pairs.channels);
  h["height"] = std::to_string(set.pairs.height);
  h["width"] = std::to_string(set.pairs.width);
  h["count"] = std::to_string(set.size());

  binio::put_bytes(out, kAdvMagic.data(), kAdvMagic.size());
  binio::put_header(out, h);
  for (std::size_t i = 0; i < set.size(); ++i) {
    binio::put_u32(out, set.pairs.source_ids[i]);
    binio::put_u32(out, static_cast<std::uint32_t>(set.pairs.labels[i]));
    binio::put_bytes(out, &set.fooled[i], 1);
  }
  const auto clean = to_bytes(set.pairs.clean);
  const auto adv = to_bytes(set.pairs.adversarial);
  binio::put_bytes(out, clean.data(), clean.size());
  binio::put_bytes(out, adv.data(), adv.size());
  if (!out) throw DataError("failed writing " + file.string());
}

AdversarialSet load_adversarial_set(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("missing adversarial set: " + file.string());
  binio::check_magic(in, kAdvMagic);
  const binio::Header h = binio::get_header(in);
  if (binio::require_key(h, "format_version") != "1") throw DataError("unsupported adversarial set version");
  AdversarialSet set;
  AttackConfig& c = set.config;
  c.kind = parse_attack(binio::require_key(h, "attack"));
  c.epsilon = binio::parse_double(binio::require_key(h, "epsilon"));
  c.alpha = binio::parse_double(binio::require_key(h, "alpha"));
  c.iterations = binio::parse_u64(binio::require_key(h, "iterations"));
  c.cw.learning_rate = binio::parse_double(binio::require_key(h, "cw.learning_rate"));
  c.cw.binary_steps = binio::parse_u64(binio::require_key(h, "cw.binary_steps"));
  c.cw.max_iterations = binio::parse_u64(binio::require_key(h, "cw.max_iterations"));
  c.cw.confidence = binio::parse_double(binio::require_key(h, "cw.confidence"));
  c.cw.initial_const = binio::parse_double(binio::require_key(h, "cw.initial_const"));
  c.cw.abort_early = binio::require_key(h, "cw.abort_early") == "1";
  set.attacked_model = binio::require_key(h, "attacked_model");
  set.toolkit_version = binio::require_key(h, "toolkit_version");
  PairedSet& p = set.pairs;
  p.channels = binio::parse_u64(binio::require_key(h, "channels"));
  p.height = binio::parse_u64(binio::require_key(h, "height"));
  p.width = binio::parse_u64(binio::require_key(h, "width"));
  const std::size_t n = binio::parse_u64(binio::require_key(h, "count"));
  set.fooled.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.source_ids.push_back(binio::get_u32(in));
    p.labels.push_back(static_cast<std::int32_t>(binio::get_u32(in)));
    binio::get_bytes(in, &set.fooled[i], 1);
  }
  std::vector<std::uint8_t> bytes(n * p.image_size());
  binio::get_bytes(in, bytes.data(), bytes.size());
  p.clean = from_bytes(bytes);
  binio::get_bytes(in, bytes.data(), bytes.size());
  p.adversarial = from_bytes(bytes);
  return set;
}

void write_attack_grid(const std::filesystem::path& file, const AdversarialSet& fgsm_set,
                       const AdversarialSet& bim_set, const AdversarialSet& cw_set, std::size_t classes,
                       std::size_t zoom) {
  const PairedSet& ref = fgsm_set.pairs;
  const std::size_t C = ref.channels, H = ref.height, W = ref.width;
  const std::size_t gap = 2;
  const std::array<const AdversarialSet*, 3> sets = {&fgsm_set, &bim_set, &cw_set};

  auto find_row = [](const AdversarialSet& s, std::uint32_t id) -> std::ptrdiff_t {
    auto it = std::find(s.pairs.source_ids.begin(), s.pairs.source_ids.end(), id);
    return it == s.pairs.source_ids.end() ? -1 : it - s.pairs.source_ids.begin();
  };

  const std::size_t cell_w = W * zoom, cell_h = H * zoom;
  const std::size_t img_w = 4 * cell_w + 5 * gap, img_h = classes * cell_h + (classes + 1) * gap;
  std::vector<std::uint8_t> rgb(img_w * img_h * 3, 255);
  auto blit = [&](const float* img, std::size_t row, std::size_t col) {
    const std::size_t oy = gap + row * (cell_h + gap), ox = gap + col * (cell_w + gap);
    for (std::size_t y = 0; y < cell_h; ++y) {
      for (std::size_t x = 0; x < cell_w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t src_c = C == 3 ? c : 0;
          const float v = img[(src_c * H + y / zoom) * W + x / zoom];
          rgb[((oy + y) * img_w + ox + x) * 3 + c] = quantize_byte(v);
        }
      }
    }
  };

  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (static_cast<std::size_t>(ref.labels[i]) != k) continue;
      std::array<std::ptrdiff_t, 3> rows{};
      bool all = true;
      for (std::size_t s = 0; s < 3; ++s) {
        rows[s] = find_row(*sets[s], ref.source_ids[i]);
        all = all && rows[s] >= 0;
      }
      if (!all) continue;
      const std::size_t d = ref.image_size();
      blit(ref.clean.data() + i * d, k, 0);
      for (std::size_t s = 0; s < 3; ++s) {
        blit(sets[s]->pairs.adversarial.data() + static_cast<std::size_t>(rows[s]) * d, k, s + 1);
      }
      break;
    }
  }

  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  out << "P6\n" << img_w << " " << img_h << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

}  // namespace multirep
