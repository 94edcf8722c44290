#include "multirep/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kernels.hpp"

namespace multirep::ops {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace

Var dense(Var x, Var w, Var b) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require(xv.rank() == 2 && wv.rank() == 2 && bv.rank() == 1,
          "dense expects x [B, in], w [in, out], b [out]; got " + shape_str(xv.shape()) + ", " +
              shape_str(wv.shape()) + ", " + shape_str(bv.shape()));
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
  require(wv.dim(0) == in && bv.dim(0) == out, "dense: x " + shape_str(xv.shape()) + " vs weight " +
                                                   shape_str(wv.shape()) + ", bias " + shape_str(bv.shape()));

  Tensor y({batch, out});
  for (std::size_t r = 0; r < batch; ++r) std::copy(bv.data().begin(), bv.data().end(), y.data().begin() + r * out);
  kernels::matmul_acc(xv.data().data(), wv.data().data(), y.data().data(), batch, in, out);

  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return tape.push(OpKind::dense, std::move(y), {xi, wi, bi}, [=](Tape& t, std::size_t self) {
    const float* dy = t.node_grad(self).data();
    const float* xd = t.node_value(xi).data().data();
    const float* wd = t.node_value(wi).data().data();
    if (t.node_needs_grad(wi)) {
      std::vector<float> xt(in * batch);
      kernels::transpose(xd, xt.data(), batch, in);
      kernels::matmul_acc(xt.data(), dy, t.grad_accumulator(wi).data(), in, batch, out);
    }
    if (t.node_needs_grad(bi)) {
      auto& db = t.grad_accumulator(bi);
      for (std::size_t o = 0; o < out; ++o) {
        double acc = 0.0;
        for (std::size_t r = 0; r < batch; ++r) acc += dy[r * out + o];
        db[o] += static_cast<float>(acc);
      }
    }
    if (t.node_needs_grad(xi)) {
      std::vector<float> wt(out * in);
      kernels::transpose(wd, wt.data(), in, out);
      kernels::matmul_acc(dy, wt.data(), t.grad_accumulator(xi).data(), batch, out, in);
    }
  });
}

Var conv2d(Var x, Var w, Var b, Conv2dSpec spec) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require(xv.rank() == 4 && wv.rank() == 4 && bv.rank() == 1,
          "conv2d expects x [B, C, H, W], w [O, C, kh, kw], b [O]; got " + shape_str(xv.shape()) + ", " +
              shape_str(wv.shape()) + ", " + shape_str(bv.shape()));
  require(spec.stride >= 1, "conv2d stride must be >= 1");
  const std::size_t batch = xv.dim(0), out_ch = wv.dim(0);
  kernels::ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), spec.stride, spec.padding, 0, 0};
  require(wv.dim(1) == g.channels && bv.dim(0) == out_ch,
          "conv2d channel mismatch: input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()) +
              ", bias " + shape_str(bv.shape()));
  require(g.height + 2 * g.padding >= g.kernel_h && g.width + 2 * g.padding >= g.kernel_w,
          "conv2d kernel larger than padded input " + shape_str(xv.shape()));
  g.out_h = (g.height + 2 * g.padding - g.kernel_h) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kernel_w) / g.stride + 1;

  const std::size_t patch = g.patch(), positions = g.positions();
  const std::size_t in_image = g.channels * g.height * g.width;
  const std::size_t out_image = out_ch * positions;
  Tensor y({batch, out_ch, g.out_h, g.out_w});

  const bool keep = tape.recording() && (tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b));
  std::vector<float> cols(keep ? batch * patch * positions : patch * positions);
  for (std::size_t n = 0; n < batch; ++n) {
    float* col = cols.data() + (keep ? n * patch * positions : 0);
    kernels::im2col(xv.data().data() + n * in_image, col, g);
    float* yn = y.data().data() + n * out_image;
    for (std::size_t o = 0; o < out_ch; ++o) std::fill(yn + o * positions, yn + (o + 1) * positions, bv[o]);
    kernels::matmul_acc(wv.data().data(), col, yn, out_ch, patch, positions);
  }
  if (!keep) cols.clear();

  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return tape.push(OpKind::conv2d, std::move(y), {xi, wi, bi},
                   [=, cols = std::move(cols)](Tape& t, std::size_t self) {
                     const float* dy = t.node_grad(self).data();
                     const float* wd = t.node_value(wi).data().data();
                     const bool gw = t.node_needs_grad(wi), gb = t.node_needs_grad(bi), gx = t.node_needs_grad(xi);
                     std::vector<float> colt(gw ? positions * patch : 0);
                     std::vector<float> wt(gx ? patch * out_ch : 0);
                     std::vector<float> dcol(gx ? patch * positions : 0);
                     if (gx) kernels::transpose(wd, wt.data(), out_ch, patch);
                     for (std::size_t n = 0; n < batch; ++n) {
                       const float* dyn = dy + n * out_image;
                       const float* col = cols.data() + n * patch * positions;
                       if (gw) {
                         kernels::transpose(col, colt.data(), patch, positions);
                         kernels::matmul_acc(dyn, colt.data(), t.grad_accumulator(wi).data(), out_ch, positions,
                                             patch);
                       }
                       if (gb) {
                         auto& db = t.grad_accumulator(bi);
                         for (std::size_t o = 0; o < out_ch; ++o) {
                           double acc = 0.0;
                           for (std::size_t p = 0; p < positions; ++p) acc += dyn[o * positions + p];
                           db[o] += static_cast<float>(acc);
                         }
                       }
                       if (gx) {
                         std::fill(dcol.begin(), dcol.end(), 0.0f);
                         kernels::matmul_acc(wt.data(), dyn, dcol.data(), patch, out_ch, positions);
                         kernels::col2im_acc(dcol.data(), t.grad_accumulator(xi).data() + n * in_image, g);
                       }
                     }
                   });
}

Var relu(Var x) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  const std::size_t xi = x.id;
  return tape.push(OpKind::relu, std::move(y), {xi}, [xi](Tape& t, std::size_t self) {
    auto dy = t.node_grad(self);
    const auto& out = t.node_value(self);
    auto& dx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (out[i] > 0.0f) dx[i] += dy[i];
    }
  });
}

Var global_avg_pool(Var x) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  require(xv.rank() == 4, "global_avg_pool expects [B, C, H, W], got " + shape_str(xv.shape()));
  const std::size_t batch = xv.dim(0), ch = xv.dim(1), area = xv.dim(2) * xv.dim(3);
  Tensor y({batch, ch});
  for (std::size_t i = 0; i < batch * ch; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < area; ++p) acc += xv[i * area + p];
    y[i] = static_cast<float>(acc / static_cast<double>(area));
  }
  const std::size_t xi = x.id;
  return tape.push(OpKind::global_avg_pool, std::move(y), {xi}, [=](Tape& t, std::size_t self) {
    auto dy = t.node_grad(self);
    auto& dx = t.grad_accumulator(xi);
    const float inv = 1.0f / static_cast<float>(area);
    for (std::size_t i = 0; i < batch * ch; ++i) {
      const float g = dy[i] * inv;
      for (std::size_t p = 0; p < area; ++p) dx[i * area + p] += g;
    }
  });
}

Var flatten(Var x) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "flatten needs a batch dimension");
  const std::size_t batch = xv.dim(0);
  const std::size_t width = batch == 0 ? 0 : xv.size() / batch;
  const std::size_t xi = x.id;
  return tape.push(OpKind::flatten, xv.reshaped({batch, width}), {xi}, [xi](Tape& t, std::size_t self) {
    auto dy = t.node_grad(self);
    auto& dx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

Var add(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), "add shape mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor y(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return tape.push(OpKind::add, std::move(y), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    auto dy = t.node_grad(self);
    for (std::size_t target : {ai, bi}) {
      if (!t.node_needs_grad(target)) continue;
      auto& d = t.grad_accumulator(target);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    }
  });
}

Var channel_shift(Var x, std::span<const float> offset) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  require(xv.rank() >= 2 && xv.dim(1) == offset.size(),
          "channel_shift: " + std::to_string(offset.size()) + " offsets for input " + shape_str(xv.shape()));
  const std::size_t batch = xv.dim(0), ch = xv.dim(1);
  const std::size_t inner = ch == 0 || batch == 0 ? 0 : xv.size() / (batch * ch);
  Tensor y(xv.shape());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t base = (n * ch + c) * inner;
      for (std::size_t p = 0; p < inner; ++p) y[base + p] = xv[base + p] - offset[c];
    }
  }
  const std::size_t xi = x.id;
  return tape.push(OpKind::channel_shift, std::move(y), {xi}, [xi](Tape& t, std::size_t self) {
    auto dy = t.node_grad(self);
    auto& dx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

Var scale(Var x, float factor) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * factor;
  const std::size_t xi = x.id;
  return tape.push(OpKind::scale, std::move(y), {xi}, [xi, factor](Tape& t, std::size_t self) {
    auto dy = t.node_grad(self);
    auto& dx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
  });
}

Var sum(Var x) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (float v : xv.data()) acc += v;
  const std::size_t xi = x.id;
  return tape.push(OpKind::sum, Tensor({1}, {static_cast<float>(acc)}), {xi}, [xi](Tape& t, std::size_t self) {
    const float g = t.node_grad(self)[0];
    for (float& d : t.grad_accumulator(xi)) d += g;
  });
}

Var weighted_sum(Var x, std::span<const float> weights) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  require(weights.size() == xv.size(), "weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                                           shape_str(xv.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]) * weights[i];
  std::vector<float> w(weights.begin(), weights.end());
  const std::size_t xi = x.id;
  return tape.push(OpKind::weighted_sum, Tensor({1}, {static_cast<float>(acc)}), {xi},
                   [xi, w = std::move(w)](Tape& t, std::size_t self) {
                     const float g = t.node_grad(self)[0];
                     auto& dx = t.grad_accumulator(xi);
                     for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * w[i];
                   });
}

Var sum_squares(Var x) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (float v : xv.data()) acc += static_cast<double>(v) * v;
  const std::size_t xi = x.id;
  return tape.push(OpKind::sum_squares, Tensor({1}, {static_cast<float>(acc)}), {xi},
                   [xi](Tape& t, std::size_t self) {
                     const float g = t.node_grad(self)[0];
                     const auto& xv2 = t.node_value(xi);
                     auto& dx = t.grad_accumulator(xi);
                     for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0f * g * xv2[i];
                   });
}

Var softmax_cross_entropy(Var logits, std::span<const std::int32_t> labels, Reduction reduction) {
  Tape& tape = *logits.tape;
  const Tensor& z = logits.value();
  require(z.rank() == 2, "softmax_cross_entropy expects logits [B, C], got " + shape_str(z.shape()));
  const std::size_t batch = z.dim(0), classes = z.dim(1);
  require(labels.size() == batch, "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                                      std::to_string(batch));
  for (std::int32_t y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  // Softmax probabilities are kept for the backward pass.
  std::vector<float> probs(batch * classes);
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const float* row = z.data().data() + r * classes;
    const double m = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(row[c]) - m);
    const double lse = m + std::log(denom);
    total += lse - row[labels[r]];
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = static_cast<float>(std::exp(static_cast<double>(row[c]) - lse));
    }
  }
  const double norm = (reduction == Reduction::mean && batch > 0) ? 1.0 / static_cast<double>(batch) : 1.0;
  std::vector<std::int32_t> ys(labels.begin(), labels.end());
  const std::size_t zi = logits.id;
  return tape.push(OpKind::softmax_cross_entropy, Tensor({1}, {static_cast<float>(total * norm)}), {zi},
                   [=, probs = std::move(probs), ys = std::move(ys)](Tape& t, std::size_t self) {
                     const float g = t.node_grad(self)[0] * static_cast<float>(norm);
                     auto& dz = t.grad_accumulator(zi);
                     for (std::size_t r = 0; r < batch; ++r) {
                       for (std::size_t c = 0; c < classes; ++c) {
                         const float onehot = static_cast<std::int32_t>(c) == ys[r] ? 1.0f : 0.0f;
                         dz[r * classes + c] += g * (probs[r * classes + c] - onehot);
                       }
                     }
                   });
}

Var sigmoid_cross_entropy(Var scores, std::span<const float> targets, Reduction reduction) {
  Tape& tape = *scores.tape;
  const Tensor& s = scores.value();
  require(s.size() == targets.size(), "sigmoid_cross_entropy: " + std::to_string(targets.size()) +
                                          " targets for scores " + shape_str(s.shape()));
  const std::size_t n = s.size();
  double total = 0.0;
  std::vector<float> sig(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = s[i];
    total += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
    sig[i] = static_cast<float>(v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
  }
  const double norm = (reduction == Reduction::mean && n > 0) ? 1.0 / static_cast<double>(n) : 1.0;
  std::vector<float> ts(targets.begin(), targets.end());
  const std::size_t si = scores.id;
  return tape.push(OpKind::sigmoid_cross_entropy, Tensor({1}, {static_cast<float>(total * norm)}), {si},
                   [=, sig = std::move(sig), ts = std::move(ts)](Tape& t, std::size_t self) {
                     const float g = t.node_grad(self)[0] * static_cast<float>(norm);
                     auto& ds = t.grad_accumulator(si);
                     for (std::size_t i = 0; i < n; ++i) ds[i] += g * (sig[i] - ts[i]);
                   });
}

}  // namespace multirep::ops
