#pragma once

// Minimal differentiable network kernel: dense and convolutional layers with
// exact reverse-mode gradients, Adam with a cosine step-size schedule,
// straight-through Gumbel-softmax, and a central finite-difference oracle.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "msa/core.hpp"

namespace msa::nn {

enum class Activation { Identity, ReLU, Sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::ReLU;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

inline double activate(Activation a, double v) {
  switch (a) {
    case Activation::Identity: return v;
    case Activation::ReLU: return v > 0.0 ? v : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-v));
  }
  return v;
}

// Derivative of the activation expressed through its output.
inline double activation_slope(Activation a, double out) {
  switch (a) {
    case Activation::Identity: return 1.0;
    case Activation::ReLU: return out > 0.0 ? 1.0 : 0.0;
    case Activation::Sigmoid: return out * (1.0 - out);
  }
  return 1.0;
}

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::Identity;
  std::vector<double> weight;  // out x in, row-major
  std::vector<double> bias;    // out

  DenseLayer() = default;
  DenseLayer(std::size_t in_dim, std::size_t out_dim, Activation a)
      : in(in_dim), out(out_dim), act(a), weight(in_dim * out_dim, 0.0), bias(out_dim, 0.0) {}

  std::size_t input_size() const { return in; }
  std::size_t output_size() const { return out; }
  std::size_t fan_in() const { return in; }
  std::size_t fan_out() const { return out; }
};

// 2-D convolution over a channels x height x width volume, zero padding.
struct ConvLayer {
  std::size_t in_c = 0, in_h = 0, in_w = 0;
  std::size_t out_c = 0, kernel = 3, stride = 1, pad = 0;
  std::size_t out_h = 0, out_w = 0;
  Activation act = Activation::ReLU;
  std::vector<double> weight;  // out_c x in_c x kernel x kernel
  std::vector<double> bias;    // out_c

  ConvLayer() = default;
  ConvLayer(Shape input, std::size_t channels, std::size_t k, std::size_t s, std::size_t p, Activation a)
      : in_c(input.c), in_h(input.h), in_w(input.w), out_c(channels), kernel(k), stride(s), pad(p), act(a) {
    if (k == 0 || s == 0 || channels == 0) throw std::invalid_argument("conv layer: zero kernel/stride/channels");
    if (input.h + 2 * p < k || input.w + 2 * p < k) throw std::invalid_argument("conv layer: kernel larger than input");
    out_h = (input.h + 2 * p - k) / s + 1;
    out_w = (input.w + 2 * p - k) / s + 1;
    weight.assign(out_c * in_c * k * k, 0.0);
    bias.assign(out_c, 0.0);
  }

  Shape input_shape() const { return {in_c, in_h, in_w}; }
  Shape output_shape() const { return {out_c, out_h, out_w}; }
  std::size_t input_size() const { return in_c * in_h * in_w; }
  std::size_t output_size() const { return out_c * out_h * out_w; }
  std::size_t fan_in() const { return in_c * kernel * kernel; }
  std::size_t fan_out() const { return out_c * kernel * kernel; }
};

using Layer = std::variant<DenseLayer, ConvLayer>;

inline std::size_t layer_input_size(const Layer& l) {
  return std::visit([](const auto& x) { return x.input_size(); }, l);
}
inline std::size_t layer_output_size(const Layer& l) {
  return std::visit([](const auto& x) { return x.output_size(); }, l);
}

class Network;

// Activation record of one forward pass. values[0] is the input and
// values[i + 1] the post-activation output of layer i.
struct Tape {
  const Network* owner = nullptr;
  std::uint64_t generation = 0;
  std::vector<std::vector<double>> values;

  std::span<const double> output() const { return values.back(); }
  std::span<const double> input() const { return values.front(); }
};

struct Gradients {
  std::vector<double> params;  // flat, in Network::flat_parameters order; empty if not requested
  std::vector<double> input;
};

namespace detail {

// Four-way split accumulation so the reduction vectorizes without
// reassociation flags; the summation order is fixed, hence deterministic.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void dense_forward(const DenseLayer& L, std::span<const double> in, std::vector<double>& out) {
  out.resize(L.out);
  for (std::size_t o = 0; o < L.out; ++o) {
    const double* row = L.weight.data() + o * L.in;
    out[o] = activate(L.act, L.bias[o] + dot(row, in.data(), L.in));
  }
}

// grad_pre: gradient wrt pre-activation. Accumulates parameter gradients
// into gparams (weight block then bias block) when non-null.
inline void dense_backward(const DenseLayer& L, std::span<const double> in, std::span<const double> grad_pre,
                           double* gparams, std::vector<double>* grad_in) {
  if (gparams) {
    double* gw = gparams;
    double* gb = gparams + L.weight.size();
    for (std::size_t o = 0; o < L.out; ++o) {
      const double g = grad_pre[o];
      if (g == 0.0) continue;
      double* row = gw + o * L.in;
      for (std::size_t i = 0; i < L.in; ++i) row[i] += g * in[i];
      gb[o] += g;
    }
  }
  if (grad_in) {
    grad_in->assign(L.in, 0.0);
    double* gi = grad_in->data();
    for (std::size_t o = 0; o < L.out; ++o) {
      const double g = grad_pre[o];
      if (g == 0.0) continue;
      const double* row = L.weight.data() + o * L.in;
      for (std::size_t i = 0; i < L.in; ++i) gi[i] += g * row[i];
    }
  }
}

// Gathers the receptive field of output pixel (oy, ox) in (ic, ky, kx) order,
// zero where the window leaves the input.
inline void gather_patch(const ConvLayer& L, const double* in, std::size_t oy, std::size_t ox, double* patch) {
  const std::size_t K = L.kernel;
  const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * L.stride) - static_cast<std::ptrdiff_t>(L.pad);
  const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * L.stride) - static_cast<std::ptrdiff_t>(L.pad);
  const auto H = static_cast<std::ptrdiff_t>(L.in_h), W = static_cast<std::ptrdiff_t>(L.in_w);
  for (std::size_t ic = 0; ic < L.in_c; ++ic) {
    const double* src = in + ic * L.in_h * L.in_w;
    for (std::size_t ky = 0; ky < K; ++ky) {
      const std::ptrdiff_t iy = y0 + static_cast<std::ptrdiff_t>(ky);
      for (std::size_t kx = 0; kx < K; ++kx) {
        const std::ptrdiff_t ix = x0 + static_cast<std::ptrdiff_t>(kx);
        *patch++ = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? src[iy * W + ix] : 0.0;
      }
    }
  }
}

template <class Fn>
inline void scatter_patch(const ConvLayer& L, std::size_t oy, std::size_t ox, Fn&& fn) {
  const std::size_t K = L.kernel;
  const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * L.stride) - static_cast<std::ptrdiff_t>(L.pad);
  const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * L.stride) - static_cast<std::ptrdiff_t>(L.pad);
  const auto H = static_cast<std::ptrdiff_t>(L.in_h), W = static_cast<std::ptrdiff_t>(L.in_w);
  std::size_t k = 0;
  for (std::size_t ic = 0; ic < L.in_c; ++ic)
    for (std::size_t ky = 0; ky < K; ++ky) {
      const std::ptrdiff_t iy = y0 + static_cast<std::ptrdiff_t>(ky);
      for (std::size_t kx = 0; kx < K; ++kx, ++k) {
        const std::ptrdiff_t ix = x0 + static_cast<std::ptrdiff_t>(kx);
        if (iy >= 0 && iy < H && ix >= 0 && ix < W) fn(k, ic * L.in_h * L.in_w + static_cast<std::size_t>(iy * W + ix));
      }
    }
}

inline void conv_forward(const ConvLayer& L, std::span<const double> in, std::vector<double>& out) {
  out.resize(L.output_size());
  const std::size_t plane_out = L.out_h * L.out_w;
  const std::size_t P = L.in_c * L.kernel * L.kernel;
  std::vector<double> patch(P);
  for (std::size_t oy = 0; oy < L.out_h; ++oy)
    for (std::size_t ox = 0; ox < L.out_w; ++ox) {
      gather_patch(L, in.data(), oy, ox, patch.data());
      const std::size_t pos = oy * L.out_w + ox;
      for (std::size_t oc = 0; oc < L.out_c; ++oc) {
        const double* w = L.weight.data() + oc * P;
        out[oc * plane_out + pos] = activate(L.act, L.bias[oc] + dot(w, patch.data(), P));
      }
    }
}

inline void conv_backward(const ConvLayer& L, std::span<const double> in, std::span<const double> grad_pre,
                          double* gparams, std::vector<double>* grad_in) {
  const std::size_t plane_out = L.out_h * L.out_w;
  const std::size_t P = L.in_c * L.kernel * L.kernel;
  if (grad_in) grad_in->assign(L.input_size(), 0.0);
  double* gw = gparams;
  double* gb = gparams ? gparams + L.weight.size() : nullptr;
  std::vector<double> patch(P), gpatch(P);
  for (std::size_t oy = 0; oy < L.out_h; ++oy)
    for (std::size_t ox = 0; ox < L.out_w; ++ox) {
      const std::size_t pos = oy * L.out_w + ox;
      if (gw) gather_patch(L, in.data(), oy, ox, patch.data());
      std::fill(gpatch.begin(), gpatch.end(), 0.0);
      bool any = false;
      for (std::size_t oc = 0; oc < L.out_c; ++oc) {
        const double g = grad_pre[oc * plane_out + pos];
        if (g == 0.0) continue;
        any = true;
        const double* w = L.weight.data() + oc * P;
        if (gw) {
          double* row = gw + oc * P;
          for (std::size_t k = 0; k < P; ++k) row[k] += g * patch[k];
          gb[oc] += g;
        }
        for (std::size_t k = 0; k < P; ++k) gpatch[k] += g * w[k];
      }
      if (grad_in && any) {
        double* dst = grad_in->data();
        scatter_patch(L, oy, ox, [&](std::size_t k, std::size_t idx) { dst[idx] += gpatch[k]; });
      }
    }
}

}  // namespace detail

// A feed-forward chain of dense/conv layers. Immutable during forward and
// backward; every mutable access to the parameters bumps a generation counter
// so that tapes recorded before the mutation are rejected.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw std::invalid_argument("network needs at least one layer");
    for (std::size_t i = 1; i < layers_.size(); ++i)
      if (layer_output_size(layers_[i - 1]) != layer_input_size(layers_[i]))
        throw std::invalid_argument("layer " + std::to_string(i) + " input size " +
                                    std::to_string(layer_input_size(layers_[i])) + " does not chain with previous output " +
                                    std::to_string(layer_output_size(layers_[i - 1])));
  }
  Network(const Network& o) : layers_(o.layers_), generation_(o.generation_.load()) {}
  Network& operator=(const Network& o) {
    layers_ = o.layers_;
    generation_ = o.generation_.load() + 1;
    return *this;
  }
  Network(Network&& o) noexcept : layers_(std::move(o.layers_)), generation_(o.generation_.load()) {}
  Network& operator=(Network&& o) noexcept {
    layers_ = std::move(o.layers_);
    generation_ = o.generation_.load() + 1;
    return *this;
  }

  bool empty() const { return layers_.empty(); }
  std::size_t input_dim() const { return layer_input_size(layers_.front()); }
  std::size_t output_dim() const { return layer_output_size(layers_.back()); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::uint64_t generation() const { return generation_.load(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      std::visit([&](const auto& x) { n += x.weight.size() + x.bias.size(); }, l);
    return n;
  }

  // Weight block then bias block per layer.
  std::vector<std::span<double>> parameter_blocks() {
    ++generation_;
    std::vector<std::span<double>> blocks;
    for (auto& l : layers_)
      std::visit(
          [&](auto& x) {
            blocks.emplace_back(x.weight);
            blocks.emplace_back(x.bias);
          },
          l);
    return blocks;
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& l : layers_)
      std::visit(
          [&](const auto& x) {
            flat.insert(flat.end(), x.weight.begin(), x.weight.end());
            flat.insert(flat.end(), x.bias.begin(), x.bias.end());
          },
          l);
    return flat;
  }

  void set_flat_parameters(std::span<const double> flat) {
    if (flat.size() != parameter_count())
      throw ShapeMismatch("parameter vector length " + std::to_string(flat.size()) + " != " +
                          std::to_string(parameter_count()));
    std::size_t k = 0;
    for (auto block : parameter_blocks())
      for (double& v : block) v = flat[k++];
  }

  Tape forward(std::span<const double> input) const {
    Tape tape;
    forward(input, tape);
    return tape;
  }

  void forward(std::span<const double> input, Tape& tape) const {
    if (layers_.empty()) throw std::logic_error("forward on an empty network");
    if (input.size() != input_dim())
      throw ShapeMismatch("network input length " + std::to_string(input.size()) + " != " + std::to_string(input_dim()));
    tape.owner = this;
    tape.generation = generation_.load();
    tape.values.resize(layers_.size() + 1);
    tape.values[0].assign(input.begin(), input.end());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      std::visit(
          [&](const auto& L) {
            if constexpr (std::is_same_v<std::decay_t<decltype(L)>, DenseLayer>)
              detail::dense_forward(L, tape.values[i], tape.values[i + 1]);
            else
              detail::conv_forward(L, tape.values[i], tape.values[i + 1]);
          },
          layers_[i]);
    }
  }

  Gradients backward(const Tape& tape, std::span<const double> output_grad, bool want_params = true,
                     bool want_input = true) const {
    if (tape.owner != this || tape.generation != generation_.load())
      throw std::logic_error("stale tape: network changed since the forward pass");
    if (output_grad.size() != output_dim())
      throw ShapeMismatch("output gradient length " + std::to_string(output_grad.size()) + " != " +
                          std::to_string(output_dim()));
    Gradients g;
    if (want_params) g.params.assign(parameter_count(), 0.0);
    std::vector<std::size_t> offsets(layers_.size());
    {
      std::size_t off = 0;
      for (std::size_t i = 0; i < layers_.size(); ++i) {
        offsets[i] = off;
        std::visit([&](const auto& x) { off += x.weight.size() + x.bias.size(); }, layers_[i]);
      }
    }
    std::vector<double> grad(output_grad.begin(), output_grad.end());
    std::vector<double> grad_in;
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const bool need_in = li > 0 || want_input;
      std::visit(
          [&](const auto& L) {
            const auto& out = tape.values[li + 1];
            for (std::size_t k = 0; k < grad.size(); ++k) grad[k] *= activation_slope(L.act, out[k]);
            double* gp = want_params ? g.params.data() + offsets[li] : nullptr;
            if constexpr (std::is_same_v<std::decay_t<decltype(L)>, DenseLayer>)
              detail::dense_backward(L, tape.values[li], grad, gp, need_in ? &grad_in : nullptr);
            else
              detail::conv_backward(L, tape.values[li], grad, gp, need_in ? &grad_in : nullptr);
          },
          layers_[li]);
      if (!need_in) break;
      grad.swap(grad_in);
    }
    if (want_input) g.input = std::move(grad);
    return g;
  }

  // Uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  void init_glorot(Rng& rng) {
    ++generation_;
    for (auto& l : layers_)
      std::visit(
          [&](auto& x) {
            const double limit = std::sqrt(6.0 / static_cast<double>(x.fan_in() + x.fan_out()));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (double& v : x.weight) v = dist(rng);
            std::fill(x.bias.begin(), x.bias.end(), 0.0);
          },
          l);
  }

 private:
  std::vector<Layer> layers_;
  std::atomic<std::uint64_t> generation_{0};
};

// in -> hidden... -> out, hidden layers share one activation.
inline Network make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                        Activation hidden_act = Activation::ReLU, Activation out_act = Activation::Identity) {
  std::vector<Layer> layers;
  std::size_t prev = in;
  for (std::size_t h : hidden) {
    layers.emplace_back(DenseLayer(prev, h, hidden_act));
    prev = h;
  }
  layers.emplace_back(DenseLayer(prev, out, out_act));
  return Network(std::move(layers));
}

// ---------------------------------------------------------------------------
// Optimizer

struct CosineSchedule {
  double base_lr = 0.03;
  std::size_t total_steps = 1;

  // base_lr * 0.5 * (1 + cos(pi * k / total_steps)), clamped at the endpoint.
  double lr(std::size_t k) const {
    if (total_steps == 0) return base_lr;
    const double frac = std::min(1.0, static_cast<double>(k) / static_cast<double>(total_steps));
    return std::max(0.0, base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
  }
};

struct OptimizerState {
  CosineSchedule schedule;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  OptimizerState() = default;
  OptimizerState(CosineSchedule s, std::size_t n_params) : schedule(s), m(n_params, 0.0), v(n_params, 0.0) {}

  double learning_rate() const { return schedule.lr(step); }
};

// One Adam update (gradient descent direction) with the scheduled step size.
inline void adam_step(OptimizerState& st, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size() || st.m.size() != params.size())
    throw ShapeMismatch("adam_step: parameter/gradient/state length mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i));
  const double lr = st.schedule.lr(st.step);
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
  }
}

// ---------------------------------------------------------------------------
// Gumbel-softmax

struct GumbelSample {
  std::vector<double> hard;   // one-hot
  std::vector<double> soft;   // softmax((logits + noise) / temperature)
  std::vector<double> noise;  // the Gumbel draws, kept for common random numbers
  double temperature = 1.0;
  std::size_t index = 0;
};

inline GumbelSample gumbel_softmax_from_noise(std::span<const double> logits, std::span<const double> noise,
                                              double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("gumbel softmax: temperature must be positive");
  if (logits.empty() || logits.size() != noise.size()) throw ShapeMismatch("gumbel softmax: logits/noise length");
  GumbelSample s;
  s.temperature = temperature;
  s.noise.assign(noise.begin(), noise.end());
  std::vector<double> z(logits.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(logits[i])) throw NumericError("gumbel softmax: non-finite logit");
    z[i] = (logits[i] + noise[i]) / temperature;
  }
  s.soft = softmax(z);
  s.index = argmax(z);
  s.hard.assign(z.size(), 0.0);
  s.hard[s.index] = 1.0;
  return s;
}

inline std::vector<double> draw_gumbel_noise(std::size_t m, Rng& rng) {
  std::vector<double> g(m);
  for (double& v : g) v = -std::log(-std::log(uniform_open(rng)));
  return g;
}

inline GumbelSample gumbel_softmax_sample(std::span<const double> logits, double temperature, Rng& rng) {
  const auto noise = draw_gumbel_noise(logits.size(), rng);
  return gumbel_softmax_from_noise(logits, noise, temperature);
}

// Straight-through backward: the hard sample's gradient is routed through
// the soft relaxation. Returns d/d(logits).
inline std::vector<double> gumbel_softmax_backward(const GumbelSample& s, std::span<const double> grad_sample) {
  if (grad_sample.size() != s.soft.size()) throw ShapeMismatch("gumbel backward: gradient length");
  double dot = 0.0;
  for (std::size_t i = 0; i < s.soft.size(); ++i) dot += s.soft[i] * grad_sample[i];
  std::vector<double> g(s.soft.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = s.soft[i] * (grad_sample[i] - dot) / s.temperature;
  return g;
}

// ---------------------------------------------------------------------------

inline std::vector<double> finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                                      std::span<const double> point, double h) {
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// max_i |a_i - b_i| / max(max_i |b_i|, floor): a norm-relative error that stays
// meaningful when individual components are near zero.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12) {
  double num = 0.0, den = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / den;
}

}  // namespace msa::nn
