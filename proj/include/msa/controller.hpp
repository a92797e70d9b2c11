#pragma once

// Meta-learned proposal controllers: time encoding, success-rate EMAs, the
// update-size controller and the shared-weight color controller with a
// minimum-probability floor.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "msa/core.hpp"
#include "msa/tinynn.hpp"

namespace msa {

struct ControllerHyper {
  double gamma = 0.9;
  double r0 = 0.25;
  double p_min = 0.05;
  double temperature = 1.0;
  std::uint64_t time_budget = 5000;  // T used by the time encoding, independent of the run budget
};

// 2 inputs -> 10 -> 10 -> 1, ReLU hidden layers.
inline nn::Network make_controller_mlp() { return nn::make_mlp(2, {10, 10}, 1); }

struct ControllerParams {
  nn::Network size_net = make_controller_mlp();
  nn::Network color_net = make_controller_mlp();
  ControllerHyper hyper;

  static ControllerParams initialized(Rng& rng, ControllerHyper h = {}) {
    ControllerParams p;
    p.hyper = h;
    p.size_net.init_glorot(rng);
    p.color_net.init_glorot(rng);
    return p;
  }
};

inline double encode_time(std::uint64_t t, std::uint64_t budget) {
  if (budget == 0) throw std::invalid_argument("encode_time: budget must be positive");
  return std::log2(static_cast<double>(t) / static_cast<double>(budget) + 1.0);
}

// H(new - old) with H(0) = 0.
inline int success_indicator(double loss_new, double loss_old) { return loss_new > loss_old ? 1 : 0; }

inline double update_success_ema(double R, int r, double gamma, double r0) {
  return gamma * R + (1.0 - gamma) * static_cast<double>(r) / r0;
}

// ---------------------------------------------------------------------------
// Size controller

struct SizeOutput {
  double s = 1.0;      // sigma(s') * (s_max - 1) + 1
  double s_raw = 0.0;  // s'
  double s_max = 1.0;
  nn::Tape tape;
};

inline SizeOutput size_controller(const nn::Network& net, double t_enc, double R, std::size_t s_max) {
  if (s_max < 1) throw std::invalid_argument("size_controller: s_max must be >= 1");
  const double in[2] = {t_enc, R};
  SizeOutput out;
  out.tape = net.forward(in);
  out.s_raw = out.tape.output()[0];
  out.s_max = static_cast<double>(s_max);
  const double sig = 1.0 / (1.0 + std::exp(-out.s_raw));
  out.s = std::clamp(sig * (out.s_max - 1.0) + 1.0, 1.0, out.s_max);
  return out;
}

// Meta-test size: nearest integer in [1, s_max].
inline std::size_t round_size(double s, std::size_t s_max) {
  return static_cast<std::size_t>(std::clamp(std::round(s), 1.0, static_cast<double>(s_max)));
}

// Parameter gradient of grad_s * s.
inline std::vector<double> size_controller_backward(const nn::Network& net, const SizeOutput& out, double grad_s) {
  const double sig = 1.0 / (1.0 + std::exp(-out.s_raw));
  const double g[1] = {grad_s * sig * (1.0 - sig) * (out.s_max - 1.0)};
  return net.backward(out.tape, g, true, false).params;
}

// ---------------------------------------------------------------------------
// Color controller

struct ColorLogits {
  std::vector<double> logits;
  std::vector<nn::Tape> tapes;
};

// The shared MLP evaluated once per color on (t_enc, R_i).
inline ColorLogits color_logits(const nn::Network& net, double t_enc, std::span<const double> R_colors) {
  ColorLogits out;
  out.logits.resize(R_colors.size());
  out.tapes.resize(R_colors.size());
  for (std::size_t i = 0; i < R_colors.size(); ++i) {
    const double in[2] = {t_enc, R_colors[i]};
    net.forward(in, out.tapes[i]);
    out.logits[i] = out.tapes[i].output()[0];
  }
  return out;
}

// p_min + (1 - m p_min) softmax(logits)
inline std::vector<double> mixed_probabilities(std::span<const double> logits, double p_min) {
  const double m = static_cast<double>(logits.size());
  if (!(p_min >= 0.0) || m * p_min >= 1.0) throw std::invalid_argument("mixed_probabilities: need m * p_min < 1");
  auto p = softmax(logits);
  for (double& v : p) v = p_min + (1.0 - m * p_min) * v;
  return p;
}

struct ColorDraw {
  std::size_t index = 0;
  bool floor_branch = false;          // drawn from the uniform floor, no gradient
  std::optional<nn::GumbelSample> gumbel;
};

// Meta-test: inverse-CDF draw from the mixed categorical.
inline ColorDraw sample_color_test(std::span<const double> logits, double p_min, Rng& rng) {
  const auto p = mixed_probabilities(logits, p_min);
  const double u = uniform_open(rng);
  double acc = 0.0;
  ColorDraw d;
  d.index = p.size() - 1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) {
      d.index = i;
      break;
    }
  }
  return d;
}

// Meta-train: with probability m * p_min take a uniform color (constant in
// the weights), otherwise a straight-through Gumbel-softmax draw.
inline ColorDraw sample_color_train(std::span<const double> logits, double p_min, double temperature, Rng& rng) {
  const std::size_t m = logits.size();
  if (static_cast<double>(m) * p_min >= 1.0) throw std::invalid_argument("sample_color_train: need m * p_min < 1");
  ColorDraw d;
  const double u = uniform_open(rng);
  if (u < static_cast<double>(m) * p_min) {
    d.floor_branch = true;
    d.index = uniform_index(rng, m);
    return d;
  }
  d.gumbel = nn::gumbel_softmax_sample(logits, temperature, rng);
  d.index = d.gumbel->index;
  return d;
}

inline std::vector<double> color_controller_backward(const nn::Network& net, const ColorLogits& cl,
                                                     std::span<const double> grad_logits) {
  std::vector<double> g(net.parameter_count(), 0.0);
  for (std::size_t i = 0; i < cl.tapes.size(); ++i) {
    if (grad_logits[i] == 0.0) continue;
    const double go[1] = {grad_logits[i]};
    const auto gi = net.backward(cl.tapes[i], go, true, false).params;
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += gi[k];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Per-attack EMA state

struct ControllerState {
  double R = 1.0;
  std::vector<double> R_colors;

  explicit ControllerState(std::size_t colors = 8) : R_colors(colors, 1.0) {}
};

// Only entry i moves.
inline void update_color_ema(ControllerState& st, std::size_t i, int r, double gamma, double r0) {
  if (i >= st.R_colors.size()) throw std::out_of_range("update_color_ema: color index out of range");
  st.R_colors[i] = update_success_ema(st.R_colors[i], r, gamma, r0);
}

inline void record_outcome(ControllerState& st, std::size_t color, int r, const ControllerHyper& h) {
  st.R = update_success_ema(st.R, r, h.gamma, h.r0);
  update_color_ema(st, color, r, h.gamma, h.r0);
}

// Mean continuous size per step when successes arrive as Bernoulli(p), no
// model queries involved.
inline std::vector<double> probe_controller(const ControllerParams& params, double p, std::uint64_t steps,
                                            std::size_t runs, std::size_t s_max, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("probe_controller: p must lie in [0, 1]");
  if (runs == 0) throw std::invalid_argument("probe_controller: need at least one run");
  std::vector<double> mean(steps, 0.0);
  std::bernoulli_distribution success(p);
  for (std::size_t run = 0; run < runs; ++run) {
    double R = 1.0;
    for (std::uint64_t t = 0; t < steps; ++t) {
      const auto out = size_controller(params.size_net, encode_time(t, params.hyper.time_budget), R, s_max);
      mean[t] += out.s;
      R = update_success_ema(R, success(rng) ? 1 : 0, params.hyper.gamma, params.hyper.r0);
    }
  }
  for (double& v : mean) v /= static_cast<double>(runs);
  return mean;
}

}  // namespace msa
