#pragma once

// End-to-end meta-training of the size and color controllers against
// white-box source classifiers. Every proposal contributes the gradient of
// its immediate positive-part cross-entropy improvement; the carried
// perturbation and the success EMAs are treated as constants.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "msa/attack.hpp"
#include "msa/classifier.hpp"
#include "msa/controller.hpp"
#include "msa/proposal.hpp"

namespace msa {

struct MetaTrainConfig {
  std::vector<const Classifier*> sources;
  const Dataset* data = nullptr;
  std::size_t budget = 1000;
  std::size_t epochs = 10;
  std::size_t batch_size = 100;
  double lr = 0.03;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  ThreatModel threat{Norm::Linf, 8.0 / 255.0};
  bool train_size = true;
  bool train_color = true;
};

// Frozen randomness of one proposal.
struct StepDraws {
  Position pos;   // linf square / l2 receiving window
  Position pos2;  // l2 giving window
  bool floor_branch = false;
  std::size_t floor_index = 0;
  std::vector<double> gumbel_noise;
};

enum class ColorPath { StraightThrough, Soft };

struct StepContext {
  const Classifier* f = nullptr;
  const ImageTensor* x = nullptr;
  std::size_t label = 0;
  ThreatModel threat;
};

struct StepOutcome {
  Perturbation proposal;
  double size = 1.0;
  std::size_t color = 0;
  double proposal_loss = 0.0;
  double improvement = 0.0;  // (h(proposal) - h_max)_+
  std::size_t predicted = 0;
  std::vector<double> grad_size;   // d improvement / d omega_s
  std::vector<double> grad_color;  // d improvement / d omega_c
  bool gradient_finite = true;
};

inline const LossSpec kMetaLoss = LossSpec::untargeted(LossKind::CrossEntropy);

// (h(f(a(x, proposal))) - h(f(a(x, xi_t))))_+ with h the cross-entropy.
inline double meta_loss_step(const Classifier& f, const ImageTensor& x, std::size_t y, const Perturbation& xi_t,
                             const Perturbation& proposal) {
  const double incumbent = classification_loss(f.predict(apply(x, xi_t)), y, kMetaLoss);
  const double candidate = classification_loss(f.predict(apply(x, proposal)), y, kMetaLoss);
  if (!std::isfinite(incumbent) || !std::isfinite(candidate)) throw NumericError("meta_loss_step: non-finite loss");
  return std::max(candidate - incumbent, 0.0);
}

// One relaxed proposal and its greedy meta-gradient. With rng set, fresh
// draws are sampled into *draws; otherwise *draws is replayed.
inline StepOutcome greedy_step(const StepContext& ctx, const Perturbation& xi_t, double best_loss,
                               const ControllerState& state, std::uint64_t t, const ControllerParams& params,
                               StepDraws* draws, Rng* rng, ColorPath path = ColorPath::StraightThrough,
                               bool want_grad = true) {
  const Shape shape = ctx.x->shape();
  const std::size_t m = color_count(shape);
  const std::size_t s_max = std::min(shape.h, shape.w);
  const bool linf = ctx.threat.norm == Norm::Linf;
  const double eps = ctx.threat.epsilon;
  const double t_enc = encode_time(t, params.hyper.time_budget);

  const auto size_out = size_controller(params.size_net, t_enc, state.R, s_max);
  const double s = size_out.s;
  const std::size_t inner = odd_floor(s);
  const auto cl = color_logits(params.color_net, t_enc, state.R_colors);

  if (rng) {
    draws->pos = sample_position(inner, shape.h, shape.w, *rng);
    if (!linf) draws->pos2 = sample_position(inner, shape.h, shape.w, *rng);
    const double u = uniform_open(*rng);
    draws->floor_branch = u < static_cast<double>(m) * params.hyper.p_min;
    if (draws->floor_branch) {
      draws->floor_index = uniform_index(*rng, m);
      draws->gumbel_noise.clear();
    } else {
      draws->gumbel_noise = nn::draw_gumbel_noise(m, *rng);
    }
  }

  StepOutcome out;
  out.size = s;
  std::optional<nn::GumbelSample> gs;
  if (draws->floor_branch) {
    out.color = draws->floor_index;
  } else {
    gs = nn::gumbel_softmax_from_noise(cl.logits, draws->gumbel_noise, params.hyper.temperature);
    out.color = gs->index;
  }

  const auto colors = corner_colors(shape.c, eps);
  Tensor d_size;
  std::vector<double> coverage;
  if (linf) {
    std::vector<double> color = colors[out.color];
    if (gs && path == ColorPath::Soft) {
      std::fill(color.begin(), color.end(), 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t ch = 0; ch < shape.c; ++ch) color[ch] += gs->soft[i] * colors[i][ch];
    }
    auto rs = make_relaxed_square_delta(s, draws->pos, color, xi_t);
    out.proposal = std::move(rs.proposal);
    d_size = std::move(rs.d_size);
    coverage = std::move(rs.coverage);
  } else {
    L2Windows win{inner, draws->pos, draws->pos2, sign_pattern(out.color, shape.c)};
    auto ru = make_relaxed_l2_update(s, xi_t, win, eps);
    out.proposal = std::move(ru.proposal);
    d_size = std::move(ru.d_size);
  }

  const auto eval = ctx.f->evaluate(apply(*ctx.x, out.proposal));
  out.proposal_loss = classification_loss(eval.probs, ctx.label, kMetaLoss);
  out.predicted = argmax(eval.probs);
  if (!std::isfinite(out.proposal_loss)) throw NumericError("greedy_step: non-finite classifier output");
  out.improvement = std::max(out.proposal_loss - best_loss, 0.0);

  out.grad_size.assign(params.size_net.parameter_count(), 0.0);
  out.grad_color.assign(params.color_net.parameter_count(), 0.0);
  if (!want_grad || out.improvement <= 0.0) return out;

  // The [0,1] clip inside apply() is passed straight through.
  const Tensor grad = ctx.f->gradient_from(eval, ctx.label, kMetaLoss);
  double dl_ds = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) dl_ds += grad[i] * d_size[i];
  out.grad_size = size_controller_backward(params.size_net, size_out, dl_ds);

  if (linf && gs) {
    std::vector<double> dl_dcolor(shape.c, 0.0);
    for (std::size_t ch = 0; ch < shape.c; ++ch)
      for (std::size_t p = 0; p < shape.plane(); ++p) dl_dcolor[ch] += coverage[p] * grad[ch * shape.plane() + p];
    std::vector<double> dl_dsample(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t ch = 0; ch < shape.c; ++ch) dl_dsample[i] += dl_dcolor[ch] * colors[i][ch];
    const auto dlogits = nn::gumbel_softmax_backward(*gs, dl_dsample);
    out.grad_color = color_controller_backward(params.color_net, cl, dlogits);
  }
  for (double v : out.grad_size) out.gradient_finite &= std::isfinite(v);
  for (double v : out.grad_color) out.gradient_finite &= std::isfinite(v);
  return out;
}

struct ImageMetaResult {
  std::vector<double> grad_size;   // sum over steps of d improvement / d omega_s
  std::vector<double> grad_color;
  double improvement_sum = 0.0;
  std::size_t contributing_steps = 0;
  std::size_t dropped_steps = 0;
  bool initially_correct = false;
  bool broken = false;
  std::vector<Perturbation> iterates;  // xi^t per query, only when requested
  std::vector<double> best_losses;
};

// Full-budget relaxed attack on one image (no early stop) accumulating the
// greedy meta-gradient.
inline ImageMetaResult meta_attack_image(const Classifier& f, const ImageTensor& x, std::size_t y,
                                         const ControllerParams& params, const ThreatModel& threat, std::size_t budget,
                                         std::uint64_t seed, bool keep_iterates = false) {
  if (budget == 0) throw std::invalid_argument("meta attack budget must be positive");
  Rng rng = make_rng(seed);
  const Shape shape = x.shape();
  ImageMetaResult res;
  res.grad_size.assign(params.size_net.parameter_count(), 0.0);
  res.grad_color.assign(params.color_net.parameter_count(), 0.0);

  Perturbation xi = threat.norm == Norm::Linf ? stripe_init(shape, threat.epsilon, rng)
                                              : l2_init(shape, threat.epsilon, rng);
  const auto probs0 = f.predict(apply(x, xi));
  double best = classification_loss(probs0, y, kMetaLoss);
  res.initially_correct = argmax(f.predict(x)) == y;
  res.broken = argmax(probs0) != y;
  if (keep_iterates) {
    res.iterates.push_back(xi);
    res.best_losses.push_back(best);
  }

  StepContext ctx{&f, &x, y, threat};
  ControllerState state(color_count(shape));
  StepDraws draws;
  for (std::uint64_t t = 0; t + 1 < budget; ++t) {
    auto step = greedy_step(ctx, xi, best, state, t, params, &draws, &rng);
    if (step.improvement > 0.0) {
      if (step.gradient_finite) {
        for (std::size_t k = 0; k < step.grad_size.size(); ++k) res.grad_size[k] += step.grad_size[k];
        for (std::size_t k = 0; k < step.grad_color.size(); ++k) res.grad_color[k] += step.grad_color[k];
        ++res.contributing_steps;
      } else {
        ++res.dropped_steps;
      }
      res.improvement_sum += step.improvement;
    }
    const int r = success_indicator(step.proposal_loss, best);
    if (r) {
      xi = std::move(step.proposal);
      best = step.proposal_loss;
      res.broken = res.broken || step.predicted != y;
    }
    record_outcome(state, step.color, r, params.hyper);
    if (keep_iterates) {
      res.iterates.push_back(xi);
      res.best_losses.push_back(best);
    }
  }
  return res;
}

struct MetaBatchGrad {
  std::vector<double> grad_size;   // sum over images and sources, scaled by 1/T
  std::vector<double> grad_color;
  double meta_loss_sum = 0.0;      // sum over images of -(1/T) sum_t improvement
  std::size_t images = 0;
  std::size_t contributions = 0;
  std::size_t dropped = 0;
  std::size_t robust = 0;          // initially correct and never broken, per (image, source)
};

inline std::uint64_t meta_image_seed(std::uint64_t seed, std::size_t epoch, std::size_t image) {
  return image_seed(mix_seed(seed + 0x5151ULL * (epoch + 1)), image);
}

// Gradient of the batch objective over the given dataset indices. Reduction
// runs in ascending index order, so the result does not depend on the order
// of `indices` or on the thread count.
inline MetaBatchGrad meta_batch_gradient(const MetaTrainConfig& cfg, const ControllerParams& params,
                                         std::vector<std::size_t> indices, std::size_t epoch) {
  std::sort(indices.begin(), indices.end());
  const std::size_t S = cfg.sources.size();
  std::vector<ImageMetaResult> parts(indices.size() * S);
  parallel_for(parts.size(), cfg.threads, [&](std::size_t k) {
    const std::size_t idx = indices[k / S];
    const Classifier& f = *cfg.sources[k % S];
    parts[k] = meta_attack_image(f, cfg.data->image(idx), cfg.data->label(idx), params, cfg.threat, cfg.budget,
                                 meta_image_seed(cfg.seed, epoch, idx * S + k % S));
  });
  MetaBatchGrad g;
  g.grad_size.assign(params.size_net.parameter_count(), 0.0);
  g.grad_color.assign(params.color_net.parameter_count(), 0.0);
  const double inv_T = 1.0 / static_cast<double>(cfg.budget);
  for (const auto& p : parts) {
    for (std::size_t k = 0; k < g.grad_size.size(); ++k) g.grad_size[k] += p.grad_size[k] * inv_T;
    for (std::size_t k = 0; k < g.grad_color.size(); ++k) g.grad_color[k] += p.grad_color[k] * inv_T;
    g.meta_loss_sum += -p.improvement_sum * inv_T;
    g.contributions += p.contributing_steps;
    g.dropped += p.dropped_steps;
    g.robust += p.initially_correct && !p.broken;
  }
  g.images = indices.size();
  return g;
}

struct MetaEpochLog {
  std::size_t epoch = 0;
  double meta_loss = 0.0;             // mean per (image, source)
  double train_robust_accuracy = 0.0;
  std::size_t dropped_steps = 0;
};

struct MetaTrainResult {
  ControllerParams params;
  std::vector<MetaEpochLog> log;
  bool diverged = false;
};

using EpochCallback = std::function<void(const MetaEpochLog&, const ControllerParams&)>;

inline void validate(const MetaTrainConfig& cfg) {
  if (cfg.sources.empty()) throw std::invalid_argument("meta_train: need at least one source classifier");
  for (const auto* f : cfg.sources)
    if (!f) throw std::invalid_argument("meta_train: null source classifier");
  if (!cfg.data || cfg.data->empty()) throw std::invalid_argument("meta_train: empty dataset");
  if (cfg.batch_size == 0 || cfg.budget == 0) throw std::invalid_argument("meta_train: zero batch size or budget");
}

// Epoch loop: shuffle, per batch accumulate the greedy gradient over all
// images and steps, then one joint Adam step on (omega_s, omega_c) that
// minimizes the negated improvement objective.
inline MetaTrainResult meta_train(const MetaTrainConfig& cfg, ControllerParams init,
                                  const EpochCallback& on_epoch = {}) {
  validate(cfg);
  MetaTrainResult res{std::move(init), {}, false};
  if (cfg.epochs == 0) return res;

  const std::size_t n = cfg.data->size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t ns = res.params.size_net.parameter_count();
  const std::size_t nc = res.params.color_net.parameter_count();
  nn::OptimizerState opt({cfg.lr, cfg.epochs * batches}, ns + nc);
  Rng shuffle_rng = make_rng(cfg.seed ^ 0x5348554646ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const ControllerParams last_good = res.params;
    MetaEpochLog row;
    row.epoch = epoch;
    std::size_t robust = 0, seen = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + lo, order.begin() + hi);
      const auto g = meta_batch_gradient(cfg, res.params, idx, epoch);
      const double count = static_cast<double>(g.images * cfg.sources.size());
      row.meta_loss += g.meta_loss_sum;
      row.dropped_steps += g.dropped;
      robust += g.robust;
      seen += g.images * cfg.sources.size();
      if (!std::isfinite(g.meta_loss_sum)) {
        res.params = last_good;
        res.diverged = true;
        return res;
      }
      // Adam minimizes -R: descend along the negated improvement gradient.
      std::vector<double> grad(ns + nc, 0.0);
      for (std::size_t k = 0; k < ns; ++k) grad[k] = cfg.train_size ? -g.grad_size[k] / count : 0.0;
      for (std::size_t k = 0; k < nc; ++k) grad[ns + k] = cfg.train_color ? -g.grad_color[k] / count : 0.0;
      auto flat = res.params.size_net.flat_parameters();
      const auto fc = res.params.color_net.flat_parameters();
      flat.insert(flat.end(), fc.begin(), fc.end());
      nn::adam_step(opt, flat, grad);
      res.params.size_net.set_flat_parameters(std::span<const double>(flat).first(ns));
      res.params.color_net.set_flat_parameters(std::span<const double>(flat).subspan(ns));
    }
    row.meta_loss /= static_cast<double>(seen);
    row.train_robust_accuracy = static_cast<double>(robust) / static_cast<double>(seen);
    res.log.push_back(row);
    if (on_epoch) on_epoch(row, res.params);
  }
  return res;
}

}  // namespace msa
