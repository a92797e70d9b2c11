#pragma once

// Random-search attack loop: stripe initialization, square proposals from a
// hand-designed schedule or the learned controllers, strict-improvement
// acceptance, exact query accounting and trajectory recording.

#include <atomic>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "msa/classifier.hpp"
#include "msa/controller.hpp"
#include "msa/core.hpp"
#include "msa/dataset.hpp"
#include "msa/proposal.hpp"

namespace msa {

enum class ColorSampling { Uniform, Controller };

inline std::string to_string(ColorSampling c) { return c == ColorSampling::Uniform ? "uniform" : "msa"; }

inline ColorSampling color_sampling_from_string(const std::string& s) {
  if (s == "uniform") return ColorSampling::Uniform;
  if (s == "msa" || s == "controller") return ColorSampling::Controller;
  throw std::invalid_argument("unknown color sampling '" + s + "' (expected uniform or msa)");
}

enum class TargetMode { Untargeted, Fixed, Random };

struct AttackConfig {
  ThreatModel threat{Norm::Linf, 8.0 / 255.0};
  std::size_t budget = 1000;
  ScheduleKind schedule = ScheduleKind::SA;
  double p0 = 0.3;                 // SA initial pixel fraction
  double aa_p0 = kAutoAttackP0;    // AA initial pixel fraction
  ColorSampling colors = ColorSampling::Uniform;
  LossSpec loss = LossSpec::untargeted();
  bool early_stop = true;
  std::uint64_t seed = 0;
  bool record_trajectory = false;
  std::shared_ptr<const ControllerParams> controllers;
  // Sees every queried perturbation (the initialization first) with its acceptance.
  std::function<void(const Perturbation&, bool accepted)> observer;

  // Used by run_batch to fill loss.target per image.
  TargetMode target_mode = TargetMode::Untargeted;
  std::size_t fixed_target = 0;

  void validate() const {
    if (budget == 0) throw std::invalid_argument("attack budget must be >= 1");
    if ((schedule == ScheduleKind::Controller || colors == ColorSampling::Controller) && !controllers)
      throw std::invalid_argument("controller-driven attack needs controller parameters");
  }

  std::string name() const { return to_string(schedule) + "+" + to_string(colors); }
};

struct QueryRecord {
  std::size_t query = 0;   // 1-based query count after this evaluation
  double size = 0.0;       // square side used (0 for the initialization)
  int color = -1;          // -1 for the initialization
  int r = 0;               // acceptance indicator
  double R = 1.0;          // size EMA after the update
  double R_color = 1.0;    // EMA of the sampled color after the update
  double proposal_loss = 0.0;
  double best_loss = 0.0;
  bool accepted = false;
  bool success = false;    // current iterate is adversarial
};

struct AttackResult {
  Perturbation xi;
  double best_loss = 0.0;
  bool success = false;
  std::size_t queries = 0;
  std::size_t budget = 0;
  std::optional<std::size_t> success_query;  // queries used when the iterate first became adversarial
  std::vector<QueryRecord> trajectory;
};

inline std::size_t color_count(const Shape& s) { return std::size_t{1} << s.c; }

inline AttackResult run_attack(const ModelHandle& f, const ImageTensor& x, std::size_t label, const AttackConfig& cfg) {
  cfg.validate();
  if (x.shape() != f.input_shape()) throw ShapeMismatch("run_attack: image shape " + x.shape().str());
  const Shape shape = x.shape();
  const std::size_t m = color_count(shape);
  const std::size_t s_max = std::min(shape.h, shape.w);
  const double eps = cfg.threat.epsilon;
  const bool linf = cfg.threat.norm == Norm::Linf;
  const ControllerHyper hyper = cfg.controllers ? cfg.controllers->hyper : ControllerHyper{};
  const auto colors = corner_colors(shape.c, eps);

  Rng rng = make_rng(cfg.seed);
  QueryMeter meter(cfg.budget);
  AttackResult res;
  res.budget = cfg.budget;
  res.xi = linf ? stripe_init(shape, eps, rng) : l2_init(shape, eps, rng);

  auto sc = black_box_score(f, apply(x, res.xi), label, meter, cfg.loss);
  res.best_loss = sc.loss;
  res.success = attack_succeeded(sc.predicted, label, cfg.loss);
  if (res.success) res.success_query = meter.used();
  if (cfg.observer) cfg.observer(res.xi, true);
  if (cfg.record_trajectory)
    res.trajectory.push_back({meter.used(), 0.0, -1, 0, 1.0, 1.0, sc.loss, sc.loss, true, res.success});

  ControllerState state(m);
  for (std::uint64_t i = 0; !meter.exhausted() && !(res.success && cfg.early_stop); ++i) {
    const double t_enc = encode_time(i, hyper.time_budget);
    std::size_t s = 1;
    switch (cfg.schedule) {
      case ScheduleKind::SA: s = p_to_size(sa_schedule(i, cfg.budget, cfg.p0), shape.h, shape.w); break;
      case ScheduleKind::AA: s = p_to_size(aa_schedule(i, cfg.aa_p0), shape.h, shape.w); break;
      case ScheduleKind::Controller:
        s = round_size(size_controller(cfg.controllers->size_net, t_enc, state.R, s_max).s, s_max);
        break;
    }

    Position p1 = sample_position(s, shape.h, shape.w, rng);
    Position p2{};
    if (!linf) p2 = sample_position(s, shape.h, shape.w, rng);
    std::size_t color = 0;
    if (cfg.colors == ColorSampling::Uniform) {
      color = uniform_index(rng, m);
    } else {
      const auto cl = color_logits(cfg.controllers->color_net, t_enc, state.R_colors);
      color = sample_color_test(cl.logits, hyper.p_min, rng).index;
    }

    Perturbation proposal;
    if (linf) {
      SquareUpdate u{static_cast<double>(s), p1, color, colors[color]};
      proposal = overwrite_square(res.xi, u);
    } else {
      proposal = make_l2_update(res.xi, L2Windows{s, p1, p2, sign_pattern(color, shape.c)}, eps);
    }

    sc = black_box_score(f, apply(x, proposal), label, meter, cfg.loss);
    const int r = success_indicator(sc.loss, res.best_loss);
    if (cfg.observer) cfg.observer(proposal, r == 1);
    if (r) {
      res.xi = std::move(proposal);
      res.best_loss = sc.loss;
      res.success = attack_succeeded(sc.predicted, label, cfg.loss);
      if (res.success && !res.success_query) res.success_query = meter.used();
    }
    record_outcome(state, color, r, hyper);
    if (cfg.record_trajectory)
      res.trajectory.push_back({meter.used(), static_cast<double>(s), static_cast<int>(color), r, state.R,
                                state.R_colors[color], sc.loss, res.best_loss, r == 1, res.success});
  }
  res.queries = meter.used();
  return res;
}

// ---------------------------------------------------------------------------
// Batches

struct ImageResult {
  std::size_t image_id = 0;
  std::size_t label = 0;
  std::optional<std::size_t> target;
  bool initially_correct = false;
  std::optional<AttackResult> attack;  // absent for initially misclassified images
  std::optional<std::string> error;
};

struct BatchSummary {
  std::size_t images = 0;
  std::size_t clean_correct = 0;
  std::size_t robust = 0;
  std::size_t failures = 0;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  double mean_queries = 0.0;  // over attacked images
};

struct BatchResult {
  std::vector<ImageResult> items;
  BatchSummary summary;
};

// An image counts as robust if it is correctly classified and the attack never succeeded.
inline bool is_robust(const ImageResult& r) {
  return r.initially_correct && !r.error && r.attack && !r.attack->success;
}

inline BatchSummary summarize(const std::vector<ImageResult>& items) {
  BatchSummary s;
  s.images = items.size();
  std::size_t attacked = 0, queries = 0;
  for (const auto& it : items) {
    s.clean_correct += it.initially_correct;
    s.robust += is_robust(it);
    s.failures += it.error.has_value();
    if (it.attack) {
      ++attacked;
      queries += it.attack->queries;
    }
  }
  if (s.images) {
    s.clean_accuracy = static_cast<double>(s.clean_correct) / static_cast<double>(s.images);
    s.robust_accuracy = static_cast<double>(s.robust) / static_cast<double>(s.images);
  }
  if (attacked) s.mean_queries = static_cast<double>(queries) / static_cast<double>(attacked);
  return s;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline std::uint64_t image_seed(std::uint64_t run_seed, std::size_t image_index) { return run_seed ^ image_index; }

// Independent per-image attacks on images [begin, end) of the dataset.
// Each image gets seed = run_seed ^ image_index, so results do not depend on
// the thread count.
inline BatchResult run_batch(const ModelHandle& f, const Dataset& data, std::size_t begin, std::size_t end,
                             const AttackConfig& cfg, std::size_t threads = 1) {
  if (begin >= end || end > data.size()) throw std::invalid_argument("run_batch: empty or out-of-range slice");
  cfg.validate();
  BatchResult out;
  out.items.resize(end - begin);
  parallel_for(end - begin, threads, [&](std::size_t k) {
    const std::size_t idx = begin + k;
    ImageResult& item = out.items[k];
    item.image_id = idx;
    item.label = data.label(idx);
    try {
      const ImageTensor x = data.image(idx);
      AttackConfig c = cfg;
      c.seed = image_seed(cfg.seed, idx);
      if (cfg.target_mode == TargetMode::Fixed) {
        if (cfg.fixed_target != item.label) c.loss.target = cfg.fixed_target;
      } else if (cfg.target_mode == TargetMode::Random) {
        Rng trng = make_rng(c.seed ^ 0x7a72676574ULL);
        std::size_t t = uniform_index(trng, data.num_classes - 1);
        c.loss.target = t >= item.label ? t + 1 : t;
      }
      item.target = c.loss.target;
      item.initially_correct = argmax(predict(f, x)) == item.label;
      // A fixed target equal to the label leaves nothing to attack.
      if (cfg.target_mode == TargetMode::Fixed && !c.loss.target) {
        item.attack = AttackResult{Perturbation(x.shape()), 0.0, false, 0, c.budget, std::nullopt, {}};
        return;
      }
      if (item.initially_correct) item.attack = run_attack(f, x, item.label, c);
    } catch (const std::exception& e) {
      item.error = e.what();
    }
  });
  out.summary = summarize(out.items);
  return out;
}

// Fraction of images still correctly classified had the attack stopped after
// q queries, for each checkpoint q (0 = clean accuracy).
inline std::vector<double> robust_accuracy_curve(const std::vector<ImageResult>& results,
                                                 const std::vector<std::size_t>& checkpoints) {
  if (results.empty()) throw std::invalid_argument("robust_accuracy_curve: no results");
  std::vector<double> curve;
  for (std::size_t q : checkpoints) {
    std::size_t robust = 0;
    for (const auto& r : results) {
      if (!r.initially_correct || r.error) continue;
      if (r.attack && q > r.attack->budget)
        throw std::invalid_argument("checkpoint " + std::to_string(q) + " beyond recorded budget " +
                                    std::to_string(r.attack->budget));
      const bool broken = r.attack && r.attack->success_query && *r.attack->success_query <= q;
      robust += !broken;
    }
    curve.push_back(static_cast<double>(robust) / static_cast<double>(results.size()));
  }
  return curve;
}

// image_id,t,s,color_index,r,R,loss,accepted
inline std::string trajectory_csv(const std::vector<ImageResult>& results) {
  std::ostringstream os;
  os.precision(17);
  os << "image_id,t,s,color_index,r,R,loss,accepted\n";
  for (const auto& it : results) {
    if (!it.attack) continue;
    for (const auto& q : it.attack->trajectory)
      os << it.image_id << ',' << q.query << ',' << q.size << ',' << q.color << ',' << q.r << ',' << q.R << ','
         << q.best_loss << ',' << (q.accepted ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace msa
