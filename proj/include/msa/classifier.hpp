#pragma once

// Desk-scale differentiable classifiers, their (adversarial) training, and
// the capability wall between white-box and score-only access.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msa/core.hpp"
#include "msa/dataset.hpp"
#include "msa/tinynn.hpp"

namespace msa {

struct CapabilityError : std::logic_error {
  using std::logic_error::logic_error;
};

struct BudgetExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Architecture { SmallCnn, Mlp };

inline std::string to_string(Architecture a) { return a == Architecture::SmallCnn ? "small_cnn" : "mlp"; }

inline Architecture architecture_from_string(const std::string& s) {
  if (s == "small_cnn" || s == "cnn") return Architecture::SmallCnn;
  if (s == "mlp") return Architecture::Mlp;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

// small_cnn: conv3x3/2 (8) -> conv3x3/2 (16) -> dense 32 -> dense K
// mlp:       dense 64 -> dense K
inline nn::Network build_architecture(Architecture arch, Shape in, std::size_t num_classes) {
  using nn::Activation;
  std::vector<nn::Layer> layers;
  if (arch == Architecture::SmallCnn) {
    nn::ConvLayer c1(in, 8, 3, 2, 1, Activation::ReLU);
    nn::ConvLayer c2(c1.output_shape(), 16, 3, 2, 1, Activation::ReLU);
    const std::size_t flat = c2.output_size();
    layers.emplace_back(std::move(c1));
    layers.emplace_back(std::move(c2));
    layers.emplace_back(nn::DenseLayer(flat, 32, Activation::ReLU));
    layers.emplace_back(nn::DenseLayer(32, num_classes, Activation::Identity));
  } else {
    layers.emplace_back(nn::DenseLayer(in.size(), 64, Activation::ReLU));
    layers.emplace_back(nn::DenseLayer(64, num_classes, Activation::Identity));
  }
  return nn::Network(std::move(layers));
}

// Gradient of classification_loss wrt the network scores (logits).
inline std::vector<double> loss_gradient_wrt_scores(std::span<const double> probs, std::size_t label,
                                                    const LossSpec& spec) {
  const std::size_t K = probs.size();
  const std::size_t ref = spec.targeted() ? *spec.target : label;
  std::vector<double> g(K, 0.0);
  if (spec.kind == LossKind::CrossEntropy) {
    for (std::size_t k = 0; k < K; ++k) g[k] = probs[k];
    g[ref] -= 1.0;
  } else {
    std::size_t best = ref == 0 ? 1 : 0;
    for (std::size_t k = 0; k < K; ++k)
      if (k != ref && probs[k] > probs[best]) best = k;
    g[best] = 1.0;
    g[ref] = -1.0;
  }
  if (spec.targeted())
    for (double& v : g) v = -v;
  return g;
}

class Classifier {
 public:
  Classifier() = default;
  Classifier(Architecture arch, Shape input, std::size_t num_classes)
      : arch_(arch), input_(input), num_classes_(num_classes), net_(build_architecture(arch, input, num_classes)) {
    if (num_classes < 2) throw std::invalid_argument("classifier needs at least two classes");
  }
  Classifier(Architecture arch, Shape input, std::size_t num_classes, Rng& rng) : Classifier(arch, input, num_classes) {
    net_.init_glorot(rng);
  }

  Architecture architecture() const { return arch_; }
  const Shape& input_shape() const { return input_; }
  std::size_t num_classes() const { return num_classes_; }
  const nn::Network& network() const { return net_; }
  nn::Network& network() { return net_; }

  std::vector<double> scores(const Tensor& x) const {
    check_shape(x);
    auto tape = net_.forward(x.values());
    return {tape.output().begin(), tape.output().end()};
  }

  std::vector<double> predict(const ImageTensor& x) const { return softmax(scores(x)); }

  struct LossAndGradient {
    double loss = 0.0;
    std::vector<double> probs;
    Tensor gradient;  // wrt input pixels
  };

  // Loss through predict() and its exact input gradient.
  LossAndGradient loss_and_gradient(const ImageTensor& x, std::size_t label, const LossSpec& spec) const {
    check_shape(x);
    LossAndGradient out;
    auto tape = net_.forward(x.values());
    out.probs = softmax(tape.output());
    out.loss = classification_loss(out.probs, label, spec);
    const auto gscore = loss_gradient_wrt_scores(out.probs, label, spec);
    auto g = net_.backward(tape, gscore, /*want_params=*/false, /*want_input=*/true);
    out.gradient = Tensor(input_, std::move(g.input));
    return out;
  }

  struct Evaluation {
    nn::Tape tape;
    std::vector<double> probs;
  };

  // Forward pass kept for an optional later gradient.
  Evaluation evaluate(const Tensor& x) const {
    check_shape(x);
    Evaluation e;
    net_.forward(x.values(), e.tape);
    e.probs = softmax(e.tape.output());
    return e;
  }

  Tensor gradient_from(const Evaluation& e, std::size_t label, const LossSpec& spec) const {
    auto g = net_.backward(e.tape, loss_gradient_wrt_scores(e.probs, label, spec), false, true);
    return Tensor(input_, std::move(g.input));
  }

  void check_shape(const Tensor& x) const {
    if (x.shape() != input_)
      throw ShapeMismatch("classifier expects input " + input_.str() + ", got " + x.shape().str());
  }

 private:
  Architecture arch_ = Architecture::SmallCnn;
  Shape input_{};
  std::size_t num_classes_ = 0;
  nn::Network net_;
};

// ---------------------------------------------------------------------------
// Capability wall

enum class Access { WhiteBox, BlackBox };

class ModelHandle {
 public:
  static ModelHandle white_box(const Classifier& f) { return ModelHandle(f, Access::WhiteBox); }
  static ModelHandle black_box(const Classifier& f) { return ModelHandle(f, Access::BlackBox); }

  Access access() const { return access_; }
  bool is_white_box() const { return access_ == Access::WhiteBox; }
  const Shape& input_shape() const { return f_->input_shape(); }
  std::size_t num_classes() const { return f_->num_classes(); }

  const Classifier& white_box_model() const {
    if (!is_white_box()) throw CapabilityError("gradient access requested on a black-box model handle");
    return *f_;
  }

 private:
  ModelHandle(const Classifier& f, Access a) : f_(&f), access_(a) {}
  const Classifier* f_;
  Access access_;

  friend struct ScoreAccess;
};

// Only the scoring path may see through a black-box handle.
struct ScoreAccess {
  static const Classifier& model(const ModelHandle& h) { return *h.f_; }
};

inline Tensor input_gradient(const ModelHandle& h, const ImageTensor& x, std::size_t label, const LossSpec& spec) {
  return h.white_box_model().loss_and_gradient(x, label, spec).gradient;
}

inline std::vector<double> predict(const ModelHandle& h, const ImageTensor& x) {
  return ScoreAccess::model(h).predict(x);
}

class QueryMeter {
 public:
  explicit QueryMeter(std::size_t budget) : budget_(budget) {
    if (budget == 0) throw std::invalid_argument("query budget must be positive");
  }
  std::size_t budget() const { return budget_; }
  std::size_t used() const { return used_; }
  std::size_t remaining() const { return budget_ - used_; }
  bool exhausted() const { return used_ >= budget_; }

  void charge() {
    if (used_ >= budget_) throw BudgetExhausted("query budget of " + std::to_string(budget_) + " exhausted");
    ++used_;
  }

 private:
  std::size_t budget_;
  std::size_t used_ = 0;
};

struct Score {
  double loss = 0.0;
  std::size_t predicted = 0;
};

// One metered query: loss value and predicted label, never gradients.
inline Score black_box_score(const ModelHandle& h, const ImageTensor& x, std::size_t label, QueryMeter& meter,
                             const LossSpec& spec) {
  meter.charge();
  const auto probs = predict(h, x);
  return {classification_loss(probs, label, spec), argmax(probs)};
}

// ---------------------------------------------------------------------------
// PGD

struct PgdConfig {
  double eps = 8.0 / 255.0;
  double step = 0.01;
  std::size_t iters = 20;
  bool random_start = false;
  LossSpec loss = LossSpec::untargeted();
};

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Sign-gradient ascent in the linf ball; xi is clipped to [-x, 1 - x] so that
// |xi| <= eps holds exactly.
inline Perturbation pgd_attack(const ModelHandle& h, const ImageTensor& x, std::size_t label, const PgdConfig& cfg,
                               Rng* rng = nullptr) {
  const Classifier& f = h.white_box_model();
  f.check_shape(x);
  Perturbation xi(x.shape());
  if (cfg.random_start) {
    if (!rng) throw std::invalid_argument("pgd_attack: random start needs a generator");
    std::uniform_real_distribution<double> u(-cfg.eps, cfg.eps);
    for (std::size_t i = 0; i < xi.size(); ++i) xi[i] = std::clamp(u(*rng), -x[i], 1.0 - x[i]);
  }
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const auto lg = f.loss_and_gradient(apply(x, xi), label, cfg.loss);
    if (!std::isfinite(lg.loss)) throw NumericError("pgd_attack: non-finite loss at step " + std::to_string(it));
    for (std::size_t i = 0; i < xi.size(); ++i) {
      const double v = std::clamp(xi[i] + cfg.step * sign0(lg.gradient[i]), -cfg.eps, cfg.eps);
      xi[i] = std::clamp(v, -x[i], 1.0 - x[i]);
    }
  }
  return xi;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  Architecture arch = Architecture::SmallCnn;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.003;
  std::uint64_t seed = 0;
  std::optional<PgdConfig> adversarial;  // set => PGD adversarial training
  double warmup_epochs = 0.0;            // linear ramp of the PGD radius and step from 0
  PgdConfig eval_attack{};               // robust accuracy column of the log
  std::size_t eval_limit = 200;          // images of the eval set scored per epoch
};

struct TrainLogRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double robust_accuracy = 0.0;
};

struct TrainResult {
  Classifier model;
  std::vector<TrainLogRow> log;
};

inline double clean_accuracy(const Classifier& f, const Dataset& d, std::size_t limit = SIZE_MAX) {
  const std::size_t n = std::min(limit, d.size());
  if (n == 0) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) ok += argmax(f.predict(d.image(i))) == d.label(i);
  return static_cast<double>(ok) / static_cast<double>(n);
}

inline double pgd_robust_accuracy(const Classifier& f, const Dataset& d, const PgdConfig& cfg, std::uint64_t seed,
                                  std::size_t limit = SIZE_MAX) {
  const std::size_t n = std::min(limit, d.size());
  if (n == 0) return 0.0;
  const auto h = ModelHandle::white_box(f);
  Rng rng = make_rng(seed);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = d.image(i);
    const auto xi = pgd_attack(h, x, d.label(i), cfg, &rng);
    ok += argmax(f.predict(apply(x, xi))) == d.label(i);
  }
  return static_cast<double>(ok) / static_cast<double>(n);
}

// Minibatch Adam on cross-entropy; in adversarial mode every batch input is
// replaced by apply(x, pgd_attack(x)) before the loss step.
inline TrainResult train_classifier(const Dataset& train, const TrainConfig& cfg, const Dataset* eval = nullptr) {
  if (train.empty()) throw std::invalid_argument("train_classifier: empty dataset");
  train.validate();
  if (cfg.batch_size == 0) throw std::invalid_argument("train_classifier: batch size must be positive");
  Rng rng = make_rng(cfg.seed);
  TrainResult res{Classifier(cfg.arch, train.shape, train.num_classes, rng), {}};
  if (cfg.epochs == 0) return res;

  Classifier& f = res.model;
  const std::size_t n = train.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  nn::OptimizerState opt({cfg.lr, cfg.epochs * batches}, f.network().parameter_count());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto ce = LossSpec::untargeted();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::vector<double> grad(f.network().parameter_count(), 0.0);
      const double progress = static_cast<double>((epoch - 1) * batches + b + 1) / static_cast<double>(batches);
      const double ramp = cfg.warmup_epochs > 0.0 ? std::min(1.0, progress / cfg.warmup_epochs) : 1.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t idx = order[k];
        ImageTensor x = train.image(idx);
        const std::size_t y = train.label(idx);
        if (cfg.adversarial) {
          PgdConfig pc = *cfg.adversarial;
          pc.eps *= ramp;
          pc.step *= ramp;
          x = apply(x, pgd_attack(ModelHandle::white_box(f), x, y, pc, &rng));
        }
        auto tape = f.network().forward(x.values());
        const auto probs = softmax(tape.output());
        loss_sum += classification_loss(probs, y, ce);
        correct += argmax(probs) == y;
        auto g = f.network().backward(tape, loss_gradient_wrt_scores(probs, y, ce), true, false);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.params[i];
      }
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (double& v : grad) v *= inv;
      auto params = f.network().flat_parameters();
      nn::adam_step(opt, params, grad);
      f.network().set_flat_parameters(params);
    }
    TrainLogRow row;
    row.epoch = epoch;
    row.loss = loss_sum / static_cast<double>(n);
    row.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    if (eval && !eval->empty())
      row.robust_accuracy = pgd_robust_accuracy(f, *eval, cfg.eval_attack, cfg.seed + epoch, cfg.eval_limit);
    res.log.push_back(row);
  }
  return res;
}

}  // namespace msa
