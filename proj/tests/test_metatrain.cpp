#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <type_traits>

#include "msa/metatrain.hpp"
#include "msa/synthetic.hpp"

using namespace msa;

namespace {

const Shape kShape{3, 8, 8};

struct World {
  Dataset data;
  Classifier model;
};

const World& world() {
  static const World w = [] {
    SyntheticConfig sc;
    sc.n = 400;
    sc.shape = kShape;
    sc.num_classes = 4;
    World out;
    out.data = make_synthetic_dataset(sc);
    TrainConfig tc;
    tc.arch = Architecture::SmallCnn;
    tc.epochs = 3;
    tc.seed = 2;
    out.model = train_classifier(out.data.slice(0, 300), tc).model;
    return out;
  }();
  return w;
}

// Pixels away from the box edges, so the straight-through clip is inactive.
ImageTensor interior_image(Rng& rng) {
  std::uniform_real_distribution<double> u(0.2, 0.8);
  std::vector<double> v(kShape.size());
  for (double& x : v) x = u(rng);
  return ImageTensor(kShape, std::move(v));
}

ControllerParams params_with_bias(std::uint64_t seed, double size_bias) {
  Rng rng = make_rng(seed);
  auto p = ControllerParams::initialized(rng);
  auto flat = p.size_net.flat_parameters();
  flat.back() += size_bias;
  p.size_net.set_flat_parameters(flat);
  return p;
}

struct FrozenStep {
  StepContext ctx;
  Perturbation xi;
  double best = 0.0;
  ControllerState state{8};
  std::uint64_t t = 0;
  StepDraws draws;
};

// Searches for a step whose proposal improves the loss, away from odd-size
// kinks and, when asked, outside the uniform-floor branch.
bool find_step(const ImageTensor& x, const ControllerParams& p, ThreatModel threat, std::uint64_t seed,
               bool need_gumbel, FrozenStep& out, ColorPath path) {
  const auto& f = world().model;
  Rng rng = make_rng(seed);
  out.ctx = StepContext{&f, &x, 1, threat};
  if (threat.norm == Norm::Linf) {
    std::uniform_real_distribution<double> u(-threat.epsilon, threat.epsilon);
    out.xi = Perturbation(kShape);
    for (double& v : out.xi.values()) v = u(rng);
  } else {
    out.xi = l2_init(kShape, threat.epsilon, rng);
  }
  out.best = classification_loss(f.predict(apply(x, out.xi)), 1, kMetaLoss);
  std::uniform_real_distribution<double> uR(0.0, 3.0);
  for (auto& r : out.state.R_colors) r = uR(rng);
  out.state.R = uR(rng);
  for (int attempt = 0; attempt < 2000; ++attempt) {
    out.t = uniform_index(rng, 1000);
    const auto step = greedy_step(out.ctx, out.xi, out.best, out.state, out.t, p, &out.draws, &rng, path);
    const double fr = odd_fraction(step.size);
    if (step.improvement > 1e-6 && fr > 0.05 && fr < 0.95 && (!need_gumbel || !out.draws.floor_branch)) return true;
  }
  return false;
}

double replay_improvement(const FrozenStep& s, const ControllerParams& p, ColorPath path) {
  StepDraws d = s.draws;
  return greedy_step(s.ctx, s.xi, s.best, s.state, s.t, p, &d, nullptr, path, false).improvement;
}

void check_size_gradient(ThreatModel threat, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  const auto x = interior_image(rng);
  // Shift the size output until a step lands away from the odd-size kinks.
  ControllerParams p;
  FrozenStep s;
  bool found = false;
  for (double bias : {0.0, 0.4, -0.4, 0.8, -0.8})
    if ((found = find_step(x, p = params_with_bias(seed, bias), threat, seed, false, s, ColorPath::StraightThrough)))
      break;
  ASSERT_TRUE(found);
  StepDraws d = s.draws;
  const auto step = greedy_step(s.ctx, s.xi, s.best, s.state, s.t, p, &d, nullptr);
  const auto fd = nn::finite_difference_gradient(
      [&](std::span<const double> w) {
        ControllerParams q = p;
        q.size_net.set_flat_parameters(w);
        return replay_improvement(s, q, ColorPath::StraightThrough);
      },
      p.size_net.flat_parameters(), 1e-5);
  EXPECT_LT(nn::relative_error(step.grad_size, fd, 1e-10), 1e-3) << "seed " << seed;
}

}  // namespace

TEST(GreedyStep, SizeGradientMatchesFiniteDifferencesLinf) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) check_size_gradient(ThreatModel(Norm::Linf, 8.0 / 255.0), seed);
}

TEST(GreedyStep, SizeGradientMatchesFiniteDifferencesL2) {
  for (std::uint64_t seed : {5u, 6u, 7u}) check_size_gradient(ThreatModel(Norm::L2, 0.5), seed);
}

// Under frozen Gumbel noise the soft path is differentiable in omega_c.
TEST(GreedyStep, SoftColorGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {8u, 9u, 10u}) {
    Rng rng = make_rng(seed);
    const auto x = interior_image(rng);
    const auto p = params_with_bias(seed, 0.0);
    FrozenStep s;
    ASSERT_TRUE(find_step(x, p, ThreatModel(Norm::Linf, 8.0 / 255.0), seed, true, s, ColorPath::Soft));
    StepDraws d = s.draws;
    const auto step = greedy_step(s.ctx, s.xi, s.best, s.state, s.t, p, &d, nullptr, ColorPath::Soft);
    const auto fd = nn::finite_difference_gradient(
        [&](std::span<const double> w) {
          ControllerParams q = p;
          q.color_net.set_flat_parameters(w);
          return replay_improvement(s, q, ColorPath::Soft);
        },
        p.color_net.flat_parameters(), 1e-5);
    EXPECT_LT(nn::relative_error(step.grad_color, fd, 1e-10), 1e-3) << "seed " << seed;
  }
}

TEST(GreedyStep, NoImprovementNoGradient) {
  const auto& w = world();
  const auto x = w.data.image(310);
  const auto p = params_with_bias(11, 0.0);
  Rng rng = make_rng(11);
  const auto xi = stripe_init(kShape, 8.0 / 255.0, rng);
  StepContext ctx{&w.model, &x, w.data.label(310), ThreatModel(Norm::Linf, 8.0 / 255.0)};
  StepDraws d;
  const auto step = greedy_step(ctx, xi, 1e9, ControllerState(8), 0, p, &d, &rng);
  EXPECT_EQ(step.improvement, 0.0);
  for (double v : step.grad_size) EXPECT_EQ(v, 0.0);
  for (double v : step.grad_color) EXPECT_EQ(v, 0.0);
}

TEST(GreedyStep, FloorBranchHasNoColorGradient) {
  Rng rng = make_rng(12);
  const auto x = interior_image(rng);
  const auto p = params_with_bias(12, 0.0);
  FrozenStep s;
  ASSERT_TRUE(find_step(x, p, ThreatModel(Norm::Linf, 8.0 / 255.0), 12, false, s, ColorPath::StraightThrough));
  s.draws.floor_branch = true;
  s.draws.floor_index = 6;
  StepDraws d = s.draws;
  const auto step = greedy_step(s.ctx, s.xi, s.best, s.state, s.t, p, &d, nullptr);
  EXPECT_EQ(step.color, 6u);
  for (double v : step.grad_color) EXPECT_EQ(v, 0.0);
}

TEST(MetaLoss, StepIsPositivePartOfLossChange) {
  const auto& w = world();
  const auto x = w.data.image(320);
  Rng rng = make_rng(13);
  const auto a = stripe_init(kShape, 8.0 / 255.0, rng);
  const auto b = stripe_init(kShape, 8.0 / 255.0, rng);
  const std::size_t y = w.data.label(320);
  const double la = classification_loss(w.model.predict(apply(x, a)), y, kMetaLoss);
  const double lb = classification_loss(w.model.predict(apply(x, b)), y, kMetaLoss);
  EXPECT_EQ(meta_loss_step(w.model, x, y, a, b), std::max(lb - la, 0.0));
  EXPECT_EQ(meta_loss_step(w.model, x, y, a, a), 0.0);
}

// Accepted improvements add up to the total loss gain of the trajectory, and
// the stored iterates are plain values.
TEST(MetaAttack, ImprovementsTelescope) {
  const auto& w = world();
  const auto p = params_with_bias(14, 0.0);
  const auto r = meta_attack_image(w.model, w.data.image(330), w.data.label(330), p,
                                   ThreatModel(Norm::Linf, 8.0 / 255.0), 200, 99, true);
  ASSERT_EQ(r.iterates.size(), 200u);
  EXPECT_NEAR(r.improvement_sum, r.best_losses.back() - r.best_losses.front(), 1e-12);
  for (std::size_t k = 1; k < r.best_losses.size(); ++k) EXPECT_GE(r.best_losses[k], r.best_losses[k - 1]);
  static_assert(std::is_same_v<std::remove_cvref_t<decltype(r.iterates[0][0])>, double>);
  for (const auto& xi : r.iterates) EXPECT_LE(linf_norm(xi.values()), 8.0 / 255.0);
}

TEST(MetaAttack, Deterministic) {
  const auto& w = world();
  const auto p = params_with_bias(15, 0.0);
  const ThreatModel tm(Norm::L2, 0.5);
  const auto a = meta_attack_image(w.model, w.data.image(331), w.data.label(331), p, tm, 100, 5);
  const auto b = meta_attack_image(w.model, w.data.image(331), w.data.label(331), p, tm, 100, 5);
  EXPECT_EQ(a.grad_size, b.grad_size);
  EXPECT_EQ(a.improvement_sum, b.improvement_sum);
}

namespace {

MetaTrainConfig small_config(const Dataset& d) {
  MetaTrainConfig c;
  c.sources = {&world().model};
  c.data = &d;
  c.budget = 60;
  c.epochs = 1;
  c.batch_size = 4;
  c.seed = 21;
  return c;
}

}  // namespace

TEST(MetaBatch, GradientIsSumOfSingleImageGradients) {
  const auto d = world().data.slice(300, 340);
  const auto cfg = small_config(d);
  const auto p = params_with_bias(16, 0.0);
  const auto both = meta_batch_gradient(cfg, p, {3, 7}, 1);
  const auto a = meta_batch_gradient(cfg, p, {3}, 1);
  const auto b = meta_batch_gradient(cfg, p, {7}, 1);
  for (std::size_t k = 0; k < both.grad_size.size(); ++k)
    EXPECT_DOUBLE_EQ(both.grad_size[k], a.grad_size[k] + b.grad_size[k]);
  for (std::size_t k = 0; k < both.grad_color.size(); ++k)
    EXPECT_DOUBLE_EQ(both.grad_color[k], a.grad_color[k] + b.grad_color[k]);
  EXPECT_DOUBLE_EQ(both.meta_loss_sum, a.meta_loss_sum + b.meta_loss_sum);
}

TEST(MetaBatch, OrderAndThreadInvariant) {
  const auto d = world().data.slice(300, 340);
  auto cfg = small_config(d);
  const auto p = params_with_bias(17, 0.0);
  const auto ref = meta_batch_gradient(cfg, p, {1, 4, 9, 12, 20}, 2);
  const auto shuffled = meta_batch_gradient(cfg, p, {20, 9, 1, 12, 4}, 2);
  cfg.threads = 4;
  const auto threaded = meta_batch_gradient(cfg, p, {12, 4, 20, 1, 9}, 2);
  EXPECT_EQ(ref.grad_size, shuffled.grad_size);
  EXPECT_EQ(ref.grad_color, shuffled.grad_color);
  EXPECT_EQ(ref.meta_loss_sum, shuffled.meta_loss_sum);
  EXPECT_EQ(ref.grad_size, threaded.grad_size);
  EXPECT_EQ(ref.grad_color, threaded.grad_color);
}

TEST(MetaTrain, ZeroEpochsReturnsInitialization) {
  const auto d = world().data.slice(300, 320);
  auto cfg = small_config(d);
  cfg.epochs = 0;
  const auto p = params_with_bias(18, 0.0);
  const auto r = meta_train(cfg, p);
  EXPECT_EQ(r.params.size_net.flat_parameters(), p.size_net.flat_parameters());
  EXPECT_EQ(r.params.color_net.flat_parameters(), p.color_net.flat_parameters());
  EXPECT_TRUE(r.log.empty());
}

TEST(MetaTrain, ZeroLearningRateLeavesControllersUnchanged) {
  const auto d = world().data.slice(300, 312);
  auto cfg = small_config(d);
  cfg.lr = 0.0;
  cfg.epochs = 2;
  const auto p = params_with_bias(19, 0.0);
  const auto r = meta_train(cfg, p);
  EXPECT_EQ(r.params.size_net.flat_parameters(), p.size_net.flat_parameters());
  EXPECT_EQ(r.params.color_net.flat_parameters(), p.color_net.flat_parameters());
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_LE(r.log[0].meta_loss, 0.0);
}

TEST(MetaTrain, UpdatesAndReportsPerEpoch) {
  const auto d = world().data.slice(300, 312);
  auto cfg = small_config(d);
  cfg.epochs = 2;
  const auto p = params_with_bias(20, 0.0);
  std::size_t calls = 0;
  const auto r = meta_train(cfg, p, [&](const MetaEpochLog& row, const ControllerParams&) {
    ++calls;
    EXPECT_EQ(row.epoch, calls);
    EXPECT_GE(row.train_robust_accuracy, 0.0);
    EXPECT_LE(row.train_robust_accuracy, 1.0);
  });
  EXPECT_EQ(calls, 2u);
  EXPECT_FALSE(r.diverged);
  EXPECT_NE(r.params.size_net.flat_parameters(), p.size_net.flat_parameters());
  // Same config, same result.
  const auto again = meta_train(cfg, p);
  EXPECT_EQ(r.params.size_net.flat_parameters(), again.params.size_net.flat_parameters());
}

TEST(MetaTrain, FrozenColorControllerStaysPut) {
  const auto d = world().data.slice(300, 312);
  auto cfg = small_config(d);
  cfg.train_color = false;
  const auto p = params_with_bias(22, 0.0);
  const auto r = meta_train(cfg, p);
  EXPECT_EQ(r.params.color_net.flat_parameters(), p.color_net.flat_parameters());
}

TEST(MetaTrain, RejectsBadConfig) {
  const auto d = world().data.slice(300, 312);
  auto cfg = small_config(d);
  cfg.sources.clear();
  EXPECT_THROW(meta_train(cfg, ControllerParams{}), std::invalid_argument);
  cfg = small_config(d);
  cfg.batch_size = 0;
  EXPECT_THROW(meta_train(cfg, ControllerParams{}), std::invalid_argument);
  cfg = small_config(d);
  cfg.data = nullptr;
  EXPECT_THROW(meta_train(cfg, ControllerParams{}), std::invalid_argument);
}
