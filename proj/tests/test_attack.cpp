#include <gtest/gtest.h>

#include <cmath>

#include "msa/attack.hpp"
#include "msa/synthetic.hpp"

using namespace msa;

namespace {

struct World {
  Dataset data;
  Classifier model;
};

// A small trained MLP on 8x8 synthetic images; shared by the tests below.
const World& world() {
  static const World w = [] {
    SyntheticConfig sc;
    sc.n = 700;
    sc.shape = {3, 8, 8};
    sc.num_classes = 4;
    World out;
    out.data = make_synthetic_dataset(sc);
    TrainConfig tc;
    tc.arch = Architecture::Mlp;
    tc.epochs = 4;
    tc.seed = 1;
    out.model = train_classifier(out.data.slice(0, 500), tc).model;
    return out;
  }();
  return w;
}

std::shared_ptr<const ControllerParams> random_controllers(std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return std::make_shared<const ControllerParams>(ControllerParams::initialized(rng));
}

void expect_same(const AttackResult& a, const AttackResult& b) {
  EXPECT_EQ(a.xi, b.xi);
  EXPECT_EQ(a.queries, b.queries);
  EXPECT_EQ(a.best_loss, b.best_loss);
  ASSERT_EQ(a.trajectory.size(), b.trajectory.size());
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    EXPECT_EQ(a.trajectory[i].size, b.trajectory[i].size);
    EXPECT_EQ(a.trajectory[i].color, b.trajectory[i].color);
    EXPECT_EQ(a.trajectory[i].proposal_loss, b.trajectory[i].proposal_loss);
  }
}

void check_invariants(const AttackConfig& base) {
  const auto& w = world();
  const auto f = ModelHandle::black_box(w.model);
  for (std::size_t idx = 500; idx < 520; ++idx) {
    if (base.loss.target == w.data.label(idx)) continue;
    const auto x = w.data.image(idx);
    AttackConfig cfg = base;
    cfg.seed = idx;
    cfg.record_trajectory = true;
    std::size_t seen = 0;
    cfg.observer = [&](const Perturbation& xi, bool) {
      ++seen;
      EXPECT_TRUE(cfg.threat.contains(xi));
      const auto a = apply(x, xi);
      for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_GE(a[i], 0.0);
        ASSERT_LE(a[i], 1.0);
      }
      Tensor diff(x.shape());
      for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - x[i];
      EXPECT_TRUE(cfg.threat.contains(diff));
    };
    const auto r = run_attack(f, x, w.data.label(idx), cfg);
    EXPECT_EQ(r.queries, seen);
    EXPECT_EQ(r.queries, r.trajectory.size());  // one init query plus one per proposal
    EXPECT_LE(r.queries, cfg.budget);
    if (!r.success) {
      EXPECT_EQ(r.queries, cfg.budget);
    }
    for (std::size_t k = 1; k < r.trajectory.size(); ++k) {
      EXPECT_GE(r.trajectory[k].best_loss, r.trajectory[k - 1].best_loss);
      EXPECT_EQ(r.trajectory[k].accepted, r.trajectory[k].proposal_loss > r.trajectory[k - 1].best_loss);
      EXPECT_EQ(r.trajectory[k].query, k + 1);
    }
    EXPECT_EQ(r.best_loss, r.trajectory.back().best_loss);
  }
}

}  // namespace

TEST(AttackLoop, InvariantsLinfSa) {
  AttackConfig c;
  c.budget = 300;
  check_invariants(c);
}

TEST(AttackLoop, InvariantsLinfControllers) {
  AttackConfig c;
  c.budget = 300;
  c.schedule = ScheduleKind::Controller;
  c.colors = ColorSampling::Controller;
  c.controllers = random_controllers(3);
  check_invariants(c);
}

TEST(AttackLoop, InvariantsL2AaNoEarlyStop) {
  AttackConfig c;
  c.threat = ThreatModel(Norm::L2, 0.5);
  c.schedule = ScheduleKind::AA;
  c.budget = 200;
  c.early_stop = false;
  check_invariants(c);
}

TEST(AttackLoop, InvariantsTargetedMargin) {
  AttackConfig c;
  c.budget = 200;
  c.loss = LossSpec::targeted_to(0, LossKind::Margin);
  check_invariants(c);
}

TEST(AttackLoop, BudgetOneOnlyInitializes) {
  const auto& w = world();
  AttackConfig c;
  c.budget = 1;
  c.record_trajectory = true;
  const auto r = run_attack(ModelHandle::black_box(w.model), w.data.image(510), w.data.label(510), c);
  EXPECT_EQ(r.queries, 1u);
  ASSERT_EQ(r.trajectory.size(), 1u);
  for (double v : r.xi.values()) EXPECT_EQ(std::abs(v), c.threat.epsilon);
}

// Uniform scores: no proposal strictly improves the loss, nothing is accepted.
// argmax of a tie is class 0, so label 0 stays correctly classified.
TEST(AttackLoop, ConstantClassifierNeverAccepts) {
  const Classifier flat(Architecture::Mlp, Shape{3, 8, 8}, 4);
  AttackConfig c;
  c.budget = 100;
  c.record_trajectory = true;
  const ImageTensor img(Shape{3, 8, 8}, std::vector<double>(192, 0.5));
  const auto r = run_attack(ModelHandle::black_box(flat), img, 0, c);
  EXPECT_EQ(r.queries, 100u);
  for (std::size_t k = 1; k < r.trajectory.size(); ++k) EXPECT_FALSE(r.trajectory[k].accepted);
  EXPECT_FALSE(r.success);
}

TEST(AttackLoop, SameSeedSameResult) {
  const auto& w = world();
  AttackConfig c;
  c.budget = 200;
  c.seed = 77;
  c.record_trajectory = true;
  const auto f = ModelHandle::black_box(w.model);
  expect_same(run_attack(f, w.data.image(505), w.data.label(505), c),
              run_attack(f, w.data.image(505), w.data.label(505), c));
}

TEST(AttackLoop, RejectsBadConfig) {
  const auto& w = world();
  const auto f = ModelHandle::black_box(w.model);
  AttackConfig c;
  c.budget = 0;
  EXPECT_THROW(run_attack(f, w.data.image(0), 0, c), std::invalid_argument);
  c.budget = 10;
  c.schedule = ScheduleKind::Controller;
  EXPECT_THROW(run_attack(f, w.data.image(0), 0, c), std::invalid_argument);
  c.schedule = ScheduleKind::SA;
  EXPECT_THROW(run_attack(f, ImageTensor(Shape{3, 8, 7}, std::vector<double>(168, 0.5)), 0, c), ShapeMismatch);
}

TEST(Batch, DeterministicAcrossThreadCounts) {
  const auto& w = world();
  const auto f = ModelHandle::black_box(w.model);
  AttackConfig c;
  c.budget = 200;
  c.seed = 5;
  c.record_trajectory = true;
  c.schedule = ScheduleKind::Controller;
  c.colors = ColorSampling::Controller;
  c.controllers = random_controllers(4);
  const auto one = run_batch(f, w.data, 500, 560, c, 1);
  for (std::size_t threads : {4u, 8u}) {
    const auto many = run_batch(f, w.data, 500, 560, c, threads);
    ASSERT_EQ(one.items.size(), many.items.size());
    for (std::size_t i = 0; i < one.items.size(); ++i) {
      ASSERT_EQ(one.items[i].attack.has_value(), many.items[i].attack.has_value());
      if (one.items[i].attack) expect_same(*one.items[i].attack, *many.items[i].attack);
    }
    EXPECT_EQ(trajectory_csv(one.items), trajectory_csv(many.items));
    EXPECT_EQ(one.summary.robust_accuracy, many.summary.robust_accuracy);
  }
}

TEST(Batch, SummaryAndCurve) {
  const auto& w = world();
  AttackConfig c;
  c.budget = 300;
  const auto b = run_batch(ModelHandle::black_box(w.model), w.data, 500, 600, c, 2);
  EXPECT_EQ(b.summary.images, 100u);
  EXPECT_EQ(b.summary.failures, 0u);
  EXPECT_GT(b.summary.clean_accuracy, 0.5);
  EXPECT_LE(b.summary.robust_accuracy, b.summary.clean_accuracy);
  const auto curve = robust_accuracy_curve(b.items, {0, 1, 50, 300});
  EXPECT_EQ(curve[0], b.summary.clean_accuracy);
  EXPECT_EQ(curve[3], b.summary.robust_accuracy);
  for (std::size_t k = 1; k < curve.size(); ++k) EXPECT_LE(curve[k], curve[k - 1]);
  EXPECT_THROW(robust_accuracy_curve(b.items, {301}), std::invalid_argument);
}

TEST(Batch, RandomTargetsDifferFromLabel) {
  const auto& w = world();
  AttackConfig c;
  c.budget = 20;
  c.target_mode = TargetMode::Random;
  const auto b = run_batch(ModelHandle::black_box(w.model), w.data, 500, 540, c, 1);
  for (const auto& it : b.items) {
    ASSERT_TRUE(it.target.has_value());
    EXPECT_NE(*it.target, it.label);
    EXPECT_LT(*it.target, 4u);
  }
}

// With the SA schedule and uniform colors the controllers must not touch the
// random stream: the proposal sequence is identical with or without them.
TEST(Degeneration, SaUniformIgnoresControllers) {
  const auto& w = world();
  const auto f = ModelHandle::black_box(w.model);
  for (Norm norm : {Norm::Linf, Norm::L2}) {
    AttackConfig plain;
    plain.threat = ThreatModel(norm, norm == Norm::Linf ? 8.0 / 255.0 : 0.5);
    plain.budget = 300;
    plain.early_stop = false;
    plain.seed = 11;
    AttackConfig with = plain;
    with.controllers = random_controllers(12);
    std::vector<Perturbation> a, b;
    plain.observer = [&](const Perturbation& xi, bool) { a.push_back(xi); };
    with.observer = [&](const Perturbation& xi, bool) { b.push_back(xi); };
    run_attack(f, w.data.image(520), w.data.label(520), plain);
    run_attack(f, w.data.image(520), w.data.label(520), with);
    ASSERT_EQ(a.size(), 300u);
    EXPECT_EQ(a, b);
  }
}
