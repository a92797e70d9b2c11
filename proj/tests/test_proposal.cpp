#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "msa/proposal.hpp"
#include "msa/tinynn.hpp"

using namespace msa;

namespace {

// Brute-force reference: p0 / 2^k where k counts the percentages already reached.
double reference_sa(std::uint64_t t, std::uint64_t T, double p0) {
  const double pct[] = {0.1, 0.5, 2, 10, 20, 40, 60, 80};
  double p = p0;
  for (double q : pct)
    if (static_cast<double>(t) >= q / 100.0 * static_cast<double>(T) - 1e-9) p /= 2.0;
  return p;
}

Perturbation random_xi(Shape s, double eps, Rng& rng) {
  std::uniform_real_distribution<double> u(-eps, eps);
  Perturbation xi(s);
  for (double& v : xi.values()) v = u(rng);
  return xi;
}

}  // namespace

TEST(SaSchedule, BreakpointTable) {
  for (std::uint64_t T : {500u, 1000u, 5000u, 10000u})
    for (std::uint64_t t = 0; t < T; ++t) ASSERT_EQ(sa_schedule(t, T, 0.3), reference_sa(t, T, 0.3)) << T << " " << t;
  // T = 1000: halvings at 1, 5, 20, 100, 200, 400, 600, 800.
  EXPECT_EQ(sa_schedule(0, 1000, 0.3), 0.3);
  EXPECT_EQ(sa_schedule(1, 1000, 0.3), 0.15);
  EXPECT_EQ(sa_schedule(4, 1000, 0.3), 0.15);
  EXPECT_EQ(sa_schedule(5, 1000, 0.3), 0.075);
  EXPECT_EQ(sa_schedule(799, 1000, 0.3), 0.3 / 128);
  EXPECT_EQ(sa_schedule(800, 1000, 0.3), 0.3 / 256);
  EXPECT_EQ(sa_schedule(999, 1000, 0.3), 0.3 / 256);
}

TEST(SaSchedule, RejectsOutOfRange) {
  EXPECT_THROW(sa_schedule(10, 10, 0.3), std::invalid_argument);
  EXPECT_THROW(sa_schedule(0, 0, 0.3), std::invalid_argument);
  EXPECT_THROW(sa_schedule(0, 10, 0.0), std::invalid_argument);
}

TEST(AaSchedule, SixHalvingsWithinFiveThousand) {
  EXPECT_EQ(aa_schedule(0), 0.8);
  EXPECT_EQ(aa_schedule(4999), 0.8 / 64);
  EXPECT_EQ(aa_schedule(5000), 0.8 / 64);
  EXPECT_EQ(aa_schedule(6000), 0.8 / 128);
  std::size_t halvings = 0;
  for (std::uint64_t t = 1; t < 5000; ++t) halvings += aa_schedule(t) < aa_schedule(t - 1);
  EXPECT_EQ(halvings, 6u);
}

TEST(PToSize, ClampedRounding) {
  EXPECT_EQ(p_to_size(1.0, 16, 16), 16u);
  EXPECT_EQ(p_to_size(0.3, 32, 32), 18u);  // sqrt(307.2) = 17.5
  EXPECT_EQ(p_to_size(0.3 / 256, 16, 16), 1u);
  EXPECT_EQ(p_to_size(0.5, 4, 16), 4u);
  EXPECT_THROW(p_to_size(0.0, 16, 16), std::invalid_argument);
}

TEST(ScheduleCsv, OneRowPerQuery) {
  const auto csv = schedule_csv(ScheduleKind::SA, 10, 0.3, 16, 16);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
  EXPECT_THROW(schedule_csv(ScheduleKind::Controller, 10, 0.3, 16, 16), std::invalid_argument);
}

TEST(Sampling, PositionUniformChiSquare) {
  Rng rng = make_rng(40);
  const std::size_t s = 13, h = 16, w = 16;  // 4 x 4 = 16 positions
  std::vector<int> counts(16, 0);
  const int n = 64000;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_position(s, h, w, rng);
    ASSERT_LE(p.row + s, h);
    ASSERT_LE(p.col + s, w);
    ++counts[p.row * 4 + p.col];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - n / 16.0) * (c - n / 16.0) / (n / 16.0);
  EXPECT_LT(chi2, 30.578);  // chi^2_{0.99}(15)
  EXPECT_THROW(sample_position(17, 16, 16, rng), std::invalid_argument);
}

TEST(Sampling, CornerColorsEnumerateSigns) {
  const auto c = corner_colors(3, 0.1);
  ASSERT_EQ(c.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i + 1; j < 8; ++j) EXPECT_NE(c[i], c[j]);
  for (const auto& col : c)
    for (double v : col) EXPECT_EQ(std::abs(v), 0.1);
}

TEST(Sampling, StripeInitColumnsConstantAtRadius) {
  Rng rng = make_rng(41);
  const Shape s{3, 16, 16};
  const auto xi = stripe_init(s, 0.03, rng);
  int plus = 0;
  for (std::size_t ch = 0; ch < s.c; ++ch)
    for (std::size_t c = 0; c < s.w; ++c) {
      plus += xi.at(ch, 0, c) > 0;
      for (std::size_t r = 0; r < s.h; ++r) {
        EXPECT_EQ(std::abs(xi.at(ch, r, c)), 0.03);
        EXPECT_EQ(xi.at(ch, r, c), xi.at(ch, 0, c));
      }
    }
  EXPECT_GT(plus, 0);
  EXPECT_LT(plus, 48);
}

TEST(Square, OverwriteOnlyInsideWindow) {
  Rng rng = make_rng(42);
  const Shape s{3, 10, 12};
  const auto xi = random_xi(s, 0.03, rng);
  const auto col = corner_colors(3, 0.03)[5];
  SquareUpdate u{4.0, {3, 7}, 5, col};
  const auto out = overwrite_square(xi, u);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t r = 0; r < 10; ++r)
      for (std::size_t c = 0; c < 12; ++c) {
        const bool in = r >= 3 && r < 7 && c >= 7 && c < 11;
        EXPECT_EQ(out.at(ch, r, c), in ? col[ch] : xi.at(ch, r, c));
      }
  u.pos = {3, 9};
  EXPECT_THROW(overwrite_square(xi, u), std::out_of_range);
  u.size = 2.5;
  EXPECT_THROW(overwrite_square(xi, u), std::invalid_argument);
}

// Odd integer sizes have frac = 0, so the relaxed square is the discrete one.
TEST(RelaxedSquare, EqualsDiscreteAtOddIntegers) {
  Rng rng = make_rng(43);
  const Shape s{3, 16, 16};
  const auto colors = corner_colors(3, 0.03);
  for (std::size_t o = 1; o <= 15; o += 2)
    for (int trial = 0; trial < 20; ++trial) {
      const auto xi = random_xi(s, 0.03, rng);
      const auto pos = sample_position(o, 16, 16, rng);
      const auto& col = colors[uniform_index(rng, 8)];
      const auto relaxed = make_relaxed_square_delta(static_cast<double>(o), pos, col, xi);
      const auto discrete = overwrite_square(xi, SquareUpdate{static_cast<double>(o), pos, 0, col});
      ASSERT_EQ(relaxed.proposal, discrete) << "size " << o;
    }
}

TEST(RelaxedSquare, SizeDerivativeMatchesFiniteDifferences) {
  Rng rng = make_rng(44);
  const Shape s{3, 16, 16};
  const auto colors = corner_colors(3, 0.03);
  std::uniform_real_distribution<double> us(1.0, 16.0);
  int checked = 0;
  while (checked < 200) {
    const double sz = us(rng);
    const double fr = odd_fraction(sz);
    if (fr < 1e-4 || fr > 1.0 - 1e-4) continue;  // stay off the odd-integer kinks
    const auto xi = random_xi(s, 0.03, rng);
    const auto pos = sample_position(odd_floor(sz), 16, 16, rng);
    const auto& col = colors[uniform_index(rng, 8)];
    const auto rs = make_relaxed_square_delta(sz, pos, col, xi);
    const double h = 1e-5;
    const auto up = make_relaxed_square_delta(sz + h, pos, col, xi).proposal;
    const auto dn = make_relaxed_square_delta(sz - h, pos, col, xi).proposal;
    std::vector<double> fd(xi.size());
    for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = (up[i] - dn[i]) / (2 * h);
    ASSERT_LT(nn::relative_error(rs.d_size.values(), fd), 1e-5) << "s " << sz;
    ++checked;
  }
}

TEST(RelaxedSquare, RingCoverage) {
  const Shape s{1, 8, 8};
  const Perturbation zero(s);
  const std::vector<double> col{1.0};
  const auto rs = make_relaxed_square_delta(4.0, {2, 2}, col, zero);  // odd 3, frac 0.5
  EXPECT_EQ(rs.proposal.at(0, 3, 3), 1.0);
  EXPECT_EQ(rs.proposal.at(0, 1, 3), 0.5);
  EXPECT_EQ(rs.proposal.at(0, 1, 1), 0.25);
  EXPECT_EQ(rs.proposal.at(0, 5, 5), 0.25);
  EXPECT_EQ(rs.proposal.at(0, 0, 0), 0.0);
  EXPECT_EQ(rs.d_size.at(0, 1, 3), 0.5);
  EXPECT_EQ(rs.d_size.at(0, 1, 1), 0.5);
  EXPECT_EQ(rs.d_size.at(0, 3, 3), 0.0);
}

TEST(L2Update, MassConservationIdentity) {
  Rng rng = make_rng(45);
  const Shape s{3, 16, 16};
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> uf(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    Perturbation xi(s);
    for (double& v : xi.values()) v = g(rng);
    xi = project_l2(std::move(xi), 0.5);
    const std::size_t n = 1 + 2 * uniform_index(rng, 7);
    L2Windows win{n, sample_position(n, 16, 16, rng), sample_position(n, 16, 16, rng), sign_pattern(uniform_index(rng, 8), 3)};
    const double frac = uf(rng);
    const auto t = l2_mass_transfer<double>(xi.values(), s, win, frac, 0.5);
    ASSERT_NEAR(t.ring_norm_sq, t.ring_norm_sq_new + frac * frac * t.ring_norm_sq, 1e-10);
    ASSERT_LE(l2_norm(project_l2(Perturbation(s, t.xi), 0.5).values()), 0.5 * (1 + 8 * 2.2205e-16));
  }
}

TEST(L2Update, ConservesNormWhenWindowsAreDisjoint) {
  Rng rng = make_rng(46);
  const Shape s{3, 16, 16};
  const auto xi = l2_init(s, 0.5, rng);
  EXPECT_NEAR(l2_norm(xi.values()), 0.5, 1e-12);
  L2Windows win{3, {0, 0}, {10, 10}, {1, -1, 1}};
  const auto out = l2_mass_transfer<double>(xi.values(), s, win, 0.0, 0.5);
  EXPECT_NEAR(l2_norm(out.xi), 0.5, 1e-12);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t r = 10; r < 13; ++r)
      for (std::size_t c = 10; c < 13; ++c) EXPECT_EQ(out.xi[(ch * 16 + r) * 16 + c], 0.0);
}

TEST(L2Update, RelaxedDerivativeMatchesFiniteDifferences) {
  Rng rng = make_rng(47);
  const Shape s{3, 16, 16};
  std::uniform_real_distribution<double> us(1.0, 16.0);
  int checked = 0;
  while (checked < 50) {
    const double sz = us(rng);
    const double fr = odd_fraction(sz);
    if (fr < 1e-3 || fr > 1.0 - 1e-3) continue;
    const auto xi = l2_init(s, 0.5, rng);
    const std::size_t o = odd_floor(sz);
    L2Windows win{o, sample_position(o, 16, 16, rng), sample_position(o, 16, 16, rng), sign_pattern(uniform_index(rng, 8), 3)};
    const auto ru = make_relaxed_l2_update(sz, xi, win, 0.5);
    const double h = 1e-5;
    const auto up = make_relaxed_l2_update(sz + h, xi, win, 0.5).proposal;
    const auto dn = make_relaxed_l2_update(sz - h, xi, win, 0.5).proposal;
    std::vector<double> fd(xi.size());
    for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = (up[i] - dn[i]) / (2 * h);
    ASSERT_LT(nn::relative_error(ru.d_size.values(), fd), 1e-5) << "s " << sz;
    EXPECT_LE(l2_norm(ru.proposal.values()), 0.5 * (1 + 8 * 2.2205e-16));
    ++checked;
  }
}

TEST(L2Update, DiscreteEqualsRelaxedAtOddSizes) {
  Rng rng = make_rng(48);
  const Shape s{3, 16, 16};
  for (std::size_t o = 1; o <= 15; o += 2) {
    const auto xi = l2_init(s, 0.5, rng);
    L2Windows win{o, sample_position(o, 16, 16, rng), sample_position(o, 16, 16, rng), sign_pattern(3, 3)};
    EXPECT_EQ(make_l2_update(xi, win, 0.5), make_relaxed_l2_update(static_cast<double>(o), xi, win, 0.5).proposal);
  }
}
