#pragma once

// Square Attack proposal machinery: square-size schedules, position and
// corner-color sampling, stripe initialization, discrete and relaxed linf
// squares, and the l2 mass-transfer update.

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msa/core.hpp"
#include "msa/dual.hpp"

namespace msa {

// ---------------------------------------------------------------------------
// Schedules

// Halving points as per-mille of the budget: 0.1, 0.5, 2, 10, 20, 40, 60, 80 %.
inline constexpr std::array<std::uint64_t, 8> kHalvingPerMille{1, 5, 20, 100, 200, 400, 600, 800};
inline constexpr std::uint64_t kAutoAttackVirtualBudget = 10000;
inline constexpr double kAutoAttackP0 = 0.8;

// Number of halving points passed at query t; exact integer comparison t >= b * T.
inline std::size_t halvings_passed(std::uint64_t t, std::uint64_t budget) {
  std::size_t n = 0;
  for (std::uint64_t b : kHalvingPerMille)
    if (t * 1000 >= b * budget) ++n;
  return n;
}

inline double sa_schedule(std::uint64_t t, std::uint64_t budget, double p0) {
  if (budget == 0 || t >= budget) throw std::invalid_argument("sa_schedule: need 0 <= t < T");
  if (!(p0 > 0.0 && p0 <= 1.0)) throw std::invalid_argument("sa_schedule: p0 must lie in (0, 1]");
  return std::ldexp(p0, -static_cast<int>(halvings_passed(t, budget)));
}

// AutoAttack variant: halving points fixed as if the budget were 10000.
inline double aa_schedule(std::uint64_t t, double p0 = kAutoAttackP0) {
  return std::ldexp(p0, -static_cast<int>(halvings_passed(t, kAutoAttackVirtualBudget)));
}

// Side length covering a fraction p of an h x w image.
inline std::size_t p_to_size(double p, std::size_t h, std::size_t w) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("p_to_size: p must lie in (0, 1]");
  const double s = std::round(std::sqrt(p * static_cast<double>(h * w)));
  return static_cast<std::size_t>(std::clamp(s, 1.0, static_cast<double>(std::min(h, w))));
}

enum class ScheduleKind { SA, AA, Controller };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::SA: return "sa";
    case ScheduleKind::AA: return "aa";
    case ScheduleKind::Controller: return "msa";
  }
  return "?";
}

inline ScheduleKind schedule_from_string(const std::string& s) {
  if (s == "sa") return ScheduleKind::SA;
  if (s == "aa") return ScheduleKind::AA;
  if (s == "msa" || s == "controller") return ScheduleKind::Controller;
  throw std::invalid_argument("unknown schedule '" + s + "' (expected sa, aa or msa)");
}

// CSV rows (t, p, s) of a hand-designed schedule.
inline std::string schedule_csv(ScheduleKind kind, std::uint64_t budget, double p0, std::size_t h, std::size_t w) {
  if (kind == ScheduleKind::Controller) throw std::invalid_argument("schedule_csv: controller schedules are adaptive");
  std::ostringstream os;
  os.precision(17);
  os << "t,p,s\n";
  for (std::uint64_t t = 0; t < budget; ++t) {
    const double p = kind == ScheduleKind::SA ? sa_schedule(t, budget, p0) : aa_schedule(t, p0);
    os << t << ',' << p << ',' << p_to_size(p, h, w) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Sampling

struct Position {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

inline Position sample_position(std::size_t s, std::size_t h, std::size_t w, Rng& rng) {
  if (s == 0 || s > std::min(h, w))
    throw std::invalid_argument("sample_position: square size " + std::to_string(s) + " does not fit " +
                                std::to_string(h) + "x" + std::to_string(w));
  Position p;
  p.row = uniform_index(rng, h - s + 1);
  p.col = uniform_index(rng, w - s + 1);
  return p;
}

// All 2^c sign patterns; bit k of the index set means +eps on channel k.
inline std::vector<std::vector<double>> corner_colors(std::size_t channels, double eps) {
  if (channels == 0) throw std::invalid_argument("corner_colors: need at least one channel");
  if (channels > 16) throw std::invalid_argument("corner_colors: too many channels");
  const std::size_t m = std::size_t{1} << channels;
  std::vector<std::vector<double>> colors(m, std::vector<double>(channels));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t ch = 0; ch < channels; ++ch) colors[i][ch] = (i >> ch) & 1U ? eps : -eps;
  return colors;
}

// Unit signs of corner color `index`, same bit order as corner_colors.
inline std::vector<double> sign_pattern(std::size_t index, std::size_t channels) {
  std::vector<double> s(channels);
  for (std::size_t ch = 0; ch < channels; ++ch) s[ch] = (index >> ch) & 1U ? 1.0 : -1.0;
  return s;
}

// Width-1 vertical stripes: one +-eps value per (channel, column).
inline Perturbation stripe_init(Shape shape, double eps, Rng& rng) {
  Perturbation xi(shape);
  for (std::size_t ch = 0; ch < shape.c; ++ch)
    for (std::size_t col = 0; col < shape.w; ++col) {
      const double v = (rng() >> 63) ? eps : -eps;
      for (std::size_t row = 0; row < shape.h; ++row) xi.at(ch, row, col) = v;
    }
  return xi;
}

// ---------------------------------------------------------------------------
// linf squares

struct SquareUpdate {
  double size = 1.0;  // integer-valued in discrete mode
  Position pos;       // top-left
  std::size_t color_index = 0;
  std::vector<double> color;  // one value per channel
};

inline std::size_t discrete_size(const SquareUpdate& u) {
  const double s = std::round(u.size);
  if (s < 1.0 || s != u.size) throw std::invalid_argument("discrete square needs a positive integer size");
  return static_cast<std::size_t>(s);
}

inline void check_square_bounds(std::size_t s, Position p, Shape shape) {
  if (s == 0 || p.row + s > shape.h || p.col + s > shape.w)
    throw std::out_of_range("square of size " + std::to_string(s) + " at (" + std::to_string(p.row) + "," +
                            std::to_string(p.col) + ") exceeds " + shape.str());
}

// Zero outside the square, the color inside.
inline Tensor make_square_delta(const SquareUpdate& u, Shape shape) {
  const std::size_t s = discrete_size(u);
  check_square_bounds(s, u.pos, shape);
  if (u.color.size() != shape.c) throw ShapeMismatch("square color has wrong channel count");
  Tensor delta(shape, 0.0);
  for (std::size_t ch = 0; ch < shape.c; ++ch)
    for (std::size_t r = u.pos.row; r < u.pos.row + s; ++r)
      for (std::size_t c = u.pos.col; c < u.pos.col + s; ++c) delta.at(ch, r, c) = u.color[ch];
  return delta;
}

// Proposal xi' for a discrete square: the square's pixels take its color.
inline Perturbation overwrite_square(const Perturbation& xi, const SquareUpdate& u) {
  const std::size_t s = discrete_size(u);
  check_square_bounds(s, u.pos, xi.shape());
  Perturbation out = xi;
  for (std::size_t ch = 0; ch < xi.shape().c; ++ch)
    for (std::size_t r = u.pos.row; r < u.pos.row + s; ++r)
      for (std::size_t c = u.pos.col; c < u.pos.col + s; ++c) out.at(ch, r, c) = u.color[ch];
  return out;
}

// Largest odd integer not exceeding s (s >= 1).
inline std::size_t odd_floor(double s) {
  if (!(s >= 1.0)) throw std::invalid_argument("odd_floor: size must be >= 1");
  return 2 * static_cast<std::size_t>(std::floor((s - 1.0) / 2.0)) + 1;
}

inline double odd_fraction(double s) { return (s - static_cast<double>(odd_floor(s))) / 2.0; }

struct RelaxedSquare {
  Perturbation proposal;           // new perturbation values
  Tensor d_size;                   // d proposal / d s
  std::vector<double> coverage;    // per pixel (h * w): weight of the new color
  std::vector<double> d_coverage;  // d coverage / d s
};

// Continuous-size square: the odd(s) inner block (top-left at pos) takes the
// color, the 1-pixel ring blends k * color + (1 - k) * background with
// k = frac on edge neighbours and frac^2 on the diagonal corners. odd(s) is
// locally constant, so d/ds only touches the ring. Ring pixels outside the
// image are dropped.
inline RelaxedSquare make_relaxed_square_delta(double s, Position pos, std::span<const double> color,
                                               const Perturbation& background) {
  const Shape shape = background.shape();
  if (color.size() != shape.c) throw ShapeMismatch("relaxed square color has wrong channel count");
  const std::size_t o = odd_floor(s);
  check_square_bounds(o, pos, shape);
  const double frac = (s - static_cast<double>(o)) / 2.0;

  RelaxedSquare out;
  out.coverage.assign(shape.plane(), 0.0);
  out.d_coverage.assign(shape.plane(), 0.0);
  const auto r0 = static_cast<std::ptrdiff_t>(pos.row), c0 = static_cast<std::ptrdiff_t>(pos.col);
  const auto on = static_cast<std::ptrdiff_t>(o);
  for (std::ptrdiff_t r = r0 - 1; r <= r0 + on; ++r) {
    if (r < 0 || r >= static_cast<std::ptrdiff_t>(shape.h)) continue;
    const bool row_ring = r == r0 - 1 || r == r0 + on;
    for (std::ptrdiff_t c = c0 - 1; c <= c0 + on; ++c) {
      if (c < 0 || c >= static_cast<std::ptrdiff_t>(shape.w)) continue;
      const bool col_ring = c == c0 - 1 || c == c0 + on;
      const std::size_t p = static_cast<std::size_t>(r) * shape.w + static_cast<std::size_t>(c);
      if (row_ring && col_ring) {
        out.coverage[p] = frac * frac;
        out.d_coverage[p] = frac;  // d(frac^2)/ds, dfrac/ds = 1/2
      } else if (row_ring || col_ring) {
        out.coverage[p] = frac;
        out.d_coverage[p] = 0.5;
      } else {
        out.coverage[p] = 1.0;
      }
    }
  }
  out.proposal = background;
  out.d_size = Tensor(shape, 0.0);
  for (std::size_t ch = 0; ch < shape.c; ++ch)
    for (std::size_t p = 0; p < shape.plane(); ++p) {
      const double k = out.coverage[p];
      if (k == 0.0 && out.d_coverage[p] == 0.0) continue;
      const std::size_t i = ch * shape.plane() + p;
      const double bg = background[i];
      out.proposal[i] = k == 1.0 ? color[ch] : k * color[ch] + (1.0 - k) * bg;
      out.d_size[i] = out.d_coverage[p] * (color[ch] - bg);
    }
  return out;
}

// ---------------------------------------------------------------------------
// l2 mass transfer

// Bilinear mound on an n x n window, unit l2 norm.
inline std::vector<double> l2_mound(std::size_t n) {
  std::vector<double> m(n * n);
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double u = (2.0 * i + 1.0) / static_cast<double>(n) - 1.0;
      const double v = (2.0 * j + 1.0) / static_cast<double>(n) - 1.0;
      const double val = (1.0 - std::abs(u)) * (1.0 - std::abs(v));
      m[i * n + j] = val;
      sq += val * val;
    }
  const double inv = 1.0 / std::sqrt(sq);
  for (double& v : m) v *= inv;
  return m;
}

// Tiled mound with random per-(tile, channel) signs, scaled to norm eps.
inline Perturbation l2_init(Shape shape, double eps, Rng& rng) {
  const std::size_t tile = std::max<std::size_t>(shape.h / 5, 1);
  const auto mound = l2_mound(tile);
  Perturbation xi(shape);
  for (std::size_t r0 = 0; r0 < shape.h; r0 += tile)
    for (std::size_t c0 = 0; c0 < shape.w; c0 += tile)
      for (std::size_t ch = 0; ch < shape.c; ++ch) {
        const double sign = (rng() >> 63) ? 1.0 : -1.0;
        for (std::size_t i = 0; i < tile && r0 + i < shape.h; ++i)
          for (std::size_t j = 0; j < tile && c0 + j < shape.w; ++j) xi.at(ch, r0 + i, c0 + j) += sign * mound[i * tile + j];
      }
  const double n = l2_norm(xi.values());
  for (double& v : xi.values()) v *= eps / n;
  return project_l2(std::move(xi), eps);
}

struct L2Windows {
  std::size_t inner = 1;  // odd(s) (relaxed) or the integer size (discrete)
  Position w1;            // receives the mass
  Position w2;            // gives its mass
  std::vector<double> signs;  // +-1 per channel
};

// Bookkeeping of one mass transfer, for the conservation identity.
template <class S>
struct L2Transfer {
  std::vector<S> xi;       // perturbation after the update, before projection
  S budget_sq{};           // squared l2 mass handed to W1
  S ring_norm_sq{};        // ||W2^B||^2 before
  S ring_norm_sq_new{};    // ||W2^B||^2 after
};

// Collects the mass of W2 (zeroed) and frac of the norm of its 1-pixel ring
// (scaled by sqrt(1 - frac^2)), adds W1's current mass and any slack up to
// eps, and lays the total out on W1 as mound * signs + old W1 direction.
// Squared masses add, so the l2 norm is conserved up to the final projection.
// Templated on the scalar so that frac can carry a derivative.
template <class S>
L2Transfer<S> l2_mass_transfer(std::span<const double> xi0, Shape shape, const L2Windows& win, S frac, double eps) {
  using std::sqrt;
  if (xi0.size() != shape.size()) throw ShapeMismatch("l2 update: perturbation shape");
  if (win.signs.size() != shape.c) throw ShapeMismatch("l2 update: signs need one entry per channel");
  check_square_bounds(win.inner, win.w1, shape);
  check_square_bounds(win.inner, win.w2, shape);
  const std::size_t n = win.inner;
  L2Transfer<S> out;
  out.xi.assign(xi0.begin(), xi0.end());
  double orig_sq = 0.0;
  for (double v : xi0) orig_sq += v * v;

  auto idx = [&](std::size_t ch, std::size_t r, std::size_t c) { return (ch * shape.h + r) * shape.w + c; };
  auto in_window = [&](Position p, std::ptrdiff_t r, std::ptrdiff_t c) {
    return r >= static_cast<std::ptrdiff_t>(p.row) && r < static_cast<std::ptrdiff_t>(p.row + n) &&
           c >= static_cast<std::ptrdiff_t>(p.col) && c < static_cast<std::ptrdiff_t>(p.col + n);
  };

  // Step 1: take the mass from W2 and frac of its ring.
  S budget{};
  for (std::size_t ch = 0; ch < shape.c; ++ch)
    for (std::size_t r = win.w2.row; r < win.w2.row + n; ++r)
      for (std::size_t c = win.w2.col; c < win.w2.col + n; ++c) {
        S& v = out.xi[idx(ch, r, c)];
        budget = budget + v * v;
        v = S{};
      }
  const S keep = sqrt(S{1.0} - frac * frac);
  S ring_sq{}, ring_sq_new{};
  for (std::ptrdiff_t r = static_cast<std::ptrdiff_t>(win.w2.row) - 1; r <= static_cast<std::ptrdiff_t>(win.w2.row + n); ++r) {
    if (r < 0 || r >= static_cast<std::ptrdiff_t>(shape.h)) continue;
    for (std::ptrdiff_t c = static_cast<std::ptrdiff_t>(win.w2.col) - 1; c <= static_cast<std::ptrdiff_t>(win.w2.col + n); ++c) {
      if (c < 0 || c >= static_cast<std::ptrdiff_t>(shape.w) || in_window(win.w2, r, c)) continue;
      for (std::size_t ch = 0; ch < shape.c; ++ch) {
        S& v = out.xi[idx(ch, static_cast<std::size_t>(r), static_cast<std::size_t>(c))];
        ring_sq = ring_sq + v * v;
        v = keep * v;
        ring_sq_new = ring_sq_new + v * v;
      }
    }
  }
  budget = budget + frac * frac * ring_sq;
  out.ring_norm_sq = ring_sq;
  out.ring_norm_sq_new = ring_sq_new;

  // Step 2: W1 absorbs its own mass plus the budget.
  S old_sq{};
  for (std::size_t ch = 0; ch < shape.c; ++ch)
    for (std::size_t r = win.w1.row; r < win.w1.row + n; ++r)
      for (std::size_t c = win.w1.col; c < win.w1.col + n; ++c) {
        const S& v = out.xi[idx(ch, r, c)];
        old_sq = old_sq + v * v;
      }
  budget = budget + old_sq + S{std::max(eps * eps - orig_sq, 0.0)};
  out.budget_sq = budget;

  const auto mound = l2_mound(n);
  const S old_norm = sqrt(old_sq + S{1e-20});
  std::vector<S> dir(shape.c * n * n);
  S dir_sq{};
  for (std::size_t ch = 0; ch < shape.c; ++ch)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        S d = S{win.signs[ch] * mound[i * n + j]} + out.xi[idx(ch, win.w1.row + i, win.w1.col + j)] / old_norm;
        dir_sq = dir_sq + d * d;
        dir[(ch * n + i) * n + j] = d;
      }
  const S scale = sqrt(budget) / sqrt(dir_sq);
  for (std::size_t ch = 0; ch < shape.c; ++ch)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out.xi[idx(ch, win.w1.row + i, win.w1.col + j)] = dir[(ch * n + i) * n + j] * scale;
  return out;
}

struct RelaxedL2Update {
  Perturbation proposal;  // projected to the eps-ball
  Tensor d_size;          // d proposal / d s (through frac(s))
  L2Transfer<double> transfer;
};

// Relaxed l2 update at real size s: windows of odd(s), ring mass moved with
// frac(s). windows.inner must equal odd(s).
inline RelaxedL2Update make_relaxed_l2_update(double s, const Perturbation& xi, L2Windows windows, double eps) {
  windows.inner = odd_floor(s);
  const double frac = odd_fraction(s);
  const auto dual = l2_mass_transfer<Dual>(xi.values(), xi.shape(), windows, Dual{frac, 0.5}, eps);
  RelaxedL2Update out;
  out.transfer.xi.resize(dual.xi.size());
  std::vector<double> dxi(dual.xi.size());
  for (std::size_t i = 0; i < dual.xi.size(); ++i) {
    out.transfer.xi[i] = dual.xi[i].value;
    dxi[i] = dual.xi[i].deriv;
  }
  out.transfer.budget_sq = dual.budget_sq.value;
  out.transfer.ring_norm_sq = dual.ring_norm_sq.value;
  out.transfer.ring_norm_sq_new = dual.ring_norm_sq_new.value;

  // Projection xi * min(1, eps/||xi||), differentiated through the norm.
  double sq = 0.0, dsq = 0.0;
  for (std::size_t i = 0; i < dxi.size(); ++i) {
    sq += out.transfer.xi[i] * out.transfer.xi[i];
    dsq += 2.0 * out.transfer.xi[i] * dxi[i];
  }
  const double norm = std::sqrt(sq);
  Perturbation raw(xi.shape(), out.transfer.xi);
  out.proposal = project_l2(raw, eps);
  out.d_size = Tensor(xi.shape(), dxi);
  if (norm > eps) {
    const double dnorm = dsq / (2.0 * norm);
    for (std::size_t i = 0; i < dxi.size(); ++i)
      out.d_size[i] = eps * (dxi[i] / norm - out.transfer.xi[i] * dnorm / (norm * norm));
  }
  return out;
}

// Discrete l2 update with integer window size (no ring transfer).
inline Perturbation make_l2_update(const Perturbation& xi, const L2Windows& windows, double eps) {
  auto t = l2_mass_transfer<double>(xi.values(), xi.shape(), windows, 0.0, eps);
  return project_l2(Perturbation(xi.shape(), std::move(t.xi)), eps);
}

}  // namespace msa
