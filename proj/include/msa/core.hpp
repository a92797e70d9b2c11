#pragma once

// Tensors, threat models, projections and classification losses shared by
// every other part of the engine.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msa {

// ---------------------------------------------------------------------------
// Errors

struct ShapeMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; spreads nearby seeds (seed ^ index) apart before
// they reach the Mersenne twister.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed) { return Rng{mix_seed(seed)}; }

// Uniform double in the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  constexpr double scale = 1.0 / 9007199254740992.0;  // 2^-53
  return (static_cast<double>(rng() >> 11) + 0.5) * scale;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(rng);
}

// ---------------------------------------------------------------------------
// Tensors

struct Shape {
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

// Dense channels x height x width array, row-major within a channel.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {
    if (shape.c == 0 || shape.h == 0 || shape.w == 0)
      throw std::invalid_argument("tensor dimensions must be positive, got " + shape.str());
  }
  Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (shape.c == 0 || shape.h == 0 || shape.w == 0)
      throw std::invalid_argument("tensor dimensions must be positive, got " + shape.str());
    if (data_.size() != shape_.size())
      throw ShapeMismatch("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t ch, std::size_t row, std::size_t col) {
    return data_[(ch * shape_.h + row) * shape_.w + col];
  }
  double at(std::size_t ch, std::size_t row, std::size_t col) const {
    return data_[(ch * shape_.h + row) * shape_.w + col];
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& vector() const { return data_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(what) + ": shape " + a.shape().str() + " vs " + b.shape().str());
}

// An input image with every value in [0, 1].
class ImageTensor : public Tensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(Tensor t) : Tensor(std::move(t)) {
    for (double v : values())
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument("image value outside [0,1]: " + std::to_string(v));
  }
  ImageTensor(Shape shape, std::vector<double> data) : ImageTensor(Tensor(shape, std::move(data))) {}
};

// Additive perturbation xi; ball membership is enforced by ThreatModel::project.
class Perturbation : public Tensor {
 public:
  Perturbation() = default;
  explicit Perturbation(Shape shape) : Tensor(shape, 0.0) {}
  explicit Perturbation(Tensor t) : Tensor(std::move(t)) {}
  Perturbation(Shape shape, std::vector<double> data) : Tensor(shape, std::move(data)) {}
};

inline double linf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Threat model

enum class Norm { Linf, L2 };

inline std::string to_string(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

inline Perturbation project_linf(Perturbation xi, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("project_linf: eps must be positive");
  for (double& v : xi.values()) v = std::clamp(v, -eps, eps);
  return xi;
}

inline Perturbation project_l2(Perturbation xi, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("project_l2: eps must be positive");
  const double norm = l2_norm(xi.values());
  if (norm <= eps) return xi;
  const double scale = eps / norm;
  for (double& v : xi.values()) v *= scale;
  // Rounding can leave the scaled vector a few ulps outside; nudge inward.
  for (int guard = 0; guard < 4 && l2_norm(xi.values()) > eps; ++guard)
    for (double& v : xi.values()) v = std::nextafter(v, 0.0);
  return xi;
}

struct ThreatModel {
  Norm norm = Norm::Linf;
  double epsilon = 8.0 / 255.0;

  ThreatModel() = default;
  ThreatModel(Norm n, double eps) : norm(n), epsilon(eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("threat model epsilon must be positive");
  }

  Perturbation project(Perturbation xi) const {
    return norm == Norm::Linf ? project_linf(std::move(xi), epsilon) : project_l2(std::move(xi), epsilon);
  }

  double norm_of(const Tensor& t) const {
    return norm == Norm::Linf ? linf_norm(t.values()) : l2_norm(t.values());
  }

  // L2 membership allows 8 ulps of slack at the radius.
  bool contains(const Tensor& t) const {
    const double n = norm_of(t);
    if (norm == Norm::Linf) return n <= epsilon;
    return n <= epsilon + 8.0 * std::numeric_limits<double>::epsilon() * epsilon;
  }
};

// a(x, xi) = clip(x + xi, 0, 1). The sum is rounded toward x when needed so
// that the realized change never exceeds |xi| in floating point.
inline ImageTensor apply(const ImageTensor& x, const Perturbation& xi) {
  require_same_shape(x, xi, "apply");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = x[i] + xi[i];
    while (std::abs(s - x[i]) > std::abs(xi[i])) s = std::nextafter(s, x[i]);
    out[i] = std::clamp(s, 0.0, 1.0);
  }
  return ImageTensor(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { CrossEntropy, Margin };

struct LossSpec {
  LossKind kind = LossKind::CrossEntropy;
  std::optional<std::size_t> target;  // set => targeted attack

  bool targeted() const { return target.has_value(); }

  static LossSpec untargeted(LossKind k = LossKind::CrossEntropy) { return {k, std::nullopt}; }
  static LossSpec targeted_to(std::size_t label, LossKind k = LossKind::CrossEntropy) { return {k, label}; }
};

inline double safe_log(double p) { return std::log(std::max(p, std::numeric_limits<double>::min())); }

inline void check_probability_vector(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("empty probability vector");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw std::invalid_argument("probability vector has a negative or NaN entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("probability vector not normalized (sum = " + std::to_string(sum) + ")");
}

// Loss to be maximized by the attacker. Untargeted: CE = -log p_y, margin =
// max_{k != y} log p_k - log p_y. Targeted: the negated loss at the target.
inline double classification_loss(std::span<const double> probs, std::size_t label, const LossSpec& spec) {
  check_probability_vector(probs);
  const std::size_t ref = spec.targeted() ? *spec.target : label;
  if (ref >= probs.size()) throw std::invalid_argument("label out of range for probability vector");
  if (spec.targeted() && ref == label)
    throw std::invalid_argument("targeted loss requires target different from the true label");
  double value;
  if (spec.kind == LossKind::CrossEntropy) {
    value = -safe_log(probs[ref]);
  } else {
    double best_other = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < probs.size(); ++k)
      if (k != ref) best_other = std::max(best_other, safe_log(probs[k]));
    value = best_other - safe_log(probs[ref]);
  }
  return spec.targeted() ? -value : value;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> out(z.size());
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += (out[i] = std::exp(z[i] - mx));
  for (double& v : out) v /= sum;
  return out;
}

// True when the prediction counts as a successful attack.
inline bool attack_succeeded(std::size_t predicted, std::size_t label, const LossSpec& spec) {
  return spec.targeted() ? predicted == *spec.target : predicted != label;
}

}  // namespace msa
