#pragma once

#include "isobm/embeddings.hpp"
#include "isobm/manifolds.hpp"
#include "isobm/parallel.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace isobm {

/// Convolution with the builtin bump phi(x) = c exp(-1 / (1 - |x|^2)) on the
/// unit ball, rescaled to radius eps.
struct MollifierSpec {
  double eps = 0.05;
  /// Kernel nodes per unit radius for callable inputs. Gridded inputs use
  /// the grid itself.
  int quadrature = 16;

  void validate(const char* op) const {
    if (!(eps > 0.0) || !std::isfinite(eps))
      throw Error(ErrorKind::InvalidArgument, "mollify", op, "eps must be positive and finite");
    if (quadrature < 4) throw Error(ErrorKind::InvalidArgument, "mollify", op, "quadrature must be >= 4");
  }
};

inline double bump(double r2) { return r2 < 1.0 ? std::exp(-1.0 / (1.0 - r2)) : 0.0; }

/// Bump sampled on the lattice (eps / q) Z^dim and normalized to unit mass.
struct DiscreteKernel {
  int dim = 0;
  double eps = 0.0;
  std::vector<Vector> offsets;
  std::vector<double> weights;

  [[nodiscard]] double mass() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }
  /// sum_k w_k (offset_k)_coord^power.
  [[nodiscard]] double moment(int coord, int power) const {
    double s = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) s += weights[k] * std::pow(offsets[k](coord), power);
    return s;
  }
};

inline DiscreteKernel discrete_kernel(const MollifierSpec& spec, int dim) {
  spec.validate("discrete_kernel");
  if (dim < 1 || dim > 4) throw Error(ErrorKind::Unsupported, "mollify", "discrete_kernel", "dim must be 1..4");
  DiscreteKernel k;
  k.dim = dim;
  k.eps = spec.eps;
  const int q = spec.quadrature;
  std::vector<int> idx(static_cast<std::size_t>(dim), -q);
  for (;;) {
    Vector s(dim);
    for (int i = 0; i < dim; ++i) s(i) = static_cast<double>(idx[static_cast<std::size_t>(i)]) / q;
    const double w = bump(s.squaredNorm());
    if (w > 0.0) {
      k.offsets.push_back(spec.eps * s);
      k.weights.push_back(w);
    }
    int i = 0;
    while (i < dim && ++idx[static_cast<std::size_t>(i)] > q) idx[static_cast<std::size_t>(i++)] = -q;
    if (i == dim) break;
  }
  const double total = k.mass();
  for (double& w : k.weights) w /= total;
  return k;
}

// --- functions on a uniform 1-D grid ----------------------------------------

/// Samples f(lo + i h), i < n. Periodic grids have h = (hi - lo) / n and
/// omit the right endpoint; others have h = (hi - lo) / (n - 1).
struct GridFunction {
  double lo = 0.0;
  double hi = 2.0 * std::numbers::pi;
  bool periodic = true;
  std::vector<double> values;

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] double spacing() const {
    const auto n = static_cast<double>(values.size());
    return periodic ? (hi - lo) / n : (hi - lo) / (n - 1.0);
  }
  [[nodiscard]] double x(std::size_t i) const { return lo + static_cast<double>(i) * spacing(); }
};

inline GridFunction sample_grid(const std::function<double(double)>& f, double lo, double hi, std::size_t n,
                                bool periodic) {
  if (n < 2 || !(hi > lo)) throw Error(ErrorKind::InvalidArgument, "mollify", "sample_grid", "need n >= 2 and hi > lo");
  GridFunction g{lo, hi, periodic, std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) g.values[i] = f(g.x(i));
  return g;
}

/// Truncated lacunary series sum_{k < terms} 2^{-alpha k} cos(2^k x), Hoelder-alpha
/// down to scale 2^{-terms}.
inline double weierstrass(double alpha, int terms, double x) {
  double s = 0.0;
  for (int k = 0; k < terms; ++k) s += std::exp2(-alpha * k) * std::cos(std::exp2(k) * x);
  return s;
}

/// weierstrass() on the periodic grid of 2^log2_size points over [0, 2 pi).
/// Terms default to enough to leave eight samples per shortest wavelength.
inline GridFunction weierstrass_grid(double alpha, int log2_size, int terms = -1) {
  if (log2_size < 4 || log2_size > 26)
    throw Error(ErrorKind::InvalidArgument, "mollify", "weierstrass_grid", "log2_size must be in 4..26");
  if (terms < 0) terms = log2_size - 3;
  return sample_grid([=](double x) { return weierstrass(alpha, terms, x); }, 0.0, 2.0 * std::numbers::pi,
                     std::size_t{1} << log2_size, true);
}

/// |sin(x / 2)|^alpha on the periodic grid of 2^log2_size points over [0, 2 pi):
/// smooth except for an exact alpha-cusp at 0, so mollification defects scale
/// as pure powers of eps.
inline GridFunction holder_cusp_grid(double alpha, int log2_size) {
  if (log2_size < 4 || log2_size > 26)
    throw Error(ErrorKind::InvalidArgument, "mollify", "holder_cusp_grid", "log2_size must be in 4..26");
  return sample_grid([=](double x) { return std::pow(std::abs(std::sin(0.5 * x)), alpha); }, 0.0,
                     2.0 * std::numbers::pi, std::size_t{1} << log2_size, true);
}

inline double sup_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s = std::max(s, std::abs(x));
  return s;
}

namespace detail {

/// Bump taps at the grid spacing, normalized to unit mass; index j - J is the offset.
inline std::vector<double> grid_taps(const MollifierSpec& spec, double h, const char* op) {
  spec.validate(op);
  if (spec.eps < 4.0 * h)
    throw Error(ErrorKind::InsufficientSampling, "mollify", op,
                "eps " + std::to_string(spec.eps) + " resolves fewer than 4 grid points per radius");
  const auto J = static_cast<int>(std::ceil(spec.eps / h));
  std::vector<double> taps(static_cast<std::size_t>(2 * J + 1));
  double total = 0.0;
  for (int j = -J; j <= J; ++j) {
    const double s = j * h / spec.eps;
    total += taps[static_cast<std::size_t>(j + J)] = bump(s * s);
  }
  for (double& t : taps) t /= total;
  return taps;
}

inline void require_periodic(const GridFunction& f, const MollifierSpec& spec, const char* op) {
  if (!f.periodic) throw Error(ErrorKind::Unsupported, "mollify", op, "grid convolution needs a periodic grid");
  if (2.0 * spec.eps >= f.hi - f.lo)
    throw Error(ErrorKind::EpsTooLarge, "mollify", op, "kernel support exceeds the period");
}

}  // namespace detail

/// Periodic convolution f * phi_eps by direct quadrature on the grid.
inline GridFunction mollify(const GridFunction& f, const MollifierSpec& spec, int threads = 1) {
  detail::require_periodic(f, spec, "mollify");
  const auto taps = detail::grid_taps(spec, f.spacing(), "mollify");
  const auto J = static_cast<std::ptrdiff_t>(taps.size() / 2);
  const auto n = static_cast<std::ptrdiff_t>(f.size());
  GridFunction out = f;
  parallel_for(f.size(), threads, [&](std::size_t i) {
    double s = 0.0;
    for (std::ptrdiff_t j = -J; j <= J; ++j) {
      std::ptrdiff_t k = (static_cast<std::ptrdiff_t>(i) - j) % n;
      if (k < 0) k += n;
      s += taps[static_cast<std::size_t>(j + J)] * f.values[static_cast<std::size_t>(k)];
    }
    out.values[i] = s;
  });
  return out;
}

/// sup |(fg) * phi - (f * phi)(g * phi)| over a shared periodic grid.
inline double commutator_defect(const GridFunction& f, const GridFunction& g, const MollifierSpec& spec,
                                int threads = 1) {
  if (f.size() != g.size() || f.lo != g.lo || f.hi != g.hi || f.periodic != g.periodic)
    throw Error(ErrorKind::InvalidArgument, "mollify", "commutator_defect", "f and g must share a grid");
  GridFunction fg = f;
  for (std::size_t i = 0; i < f.size(); ++i) fg.values[i] = f.values[i] * g.values[i];
  const auto a = mollify(fg, spec, threads), bf = mollify(f, spec, threads);
  const auto bg = &f == &g ? bf : mollify(g, spec, threads);
  double d = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) d = std::max(d, std::abs(a.values[i] - bf.values[i] * bg.values[i]));
  return d;
}

/// Pointwise mollification of a callable on the line.
inline double mollify_at(const std::function<double(double)>& f, const DiscreteKernel& k, double x) {
  double s = 0.0;
  for (std::size_t i = 0; i < k.weights.size(); ++i) s += k.weights[i] * f(x - k.offsets[i](0));
  return s;
}

/// Commutator defect of callables on the line, as a sup over `points`.
inline double commutator_defect(const std::function<double(double)>& f, const std::function<double(double)>& g,
                                const MollifierSpec& spec, std::span<const double> points) {
  const auto k = discrete_kernel(spec, 1);
  auto fg = [&](double x) { return f(x) * g(x); };
  double d = 0.0;
  for (double x : points) d = std::max(d, std::abs(mollify_at(fg, k, x) - mollify_at(f, k, x) * mollify_at(g, k, x)));
  return d;
}

/// Grid estimate of the Hoelder data of f. All norms are lower bounds.
struct HolderReport {
  double alpha = 1.0;
  double c0_norm = 0.0;
  /// Largest difference quotient between neighbouring samples.
  double c1_norm = 0.0;
  double seminorm = 0.0;
  std::size_t sample_resolution = 0;
  bool lower_bound = true;

  [[nodiscard]] double holder_norm() const { return c0_norm + seminorm; }
};

/// [f]_alpha over sample pairs at separations h 2^j. Refining a grid by
/// halving h keeps every old pair, so estimates never decrease.
inline HolderReport holder_estimate(const GridFunction& f, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw Error(ErrorKind::InvalidArgument, "mollify", "holder_estimate", "alpha must be in (0, 1]");
  if (f.size() < 4096)
    throw Error(ErrorKind::InsufficientSampling, "mollify", "holder_estimate", "need at least 4096 samples");
  HolderReport r;
  r.alpha = alpha;
  r.sample_resolution = f.size();
  const std::size_t n = f.size();
  const double h = f.spacing();
  r.c0_norm = sup_norm(f.values);
  for (std::size_t d = 1; f.periodic ? 2 * d <= n : d < n; d *= 2) {
    const double denom = std::pow(static_cast<double>(d) * h, alpha);
    const std::size_t pairs = f.periodic ? n : n - d;
    for (std::size_t i = 0; i < pairs; ++i) {
      const double diff = std::abs(f.values[(i + d) % n] - f.values[i]);
      r.seminorm = std::max(r.seminorm, diff / denom);
      if (d == 1) r.c1_norm = std::max(r.c1_norm, diff / h);
    }
  }
  return r;
}

/// ||f - f * phi||_0 against C eps^alpha ||f||_alpha; `constant` is the measured C.
struct MollificationReport {
  double eps = 0.0;
  double alpha = 0.0;
  double sup_change = 0.0;
  double holder_norm = 0.0;
  double constant = 0.0;
};

inline MollificationReport mollification_error(const GridFunction& f, const MollifierSpec& spec, double alpha,
                                               int threads = 1) {
  const auto s = mollify(f, spec, threads);
  MollificationReport r;
  r.eps = spec.eps;
  r.alpha = alpha;
  for (std::size_t i = 0; i < f.size(); ++i) r.sup_change = std::max(r.sup_change, std::abs(f.values[i] - s.values[i]));
  r.holder_norm = holder_estimate(f, alpha).holder_norm();
  r.constant = r.holder_norm > 0.0 ? r.sup_change / (std::pow(spec.eps, alpha) * r.holder_norm) : 0.0;
  return r;
}

/// Least-squares slope of log y against log x; NaN with fewer than two
/// positive pairs.
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) continue;
    const double a = std::log(x[i]), b = std::log(y[i]);
    sx += a;
    sy += b;
    sxx += a * a;
    sxy += a * b;
    ++n;
  }
  const double den = n * sxx - sx * sx;
  if (n < 2 || den == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / den;
}

struct CommutatorRow {
  double eps = 0.0;
  double defect = 0.0;
  double slope_so_far = std::numeric_limits<double>::quiet_NaN();
};

/// Commutator defect of f with itself at each eps, with the running fitted slope.
inline std::vector<CommutatorRow> commutator_sweep(const GridFunction& f, std::span<const double> eps_list,
                                                   int threads = 1) {
  std::vector<CommutatorRow> rows;
  std::vector<double> xs, ys;
  for (double eps : eps_list) {
    CommutatorRow r;
    r.eps = eps;
    r.defect = commutator_defect(f, f, MollifierSpec{eps}, threads);
    xs.push_back(eps);
    ys.push_back(r.defect);
    r.slope_so_far = loglog_slope(xs, ys);
    rows.push_back(r);
  }
  return rows;
}

/// Dyadic scales 2^-from, ..., 2^-to.
inline std::vector<double> dyadic_scales(int from, int to) {
  std::vector<double> out;
  for (int k = from; k <= to; ++k) out.push_back(std::exp2(-k));
  return out;
}

// --- manifolds ---------------------------------------------------------------

using ManifoldFunction = std::function<double(const ChartPoint&)>;

struct PartitionEntry {
  int chart = 0;
  std::function<double(const Vector&)> weight;
  std::function<Vector(const Vector&)> gradient;
  /// The weight vanishes outside the coordinate ball of this radius.
  double support_radius = std::numeric_limits<double>::infinity();
};

/// Fixed partition of unity subordinate to a builtin atlas.
struct PartitionOfUnity {
  std::vector<PartitionEntry> entries;
  /// Largest eps for which every eps-neighbourhood of a support stays
  /// inside its chart's trusted region.
  double overlap_margin = std::numeric_limits<double>::infinity();
};

namespace detail {

inline double psi(double t) { return t > 0.0 ? std::exp(-1.0 / t) : 0.0; }
inline double dpsi(double t) { return t > 0.0 ? std::exp(-1.0 / t) / (t * t) : 0.0; }

/// Smooth step: 1 for t <= a, 0 for t >= b.
inline double smooth_step(double t, double a, double b) {
  const double p = psi(b - t), q = psi(t - a);
  return p / (p + q);
}

inline double smooth_step_derivative(double t, double a, double b) {
  const double p = psi(b - t), q = psi(t - a);
  const double dp = -dpsi(b - t), dq = dpsi(t - a);
  return (dp * q - p * dq) / ((p + q) * (p + q));
}

inline constexpr double kCapInner = 0.8;
inline constexpr double kCapOuter = 1.25;

}  // namespace detail

/// Single-chart manifolds get the constant partition; the stereographic
/// sphere gets chi_N(x) = s(|x|) with s stepping from 1 at 0.8 to 0 at 1.25,
/// and chi_S = 1 - chi_N written in south coordinates.
inline PartitionOfUnity partition_of_unity(const ManifoldSpec& m) {
  PartitionOfUnity pu;
  if (m.charts.size() == 1) {
    const int n = m.dim;
    pu.entries.push_back({m.charts[0].id, [](const Vector&) { return 1.0; },
                          [n](const Vector&) { return Vector(Vector::Zero(n)); }});
    return pu;
  }
  if (m.name == "sphere") {
    using detail::kCapInner, detail::kCapOuter;
    PartitionEntry north{manifolds::kNorthChart,
                         [](const Vector& x) { return detail::smooth_step(x.norm(), kCapInner, kCapOuter); },
                         [](const Vector& x) {
                           const double r = x.norm();
                           if (r == 0.0) return Vector(Vector::Zero(2));
                           return Vector(detail::smooth_step_derivative(r, kCapInner, kCapOuter) / r * x);
                         },
                         kCapOuter};
    PartitionEntry south{manifolds::kSouthChart,
                         [](const Vector& y) {
                           const double r = y.norm();
                           return r == 0.0 ? 1.0 : 1.0 - detail::smooth_step(1.0 / r, kCapInner, kCapOuter);
                         },
                         [](const Vector& y) {
                           const double r = y.norm();
                           if (r == 0.0) return Vector(Vector::Zero(2));
                           return Vector(detail::smooth_step_derivative(1.0 / r, kCapInner, kCapOuter) / (r * r * r) * y);
                         },
                         1.0 / kCapInner};
    pu.entries = {north, south};
    // Stereographic charts are trusted on |x| < 2.
    pu.overlap_margin = 2.0 - std::max(kCapOuter, 1.0 / kCapInner);
    return pu;
  }
  throw Error(ErrorKind::Unsupported, "mollify", "partition_of_unity",
              "no partition of unity shipped for manifold '" + m.name + "'");
}

namespace detail {

inline void check_overlap(const PartitionOfUnity& pu, const MollifierSpec& spec, const char* op) {
  spec.validate(op);
  if (spec.eps >= pu.overlap_margin)
    throw Error(ErrorKind::EpsTooLarge, "mollify", op,
                "eps " + std::to_string(spec.eps) + " >= chart overlap margin " + std::to_string(pu.overlap_margin));
}

/// Coordinates of p in the entry's chart, or nullopt when the entry's weight
/// vanishes on the eps-ball around p.
inline std::optional<Vector> entry_coordinates(const ManifoldSpec& m, const PartitionEntry& e, const ChartPoint& p,
                                               double eps) {
  Vector y;
  if (p.chart == e.chart) {
    y = p.x;
  } else {
    try {
      y = transition_point(m, p.chart, e.chart, p.x);
    } catch (const Error&) {
      return std::nullopt;
    }
  }
  if (y.norm() >= e.support_radius + eps) return std::nullopt;
  return y;
}

}  // namespace detail

/// f * phi_eps = sum_i ((chi_i f) o phi_i^-1 * phi_eps) o phi_i over the
/// builtin partition of unity.
inline ManifoldFunction mollify_function(ManifoldFunction f, const ManifoldSpec& m, const MollifierSpec& spec) {
  const auto pu = partition_of_unity(m);
  detail::check_overlap(pu, spec, "mollify_function");
  const auto kernel = discrete_kernel(spec, m.dim);
  return [f = std::move(f), m, pu, kernel](const ChartPoint& p) {
    double s = 0.0;
    for (const auto& e : pu.entries) {
      const auto y = detail::entry_coordinates(m, e, p, kernel.eps);
      if (!y) continue;
      for (std::size_t k = 0; k < kernel.weights.size(); ++k) {
        const Vector z = *y - kernel.offsets[k];
        const double chi = e.weight(z);
        if (chi != 0.0) s += kernel.weights[k] * chi * f(ChartPoint{e.chart, z});
      }
    }
    return s;
  };
}

/// Margins measured while checking a mollified embedding.
struct SmoothingReport {
  double eps = 0.0;
  /// Smallest singular value of Du over the sample.
  double immersion_margin = 0.0;
  /// Same for Du^eps; required to stay above 4/5 of immersion_margin.
  double mollified_margin = 0.0;
  /// Smallest |u^eps(p) - u^eps(q)| / |u(p) - u(q)| over sample pairs;
  /// required to stay above 1/5.
  double separation_ratio = 0.0;
  int sample_size = 0;
};

namespace detail {

inline Vector mollified_value(const EmbeddingMap& u, const ManifoldSpec& m, const PartitionOfUnity& pu,
                              const DiscreteKernel& kernel, const ChartPoint& p) {
  Vector s = Vector::Zero(u.ambient_dim);
  for (const auto& e : pu.entries) {
    const auto y = entry_coordinates(m, e, p, kernel.eps);
    if (!y) continue;
    for (std::size_t k = 0; k < kernel.weights.size(); ++k) {
      const Vector z = *y - kernel.offsets[k];
      const double chi = e.weight(z);
      if (chi != 0.0) s += kernel.weights[k] * chi * u.eval(ChartPoint{e.chart, z});
    }
  }
  return s;
}

inline Matrix mollified_jacobian(const EmbeddingMap& u, const ManifoldSpec& m, const PartitionOfUnity& pu,
                                 const DiscreteKernel& kernel, const ChartPoint& p) {
  Matrix J = Matrix::Zero(u.ambient_dim, u.dim);
  for (const auto& e : pu.entries) {
    const auto y = entry_coordinates(m, e, p, kernel.eps);
    if (!y) continue;
    Matrix Je = Matrix::Zero(u.ambient_dim, u.dim);
    for (std::size_t k = 0; k < kernel.weights.size(); ++k) {
      const Vector z = *y - kernel.offsets[k];
      const double chi = e.weight(z);
      const Vector dchi = e.gradient(z);
      if (chi == 0.0 && dchi.isZero()) continue;
      const ChartPoint q{e.chart, z};
      Matrix term = chi * jacobian(u, q);
      if (!dchi.isZero()) term += u.eval(q) * dchi.transpose();
      Je += kernel.weights[k] * term;
    }
    J += e.chart == p.chart ? Je : Matrix(Je * transition_jacobian(m, p.chart, e.chart, p.x));
  }
  return J;
}

}  // namespace detail

/// Chartwise mollification u^eps of an embedding, tagged smooth. The result
/// is checked on a quasi-uniform sample: immersion margin at least 4/5 of
/// that of u, and every sampled pair keeping at least 1/5 of its separation.
/// Failing either check is EpsTooLarge with the measured margins.
inline EmbeddingMap mollify_embedding(const EmbeddingMap& u, const ManifoldSpec& m, const MollifierSpec& spec,
                                      SmoothingReport* report = nullptr, int sample_size = 256) {
  static constexpr const char* kOp = "mollify_embedding";
  check_domain(u, m);
  const auto pu = partition_of_unity(m);
  detail::check_overlap(pu, spec, kOp);
  const auto kernel = discrete_kernel(spec, m.dim);

  EmbeddingMap out;
  out.name = u.name + "*phi(" + std::to_string(spec.eps) + ")";
  out.dim = u.dim;
  out.ambient_dim = u.ambient_dim;
  out.regularity = Regularity::Smooth;
  out.alpha = 1.0;
  out.immersion_eta = u.immersion_eta;
  out.domains = u.domains;
  out.domain_periods = u.domain_periods;
  out.eval = [u, m, pu, kernel](const ChartPoint& p) { return detail::mollified_value(u, m, pu, kernel, p); };
  out.jacobian = [u, m, pu, kernel](const ChartPoint& p) { return detail::mollified_jacobian(u, m, pu, kernel, p); };
  // Gauss-Newton refinement of the original surface's nearest point.
  out.locate = [u, m, eval = out.eval, jac = out.jacobian](const Vector& z) {
    ChartPoint p = u.locate(z);
    for (int it = 0; it < 4; ++it) {
      const Matrix J = jac(p);
      const Vector step = J.colPivHouseholderQr().solve(eval(p) - z);
      p.x -= step;
      if (step.norm() < 1e-14) break;
    }
    if (const auto b = best_chart(m, p)) p = *b;
    return p;
  };

  SmoothingReport r;
  r.eps = spec.eps;
  const auto sample = quasi_uniform_points(m, sample_size);
  r.sample_size = static_cast<int>(sample.size());
  r.immersion_margin = immersion_margin(u, sample);
  if (!(r.immersion_margin > 0.0))
    throw Error(ErrorKind::ImmersionFailure, "mollify", kOp, "input map is not an immersion on the sample");
  r.mollified_margin = immersion_margin(out, sample);
  std::vector<Vector> a, b;
  for (const auto& p : sample) {
    a.push_back(u.eval(p));
    b.push_back(out.eval(p));
  }
  r.separation_ratio = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < sample.size(); ++i)
    for (std::size_t j = i + 1; j < sample.size(); ++j) {
      const double d0 = (a[i] - a[j]).norm();
      if (d0 > 1e-9) r.separation_ratio = std::min(r.separation_ratio, (b[i] - b[j]).norm() / d0);
    }
  if (report) *report = r;
  const std::string margins = "immersion margin " + std::to_string(r.mollified_margin) + " (input " +
                              std::to_string(r.immersion_margin) + "), separation ratio " +
                              std::to_string(r.separation_ratio);
  if (!(r.mollified_margin >= 0.8 * r.immersion_margin) || !(r.separation_ratio >= 0.2))
    throw Error(ErrorKind::EpsTooLarge, "mollify", kOp, "eps " + std::to_string(spec.eps) + " too large: " + margins);
  return out;
}

struct PullbackSweepRow {
  double eps = 0.0;
  double defect_c0 = 0.0;
  double defect_c1 = 0.0;
  double slope_so_far = std::numeric_limits<double>::quiet_NaN();
};

struct PullbackSweep {
  std::vector<PullbackSweepRow> rows;
  /// Fitted log-log slope of defect_c1 against eps over all rows.
  double slope = std::numeric_limits<double>::quiet_NaN();
  /// C^0 metric defect of u itself on the same sample.
  double residual = 0.0;
};

struct SweepOptions {
  /// Points per periodic coordinate; other manifolds use grid^dim Halton points.
  int grid = 32;
  int quadrature = 16;
  int threads = 0;
};

/// Sample for metric sweeps: a lattice on fully periodic single charts,
/// quasi-uniform points otherwise.
inline std::vector<ChartPoint> sweep_points(const ManifoldSpec& m, int grid) {
  const Chart& c = m.charts.front();
  bool lattice = m.charts.size() == 1 && static_cast<int>(c.periods.size()) == m.dim;
  for (double p : c.periods) lattice = lattice && p > 0.0;
  int count = 1;
  for (int d = 0; d < m.dim; ++d) count *= grid;
  if (!lattice) return quasi_uniform_points(m, count);
  std::vector<ChartPoint> out;
  for (int i = 0; i < count; ++i) {
    Vector x(m.dim);
    int rest = i;
    for (int d = 0; d < m.dim; ++d) {
      x(d) = c.periods[static_cast<std::size_t>(d)] * (rest % grid + 0.5) / grid;
      rest /= grid;
    }
    out.push_back({c.id, x});
  }
  return out;
}

namespace detail {

inline constexpr double kDefectFdStep = 1e-4;

/// (C^0, C^1) norms of g - u^# e over the sample: sup |D|_F, and
/// sup |D|_F + max_k sup |d_k D|_F with central differences.
inline std::pair<double, double> metric_defect_norms(const EmbeddingMap& u, const ManifoldSpec& m,
                                                     const std::vector<ChartPoint>& sample, int threads) {
  std::vector<double> c0(sample.size()), c1(sample.size() * static_cast<std::size_t>(m.dim));
  auto defect = [&](const ChartPoint& p) {
    const Matrix J = jacobian(u, p);
    return Matrix(m.chart(p.chart).metric(p.x) - J.transpose() * J);
  };
  parallel_for(sample.size(), threads, [&](std::size_t i) {
    const auto& p = sample[i];
    c0[i] = defect(p).norm();
    for (int k = 0; k < m.dim; ++k) {
      ChartPoint a = p, b = p;
      a.x(k) += kDefectFdStep;
      b.x(k) -= kDefectFdStep;
      c1[i * static_cast<std::size_t>(m.dim) + static_cast<std::size_t>(k)] =
          (defect(a) - defect(b)).norm() / (2.0 * kDefectFdStep);
    }
  });
  double s0 = 0.0;
  for (double v : c0) s0 = std::max(s0, v);
  double s1 = 0.0;
  for (int k = 0; k < m.dim; ++k) {
    double sk = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) sk = std::max(sk, c1[i * static_cast<std::size_t>(m.dim) + static_cast<std::size_t>(k)]);
    s1 = std::max(s1, sk);
  }
  return {s0, s0 + s1};
}

}  // namespace detail

/// C^1 defect of the pullback metric of u^eps against m's metric for each eps.
inline PullbackSweep pullback_convergence_sweep(const EmbeddingMap& u, const ManifoldSpec& m,
                                                std::span<const double> eps_list, const SweepOptions& opt = {}) {
  check_domain(u, m);
  const auto sample = sweep_points(m, opt.grid);
  PullbackSweep out;
  out.residual = detail::metric_defect_norms(u, m, sample, opt.threads).first;
  std::vector<double> xs, ys;
  for (double eps : eps_list) {
    const auto ue = mollify_embedding(u, m, MollifierSpec{eps, opt.quadrature});
    PullbackSweepRow row;
    row.eps = eps;
    std::tie(row.defect_c0, row.defect_c1) = detail::metric_defect_norms(ue, m, sample, opt.threads);
    xs.push_back(eps);
    ys.push_back(row.defect_c1);
    row.slope_so_far = loglog_slope(xs, ys);
    out.rows.push_back(row);
  }
  out.slope = out.rows.empty() ? std::numeric_limits<double>::quiet_NaN() : out.rows.back().slope_so_far;
  return out;
}

namespace detail {
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}
}  // namespace detail

inline void write_sweep_csv(const std::vector<PullbackSweepRow>& rows, std::ostream& os) {
  os << "eps,defect_c0,defect_c1,slope_so_far\n";
  for (const auto& r : rows)
    os << detail::csv_number(r.eps) << ',' << detail::csv_number(r.defect_c0) << ','
       << detail::csv_number(r.defect_c1) << ',' << detail::csv_number(r.slope_so_far) << '\n';
}

inline void write_commutator_csv(const std::vector<CommutatorRow>& rows, std::ostream& os) {
  os << "eps,defect,slope_so_far\n";
  for (const auto& r : rows)
    os << detail::csv_number(r.eps) << ',' << detail::csv_number(r.defect) << ','
       << detail::csv_number(r.slope_so_far) << '\n';
}

}  // namespace isobm
