#pragma once

#include "isobm/types.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace isobm {

/// Coordinate patch carrying a metric field g_ij(x).
struct Chart {
  int id = 0;
  std::string name;
  int dim = 0;
  std::function<Matrix(const Vector&)> metric;
  /// Optional analytic d_k g_ij stored as (i, j, k); finite differences otherwise.
  std::function<Tensor3(const Vector&)> metric_derivative;
  /// Signed distance-like margin to the trust-region boundary; inside iff > 0.
  /// Empty means the whole chart is trusted.
  std::function<double(const Vector&)> margin;
  /// Per-coordinate period lengths (0 = not periodic). Empty = no periodicity.
  std::vector<double> periods;

  [[nodiscard]] double trust_margin(const Vector& x) const {
    return margin ? margin(x) : std::numeric_limits<double>::infinity();
  }
  [[nodiscard]] bool in_trust_region(const Vector& x) const { return trust_margin(x) > 0.0; }
  [[nodiscard]] bool is_periodic() const {
    for (double p : periods)
      if (p > 0.0) return true;
    return false;
  }

  /// Wraps periodic coordinates into [0, period).
  [[nodiscard]] Vector canonical(Vector x) const {
    for (std::size_t i = 0; i < periods.size(); ++i) {
      const double p = periods[i];
      if (p > 0.0) {
        double v = std::fmod(x(static_cast<int>(i)), p);
        if (v < 0.0) v += p;
        if (v >= p) v -= p;
        x(static_cast<int>(i)) = v;
      }
    }
    return x;
  }

  /// Coordinate difference b - a reduced to the nearest periodic image.
  [[nodiscard]] Vector difference(const Vector& a, const Vector& b) const {
    Vector d = b - a;
    for (std::size_t i = 0; i < periods.size(); ++i) {
      const double p = periods[i];
      if (p > 0.0) {
        const int k = static_cast<int>(i);
        d(k) -= p * std::round(d(k) / p);
      }
    }
    return d;
  }
};

/// A manifold (M, g) given by an atlas of charts.
struct ManifoldSpec {
  std::string name;
  int dim = 0;
  std::vector<Chart> charts;
  /// Change of coordinates between distinct charts; may throw an Overlap error.
  std::function<Vector(int from, int to, const Vector&)> transition;
  /// Ground-truth geodesic distance when known analytically.
  std::function<double(const ChartPoint&, const ChartPoint&)> distance;
  double injectivity_radius_lb = 1.0;
  /// Maps points of [0,1)^dim to trust-region points (used for property sampling).
  std::function<ChartPoint(std::span<const double>)> sample;

  [[nodiscard]] const Chart& chart(int id) const {
    for (const auto& c : charts)
      if (c.id == id) return c;
    throw Error(ErrorKind::Chart, "geometry", "chart", "unknown chart id " + std::to_string(id));
  }
};

/// Drift and diffusion factor of the chart Ito SDE with generator (1/2) Laplace-Beltrami.
struct ItoCoefficients {
  Vector drift;
  Matrix sigma;
};

/// Metric quantities at one point, computed once and shared by the operations below.
struct LocalMetric {
  Matrix g;
  Matrix g_inv;
  double sqrt_det = 1.0;
  Tensor3 dg;  // (i, j, k) = d_k g_ij
};

namespace detail {

inline constexpr double kMetricFdStep = 1e-5;
inline constexpr double kFunctionFdStep = 1e-4;

inline void require_trusted(const Chart& chart, const Vector& x, const char* op) {
  if (x.size() != chart.dim)
    throw Error(ErrorKind::InvalidArgument, "geometry", op,
                "point dimension " + std::to_string(x.size()) + " does not match chart dimension " +
                    std::to_string(chart.dim));
  if (!chart.in_trust_region(x))
    throw Error(ErrorKind::Chart, "geometry", op, "point outside trust region of chart '" + chart.name + "'");
}

inline Tensor3 fd_metric_derivative(const Chart& chart, const Vector& x) {
  const int n = chart.dim;
  Tensor3 dg(n, n, n);
  for (int k = 0; k < n; ++k) {
    Vector xp = x, xm = x;
    xp(k) += kMetricFdStep;
    xm(k) -= kMetricFdStep;
    const Matrix diff = (chart.metric(xp) - chart.metric(xm)) / (2.0 * kMetricFdStep);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) dg(i, j, k) = diff(i, j);
  }
  return dg;
}

}  // namespace detail

/// d_k g_ij at x, analytic when the chart provides it.
inline Tensor3 metric_derivative(const Chart& chart, const Vector& x) {
  return chart.metric_derivative ? chart.metric_derivative(x) : detail::fd_metric_derivative(chart, x);
}

/// Metric, inverse and volume factor at x. Throws DegenerateMetric if g(x) is not SPD.
inline LocalMetric local_metric(const Chart& chart, const Vector& x, bool with_derivative = true) {
  LocalMetric lm;
  lm.g = chart.metric(x);
  Eigen::LLT<Matrix> llt(lm.g);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorKind::DegenerateMetric, "geometry", "local_metric",
                "metric of chart '" + chart.name + "' is not positive definite");
  const Matrix L = llt.matrixL();
  double det_sqrt = 1.0;
  for (int i = 0; i < L.rows(); ++i) det_sqrt *= L(i, i);
  if (!(det_sqrt > 0.0) || !std::isfinite(det_sqrt))
    throw Error(ErrorKind::DegenerateMetric, "geometry", "local_metric", "metric determinant is not positive");
  lm.sqrt_det = det_sqrt;
  lm.g_inv = llt.solve(Matrix::Identity(chart.dim, chart.dim));
  if (with_derivative) lm.dg = metric_derivative(chart, x);
  return lm;
}

/// Christoffel symbols Gamma^i_jk stored as (i, j, k); symmetric in (j, k).
inline Tensor3 christoffel(const LocalMetric& lm) {
  const int n = static_cast<int>(lm.g.rows());
  // lowered[l][j][k] = 1/2 (d_j g_lk + d_k g_lj - d_l g_jk)
  Tensor3 lowered(n, n, n);
  for (int l = 0; l < n; ++l)
    for (int j = 0; j < n; ++j)
      for (int k = j; k < n; ++k) {
        const double v = 0.5 * (lm.dg(l, k, j) + lm.dg(l, j, k) - lm.dg(j, k, l));
        lowered(l, j, k) = v;
        lowered(l, k, j) = v;
      }
  Tensor3 gamma(n, n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = j; k < n; ++k) {
        double s = 0.0;
        for (int l = 0; l < n; ++l) s += lm.g_inv(i, l) * lowered(l, j, k);
        gamma(i, j, k) = s;
        gamma(i, k, j) = s;
      }
  return gamma;
}

inline Tensor3 christoffel(const Chart& chart, const Vector& x) {
  detail::require_trusted(chart, x, "christoffel");
  return christoffel(local_metric(chart, x));
}

/// drift^i = 1/2 |g|^{-1/2} d_j(|g|^{1/2} g^ij); sigma = Cholesky factor of g^{-1}.
inline ItoCoefficients ito_coefficients(const LocalMetric& lm) {
  const int n = static_cast<int>(lm.g.rows());
  ItoCoefficients c;
  c.drift = Vector::Zero(n);
  for (int j = 0; j < n; ++j) {
    Matrix dg_j(n, n);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) dg_j(a, b) = lm.dg(a, b, j);
    const double half_trace = 0.5 * (lm.g_inv * dg_j).trace();
    const Matrix d_ginv = -lm.g_inv * dg_j * lm.g_inv;  // d_j g^{ab}
    for (int i = 0; i < n; ++i) c.drift(i) += 0.5 * (half_trace * lm.g_inv(i, j) + d_ginv(i, j));
  }
  Eigen::LLT<Matrix> llt(lm.g_inv);
  c.sigma = llt.matrixL();
  return c;
}

inline ItoCoefficients ito_coefficients(const Chart& chart, const Vector& x) {
  detail::require_trusted(chart, x, "ito_coefficients");
  return ito_coefficients(local_metric(chart, x));
}

/// Scalar function on the manifold, addressed by chart points.
struct ScalarField {
  std::function<double(const ChartPoint&)> value;
  /// Optional coordinate gradient d_i f.
  std::function<Vector(const ChartPoint&)> gradient;

  [[nodiscard]] Vector grad(const ChartPoint& p) const {
    if (gradient) return gradient(p);
    const int n = static_cast<int>(p.x.size());
    Vector g(n);
    for (int i = 0; i < n; ++i) {
      ChartPoint a = p, b = p;
      a.x(i) += detail::kFunctionFdStep;
      b.x(i) -= detail::kFunctionFdStep;
      g(i) = (value(a) - value(b)) / (2.0 * detail::kFunctionFdStep);
    }
    return g;
  }
};

/// Laplace-Beltrami operator in divergence form, |g|^{-1/2} d_i(|g|^{1/2} g^ij d_j f),
/// by central differences of the flux field.
inline double laplace_beltrami(const Chart& chart, const ScalarField& f, const Vector& x) {
  detail::require_trusted(chart, x, "laplace_beltrami");
  const int n = chart.dim;
  const double h = detail::kFunctionFdStep;
  auto flux = [&](const Vector& y) -> Vector {
    const LocalMetric lm = local_metric(chart, y, false);
    return lm.sqrt_det * (lm.g_inv * f.grad(ChartPoint{chart.id, y}));
  };
  const double sqrt_det = local_metric(chart, x, false).sqrt_det;
  double div = 0.0;
  for (int i = 0; i < n; ++i) {
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    div += (flux(xp)(i) - flux(xm)(i)) / (2.0 * h);
  }
  return div / sqrt_det;
}

/// Squared g-norm of the differential of f at x.
inline double gradient_norm_squared(const Chart& chart, const ScalarField& f, const Vector& x) {
  const LocalMetric lm = local_metric(chart, x, false);
  const Vector df = f.grad(ChartPoint{chart.id, x});
  return df.dot(lm.g_inv * df);
}

/// Same manifold point in chart `to`. Same-chart transitions only canonicalize
/// periodic coordinates.
inline Vector transition_point(const ManifoldSpec& m, int from, int to, const Vector& x) {
  const Chart& src = m.chart(from);
  if (from == to) return src.canonical(x);
  const Vector xs = src.canonical(x);
  if (!src.in_trust_region(xs))
    throw Error(ErrorKind::Overlap, "geometry", "transition_point", "point outside source chart '" + src.name + "'");
  if (!m.transition)
    throw Error(ErrorKind::Overlap, "geometry", "transition_point", "manifold '" + m.name + "' has no transitions");
  const Chart& dst = m.chart(to);
  Vector y = dst.canonical(m.transition(from, to, xs));
  if (!y.allFinite() || !dst.in_trust_region(y))
    throw Error(ErrorKind::Overlap, "geometry", "transition_point",
                "point not in overlap of charts '" + src.name + "' and '" + dst.name + "'");
  return y;
}

/// Jacobian d(transition)/dx by central differences.
inline Matrix transition_jacobian(const ManifoldSpec& m, int from, int to, const Vector& x) {
  const int n = m.dim;
  if (from == to) return Matrix::Identity(n, n);
  Matrix J(n, n);
  const double h = detail::kMetricFdStep;
  const Chart& dst = m.chart(to);
  for (int k = 0; k < n; ++k) {
    Vector xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    J.col(k) = dst.difference(m.transition(from, to, xm), m.transition(from, to, xp)) / (2.0 * h);
  }
  return J;
}

/// Chart with the largest trust margin containing the point, if any.
inline std::optional<ChartPoint> best_chart(const ManifoldSpec& m, const ChartPoint& p) {
  std::optional<ChartPoint> best;
  double best_margin = 0.0;
  for (const auto& c : m.charts) {
    Vector y;
    try {
      y = transition_point(m, p.chart, c.id, p.x);
    } catch (const Error&) {
      continue;
    }
    const double mg = c.trust_margin(y);
    if (mg > best_margin) {
      best_margin = mg;
      best = ChartPoint{c.id, y};
    }
  }
  return best;
}

inline double reference_distance(const ManifoldSpec& m, const ChartPoint& a, const ChartPoint& b) {
  if (!m.distance)
    throw Error(ErrorKind::Unsupported, "geometry", "reference_distance",
                "no analytic distance for manifold '" + m.name + "'");
  return m.distance(a, b);
}

}  // namespace isobm
