#pragma once

#include "isobm/geometry.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace isobm {

enum class Regularity { Smooth, C1Alpha };

/// Tangent projector and mean curvature at the surface point nearest to an
/// ambient point.
struct AmbientShape {
  Matrix projector;
  Vector mean_curvature;
};

/// Map u: M -> R^q defined on the charts of a domain atlas.
struct EmbeddingMap {
  std::string name;
  int dim = 0;
  int ambient_dim = 0;
  std::function<Vector(const ChartPoint&)> eval;
  /// Optional analytic Du, q x n.
  std::function<Matrix(const ChartPoint&)> jacobian;
  /// Optional analytic d_i d_j u^a stored as (a, i, j).
  std::function<Tensor3(const ChartPoint&)> hessian;
  Regularity regularity = Regularity::Smooth;
  double alpha = 1.0;  // Hoelder exponent of Du when regularity == C1Alpha
  /// Chart coordinates of the surface point nearest to an ambient point.
  std::function<ChartPoint(const Vector&)> locate;
  /// Optional ambient closest point; defaults to eval(locate(z)).
  std::function<Vector(const Vector&)> closest;
  /// Optional closed form of AmbientShape; must agree with shape_data at
  /// the closest point.
  std::function<AmbientShape(const Vector&)> ambient_shape;
  double immersion_eta = 1e-6;
  /// Names of manifolds whose atlas this map is written against, and the
  /// chart periods it requires (empty = no periodic constraint).
  std::vector<std::string> domains;
  std::vector<double> domain_periods;
};

namespace detail {
inline constexpr double kJacobianFdStep = 1e-5;
inline constexpr double kHessianFdStep = 1e-4;
}  // namespace detail

inline Matrix jacobian(const EmbeddingMap& u, const ChartPoint& p) {
  if (u.jacobian) return u.jacobian(p);
  Matrix J(u.ambient_dim, u.dim);
  const double h = detail::kJacobianFdStep;
  for (int k = 0; k < u.dim; ++k) {
    ChartPoint a = p, b = p;
    a.x(k) += h;
    b.x(k) -= h;
    J.col(k) = (u.eval(a) - u.eval(b)) / (2.0 * h);
  }
  return J;
}

namespace detail {

inline Tensor3 fd_hessian_at(const EmbeddingMap& u, const ChartPoint& p, double h) {
  const int n = u.dim, q = u.ambient_dim;
  Tensor3 H(q, n, n);
  if (u.jacobian) {
    for (int j = 0; j < n; ++j) {
      ChartPoint a = p, b = p;
      a.x(j) += h;
      b.x(j) -= h;
      const Matrix d = (u.jacobian(a) - u.jacobian(b)) / (2.0 * h);
      for (int a_ = 0; a_ < q; ++a_)
        for (int i = 0; i < n; ++i) H(a_, i, j) = d(a_, i);
    }
    // Symmetrize the two FD orderings.
    for (int a_ = 0; a_ < q; ++a_)
      for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
          const double s = 0.5 * (H(a_, i, j) + H(a_, j, i));
          H(a_, i, j) = s;
          H(a_, j, i) = s;
        }
    return H;
  }
  auto at = [&](int i, double si, int j, double sj) {
    ChartPoint c = p;
    c.x(i) += si;
    c.x(j) += sj;
    return u.eval(c);
  };
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      Vector d;
      if (i == j) {
        ChartPoint a = p, b = p;
        a.x(i) += h;
        b.x(i) -= h;
        d = (u.eval(a) - 2.0 * u.eval(p) + u.eval(b)) / (h * h);
      } else {
        d = (at(i, h, j, h) - at(i, h, j, -h) - at(i, -h, j, h) + at(i, -h, j, -h)) / (4.0 * h * h);
      }
      for (int a_ = 0; a_ < q; ++a_) {
        H(a_, i, j) = d(a_);
        H(a_, j, i) = d(a_);
      }
    }
  return H;
}

}  // namespace detail

/// Second derivatives of u, analytic when available, otherwise central
/// differences at h = 1e-4 with one Richardson level.
inline Tensor3 hessian(const EmbeddingMap& u, const ChartPoint& p) {
  if (u.hessian) return u.hessian(p);
  const double h = detail::kHessianFdStep;
  const Tensor3 coarse = detail::fd_hessian_at(u, p, h);
  const Tensor3 fine = detail::fd_hessian_at(u, p, 0.5 * h);
  Tensor3 out(u.ambient_dim, u.dim, u.dim);
  for (int a = 0; a < u.ambient_dim; ++a)
    for (int i = 0; i < u.dim; ++i)
      for (int j = 0; j < u.dim; ++j) out(a, i, j) = (4.0 * fine(a, i, j) - coarse(a, i, j)) / 3.0;
  return out;
}

inline double min_singular_value(const Matrix& J) {
  Eigen::JacobiSVD<Matrix> svd(J);
  const auto& s = svd.singularValues();
  return s.size() == 0 ? 0.0 : s(s.size() - 1);
}

struct PullbackMetric {
  Matrix metric;
  double min_singular_value = 0.0;
  bool immersion_warning = false;  // smallest singular value of Du below immersion_eta
};

/// (u^# e)_ij = sum_a d_i u^a d_j u^a.
inline PullbackMetric pullback_metric(const EmbeddingMap& u, const ChartPoint& p) {
  const Matrix J = jacobian(u, p);
  PullbackMetric out;
  out.metric = J.transpose() * J;
  out.min_singular_value = min_singular_value(J);
  out.immersion_warning = out.min_singular_value < u.immersion_eta;
  return out;
}

/// Chart carrying the pullback metric u^# e, with the trust region and
/// periods of `base`.
inline Chart pullback_chart(const EmbeddingMap& u, const Chart& base) {
  Chart c = base;
  const int id = base.id;
  c.name = base.name + "/pullback(" + u.name + ")";
  c.metric = [u, id](const Vector& x) {
    const Matrix J = jacobian(u, ChartPoint{id, x});
    return Matrix(J.transpose() * J);
  };
  c.metric_derivative = [u, id](const Vector& x) {
    const ChartPoint p{id, x};
    const Matrix J = jacobian(u, p);
    const Tensor3 H = hessian(u, p);
    const int n = u.dim;
    Tensor3 dg(n, n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          double s = 0.0;
          for (int a = 0; a < u.ambient_dim; ++a) s += H(a, i, k) * J(a, j) + J(a, i) * H(a, j, k);
          dg(i, j, k) = s;
        }
    return dg;
  };
  return c;
}

/// The domain atlas of `m` with every metric replaced by u^# e.
inline ManifoldSpec pullback_manifold(const EmbeddingMap& u, const ManifoldSpec& m) {
  ManifoldSpec out = m;
  out.name = m.name + "/pullback(" + u.name + ")";
  for (auto& c : out.charts) c = pullback_chart(u, m.chart(c.id));
  out.distance = nullptr;
  return out;
}

/// max over the sample of || u^# e - g ||_F in chart coordinates.
inline double isometry_residual(const EmbeddingMap& u, const ManifoldSpec& m, const std::vector<ChartPoint>& sample) {
  if (sample.empty())
    throw Error(ErrorKind::InvalidArgument, "embedding", "isometry_residual", "empty sample");
  double worst = 0.0;
  for (const auto& p : sample) {
    const Matrix g = m.chart(p.chart).metric(p.x);
    worst = std::max(worst, (pullback_metric(u, p).metric - g).norm());
  }
  return worst;
}

/// Extrinsic shape at one point of the image.
struct ShapeData {
  Matrix tangent_projector;  // q x q, orthogonal projection onto the tangent plane
  Vector mean_curvature;     // trace of II with respect to u^# e
  Tensor3 second_fundamental;  // (i, j, a)
  /// Filled by cross-checked evaluation: mean curvature as the
  /// Laplace-Beltrami operator of the ambient coordinates.
  Vector mean_curvature_laplacian;
  double route_discrepancy = 0.0;
};

namespace detail {
inline constexpr double kImmersionConditionLimit = 1e8;
}

/// Tangent projector P = Du (Du^T Du)^{-1} Du^T, II = (I - P) d^2 u and
/// H = (u^# e)^{ij} II_ij. With `cross_check`, also evaluates H as the
/// Laplace-Beltrami operator of the coordinate functions and records the
/// discrepancy between the two routes.
inline ShapeData shape_data(const EmbeddingMap& u, const ChartPoint& p, bool cross_check = false) {
  const int n = u.dim, q = u.ambient_dim;
  const Matrix J = jacobian(u, p);
  const Matrix K = J.transpose() * J;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(K, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues()(0), hi = eig.eigenvalues()(n - 1);
  if (!(lo > 0.0) || hi / lo > detail::kImmersionConditionLimit)
    throw Error(ErrorKind::ImmersionFailure, "embedding", "shape_data",
                "Du^T Du is near-singular (condition " + std::to_string(lo > 0.0 ? hi / lo : INFINITY) + ")");
  const Eigen::LDLT<Matrix> ldlt(K);
  const Matrix K_inv = ldlt.solve(Matrix::Identity(n, n));

  ShapeData sd;
  sd.tangent_projector = J * K_inv * J.transpose();
  const Matrix normal = Matrix::Identity(q, q) - sd.tangent_projector;
  const Tensor3 H = hessian(u, p);
  sd.second_fundamental = Tensor3(n, n, q);
  sd.mean_curvature = Vector::Zero(q);
  Vector d2(q);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      for (int a = 0; a < q; ++a) d2(a) = H(a, i, j);
      const Vector ii = normal * d2;
      for (int a = 0; a < q; ++a) sd.second_fundamental(i, j, a) = ii(a);
      sd.mean_curvature += K_inv(i, j) * ii;
    }

  if (cross_check) {
    // Base chart only contributes trust region and periods here.
    Chart base;
    base.id = p.chart;
    base.dim = n;
    base.name = "local";
    const Chart pc = pullback_chart(u, base);
    sd.mean_curvature_laplacian = Vector::Zero(q);
    for (int b = 0; b < q; ++b) {
      ScalarField coord;
      coord.value = [&u, b](const ChartPoint& c) { return u.eval(c)(b); };
      coord.gradient = [&u, b](const ChartPoint& c) { return Vector(jacobian(u, c).row(b).transpose()); };
      sd.mean_curvature_laplacian(b) = laplace_beltrami(pc, coord, p.x);
    }
    sd.route_discrepancy = (sd.mean_curvature_laplacian - sd.mean_curvature).cwiseAbs().maxCoeff();
  }
  return sd;
}

/// Scalar function on the ambient space.
struct AmbientField {
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;  // optional

  [[nodiscard]] Vector grad(const Vector& z) const {
    if (gradient) return gradient(z);
    const double h = detail::kJacobianFdStep;
    Vector g(z.size());
    for (int a = 0; a < z.size(); ++a) {
      Vector zp = z, zm = z;
      zp(a) += h;
      zm(a) -= h;
      g(a) = (value(zp) - value(zm)) / (2.0 * h);
    }
    return g;
  }
};

inline Matrix tangent_projector_at(const EmbeddingMap& u, const Vector& z) {
  const Matrix J = jacobian(u, u.locate(z));
  const Matrix K = J.transpose() * J;
  return J * K.ldlt().solve(J.transpose());
}

/// sum_a P_a(P_a f) at z, with P_a the tangential projection of e_a viewed
/// as a vector field on the image.
inline double extrinsic_laplacian(const EmbeddingMap& u, const AmbientField& f, const Vector& z) {
  const int q = u.ambient_dim;
  const double s = detail::kHessianFdStep;
  const Matrix P = tangent_projector_at(u, z);
  double total = 0.0;
  for (int a = 0; a < q; ++a) {
    const Vector v = P.col(a);
    auto directional = [&](const Vector& w) { return (tangent_projector_at(u, w).col(a)).dot(f.grad(w)); };
    total += (directional(z + s * v) - directional(z - s * v)) / (2.0 * s);
  }
  return total;
}

/// Laplace-Beltrami of f o u for the pullback metric, and the extrinsic
/// sum-of-squares operator applied to f at u(p). Equal when u is an
/// isometric smooth embedding onto its image.
inline std::pair<double, double> pullback_check_laplacian(const EmbeddingMap& u, const AmbientField& f,
                                                          const ChartPoint& p) {
  if (u.regularity != Regularity::Smooth)
    throw Error(ErrorKind::InvalidArgument, "embedding", "pullback_check_laplacian", "embedding is not tagged smooth");
  Chart base;
  base.id = p.chart;
  base.dim = u.dim;
  base.name = "local";
  const Chart pc = pullback_chart(u, base);
  ScalarField composed;
  composed.value = [&](const ChartPoint& c) { return f.value(u.eval(c)); };
  composed.gradient = [&](const ChartPoint& c) {
    return Vector(jacobian(u, c).transpose() * f.grad(u.eval(c)));
  };
  const double intrinsic = laplace_beltrami(pc, composed, p.x);
  const double extrinsic = extrinsic_laplacian(u, f, u.eval(p));
  return {intrinsic, extrinsic};
}

/// |grad_g (f o u)|_g for g = u^# e, and |P grad f| on the image.
inline std::pair<double, double> gradient_norms(const EmbeddingMap& u, const AmbientField& f, const ChartPoint& p) {
  const Matrix J = jacobian(u, p);
  const Matrix K = J.transpose() * J;
  const Vector z = u.eval(p);
  const Vector grad = f.grad(z);
  const Vector d = J.transpose() * grad;
  const double intrinsic = std::sqrt(std::max(0.0, d.dot(K.ldlt().solve(d))));
  const Matrix P = J * K.ldlt().solve(J.transpose());
  return {intrinsic, (P * grad).norm()};
}

/// Smallest singular value of Du over a sample.
inline double immersion_margin(const EmbeddingMap& u, const std::vector<ChartPoint>& sample) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& p : sample) worst = std::min(worst, min_singular_value(jacobian(u, p)));
  return worst;
}

inline Vector closest_point(const EmbeddingMap& u, const Vector& z) {
  return u.closest ? u.closest(z) : u.eval(u.locate(z));
}

/// P and H at the surface point nearest to z.
inline AmbientShape ambient_shape(const EmbeddingMap& u, const Vector& z) {
  if (u.ambient_shape) return u.ambient_shape(z);
  const ShapeData sd = shape_data(u, u.locate(z));
  return {sd.tangent_projector, sd.mean_curvature};
}

}  // namespace isobm
