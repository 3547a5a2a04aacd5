#pragma once

#include "isobm/embedding.hpp"
#include "isobm/manifolds.hpp"

#include <cmath>
#include <numbers>

namespace isobm {
namespace embeddings {

namespace detail {

inline double wrap(double v, double period) {
  double w = std::fmod(v, period);
  if (w < 0.0) w += period;
  return w;
}

inline Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<int>(xs.size()));
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

/// Shape of a round sphere of radius r about the origin in R^q.
inline AmbientShape round_sphere_shape(const Vector& z, double r, int dim) {
  const Vector n = z.normalized();
  return {Matrix(Matrix::Identity(z.size(), z.size()) - n * n.transpose()), Vector(-(dim / r) * n)};
}

}  // namespace detail

inline EmbeddingMap circle_r2(double radius) {
  EmbeddingMap u;
  u.name = "circle-R2";
  u.dim = 1;
  u.ambient_dim = 2;
  u.eval = [radius](const ChartPoint& p) {
    return detail::vec({radius * std::cos(p.x(0)), radius * std::sin(p.x(0))});
  };
  u.jacobian = [radius](const ChartPoint& p) {
    Matrix J(2, 1);
    J << -radius * std::sin(p.x(0)), radius * std::cos(p.x(0));
    return J;
  };
  u.hessian = [radius](const ChartPoint& p) {
    Tensor3 H(2, 1, 1);
    H(0, 0, 0) = -radius * std::cos(p.x(0));
    H(1, 0, 0) = -radius * std::sin(p.x(0));
    return H;
  };
  u.locate = [](const Vector& z) {
    return ChartPoint{0, detail::vec({detail::wrap(std::atan2(z(1), z(0)), 2.0 * std::numbers::pi)})};
  };
  u.closest = [radius](const Vector& z) { return Vector(radius * z.normalized()); };
  u.ambient_shape = [radius](const Vector& z) { return detail::round_sphere_shape(z, radius, 1); };
  u.domains = {"circle"};
  u.domain_periods = {2.0 * std::numbers::pi};
  return u;
}

/// Product of circles of radii a and b: isometric for the flat torus with
/// periods (2 pi a, 2 pi b).
inline EmbeddingMap clifford_torus_r4(double a, double b) {
  EmbeddingMap u;
  u.name = "clifford-torus-R4";
  u.dim = 2;
  u.ambient_dim = 4;
  u.eval = [a, b](const ChartPoint& p) {
    const double s = p.x(0) / a, t = p.x(1) / b;
    return detail::vec({a * std::cos(s), a * std::sin(s), b * std::cos(t), b * std::sin(t)});
  };
  u.jacobian = [a, b](const ChartPoint& p) {
    const double s = p.x(0) / a, t = p.x(1) / b;
    Matrix J = Matrix::Zero(4, 2);
    J(0, 0) = -std::sin(s);
    J(1, 0) = std::cos(s);
    J(2, 1) = -std::sin(t);
    J(3, 1) = std::cos(t);
    return J;
  };
  u.hessian = [a, b](const ChartPoint& p) {
    const double s = p.x(0) / a, t = p.x(1) / b;
    Tensor3 H(4, 2, 2);
    H(0, 0, 0) = -std::cos(s) / a;
    H(1, 0, 0) = -std::sin(s) / a;
    H(2, 1, 1) = -std::cos(t) / b;
    H(3, 1, 1) = -std::sin(t) / b;
    return H;
  };
  const double two_pi = 2.0 * std::numbers::pi;
  u.locate = [a, b, two_pi](const Vector& z) {
    return ChartPoint{0, detail::vec({detail::wrap(a * std::atan2(z(1), z(0)), two_pi * a),
                                      detail::wrap(b * std::atan2(z(3), z(2)), two_pi * b)})};
  };
  u.closest = [a, b](const Vector& z) {
    const double r1 = std::hypot(z(0), z(1)), r2 = std::hypot(z(2), z(3));
    return detail::vec({a * z(0) / r1, a * z(1) / r1, b * z(2) / r2, b * z(3) / r2});
  };
  u.ambient_shape = [a, b](const Vector& z) {
    AmbientShape s{Matrix::Zero(4, 4), Vector::Zero(4)};
    const double r[2] = {std::hypot(z(0), z(1)), std::hypot(z(2), z(3))};
    const double radius[2] = {a, b};
    for (int c = 0; c < 2; ++c) {
      const double nx = z(2 * c) / r[c], ny = z(2 * c + 1) / r[c];
      s.projector(2 * c, 2 * c) = ny * ny;
      s.projector(2 * c, 2 * c + 1) = s.projector(2 * c + 1, 2 * c) = -nx * ny;
      s.projector(2 * c + 1, 2 * c + 1) = nx * nx;
      s.mean_curvature(2 * c) = -nx / radius[c];
      s.mean_curvature(2 * c + 1) = -ny / radius[c];
    }
    return s;
  };
  u.domains = {"flat-torus"};
  u.domain_periods = {two_pi * a, two_pi * b};
  return u;
}

inline EmbeddingMap round_torus_r3(double major, double minor) {
  EmbeddingMap u;
  u.name = "round-torus-R3";
  u.dim = 2;
  u.ambient_dim = 3;
  u.eval = [major, minor](const ChartPoint& p) {
    const double w = major + minor * std::cos(p.x(1));
    return detail::vec({w * std::cos(p.x(0)), w * std::sin(p.x(0)), minor * std::sin(p.x(1))});
  };
  u.jacobian = [major, minor](const ChartPoint& p) {
    const double ct = std::cos(p.x(0)), st = std::sin(p.x(0));
    const double cp = std::cos(p.x(1)), sp = std::sin(p.x(1));
    const double w = major + minor * cp;
    Matrix J(3, 2);
    J << -w * st, -minor * sp * ct, w * ct, -minor * sp * st, 0.0, minor * cp;
    return J;
  };
  u.hessian = [major, minor](const ChartPoint& p) {
    const double ct = std::cos(p.x(0)), st = std::sin(p.x(0));
    const double cp = std::cos(p.x(1)), sp = std::sin(p.x(1));
    const double w = major + minor * cp;
    Tensor3 H(3, 2, 2);
    H(0, 0, 0) = -w * ct;
    H(1, 0, 0) = -w * st;
    H(0, 0, 1) = H(0, 1, 0) = minor * sp * st;
    H(1, 0, 1) = H(1, 1, 0) = -minor * sp * ct;
    H(0, 1, 1) = -minor * cp * ct;
    H(1, 1, 1) = -minor * cp * st;
    H(2, 1, 1) = -minor * sp;
    return H;
  };
  const double two_pi = 2.0 * std::numbers::pi;
  u.locate = [major, two_pi](const Vector& z) {
    const double theta = std::atan2(z(1), z(0));
    const double rho = std::hypot(z(0), z(1)) - major;
    return ChartPoint{0, detail::vec({detail::wrap(theta, two_pi), detail::wrap(std::atan2(z(2), rho), two_pi)})};
  };
  u.closest = [major, minor](const Vector& z) {
    const double r = std::hypot(z(0), z(1));
    const Eigen::Vector3d centre(major * z(0) / r, major * z(1) / r, 0.0);
    const Eigen::Vector3d off = Eigen::Vector3d(z(0), z(1), z(2)) - centre;
    const Eigen::Vector3d c = centre + minor * off.normalized();
    return detail::vec({c(0), c(1), c(2)});
  };
  // Principal curvatures 1/minor along meridians and cos(phi)/(major + minor cos(phi)) along parallels.
  u.ambient_shape = [major, minor](const Vector& z) {
    const double r = std::hypot(z(0), z(1));
    const Eigen::Vector3d off(z(0) - major * z(0) / r, z(1) - major * z(1) / r, z(2));
    const Eigen::Vector3d n = off.normalized();
    const double cos_phi = (n(0) * z(0) + n(1) * z(1)) / r;
    const double k = 1.0 / minor + cos_phi / (major + minor * cos_phi);
    AmbientShape s{Matrix(Matrix::Identity(3, 3)), Vector(3)};
    s.projector -= Matrix(n * n.transpose());
    s.mean_curvature = detail::vec({-k * n(0), -k * n(1), -k * n(2)});
    return s;
  };
  u.domains = {"round-torus", "flat-torus"};
  u.domain_periods = {two_pi, two_pi};
  return u;
}

/// Sphere of given radius on the two stereographic charts of manifolds::sphere.
inline EmbeddingMap sphere_r3(double radius) {
  EmbeddingMap u;
  u.name = "sphere-R3";
  u.dim = 2;
  u.ambient_dim = 3;
  auto sign_of = [](int chart) { return chart == manifolds::kNorthChart ? 1.0 : -1.0; };
  u.eval = [radius, sign_of](const ChartPoint& p) {
    const Eigen::Vector3d z = manifolds::detail::stereo_to_ambient(p.x, radius, sign_of(p.chart));
    return detail::vec({z(0), z(1), z(2)});
  };
  u.jacobian = [radius, sign_of](const ChartPoint& p) {
    const double s = p.x.squaredNorm(), D = 1.0 + s, sg = sign_of(p.chart);
    Matrix J(3, 2);
    for (int k = 0; k < 2; ++k) {
      for (int i = 0; i < 2; ++i) J(i, k) = radius * ((i == k ? 2.0 / D : 0.0) - 4.0 * p.x(i) * p.x(k) / (D * D));
      J(2, k) = radius * sg * (-4.0 * p.x(k) / (D * D));
    }
    return J;
  };
  u.hessian = [radius, sign_of](const ChartPoint& p) {
    const double s = p.x.squaredNorm(), D = 1.0 + s, sg = sign_of(p.chart);
    const double D2 = D * D, D3 = D2 * D;
    auto delta = [](int a, int b) { return a == b ? 1.0 : 0.0; };
    Tensor3 H(3, 2, 2);
    for (int k = 0; k < 2; ++k)
      for (int l = 0; l < 2; ++l) {
        for (int i = 0; i < 2; ++i)
          H(i, k, l) = radius * (-4.0 * (delta(i, k) * p.x(l) + delta(i, l) * p.x(k) + delta(k, l) * p.x(i)) / D2 +
                                 16.0 * p.x(i) * p.x(k) * p.x(l) / D3);
        H(2, k, l) = radius * sg * (-4.0 * delta(k, l) / D2 + 16.0 * p.x(k) * p.x(l) / D3);
      }
    return H;
  };
  u.locate = [](const Vector& z) {
    const Eigen::Vector3d w(z(0), z(1), z(2));
    const bool north = w(2) >= 0.0;
    return ChartPoint{north ? manifolds::kNorthChart : manifolds::kSouthChart,
                      manifolds::detail::ambient_to_stereo(w, north ? 1.0 : -1.0)};
  };
  u.closest = [radius](const Vector& z) { return Vector(radius * z.normalized()); };
  u.ambient_shape = [radius](const Vector& z) { return detail::round_sphere_shape(z, radius, 2); };
  u.domains = {"sphere"};
  return u;
}

/// Sphere on the polar atlas of manifolds::sphere_polar.
inline EmbeddingMap sphere_polar_r3(double radius) {
  EmbeddingMap u;
  u.name = "sphere-polar-R3";
  u.dim = 2;
  u.ambient_dim = 3;
  const EmbeddingMap stereo = sphere_r3(radius);
  auto cap = [](const ChartPoint& p) {
    return ChartPoint{p.chart == manifolds::kNorthCapChart ? manifolds::kNorthChart : manifolds::kSouthChart, p.x};
  };
  u.eval = [radius, stereo, cap](const ChartPoint& p) {
    if (p.chart != manifolds::kPolarChart) return stereo.eval(cap(p));
    const double t = p.x(0), f = p.x(1);
    return detail::vec({radius * std::sin(t) * std::cos(f), radius * std::sin(t) * std::sin(f), radius * std::cos(t)});
  };
  u.jacobian = [radius, stereo, cap](const ChartPoint& p) {
    if (p.chart != manifolds::kPolarChart) return stereo.jacobian(cap(p));
    const double t = p.x(0), f = p.x(1);
    Matrix J(3, 2);
    J << radius * std::cos(t) * std::cos(f), -radius * std::sin(t) * std::sin(f), radius * std::cos(t) * std::sin(f),
        radius * std::sin(t) * std::cos(f), -radius * std::sin(t), 0.0;
    return J;
  };
  u.hessian = [radius, stereo, cap](const ChartPoint& p) {
    if (p.chart != manifolds::kPolarChart) return stereo.hessian(cap(p));
    const double ct = std::cos(p.x(0)), st = std::sin(p.x(0)), cf = std::cos(p.x(1)), sf = std::sin(p.x(1));
    Tensor3 H(3, 2, 2);
    H(0, 0, 0) = -radius * st * cf;
    H(1, 0, 0) = -radius * st * sf;
    H(2, 0, 0) = -radius * ct;
    H(0, 0, 1) = H(0, 1, 0) = -radius * ct * sf;
    H(1, 0, 1) = H(1, 1, 0) = radius * ct * cf;
    H(0, 1, 1) = -radius * st * cf;
    H(1, 1, 1) = -radius * st * sf;
    return H;
  };
  // Polar coordinates away from the poles, caps near them.
  u.locate = [](const Vector& z) {
    const Eigen::Vector3d n = Eigen::Vector3d(z(0), z(1), z(2)).normalized();
    const double theta = std::atan2(std::hypot(n(0), n(1)), n(2));
    int chart = manifolds::kPolarChart;
    if (theta < 0.25) chart = manifolds::kNorthCapChart;
    if (theta > std::numbers::pi - 0.25) chart = manifolds::kSouthCapChart;
    return ChartPoint{chart, manifolds::detail::unit_to_polar_atlas(chart, n)};
  };
  u.closest = [radius](const Vector& z) { return Vector(radius * z.normalized()); };
  u.ambient_shape = [radius](const Vector& z) { return detail::round_sphere_shape(z, radius, 2); };
  u.domains = {"sphere-polar"};
  u.domain_periods = {0.0, 2.0 * std::numbers::pi};
  return u;
}

/// Graph x -> (x, sqrt(x^2 + rho^2)) of a smoothed fold of the line.
inline EmbeddingMap graph_1d(double rho) {
  EmbeddingMap u;
  u.name = "graph-1d";
  u.dim = 1;
  u.ambient_dim = 2;
  u.eval = [rho](const ChartPoint& p) { return detail::vec({p.x(0), std::hypot(p.x(0), rho)}); };
  u.jacobian = [rho](const ChartPoint& p) {
    Matrix J(2, 1);
    J << 1.0, p.x(0) / std::hypot(p.x(0), rho);
    return J;
  };
  u.hessian = [rho](const ChartPoint& p) {
    Tensor3 H(2, 1, 1);
    const double r = std::hypot(p.x(0), rho);
    H(1, 0, 0) = rho * rho / (r * r * r);
    return H;
  };
  // Newton iteration on d/dx |u(x) - z|^2 / 2 = (x - z0) + psi(x) psi'(x) - z1 psi'(x).
  u.locate = [rho](const Vector& z) {
    double x = z(0);
    for (int it = 0; it < 50; ++it) {
      const double r = std::hypot(x, rho);
      const double d1 = x / r, d2 = rho * rho / (r * r * r);
      const double grad = (x - z(0)) + (r - z(1)) * d1;
      const double curv = 1.0 + d1 * d1 + (r - z(1)) * d2;
      const double step = grad / (curv > 1e-3 ? curv : 1.0);
      x -= step;
      if (std::abs(step) < 1e-14) break;
    }
    return ChartPoint{0, detail::vec({x})};
  };
  u.domains = {"euclidean"};
  return u;
}

/// Plane z = 0 in R^3 over Euclidean R^2.
inline EmbeddingMap plane_r3() {
  EmbeddingMap u;
  u.name = "plane-R3";
  u.dim = 2;
  u.ambient_dim = 3;
  u.eval = [](const ChartPoint& p) { return detail::vec({p.x(0), p.x(1), 0.0}); };
  u.jacobian = [](const ChartPoint&) {
    Matrix J = Matrix::Zero(3, 2);
    J(0, 0) = 1.0;
    J(1, 1) = 1.0;
    return J;
  };
  u.hessian = [](const ChartPoint&) { return Tensor3(3, 2, 2); };
  u.locate = [](const Vector& z) { return ChartPoint{0, detail::vec({z(0), z(1)})}; };
  u.closest = [](const Vector& z) { return detail::vec({z(0), z(1), 0.0}); };
  u.ambient_shape = [](const Vector&) {
    Matrix P = Matrix::Identity(3, 3);
    P(2, 2) = 0.0;
    return AmbientShape{P, Vector::Zero(3)};
  };
  u.domains = {"euclidean"};
  return u;
}

inline EmbeddingMap identity(int dim) {
  EmbeddingMap u;
  u.name = "identity";
  u.dim = dim;
  u.ambient_dim = dim;
  u.eval = [](const ChartPoint& p) { return p.x; };
  u.jacobian = [dim](const ChartPoint&) { return Matrix(Matrix::Identity(dim, dim)); };
  u.hessian = [dim](const ChartPoint&) { return Tensor3(dim, dim, dim); };
  u.locate = [](const Vector& z) { return ChartPoint{0, z}; };
  u.closest = [](const Vector& z) { return z; };
  u.ambient_shape = [dim](const Vector&) {
    return AmbientShape{Matrix(Matrix::Identity(dim, dim)), Vector(Vector::Zero(dim))};
  };
  u.domains = {"euclidean"};
  return u;
}

/// Unit circle with a radial corrugation of the given amplitude and frequency:
/// (1 + amplitude cos(frequency theta)) (cos theta, sin theta).
inline EmbeddingMap corrugated_circle(double amplitude, double frequency, double alpha) {
  EmbeddingMap u;
  u.name = "corrugated-circle";
  u.dim = 1;
  u.ambient_dim = 2;
  u.regularity = Regularity::C1Alpha;
  u.alpha = alpha;
  u.eval = [amplitude, frequency](const ChartPoint& p) {
    const double t = p.x(0), r = 1.0 + amplitude * std::cos(frequency * t);
    return detail::vec({r * std::cos(t), r * std::sin(t)});
  };
  u.jacobian = [amplitude, frequency](const ChartPoint& p) {
    const double t = p.x(0), r = 1.0 + amplitude * std::cos(frequency * t);
    const double dr = -amplitude * frequency * std::sin(frequency * t);
    Matrix J(2, 1);
    J << dr * std::cos(t) - r * std::sin(t), dr * std::sin(t) + r * std::cos(t);
    return J;
  };
  u.locate = [](const Vector& z) {
    return ChartPoint{0, detail::vec({detail::wrap(std::atan2(z(1), z(0)), 2.0 * std::numbers::pi)})};
  };
  u.domains = {"circle"};
  u.domain_periods = {2.0 * std::numbers::pi};
  return u;
}

}  // namespace embeddings

inline const std::vector<BuiltinInfo>& embedding_catalog() {
  static const std::vector<BuiltinInfo> catalog = {
      {"circle-R2", "circle of given radius in the plane (domain: circle)", {{"radius", 1.0, "radius", 0.0}}},
      {"clifford-torus-R4",
       "product of two circles in R^4 (domain: flat-torus with periods 2 pi a, 2 pi b)",
       {{"a", 1.0, "radius of the first circle", 0.0}, {"b", 1.0, "radius of the second circle", 0.0}}},
      {"round-torus-R3",
       "torus of revolution in R^3 (domain: round-torus or flat-torus with periods 2 pi)",
       {{"major_radius", 2.0, "distance from the axis to the tube centre", 0.0},
        {"minor_radius", 1.0, "tube radius", 0.0}}},
      {"sphere-R3", "round sphere in R^3 (domain: sphere)", {{"radius", 1.0, "radius", 0.0}}},
      {"graph-1d",
       "graph of x -> sqrt(x^2 + rho^2) in R^2 (domain: euclidean, dim 1)",
       {{"rho", 0.1, "fold smoothing length", 0.0}}},
  };
  return catalog;
}

inline EmbeddingMap make_embedding(const std::string& name, const Params& given = {}) {
  const Params p = resolve_params(find_builtin(embedding_catalog(), name, "embedding"), given);
  if (name == "circle-R2") return embeddings::circle_r2(p.at("radius"));
  if (name == "clifford-torus-R4") return embeddings::clifford_torus_r4(p.at("a"), p.at("b"));
  if (name == "round-torus-R3") {
    if (p.at("minor_radius") >= p.at("major_radius"))
      throw Error(ErrorKind::Config, "embedding", "make_embedding", "round-torus-R3 needs minor_radius < major_radius");
    return embeddings::round_torus_r3(p.at("major_radius"), p.at("minor_radius"));
  }
  if (name == "sphere-R3") return embeddings::sphere_r3(p.at("radius"));
  return embeddings::graph_1d(p.at("rho"));
}

/// Throws Config unless `u` is written against the atlas of `m`.
inline void check_domain(const EmbeddingMap& u, const ManifoldSpec& m) {
  if (std::find(u.domains.begin(), u.domains.end(), m.name) == u.domains.end())
    throw Error(ErrorKind::Config, "embedding", "check_domain",
                "embedding '" + u.name + "' is not defined on manifold '" + m.name + "'");
  if (u.dim != m.dim)
    throw Error(ErrorKind::Config, "embedding", "check_domain", "dimension mismatch for '" + u.name + "'");
  for (std::size_t i = 0; i < u.domain_periods.size(); ++i) {
    const auto& per = m.charts.front().periods;
    const double want = u.domain_periods[i];
    const double have = i < per.size() ? per[i] : 0.0;
    if (std::abs(want - have) > 1e-12 * std::max(1.0, want))
      throw Error(ErrorKind::Config, "embedding", "check_domain",
                  "chart periods of '" + m.name + "' do not match embedding '" + u.name + "'");
  }
}

}  // namespace isobm
