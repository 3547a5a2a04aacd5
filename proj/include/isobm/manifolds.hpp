#pragma once

#include "isobm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

namespace isobm {

using Params = std::map<std::string, double>;

struct ParamSpec {
  std::string name;
  double default_value = 0.0;
  std::string description;
  double lower_bound = 0.0;  // exclusive unless lower_inclusive
  bool lower_inclusive = false;
  bool integer = false;
};

struct BuiltinInfo {
  std::string name;
  std::string description;
  std::vector<ParamSpec> params;
};

/// Defaults overlaid with `given`; unknown names and out-of-range values throw Config.
inline Params resolve_params(const BuiltinInfo& info, const Params& given) {
  Params out;
  for (const auto& p : info.params) out[p.name] = p.default_value;
  for (const auto& [k, v] : given) {
    auto it = std::find_if(info.params.begin(), info.params.end(), [&](const ParamSpec& p) { return p.name == k; });
    if (it == info.params.end())
      throw Error(ErrorKind::Config, "geometry", "resolve_params", "unknown parameter '" + k + "' for '" + info.name + "'");
    const bool ok = it->lower_inclusive ? v >= it->lower_bound : v > it->lower_bound;
    if (!ok || !std::isfinite(v) || (it->integer && v != std::floor(v)))
      throw Error(ErrorKind::Config, "geometry", "resolve_params",
                  "parameter '" + k + "' of '" + info.name + "' out of range");
    out[k] = v;
  }
  return out;
}

namespace manifolds {

inline Matrix scaled_identity(int n, double s) { return s * Matrix::Identity(n, n); }

inline ManifoldSpec euclidean(int dim) {
  ManifoldSpec m;
  m.name = "euclidean";
  m.dim = dim;
  Chart c;
  c.id = 0;
  c.name = "cartesian";
  c.dim = dim;
  c.metric = [dim](const Vector&) { return Matrix(Matrix::Identity(dim, dim)); };
  c.metric_derivative = [dim](const Vector&) { return Tensor3(dim, dim, dim); };
  m.charts.push_back(c);
  m.distance = [](const ChartPoint& a, const ChartPoint& b) { return (a.x - b.x).norm(); };
  m.injectivity_radius_lb = std::numeric_limits<double>::infinity();
  // Unit cube scaled to [-1, 1]^dim.
  m.sample = [dim](std::span<const double> u) {
    Vector x(dim);
    for (int i = 0; i < dim; ++i) x(i) = 2.0 * u[static_cast<std::size_t>(i)] - 1.0;
    return ChartPoint{0, x};
  };
  return m;
}

inline ManifoldSpec circle(double radius) {
  ManifoldSpec m;
  m.name = "circle";
  m.dim = 1;
  Chart c;
  c.id = 0;
  c.name = "angle";
  c.dim = 1;
  c.periods = {2.0 * std::numbers::pi};
  c.metric = [radius](const Vector&) { return scaled_identity(1, radius * radius); };
  c.metric_derivative = [](const Vector&) { return Tensor3(1, 1, 1); };
  m.charts.push_back(c);
  m.distance = [c, radius](const ChartPoint& a, const ChartPoint& b) {
    return radius * std::abs(c.difference(a.x, b.x)(0));
  };
  m.injectivity_radius_lb = std::numbers::pi * radius;
  m.sample = [](std::span<const double> u) {
    Vector x(1);
    x(0) = 2.0 * std::numbers::pi * u[0];
    return ChartPoint{0, x};
  };
  return m;
}

inline ManifoldSpec flat_torus(double period1, double period2) {
  ManifoldSpec m;
  m.name = "flat-torus";
  m.dim = 2;
  Chart c;
  c.id = 0;
  c.name = "angles";
  c.dim = 2;
  c.periods = {period1, period2};
  c.metric = [](const Vector&) { return Matrix(Matrix::Identity(2, 2)); };
  c.metric_derivative = [](const Vector&) { return Tensor3(2, 2, 2); };
  m.charts.push_back(c);
  // The nearest image per coordinate is the nearest lattice translate for a
  // rectangular lattice.
  m.distance = [c](const ChartPoint& a, const ChartPoint& b) { return c.difference(a.x, b.x).norm(); };
  m.injectivity_radius_lb = 0.5 * std::min(period1, period2);
  m.sample = [period1, period2](std::span<const double> u) {
    Vector x(2);
    x << period1 * u[0], period2 * u[1];
    return ChartPoint{0, x};
  };
  return m;
}

/// Round torus (theta, phi) with the metric induced from R^3 by
/// ((R + r cos phi) cos theta, (R + r cos phi) sin theta, r sin phi).
inline ManifoldSpec round_torus(double major, double minor) {
  ManifoldSpec m;
  m.name = "round-torus";
  m.dim = 2;
  Chart c;
  c.id = 0;
  c.name = "angles";
  c.dim = 2;
  c.periods = {2.0 * std::numbers::pi, 2.0 * std::numbers::pi};
  c.metric = [major, minor](const Vector& x) {
    const double w = major + minor * std::cos(x(1));
    Matrix g = Matrix::Zero(2, 2);
    g(0, 0) = w * w;
    g(1, 1) = minor * minor;
    return g;
  };
  c.metric_derivative = [major, minor](const Vector& x) {
    Tensor3 dg(2, 2, 2);
    dg(0, 0, 1) = -2.0 * minor * std::sin(x(1)) * (major + minor * std::cos(x(1)));
    return dg;
  };
  m.charts.push_back(c);
  m.injectivity_radius_lb = std::numbers::pi * std::min(minor, major - minor);
  m.sample = [](std::span<const double> u) {
    Vector x(2);
    x << 2.0 * std::numbers::pi * u[0], 2.0 * std::numbers::pi * u[1];
    return ChartPoint{0, x};
  };
  return m;
}

namespace detail {

// Stereographic coordinates p -> point of the sphere of given radius.
// sign = +1: projection from the south pole (chart centred at the north pole).
inline Eigen::Vector3d stereo_to_ambient(const Vector& p, double radius, double sign) {
  const double s = p.squaredNorm();
  return radius * Eigen::Vector3d(2.0 * p(0) / (1.0 + s), 2.0 * p(1) / (1.0 + s), sign * (1.0 - s) / (1.0 + s));
}

inline Vector ambient_to_stereo(const Eigen::Vector3d& z, double sign) {
  const Eigen::Vector3d n = z.normalized();
  Vector p(2);
  p << n(0) / (1.0 + sign * n(2)), n(1) / (1.0 + sign * n(2));
  return p;
}

inline Chart stereographic_chart(int id, const std::string& name, double radius) {
  Chart c;
  c.id = id;
  c.name = name;
  c.dim = 2;
  c.metric = [radius](const Vector& p) {
    const double s = p.squaredNorm();
    return scaled_identity(2, 4.0 * radius * radius / ((1.0 + s) * (1.0 + s)));
  };
  c.metric_derivative = [radius](const Vector& p) {
    const double s = p.squaredNorm();
    Tensor3 dg(2, 2, 2);
    for (int k = 0; k < 2; ++k) {
      const double d = -16.0 * radius * radius * p(k) / ((1.0 + s) * (1.0 + s) * (1.0 + s));
      dg(0, 0, k) = d;
      dg(1, 1, k) = d;
    }
    return dg;
  };
  c.margin = [](const Vector& p) { return 2.0 - p.norm(); };
  return c;
}

}  // namespace detail

inline constexpr int kNorthChart = 0;
inline constexpr int kSouthChart = 1;

/// Sphere with two stereographic charts (trust region |p| < 2 in each).
inline ManifoldSpec sphere(double radius) {
  ManifoldSpec m;
  m.name = "sphere";
  m.dim = 2;
  m.charts.push_back(detail::stereographic_chart(kNorthChart, "north-stereographic", radius));
  m.charts.push_back(detail::stereographic_chart(kSouthChart, "south-stereographic", radius));
  m.transition = [](int from, int to, const Vector& p) -> Vector {
    if (from == to) return p;
    const double s = p.squaredNorm();
    if (s == 0.0)
      throw Error(ErrorKind::Overlap, "geometry", "transition_point", "stereographic pole has no image");
    return p / s;
  };
  m.distance = [radius](const ChartPoint& a, const ChartPoint& b) {
    const auto ua = detail::stereo_to_ambient(a.x, 1.0, a.chart == kNorthChart ? 1.0 : -1.0);
    const auto ub = detail::stereo_to_ambient(b.x, 1.0, b.chart == kNorthChart ? 1.0 : -1.0);
    return radius * std::atan2(ua.cross(ub).norm(), ua.dot(ub));
  };
  m.injectivity_radius_lb = std::numbers::pi * radius;
  m.sample = [](std::span<const double> u) {
    const double z = 1.0 - 2.0 * u[0];
    const double phi = 2.0 * std::numbers::pi * u[1];
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Eigen::Vector3d n(rho * std::cos(phi), rho * std::sin(phi), z);
    const double sign = z >= 0.0 ? 1.0 : -1.0;
    return ChartPoint{z >= 0.0 ? kNorthChart : kSouthChart, detail::ambient_to_stereo(n, sign)};
  };
  return m;
}

inline constexpr int kPolarChart = 0;
inline constexpr int kNorthCapChart = 1;
inline constexpr int kSouthCapChart = 2;

namespace detail {

/// Unit vector of a point of the polar atlas.
inline Eigen::Vector3d polar_atlas_to_unit(int chart, const Vector& x) {
  if (chart == kPolarChart)
    return Eigen::Vector3d(std::sin(x(0)) * std::cos(x(1)), std::sin(x(0)) * std::sin(x(1)), std::cos(x(0)));
  return stereo_to_ambient(x, 1.0, chart == kNorthCapChart ? 1.0 : -1.0);
}

inline Vector unit_to_polar_atlas(int chart, const Eigen::Vector3d& n) {
  if (chart == kPolarChart) {
    Vector x(2);
    double phi = std::atan2(n(1), n(0));
    if (phi < 0.0) phi += 2.0 * std::numbers::pi;
    x << std::atan2(std::hypot(n(0), n(1)), n(2)), phi;
    return x;
  }
  const double sign = chart == kNorthCapChart ? 1.0 : -1.0;
  if (1.0 + sign * n(2) == 0.0)
    throw Error(ErrorKind::Overlap, "geometry", "transition_point", "stereographic pole has no image");
  return ambient_to_stereo(n, sign);
}

}  // namespace detail

/// Sphere in polar coordinates (theta, phi), trusted on theta in (band, pi - band),
/// with stereographic caps around the poles (charts kNorthCapChart, kSouthCapChart).
inline ManifoldSpec sphere_polar(double radius, double band = 0.3) {
  ManifoldSpec m;
  m.name = "sphere-polar";
  m.dim = 2;
  Chart c;
  c.id = kPolarChart;
  c.name = "polar";
  c.dim = 2;
  c.periods = {0.0, 2.0 * std::numbers::pi};
  c.metric = [radius](const Vector& x) {
    Matrix g = Matrix::Zero(2, 2);
    const double s = std::sin(x(0));
    g(0, 0) = radius * radius;
    g(1, 1) = radius * radius * s * s;
    return g;
  };
  c.metric_derivative = [radius](const Vector& x) {
    Tensor3 dg(2, 2, 2);
    dg(1, 1, 0) = 2.0 * radius * radius * std::sin(x(0)) * std::cos(x(0));
    return dg;
  };
  c.margin = [band](const Vector& x) { return std::min(x(0) - band, std::numbers::pi - band - x(0)); };
  m.charts.push_back(c);
  m.charts.push_back(detail::stereographic_chart(kNorthCapChart, "north-cap", radius));
  m.charts.push_back(detail::stereographic_chart(kSouthCapChart, "south-cap", radius));
  m.transition = [](int from, int to, const Vector& x) -> Vector {
    if (from == to) return x;
    return detail::unit_to_polar_atlas(to, detail::polar_atlas_to_unit(from, x));
  };
  m.distance = [radius](const ChartPoint& a, const ChartPoint& b) {
    const auto ua = detail::polar_atlas_to_unit(a.chart, a.x), ub = detail::polar_atlas_to_unit(b.chart, b.x);
    return radius * std::atan2(ua.cross(ub).norm(), ua.dot(ub));
  };
  m.injectivity_radius_lb = std::numbers::pi * radius;
  m.sample = [band](std::span<const double> u) {
    Vector x(2);
    x << band + (std::numbers::pi - 2.0 * band) * (0.001 + 0.998 * u[0]), 2.0 * std::numbers::pi * u[1];
    return ChartPoint{kPolarChart, x};
  };
  return m;
}

/// Patch of the hyperbolic upper half-plane, g = y^{-2} I, trusted on
/// |x| < half_width, y_min < y < y_max.
inline ManifoldSpec hyperbolic_patch(double half_width, double y_min, double y_max) {
  ManifoldSpec m;
  m.name = "hyperbolic-patch";
  m.dim = 2;
  Chart c;
  c.id = 0;
  c.name = "half-plane";
  c.dim = 2;
  c.metric = [](const Vector& x) { return scaled_identity(2, 1.0 / (x(1) * x(1))); };
  c.metric_derivative = [](const Vector& x) {
    Tensor3 dg(2, 2, 2);
    const double d = -2.0 / (x(1) * x(1) * x(1));
    dg(0, 0, 1) = d;
    dg(1, 1, 1) = d;
    return dg;
  };
  c.margin = [half_width, y_min, y_max](const Vector& x) {
    return std::min({half_width - std::abs(x(0)), x(1) - y_min, y_max - x(1)});
  };
  m.charts.push_back(c);
  m.distance = [](const ChartPoint& a, const ChartPoint& b) {
    const double d2 = (a.x - b.x).squaredNorm();
    return std::acosh(1.0 + d2 / (2.0 * a.x(1) * b.x(1)));
  };
  m.injectivity_radius_lb = std::numeric_limits<double>::infinity();
  m.sample = [half_width, y_min, y_max](std::span<const double> u) {
    Vector x(2);
    x << half_width * (2.0 * u[0] - 1.0) * 0.999, y_min + (y_max - y_min) * (0.001 + 0.998 * u[1]);
    return ChartPoint{0, x};
  };
  return m;
}

}  // namespace manifolds

inline const std::vector<BuiltinInfo>& manifold_catalog() {
  static const std::vector<BuiltinInfo> catalog = {
      {"circle", "circle of given radius, periodic angle chart", {{"radius", 1.0, "radius", 0.0}}},
      {"flat-torus",
       "flat torus R^2 / (period1 Z x period2 Z), one periodic chart",
       {{"period1", 2.0 * std::numbers::pi, "first period", 0.0}, {"period2", 2.0 * std::numbers::pi, "second period", 0.0}}},
      {"sphere", "round sphere, north and south stereographic charts", {{"radius", 1.0, "radius", 0.0}}},
      {"round-torus",
       "torus with the metric induced by the standard embedding in R^3",
       {{"major_radius", 2.0, "distance from the axis to the tube centre", 0.0},
        {"minor_radius", 1.0, "tube radius", 0.0}}},
      {"hyperbolic-patch",
       "patch of the upper half-plane model of the hyperbolic plane",
       {{"half_width", 1.0, "trust region |x| < half_width", 0.0},
        {"y_min", 0.5, "lower edge of the trust region", 0.0},
        {"y_max", 2.0, "upper edge of the trust region", 0.0}}},
      {"euclidean", "Euclidean space R^dim", {{"dim", 2.0, "dimension", 0.0, false, true}}},
  };
  return catalog;
}

inline const BuiltinInfo& find_builtin(const std::vector<BuiltinInfo>& catalog, const std::string& name,
                                       const char* what) {
  for (const auto& b : catalog)
    if (b.name == name) return b;
  throw Error(ErrorKind::Config, "cli", "resolve", std::string("unknown ") + what + " '" + name + "'");
}

inline ManifoldSpec make_manifold(const std::string& name, const Params& given = {}) {
  const Params p = resolve_params(find_builtin(manifold_catalog(), name, "manifold"), given);
  if (name == "circle") return manifolds::circle(p.at("radius"));
  if (name == "flat-torus") return manifolds::flat_torus(p.at("period1"), p.at("period2"));
  if (name == "sphere") return manifolds::sphere(p.at("radius"));
  if (name == "round-torus") {
    if (p.at("minor_radius") >= p.at("major_radius"))
      throw Error(ErrorKind::Config, "geometry", "make_manifold", "round-torus needs minor_radius < major_radius");
    return manifolds::round_torus(p.at("major_radius"), p.at("minor_radius"));
  }
  if (name == "hyperbolic-patch") {
    if (p.at("y_min") >= p.at("y_max"))
      throw Error(ErrorKind::Config, "geometry", "make_manifold", "hyperbolic-patch needs y_min < y_max");
    return manifolds::hyperbolic_patch(p.at("half_width"), p.at("y_min"), p.at("y_max"));
  }
  const int dim = static_cast<int>(p.at("dim"));
  if (dim > kMaxDim)
    throw Error(ErrorKind::Config, "geometry", "make_manifold", "euclidean dim exceeds " + std::to_string(kMaxDim));
  return manifolds::euclidean(dim);
}

/// First `count` points of the Halton sequence (bases 2, 3, 5, ...) mapped
/// through the manifold's sampler.
inline std::vector<ChartPoint> quasi_uniform_points(const ManifoldSpec& m, int count) {
  static constexpr int kBases[] = {2, 3, 5, 7, 11, 13};
  std::vector<ChartPoint> out;
  std::vector<double> u(static_cast<std::size_t>(m.dim));
  for (int i = 1; i <= count; ++i) {
    for (int d = 0; d < m.dim; ++d) {
      double f = 1.0, r = 0.0;
      for (int k = i; k > 0; k /= kBases[d]) {
        f /= kBases[d];
        r += f * (k % kBases[d]);
      }
      u[static_cast<std::size_t>(d)] = r;
    }
    out.push_back(m.sample(u));
  }
  return out;
}

}  // namespace isobm
