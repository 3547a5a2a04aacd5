#include "isobm/manifolds.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

namespace isobm {
namespace {

constexpr double kPi = std::numbers::pi;

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

Vector vec1(double a) {
  Vector v(1);
  v << a;
  return v;
}

ScalarField coordinate_field(std::function<double(const Vector&)> f) {
  ScalarField s;
  s.value = [f](const ChartPoint& p) { return f(p.x); };
  return s;
}

// Smooth test field f(x) = sin(a.x + b) + c x0 x1 (2-D) with exact derivatives.
struct TestField {
  Eigen::Vector2d a;
  double b, c;
  double value(const Vector& x) const { return std::sin(a(0) * x(0) + a(1) * x(1) + b) + c * x(0) * x(1); }
  Eigen::Vector2d grad(const Vector& x) const {
    const double cs = std::cos(a(0) * x(0) + a(1) * x(1) + b);
    return Eigen::Vector2d(cs * a(0) + c * x(1), cs * a(1) + c * x(0));
  }
  Eigen::Matrix2d hess(const Vector& x) const {
    const double sn = std::sin(a(0) * x(0) + a(1) * x(1) + b);
    Eigen::Matrix2d h = -sn * a * a.transpose();
    h(0, 1) += c;
    h(1, 0) += c;
    return h;
  }
};

std::vector<ManifoldSpec> all_builtins() {
  std::vector<ManifoldSpec> out;
  for (const auto& info : manifold_catalog()) out.push_back(make_manifold(info.name));
  out.push_back(manifolds::sphere_polar(1.0));
  out.push_back(manifolds::euclidean(3));
  return out;
}

std::vector<ChartPoint> random_points(const ManifoldSpec& m, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ChartPoint> pts;
  std::vector<double> u(static_cast<std::size_t>(m.dim));
  for (int i = 0; i < count; ++i) {
    for (auto& v : u) v = unif(rng);
    pts.push_back(m.sample(u));
  }
  return pts;
}

// --- laplace_beltrami -------------------------------------------------------

TEST(LaplaceBeltrami, FlatQuadratic) {
  const ManifoldSpec m = manifolds::euclidean(2);
  const auto f = coordinate_field([](const Vector& x) { return x.squaredNorm(); });
  for (const auto& x : {vec2(0, 0), vec2(1.5, -2.0), vec2(-0.3, 0.7)})
    EXPECT_NEAR(laplace_beltrami(m.charts[0], f, x), 4.0, 1e-6);
}

TEST(LaplaceBeltrami, HyperbolicLogY) {
  const ManifoldSpec m = manifolds::hyperbolic_patch(1.0, 0.5, 2.0);
  const auto f = coordinate_field([](const Vector& x) { return std::log(x(1)); });
  for (const auto& x : {vec2(0.0, 1.0), vec2(0.3, 0.7), vec2(-0.8, 1.9)})
    EXPECT_NEAR(laplace_beltrami(m.charts[0], f, x), -1.0, 1e-6);
}

TEST(LaplaceBeltrami, SphereFirstHarmonic) {
  const ManifoldSpec m = manifolds::sphere_polar(1.0);
  const auto f = coordinate_field([](const Vector& x) { return std::cos(x(0)); });
  EXPECT_NEAR(laplace_beltrami(m.charts[0], f, vec2(kPi / 3.0, 0.4)), -1.0, 1e-6);
}

TEST(LaplaceBeltrami, ErrorsOutsideTrustRegionAndOnDegenerateMetric) {
  const ManifoldSpec m = manifolds::hyperbolic_patch(1.0, 0.5, 2.0);
  const auto f = coordinate_field([](const Vector& x) { return x(0); });
  try {
    laplace_beltrami(m.charts[0], f, vec2(0.0, 3.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Chart);
  }

  Chart bad;
  bad.dim = 2;
  bad.name = "degenerate";
  bad.metric = [](const Vector&) {
    Matrix g = Matrix::Zero(2, 2);
    g(0, 0) = 1.0;
    return g;
  };
  try {
    laplace_beltrami(bad, f, vec2(0.0, 0.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateMetric);
  }
}

// --- christoffel ------------------------------------------------------------

TEST(Christoffel, FlatIsZero) {
  const ManifoldSpec m = manifolds::flat_torus(2 * kPi, 2 * kPi);
  EXPECT_EQ(christoffel(m.charts[0], vec2(1.0, 2.0)).max_abs(), 0.0);
}

TEST(Christoffel, SpherePolarAtQuarterPi) {
  const ManifoldSpec m = manifolds::sphere_polar(1.0);
  const Tensor3 G = christoffel(m.charts[0], vec2(kPi / 4.0, 1.0));
  EXPECT_NEAR(G(0, 1, 1), -0.5, 1e-12);  // Gamma^theta_phiphi = -sin cos
  EXPECT_NEAR(G(1, 0, 1), 1.0, 1e-12);   // Gamma^phi_thetaphi = cot
  EXPECT_NEAR(G(1, 1, 0), 1.0, 1e-12);
  EXPECT_NEAR(G(0, 0, 0), 0.0, 1e-12);
}

TEST(Christoffel, HyperbolicAtYTwo) {
  const ManifoldSpec m = manifolds::hyperbolic_patch(1.0, 0.5, 2.5);
  const Tensor3 G = christoffel(m.charts[0], vec2(0.1, 2.0));
  EXPECT_NEAR(G(0, 0, 1), -0.5, 1e-12);
  EXPECT_NEAR(G(1, 0, 0), 0.5, 1e-12);  // Gamma^y_xx = 1/y
  EXPECT_NEAR(G(1, 1, 1), -0.5, 1e-12);
}

// --- ito_coefficients -------------------------------------------------------

TEST(ItoCoefficients, Flat) {
  const ManifoldSpec m = manifolds::euclidean(2);
  const auto c = ito_coefficients(m.charts[0], vec2(0.3, 0.1));
  EXPECT_EQ(c.drift.norm(), 0.0);
  EXPECT_TRUE(c.sigma.isApprox(Matrix::Identity(2, 2)));
}

TEST(ItoCoefficients, SpherePolar) {
  const ManifoldSpec m = manifolds::sphere_polar(1.0);
  for (double theta : {kPi / 2.0, kPi / 3.0, 0.4}) {
    const auto c = ito_coefficients(m.charts[0], vec2(theta, 2.0));
    EXPECT_NEAR(c.drift(0), 0.5 / std::tan(theta), 1e-12);
    EXPECT_NEAR(c.drift(1), 0.0, 1e-12);
    EXPECT_NEAR(c.sigma(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(c.sigma(1, 1), 1.0 / std::sin(theta), 1e-12);
    EXPECT_NEAR(c.sigma(1, 0), 0.0, 1e-12);
  }
}

TEST(ItoCoefficients, HyperbolicHasNoDrift) {
  const ManifoldSpec m = manifolds::hyperbolic_patch(1.0, 0.5, 2.0);
  const auto c = ito_coefficients(m.charts[0], vec2(0.2, 1.3));
  EXPECT_NEAR(c.drift.norm(), 0.0, 1e-12);
  EXPECT_TRUE(c.sigma.isApprox(1.3 * Matrix::Identity(2, 2), 1e-12));
}

// --- transition_point / reference_distance ---------------------------------

TEST(Transition, TorusWraps) {
  const ManifoldSpec m = manifolds::flat_torus(2 * kPi, 2 * kPi);
  const Vector y = transition_point(m, 0, 0, vec2(2 * kPi + 0.1, 1.0));
  EXPECT_NEAR(y(0), 0.1, 1e-12);
  EXPECT_EQ(y(1), 1.0);
}

TEST(Transition, StereographicInversion) {
  const ManifoldSpec m = manifolds::sphere(1.0);
  const Vector y = transition_point(m, manifolds::kNorthChart, manifolds::kSouthChart, vec2(1.0, 0.0));
  EXPECT_NEAR(y(0), 1.0, 1e-15);
  EXPECT_NEAR(y(1), 0.0, 1e-15);
  const Vector same = transition_point(m, manifolds::kNorthChart, manifolds::kNorthChart, vec2(0.3, -0.2));
  EXPECT_EQ(same, vec2(0.3, -0.2));
}

TEST(Transition, PoleIsOutsideOverlap) {
  const ManifoldSpec m = manifolds::sphere(1.0);
  try {
    transition_point(m, manifolds::kNorthChart, manifolds::kSouthChart, vec2(0.0, 0.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Overlap);
  }
  // |p| = 0.4 maps to |q| = 2.5, outside the target trust region.
  EXPECT_THROW(transition_point(m, manifolds::kNorthChart, manifolds::kSouthChart, vec2(0.4, 0.0)), Error);
}

TEST(ReferenceDistance, Examples) {
  const ManifoldSpec s = manifolds::sphere(1.0);
  EXPECT_NEAR(reference_distance(s, {manifolds::kNorthChart, vec2(0, 0)}, {manifolds::kNorthChart, vec2(1, 0)}),
              kPi / 2.0, 1e-12);

  const ManifoldSpec t = manifolds::flat_torus(2 * kPi, 2 * kPi);
  const ChartPoint a{0, vec2(0, 0)}, b{0, vec2(kPi, kPi + 0.5)};
  // Brute force over the 9 nearest lattice translates.
  double best = INFINITY;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j) best = std::min(best, std::hypot(kPi + 2 * kPi * i, kPi + 0.5 + 2 * kPi * j));
  EXPECT_NEAR(reference_distance(t, a, b), best, 1e-12);
  EXPECT_NEAR(best, std::sqrt(kPi * kPi + (kPi - 0.5) * (kPi - 0.5)), 1e-12);

  for (const auto& m : all_builtins()) {
    if (!m.distance) continue;
    for (const auto& p : random_points(m, 10, 3)) EXPECT_EQ(reference_distance(m, p, p), 0.0) << m.name;
  }
}

TEST(ReferenceDistance, UnsupportedWithoutAnalyticDistance) {
  const ManifoldSpec m = manifolds::round_torus(2.0, 1.0);
  try {
    reference_distance(m, {0, vec2(0, 0)}, {0, vec2(1, 0)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Unsupported);
  }
}

// --- invariants over all builtins ------------------------------------------

TEST(GeometryInvariants, MetricIsSpdOnTrustRegion) {
  for (const auto& m : all_builtins()) {
    for (const auto& p : random_points(m, 1000, 11)) {
      const Matrix g = m.chart(p.chart).metric(p.x);
      Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
      ASSERT_GT(eig.eigenvalues().minCoeff(), 0.0) << m.name;
      ASSERT_TRUE(m.chart(p.chart).in_trust_region(p.x)) << m.name;
    }
  }
}

TEST(GeometryInvariants, AnalyticMetricDerivativeMatchesFiniteDifferences) {
  for (const auto& m : all_builtins()) {
    for (const auto& p : random_points(m, 100, 12)) {
      const Chart& c = m.chart(p.chart);
      ASSERT_TRUE(static_cast<bool>(c.metric_derivative));
      const Tensor3 a = c.metric_derivative(p.x);
      const Tensor3 f = detail::fd_metric_derivative(c, p.x);
      const double scale = std::max(1.0, a.max_abs());
      for (int i = 0; i < m.dim; ++i)
        for (int j = 0; j < m.dim; ++j)
          for (int k = 0; k < m.dim; ++k) ASSERT_NEAR(a(i, j, k), f(i, j, k), 1e-5 * scale) << m.name;
    }
  }
}

TEST(GeometryInvariants, ChristoffelSymmetricAndMetricCompatible) {
  for (const auto& m : all_builtins()) {
    for (const auto& p : random_points(m, 100, 13)) {
      const Chart& c = m.chart(p.chart);
      const LocalMetric lm = local_metric(c, p.x);
      const Tensor3 G = christoffel(lm);
      const int n = m.dim;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int k = 0; k < n; ++k) {
            ASSERT_EQ(G(i, j, k), G(i, k, j));
            double rhs = 0.0;
            for (int l = 0; l < n; ++l) rhs += G(l, k, i) * lm.g(l, j) + G(l, k, j) * lm.g(l, i);
            ASSERT_NEAR(lm.dg(i, j, k), rhs, 1e-5 * std::max(1.0, lm.dg.max_abs())) << m.name;
          }
    }
  }
}

TEST(GeometryInvariants, SigmaFactorsInverseMetric) {
  for (const auto& m : all_builtins()) {
    for (const auto& p : random_points(m, 200, 14)) {
      const Chart& c = m.chart(p.chart);
      const auto coeffs = ito_coefficients(c, p.x);
      const Matrix g_inv = c.metric(p.x).inverse();
      ASSERT_LT((coeffs.sigma * coeffs.sigma.transpose() - g_inv).norm(), 1e-8 * g_inv.norm()) << m.name;
    }
  }
}

// g^ij d_i d_j f + 2 drift^j d_j f must reproduce the divergence-form operator.
TEST(GeometryInvariants, GeneratorConsistency) {
  std::mt19937_64 rng(15);
  std::normal_distribution<double> normal;
  for (const auto& m : all_builtins()) {
    if (m.dim != 2) continue;
    for (const auto& p : random_points(m, 50, 16)) {
      const TestField tf{Eigen::Vector2d(normal(rng), normal(rng)), normal(rng), 0.3 * normal(rng)};
      ScalarField f;
      f.value = [&tf](const ChartPoint& q) { return tf.value(q.x); };
      f.gradient = [&tf](const ChartPoint& q) { return Vector(tf.grad(q.x)); };
      const Chart& c = m.chart(p.chart);
      const LocalMetric lm = local_metric(c, p.x);
      const auto coeffs = ito_coefficients(lm);
      const Eigen::Matrix2d hess = tf.hess(p.x);
      const Eigen::Vector2d grad = tf.grad(p.x);
      double expanded = 0.0;
      for (int i = 0; i < 2; ++i) {
        expanded += 2.0 * coeffs.drift(i) * grad(i);
        for (int j = 0; j < 2; ++j) expanded += lm.g_inv(i, j) * hess(i, j);
      }
      const double lb = laplace_beltrami(c, f, p.x);
      ASSERT_NEAR(lb, expanded, 1e-6 * std::max(1.0, std::abs(expanded))) << m.name;
    }
  }
}

TEST(GeometryInvariants, TransitionRoundTrip) {
  for (const auto& m : all_builtins()) {
    for (const auto& p : random_points(m, 500, 17)) {
      for (const auto& c : m.charts) {
        Vector y;
        try {
          y = transition_point(m, p.chart, c.id, p.x);
        } catch (const Error&) {
          continue;
        }
        const Vector back = transition_point(m, c.id, p.chart, y);
        ASSERT_LT(m.chart(p.chart).difference(p.x, back).norm(), 1e-9) << m.name;
      }
    }
  }
}

// Every point needs some admissible chart.
TEST(GeometryInvariants, SphereAtlasCoversEverything) {
  const ManifoldSpec m = manifolds::sphere(1.0);
  for (const auto& p : random_points(m, 1000, 18)) {
    const auto best = best_chart(m, p);
    ASSERT_TRUE(best.has_value());
    ASSERT_GT(m.chart(best->chart).trust_margin(best->x), 1.0);  // |p| <= 1 in the better chart
  }
}

TEST(ManifoldCatalog, ParamsValidated) {
  EXPECT_THROW(make_manifold("klein-bottle"), Error);
  EXPECT_THROW(make_manifold("sphere", {{"radius", -1.0}}), Error);
  EXPECT_THROW(make_manifold("sphere", {{"radius_typo", 1.0}}), Error);
  EXPECT_THROW(make_manifold("euclidean", {{"dim", 2.5}}), Error);
  EXPECT_EQ(make_manifold("euclidean", {{"dim", 3}}).dim, 3);
  EXPECT_NO_THROW(make_manifold("circle", {{"radius", 2.0}}));
}

TEST(ManifoldCatalog, CircleHasPeriodicDistance) {
  const ManifoldSpec m = manifolds::circle(2.0);
  EXPECT_NEAR(reference_distance(m, {0, vec1(0.1)}, {0, vec1(2 * kPi - 0.1)}), 0.4, 1e-12);
}

}  // namespace
}  // namespace isobm
