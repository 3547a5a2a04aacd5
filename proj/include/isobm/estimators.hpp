#pragma once

#include "isobm/embeddings.hpp"
#include "isobm/ensemble_io.hpp"
#include "isobm/geometry.hpp"
#include "isobm/parallel.hpp"
#include "isobm/rng.hpp"
#include "isobm/sde.hpp"
#include "isobm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace isobm {

/// Monte Carlo estimate with its standard error.
struct MCEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::int64_t n_samples = 0;
  Json meta = Json::object();
};

inline Json to_json(const MCEstimate& e) {
  return Json{{"value", e.value}, {"std_error", e.std_error}, {"n_samples", e.n_samples}, {"meta", e.meta}};
}

/// Mean of independent per-path contributions.
inline MCEstimate mc_estimate(std::span<const double> xs, Json meta = Json::object()) {
  const auto s = stats::mean_se(xs);
  return {s.mean, s.std_error, static_cast<std::int64_t>(s.n), std::move(meta)};
}

namespace detail {

/// Index of the record at time t; t must lie on the record grid.
inline std::int64_t record_index(const PathEnsemble& e, double t, const char* op) {
  for (std::size_t r = 0; r < e.times.size(); ++r)
    if (std::abs(e.times[r] - t) <= 1e-9 * std::max(1.0, std::abs(t))) return static_cast<std::int64_t>(r);
  if (t > e.horizon() * (1.0 + 1e-12))
    throw Error(ErrorKind::MismatchedHorizon, "estimators", op,
                "t = " + format_double(t) + " beyond horizon " + format_double(e.horizon()));
  throw Error(ErrorKind::InvalidArgument, "estimators", op, "t = " + format_double(t) + " is not a recorded time");
}

}  // namespace detail

// --- heat kernel by kernel density estimation ---------------------------------

/// Bandwidth c sqrt(t) n^{-1/(d+4)}.
inline double default_bandwidth(double t, std::int64_t n, int dim, double c = 1.0) {
  return c * std::sqrt(t) * std::pow(static_cast<double>(n), -1.0 / (dim + 4.0));
}

/// Integral of the Epanechnikov window 1 - r^2/h^2 over the d-ball of radius h.
inline double epanechnikov_mass(int dim, double h) {
  const double ball = std::pow(std::numbers::pi, 0.5 * dim) / std::tgamma(0.5 * dim + 1.0) * std::pow(h, dim);
  return ball * 2.0 / (dim + 2.0);
}

enum class KdeWindow {
  Geodesic,  ///< window in the manifold's reference distance
  Chart,     ///< window in coordinates of the target's chart, divided by sqrt|g|(y)
};

namespace detail {

inline MCEstimate kde_from_distances(std::span<const double> dist, double h, int dim, double scale, Json meta) {
  const double mass = epanechnikov_mass(dim, h) * scale;
  std::vector<double> contrib(dist.size());
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const double u = dist[i] / h;
    if (u < 1.0) {
      contrib[i] = (1.0 - u * u) / mass;
      ++hits;
    }
  }
  meta["bandwidth"] = h;
  meta["hits"] = hits;
  meta["zero_hits"] = hits == 0;
  return mc_estimate(contrib, std::move(meta));
}

}  // namespace detail

/// Kernel density estimate of k(t, x, y) against the Riemannian volume from a
/// chart-space ensemble started at x. Zero hits give 0 with meta.zero_hits.
inline MCEstimate heat_kernel_estimate(const PathEnsemble& e, double t, const ChartPoint& y, double h,
                                       const ManifoldSpec& m, KdeWindow window = KdeWindow::Geodesic) {
  static constexpr const char* kOp = "heat_kernel_estimate";
  if (e.space != StateSpace::Chart)
    throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "chart-space ensemble required");
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "bandwidth must be positive");
  const auto r = detail::record_index(e, t, kOp);
  std::vector<double> dist(static_cast<std::size_t>(e.n_paths));
  double scale = 1.0;
  if (window == KdeWindow::Geodesic) {
    for (std::int64_t p = 0; p < e.n_paths; ++p) dist[static_cast<std::size_t>(p)] = reference_distance(m, e.chart_point(p, r), y);
  } else {
    const Chart& c = m.chart(y.chart);
    scale = local_metric(c, y.x, false).sqrt_det;
    for (std::int64_t p = 0; p < e.n_paths; ++p) {
      const ChartPoint q = e.chart_point(p, r);
      double d = std::numeric_limits<double>::infinity();
      try {
        d = c.difference(y.x, transition_point(m, q.chart, y.chart, q.x)).norm();
      } catch (const Error&) {
      }
      dist[static_cast<std::size_t>(p)] = d;
    }
  }
  Json meta{{"functional", "heat_kernel"}, {"t", t}, {"window", window == KdeWindow::Geodesic ? "geodesic" : "chart"}};
  return detail::kde_from_distances(dist, h, m.dim, scale, std::move(meta));
}

/// Same from an ambient-space ensemble, with the window in ambient distance.
inline MCEstimate heat_kernel_estimate(const PathEnsemble& e, double t, const Vector& y, double h, int manifold_dim) {
  static constexpr const char* kOp = "heat_kernel_estimate";
  if (e.space != StateSpace::Ambient)
    throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "ambient-space ensemble required");
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "bandwidth must be positive");
  const auto r = detail::record_index(e, t, kOp);
  std::vector<double> dist(static_cast<std::size_t>(e.n_paths));
  for (std::int64_t p = 0; p < e.n_paths; ++p) dist[static_cast<std::size_t>(p)] = (e.vector(p, r) - y).norm();
  return detail::kde_from_distances(dist, h, manifold_dim, 1.0,
                                    Json{{"functional", "heat_kernel"}, {"t", t}, {"window", "ambient"}});
}

// --- heat kernel by guided bridges -------------------------------------------

struct BridgeOptions {
  std::int64_t n_paths = 100000;
  int n_steps = 64;
  std::uint64_t seed = 0;
  /// Sum over periodic images y + k P, k in {-1, 0, 1}^d.
  bool images = true;
  int threads = 0;
  /// Extra independent stream index, so repeated calls do not share noise.
  std::uint64_t stream = 0;
};

namespace detail {

/// Chart holding both points with the largest smaller trust margin.
inline std::pair<ChartPoint, ChartPoint> common_chart(const ManifoldSpec& m, const ChartPoint& x, const ChartPoint& y,
                                                      const char* op) {
  std::optional<std::pair<ChartPoint, ChartPoint>> best;
  double best_margin = -std::numeric_limits<double>::infinity();
  for (const auto& c : m.charts) {
    try {
      const ChartPoint a{c.id, transition_point(m, x.chart, c.id, x.x)};
      const ChartPoint b{c.id, transition_point(m, y.chart, c.id, y.x)};
      const double margin = std::min(c.trust_margin(a.x), c.trust_margin(b.x));
      if (margin > 0.0 && margin > best_margin) {
        best_margin = margin;
        best = {a, b};
      }
    } catch (const Error&) {
    }
  }
  if (!best) throw Error(ErrorKind::Chart, "estimators", op, "no chart trusts both points");
  return *best;
}

}  // namespace detail

/// k(t, x, y) by importance sampling of the Euler chain conditioned on
/// hitting y: modified-diffusion-bridge proposals, with weights the ratio of
/// Euler transition densities to proposal densities. Estimates the Euler
/// transition density in chart coordinates, divided by sqrt|g|(y).
inline MCEstimate bridge_heat_kernel(const ManifoldSpec& m, const ChartPoint& x, const ChartPoint& y, double t,
                                     const BridgeOptions& opt = {}) {
  static constexpr const char* kOp = "bridge_heat_kernel";
  if (!(t > 0.0)) throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "t must be positive");
  if (opt.n_paths < 2 || opt.n_steps < 2)
    throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "need n_paths >= 2 and n_steps >= 2");
  const auto [a, b] = detail::common_chart(m, x, y, kOp);
  const Chart& c = m.chart(a.chart);
  const int d = m.dim;

  std::vector<Vector> targets;
  std::vector<int> shift(static_cast<std::size_t>(d), -1);
  const bool periodic = opt.images && c.is_periodic();
  for (;;) {
    Vector yk = b.x;
    for (int i = 0; i < d && periodic; ++i) {
      const double p = static_cast<std::size_t>(i) < c.periods.size() ? c.periods[static_cast<std::size_t>(i)] : 0.0;
      if (p > 0.0) yk(i) += shift[static_cast<std::size_t>(i)] * p;
    }
    targets.push_back(yk);
    if (!periodic) break;
    int i = 0;
    while (i < d && ++shift[static_cast<std::size_t>(i)] > 1) shift[static_cast<std::size_t>(i++)] = -1;
    if (i == d) break;
  }
  // Duplicate images of non-periodic coordinates collapse to one target.
  std::sort(targets.begin(), targets.end(), [](const Vector& u, const Vector& v) {
    return std::lexicographical_compare(u.data(), u.data() + u.size(), v.data(), v.data() + v.size());
  });
  targets.erase(std::unique(targets.begin(), targets.end(), [](const Vector& u, const Vector& v) { return u == v; }),
                targets.end());

  const int N = opt.n_steps;
  const double dt = t / N;
  const double log_norm = -0.5 * d * std::log(2.0 * std::numbers::pi * dt);
  const auto n = static_cast<std::size_t>(opt.n_paths);
  std::vector<double> logw(n * targets.size(), -std::numeric_limits<double>::infinity());
  std::vector<char> killed(n * targets.size(), 0);

  parallel_for(n * targets.size(), opt.threads, [&](std::size_t idx) {
    const std::size_t img = idx / n, i = idx % n;
    const PathStream rng(opt.seed, (opt.stream * targets.size() + img) * n + i, StreamPurpose::Sampling);
    const Vector& target = targets[img];
    Vector xj = a.x, xi(d);
    double lw = 0.0;
    for (int j = 0; j < N; ++j) {
      if (!c.in_trust_region(xj)) {
        killed[idx] = 1;
        return;
      }
      const LocalMetric lm = local_metric(c, xj);
      const ItoCoefficients co = ito_coefficients(lm);
      const double half_logdet = std::log(lm.sqrt_det);
      const Vector mean = xj + dt * co.drift;
      if (j == N - 1) {
        const Vector r = target - mean;
        lw += log_norm + half_logdet - 0.5 * r.dot(lm.g * r) / dt;
        break;
      }
      const double rho = static_cast<double>(N - j - 1) / (N - j);
      rng.normals(static_cast<std::uint32_t>(j), std::span<double>(xi.data(), static_cast<std::size_t>(d)));
      const Vector next = xj + (target - xj) / (N - j) + std::sqrt(dt * rho) * (co.sigma * xi);
      const Vector r = next - mean;
      const double log_p = log_norm + half_logdet - 0.5 * r.dot(lm.g * r) / dt;
      const double log_q = log_norm - 0.5 * d * std::log(rho) + half_logdet - 0.5 * xi.squaredNorm();
      lw += log_p - log_q;
      xj = next;
    }
    logw[idx] = lw;
  });

  double top = -std::numeric_limits<double>::infinity();
  for (double v : logw) top = std::max(top, v);
  std::int64_t n_killed = 0;
  for (char k : killed) n_killed += k;
  const double sqrt_det_y = local_metric(c, b.x, false).sqrt_det;
  Json meta{{"functional", "heat_kernel"}, {"method", "guided_bridge"}, {"t", t}, {"n_steps", N},
            {"images", targets.size()}, {"killed", n_killed}};
  if (!std::isfinite(top)) {
    meta["zero_hits"] = true;
    return {0.0, 0.0, opt.n_paths, meta};
  }
  // Per path: sum over images of the weight, scaled by exp(-top).
  std::vector<double> w(n, 0.0);
  for (std::size_t idx = 0; idx < logw.size(); ++idx) w[idx % n] += std::exp(logw[idx] - top);
  const auto s = stats::mean_se(w);
  const double scale = std::exp(top) / sqrt_det_y;
  meta["zero_hits"] = false;
  meta["log_value"] = std::log(s.mean) + top - std::log(sqrt_det_y);
  meta["relative_std_error"] = s.std_error / s.mean;
  return {s.mean * scale, s.std_error * scale, opt.n_paths, meta};
}

// --- Varadhan distance -----------------------------------------------------------

enum class VaradhanMethod { GuidedBridge, EnsembleKde };

struct VaradhanOptions {
  VaradhanMethod method = VaradhanMethod::GuidedBridge;
  std::int64_t n_paths = 100000;
  std::uint64_t seed = 0;
  int threads = 0;
  /// Bridge discretization.
  int n_steps = 64;
  /// Ensemble time step and bandwidth constant for EnsembleKde.
  double dt = 1e-3;
  double bandwidth_c = 1.0;
  /// Fixes the t log t coefficient (the flat value is the dimension)
  /// instead of fitting it.
  std::optional<double> log_coefficient;
};

struct VaradhanRow {
  double t = 0.0;
  double kernel = 0.0;
  double kernel_se = 0.0;
  /// -2 t log k and its delta-method standard error.
  double y = 0.0;
  double y_se = 0.0;
};

struct VaradhanResult {
  /// Extrapolated d^2.
  MCEstimate d2;
  std::vector<VaradhanRow> rows;
  double slope = 0.0;
  double log_coefficient = 0.0;
  /// RMS residual of the fit; zero when it interpolates.
  double residual = 0.0;
  /// Residual beyond three combined standard errors.
  bool undersampled = false;
};

namespace detail {

/// Ordinary least squares; returns coefficients and the weights c with
/// beta_0 = sum_i c_i y_i.
inline std::pair<Vector, Vector> least_squares(const Matrix& X, const Vector& y) {
  const Matrix pinv = (X.transpose() * X).ldlt().solve(X.transpose());
  return {pinv * y, pinv.row(0).transpose()};
}

}  // namespace detail

/// d^2(x, y) from -2 t log k(t, x, y) over decreasing t_list, extrapolated to
/// t = 0 by least squares in (1, t, t log t), or in (1, t) after removing a
/// fixed log_coefficient * t log t.
inline VaradhanResult varadhan_distance(const ManifoldSpec& m, const ChartPoint& x, const ChartPoint& y,
                                        std::span<const double> t_list, const VaradhanOptions& opt = {}) {
  static constexpr const char* kOp = "varadhan_distance";
  const std::size_t nt = t_list.size();
  const bool free = !opt.log_coefficient;
  const std::size_t params = free ? 3 : 2;
  if (nt < 3) throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "need at least 3 times");
  for (std::size_t i = 0; i < nt; ++i) {
    if (!(t_list[i] > 0.0)) throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "times must be positive");
    if (i > 0 && !(t_list[i] < t_list[i - 1]))
      throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "t_list must be strictly decreasing");
  }

  VaradhanResult out;
  std::vector<MCEstimate> ks(nt);
  if (opt.method == VaradhanMethod::GuidedBridge) {
    for (std::size_t i = 0; i < nt; ++i) {
      BridgeOptions b;
      b.n_paths = opt.n_paths;
      b.n_steps = opt.n_steps;
      b.seed = opt.seed;
      b.threads = opt.threads;
      b.stream = i;
      ks[i] = bridge_heat_kernel(m, x, y, t_list[i], b);
    }
  } else {
    SimConfig cfg;
    cfg.dt = opt.dt;
    cfg.horizon = t_list[0];
    cfg.n_paths = opt.n_paths;
    cfg.master_seed = opt.seed;
    cfg.validate(kOp);
    const auto e = simulate_intrinsic_chart(m, x, cfg, opt.threads);
    for (std::size_t i = 0; i < nt; ++i)
      ks[i] = heat_kernel_estimate(e, t_list[i], y, default_bandwidth(t_list[i], opt.n_paths, m.dim, opt.bandwidth_c), m);
  }

  Matrix X(static_cast<Eigen::Index>(nt), static_cast<Eigen::Index>(params));
  Vector z(static_cast<Eigen::Index>(nt));
  for (std::size_t i = 0; i < nt; ++i) {
    const double t = t_list[i];
    if (!(ks[i].value > 0.0))
      throw Error(ErrorKind::InsufficientSampling, "estimators", kOp,
                  "zero kernel estimate at t = " + format_double(t));
    VaradhanRow row{t, ks[i].value, ks[i].std_error, -2.0 * t * std::log(ks[i].value),
                    2.0 * t * ks[i].std_error / ks[i].value};
    if (ks[i].meta.contains("log_value")) row.y = -2.0 * t * ks[i].meta["log_value"].get<double>();
    out.rows.push_back(row);
    const auto r = static_cast<Eigen::Index>(i);
    X(r, 0) = 1.0;
    X(r, 1) = t;
    if (free) X(r, 2) = t * std::log(t);
    z(r) = row.y - (free ? 0.0 : *opt.log_coefficient * t * std::log(t));
  }
  const auto [beta, weights] = detail::least_squares(X, z);
  double var = 0.0, rss = 0.0, se_scale = 0.0;
  for (std::size_t i = 0; i < nt; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    var += weights(r) * weights(r) * out.rows[i].y_se * out.rows[i].y_se;
    const double res = z(r) - X.row(r).dot(beta);
    rss += res * res;
    se_scale = std::max(se_scale, out.rows[i].y_se);
  }
  out.slope = beta(1);
  out.log_coefficient = free ? beta(2) : *opt.log_coefficient;
  out.residual = nt > params ? std::sqrt(rss / static_cast<double>(nt - params)) : 0.0;
  out.undersampled = se_scale > 0.0 && out.residual > 3.0 * se_scale;
  out.d2.value = beta(0);
  out.d2.std_error = std::sqrt(var);
  out.d2.n_samples = opt.n_paths;
  out.d2.meta = Json{{"functional", "varadhan_d2"},
                     {"method", opt.method == VaradhanMethod::GuidedBridge ? "guided_bridge" : "ensemble_kde"},
                     {"t_window", {t_list[nt - 1], t_list[0]}},
                     {"slope", out.slope},
                     {"log_coefficient", out.log_coefficient},
                     {"residual", out.residual},
                     {"undersampled", out.undersampled}};
  return out;
}

/// Varadhan distance for the pullback metric u^# e on m's atlas.
inline VaradhanResult varadhan_distance(const EmbeddingMap& u, const ManifoldSpec& m, const ChartPoint& x,
                                        const ChartPoint& y, std::span<const double> t_list,
                                        const VaradhanOptions& opt = {}) {
  check_domain(u, m);
  ManifoldSpec pulled = m;
  pulled.name = m.name + "/pullback(" + u.name + ")";
  for (auto& c : pulled.charts) c = pullback_chart(u, c);
  pulled.distance = nullptr;
  return varadhan_distance(pulled, x, y, t_list, opt);
}

inline void write_varadhan_csv(const VaradhanResult& r, std::ostream& os) {
  os << "t,kernel,kernel_se,minus_2t_log_k,se\n";
  for (const auto& row : r.rows)
    os << format_double(row.t) << ',' << format_double(row.kernel) << ',' << format_double(row.kernel_se) << ','
       << format_double(row.y) << ',' << format_double(row.y_se) << '\n';
}

// --- equality in law ------------------------------------------------------------

struct ObservableStatistic {
  std::string name;
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Per-observable two-sample KS statistics with a Bonferroni family decision:
/// reject iff min p < level / correction.
struct LawComparisonReport {
  std::vector<ObservableStatistic> statistics;
  bool reject = false;
  double level = 0.01;
  int correction = 0;
  std::int64_t n_a = 0;
  std::int64_t n_b = 0;

  [[nodiscard]] double min_p_value() const {
    double p = 1.0;
    for (const auto& s : statistics) p = std::min(p, s.p_value);
    return p;
  }
};

inline Json to_json(const LawComparisonReport& r) {
  Json stats = Json::array();
  for (const auto& s : r.statistics)
    stats.push_back(Json{{"observable", s.name}, {"ks_statistic", s.statistic}, {"p_value", s.p_value}});
  return Json{{"decision", r.reject ? "reject" : "accept"},
              {"level", r.level},
              {"correction", r.correction},
              {"n_a", r.n_a},
              {"n_b", r.n_b},
              {"min_p_value", r.min_p_value()},
              {"statistics", stats}};
}

namespace detail {

inline void decide(LawComparisonReport& r) {
  r.correction = static_cast<int>(r.statistics.size());
  r.reject = r.correction > 0 && r.min_p_value() < r.level / r.correction;
}

inline void require_comparable_space(const PathEnsemble& e, const char* op) {
  if (e.space == StateSpace::Ambient) return;
  for (int c : e.charts)
    if (c != e.charts.front())
      throw Error(ErrorKind::InvalidArgument, "estimators", op,
                  "chart ensemble visits several charts; push it through an embedding first");
}

}  // namespace detail

/// The fixed observable set: each coordinate at T, |Z_T - Z_0|, and the
/// trapezoidal time average of each coordinate over the record grid.
inline std::vector<std::pair<std::string, std::vector<double>>> law_observables(const PathEnsemble& e) {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  const std::int64_t last = e.n_records() - 1;
  const auto n = static_cast<std::size_t>(e.n_paths);
  for (int i = 0; i < e.dim; ++i) {
    std::vector<double> v(n);
    for (std::size_t p = 0; p < n; ++p) v[p] = e.at(static_cast<std::int64_t>(p), last, i);
    out.emplace_back(e.coordinate_names[static_cast<std::size_t>(i)] + "(T)", std::move(v));
  }
  std::vector<double> disp(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto q = static_cast<std::int64_t>(p);
    disp[p] = (e.vector(q, last) - e.vector(q, 0)).norm();
  }
  out.emplace_back("|Z_T - Z_0|", std::move(disp));
  const double T = e.horizon() - e.times.front();
  for (int i = 0; i < e.dim; ++i) {
    std::vector<double> v(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      double s = 0.0;
      for (std::int64_t r = 0; r < last; ++r) {
        const double w = e.times[static_cast<std::size_t>(r + 1)] - e.times[static_cast<std::size_t>(r)];
        s += 0.5 * w * (e.at(static_cast<std::int64_t>(p), r, i) + e.at(static_cast<std::int64_t>(p), r + 1, i));
      }
      v[p] = T > 0.0 ? s / T : e.at(static_cast<std::int64_t>(p), 0, i);
    }
    out.emplace_back("mean " + e.coordinate_names[static_cast<std::size_t>(i)], std::move(v));
  }
  return out;
}

/// Two-sample KS test of every fixed observable, Bonferroni-corrected.
inline LawComparisonReport compare_laws(const PathEnsemble& a, const PathEnsemble& b, double level = 0.01) {
  static constexpr const char* kOp = "compare_laws";
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "level in (0, 1)");
  if (std::abs(a.horizon() - b.horizon()) > 1e-9 * std::max(1.0, a.horizon()))
    throw Error(ErrorKind::MismatchedHorizon, "estimators", kOp,
                "horizons " + format_double(a.horizon()) + " and " + format_double(b.horizon()) + " differ");
  if (a.space != b.space || a.dim != b.dim)
    throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "ensembles live in different spaces");
  detail::require_comparable_space(a, kOp);
  detail::require_comparable_space(b, kOp);
  LawComparisonReport r;
  r.level = level;
  r.n_a = a.n_paths;
  r.n_b = b.n_paths;
  const auto oa = law_observables(a), ob = law_observables(b);
  for (std::size_t i = 0; i < oa.size(); ++i) {
    const auto ks = stats::ks_two_sample(oa[i].second, ob[i].second);
    r.statistics.push_back({oa[i].first, ks.statistic, ks.p_value});
  }
  detail::decide(r);
  return r;
}

/// One family decision over several comparisons (e.g. start points); the
/// Bonferroni factor is the total number of observables.
inline LawComparisonReport combine_reports(const std::vector<LawComparisonReport>& parts,
                                           const std::vector<std::string>& labels, double level = 0.01) {
  LawComparisonReport r;
  r.level = level;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (auto s : parts[k].statistics) {
      s.name = (k < labels.size() ? labels[k] : "part " + std::to_string(k)) + ": " + s.name;
      r.statistics.push_back(s);
    }
    r.n_a = parts[k].n_a;
    r.n_b = parts[k].n_b;
  }
  detail::decide(r);
  return r;
}

// --- martingale problem checks ------------------------------------------------------

/// Test function with its Laplace-Beltrami image in closed form.
struct TestFunction {
  std::string name;
  ScalarField f;
  std::function<double(const ChartPoint&)> laplacian;
};

/// Fixed test-function battery per builtin manifold.
inline std::vector<TestFunction> test_battery(const ManifoldSpec& m) {
  std::vector<TestFunction> out;
  auto add = [&](std::string name, std::function<double(const ChartPoint&)> f,
                 std::function<double(const ChartPoint&)> lap) { out.push_back({std::move(name), {std::move(f), {}}, std::move(lap)}); };
  if (m.name == "euclidean") {
    const int n = m.dim;
    add("x1", [](const ChartPoint& p) { return p.x(0); }, [](const ChartPoint&) { return 0.0; });
    add("|x|^2", [](const ChartPoint& p) { return p.x.squaredNorm(); }, [n](const ChartPoint&) { return 2.0 * n; });
  } else if (m.name == "circle") {
    const double r2 = m.chart(0).metric(Vector::Zero(1))(0, 0);
    add("cos(theta)", [](const ChartPoint& p) { return std::cos(p.x(0)); },
        [r2](const ChartPoint& p) { return -std::cos(p.x(0)) / r2; });
    add("sin(2 theta)", [](const ChartPoint& p) { return std::sin(2.0 * p.x(0)); },
        [r2](const ChartPoint& p) { return -4.0 * std::sin(2.0 * p.x(0)) / r2; });
  } else if (m.name == "flat-torus") {
    const double k1 = 2.0 * std::numbers::pi / m.chart(0).periods[0];
    const double k2 = 2.0 * std::numbers::pi / m.chart(0).periods[1];
    add("cos(k1 x1)", [k1](const ChartPoint& p) { return std::cos(k1 * p.x(0)); },
        [k1](const ChartPoint& p) { return -k1 * k1 * std::cos(k1 * p.x(0)); });
    add("sin(k1 x1 + k2 x2)", [k1, k2](const ChartPoint& p) { return std::sin(k1 * p.x(0) + k2 * p.x(1)); },
        [k1, k2](const ChartPoint& p) { return -(k1 * k1 + k2 * k2) * std::sin(k1 * p.x(0) + k2 * p.x(1)); });
  } else if (m.name == "sphere" || m.name == "sphere-polar") {
    // Ambient coordinates of the unit sphere are degree-1 harmonics, their
    // products degree 2: Delta = -l(l+1) / r^2.
    const bool polar = m.name == "sphere-polar";
    const Vector probe = polar ? Vector(Vector::Constant(2, 1.0)) : Vector(Vector::Zero(2));
    const double g00 = m.chart(0).metric(probe)(0, 0);
    const double r2 = polar ? g00 : g00 / 4.0;
    auto unit = [polar](const ChartPoint& p) -> Eigen::Vector3d {
      if (polar) return manifolds::detail::polar_atlas_to_unit(p.chart, p.x);
      return manifolds::detail::stereo_to_ambient(p.x, 1.0, p.chart == manifolds::kNorthChart ? 1.0 : -1.0);
    };
    add("z", [unit](const ChartPoint& p) { return unit(p)(2); },
        [unit, r2](const ChartPoint& p) { return -2.0 * unit(p)(2) / r2; });
    add("x z", [unit](const ChartPoint& p) { return unit(p)(0) * unit(p)(2); },
        [unit, r2](const ChartPoint& p) { return -6.0 * unit(p)(0) * unit(p)(2) / r2; });
  } else {
    throw Error(ErrorKind::Unsupported, "estimators", "test_battery", "no test battery for manifold '" + m.name + "'");
  }
  return out;
}

namespace detail {

/// max over F in {1, f(X_s)} of |E[(f(X_t) - f(X_s) - 1/2 int_s^t Lf dr) F]|,
/// from per-record values f and Lf (trapezoidal integral).
inline MCEstimate martingale_defect_from(const PathEnsemble& e, const std::function<double(std::int64_t, std::int64_t)>& f,
                                         const std::function<double(std::int64_t, std::int64_t)>& lap, double s,
                                         double t) {
  static constexpr const char* kOp = "martingale_defect";
  if (!(s < t)) throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "need s < t");
  const auto rs = record_index(e, s, kOp), rt = record_index(e, t, kOp);
  const auto n = static_cast<std::size_t>(e.n_paths);
  std::vector<double> plain(n), weighted(n);
  parallel_for(n, 1, [&](std::size_t i) {
    const auto p = static_cast<std::int64_t>(i);
    double integral = 0.0, prev = lap(p, rs);
    for (std::int64_t r = rs; r < rt; ++r) {
      const double next = lap(p, r + 1);
      integral += 0.5 * (e.times[static_cast<std::size_t>(r + 1)] - e.times[static_cast<std::size_t>(r)]) * (prev + next);
      prev = next;
    }
    const double fs = f(p, rs);
    const double m = f(p, rt) - fs - 0.5 * integral;
    plain[i] = m;
    weighted[i] = m * fs;
  });
  const auto a = stats::mean_se(plain), b = stats::mean_se(weighted);
  const bool first = std::abs(a.mean) / std::max(a.std_error, 1e-300) >= std::abs(b.mean) / std::max(b.std_error, 1e-300);
  const auto& pick = first ? a : b;
  Json meta{{"functional", "martingale_defect"},
            {"s", s},
            {"t", t},
            {"weights", Json::array({Json{{"F", "1"}, {"defect", a.mean}, {"std_error", a.std_error}},
                                     Json{{"F", "f(X_s)"}, {"defect", b.mean}, {"std_error", b.std_error}}})},
            {"selected", first ? "1" : "f(X_s)"}};
  return {std::abs(pick.mean), pick.std_error, static_cast<std::int64_t>(n), std::move(meta)};
}

}  // namespace detail

/// Martingale defect of f over [s, t] for a chart-space ensemble; reports the
/// test weight with the larger defect in standard errors.
inline MCEstimate martingale_defect(const PathEnsemble& e, const TestFunction& tf, double s, double t) {
  if (e.space != StateSpace::Chart)
    throw Error(ErrorKind::InvalidArgument, "estimators", "martingale_defect", "chart-space ensemble required");
  auto out = detail::martingale_defect_from(
      e, [&](std::int64_t p, std::int64_t r) { return tf.f.value(e.chart_point(p, r)); },
      [&](std::int64_t p, std::int64_t r) { return tf.laplacian(e.chart_point(p, r)); }, s, t);
  out.meta["function"] = tf.name;
  return out;
}

/// Same for an ambient ensemble with f and its surface Laplacian given on R^q.
inline MCEstimate martingale_defect(const PathEnsemble& e, const std::function<double(const Vector&)>& f,
                                    const std::function<double(const Vector&)>& laplacian, double s, double t) {
  if (e.space != StateSpace::Ambient)
    throw Error(ErrorKind::InvalidArgument, "estimators", "martingale_defect", "ambient-space ensemble required");
  return detail::martingale_defect_from(
      e, [&](std::int64_t p, std::int64_t r) { return f(e.vector(p, r)); },
      [&](std::int64_t p, std::int64_t r) { return laplacian(e.vector(p, r)); }, s, t);
}

/// Realized quadratic variation sum (f(X_{k+1}) - f(X_k))^2 against the
/// left-point sum of |grad_g f|^2 dt, per path. Value: mean discrepancy
/// divided by the mean predicted QV; meta carries both means.
inline MCEstimate quadratic_variation_check(const PathEnsemble& e, const ScalarField& f, const ManifoldSpec& m) {
  static constexpr const char* kOp = "quadratic_variation_check";
  if (e.space != StateSpace::Chart)
    throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "chart-space ensemble required");
  if (e.meta.config.record_stride != 1)
    throw Error(ErrorKind::InvalidArgument, "estimators", kOp, "needs record_stride = 1");
  const auto n = static_cast<std::size_t>(e.n_paths);
  std::vector<double> diff(n), predicted(n), realized(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = static_cast<std::int64_t>(i);
    double qv = 0.0, integral = 0.0;
    ChartPoint prev = e.chart_point(p, 0);
    double fprev = f.value(prev);
    for (std::int64_t r = 0; r + 1 < e.n_records(); ++r) {
      const double dt = e.times[static_cast<std::size_t>(r + 1)] - e.times[static_cast<std::size_t>(r)];
      const Vector grad = f.grad(prev);
      const LocalMetric lm = local_metric(m.chart(prev.chart), prev.x, false);
      integral += grad.dot(lm.g_inv * grad) * dt;
      const ChartPoint next = e.chart_point(p, r + 1);
      const double fnext = f.value(next);
      qv += (fnext - fprev) * (fnext - fprev);
      prev = next;
      fprev = fnext;
    }
    realized[i] = qv;
    predicted[i] = integral;
    diff[i] = qv - integral;
  }
  const auto d = stats::mean_se(diff), pr = stats::mean_se(predicted), re = stats::mean_se(realized);
  const double scale = pr.mean != 0.0 ? pr.mean : 1.0;
  Json meta{{"functional", "quadratic_variation"},
            {"realized_mean", re.mean},
            {"realized_std_error", re.std_error},
            {"predicted_mean", pr.mean},
            {"predicted_std_error", pr.std_error},
            {"difference_mean", d.mean},
            {"difference_std_error", d.std_error}};
  if (pr.mean == 0.0 && re.mean == 0.0) return {0.0, 0.0, static_cast<std::int64_t>(n), std::move(meta)};
  return {d.mean / scale, d.std_error / std::abs(scale), static_cast<std::int64_t>(n), std::move(meta)};
}

// --- metric from distances --------------------------------------------------------

using DistanceOracle = std::function<double(const ChartPoint&, const ChartPoint&)>;

/// g_ij ~ (d^2(x, x + h(e_i + e_j)) - d^2(x, x + h e_i) - d^2(x, x + h e_j)) / (2 h^2),
/// symmetrized.
inline Matrix metric_from_distance(const DistanceOracle& dist, const ChartPoint& x, double h) {
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidArgument, "estimators", "metric_from_distance", "h must be positive");
  const auto n = static_cast<int>(x.x.size());
  auto shifted = [&](int i, int j) {
    ChartPoint q = x;
    q.x(i) += h;
    q.x(j) += h;
    return q;
  };
  auto single = [&](int i) {
    ChartPoint q = x;
    q.x(i) += h;
    return q;
  };
  std::vector<double> d1(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double d = dist(x, single(i));
    d1[static_cast<std::size_t>(i)] = d * d;
  }
  Matrix g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      const double d = dist(x, shifted(i, j));
      g(i, j) = g(j, i) = (d * d - d1[static_cast<std::size_t>(i)] - d1[static_cast<std::size_t>(j)]) / (2.0 * h * h);
    }
  return g;
}

}  // namespace isobm
