#pragma once

#include "isobm/embedding.hpp"
#include "isobm/geometry.hpp"
#include "isobm/parallel.hpp"
#include "isobm/rng.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace isobm {

enum class Scheme { ChartIto, FrameBundle, ExtrinsicItoH, ExtrinsicStratonovichMidpoint, Tanaka };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::ChartIto: return "chart_ito";
    case Scheme::FrameBundle: return "frame_bundle";
    case Scheme::ExtrinsicItoH: return "extrinsic_ito_H";
    case Scheme::ExtrinsicStratonovichMidpoint: return "extrinsic_stratonovich_midpoint";
    case Scheme::Tanaka: return "tanaka";
  }
  return "unknown";
}

inline Scheme scheme_from_string(std::string_view s) {
  for (Scheme v : {Scheme::ChartIto, Scheme::FrameBundle, Scheme::ExtrinsicItoH,
                   Scheme::ExtrinsicStratonovichMidpoint, Scheme::Tanaka})
    if (to_string(v) == s) return v;
  throw Error(ErrorKind::Config, "sde", "scheme_from_string", "unknown scheme '" + std::string(s) + "'");
}

/// Stage rule of the frame-bundle scheme.
enum class FrameIntegrator { Heun, Rk4 };

inline std::string to_string(FrameIntegrator f) { return f == FrameIntegrator::Heun ? "heun" : "rk4"; }

inline FrameIntegrator frame_integrator_from_string(std::string_view s) {
  if (s == "heun") return FrameIntegrator::Heun;
  if (s == "rk4") return FrameIntegrator::Rk4;
  throw Error(ErrorKind::Config, "sde", "frame_integrator_from_string", "unknown frame integrator '" + std::string(s) + "'");
}

inline bool is_extrinsic(Scheme s) {
  return s == Scheme::ExtrinsicItoH || s == Scheme::ExtrinsicStratonovichMidpoint;
}

struct SimConfig {
  double dt = 1e-3;
  double horizon = 1.0;
  std::int64_t n_paths = 1000;
  std::uint64_t master_seed = 0;
  Scheme scheme = Scheme::ChartIto;
  bool retraction = true;
  int record_stride = 1;
  /// Gram-Schmidt cadence of the frame-bundle scheme, in steps.
  int reorthonormalize_every = 10;
  FrameIntegrator frame_integrator = FrameIntegrator::Rk4;
  /// Multiplies the chart Ito drift. 1 is Brownian motion; anything else
  /// is a deliberately corrupted integrator for negative controls.
  double drift_scale = 1.0;
  /// Stream index of path 0; distinct offsets give disjoint ensembles.
  std::uint64_t path_offset = 0;

  [[nodiscard]] std::int64_t n_steps() const { return std::llround(horizon / dt); }

  void validate(const char* op) const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw Error(ErrorKind::InvalidArgument, "sde", op, "dt must be positive");
    if (!(horizon >= dt)) throw Error(ErrorKind::InvalidArgument, "sde", op, "horizon must be at least dt");
    if (n_paths < 1) throw Error(ErrorKind::InvalidArgument, "sde", op, "n_paths must be at least 1");
    if (record_stride < 1) throw Error(ErrorKind::InvalidArgument, "sde", op, "record_stride must be at least 1");
    if (reorthonormalize_every < 1)
      throw Error(ErrorKind::InvalidArgument, "sde", op, "reorthonormalize_every must be at least 1");
    const double steps = horizon / dt;
    if (std::abs(steps - std::round(steps)) > 1e-6 * std::max(1.0, steps))
      throw Error(ErrorKind::InvalidArgument, "sde", op, "horizon must be an integer multiple of dt");
    if (n_steps() > std::int64_t{0xffffffff})
      throw Error(ErrorKind::InvalidArgument, "sde", op, "too many steps for the noise counter");
  }
};

/// Frame-bundle state: base point and frame columns E_j in chart coordinates.
struct FrameState {
  int chart = 0;
  Vector x;
  Matrix e;
};

/// g-orthonormality defect ||e^T g e - I||_F.
inline double frame_defect(const Matrix& e, const Matrix& g) {
  return (e.transpose() * g * e - Matrix::Identity(e.cols(), e.cols())).norm();
}

/// Modified Gram-Schmidt of the columns of e with respect to g.
inline Matrix gram_schmidt(Matrix e, const Matrix& g) {
  for (int j = 0; j < e.cols(); ++j) {
    for (int k = 0; k < j; ++k) e.col(j) -= (e.col(k).dot(g * e.col(j))) * e.col(k);
    e.col(j) /= std::sqrt(e.col(j).dot(g * e.col(j)));
  }
  return e;
}

/// Per-ensemble health counters, reduced over paths.
struct Diagnostics {
  double max_frame_defect = 0.0;
  std::int64_t stability_warnings = 0;
  std::int64_t drift_off_warnings = 0;
  double max_surface_distance = 0.0;
  std::int64_t chart_switches = 0;

  void merge(const Diagnostics& o) {
    max_frame_defect = std::max(max_frame_defect, o.max_frame_defect);
    stability_warnings += o.stability_warnings;
    drift_off_warnings += o.drift_off_warnings;
    max_surface_distance = std::max(max_surface_distance, o.max_surface_distance);
    chart_switches += o.chart_switches;
  }
};

enum class StateSpace { Chart, Ambient };

struct SeedRecord {
  std::uint64_t master_seed = 0;
  /// Path i draws from stream (master_seed, path_offset + i).
  std::uint64_t path_offset = 0;
  std::string generator = "philox4x32-10";
};

struct EnsembleMeta {
  std::string scheme;
  std::string manifold;
  std::string embedding;
  SimConfig config;
  int start_chart = -1;
  std::vector<double> start;
  Diagnostics diagnostics;
};

/// Recorded sample paths. States are stored path-major: state (p, r) is the
/// dim values at offset (p * n_records + r) * dim.
struct PathEnsemble {
  std::vector<double> times;
  std::int64_t n_paths = 0;
  int dim = 0;
  StateSpace space = StateSpace::Chart;
  std::vector<std::string> coordinate_names;
  std::vector<double> values;
  /// Chart id per state, or -1 for ambient states.
  std::vector<int> charts;
  SeedRecord seeds;
  EnsembleMeta meta;

  [[nodiscard]] std::int64_t n_records() const { return static_cast<std::int64_t>(times.size()); }
  [[nodiscard]] double horizon() const { return times.empty() ? 0.0 : times.back(); }

  [[nodiscard]] std::size_t offset(std::int64_t path, std::int64_t record) const {
    return static_cast<std::size_t>(path * n_records() + record);
  }
  [[nodiscard]] std::span<const double> state(std::int64_t path, std::int64_t record) const {
    return {values.data() + offset(path, record) * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
  [[nodiscard]] double at(std::int64_t path, std::int64_t record, int coord) const {
    return values[offset(path, record) * static_cast<std::size_t>(dim) + static_cast<std::size_t>(coord)];
  }
  [[nodiscard]] int chart(std::int64_t path, std::int64_t record) const { return charts[offset(path, record)]; }
  [[nodiscard]] Vector vector(std::int64_t path, std::int64_t record) const {
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v(i) = at(path, record, i);
    return v;
  }
  [[nodiscard]] ChartPoint chart_point(std::int64_t path, std::int64_t record) const {
    return {chart(path, record), vector(path, record)};
  }
  /// Index of the record at time t (exact grid match within dt/2).
  [[nodiscard]] std::int64_t record_at(double t) const {
    const double tol = 0.5 * meta.config.dt;
    for (std::int64_t r = 0; r < n_records(); ++r)
      if (std::abs(times[static_cast<std::size_t>(r)] - t) <= tol) return r;
    throw Error(ErrorKind::MismatchedHorizon, "sde", "record_at", "time " + std::to_string(t) + " is not on the grid");
  }
};

namespace detail {

inline std::vector<std::int64_t> record_steps(const SimConfig& cfg) {
  const std::int64_t n = cfg.n_steps();
  std::vector<std::int64_t> out;
  for (std::int64_t k = 0; k <= n; k += cfg.record_stride) out.push_back(k);
  if (out.back() != n) out.push_back(n);
  return out;
}

inline std::vector<std::string> numbered(const char* prefix, int n) {
  std::vector<std::string> out;
  for (int i = 1; i <= n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

inline PathEnsemble allocate(const SimConfig& cfg, int dim, StateSpace space) {
  PathEnsemble e;
  const auto steps = record_steps(cfg);
  for (auto k : steps) e.times.push_back(static_cast<double>(k) * cfg.dt);
  e.n_paths = cfg.n_paths;
  e.dim = dim;
  e.space = space;
  e.coordinate_names = numbered(space == StateSpace::Chart ? "x" : "y", dim);
  const auto states = static_cast<std::size_t>(cfg.n_paths) * steps.size();
  e.values.assign(states * static_cast<std::size_t>(dim), 0.0);
  e.charts.assign(states, -1);
  e.seeds = {cfg.master_seed, cfg.path_offset, "philox4x32-10"};
  e.meta.scheme = to_string(cfg.scheme);
  e.meta.config = cfg;
  return e;
}

/// Writes records of one path as steps complete.
class Recorder {
 public:
  Recorder(PathEnsemble& e, std::int64_t path, int stride, std::int64_t n_steps)
      : e_(e), path_(path), stride_(stride), n_steps_(n_steps) {}

  void offer(std::int64_t step, int chart, const Vector& x) {
    if (step % stride_ != 0 && step != n_steps_) return;
    const std::size_t off = e_.offset(path_, next_);
    for (int i = 0; i < e_.dim; ++i) e_.values[off * static_cast<std::size_t>(e_.dim) + static_cast<std::size_t>(i)] = x(i);
    e_.charts[off] = chart;
    ++next_;
  }

 private:
  PathEnsemble& e_;
  std::int64_t path_;
  int stride_;
  std::int64_t n_steps_;
  std::int64_t next_ = 0;
};

inline ChartPoint admissible_start(const ManifoldSpec& m, const ChartPoint& x0, const char* op) {
  if (x0.x.size() != m.dim)
    throw Error(ErrorKind::InvalidArgument, "sde", op, "start point has wrong dimension");
  const Chart& c = m.chart(x0.chart);
  const Vector x = c.canonical(x0.x);
  if (c.in_trust_region(x)) return {x0.chart, x};
  if (auto best = best_chart(m, {x0.chart, x})) return *best;
  throw Error(ErrorKind::Chart, "sde", op, "start point lies in no trust region");
}

[[noreturn]] inline void step_failure(const char* op, std::int64_t path, double t, const std::string& why) {
  throw Error(ErrorKind::StepFailure, "sde", op,
              "path " + std::to_string(path) + " at t=" + std::to_string(t) + ": " + why);
}

inline bool accepted(const Chart& c, const Vector& y) { return y.allFinite() && c.in_trust_region(y); }

/// One Euler-Maruyama step of the chart Ito SDE with the chart-switch policy.
/// Returns false if no admissible chart accepts the step.
inline bool chart_ito_step(const ManifoldSpec& m, ChartPoint& p, const Vector& xi, double dt, double drift_scale,
                           std::int64_t& switches) {
  const double sq = std::sqrt(dt);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const Chart& c = m.chart(p.chart);
    const ItoCoefficients co = ito_coefficients(local_metric(c, p.x));
    Vector y = p.x + (drift_scale * dt) * co.drift + sq * (co.sigma * xi);
    y = c.canonical(y);
    if (accepted(c, y)) {
      p.x = y;
      return true;
    }
    if (attempt == 1) break;
    const auto best = best_chart(m, p);
    if (!best || best->chart == p.chart) break;
    p = *best;
    ++switches;
  }
  return false;
}

/// F^i_j = -Gamma^i_kl e^k_j dx^l.
inline Matrix frame_increment(const Tensor3& gamma, const Matrix& e, const Vector& dx) {
  const int n = static_cast<int>(e.rows());
  Matrix out = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l) s += gamma(i, k, l) * e(k, j) * dx(l);
      out(i, j) = -s;
    }
  return out;
}

/// Explicit Runge-Kutta step of the horizontal system with the noise
/// increment frozen over the step: Heun (2 stages) or classical RK4 (4 stages).
/// Returns false if no admissible chart accepts the step.
inline bool frame_rk_step(const ManifoldSpec& m, FrameState& s, const Vector& dw, FrameIntegrator method,
                          std::int64_t& switches) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    const Chart& c = m.chart(s.chart);
    bool ok = true;
    // Vector field (dx, de) at (x, e) for the frozen increment.
    auto field = [&](const Vector& x, const Matrix& e, Vector& dx, Matrix& de) {
      if (!accepted(c, x)) {
        ok = false;
        return;
      }
      dx = e * dw;
      de = frame_increment(christoffel(local_metric(c, x)), e, dx);
    };
    Vector dx1, dx2, dx3, dx4, y;
    Matrix de1, de2, de3, de4, f;
    if (method == FrameIntegrator::Heun) {
      field(s.x, s.e, dx1, de1);
      if (ok) field(s.x + dx1, s.e + de1, dx2, de2);
      if (ok) {
        y = s.x + 0.5 * (dx1 + dx2);
        f = s.e + 0.5 * (de1 + de2);
      }
    } else {
      field(s.x, s.e, dx1, de1);
      if (ok) field(s.x + 0.5 * dx1, s.e + 0.5 * de1, dx2, de2);
      if (ok) field(s.x + 0.5 * dx2, s.e + 0.5 * de2, dx3, de3);
      if (ok) field(s.x + dx3, s.e + de3, dx4, de4);
      if (ok) {
        y = s.x + (dx1 + 2.0 * dx2 + 2.0 * dx3 + dx4) / 6.0;
        f = s.e + (de1 + 2.0 * de2 + 2.0 * de3 + de4) / 6.0;
      }
    }
    if (ok && accepted(c, y)) {
      s.x = c.canonical(y);
      s.e = f;
      return true;
    }
    if (attempt == 1) break;
    const auto best = best_chart(m, {s.chart, s.x});
    if (!best || best->chart == s.chart) break;
    s.e = transition_jacobian(m, s.chart, best->chart, s.x) * s.e;
    s.chart = best->chart;
    s.x = best->x;
    ++switches;
  }
  return false;
}

}  // namespace detail

/// Euler-Maruyama paths of the chart Ito SDE with generator (1/2) Laplace-Beltrami.
inline PathEnsemble simulate_intrinsic_chart(const ManifoldSpec& m, const ChartPoint& x0, const SimConfig& cfg,
                                             int threads = 0) {
  cfg.validate("simulate_intrinsic_chart");
  if (cfg.scheme != Scheme::ChartIto)
    throw Error(ErrorKind::InvalidArgument, "sde", "simulate_intrinsic_chart", "scheme must be chart_ito");
  const ChartPoint start = detail::admissible_start(m, x0, "simulate_intrinsic_chart");
  PathEnsemble e = detail::allocate(cfg, m.dim, StateSpace::Chart);
  e.meta.manifold = m.name;
  e.meta.start_chart = start.chart;
  e.meta.start.assign(start.x.data(), start.x.data() + start.x.size());
  const std::int64_t n_steps = cfg.n_steps();
  std::vector<Diagnostics> diag(static_cast<std::size_t>(cfg.n_paths));

  parallel_for(static_cast<std::size_t>(cfg.n_paths), threads, [&](std::size_t i) {
    const auto path = static_cast<std::int64_t>(i);
    const PathStream rng(cfg.master_seed, cfg.path_offset + i);
    detail::Recorder rec(e, path, cfg.record_stride, n_steps);
    ChartPoint p = start;
    Vector xi(m.dim);
    rec.offer(0, p.chart, p.x);
    for (std::int64_t k = 0; k < n_steps; ++k) {
      rng.normals(static_cast<std::uint32_t>(k), std::span<double>(xi.data(), static_cast<std::size_t>(m.dim)));
      if (!detail::chart_ito_step(m, p, xi, cfg.dt, cfg.drift_scale, diag[i].chart_switches))
        detail::step_failure("simulate_intrinsic_chart", path, static_cast<double>(k) * cfg.dt,
                             "step leaves every trust region");
      rec.offer(k + 1, p.chart, p.x);
    }
  });
  for (const auto& d : diag) e.meta.diagnostics.merge(d);
  return e;
}

/// Default frame: the lower Cholesky factor of g^{-1}, which is g-orthonormal.
inline Matrix default_frame(const Chart& c, const Vector& x) { return ito_coefficients(c, x).sigma; }

/// Stratonovich paths on the orthonormal frame bundle (RK4 or Heun, see
/// SimConfig::frame_integrator); records the base point.
inline PathEnsemble simulate_intrinsic_frame(const ManifoldSpec& m, const ChartPoint& x0,
                                             const std::optional<Matrix>& frame0, const SimConfig& cfg,
                                             int threads = 0) {
  static constexpr const char* kOp = "simulate_intrinsic_frame";
  cfg.validate(kOp);
  if (cfg.scheme != Scheme::FrameBundle)
    throw Error(ErrorKind::InvalidArgument, "sde", kOp, "scheme must be frame_bundle");
  const ChartPoint start = detail::admissible_start(m, x0, kOp);
  Matrix e0;
  if (frame0) {
    if (start.chart != x0.chart)
      throw Error(ErrorKind::InvalidArgument, "sde", kOp, "an explicit frame needs a start point in its own chart");
    e0 = *frame0;
    if (e0.rows() != m.dim || e0.cols() != m.dim || frame_defect(e0, m.chart(start.chart).metric(start.x)) > 1e-6)
      throw Error(ErrorKind::InvalidArgument, "sde", kOp, "initial frame is not g-orthonormal");
  } else {
    e0 = default_frame(m.chart(start.chart), start.x);
  }

  PathEnsemble e = detail::allocate(cfg, m.dim, StateSpace::Chart);
  e.meta.manifold = m.name;
  e.meta.start_chart = start.chart;
  e.meta.start.assign(start.x.data(), start.x.data() + start.x.size());
  const std::int64_t n_steps = cfg.n_steps();
  const double sq = std::sqrt(cfg.dt);
  std::vector<Diagnostics> diag(static_cast<std::size_t>(cfg.n_paths));

  parallel_for(static_cast<std::size_t>(cfg.n_paths), threads, [&](std::size_t i) {
    const auto path = static_cast<std::int64_t>(i);
    const PathStream rng(cfg.master_seed, cfg.path_offset + i);
    detail::Recorder rec(e, path, cfg.record_stride, n_steps);
    Diagnostics& d = diag[i];
    FrameState s{start.chart, start.x, e0};
    Vector dw(m.dim);
    rec.offer(0, s.chart, s.x);
    for (std::int64_t k = 0; k < n_steps; ++k) {
      rng.normals(static_cast<std::uint32_t>(k), std::span<double>(dw.data(), static_cast<std::size_t>(m.dim)));
      dw *= sq;
      if (!detail::frame_rk_step(m, s, dw, cfg.frame_integrator, d.chart_switches))
        detail::step_failure(kOp, path, static_cast<double>(k) * cfg.dt, "step leaves every trust region");
      const Matrix g = m.chart(s.chart).metric(s.x);
      const double defect = frame_defect(s.e, g);
      d.max_frame_defect = std::max(d.max_frame_defect, defect);
      if ((k + 1) % cfg.reorthonormalize_every == 0) {
        if (defect > 1e-3) ++d.stability_warnings;
        s.e = gram_schmidt(s.e, g);
      }
      rec.offer(k + 1, s.chart, s.x);
    }
  });
  for (const auto& d : diag) e.meta.diagnostics.merge(d);
  return e;
}

/// Tangentially projected ambient Brownian motion on the image of u.
inline PathEnsemble simulate_extrinsic(const EmbeddingMap& u, const ManifoldSpec& m, const ChartPoint& x0,
                                       const SimConfig& cfg, int threads = 0) {
  static constexpr const char* kOp = "simulate_extrinsic";
  cfg.validate(kOp);
  if (!is_extrinsic(cfg.scheme))
    throw Error(ErrorKind::InvalidArgument, "sde", kOp, "scheme must be extrinsic_ito_H or extrinsic_stratonovich_midpoint");
  if (u.regularity != Regularity::Smooth)
    throw Error(ErrorKind::InvalidArgument, "sde", kOp, "embedding '" + u.name + "' is not tagged smooth");
  if (!u.locate) throw Error(ErrorKind::InvalidArgument, "sde", kOp, "embedding has no closest-point locator");
  const ChartPoint start = detail::admissible_start(m, x0, kOp);
  const Vector z0 = u.eval(start);
  const int q = u.ambient_dim;

  PathEnsemble e = detail::allocate(cfg, q, StateSpace::Ambient);
  e.meta.manifold = m.name;
  e.meta.embedding = u.name;
  e.meta.start_chart = start.chart;
  e.meta.start.assign(start.x.data(), start.x.data() + start.x.size());
  const std::int64_t n_steps = cfg.n_steps();
  const double sq = std::sqrt(cfg.dt);
  const double drift_off = 10.0 * sq;
  std::vector<Diagnostics> diag(static_cast<std::size_t>(cfg.n_paths));

  parallel_for(static_cast<std::size_t>(cfg.n_paths), threads, [&](std::size_t i) {
    const PathStream rng(cfg.master_seed, cfg.path_offset + i);
    detail::Recorder rec(e, static_cast<std::int64_t>(i), cfg.record_stride, n_steps);
    Diagnostics& d = diag[i];
    Vector z = z0;
    Vector db(q);
    rec.offer(0, -1, z);
    for (std::int64_t k = 0; k < n_steps; ++k) {
      rng.normals(static_cast<std::uint32_t>(k), std::span<double>(db.data(), static_cast<std::size_t>(q)));
      db *= sq;
      if (cfg.scheme == Scheme::ExtrinsicItoH) {
        const AmbientShape s = ambient_shape(u, z);
        z += s.projector * db + (0.5 * cfg.dt) * s.mean_curvature;
      } else {
        const Vector zt = z + ambient_shape(u, z).projector * db;
        z += ambient_shape(u, 0.5 * (z + zt)).projector * db;
      }
      if (cfg.retraction) {
        z = closest_point(u, z);
      } else {
        const double dist = (z - closest_point(u, z)).norm();
        d.max_surface_distance = std::max(d.max_surface_distance, dist);
        if (dist > drift_off) ++d.drift_off_warnings;
      }
      rec.offer(k + 1, -1, z);
    }
  });
  for (const auto& d : diag) e.meta.diagnostics.merge(d);
  return e;
}

/// 1-D Brownian motion X from x0 with Y = |X| and the occupation local time
/// L_t = (2 delta)^{-1} |{s <= t : |X_s| < delta}|, delta = sqrt(dt).
/// Coordinates are (x, y, local_time).
inline PathEnsemble simulate_tanaka(double x0, const SimConfig& cfg, int threads = 0) {
  cfg.validate("simulate_tanaka");
  if (cfg.scheme != Scheme::Tanaka)
    throw Error(ErrorKind::InvalidArgument, "sde", "simulate_tanaka", "scheme must be tanaka");
  PathEnsemble e = detail::allocate(cfg, 3, StateSpace::Ambient);
  e.coordinate_names = {"x", "y", "local_time"};
  e.meta.manifold = "euclidean";
  e.meta.start = {x0};
  const std::int64_t n_steps = cfg.n_steps();
  const double sq = std::sqrt(cfg.dt);
  const double delta = sq;
  const double weight = cfg.dt / (2.0 * delta);

  parallel_for(static_cast<std::size_t>(cfg.n_paths), threads, [&](std::size_t i) {
    const PathStream rng(cfg.master_seed, cfg.path_offset + i);
    detail::Recorder rec(e, static_cast<std::int64_t>(i), cfg.record_stride, n_steps);
    Vector s(3);
    s << x0, std::abs(x0), 0.0;
    double xi = 0.0;
    rec.offer(0, -1, s);
    for (std::int64_t k = 0; k < n_steps; ++k) {
      rng.normals(static_cast<std::uint32_t>(k), std::span<double>(&xi, 1));
      if (std::abs(s(0)) < delta) s(2) += weight;
      s(0) += sq * xi;
      s(1) = std::abs(s(0));
      rec.offer(k + 1, -1, s);
    }
  });
  return e;
}

/// Dispatches on cfg.scheme. Extrinsic schemes need an embedding.
inline PathEnsemble simulate(const ManifoldSpec& m, const EmbeddingMap* u, const ChartPoint& x0, const SimConfig& cfg,
                             int threads = 0) {
  switch (cfg.scheme) {
    case Scheme::ChartIto: return simulate_intrinsic_chart(m, x0, cfg, threads);
    case Scheme::FrameBundle: return simulate_intrinsic_frame(m, x0, std::nullopt, cfg, threads);
    case Scheme::ExtrinsicItoH:
    case Scheme::ExtrinsicStratonovichMidpoint:
      if (!u) throw Error(ErrorKind::InvalidArgument, "sde", "simulate", "extrinsic scheme needs an embedding");
      return simulate_extrinsic(*u, m, x0, cfg, threads);
    case Scheme::Tanaka:
      if (m.dim != 1) throw Error(ErrorKind::InvalidArgument, "sde", "simulate", "tanaka scheme is one-dimensional");
      return simulate_tanaka(x0.x(0), cfg, threads);
  }
  throw Error(ErrorKind::InvalidArgument, "sde", "simulate", "unknown scheme");
}

/// Image of a chart-state ensemble under u.
inline PathEnsemble push_forward(const PathEnsemble& in, const EmbeddingMap& u) {
  if (in.space != StateSpace::Chart || in.dim != u.dim)
    throw Error(ErrorKind::InvalidArgument, "sde", "push_forward", "needs a chart ensemble of the embedding's dimension");
  PathEnsemble out = in;
  out.dim = u.ambient_dim;
  out.space = StateSpace::Ambient;
  out.coordinate_names = detail::numbered("y", u.ambient_dim);
  out.meta.embedding = u.name;
  out.values.assign(static_cast<std::size_t>(in.n_paths * in.n_records() * u.ambient_dim), 0.0);
  out.charts.assign(in.charts.size(), -1);
  for (std::int64_t p = 0; p < in.n_paths; ++p)
    for (std::int64_t r = 0; r < in.n_records(); ++r) {
      const Vector z = u.eval(in.chart_point(p, r));
      const std::size_t off = out.offset(p, r) * static_cast<std::size_t>(out.dim);
      for (int a = 0; a < out.dim; ++a) out.values[off + static_cast<std::size_t>(a)] = z(a);
    }
  return out;
}

struct ExitTimeSamples {
  std::vector<double> times;
  std::vector<std::uint8_t> censored;
  double eps = 0.0;
  double horizon = 0.0;
  /// Set when eps reaches the injectivity-radius bound, where the exit
  /// event is no longer a coordinate-ball exit.
  bool beyond_injectivity = false;
  Diagnostics diagnostics;

  /// Fraction of paths with tau <= t, and its binomial standard error.
  [[nodiscard]] std::pair<double, double> probability_by(double t) const {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < times.size(); ++i)
      if (!censored[i] && times[i] <= t + 1e-12) ++hits;
    const double n = static_cast<double>(times.size());
    const double p = static_cast<double>(hits) / n;
    return {p, std::sqrt(p * (1.0 - p) / n)};
  }
};

/// First time d(X_t, x0) > eps along chart Ito paths, censored at the horizon.
inline ExitTimeSamples exit_time_samples(const ManifoldSpec& m, const ChartPoint& x0, double eps,
                                         const SimConfig& cfg, int threads = 0) {
  static constexpr const char* kOp = "exit_time_samples";
  cfg.validate(kOp);
  if (cfg.scheme != Scheme::ChartIto) throw Error(ErrorKind::InvalidArgument, "sde", kOp, "scheme must be chart_ito");
  if (!(eps > 0.0)) throw Error(ErrorKind::InvalidArgument, "sde", kOp, "eps must be positive");
  if (!m.distance)
    throw Error(ErrorKind::Unsupported, "sde", kOp, "manifold '" + m.name + "' has no reference distance");
  const ChartPoint start = detail::admissible_start(m, x0, kOp);
  ExitTimeSamples out;
  out.eps = eps;
  out.horizon = static_cast<double>(cfg.n_steps()) * cfg.dt;
  out.beyond_injectivity = eps >= m.injectivity_radius_lb;
  out.times.assign(static_cast<std::size_t>(cfg.n_paths), out.horizon);
  out.censored.assign(static_cast<std::size_t>(cfg.n_paths), 1);
  const std::int64_t n_steps = cfg.n_steps();
  std::vector<Diagnostics> diag(static_cast<std::size_t>(cfg.n_paths));

  parallel_for(static_cast<std::size_t>(cfg.n_paths), threads, [&](std::size_t i) {
    const PathStream rng(cfg.master_seed, cfg.path_offset + i);
    ChartPoint p = start;
    Vector xi(m.dim);
    for (std::int64_t k = 0; k < n_steps; ++k) {
      rng.normals(static_cast<std::uint32_t>(k), std::span<double>(xi.data(), static_cast<std::size_t>(m.dim)));
      if (!detail::chart_ito_step(m, p, xi, cfg.dt, cfg.drift_scale, diag[i].chart_switches))
        detail::step_failure(kOp, static_cast<std::int64_t>(i), static_cast<double>(k) * cfg.dt,
                             "step leaves every trust region");
      if (m.distance(p, start) > eps) {
        out.times[i] = static_cast<double>(k + 1) * cfg.dt;
        out.censored[i] = 0;
        return;
      }
    }
  });
  for (const auto& d : diag) out.diagnostics.merge(d);
  return out;
}

}  // namespace isobm
