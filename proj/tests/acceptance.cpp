// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; exit status is non-zero if any check fails.

#include "isobm/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

namespace {

using namespace isobm;
namespace ex = isobm::experiment;
namespace fs = std::filesystem;

constexpr double kPi = std::numbers::pi;
const fs::path kSource = ISOBM_SOURCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

Json load(const fs::path& p) {
  std::ifstream in(p);
  return Json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("isobm-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

/// Runs a config through the experiment pipeline into a scratch directory.
std::pair<int, Json> run_config(const Json& config, const std::string& name, int threads = 0) {
  std::ostringstream log;
  ex::Overrides ov;
  ov.output_dir = (scratch() / name).string();
  const int code = ex::execute(config, ov, config["experiment"].get<std::string>(), threads, log);
  const fs::path result = scratch() / name / "result.json";
  return {code, fs::exists(result) ? load(result) : Json::object()};
}

std::pair<int, Json> run_shipped(const std::string& file, int threads = 0) {
  return run_config(load(kSource / "configs" / (file + ".json")), file, threads);
}

SimConfig sim(double dt, double T, std::int64_t n, std::uint64_t seed, int stride) {
  SimConfig c;
  c.dt = dt;
  c.horizon = T;
  c.n_paths = n;
  c.master_seed = seed;
  c.record_stride = stride;
  return c;
}

Vector vec(std::initializer_list<double> xs) { return embeddings::detail::vec(xs); }

std::string worst_statistic(const LawComparisonReport& r) {
  const ObservableStatistic* w = nullptr;
  for (const auto& s : r.statistics)
    if (!w || s.p_value < w->p_value) w = &s;
  return w ? fmt("min p %.4g (%s) x %d tests", w->p_value, w->name.c_str(), r.correction) : std::string("no tests");
}

// --- criteria ---------------------------------------------------------------------

Outcome law_equivalence() {
  const auto [code, r] = run_shipped("clifford-compare");
  return {code == ex::kAccept && r.value("decision", "") == "accept",
          fmt("Clifford torus, 8 starts, n=1e4, dt=1e-4: %s, min p %.4g x %d tests", r.value("decision", "?").c_str(),
              r.value("min_p_value", -1.0), r.value("correction", 0))};
}

Outcome law_falsification() {
  const auto [code, r] = run_shipped("round-torus-converse");
  return {code == ex::kReject && r.value("decision", "") == "reject",
          fmt("round torus vs flat metric: %s, min p %.3g", r.value("decision", "?").c_str(), r.value("min_p_value", -1.0))};
}

Outcome varadhan() {
  VaradhanOptions opt;
  opt.n_paths = 1000000;
  opt.seed = 11;
  const std::vector<double> times{0.08, 0.04, 0.02};
  const auto m = manifolds::euclidean(2);
  const auto flat = varadhan_distance(m, {0, vec({0, 0})}, {0, vec({1, 0})}, times, opt);
  const auto diag = varadhan_distance(m, {0, vec({0.3, 0.1})}, {0, vec({0.3, 0.1})}, times, opt);
  const auto [code, sphere] = run_shipped("sphere-varadhan");
  const double flat_err = std::abs(flat.d2.value - 1.0);
  const double sphere_err = sphere.value("relative_error", 1.0);
  return {code == ex::kAccept && flat_err < 0.05 && std::abs(diag.d2.value) <= 0.02 && sphere_err < 0.10,
          fmt("flat d2 %.5f (rel %.2g), diagonal %.2g, sphere d2 %.5f vs %.5f (rel %.3g)", flat.d2.value, flat_err,
              diag.d2.value, sphere["d2"].value("value", -1.0), kPi * kPi / 16.0, sphere_err)};
}

Outcome mean_curvature() {
  double worst = 0.0;
  for (double r : {1.0, 2.5}) {
    const auto u = embeddings::sphere_r3(r);
    for (const auto& p : quasi_uniform_points(manifolds::sphere(r), 64))
      worst = std::max(worst, std::abs(shape_data(u, p).mean_curvature.norm() - 2.0 / r) / (2.0 / r));
  }
  const auto m = manifolds::sphere(1.0);
  const auto u = embeddings::sphere_r3(1.0);
  auto cfg = sim(1e-4, 0.5, 10000, 21, 50);
  cfg.scheme = Scheme::ExtrinsicItoH;
  const auto ito = simulate_extrinsic(u, m, {0, vec({0.5, 0.2})}, cfg, 0);
  cfg.scheme = Scheme::ExtrinsicStratonovichMidpoint;
  cfg.path_offset = static_cast<std::uint64_t>(cfg.n_paths);
  const auto strat = simulate_extrinsic(u, m, {0, vec({0.5, 0.2})}, cfg, 0);
  const auto rep = compare_laws(ito, strat, 0.01);
  return {worst < 1e-6 && !rep.reject,
          fmt("max rel |H| error %.2g; Ito-H vs Stratonovich: %s, %s", worst, rep.reject ? "reject" : "accept",
              worst_statistic(rep).c_str())};
}

Outcome martingale() {
  struct Case {
    const char* label;
    ManifoldSpec m;
    ChartPoint x;
  };
  const std::vector<Case> cases{
      {"euclidean", manifolds::euclidean(2), {0, vec({0.3, -0.2})}},
      {"circle", manifolds::circle(1.0), {0, vec({1.0})}},
      {"sphere", manifolds::sphere(1.0), {0, vec({0.5, 0.2})}},
      {"flat-torus", manifolds::flat_torus(2 * kPi, 2 * kPi), {0, vec({0.4, 1.1})}},
  };
  double max_z = 0.0;
  std::string where;
  std::uint64_t seed = 31;
  for (const auto& c : cases) {
    const auto e = simulate_intrinsic_chart(c.m, c.x, sim(1e-3, 0.5, 20000, seed++, 10), 0);
    for (const auto& tf : test_battery(c.m)) {
      const auto d = martingale_defect(e, tf, 0.0, 0.5);
      const double z = std::abs(d.value) / d.std_error;
      if (z > max_z) {
        max_z = z;
        where = std::string(c.label) + " " + tf.name;
      }
    }
  }
  const auto polar = manifolds::sphere_polar(1.0);
  auto cfg = sim(1e-3, 0.5, 20000, seed, 10);
  cfg.drift_scale = 0.0;
  const auto e = simulate_intrinsic_chart(polar, {0, vec({1.0, 0.5})}, cfg, 0);
  const auto d = martingale_defect(e, test_battery(polar).front(), 0.0, 0.5);
  const double control_z = std::abs(d.value) / d.std_error;
  return {max_z <= 3.0 && control_z > 5.0,
          fmt("battery max |z| %.2f (%s); zeroed-drift control |z| %.1f", max_z, where.c_str(), control_z)};
}

Outcome quadratic_variation() {
  double max_z = 0.0;
  std::string where;
  std::uint64_t seed = 41;
  for (const auto& [m, x] : {std::pair{manifolds::circle(1.0), ChartPoint{0, vec({0.4})}},
                           std::pair{manifolds::sphere(1.0), ChartPoint{0, vec({0.5, 0.2})}}}) {
    const auto e = simulate_intrinsic_chart(m, x, sim(1e-3, 0.5, 5000, seed++, 1), 0);
    for (const auto& tf : test_battery(m)) {
      const auto q = quadratic_variation_check(e, tf.f, m);
      const double z = std::abs(q.value) / q.std_error;
      if (z > max_z) {
        max_z = z;
        where = m.name + " " + tf.name;
      }
    }
  }
  return {max_z <= 3.0, fmt("max |z| %.2f (%s)", max_z, where.c_str())};
}

Outcome commutator() {
  bool ok = true;
  std::string detail;
  for (double alpha : {0.5, 0.7, 0.9}) {
    const auto rows = commutator_sweep(holder_cusp_grid(alpha, 16), dyadic_scales(4, 9));
    const double slope = rows.back().slope_so_far;
    ok = ok && std::abs(slope - 2.0 * alpha) <= 0.15;
    const auto w = commutator_sweep(weierstrass_grid(alpha, 16), dyadic_scales(4, 9));
    detail += fmt("a=%.1f cusp %.3f (Weierstrass %.3f); ", alpha, slope, w.back().slope_so_far);
  }
  detail.resize(detail.size() - 2);
  return {ok, detail};
}

Outcome pullback_sweep() {
  const auto [code, r] = run_shipped("clifford-mollify-sweep");
  const auto plateau = pullback_convergence_sweep(embeddings::round_torus_r3(2, 1), manifolds::flat_torus(2 * kPi, 2 * kPi),
                                                  dyadic_scales(2, 6), {16, 16, 0});
  double lowest = plateau.rows.empty() ? 0.0 : plateau.rows.front().defect_c0;
  for (const auto& row : plateau.rows) lowest = std::min(lowest, row.defect_c0);
  const double slope = r.value("slope", 0.0);
  const bool monotone = r.value("monotone", false);
  const bool plateaus = plateau.residual > 0.0 && lowest > 0.95 * plateau.residual && std::abs(plateau.slope) < 0.05;
  return {code == ex::kAccept && monotone && slope >= 1.0 && plateaus,
          fmt("Clifford slope %.3f, monotone %s; round torus defect floor %.4f vs residual %.4f (slope %.3f)", slope,
              monotone ? "yes" : "no", lowest, plateau.residual, plateau.slope)};
}

Outcome tanaka() {
  const auto [code, r] = run_shipped("tanaka");
  const auto& lt = r.value("local_time", Json::object());
  const double z = lt.value("z", 99.0);
  const double p = r.value("ks_abs_normal", Json::object()).value("p_value", 0.0);
  return {code == ex::kAccept && std::abs(z) <= 3.0 && p > 0.01,
          fmt("E[L_1] %.5f +- %.5f vs %.5f (z %.2f); KS vs |N(0,1)| p %.3g", lt.value("mean", 0.0),
              lt.value("std_error", 0.0), std::sqrt(2.0 / kPi), z, p)};
}

Outcome exit_times() {
  const auto [code, r] = run_shipped("sphere-exit-times");
  std::string ratios;
  for (const auto& row : r.value("rows", Json::array())) ratios += fmt("%.3g ", row.value("ratio", 0.0));
  const double bound = r.value("bound_constant", INFINITY);
  const bool mono = r.value("ratio_non_increasing_as_t_decreases", false);
  return {code == ex::kAccept && std::isfinite(bound) && mono,
          fmt("P(tau<=t)/t over t=.01..0.08: %sbound %.3g, non-increasing as t->0: %s", ratios.c_str(), bound,
              mono ? "yes" : "no")};
}

Outcome frame_bundle() {
  const auto m = manifolds::sphere(1.0);
  const auto u = embeddings::sphere_r3(1.0);
  auto cfg = sim(1e-4, 0.5, 10000, 51, 50);
  cfg.scheme = Scheme::FrameBundle;
  const auto frame = simulate_intrinsic_frame(m, {0, vec({0.5, 0.2})}, std::nullopt, cfg, 0);
  cfg.scheme = Scheme::ChartIto;
  cfg.path_offset = static_cast<std::uint64_t>(cfg.n_paths);
  const auto chart = simulate_intrinsic_chart(m, {0, vec({0.5, 0.2})}, cfg, 0);
  const double defect = frame.meta.diagnostics.max_frame_defect;
  const auto rep = compare_laws(push_forward(chart, u), push_forward(frame, u), 0.01);
  return {defect < 1e-4 && !rep.reject,
          fmt("max frame defect %.3g; chart vs frame on u(X): %s, %s", defect, rep.reject ? "reject" : "accept",
              worst_statistic(rep).c_str())};
}

Outcome reproducibility() {
  const std::vector<Json> configs{
      Json{{"experiment", "simulate"},
           {"manifold", {{"name", "sphere"}}},
           {"embedding", {{"name", "sphere-R3"}}},
           {"sim", {{"dt", 1e-3}, {"horizon", 0.5}, {"n_paths", 2000}, {"master_seed", 61}, {"record_stride", 25},
                    {"scheme", "frame_bundle"}}}},
      Json{{"experiment", "compare-laws"},
           {"manifold", {{"name", "flat-torus"}}},
           {"embedding", {{"name", "clifford-torus-R4"}}},
           {"sim", {{"dt", 1e-3}, {"horizon", 0.3}, {"n_paths", 2000}, {"master_seed", 62}, {"record_stride", 30}}},
           {"compare", {{"starts", 2}}}},
      Json{{"experiment", "varadhan"},
           {"manifold", {{"name", "sphere"}}},
           {"sim", {{"n_paths", 20000}, {"master_seed", 63}}},
           {"varadhan", {{"x", {{"chart", 0}, {"x", {0.0, 0.0}}}}, {"y", {{"chart", 0}, {"x", {0.3, 0.1}}}}}}}};
  std::size_t files = 0;
  for (std::size_t k = 0; k < configs.size(); ++k) {
    const std::string base = "repro-" + std::to_string(k);
    (void)run_config(configs[k], base + "-seed", 1);
    const Json manifest = load(scratch() / (base + "-seed") / "manifest.json");
    std::map<std::string, std::string> reference;
    for (int threads : {1, 2, 8}) {
      const std::string name = base + "-t" + std::to_string(threads);
      const auto [code, r] = run_config(manifest, name, threads);
      if (code == ex::kConfigError || code == ex::kRuntimeError)
        return {false, fmt("%s failed with exit %d", configs[k]["experiment"].get<std::string>().c_str(), code)};
      for (const auto& e : fs::directory_iterator(scratch() / (base + "-seed"))) {
        const std::string f = e.path().filename().string();
        if (f == "manifest.json") continue;
        const std::string body = slurp(scratch() / name / f);
        if (body != slurp(e.path()))
          return {false, fmt("%s differs at %d threads", f.c_str(), threads)};
        ++files;
      }
    }
  }
  return {true, fmt("%zu output files bit-identical across manifest reruns at 1, 2, 8 threads", files)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"isometric embedding: intrinsic and extrinsic laws agree", law_equivalence},
      {"non-isometric embedding: laws differ", law_falsification},
      {"Varadhan distance recovery", varadhan},
      {"mean curvature and Ito/Stratonovich extrinsic schemes", mean_curvature},
      {"martingale problem battery and negative control", martingale},
      {"quadratic variation contract", quadratic_variation},
      {"commutator slope 2 alpha", commutator},
      {"pullback defect sweep", pullback_sweep},
      {"Tanaka local time", tanaka},
      {"exit-time ratio bound", exit_times},
      {"frame-bundle invariant and chart/frame agreement", frame_bundle},
      {"thread-count reproducibility", reproducibility},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s [%2d] %s: %s (%.0f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  fs::remove_all(scratch());
  return failed == 0 ? 0 : 1;
}
