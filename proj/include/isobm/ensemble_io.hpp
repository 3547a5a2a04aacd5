#pragma once

#include "isobm/sde.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>

namespace isobm {

using Json = nlohmann::ordered_json;

/// Shortest-exact decimal form at 17 significant digits.
inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const char* op) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw Error(ErrorKind::Io, "sde", op, "bad number '" + std::string(s) + "'");
  return v;
}

inline std::int64_t parse_int(std::string_view s, const char* op) {
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw Error(ErrorKind::Io, "sde", op, "bad integer '" + std::string(s) + "'");
  return v;
}

inline Json to_json(const SimConfig& c) {
  return Json{{"dt", c.dt},
              {"horizon", c.horizon},
              {"n_paths", c.n_paths},
              {"master_seed", c.master_seed},
              {"scheme", to_string(c.scheme)},
              {"retraction", c.retraction},
              {"record_stride", c.record_stride},
              {"reorthonormalize_every", c.reorthonormalize_every},
              {"frame_integrator", to_string(c.frame_integrator)},
              {"drift_scale", c.drift_scale},
              {"path_offset", c.path_offset}};
}

/// Reads SimConfig fields over `base`; unknown keys are a config error.
inline SimConfig sim_config_from_json(const Json& j, SimConfig base = {}) {
  static const std::set<std::string> known = {"dt", "horizon", "n_paths", "master_seed", "scheme",
                                              "retraction", "record_stride", "reorthonormalize_every",
                                              "frame_integrator", "drift_scale", "path_offset"};
  if (!j.is_object()) throw Error(ErrorKind::Config, "sde", "sim_config_from_json", "sim must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw Error(ErrorKind::Config, "sde", "sim_config_from_json", "unknown sim field '" + k + "'");
  try {
    if (j.contains("dt")) base.dt = j.at("dt").get<double>();
    if (j.contains("horizon")) base.horizon = j.at("horizon").get<double>();
    if (j.contains("n_paths")) base.n_paths = j.at("n_paths").get<std::int64_t>();
    if (j.contains("master_seed")) base.master_seed = j.at("master_seed").get<std::uint64_t>();
    if (j.contains("scheme")) base.scheme = scheme_from_string(j.at("scheme").get<std::string>());
    if (j.contains("retraction")) base.retraction = j.at("retraction").get<bool>();
    if (j.contains("record_stride")) base.record_stride = j.at("record_stride").get<int>();
    if (j.contains("reorthonormalize_every")) base.reorthonormalize_every = j.at("reorthonormalize_every").get<int>();
    if (j.contains("frame_integrator"))
      base.frame_integrator = frame_integrator_from_string(j.at("frame_integrator").get<std::string>());
    if (j.contains("drift_scale")) base.drift_scale = j.at("drift_scale").get<double>();
    if (j.contains("path_offset")) base.path_offset = j.at("path_offset").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, "sde", "sim_config_from_json", e.what());
  }
  return base;
}

inline Json to_json(const Diagnostics& d) {
  return Json{{"max_frame_defect", d.max_frame_defect},
              {"stability_warnings", d.stability_warnings},
              {"drift_off_warnings", d.drift_off_warnings},
              {"max_surface_distance", d.max_surface_distance},
              {"chart_switches", d.chart_switches}};
}

inline Diagnostics diagnostics_from_json(const Json& j) {
  Diagnostics d;
  d.max_frame_defect = j.at("max_frame_defect").get<double>();
  d.stability_warnings = j.at("stability_warnings").get<std::int64_t>();
  d.drift_off_warnings = j.at("drift_off_warnings").get<std::int64_t>();
  d.max_surface_distance = j.at("max_surface_distance").get<double>();
  d.chart_switches = j.at("chart_switches").get<std::int64_t>();
  return d;
}

/// Sidecar describing everything in an ensemble except the states.
inline Json sidecar_json(const PathEnsemble& e) {
  return Json{{"format", "isobm-path-ensemble"},
              {"version", 1},
              {"n_paths", e.n_paths},
              {"n_records", e.n_records()},
              {"dim", e.dim},
              {"state_space", e.space == StateSpace::Chart ? "chart" : "ambient"},
              {"coordinate_names", e.coordinate_names},
              {"seeds",
               {{"master_seed", e.seeds.master_seed},
                {"path_offset", e.seeds.path_offset},
                {"generator", e.seeds.generator}}},
              {"meta",
               {{"scheme", e.meta.scheme},
                {"manifold", e.meta.manifold},
                {"embedding", e.meta.embedding},
                {"start_chart", e.meta.start_chart},
                {"start", e.meta.start},
                {"config", to_json(e.meta.config)},
                {"diagnostics", to_json(e.meta.diagnostics)}}}};
}

/// Columnar CSV: time, path_id, chart_id, coordinates.
inline void write_ensemble_csv(const PathEnsemble& e, std::ostream& os) {
  os << "time,path_id,chart_id";
  for (const auto& n : e.coordinate_names) os << ',' << n;
  os << '\n';
  std::string line;
  for (std::int64_t p = 0; p < e.n_paths; ++p)
    for (std::int64_t r = 0; r < e.n_records(); ++r) {
      line = format_double(e.times[static_cast<std::size_t>(r)]);
      line += ',';
      line += std::to_string(p);
      line += ',';
      line += std::to_string(e.chart(p, r));
      for (int i = 0; i < e.dim; ++i) {
        line += ',';
        line += format_double(e.at(p, r, i));
      }
      line += '\n';
      os << line;
    }
}

inline void write_ensemble(const PathEnsemble& e, const std::filesystem::path& csv_path,
                           const std::filesystem::path& sidecar_path) {
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw Error(ErrorKind::Io, "sde", "write_ensemble", "cannot open " + csv_path.string());
  write_ensemble_csv(e, csv);
  std::ofstream side(sidecar_path, std::ios::binary);
  if (!side) throw Error(ErrorKind::Io, "sde", "write_ensemble", "cannot open " + sidecar_path.string());
  side << sidecar_json(e).dump(2) << '\n';
  if (!csv || !side) throw Error(ErrorKind::Io, "sde", "write_ensemble", "write failed");
}

inline PathEnsemble read_ensemble(std::istream& csv, const Json& side) {
  static constexpr const char* kOp = "read_ensemble";
  PathEnsemble e;
  try {
    if (side.at("format") != "isobm-path-ensemble") throw Error(ErrorKind::Io, "sde", kOp, "not an ensemble sidecar");
    e.n_paths = side.at("n_paths").get<std::int64_t>();
    const auto n_records = side.at("n_records").get<std::int64_t>();
    e.dim = side.at("dim").get<int>();
    e.space = side.at("state_space") == "chart" ? StateSpace::Chart : StateSpace::Ambient;
    e.coordinate_names = side.at("coordinate_names").get<std::vector<std::string>>();
    const Json& s = side.at("seeds");
    e.seeds = {s.at("master_seed").get<std::uint64_t>(), s.at("path_offset").get<std::uint64_t>(),
               s.at("generator").get<std::string>()};
    const Json& m = side.at("meta");
    e.meta.scheme = m.at("scheme").get<std::string>();
    e.meta.manifold = m.at("manifold").get<std::string>();
    e.meta.embedding = m.at("embedding").get<std::string>();
    e.meta.start_chart = m.at("start_chart").get<int>();
    e.meta.start = m.at("start").get<std::vector<double>>();
    e.meta.config = sim_config_from_json(m.at("config"));
    e.meta.diagnostics = diagnostics_from_json(m.at("diagnostics"));

    const auto states = static_cast<std::size_t>(e.n_paths * n_records);
    e.values.resize(states * static_cast<std::size_t>(e.dim));
    e.charts.resize(states);
    e.times.resize(static_cast<std::size_t>(n_records));
    std::string line;
    std::getline(csv, line);
    std::size_t row = 0;
    std::vector<std::string_view> fields;
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      if (row >= states) throw Error(ErrorKind::Io, "sde", kOp, "too many rows");
      fields.clear();
      std::string_view rest(line);
      for (;;) {
        const auto comma = rest.find(',');
        fields.push_back(rest.substr(0, comma));
        if (comma == std::string_view::npos) break;
        rest.remove_prefix(comma + 1);
      }
      if (fields.size() != static_cast<std::size_t>(3 + e.dim)) throw Error(ErrorKind::Io, "sde", kOp, "bad row width");
      const auto p = static_cast<std::int64_t>(row) / n_records;
      const auto r = static_cast<std::int64_t>(row) % n_records;
      if (parse_int(fields[1], kOp) != p)
        throw Error(ErrorKind::Io, "sde", kOp, "rows out of order");
      const double t = parse_double(fields[0], kOp);
      if (p == 0) e.times[static_cast<std::size_t>(r)] = t;
      e.charts[row] = static_cast<int>(parse_int(fields[2], kOp));
      for (int i = 0; i < e.dim; ++i)
        e.values[row * static_cast<std::size_t>(e.dim) + static_cast<std::size_t>(i)] =
            parse_double(fields[static_cast<std::size_t>(3 + i)], kOp);
      ++row;
    }
    if (row != states) throw Error(ErrorKind::Io, "sde", kOp, "too few rows");
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Io, "sde", kOp, ex.what());
  }
  return e;
}

inline PathEnsemble read_ensemble(const std::filesystem::path& csv_path, const std::filesystem::path& sidecar_path) {
  std::ifstream csv(csv_path, std::ios::binary);
  std::ifstream side(sidecar_path, std::ios::binary);
  if (!csv || !side) throw Error(ErrorKind::Io, "sde", "read_ensemble", "cannot open ensemble files");
  Json j;
  try {
    j = Json::parse(side);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Io, "sde", "read_ensemble", ex.what());
  }
  return read_ensemble(csv, j);
}

}  // namespace isobm
