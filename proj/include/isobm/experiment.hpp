#pragma once

#include "isobm/embeddings.hpp"
#include "isobm/ensemble_io.hpp"
#include "isobm/estimators.hpp"
#include "isobm/manifolds.hpp"
#include "isobm/mollify.hpp"
#include "isobm/sde.hpp"
#include "isobm/stats.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace isobm::experiment {

inline constexpr const char* kArtifact = "isobm";
inline constexpr const char* kVersion = "0.1.0";

/// Exit codes of a run.
enum ExitCode : int { kAccept = 0, kConfigError = 1, kRuntimeError = 2, kReject = 3 };

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"simulate",      "compare-laws", "varadhan",   "metric-recover",
                                                 "mollify-sweep", "commutator",   "tanaka",     "exit-times",
                                                 "martingale-check", "qv-check"};
  return names;
}

// --- schema ----------------------------------------------------------------------------

/// JSON Schema (2020-12 subset) for experiment configs.
inline const Json& config_schema() {
  static const Json schema = Json::parse(R"JSON({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "isobm experiment config",
  "type": "object",
  "additionalProperties": false,
  "required": ["experiment"],
  "properties": {
    "experiment": {"enum": ["simulate", "compare-laws", "varadhan", "metric-recover", "mollify-sweep",
                            "commutator", "tanaka", "exit-times", "martingale-check", "qv-check"]},
    "manifold": {"$ref": "#/$defs/builtin"},
    "embedding": {"$ref": "#/$defs/builtin"},
    "sim": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "n_paths": {"type": "integer", "minimum": 1},
        "master_seed": {"type": "integer", "minimum": 0},
        "scheme": {"enum": ["chart_ito", "frame_bundle", "extrinsic_ito_H", "extrinsic_stratonovich_midpoint", "tanaka"]},
        "retraction": {"type": "boolean"},
        "record_stride": {"type": "integer", "minimum": 1},
        "reorthonormalize_every": {"type": "integer", "minimum": 1},
        "frame_integrator": {"enum": ["heun", "rk4"]},
        "drift_scale": {"type": "number"},
        "path_offset": {"type": "integer", "minimum": 0}
      }
    },
    "output_dir": {"type": "string"},
    "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "start": {"$ref": "#/$defs/point"},
    "compare": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "a": {"$ref": "#/$defs/side"},
        "b": {"$ref": "#/$defs/side"},
        "starts": {"type": "integer", "minimum": 1}
      }
    },
    "varadhan": {"$ref": "#/$defs/varadhan"},
    "metric_recover": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "x": {"$ref": "#/$defs/point"},
        "h": {"type": "number", "exclusiveMinimum": 0},
        "oracle": {"enum": ["reference", "varadhan"]}
      }
    },
    "mollify_sweep": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "eps_from": {"type": "integer", "minimum": 0},
        "eps_to": {"type": "integer", "minimum": 0},
        "grid": {"type": "integer", "minimum": 2},
        "quadrature": {"type": "integer", "minimum": 2}
      }
    },
    "commutator": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "family": {"enum": ["cusp", "weierstrass"]},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "log2_size": {"type": "integer", "minimum": 12, "maximum": 24},
        "eps_from": {"type": "integer", "minimum": 0},
        "eps_to": {"type": "integer", "minimum": 0}
      }
    },
    "tanaka": {
      "type": "object",
      "additionalProperties": false,
      "properties": {"x0": {"type": "number"}}
    },
    "exit_times": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "t_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}}
      }
    },
    "martingale": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "s": {"type": "number", "minimum": 0},
        "t": {"type": "number", "exclusiveMinimum": 0}
      }
    }
  },
  "allOf": [
    {"if": {"properties": {"experiment": {"enum": ["commutator", "tanaka"]}}},
     "else": {"required": ["manifold"]}},
    {"if": {"properties": {"experiment": {"enum": ["compare-laws", "mollify-sweep"]}}},
     "then": {"required": ["embedding"]}},
    {"if": {"properties": {"experiment": {"const": "varadhan"}}},
     "then": {"required": ["varadhan"], "properties": {"varadhan": {"required": ["y"]}}}}
  ],
  "$defs": {
    "builtin": {
      "type": "object",
      "additionalProperties": false,
      "required": ["name"],
      "properties": {
        "name": {"type": "string"},
        "params": {"type": "object", "additionalProperties": {"type": "number"}}
      }
    },
    "point": {
      "type": "object",
      "additionalProperties": false,
      "required": ["x"],
      "properties": {
        "chart": {"type": "integer", "minimum": 0},
        "x": {"type": "array", "minItems": 1, "items": {"type": "number"}}
      }
    },
    "side": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "scheme": {"enum": ["chart_ito", "frame_bundle", "extrinsic_ito_H", "extrinsic_stratonovich_midpoint"]},
        "manifold": {"$ref": "#/$defs/builtin"}
      }
    },
    "varadhan": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "x": {"$ref": "#/$defs/point"},
        "y": {"$ref": "#/$defs/point"},
        "t_list": {"type": "array", "minItems": 3, "items": {"type": "number", "exclusiveMinimum": 0}},
        "method": {"enum": ["guided_bridge", "ensemble_kde"]},
        "n_steps": {"type": "integer", "minimum": 2},
        "bandwidth_c": {"type": "number", "exclusiveMinimum": 0},
        "log_coefficient": {"type": "number"}
      }
    }
  }
})JSON");
  return schema;
}

namespace detail {

inline std::string json_type(const Json& v) {
  if (v.is_object()) return "object";
  if (v.is_array()) return "array";
  if (v.is_string()) return "string";
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
  if (v.is_number()) return "number";
  return "null";
}

inline bool has_type(const Json& v, const std::string& type) {
  const std::string t = json_type(v);
  return t == type || (type == "number" && t == "integer") ||
         (type == "integer" && v.is_number_float() && std::floor(v.get<double>()) == v.get<double>() &&
          std::isfinite(v.get<double>()));
}

inline const Json& resolve_ref(const Json& root, const std::string& ref) {
  if (ref.rfind("#/$defs/", 0) != 0)
    throw Error(ErrorKind::Config, "cli", "validate", "unsupported schema reference " + ref);
  return root.at("$defs").at(ref.substr(8));
}

inline void validate(const Json& schema, const Json& v, const Json& root, const std::string& path,
                     std::vector<std::string>& errors) {
  if (schema.contains("$ref")) return validate(resolve_ref(root, schema["$ref"]), v, root, path, errors);
  const std::string where = path.empty() ? "/" : path;
  if (schema.contains("type") && !has_type(v, schema["type"])) {
    errors.push_back(where + ": expected " + schema["type"].get<std::string>() + ", got " + json_type(v));
    return;
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == v;
    if (!found) errors.push_back(where + ": value " + v.dump() + " not in " + schema["enum"].dump());
  }
  if (schema.contains("const") && schema["const"] != v)
    errors.push_back(where + ": expected " + schema["const"].dump());
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema["minimum"].get<double>())
      errors.push_back(where + ": must be >= " + schema["minimum"].dump());
    if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>())
      errors.push_back(where + ": must be > " + schema["exclusiveMinimum"].dump());
    if (schema.contains("maximum") && x > schema["maximum"].get<double>())
      errors.push_back(where + ": must be <= " + schema["maximum"].dump());
    if (schema.contains("exclusiveMaximum") && x >= schema["exclusiveMaximum"].get<double>())
      errors.push_back(where + ": must be < " + schema["exclusiveMaximum"].dump());
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>())
      errors.push_back(where + ": needs at least " + schema["minItems"].dump() + " items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) validate(schema["items"], v[i], root, path + "/" + std::to_string(i), errors);
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& r : schema["required"])
        if (!v.contains(r.get<std::string>())) errors.push_back(where + ": missing required '" + r.get<std::string>() + "'");
    const Json props = schema.value("properties", Json::object());
    for (const auto& [k, item] : v.items()) {
      if (props.contains(k)) {
        validate(props[k], item, root, path + "/" + k, errors);
      } else if (schema.contains("additionalProperties")) {
        const Json& ap = schema["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) errors.push_back(where + ": unknown field '" + k + "'");
        else if (ap.is_object()) validate(ap, item, root, path + "/" + k, errors);
      }
    }
  }
  if (schema.contains("allOf"))
    for (const auto& s : schema["allOf"]) validate(s, v, root, path, errors);
  if (schema.contains("if")) {
    std::vector<std::string> probe;
    validate(schema["if"], v, root, path, probe);
    if (probe.empty() && schema.contains("then")) validate(schema["then"], v, root, path, errors);
    if (!probe.empty() && schema.contains("else")) validate(schema["else"], v, root, path, errors);
  }
}

}  // namespace detail

/// Schema violations of `config`, one message per violation.
inline std::vector<std::string> schema_errors(const Json& config) {
  std::vector<std::string> errors;
  detail::validate(config_schema(), config, config_schema(), "", errors);
  return errors;
}

// --- catalog ---------------------------------------------------------------------------

inline Json to_json(const BuiltinInfo& b) {
  Json params = Json::array();
  for (const auto& p : b.params)
    params.push_back(Json{{"name", p.name},
                          {"default", p.default_value},
                          {"description", p.description},
                          {"type", p.integer ? "integer" : "number"},
                          {p.lower_inclusive ? "minimum" : "exclusiveMinimum", p.lower_bound}});
  return Json{{"name", b.name}, {"description", b.description}, {"params", params}};
}

/// Machine-readable catalog of builtin manifolds, embeddings and experiments.
inline Json list_builtins() {
  Json m = Json::array(), e = Json::array();
  for (const auto& b : manifold_catalog()) m.push_back(to_json(b));
  for (const auto& b : embedding_catalog()) e.push_back(to_json(b));
  return Json{{"artifact", kArtifact}, {"version", kVersion}, {"manifolds", m}, {"embeddings", e},
              {"experiments", experiment_names()}};
}

// --- resolved config -------------------------------------------------------------------

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
};

/// A validated config with every default filled in.
struct ExperimentConfig {
  std::string experiment;
  Json resolved;
  SimConfig sim;
  std::filesystem::path output_dir;
  double level = 0.01;
  std::optional<ManifoldSpec> manifold;
  std::optional<EmbeddingMap> embedding;

  [[nodiscard]] const Json& block(const char* name) const { return resolved.at(name); }
};

namespace detail {

[[noreturn]] inline void config_error(const std::string& msg) { throw Error(ErrorKind::Config, "cli", "resolve", msg); }

inline Params params_of(const Json& builtin) {
  Params p;
  if (builtin.contains("params"))
    for (const auto& [k, v] : builtin["params"].items()) p[k] = v.get<double>();
  return p;
}

inline Json resolved_builtin(const std::string& name, const Params& p) {
  Json params = Json::object();
  for (const auto& [k, v] : p) params[k] = v;
  return Json{{"name", name}, {"params", params}};
}

inline ManifoldSpec instantiate_manifold(const Json& builtin, Json& resolved) {
  const auto name = builtin.at("name").get<std::string>();
  const Params p = resolve_params(find_builtin(manifold_catalog(), name, "manifold"), params_of(builtin));
  resolved = resolved_builtin(name, p);
  return make_manifold(name, p);
}

inline EmbeddingMap instantiate_embedding(const Json& builtin, Json& resolved) {
  const auto name = builtin.at("name").get<std::string>();
  const Params p = resolve_params(find_builtin(embedding_catalog(), name, "embedding"), params_of(builtin));
  resolved = resolved_builtin(name, p);
  return make_embedding(name, p);
}

inline Json with_defaults(Json defaults, const Json& given) {
  if (given.is_object()) defaults.update(given);
  return defaults;
}

inline Json point_json(const ChartPoint& p) {
  return Json{{"chart", p.chart}, {"x", std::vector<double>(p.x.data(), p.x.data() + p.x.size())}};
}

inline ChartPoint point_from(const Json& j) {
  const auto xs = j.at("x").get<std::vector<double>>();
  ChartPoint p{j.value("chart", 0), Vector(static_cast<Eigen::Index>(xs.size()))};
  for (std::size_t i = 0; i < xs.size(); ++i) p.x(static_cast<Eigen::Index>(i)) = xs[i];
  return p;
}

/// Checks a point against the atlas: chart exists, dimension matches, trusted.
inline Json checked_point(const ManifoldSpec& m, const Json& j, const std::string& what) {
  const ChartPoint p = point_from(j);
  const Chart* chart = nullptr;
  for (const auto& c : m.charts)
    if (c.id == p.chart) chart = &c;
  if (!chart) config_error(what + ": manifold '" + m.name + "' has no chart " + std::to_string(p.chart));
  if (p.x.size() != m.dim) config_error(what + ": expected " + std::to_string(m.dim) + " coordinates");
  if (!chart->in_trust_region(p.x)) config_error(what + ": point outside the chart's trust region");
  return point_json(p);
}

}  // namespace detail

/// Validates `raw` against the schema, applies overrides and fills defaults.
/// Every failure is a Config error.
inline ExperimentConfig resolve_config(Json raw, const Overrides& ov = {}, const std::string& subcommand = "") {
  using namespace detail;
  if (!raw.is_object()) config_error("config must be a JSON object");
  // A manifest can be fed back as a config.
  if (raw.contains("artifact") && raw.contains("config")) raw = raw["config"];
  if (!subcommand.empty()) {
    if (raw.contains("experiment") && raw["experiment"] != subcommand)
      config_error("config experiment '" + raw["experiment"].get<std::string>() + "' does not match subcommand '" +
                   subcommand + "'");
    raw["experiment"] = subcommand;
  }
  if (const auto errs = schema_errors(raw); !errs.empty()) {
    std::string msg = "schema violation";
    for (const auto& e : errs) msg += "; " + e;
    config_error(msg);
  }

  ExperimentConfig c;
  c.experiment = raw["experiment"].get<std::string>();
  const auto& ex = c.experiment;
  Json out = Json::object();
  out["experiment"] = ex;

  try {
    if (raw.contains("manifold")) {
      Json r;
      c.manifold = instantiate_manifold(raw["manifold"], r);
      out["manifold"] = r;
    }
    if (raw.contains("embedding")) {
      Json r;
      c.embedding = instantiate_embedding(raw["embedding"], r);
      out["embedding"] = r;
      if (c.manifold && ex != "compare-laws") check_domain(*c.embedding, *c.manifold);
    }

    Json sim_given = raw.value("sim", Json::object());
    if (ex == "tanaka") {
      if (sim_given.contains("scheme") && sim_given["scheme"] != "tanaka") config_error("tanaka needs sim.scheme = tanaka");
      sim_given["scheme"] = "tanaka";
    }
    if (ov.seed) sim_given["master_seed"] = *ov.seed;
    c.sim = sim_config_from_json(sim_given);
    try {
      c.sim.validate("resolve");
    } catch (const Error& e) {
      config_error(e.what());
    }
    out["sim"] = to_json(c.sim);
    c.output_dir = ov.output_dir ? *ov.output_dir : raw.value("output_dir", std::string("isobm-out"));
    out["output_dir"] = c.output_dir.generic_string();
    c.level = raw.value("level", 0.01);
    out["level"] = c.level;

    const bool intrinsic = c.sim.scheme == Scheme::ChartIto || c.sim.scheme == Scheme::FrameBundle;
    if (c.manifold) {
      const ManifoldSpec& m = *c.manifold;
      const Json start = raw.contains("start") ? checked_point(m, raw["start"], "start")
                                               : point_json(quasi_uniform_points(m, 1).front());
      out["start"] = start;
      if (ex == "simulate" && is_extrinsic(c.sim.scheme) && !c.embedding)
        config_error("extrinsic schemes need an embedding");
      if ((ex == "simulate" || ex == "martingale-check" || ex == "qv-check" || ex == "exit-times") &&
          c.sim.scheme == Scheme::Tanaka)
        config_error("scheme tanaka belongs to the tanaka experiment");
      if ((ex == "martingale-check" || ex == "qv-check" || ex == "exit-times") && !intrinsic)
        config_error(ex + " simulates intrinsically; use scheme chart_ito or frame_bundle");
      if (ex == "exit-times" && c.sim.scheme != Scheme::ChartIto) config_error("exit-times needs scheme chart_ito");
      if (ex == "martingale-check" || ex == "qv-check") (void)test_battery(m);
    }

    if (ex == "compare-laws") {
      Json cmp = with_defaults(Json{{"a", {{"scheme", "chart_ito"}}},
                                    {"b", {{"scheme", "extrinsic_stratonovich_midpoint"}}},
                                    {"starts", 8}},
                               raw.value("compare", Json::object()));
      for (const char* side : {"a", "b"}) {
        Json s = cmp[side];
        if (!s.contains("scheme")) s["scheme"] = side[0] == 'a' ? "chart_ito" : "extrinsic_stratonovich_midpoint";
        const ManifoldSpec* sm = &*c.manifold;
        ManifoldSpec own;
        if (s.contains("manifold")) {
          Json r;
          own = instantiate_manifold(s["manifold"], r);
          s["manifold"] = r;
          sm = &own;
        }
        if (sm->dim != c.manifold->dim) config_error(std::string("compare.") + side + ": manifold dimension differs");
        check_domain(*c.embedding, *sm);
        cmp[side] = s;
      }
      if (raw.contains("start") && !raw.value("compare", Json::object()).contains("starts")) cmp["starts"] = 1;
      out["compare"] = cmp;
    } else if (ex == "varadhan" || ex == "metric-recover") {
      Json v = with_defaults(Json{{"x", out["start"]},
                                  {"t_list", {0.08, 0.04, 0.02}},
                                  {"method", "guided_bridge"},
                                  {"n_steps", 64},
                                  {"bandwidth_c", 1.0}},
                             raw.value("varadhan", Json::object()));
      v["x"] = checked_point(*c.manifold, v["x"], "varadhan.x");
      if (v.contains("y")) v["y"] = checked_point(*c.manifold, v["y"], "varadhan.y");
      const auto ts = v["t_list"].get<std::vector<double>>();
      for (std::size_t i = 1; i < ts.size(); ++i)
        if (!(ts[i] < ts[i - 1])) config_error("varadhan.t_list must be strictly decreasing");
      out["varadhan"] = v;
      if (ex == "metric-recover") {
        Json mr = with_defaults(Json{{"x", out["start"]}, {"h", 1e-3}, {"oracle", "reference"}},
                                raw.value("metric_recover", Json::object()));
        mr["x"] = checked_point(*c.manifold, mr["x"], "metric_recover.x");
        if (mr["oracle"] == "reference" && !c.manifold->distance && !c.embedding)
          config_error("manifold '" + c.manifold->name + "' has no reference distance; use oracle varadhan");
        out["metric_recover"] = mr;
      }
    } else if (ex == "mollify-sweep") {
      Json ms = with_defaults(Json{{"eps_from", 2}, {"eps_to", 6}, {"grid", 32}, {"quadrature", 16}},
                              raw.value("mollify_sweep", Json::object()));
      if (ms["eps_to"].get<int>() - ms["eps_from"].get<int>() < 1)
        config_error("mollify_sweep needs eps_to > eps_from");
      out["mollify_sweep"] = ms;
    } else if (ex == "commutator") {
      Json cm = with_defaults(Json{{"family", "cusp"}, {"alpha", 0.7}, {"log2_size", 16}, {"eps_from", 4}, {"eps_to", 9}},
                              raw.value("commutator", Json::object()));
      if (cm["eps_to"].get<int>() - cm["eps_from"].get<int>() < 1) config_error("commutator needs eps_to > eps_from");
      out["commutator"] = cm;
    } else if (ex == "tanaka") {
      out["tanaka"] = with_defaults(Json{{"x0", 0.0}}, raw.value("tanaka", Json::object()));
    } else if (ex == "exit-times") {
      Json et = with_defaults(Json{{"eps", 0.5}, {"t_grid", {0.01, 0.02, 0.04, 0.08}}},
                              raw.value("exit_times", Json::object()));
      for (double t : et["t_grid"].get<std::vector<double>>())
        if (t > c.sim.horizon * (1.0 + 1e-12)) config_error("exit_times.t_grid exceeds sim.horizon");
      out["exit_times"] = et;
    } else if (ex == "martingale-check") {
      Json mg = with_defaults(Json{{"s", 0.0}, {"t", c.sim.horizon}}, raw.value("martingale", Json::object()));
      if (!(mg["s"].get<double>() < mg["t"].get<double>()) || mg["t"].get<double>() > c.sim.horizon * (1.0 + 1e-12))
        config_error("martingale needs s < t <= sim.horizon");
      out["martingale"] = mg;
    } else if (ex == "qv-check") {
      if (c.sim.record_stride != 1) config_error("qv-check needs sim.record_stride = 1");
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw;
    config_error(e.what());
  } catch (const nlohmann::json::exception& e) {
    config_error(e.what());
  }
  c.resolved = std::move(out);
  return c;
}

// --- outputs ---------------------------------------------------------------------------

/// Files of one run, all under the output directory.
class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path dir) : dir_(std::move(dir)) {}

  [[nodiscard]] const std::filesystem::path& path() const { return dir_; }
  [[nodiscard]] const std::vector<std::string>& files() const { return files_; }

  /// Creates the directory and opens `name` inside it.
  std::ofstream open(const std::string& name) {
    if (name.find('/') != std::string::npos || name.find("..") != std::string::npos)
      throw Error(ErrorKind::Io, "cli", "output", "file name '" + name + "' escapes the output directory");
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error(ErrorKind::Io, "cli", "output", "cannot create " + dir_.string() + ": " + ec.message());
    std::ofstream os(dir_ / name, std::ios::binary);
    if (!os) throw Error(ErrorKind::Io, "cli", "output", "cannot open " + (dir_ / name).string());
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
    return os;
  }

  void write_json(const std::string& name, const Json& j) {
    auto os = open(name);
    os << j.dump(2) << '\n';
    if (!os) throw Error(ErrorKind::Io, "cli", "output", "write failed for " + name);
  }

  void write_ensemble(const std::string& stem, const PathEnsemble& e) {
    {
      auto csv = open(stem + ".csv");
      write_ensemble_csv(e, csv);
      if (!csv) throw Error(ErrorKind::Io, "cli", "output", "write failed for " + stem + ".csv");
    }
    write_json(stem + ".json", sidecar_json(e));
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

struct RunResult {
  int exit_code = kAccept;
  Json result;
};

namespace detail {

inline std::string csv(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

inline Json seeds_json(const ExperimentConfig& c) {
  return Json{{"master_seed", c.sim.master_seed}, {"path_offset", c.sim.path_offset}, {"generator", "philox4x32-10"}};
}

/// Seed of the second sample in two-sample experiments.
inline std::uint64_t second_seed(std::uint64_t master) { return splitmix64(master ^ 0x5eed5eed5eed5eedULL); }

inline PathEnsemble simulate_side(const ManifoldSpec& m, const EmbeddingMap* u, const ChartPoint& x, SimConfig cfg,
                                  int threads) {
  PathEnsemble e = simulate(m, u, x, cfg, threads);
  if (u && e.space == StateSpace::Chart) e = push_forward(e, *u);
  return e;
}

inline VaradhanOptions varadhan_options(const ExperimentConfig& c, int threads) {
  const Json& v = c.block("varadhan");
  VaradhanOptions o;
  o.method = v["method"] == "guided_bridge" ? VaradhanMethod::GuidedBridge : VaradhanMethod::EnsembleKde;
  o.n_paths = c.sim.n_paths;
  o.seed = c.sim.master_seed;
  o.threads = threads;
  o.n_steps = v["n_steps"].get<int>();
  o.dt = c.sim.dt;
  o.bandwidth_c = v["bandwidth_c"].get<double>();
  if (v.contains("log_coefficient")) o.log_coefficient = v["log_coefficient"].get<double>();
  return o;
}

inline VaradhanResult run_varadhan_pair(const ExperimentConfig& c, const ChartPoint& x, const ChartPoint& y,
                                        const VaradhanOptions& o) {
  const auto ts = c.block("varadhan")["t_list"].get<std::vector<double>>();
  if (c.embedding) return varadhan_distance(*c.embedding, *c.manifold, x, y, ts, o);
  return varadhan_distance(*c.manifold, x, y, ts, o);
}

inline Json varadhan_json(const VaradhanResult& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back(Json{{"t", row.t}, {"kernel", row.kernel}, {"kernel_se", row.kernel_se},
                        {"minus_2t_log_k", row.y}, {"se", row.y_se}});
  return Json{{"d2", to_json(r.d2)}, {"slope", r.slope}, {"log_coefficient", r.log_coefficient},
              {"residual", r.residual}, {"undersampled", r.undersampled}, {"rows", rows}};
}

// --- experiments -------------------------------------------------------------------------

inline RunResult run_simulate(const ExperimentConfig& c, OutputDir& out, int threads) {
  const ChartPoint x = point_from(c.block("start"));
  const EmbeddingMap* u = c.embedding ? &*c.embedding : nullptr;
  const PathEnsemble e = simulate(*c.manifold, u, x, c.sim, threads);
  out.write_ensemble("ensemble", e);
  Json result{{"status", "completed"}, {"state_space", e.space == StateSpace::Chart ? "chart" : "ambient"},
              {"n_paths", e.n_paths}, {"n_records", e.n_records()}, {"diagnostics", to_json(e.meta.diagnostics)}};
  if (u && e.space == StateSpace::Chart) {
    out.write_ensemble("ambient", push_forward(e, *u));
    result["ambient"] = "ambient.csv";
  }
  return {kAccept, result};
}

inline RunResult run_compare_laws(const ExperimentConfig& c, OutputDir& out, int threads) {
  const Json& cmp = c.block("compare");
  const ManifoldSpec& base = *c.manifold;
  auto side_manifold = [&](const Json& s) {
    Json r;
    return s.contains("manifold") ? instantiate_manifold(s["manifold"], r) : base;
  };
  const ManifoldSpec ma = side_manifold(cmp["a"]), mb = side_manifold(cmp["b"]);
  const int starts = cmp["starts"].get<int>();
  std::vector<ChartPoint> points;
  if (starts == 1) points.push_back(point_from(c.block("start")));
  else points = quasi_uniform_points(base, starts);

  std::vector<LawComparisonReport> parts;
  std::vector<std::string> labels;
  Json start_json = Json::array();
  Json diag = Json::array();
  for (std::size_t k = 0; k < points.size(); ++k) {
    SimConfig ca = c.sim, cb = c.sim;
    ca.scheme = scheme_from_string(cmp["a"]["scheme"].get<std::string>());
    cb.scheme = scheme_from_string(cmp["b"]["scheme"].get<std::string>());
    ca.path_offset = cb.path_offset = c.sim.path_offset + k * static_cast<std::uint64_t>(c.sim.n_paths);
    cb.master_seed = second_seed(c.sim.master_seed);
    const PathEnsemble a = simulate_side(ma, &*c.embedding, points[k], ca, threads);
    const PathEnsemble b = simulate_side(mb, &*c.embedding, points[k], cb, threads);
    parts.push_back(compare_laws(a, b, c.level));
    labels.push_back("start " + std::to_string(k));
    start_json.push_back(point_json(points[k]));
    diag.push_back(Json{{"a", to_json(a.meta.diagnostics)}, {"b", to_json(b.meta.diagnostics)}});
  }
  const LawComparisonReport family = combine_reports(parts, labels, c.level);
  {
    auto os = out.open("laws.csv");
    os << "start,observable,ks_statistic,p_value\n";
    for (std::size_t k = 0; k < parts.size(); ++k)
      for (const auto& s : parts[k].statistics)
        os << k << ',' << s.name << ',' << csv(s.statistic) << ',' << csv(s.p_value) << '\n';
  }
  Json result = to_json(family);
  result["starts"] = start_json;
  result["diagnostics"] = diag;
  result["seeds"] = Json{{"a", c.sim.master_seed}, {"b", second_seed(c.sim.master_seed)}};
  return {family.reject ? kReject : kAccept, result};
}

inline RunResult run_varadhan(const ExperimentConfig& c, OutputDir& out, int threads) {
  const Json& v = c.block("varadhan");
  const ChartPoint x = point_from(v["x"]), y = point_from(v["y"]);
  const VaradhanResult r = run_varadhan_pair(c, x, y, varadhan_options(c, threads));
  {
    auto os = out.open("varadhan.csv");
    write_varadhan_csv(r, os);
  }
  Json result = varadhan_json(r);
  result["status"] = "completed";
  result["distance"] = std::sqrt(std::max(r.d2.value, 0.0));
  if (c.manifold->distance && !c.embedding) {
    const double d = c.manifold->distance(x, y);
    result["reference_d2"] = d * d;
    result["relative_error"] = d > 0.0 ? std::abs(r.d2.value - d * d) / (d * d) : std::abs(r.d2.value);
  }
  return {kAccept, result};
}

inline RunResult run_metric_recover(const ExperimentConfig& c, OutputDir& out, int threads) {
  const Json& mr = c.block("metric_recover");
  const ChartPoint x = point_from(mr["x"]);
  const double h = mr["h"].get<double>();
  const ManifoldSpec& m = *c.manifold;
  const Chart& chart = m.chart(x.chart);
  const Matrix reference = c.embedding ? pullback_chart(*c.embedding, chart).metric(x.x) : chart.metric(x.x);
  DistanceOracle oracle;
  VaradhanOptions o = varadhan_options(c, threads);
  std::uint64_t calls = 0;
  if (mr["oracle"] == "varadhan") {
    oracle = [&](const ChartPoint& a, const ChartPoint& b) {
      VaradhanOptions oc = o;
      oc.seed = splitmix64(o.seed + ++calls);
      return std::sqrt(std::max(run_varadhan_pair(c, a, b, oc).d2.value, 0.0));
    };
  } else if (c.embedding) {
    throw Error(ErrorKind::Unsupported, "cli", "metric-recover", "reference oracle with an embedding; use oracle varadhan");
  } else {
    oracle = m.distance;
  }
  const Matrix g = metric_from_distance(oracle, x, h);
  {
    auto os = out.open("metric.csv");
    os << "i,j,estimate,reference\n";
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) os << i << ',' << j << ',' << csv(g(i, j)) << ',' << csv(reference(i, j)) << '\n';
  }
  std::vector<std::vector<double>> est(static_cast<std::size_t>(g.rows())), ref(static_cast<std::size_t>(g.rows()));
  for (int i = 0; i < g.rows(); ++i)
    for (int j = 0; j < g.cols(); ++j) {
      est[static_cast<std::size_t>(i)].push_back(g(i, j));
      ref[static_cast<std::size_t>(i)].push_back(reference(i, j));
    }
  return {kAccept, Json{{"status", "completed"},
                        {"estimate", est},
                        {"reference", ref},
                        {"relative_frobenius_error", (g - reference).norm() / reference.norm()},
                        {"oracle_calls", mr["oracle"] == "varadhan" ? calls : std::uint64_t{0}}}};
}

inline RunResult run_mollify_sweep(const ExperimentConfig& c, OutputDir& out, int threads) {
  const Json& ms = c.block("mollify_sweep");
  const auto eps = dyadic_scales(ms["eps_from"].get<int>(), ms["eps_to"].get<int>());
  SweepOptions opt;
  opt.grid = ms["grid"].get<int>();
  opt.quadrature = ms["quadrature"].get<int>();
  opt.threads = threads;
  const PullbackSweep s = pullback_convergence_sweep(*c.embedding, *c.manifold, eps, opt);
  {
    auto os = out.open("sweep.csv");
    write_sweep_csv(s.rows, os);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < s.rows.size(); ++i) monotone = monotone && s.rows[i].defect_c1 < s.rows[i - 1].defect_c1;
  return {kAccept, Json{{"status", "completed"}, {"slope", s.slope}, {"isometry_residual", s.residual},
                        {"monotone", monotone}, {"n_scales", s.rows.size()}}};
}

inline RunResult run_commutator(const ExperimentConfig& c, OutputDir& out, int threads) {
  const Json& cm = c.block("commutator");
  const double alpha = cm["alpha"].get<double>();
  const int n = cm["log2_size"].get<int>();
  const GridFunction f = cm["family"] == "cusp" ? holder_cusp_grid(alpha, n) : weierstrass_grid(alpha, n);
  const auto rows = commutator_sweep(f, dyadic_scales(cm["eps_from"].get<int>(), cm["eps_to"].get<int>()), threads);
  {
    auto os = out.open("commutator.csv");
    write_commutator_csv(rows, os);
  }
  std::vector<double> e, d;
  for (const auto& r : rows) {
    e.push_back(r.eps);
    d.push_back(r.defect);
  }
  const double slope = loglog_slope(e, d);
  return {kAccept, Json{{"status", "completed"}, {"slope", slope}, {"predicted_slope", 2.0 * alpha},
                        {"slope_error", slope - 2.0 * alpha}}};
}

inline RunResult run_tanaka(const ExperimentConfig& c, OutputDir& out, int threads) {
  const double x0 = c.block("tanaka")["x0"].get<double>();
  const PathEnsemble e = simulate_tanaka(x0, c.sim, threads);
  const std::int64_t last = e.n_records() - 1;
  const double T = e.horizon();
  std::vector<double> y, l, diff;
  for (std::int64_t p = 0; p < e.n_paths; ++p) {
    y.push_back(e.at(p, last, 1));
    l.push_back(e.at(p, last, 2));
    diff.push_back(y.back() - std::abs(x0) - l.back());
  }
  const auto ms = stats::mean_se(l), md = stats::mean_se(diff);
  // With x0 = 0, L_T has the law of |B_T|: E = sqrt(2T/pi).
  const double expected_l = std::sqrt(2.0 * T / std::numbers::pi);
  const auto ks = stats::ks_one_sample(y, [&](double v) {
    if (v <= 0.0) return 0.0;
    const double s = std::sqrt(T);
    return stats::normal_cdf((v - x0) / s) - stats::normal_cdf((-v - x0) / s);
  });
  const bool reject = ks.p_value < c.level;
  {
    auto os = out.open("tanaka.csv");
    os << "quantity,value,std_error,reference\n";
    os << "local_time_mean," << csv(ms.mean) << ',' << csv(ms.std_error) << ','
       << (x0 == 0.0 ? csv(expected_l) : std::string()) << '\n';
    os << "tanaka_residual_mean," << csv(md.mean) << ',' << csv(md.std_error) << ",0\n";
    os << "ks_abs_normal," << csv(ks.statistic) << ",," << '\n';
  }
  Json result{{"decision", reject ? "reject" : "accept"},
              {"level", c.level},
              {"horizon", T},
              {"local_time", {{"mean", ms.mean}, {"std_error", ms.std_error}}},
              {"tanaka_residual", {{"mean", md.mean}, {"std_error", md.std_error}}},
              {"ks_abs_normal", {{"statistic", ks.statistic}, {"p_value", ks.p_value}}}};
  if (x0 == 0.0) {
    result["local_time"]["reference"] = expected_l;
    result["local_time"]["z"] = (ms.mean - expected_l) / ms.std_error;
  }
  return {reject ? kReject : kAccept, result};
}

inline RunResult run_exit_times(const ExperimentConfig& c, OutputDir& out, int threads) {
  const Json& et = c.block("exit_times");
  const double eps = et["eps"].get<double>();
  const auto grid = et["t_grid"].get<std::vector<double>>();
  const ExitTimeSamples s = exit_time_samples(*c.manifold, point_from(c.block("start")), eps, c.sim, threads);
  Json rows = Json::array();
  double bound = 0.0;
  bool non_increasing = true;
  double prev = std::numeric_limits<double>::infinity(), prev_se = 0.0;
  {
    auto os = out.open("exit_times.csv");
    os << "t,probability,std_error,ratio,ratio_se\n";
    std::vector<double> sorted = grid;
    std::sort(sorted.begin(), sorted.end());
    for (double t : sorted) {
      const auto [p, se] = s.probability_by(t);
      const double ratio = p / t, rse = se / t;
      os << csv(t) << ',' << csv(p) << ',' << csv(se) << ',' << csv(ratio) << ',' << csv(rse) << '\n';
      rows.push_back(Json{{"t", t}, {"probability", p}, {"std_error", se}, {"ratio", ratio}, {"ratio_se", rse}});
      bound = std::max(bound, ratio);
      // Ratios along increasing t should not decrease beyond noise.
      if (std::isfinite(prev) && ratio + 3.0 * std::hypot(rse, prev_se) < prev) non_increasing = false;
      prev = ratio;
      prev_se = rse;
    }
  }
  std::size_t censored = 0;
  for (auto f : s.censored) censored += f;
  return {kAccept, Json{{"status", "completed"},
                        {"eps", eps},
                        {"rows", rows},
                        {"bound_constant", bound},
                        {"ratio_non_increasing_as_t_decreases", non_increasing},
                        {"censored_fraction", static_cast<double>(censored) / static_cast<double>(s.times.size())},
                        {"beyond_injectivity", s.beyond_injectivity}}};
}

inline RunResult run_martingale(const ExperimentConfig& c, OutputDir& out, int threads) {
  const Json& mg = c.block("martingale");
  const PathEnsemble e = simulate(*c.manifold, nullptr, point_from(c.block("start")), c.sim, threads);
  const double s = mg["s"].get<double>(), t = mg["t"].get<double>();
  Json rows = Json::array();
  double max_z = 0.0;
  {
    auto os = out.open("martingale.csv");
    os << "function,weight,defect,std_error,z\n";
    for (const auto& tf : test_battery(*c.manifold)) {
      const auto d = martingale_defect(e, tf, s, t);
      for (const auto& w : d.meta["weights"]) {
        const double v = w["defect"].get<double>(), se = w["std_error"].get<double>();
        const double z = se > 0.0 ? std::abs(v) / se : (v == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
        os << tf.name << ',' << w["F"].get<std::string>() << ',' << csv(v) << ',' << csv(se) << ',' << csv(z) << '\n';
        max_z = std::max(max_z, z);
      }
      rows.push_back(Json{{"function", tf.name}, {"estimate", to_json(d)}});
    }
  }
  const bool reject = max_z > 3.0;
  return {reject ? kReject : kAccept, Json{{"decision", reject ? "reject" : "accept"}, {"threshold_se", 3.0},
                                           {"max_z", max_z}, {"functions", rows},
                                           {"diagnostics", to_json(e.meta.diagnostics)}}};
}

inline RunResult run_qv(const ExperimentConfig& c, OutputDir& out, int threads) {
  const PathEnsemble e = simulate(*c.manifold, nullptr, point_from(c.block("start")), c.sim, threads);
  Json rows = Json::array();
  double max_z = 0.0;
  {
    auto os = out.open("qv.csv");
    os << "function,realized,predicted,relative_discrepancy,std_error,z\n";
    for (const auto& tf : test_battery(*c.manifold)) {
      const auto q = quadratic_variation_check(e, tf.f, *c.manifold);
      const double z = q.std_error > 0.0 ? std::abs(q.value) / q.std_error : 0.0;
      os << tf.name << ',' << csv(q.meta["realized_mean"].get<double>()) << ','
         << csv(q.meta["predicted_mean"].get<double>()) << ',' << csv(q.value) << ',' << csv(q.std_error) << ','
         << csv(z) << '\n';
      max_z = std::max(max_z, z);
      rows.push_back(Json{{"function", tf.name}, {"estimate", to_json(q)}});
    }
  }
  const bool reject = max_z > 3.0;
  return {reject ? kReject : kAccept,
          Json{{"decision", reject ? "reject" : "accept"}, {"threshold_se", 3.0}, {"max_z", max_z}, {"functions", rows}}};
}

}  // namespace detail

/// Runs a resolved experiment, writing its data files into `out`.
inline RunResult run(const ExperimentConfig& c, OutputDir& out, int threads = 0) {
  const auto& ex = c.experiment;
  if (ex == "simulate") return detail::run_simulate(c, out, threads);
  if (ex == "compare-laws") return detail::run_compare_laws(c, out, threads);
  if (ex == "varadhan") return detail::run_varadhan(c, out, threads);
  if (ex == "metric-recover") return detail::run_metric_recover(c, out, threads);
  if (ex == "mollify-sweep") return detail::run_mollify_sweep(c, out, threads);
  if (ex == "commutator") return detail::run_commutator(c, out, threads);
  if (ex == "tanaka") return detail::run_tanaka(c, out, threads);
  if (ex == "exit-times") return detail::run_exit_times(c, out, threads);
  if (ex == "martingale-check") return detail::run_martingale(c, out, threads);
  if (ex == "qv-check") return detail::run_qv(c, out, threads);
  throw Error(ErrorKind::Config, "cli", "run", "unknown experiment '" + ex + "'");
}

inline Json error_json(const Error& e) {
  return Json{{"kind", to_string(e.kind())}, {"module", e.module()}, {"operation", e.operation()}, {"message", e.what()}};
}

inline Json manifest_json(const ExperimentConfig& c, const std::string& status, const std::vector<std::string>& files) {
  return Json{{"artifact", kArtifact}, {"version", kVersion}, {"status", status}, {"experiment", c.experiment},
              {"config", c.resolved}, {"seeds", detail::seeds_json(c)}, {"outputs", files}};
}

/// Full pipeline: resolve, run, write result.json and manifest.json. Errors
/// become an error manifest (when an output directory is known) and an exit code.
inline int execute(const Json& raw, const Overrides& ov, const std::string& subcommand, int threads,
                   std::ostream& log) {
  std::optional<std::filesystem::path> dir;
  if (ov.output_dir) dir = *ov.output_dir;
  else if (raw.is_object() && raw.contains("output_dir") && raw["output_dir"].is_string()) dir = raw["output_dir"].get<std::string>();
  auto fail = [&](const Error& e, int code) {
    log << "error: " << e.what() << '\n';
    if (dir) {
      try {
        OutputDir out(*dir);
        out.write_json("manifest.json", Json{{"artifact", kArtifact}, {"version", kVersion}, {"status", "error"},
                                             {"exit_code", code}, {"error", error_json(e)}});
      } catch (const Error& io) {
        log << "error: " << io.what() << '\n';
      }
    }
    return code;
  };
  ExperimentConfig c;
  try {
    c = resolve_config(raw, ov, subcommand);
  } catch (const Error& e) {
    return fail(e, kConfigError);
  }
  dir = c.output_dir;
  try {
    OutputDir out(c.output_dir);
    RunResult r = run(c, out, threads);
    r.result["experiment"] = c.experiment;
    r.result["exit_code"] = r.exit_code;
    out.write_json("result.json", r.result);
    auto files = out.files();
    files.push_back("manifest.json");
    out.write_json("manifest.json", manifest_json(c, "ok", files));
    log << c.experiment << ": " << r.result.value("decision", r.result.value("status", std::string("completed")))
        << " (" << c.output_dir.generic_string() << ")\n";
    return r.exit_code;
  } catch (const Error& e) {
    return fail(e, e.kind() == ErrorKind::Config ? kConfigError : kRuntimeError);
  } catch (const std::exception& e) {
    return fail(Error(ErrorKind::Io, "cli", "run", e.what()), kRuntimeError);
  }
}

}  // namespace isobm::experiment
