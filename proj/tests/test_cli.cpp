#include "isobm/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

namespace isobm::experiment {
namespace {

namespace fs = std::filesystem;

const fs::path kSource = ISOBM_SOURCE_DIR;

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

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("isobm-cli-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  [[nodiscard]] const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::set<std::string> files_in(const fs::path& dir) {
  std::set<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) out.insert(fs::relative(e.path(), dir).generic_string());
  return out;
}

int run_quiet(const Json& config, const fs::path& dir, int threads = 1, std::optional<std::uint64_t> seed = {}) {
  std::ostringstream log;
  Overrides ov;
  ov.output_dir = dir.string();
  ov.seed = seed;
  return execute(config, ov, config.value("experiment", std::string()), threads, log);
}

// --- schema and catalog ------------------------------------------------------------

TEST(Schema, PublishedFileMatchesEmbedded) {
  EXPECT_EQ(load(kSource / "schema" / "experiment.schema.json"), config_schema());
}

TEST(Schema, ExampleConfigsValidate) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(kSource / "configs")) {
    const Json c = load(e.path());
    EXPECT_TRUE(schema_errors(c).empty()) << e.path();
    EXPECT_NO_THROW((void)resolve_config(c)) << e.path();
    ++n;
  }
  EXPECT_GE(n, 10);
}

TEST(Schema, Violations) {
  EXPECT_FALSE(schema_errors(Json{{"experiment", "teleport"}}).empty());
  EXPECT_FALSE(schema_errors(Json{{"experiment", "simulate"}}).empty());
  EXPECT_FALSE(schema_errors(Json{{"experiment", "compare-laws"}, {"manifold", {{"name", "sphere"}}}}).empty());
  EXPECT_FALSE(
      schema_errors(Json{{"experiment", "simulate"}, {"manifold", {{"name", "sphere"}}}, {"sim", {{"n_paths", 0}}}})
          .empty());
  EXPECT_FALSE(
      schema_errors(Json{{"experiment", "simulate"}, {"manifold", {{"name", "sphere"}}}, {"sim", {{"n_path", 10}}}})
          .empty());
  EXPECT_TRUE(schema_errors(Json{{"experiment", "commutator"}}).empty());
  EXPECT_TRUE(schema_errors(Json{{"experiment", "simulate"}, {"manifold", {{"name", "sphere"}}}}).empty());
}

TEST(Catalog, SphereHasRadiusDefaultOne) {
  const Json cat = list_builtins();
  bool found = false;
  for (const auto& m : cat["manifolds"])
    if (m["name"] == "sphere") {
      found = true;
      ASSERT_EQ(m["params"].size(), 1u);
      EXPECT_EQ(m["params"][0]["name"], "radius");
      EXPECT_EQ(m["params"][0]["default"].get<double>(), 1.0);
    }
  EXPECT_TRUE(found);
  EXPECT_EQ(cat["experiments"].size(), 10u);
}

const std::map<std::string, Json> kEmbeddingDomain = {
    {"circle-R2", {{"name", "circle"}}},
    {"clifford-torus-R4", {{"name", "flat-torus"}}},
    {"round-torus-R3", {{"name", "round-torus"}}},
    {"sphere-R3", {{"name", "sphere"}}},
    {"graph-1d", {{"name", "euclidean"}, {"params", {{"dim", 1.0}}}}},
};

Json defaults_of(const Json& entry) {
  Json p = Json::object();
  for (const auto& q : entry["params"]) p[q["name"].get<std::string>()] = q["default"];
  return p;
}

TEST(Catalog, RoundTripsThroughValidator) {
  const Json cat = list_builtins();
  for (const auto& m : cat["manifolds"]) {
    const Json c{{"experiment", "simulate"}, {"manifold", {{"name", m["name"]}, {"params", defaults_of(m)}}}};
    EXPECT_TRUE(schema_errors(c).empty()) << m["name"];
    const auto r = resolve_config(c);
    const Json defaults = defaults_of(m);
    for (const auto& [k, v] : defaults.items()) EXPECT_EQ(r.resolved["manifold"]["params"][k], v) << m["name"];
  }
  for (const auto& e : cat["embeddings"]) {
    ASSERT_TRUE(kEmbeddingDomain.contains(e["name"])) << e["name"];
    const Json c{{"experiment", "simulate"},
                 {"manifold", kEmbeddingDomain.at(e["name"])},
                 {"embedding", {{"name", e["name"]}, {"params", defaults_of(e)}}}};
    EXPECT_TRUE(schema_errors(c).empty()) << e["name"];
    EXPECT_NO_THROW((void)resolve_config(c)) << e["name"];
  }
}

TEST(Catalog, EveryEntryPassesInvariants) {
  for (const auto& info : manifold_catalog()) {
    const ManifoldSpec m = make_manifold(info.name);
    for (const auto& p : quasi_uniform_points(m, 16)) {
      const Chart& c = m.chart(p.chart);
      ASSERT_TRUE(c.in_trust_region(p.x)) << info.name;
      const Matrix g = c.metric(p.x);
      EXPECT_LT((g - g.transpose()).norm(), 1e-12) << info.name;
      EXPECT_GT(Eigen::SelfAdjointEigenSolver<Matrix>(g).eigenvalues().minCoeff(), 0.0) << info.name;
      for (const auto& other : m.charts) {
        if (other.id == p.chart) continue;
        try {
          const Vector y = transition_point(m, p.chart, other.id, p.x);
          EXPECT_LT(c.difference(p.x, transition_point(m, other.id, p.chart, y)).norm(), 1e-9) << info.name;
        } catch (const Error&) {
        }
      }
    }
  }
  for (const auto& info : embedding_catalog()) {
    Json resolved;
    const ManifoldSpec m = detail::instantiate_manifold(kEmbeddingDomain.at(info.name), resolved);
    const EmbeddingMap u = make_embedding(info.name);
    const auto pts = quasi_uniform_points(m, 16);
    EXPECT_GT(immersion_margin(u, pts), 0.0) << info.name;
    if (info.name != "graph-1d") EXPECT_LT(isometry_residual(u, m, pts), 1e-8) << info.name;
  }
}

// --- runs -------------------------------------------------------------------------

TEST(Run, UnknownManifoldLeavesOnlyErrorManifest) {
  TempDir t;
  const Json c{{"experiment", "simulate"}, {"manifold", {{"name", "klein-bottle"}}}};
  EXPECT_EQ(run_quiet(c, t.path()), kConfigError);
  EXPECT_EQ(files_in(t.path()), std::set<std::string>{"manifest.json"});
  const Json m = load(t.path() / "manifest.json");
  EXPECT_EQ(m["status"], "error");
  EXPECT_EQ(m["error"]["kind"], "config");
  EXPECT_EQ(m["error"]["module"], "cli");
}

TEST(Run, ConfigErrorsExitOne) {
  TempDir t;
  EXPECT_EQ(run_quiet(Json{{"experiment", "simulate"}, {"manifold", {{"name", "sphere"}}}, {"sim", {{"dt", 0.3}, {"horizon", 1.0}}}},
                      t.path()),
            kConfigError);
  EXPECT_EQ(run_quiet(Json{{"experiment", "qv-check"}, {"manifold", {{"name", "sphere"}}}, {"sim", {{"record_stride", 2}}}},
                      t.path()),
            kConfigError);
  EXPECT_EQ(run_quiet(Json{{"experiment", "martingale-check"}, {"manifold", {{"name", "round-torus"}}}}, t.path()),
            kConfigError);
  EXPECT_EQ(run_quiet(Json{{"experiment", "simulate"},
                           {"manifold", {{"name", "sphere"}}},
                           {"embedding", {{"name", "circle-R2"}}}},
                      t.path()),
            kConfigError);
  EXPECT_EQ(run_quiet(Json{{"experiment", "simulate"},
                           {"manifold", {{"name", "sphere"}}},
                           {"start", {{"chart", 0}, {"x", {5.0, 0.0}}}}},
                      t.path()),
            kConfigError);
}

TEST(Run, CommutatorWritesDataFiles) {
  TempDir t;
  const Json c{{"experiment", "commutator"}, {"commutator", {{"alpha", 0.5}, {"log2_size", 14}, {"eps_from", 3}, {"eps_to", 7}}}};
  EXPECT_EQ(run_quiet(c, t.path()), kAccept);
  EXPECT_EQ(files_in(t.path()), (std::set<std::string>{"commutator.csv", "manifest.json", "result.json"}));
  const Json r = load(t.path() / "result.json");
  EXPECT_NEAR(r["slope"].get<double>(), 1.0, 0.15);
  const Json m = load(t.path() / "manifest.json");
  EXPECT_EQ(m["version"], kVersion);
  EXPECT_EQ(m["config"]["commutator"]["family"], "cusp");
  EXPECT_EQ(slurp(t.path() / "commutator.csv").substr(0, 4), "eps,");
}

Json small_compare(const char* embedding, const char* b_manifold, std::uint64_t seed) {
  Json b{{"scheme", "extrinsic_stratonovich_midpoint"}};
  if (b_manifold) b["manifold"] = {{"name", b_manifold}};
  return Json{{"experiment", "compare-laws"},
              {"manifold", {{"name", "flat-torus"}}},
              {"embedding", {{"name", embedding}}},
              {"sim", {{"dt", 1e-3}, {"horizon", 0.3}, {"n_paths", 1500}, {"master_seed", seed}, {"record_stride", 30}}},
              {"compare", {{"b", b}, {"starts", 2}}}};
}

TEST(Run, CompareLawsAcceptsCliffordAndRejectsRoundTorus) {
  TempDir t;
  EXPECT_EQ(run_quiet(small_compare("clifford-torus-R4", nullptr, 1), t.path() / "clifford"), kAccept);
  const Json r = load(t.path() / "clifford" / "result.json");
  EXPECT_EQ(r["decision"], "accept");
  EXPECT_EQ(r["correction"].get<int>(), 2 * 9);
  EXPECT_EQ(run_quiet(small_compare("round-torus-R3", "round-torus", 2), t.path() / "round"), kReject);
  EXPECT_EQ(load(t.path() / "round" / "result.json")["decision"], "reject");
}

TEST(Run, OutputsIndependentOfThreadCount) {
  TempDir t;
  const Json c{{"experiment", "simulate"},
               {"manifold", {{"name", "sphere"}}},
               {"embedding", {{"name", "sphere-R3"}}},
               {"sim", {{"dt", 1e-3}, {"horizon", 0.2}, {"n_paths", 64}, {"master_seed", 9}, {"record_stride", 20}}}};
  std::string reference;
  for (int threads : {1, 2, 8}) {
    const fs::path dir = t.path() / std::to_string(threads);
    ASSERT_EQ(run_quiet(c, dir, threads), kAccept);
    const std::string csv = slurp(dir / "ensemble.csv") + slurp(dir / "ambient.csv");
    if (reference.empty()) reference = csv;
    EXPECT_EQ(csv, reference) << threads;
    Json manifest = load(dir / "manifest.json");
    manifest["config"].erase("output_dir");
    Json first = load(t.path() / "1" / "manifest.json");
    first["config"].erase("output_dir");
    EXPECT_EQ(manifest, first);
  }
}

TEST(Run, ManifestReproducesOutputs) {
  TempDir t;
  const Json c{{"experiment", "qv-check"},
               {"manifold", {{"name", "circle"}}},
               {"sim", {{"dt", 1e-2}, {"horizon", 0.5}, {"n_paths", 200}, {"master_seed", 4}}}};
  ASSERT_NE(run_quiet(c, t.path() / "first"), kConfigError);
  const Json manifest = load(t.path() / "first" / "manifest.json");
  ASSERT_NE(run_quiet(manifest, t.path() / "second", 3), kConfigError);
  EXPECT_EQ(slurp(t.path() / "first" / "qv.csv"), slurp(t.path() / "second" / "qv.csv"));
}

TEST(Run, CompareLawsManifestKeepsStartCount) {
  TempDir t;
  ASSERT_EQ(run_quiet(small_compare("clifford-torus-R4", nullptr, 3), t.path() / "first"), kAccept);
  const Json manifest = load(t.path() / "first" / "manifest.json");
  ASSERT_EQ(run_quiet(manifest, t.path() / "second"), kAccept);
  EXPECT_EQ(slurp(t.path() / "first" / "laws.csv"), slurp(t.path() / "second" / "laws.csv"));
  EXPECT_EQ(slurp(t.path() / "first" / "result.json"), slurp(t.path() / "second" / "result.json"));
}

TEST(Run, SeedOverride) {
  TempDir t;
  const Json c{{"experiment", "simulate"},
               {"manifold", {{"name", "circle"}}},
               {"sim", {{"dt", 0.1}, {"horizon", 0.5}, {"n_paths", 5}, {"master_seed", 1}}}};
  ASSERT_EQ(run_quiet(c, t.path() / "a"), kAccept);
  ASSERT_EQ(run_quiet(c, t.path() / "b", 1, 77), kAccept);
  EXPECT_EQ(load(t.path() / "b" / "manifest.json")["seeds"]["master_seed"].get<std::uint64_t>(), 77u);
  EXPECT_NE(slurp(t.path() / "a" / "ensemble.csv"), slurp(t.path() / "b" / "ensemble.csv"));
}

TEST(Run, WritesStayInsideOutputDir) {
  TempDir t;
  const fs::path out = t.path() / "inside";
  const Json c{{"experiment", "tanaka"}, {"sim", {{"dt", 1e-2}, {"horizon", 1.0}, {"n_paths", 100}}}};
  ASSERT_NE(run_quiet(c, out), kConfigError);
  EXPECT_EQ(files_in(t.path()), (std::set<std::string>{"inside", "inside/manifest.json", "inside/result.json",
                                                        "inside/tanaka.csv"}));
  OutputDir dir(out);
  EXPECT_THROW((void)dir.open("../escape.csv"), Error);
}

TEST(Run, MismatchedSubcommandIsConfigError) {
  TempDir t;
  std::ostringstream log;
  Overrides ov;
  ov.output_dir = t.path().string();
  EXPECT_EQ(execute(Json{{"experiment", "tanaka"}}, ov, "commutator", 1, log), kConfigError);
}

}  // namespace
}  // namespace isobm::experiment
