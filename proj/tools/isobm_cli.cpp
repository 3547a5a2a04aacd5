#include "isobm/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace ex = isobm::experiment;

int main(int argc, char** argv) {
  CLI::App app{"Brownian motion on embedded manifolds: simulation and estimation experiments"};
  app.require_subcommand(0, 1);
  bool list = false, schema = false;
  app.add_flag("--list-builtins", list, "print the catalog of manifolds, embeddings and experiments as JSON");
  app.add_flag("--print-schema", schema, "print the config JSON schema");

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  int threads = 0;
  for (const auto& name : ex::experiment_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--config", config_path, "experiment config (JSON, or a manifest from an earlier run)")->required();
    sub->add_option("--seed", seed, "override sim.master_seed");
    sub->add_option("--threads", threads, "worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
    sub->add_option("--output", output, "override output_dir");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : ex::kConfigError;
  }
  if (list) {
    std::cout << ex::list_builtins().dump(2) << '\n';
    return 0;
  }
  if (schema) {
    std::cout << ex::config_schema().dump(2) << '\n';
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return ex::kConfigError;
  }
  const std::string subcommand = app.get_subcommands().front()->get_name();

  ex::Overrides ov;
  ov.seed = seed;
  ov.output_dir = output;
  isobm::Json raw;
  std::ifstream in(config_path, std::ios::binary);
  try {
    if (!in) throw isobm::Error(isobm::ErrorKind::Config, "cli", "load", "cannot read config " + config_path);
    try {
      raw = isobm::Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw isobm::Error(isobm::ErrorKind::Config, "cli", "load", config_path + ": " + e.what());
    }
  } catch (const isobm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (output) {
      ex::OutputDir out(*output);
      out.write_json("manifest.json", isobm::Json{{"artifact", ex::kArtifact}, {"version", ex::kVersion},
                                                  {"status", "error"}, {"exit_code", int{ex::kConfigError}},
                                                  {"error", ex::error_json(e)}});
    }
    return ex::kConfigError;
  }
  return ex::execute(raw, ov, subcommand, threads, std::cerr);
}
