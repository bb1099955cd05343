#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "aq/harness.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> backend;
  std::optional<std::uint64_t> A;
  std::optional<double> t, dt, omega, gamma0;
  std::optional<std::uint64_t> snapshot, trials;
  bool frames = false;
};

// Command-line overrides are folded into the config document before parsing.
aq::json with_overrides(aq::json j, const Options& o) {
  auto& e = j["engine"];
  if (!e.is_object()) e = aq::json::object();
  if (o.seed) e["seed"] = *o.seed;
  if (o.backend) e["backend"] = *o.backend;
  if (o.A) e["A"] = *o.A;
  if (o.dt) e["dt"] = *o.dt;
  if (o.omega) e["omega"] = *o.omega;
  if (o.gamma0) e["gamma0"] = *o.gamma0;
  if (o.t) j["t"] = *o.t;
  if (o.snapshot) j["output"]["snapshot_interval"] = *o.snapshot;
  if (o.frames) j["output"]["frames"] = true;
  if (o.trials) j["measure"]["trials"] = *o.trials;
  return j;
}

int compile(const Options& o) {
  const aq::json doc = aq::read_json_file(o.config);
  const auto h = aq::matrix_from_json(doc.is_object() && doc.contains("hamiltonian") ? doc["hamiltonian"] : doc, o.config);
  const auto out = aq::compile_json(h);
  if (o.out.empty()) {
    std::cout << out.dump(2) << '\n';
  } else {
    std::filesystem::create_directories(o.out);
    aq::write_json_file(std::filesystem::path(o.out) / "compiled.json", out);
  }
  return 0;
}

int scenario(const std::string& name, const Options& o) {
  aq::json doc = aq::read_json_file(o.config);
  if (!doc.is_object()) aq::fail(aq::ErrorKind::ConfigError, o.config + ": expected an object");
  if (doc.contains("scenario") && doc["scenario"] != name)
    aq::fail(aq::ErrorKind::ConfigError, o.config + ": scenario '" + doc["scenario"].dump() + "' does not match the subcommand");
  doc["scenario"] = name;
  auto cfg = aq::parse_config(with_overrides(doc, o), std::filesystem::path(o.config).parent_path());
  cfg.output.dir = o.out;
  const auto report = aq::run(cfg);
  if (o.out.empty()) std::cout << report.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amplitude quanta simulator"};
  app.require_subcommand(1);
  Options o;
  const auto common = [&o](CLI::App* c) {
    c->add_option("--config", o.config, "structured-text config file")->required()->check(CLI::ExistingFile);
    c->add_option("--seed", o.seed, "engine seed");
    c->add_option("--out", o.out, "output directory");
  };
  auto* comp = app.add_subcommand("compile", "decompose a Hamiltonian and emit reaction lists");
  common(comp);
  std::string chosen;
  for (const auto& [cmd, help] : {std::pair{"evolve", "evolve one bubble"}, std::pair{"measure", "repeat measurements"},
                                  std::pair{"multi", "evolve coupled bubbles"}, std::pair{"faulty", "partitioned fault sweep"}}) {
    auto* c = app.add_subcommand(cmd, help);
    common(c);
    c->add_option("--backend", o.backend, "wellmixed, spatial or meanfield");
    c->add_option("--A", o.A, "per-type total");
    c->add_option("--t", o.t, "Hamiltonian time");
    c->add_option("--dt", o.dt, "kinetic tick");
    c->add_option("--omega", o.omega, "angular rate gamma0 * A");
    c->add_option("--gamma0", o.gamma0, "pair-collision propensity");
    c->add_option("--snapshot-interval", o.snapshot, "ticks between trajectory records");
    c->add_option("--trials", o.trials, "measurement trials");
    c->add_flag("--frames", o.frames, "write frames/NNNN.ppm");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    if (comp->parsed()) return compile(o);
    for (const char* cmd : {"evolve", "measure", "multi", "faulty"})
      if (app.get_subcommand(cmd)->parsed()) return scenario(std::string(cmd) == "evolve" ? "single" : cmd, o);
  } catch (const aq::Error& e) {
    std::cerr << "aq: " << e.what() << '\n';
    return aq::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "aq: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
