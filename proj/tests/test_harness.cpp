#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>
#include <string>

#include "aq/harness.hpp"

using namespace aq;
using std::numbers::pi;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("aq_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json sigma_x_config() {
  return json::parse(R"({
    "scenario": "single",
    "hamiltonian": [[0, -1], [-1, 0]],
    "initial": [1, 0],
    "t": 1.5707963267948966,
    "engine": {"A": 10000, "angle": 0.01, "seed": 3},
    "output": {"snapshot_interval": 25}
  })");
}

template <class F>
std::string config_error(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "no error raised";
  return {};
}

int cli(const std::string& args) {
  const int rc = std::system((std::string(AQ_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, DefaultsFillMissingSections) {
  const auto c = parse_config(json::parse(R"({"hamiltonian": [[1, 0], [0, -1]]})"));
  EXPECT_EQ(c.scenario, Scenario::single);
  EXPECT_EQ(c.engine.backend, Backend::wellmixed);
  EXPECT_EQ(c.engine.A, 10000u);
  EXPECT_DOUBLE_EQ(c.engine.omega() * c.engine.dt, 0.01);
  EXPECT_EQ(c.t, 0.0);
  EXPECT_EQ(c.initial, basis_state(2, 0));
  EXPECT_EQ(c.faulty.workers, 8u);
}

TEST(Config, ComplexEntriesAndEngineFields) {
  const auto c = parse_config(json::parse(R"({
    "hamiltonian": [[0, [0, -1]], [[0, 1], 0]],
    "initial": [[0.6, 0], [0, 0.8]],
    "engine": {"backend": "spatial", "A": 500, "omega": 2, "dt": 0.001, "mode": "division", "speed": 0.05, "neighbors": 0.5}
  })"));
  EXPECT_EQ(c.hamiltonian(0, 1), cplx(0, -1));
  EXPECT_EQ(c.initial[1], cplx(0, 0.8));
  EXPECT_EQ(c.engine.backend, Backend::spatial);
  EXPECT_DOUBLE_EQ(c.engine.gamma0, 2.0 / 500);
  EXPECT_DOUBLE_EQ(c.engine.dt, 0.001);
  EXPECT_DOUBLE_EQ(c.engine.neighbors, 0.5);
}

TEST(Config, ErrorsNameTheOffendingKey) {
  auto j = sigma_x_config();
  j["engine"]["gama0"] = 1;
  EXPECT_NE(config_error([&] { parse_config(j); }).find("config.engine.gama0"), std::string::npos);

  j = sigma_x_config();
  j["engine"]["A"] = "many";
  EXPECT_NE(config_error([&] { parse_config(j); }).find("config.engine.A"), std::string::npos);

  j = sigma_x_config();
  j["hamiltonian"] = json::parse("[[0, 1], [2, 0]]");
  EXPECT_NE(config_error([&] { parse_config(j); }).find("Hermitian"), std::string::npos);

  j = sigma_x_config();
  j["hamiltonian"][1] = json::parse("[1]");
  EXPECT_NE(config_error([&] { parse_config(j); }).find("config.hamiltonian[1]"), std::string::npos);

  j = sigma_x_config();
  j["initial"] = json::parse("[1, 0, 0]");
  EXPECT_NE(config_error([&] { parse_config(j); }).find("config.initial"), std::string::npos);

  j = sigma_x_config();
  j["faulty"] = json::parse(R"({"eps": [0.6]})");
  EXPECT_NE(config_error([&] { parse_config(j); }).find("config.faulty.eps"), std::string::npos);

  j = sigma_x_config();
  j["scenario"] = "sideways";
  EXPECT_NE(config_error([&] { parse_config(j); }).find("sideways"), std::string::npos);
}

TEST(Config, HamiltonianFileResolvesAgainstTheConfigDirectory) {
  const auto dir = scratch("hfile");
  fs::create_directories(dir);
  write_json_file(dir / "h.json", json::parse("[[0, -1], [-1, 0]]"));
  auto j = sigma_x_config();
  j.erase("hamiltonian");
  j["hamiltonian_file"] = "h.json";
  write_json_file(dir / "run.json", j);
  const auto c = load_config(dir / "run.json");
  EXPECT_EQ(c.hamiltonian(0, 1), cplx(-1, 0));

  j["hamiltonian_file"] = "absent.json";
  write_json_file(dir / "run.json", j);
  try {
    load_config(dir / "run.json");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::IoError);
    EXPECT_NE(std::string(e.what()).find("absent.json"), std::string::npos);
  }
}

TEST(Run, QuarterPeriodReachesIOne) {
  const auto report = run(parse_config(sigma_x_config()));
  // exp(i sx pi/2)|0> = i|1>
  StateVector target(2);
  target << 0, cplx(0, 1);
  StateVector got = state_from_json(report["final_state"], "final_state");
  EXPECT_GE(std::norm(target.dot(got)), 0.99);
  EXPECT_GE(report["fidelity"].get<double>(), 0.99);
  EXPECT_EQ(report["ticks"].get<std::uint64_t>(), 158u);
}

TEST(Run, ZeroDurationKeepsTheInitialState) {
  auto j = sigma_x_config();
  j["t"] = 0;
  j["initial"] = json::parse("[0.6, [0, 0.8]]");
  const auto report = run(parse_config(j));
  EXPECT_NEAR(report["fidelity"].get<double>(), 1.0, 1e-8);
  EXPECT_EQ(report["ticks"].get<std::uint64_t>(), 0u);
}

TEST(Run, MeanFieldAndSpatialBackendsReport) {
  auto j = sigma_x_config();
  j["engine"]["backend"] = "meanfield";
  EXPECT_GE(run(parse_config(j))["fidelity"].get<double>(), 0.999);
  j = sigma_x_config();
  j["engine"] = json::parse(R"({"backend": "spatial", "A": 2000, "angle": 0.02, "speed": 0.05, "seed": 2})");
  const auto r = run(parse_config(j));
  EXPECT_GE(r["fidelity"].get<double>(), 0.97);
  EXPECT_GT(r["spatial"]["r0"].get<double>(), 0.0);
}

TEST(Run, WritesTrajectoryReportAndFrames) {
  auto j = sigma_x_config();
  j["output"] = json::parse(R"({"snapshot_interval": 50, "frames": true, "frame_size": 32})");
  auto c = parse_config(j);
  c.output.dir = scratch("outputs");
  run(c);
  std::ifstream traj(c.output.dir / "trajectory.jsonl");
  std::vector<json> lines;
  for (std::string line; std::getline(traj, line);) lines.push_back(json::parse(line));
  // ticks 0, 50, 100, 150 and the final 158
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines.front()["tick"], 0);
  EXPECT_EQ(lines.back()["tick"], 158);
  EXPECT_NEAR(lines.back()["time"].get<double>(), pi / 2, 1e-12);
  for (const auto& l : lines) {
    EXPECT_EQ(l["counts"].size(), 8u);
    EXPECT_EQ(l["state"].size(), 2u);
  }
  const auto report = read_json_file(c.output.dir / "report.json");
  EXPECT_TRUE(report.contains("fidelity"));

  const std::string ppm = slurp(c.output.dir / "frames" / "0004.ppm");
  const std::string header = "P6\n32 32\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 32 * 32 * 3);
  EXPECT_EQ(ppm.substr(0, header.size()), header);
  EXPECT_FALSE(fs::exists(c.output.dir / "frames" / "0005.ppm"));
}

TEST(Run, SpatialFramesShowTheMembraneAndQuanta) {
  auto j = sigma_x_config();
  j["t"] = 0.2;
  j["engine"] = json::parse(R"({"backend": "spatial", "A": 1000, "angle": 0.02, "speed": 0.05})");
  j["output"] = json::parse(R"({"snapshot_interval": 5, "frames": true, "frame_size": 64})");
  auto c = parse_config(j);
  c.output.dir = scratch("spatial_frames");
  run(c);
  const std::string ppm = slurp(c.output.dir / "frames" / "0001.ppm");
  const auto body = ppm.substr(std::string("P6\n64 64\n255\n").size());
  std::size_t gray = 0, red = 0;
  for (std::size_t k = 0; k + 2 < body.size(); k += 3) {
    const auto r = static_cast<unsigned char>(body[k]), g = static_cast<unsigned char>(body[k + 1]);
    gray += r == 90 && g == 90;
    red += r == 220 && g == 50;
  }
  EXPECT_GT(gray, 100u);
  EXPECT_GT(red, 0u);
}

TEST(Run, SameSeedGivesByteIdenticalTrajectories) {
  auto c = parse_config(sigma_x_config());
  const auto first = scratch("det_a");
  c.output.dir = first;
  run(c);
  c.output.dir = scratch("det_b");
  run(c);
  const auto a = slurp(first / "trajectory.jsonl");
  const auto b = slurp(c.output.dir / "trajectory.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  c.engine.seed = 4;
  c.output.dir = scratch("det_c");
  run(c);
  EXPECT_NE(a, slurp(c.output.dir / "trajectory.jsonl"));
}

TEST(Run, MeasureHistogramFollowsBornWeights) {
  const auto c = parse_config(json::parse(R"({
    "scenario": "measure",
    "hamiltonian": [[0, 0], [0, 0]],
    "initial": [0.6, 0.8],
    "engine": {"A": 1000, "seed": 9},
    "measure": {"trials": 4000}
  })"));
  const auto r = run(c);
  const auto hist = r["histogram"].get<std::vector<std::uint64_t>>();
  ASSERT_EQ(hist.size(), 2u);
  EXPECT_EQ(hist[0] + hist[1], 4000u);
  // Pearson statistic against (0.36, 0.64); 99th percentile of chi2(1) is 6.6349
  const double e0 = 0.36 * 4000, e1 = 0.64 * 4000;
  const double stat = std::pow(hist[0] - e0, 2) / e0 + std::pow(hist[1] - e1, 2) / e1;
  EXPECT_NEAR(r["chi_square"]["statistic"].get<double>(), stat, 1e-9);
  EXPECT_LT(stat, 6.6349);
  EXPECT_TRUE(r["chi_square"]["pass"].get<bool>());
}

TEST(Run, MultiEntanglesAndReportsReducedStates) {
  const auto c = parse_config(json::parse(R"({
    "scenario": "multi",
    "hamiltonian": [[0, 0, 0, -1], [0, 0, -1, 0], [0, -1, 0, 0], [-1, 0, 0, 0]],
    "t": 0.7853981633974483,
    "engine": {"A": 10000, "angle": 0.01, "seed": 5},
    "multi": {"particles": [[1, 0], [1, 0]]}
  })"));
  const auto r = run(c);
  EXPECT_GE(r["fidelity"].get<double>(), 0.98);
  // (|00> + i|11>)/sqrt2 has maximally mixed marginals
  for (std::size_t p = 0; p < 2; ++p) {
    const auto rho = matrix_from_json(r["reduced_density_matrices"][p], "rho");
    EXPECT_NEAR(rho(0, 0).real(), 0.5, 0.02);
    EXPECT_NEAR(rho(1, 1).real(), 0.5, 0.02);
    EXPECT_NEAR(std::abs(rho(0, 1)), 0.0, 0.02);
  }
}

TEST(Run, FermionsFromDistinctStatesAntisymmetrize) {
  const auto c = parse_config(json::parse(R"({
    "scenario": "multi",
    "hamiltonian": [[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]],
    "engine": {"A": 40000, "seed": 2},
    "multi": {"particles": [[1, 0], [0, 1]], "statistics": "fermion"}
  })"));
  const auto r = run(c);
  EXPECT_TRUE(r["exchange"]["converged"].get<bool>());
  EXPECT_LE(r["swap_defect"].get<double>(), 0.02);
  EXPECT_GE(r["fidelity"].get<double>(), 0.99);
}

TEST(Faulty, RejectsTooFewWorkersAndWrongBackend) {
  const Bubble b = bubble_from_state(basis_state(2, 0), 500);
  CMatrix h(2, 2);
  h << 0, -1, -1, 0;
  EngineConfig cfg;
  cfg.backend = Backend::spatial;
  FaultyConfig f;
  f.workers = 3;
  try {
    run_partitioned_faulty(b, h, 0.1, cfg, f);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooFewWorkers);
  }
  f.workers = 4;
  cfg.backend = Backend::wellmixed;
  EXPECT_THROW(run_partitioned_faulty(b, h, 0.1, cfg, f), Error);
}

TEST(Faulty, SweepReportsPairedDistances) {
  const Bubble b = bubble_from_state(basis_state(2, 0), 2000);
  CMatrix h(2, 2);
  h << 0, -1, -1, 0;
  EngineConfig cfg = EngineConfig::matched(1.0, 2000, 0.02);
  cfg.backend = Backend::spatial;
  cfg.speed = 0.05;
  FaultyConfig f;
  f.workers = 4;
  f.eps = {0.25, 0.0};
  f.seeds = 2;
  std::vector<double> seen;
  const auto r = run_partitioned_faulty(b, h, 0.4, cfg, f, [&](double, std::uint64_t, const std::vector<std::uint32_t>&, double d) {
    seen.push_back(d);
  });
  ASSERT_EQ(r.points.size(), 2u);
  EXPECT_EQ(r.points[0].eps, 0.0);
  EXPECT_EQ(r.points[1].hung, 1u);
  EXPECT_TRUE(r.serial_identical);
  EXPECT_TRUE(r.zero_identical);
  EXPECT_EQ(r.points[0].distance, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(seen.size(), 4u);
  for (double d : r.points[1].distance) {
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
  // two points: the fit is exact
  EXPECT_NEAR(r.max_residual, 0.0, 1e-12);
  EXPECT_NEAR(r.c, r.points[1].median / 0.25, 1e-12);
}

TEST(Faulty, TotalVariationAndMedian) {
  EXPECT_DOUBLE_EQ(total_variation({0.5, 0.5}, {1.0, 0.0}), 0.5);
  EXPECT_DOUBLE_EQ(total_variation({0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}), 0.0);
  EXPECT_DOUBLE_EQ(median_of({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median_of({4, 1, 3, 2}), 2.5);
}

TEST(Compile, GoldenFilesForTheThreeExamples) {
  for (const char* name : {"minus_sigma_x", "minus_sigma_y", "minus_sigma_z"}) {
    const fs::path dir = AQ_TEST_DATA;
    const auto h = matrix_from_json(read_json_file(dir / (std::string(name) + ".json")), name);
    EXPECT_EQ(compile_json(h), read_json_file(dir / (std::string("compiled_") + name + ".json"))) << name;
  }
}

TEST(Compile, SigmaYSecondListUsesTheDerivedRule) {
  const auto golden = read_json_file(fs::path(AQ_TEST_DATA) / "compiled_minus_sigma_y.json");
  const auto rules = golden["blocks"][0]["rules"].get<std::vector<std::string>>();
  EXPECT_NE(std::find(rules.begin(), rules.end(), "b0+, b1+ -> b0+, b0+"), rules.end());
  EXPECT_EQ(std::find(rules.begin(), rules.end(), "b1+, b1+ -> b0+, b0+"), rules.end());
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  write_json_file(dir / "ok.json", sigma_x_config());
  EXPECT_EQ(cli("evolve --config " + (dir / "ok.json").string() + " --out " + (dir / "out").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "trajectory.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));

  auto bad = sigma_x_config();
  bad["engine"]["backend"] = "quantum";
  write_json_file(dir / "bad.json", bad);
  EXPECT_EQ(cli("evolve --config " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(cli("measure --config " + (dir / "ok.json").string()), 2);  // scenario mismatch
  EXPECT_EQ(cli("evolve"), 2);

  const auto pauli = json::parse(R"({
    "scenario": "multi",
    "hamiltonian": [[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]],
    "engine": {"A": 1000},
    "multi": {"particles": [[1, 0], [1, 0]], "statistics": "fermion"}
  })");
  write_json_file(dir / "pauli.json", pauli);
  EXPECT_EQ(cli("multi --config " + (dir / "pauli.json").string()), 3);

  EXPECT_EQ(cli("compile --config " + (fs::path(AQ_TEST_DATA) / "minus_sigma_x.json").string() + " --out " + (dir / "c").string()), 0);
  EXPECT_EQ(read_json_file(dir / "c" / "compiled.json"), read_json_file(fs::path(AQ_TEST_DATA) / "compiled_minus_sigma_x.json"));
}

TEST(Cli, SeedFlagOverridesTheConfig) {
  const auto dir = scratch("cli_seed");
  fs::create_directories(dir);
  write_json_file(dir / "ok.json", sigma_x_config());
  ASSERT_EQ(cli("evolve --config " + (dir / "ok.json").string() + " --seed 3 --out " + (dir / "a").string()), 0);
  ASSERT_EQ(cli("evolve --config " + (dir / "ok.json").string() + " --seed 8 --out " + (dir / "b").string()), 0);
  auto c = parse_config(sigma_x_config());
  c.output.dir = dir / "lib";
  run(c);
  EXPECT_EQ(slurp(dir / "a" / "trajectory.jsonl"), slurp(dir / "lib" / "trajectory.jsonl"));
  EXPECT_NE(slurp(dir / "b" / "trajectory.jsonl"), slurp(dir / "lib" / "trajectory.jsonl"));
}

TEST(Exit, CodesSplitConfigurationFromNumerics) {
  EXPECT_EQ(exit_code(ErrorKind::ConfigError), 2);
  EXPECT_EQ(exit_code(ErrorKind::IoError), 2);
  EXPECT_EQ(exit_code(ErrorKind::TooFewWorkers), 2);
  EXPECT_EQ(exit_code(ErrorKind::CountOverflow), 3);
  EXPECT_EQ(exit_code(ErrorKind::AllCountsZero), 3);
  EXPECT_EQ(exit_code(ErrorKind::Timeout), 3);
}
