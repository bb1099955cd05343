#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aq/engine.hpp"
#include "aq/io.hpp"
#include "aq/measurement.hpp"
#include "aq/membrane.hpp"
#include "aq/multiparticle.hpp"
#include "aq/oracle.hpp"
#include "aq/spatial.hpp"

namespace aq {

enum class Scenario { single, measure, multi, faulty };

struct OutputConfig {
  std::filesystem::path dir;  // empty: nothing written
  std::uint64_t snapshot_interval = 1;
  bool frames = false;
  int frame_size = 128;
};

struct MembraneRun {
  bool enabled = false;
  GrainLayout layout;
  double interval = 0.1;
  MembraneConfig config;
};

struct MeasureRun {
  std::uint64_t trials = 1000;
  MeasureProtocol protocol = MeasureProtocol::paired;
  std::uint64_t replenish_A = 0;
  double alpha = 0.01;
};

struct MultiRun {
  std::vector<StateVector> particles;
  Statistics statistics = Statistics::distinct;
  std::vector<Link> links;
  ExchangeConfig exchange;
  std::optional<DecohereConfig> decohere;
};

struct FaultyConfig {
  std::uint32_t workers = 8;
  std::vector<double> eps{0.0, 0.02, 0.05, 0.1};
  std::uint64_t seeds = 20;
  std::uint64_t hang_seed = 1;
  std::uint64_t channel_capacity = std::uint64_t{1} << 20;
  std::uint64_t hang_tick = 0;
  bool threads = true;
};

struct RunConfig {
  Scenario scenario = Scenario::single;
  CMatrix hamiltonian;
  StateVector initial;
  double t = 0;
  EngineConfig engine;
  OutputConfig output;
  MembraneRun membrane;
  MeasureRun measure;
  MultiRun multi;
  FaultyConfig faulty;
};

// ---------------------------------------------------------------------------
// configuration

namespace detail {

inline void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) fail(ErrorKind::ConfigError, where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; }))
      fail(ErrorKind::ConfigError, where + "." + k + ": unknown key");
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::ConfigError, where + "." + key + ": wrong type");
  }
}

template <class T>
T positive(const json& j, const char* key, const std::string& where, T fallback) {
  const T v = field<T>(j, key, where, fallback);
  if (!(v > 0)) fail(ErrorKind::ConfigError, where + "." + key + ": must be positive");
  return v;
}

inline Scenario scenario_from(const std::string& s, const std::string& where) {
  if (s == "single") return Scenario::single;
  if (s == "measure") return Scenario::measure;
  if (s == "multi") return Scenario::multi;
  if (s == "faulty") return Scenario::faulty;
  fail(ErrorKind::ConfigError, where + ": unknown scenario '" + s + "'");
}

inline EngineConfig engine_from(const json& j, const std::string& where) {
  only_keys(j, where, {"backend", "A", "omega", "gamma0", "angle", "dt", "seed", "replenish", "mode", "trotter_dt",
                       "stability", "speed", "neighbors", "r0", "bubble_radius", "staged"});
  EngineConfig c;
  const auto backend = field<std::string>(j, "backend", where, "wellmixed");
  if (backend == "wellmixed") c.backend = Backend::wellmixed;
  else if (backend == "spatial") c.backend = Backend::spatial;
  else if (backend == "meanfield") c.backend = Backend::meanfield;
  else fail(ErrorKind::ConfigError, where + ".backend: unknown backend '" + backend + "'");
  c.A = positive<std::uint64_t>(j, "A", where, 10000);
  const double omega = positive<double>(j, "omega", where, 1.0);
  c.gamma0 = j.contains("gamma0") ? positive<double>(j, "gamma0", where, 1.0) : omega / static_cast<double>(c.A);
  if (j.contains("dt")) c.dt = positive<double>(j, "dt", where, 0.01);
  else c.dt = positive<double>(j, "angle", where, 0.01) / c.omega();
  c.seed = field<std::uint64_t>(j, "seed", where, 1);
  c.replenish = field<bool>(j, "replenish", where, true);
  const auto mode = field<std::string>(j, "mode", where, "division");
  if (mode == "division") c.mode = ScheduleMode::division;
  else if (mode == "trotter") c.mode = ScheduleMode::trotter;
  else fail(ErrorKind::ConfigError, where + ".mode: expected division or trotter");
  c.trotter_dt = positive<double>(j, "trotter_dt", where, c.trotter_dt);
  c.stability = positive<double>(j, "stability", where, c.stability);
  c.speed = positive<double>(j, "speed", where, c.speed);
  c.neighbors = positive<double>(j, "neighbors", where, c.neighbors);
  c.r0 = field<double>(j, "r0", where, 0.0);
  if (c.r0 < 0) fail(ErrorKind::ConfigError, where + ".r0: must not be negative");
  c.bubble_radius = positive<double>(j, "bubble_radius", where, c.bubble_radius);
  c.staged = field<bool>(j, "staged", where, true);
  return c;
}

inline Statistics statistics_from(const std::string& s, const std::string& where) {
  if (s == "distinct") return Statistics::distinct;
  if (s == "boson") return Statistics::boson;
  if (s == "fermion") return Statistics::fermion;
  fail(ErrorKind::ConfigError, where + ": expected distinct, boson or fermion");
}

inline std::vector<Link> links_from(const json& j, const std::string& where) {
  std::vector<Link> out;
  if (!j.is_array()) fail(ErrorKind::ConfigError, where + ": expected an array of [a, b] pairs");
  for (std::size_t k = 0; k < j.size(); ++k) {
    const auto& p = j[k];
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_unsigned() || !p[1].is_number_unsigned())
      fail(ErrorKind::ConfigError, where + "[" + std::to_string(k) + "]: expected [a, b]");
    out.push_back({p[0].get<std::uint32_t>(), p[1].get<std::uint32_t>()});
  }
  return out;
}

}  // namespace detail

/// Parse a run configuration; relative file references resolve against base.
inline RunConfig parse_config(const json& j, const std::filesystem::path& base = {}) {
  using namespace detail;
  only_keys(j, "config", {"scenario", "hamiltonian", "hamiltonian_file", "initial", "t", "engine", "output", "membrane",
                          "measure", "multi", "faulty"});
  RunConfig c;
  c.scenario = scenario_from(field<std::string>(j, "scenario", "config", "single"), "config.scenario");

  if (j.contains("hamiltonian") && j.contains("hamiltonian_file"))
    fail(ErrorKind::ConfigError, "config: give hamiltonian or hamiltonian_file, not both");
  if (j.contains("hamiltonian")) {
    c.hamiltonian = matrix_from_json(j["hamiltonian"], "config.hamiltonian");
  } else if (j.contains("hamiltonian_file")) {
    const auto p = base / field<std::string>(j, "hamiltonian_file", "config", "");
    const json h = read_json_file(p);
    c.hamiltonian = matrix_from_json(h.is_object() && h.contains("hamiltonian") ? h["hamiltonian"] : h, p.string());
  } else {
    fail(ErrorKind::ConfigError, "config.hamiltonian: missing");
  }
  try {
    oracle::require_hermitian(c.hamiltonian);
  } catch (const Error&) {
    fail(ErrorKind::ConfigError, "config.hamiltonian: not Hermitian");
  }
  const auto dim = static_cast<std::uint32_t>(c.hamiltonian.rows());

  c.t = field<double>(j, "t", "config", 0.0);
  if (!(c.t >= 0)) fail(ErrorKind::ConfigError, "config.t: must not be negative");
  c.engine = engine_from(j.value("engine", json::object()), "config.engine");

  const json out = j.value("output", json::object());
  only_keys(out, "config.output", {"snapshot_interval", "frames", "frame_size"});
  c.output.snapshot_interval = positive<std::uint64_t>(out, "snapshot_interval", "config.output", 1);
  c.output.frames = field<bool>(out, "frames", "config.output", false);
  c.output.frame_size = positive<int>(out, "frame_size", "config.output", 128);

  if (c.scenario == Scenario::multi) {
    const json m = j.value("multi", json::object());
    only_keys(m, "config.multi", {"particles", "statistics", "links", "exchange", "decohere"});
    if (!m.contains("particles") || !m["particles"].is_array() || m["particles"].size() < 2)
      fail(ErrorKind::ConfigError, "config.multi.particles: need at least two initial states");
    std::optional<Eigen::Index> N;
    for (std::size_t k = 0; k < m["particles"].size(); ++k) {
      const std::string at = "config.multi.particles[" + std::to_string(k) + "]";
      auto psi = state_from_json(m["particles"][k], at);
      if (N && psi.size() != *N) fail(ErrorKind::ConfigError, at + ": particles differ in dimension");
      N = psi.size();
      c.multi.particles.push_back(std::move(psi));
    }
    std::uint64_t joint = 1;
    for (std::size_t k = 0; k < c.multi.particles.size(); ++k) joint *= static_cast<std::uint64_t>(*N);
    if (joint != dim) fail(ErrorKind::ConfigError, "config.hamiltonian: expected the joint dimension N^n");
    c.multi.statistics = statistics_from(field<std::string>(m, "statistics", "config.multi", "distinct"),
                                         "config.multi.statistics");
    if (m.contains("links")) c.multi.links = links_from(m["links"], "config.multi.links");
    const json ex = m.value("exchange", json::object());
    only_keys(ex, "config.multi.exchange", {"p", "max_ticks", "checkpoint", "patience"});
    c.multi.exchange.p = positive<double>(ex, "p", "config.multi.exchange", c.multi.exchange.p);
    c.multi.exchange.max_ticks = positive<std::uint64_t>(ex, "max_ticks", "config.multi.exchange", c.multi.exchange.max_ticks);
    c.multi.exchange.checkpoint = positive<std::uint64_t>(ex, "checkpoint", "config.multi.exchange", c.multi.exchange.checkpoint);
    c.multi.exchange.patience = positive<int>(ex, "patience", "config.multi.exchange", c.multi.exchange.patience);
    if (m.contains("decohere")) {
      const json d = m["decohere"];
      only_keys(d, "config.multi.decohere", {"way", "touches", "eps0", "eps1", "spacing"});
      DecohereConfig dc;
      const auto way = field<std::string>(d, "way", "config.multi.decohere", "bubble");
      if (way == "bubble") dc.way = DecoherenceWay::bubble_connectivity;
      else if (way == "support") dc.way = DecoherenceWay::support_connectivity;
      else fail(ErrorKind::ConfigError, "config.multi.decohere.way: expected bubble or support");
      if (d.contains("touches")) dc.touches = links_from(d["touches"], "config.multi.decohere.touches");
      dc.eps0 = field<double>(d, "eps0", "config.multi.decohere", 0.0);
      dc.eps1 = field<double>(d, "eps1", "config.multi.decohere", 0.0);
      dc.spacing = positive<double>(d, "spacing", "config.multi.decohere", 1.0);
      c.multi.decohere = dc;
    }
  } else {
    c.initial = j.contains("initial") ? state_from_json(j["initial"], "config.initial") : basis_state(dim, 0);
    if (c.initial.size() != static_cast<Eigen::Index>(dim))
      fail(ErrorKind::ConfigError, "config.initial: dimension differs from the Hamiltonian");
    if (c.initial.norm() == 0) fail(ErrorKind::ConfigError, "config.initial: zero vector");
  }

  if (j.contains("membrane")) {
    const json m = j["membrane"];
    only_keys(m, "config.membrane", {"dims", "spacing", "interval", "X0", "X1", "retract_first", "seed_total"});
    auto dims = field<std::vector<std::uint32_t>>(m, "dims", "config.membrane", {dim, 1, 1});
    if (dims.size() != 3 || static_cast<std::uint64_t>(dims[0]) * dims[1] * dims[2] != dim)
      fail(ErrorKind::ConfigError, "config.membrane.dims: expected three extents whose product is the dimension");
    c.membrane.enabled = true;
    c.membrane.layout.dims = {dims[0], dims[1], dims[2]};
    c.membrane.layout.spacing = positive<double>(m, "spacing", "config.membrane", 1.0);
    c.membrane.interval = positive<double>(m, "interval", "config.membrane", 0.1);
    c.membrane.config.X0 = field<double>(m, "X0", "config.membrane", c.membrane.config.X0);
    c.membrane.config.X1 = field<double>(m, "X1", "config.membrane", c.membrane.config.X1);
    c.membrane.config.retract_first = field<bool>(m, "retract_first", "config.membrane", true);
    c.membrane.config.seed_total = field<std::uint64_t>(m, "seed_total", "config.membrane", c.membrane.config.seed_total);
    if (c.membrane.config.X0 > c.membrane.config.X1) fail(ErrorKind::ConfigError, "config.membrane: X0 exceeds X1");
  }

  const json ms = j.value("measure", json::object());
  only_keys(ms, "config.measure", {"trials", "protocol", "replenish_A", "alpha"});
  c.measure.trials = positive<std::uint64_t>(ms, "trials", "config.measure", c.measure.trials);
  const auto protocol = field<std::string>(ms, "protocol", "config.measure", "paired");
  if (protocol == "paired") c.measure.protocol = MeasureProtocol::paired;
  else if (protocol == "sliding") c.measure.protocol = MeasureProtocol::sliding;
  else fail(ErrorKind::ConfigError, "config.measure.protocol: expected paired or sliding");
  c.measure.replenish_A = field<std::uint64_t>(ms, "replenish_A", "config.measure", 0);
  c.measure.alpha = positive<double>(ms, "alpha", "config.measure", 0.01);

  const json f = j.value("faulty", json::object());
  only_keys(f, "config.faulty", {"workers", "eps", "seeds", "hang_seed", "channel_capacity", "hang_tick", "threads"});
  c.faulty.workers = field<std::uint32_t>(f, "workers", "config.faulty", c.faulty.workers);
  c.faulty.eps = field<std::vector<double>>(f, "eps", "config.faulty", c.faulty.eps);
  for (double e : c.faulty.eps)
    if (!(e >= 0 && e < 0.5)) fail(ErrorKind::ConfigError, "config.faulty.eps: values must lie in [0, 0.5)");
  c.faulty.seeds = positive<std::uint64_t>(f, "seeds", "config.faulty", c.faulty.seeds);
  c.faulty.hang_seed = field<std::uint64_t>(f, "hang_seed", "config.faulty", c.faulty.hang_seed);
  c.faulty.channel_capacity = positive<std::uint64_t>(f, "channel_capacity", "config.faulty", c.faulty.channel_capacity);
  c.faulty.hang_tick = field<std::uint64_t>(f, "hang_tick", "config.faulty", 0);
  c.faulty.threads = field<bool>(f, "threads", "config.faulty", true);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& p) { return parse_config(read_json_file(p), p.parent_path()); }

// ---------------------------------------------------------------------------
// partitioned fault sweep

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) fail(ErrorKind::DimensionMismatch, "distributions differ in length");
  double s = 0;
  for (std::size_t k = 0; k < p.size(); ++k) s += std::abs(p[k] - q[k]);
  return 0.5 * s;
}

inline bool same_quanta(const std::vector<AmplitudeQuantum>& a, const std::vector<AmplitudeQuantum>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].id != b[k].id || a[k].type != b[k].type || !(a[k].position == b[k].position) || !(a[k].velocity == b[k].velocity))
      return false;
  }
  return true;
}

struct DegradationPoint {
  double eps = 0;
  std::uint32_t hung = 0;  // workers hung at the first seed
  std::vector<double> distance;  // per seed
  double median = 0;
};

struct DegradationReport {
  std::uint32_t workers = 0;
  std::vector<DegradationPoint> points;
  bool serial_identical = true;  // fault-free partitioned == single worker
  bool zero_identical = true;    // eps = 0 faulty == fault-free partitioned
  double slope = 0, intercept = 0, max_residual = 0;  // least squares over (eps, median)
  double c = 0;                  // median / eps at the smallest positive eps
  bool bound_holds = true;       // every median <= c eps + 0.01
  bool monotone = true;          // medians nondecreasing in eps
  double seconds = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Fault-free and faulty partitioned runs per seed and hang fraction. Seed s
/// uses engine seed cfg.seed + s and hang seed f.hang_seed + s; hang sets
/// that come out empty reuse the eps = 0 run of the same seed.
inline DegradationReport run_partitioned_faulty(
    const Bubble& b, const CMatrix& h, double t, const EngineConfig& cfg, const FaultyConfig& f,
    const std::function<void(double eps, std::uint64_t seed, const std::vector<std::uint32_t>& hung, double distance)>& observe = {}) {
  if (f.workers < 4) fail(ErrorKind::TooFewWorkers, "the fault experiment needs at least four workers");
  if (cfg.backend != Backend::spatial) fail(ErrorKind::ConfigError, "the fault experiment runs the spatial backend");
  for (double e : f.eps)
    if (!(e >= 0 && e < 0.5)) fail(ErrorKind::ConfigError, "hang fraction must lie in [0, 0.5)");
  const auto start = std::chrono::steady_clock::now();

  DegradationReport rep;
  rep.workers = f.workers;
  std::vector<double> eps = f.eps;
  std::sort(eps.begin(), eps.end());
  eps.erase(std::unique(eps.begin(), eps.end()), eps.end());
  for (double e : eps) rep.points.push_back({e, static_cast<std::uint32_t>(choose_hung(f.workers, e, f.hang_seed).size()), {}, 0});

  PartitionConfig part;
  part.workers = f.workers;
  part.channel_capacity = f.channel_capacity;
  part.hang_tick = f.hang_tick;
  part.threads = f.threads;

  for (std::uint64_t s = 0; s < f.seeds; ++s) {
    EngineConfig c = cfg;
    c.seed = cfg.seed + s;
    const Bubble base = evolve_spatial(b, h, t, c, part);
    const auto p = probability_weights(base);
    if (s == 0) {
      PartitionConfig serial = part;
      serial.workers = 1;
      rep.serial_identical = same_quanta(evolve_spatial(b, h, t, c, serial).quanta, base.quanta);
    }
    std::optional<Bubble> clean;  // faulty run with an empty hang set
    for (auto& pt : rep.points) {
      PartitionConfig faulty = part;
      faulty.hung = choose_hung(f.workers, pt.eps, f.hang_seed + s);
      double d = 0;
      if (faulty.hung.empty()) {
        if (!clean) clean = evolve_spatial(b, h, t, c, faulty);
        if (pt.eps == 0) rep.zero_identical = rep.zero_identical && same_quanta(clean->quanta, base.quanta);
        d = total_variation(p, probability_weights(*clean));
      } else {
        d = total_variation(p, probability_weights(evolve_spatial(b, h, t, c, faulty)));
      }
      pt.distance.push_back(d);
      if (observe) observe(pt.eps, c.seed, faulty.hung, d);
    }
  }

  for (auto& pt : rep.points) pt.median = median_of(pt.distance);
  const auto n = static_cast<double>(rep.points.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& pt : rep.points) {
    sx += pt.eps;
    sy += pt.median;
    sxx += pt.eps * pt.eps;
    sxy += pt.eps * pt.median;
  }
  const double den = n * sxx - sx * sx;
  rep.slope = den > 0 ? (n * sxy - sx * sy) / den : 0;
  rep.intercept = n > 0 ? (sy - rep.slope * sx) / n : 0;
  for (const auto& pt : rep.points)
    rep.max_residual = std::max(rep.max_residual, std::abs(pt.median - (rep.slope * pt.eps + rep.intercept)));
  for (const auto& pt : rep.points) {
    if (pt.eps > 0) {
      rep.c = pt.median / pt.eps;
      break;
    }
  }
  for (std::size_t k = 0; k < rep.points.size(); ++k) {
    rep.bound_holds = rep.bound_holds && rep.points[k].median <= rep.c * rep.points[k].eps + 0.01 + 1e-12;
    if (k > 0) rep.monotone = rep.monotone && rep.points[k].median >= rep.points[k - 1].median;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

inline json degradation_json(const DegradationReport& r) {
  json pts = json::array();
  for (const auto& p : r.points) pts.push_back({{"eps", p.eps}, {"hung_workers", p.hung}, {"median_tv", p.median}, {"tv", p.distance}});
  return {{"workers", r.workers},
          {"points", pts},
          {"serial_identical", r.serial_identical},
          {"zero_identical", r.zero_identical},
          {"fit", {{"slope", r.slope}, {"intercept", r.intercept}, {"max_residual", r.max_residual}}},
          {"c", r.c},
          {"bound_holds", r.bound_holds},
          {"monotone", r.monotone},
          {"seconds", r.seconds}};
}

// ---------------------------------------------------------------------------
// scenarios

namespace detail {

struct Sink {
  JsonLines trajectory;
  std::filesystem::path frames;
  std::uint64_t frame = 0;

  explicit Sink(const OutputConfig& o) {
    if (o.dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(o.dir, ec);
    if (ec) fail(ErrorKind::IoError, "cannot create " + o.dir.string() + ": " + ec.message());
    trajectory = JsonLines(o.dir / "trajectory.jsonl");
    if (o.frames) {
      frames = o.dir / "frames";
      std::filesystem::create_directories(frames, ec);
      if (ec) fail(ErrorKind::IoError, "cannot create " + frames.string() + ": " + ec.message());
    }
  }
  void image(const Image& img) {
    if (!frames.empty()) write_ppm(frames / frame_name(frame++), img);
  }
};

inline json counts_json(const std::vector<std::uint64_t>& c) { return json(c); }

inline StateVector readout(const std::vector<std::uint64_t>& species, double grain) {
  StateVector v = amplitudes_from_net(net_counts(species), grain);
  const double n = v.norm();
  return n > 0 ? StateVector(v / n) : v;
}

inline json run_single(const RunConfig& c, Sink& sink) {
  const StateVector psi0 = c.initial / c.initial.norm();
  Bubble b = bubble_from_state(psi0, c.engine.A);
  const StateVector exact = oracle::exact_propagate(c.hamiltonian, psi0, c.t);
  json report = {{"scenario", "single"}, {"backend", to_string(c.engine.backend)}, {"t", c.t}, {"seed", c.engine.seed}};
  const bool frames = !sink.frames.empty();
  const int size = c.output.frame_size;

  if (c.membrane.enabled) {
    attach_layout(b, c.membrane.layout);
    std::uint64_t k = 0;
    const auto observe = [&](double time, const Bubble& cur) {
      const StateVector ex = oracle::exact_propagate(c.hamiltonian, psi0, time);
      const Vec3 p = bubble_centroid(cur), q = centroid_of(ex, c.membrane.layout);
      sink.trajectory.write({{"tick", k}, {"time", time}, {"counts", species_counts(cur)}, {"state", state_json(state_from_bubble(cur))},
                             {"centroid", {p.x, p.y, p.z}}, {"oracle_centroid", {q.x, q.y, q.z}}});
      if (frames) sink.image(bar_chart(probability_weights(cur), size, size));
      ++k;
    };
    const Bubble out = evolve_with_membrane(b, c.hamiltonian, c.t, c.membrane.interval, c.engine, c.membrane.config, observe);
    const StateVector got = state_from_bubble(out);
    report["final_state"] = state_json(got);
    report["exact_state"] = state_json(exact);
    report["fidelity"] = oracle::fidelity(got, exact);
    report["probabilities"] = probability_weights(out);
    return report;
  }

  const auto every = c.output.snapshot_interval;
  std::uint64_t seen = 0, recorded = 0;
  const auto record = [&](std::uint64_t tick, double time, const std::vector<std::uint64_t>& species,
                          const std::function<std::vector<AmplitudeQuantum>()>& quanta) {
    sink.trajectory.write({{"tick", tick}, {"time", time}, {"counts", species}, {"state", state_json(readout(species, b.grain))}});
    if (frames) {
      if (quanta) sink.image(cross_section(quanta(), c.engine.bubble_radius, size, 0.1 * c.engine.bubble_radius));
      else sink.image(bar_chart(probability_weights(net_counts(species)), size, size));
    }
    recorded = tick;
  };
  record(0, 0.0, species_counts(b), {});
  const TickObserver observe = [&](const TickInfo& info) {
    seen = info.tick;
    if (info.tick % every == 0) record(info.tick, info.time, *info.species, info.quanta);
  };
  SpatialReport sr;
  const bool spatial = c.engine.backend == Backend::spatial;
  Bubble out = spatial ? evolve_spatial(b, c.hamiltonian, c.t, c.engine, {}, observe, &sr)
                       : evolve(b, c.hamiltonian, c.t, c.engine, observe);
  const auto species = species_counts(out);
  // the mean-field backend integrates without ticks; its single record is the end point
  if (c.t > 0 && seen == 0) seen = static_cast<std::uint64_t>(std::ceil(c.t / (c.engine.omega() * c.engine.dt) - 1e-9));
  if (seen != recorded) {
    std::function<std::vector<AmplitudeQuantum>()> quanta;
    if (spatial) quanta = [&out] { return out.quanta; };
    record(seen, c.t, species, quanta);
  }

  const StateVector got = state_from_bubble(out);
  report["ticks"] = seen;
  report["final_state"] = state_json(got);
  report["exact_state"] = state_json(exact);
  report["fidelity"] = oracle::fidelity(got, exact);
  report["probabilities"] = probability_weights(out);
  report["counts"] = species;
  if (spatial)
    report["spatial"] = {{"r0", sr.r0}, {"angle", sr.angle}, {"scale", sr.scale}, {"ticks", sr.ticks}};
  return report;
}

inline json run_measure(const RunConfig& c, Sink& sink) {
  const StateVector psi0 = c.initial / c.initial.norm();
  const Bubble b = bubble_from_state(psi0, c.engine.A);
  const auto dim = static_cast<std::size_t>(b.dimension);
  std::vector<std::uint64_t> hist(dim, 0);
  MeasureConfig mc;
  mc.seed = c.engine.seed;
  mc.protocol = c.measure.protocol;
  mc.replenish_A = c.measure.replenish_A;
  for (std::uint64_t k = 0; k < c.measure.trials; ++k) {
    mc.trial = k;
    const auto rec = measure(b, mc).first;
    ++hist[rec.outcome];
    sink.trajectory.write({{"trial", k}, {"outcome", rec.outcome}, {"arrivals", rec.arrivals.size()}, {"ticks", rec.ticks_to_completion}});
  }
  std::vector<double> expected(dim);
  for (std::size_t j = 0; j < dim; ++j) expected[j] = std::norm(psi0[static_cast<Eigen::Index>(j)]) * static_cast<double>(c.measure.trials);
  const auto support = std::count_if(expected.begin(), expected.end(), [](double e) { return e > 0; });
  json chi_json = nullptr;  // undefined with a single possible outcome
  if (support >= 2) {
    const auto chi = oracle::chi_square_test(hist, expected, c.measure.alpha);
    chi_json = {{"statistic", chi.statistic}, {"critical", chi.critical}, {"dof", chi.dof}, {"alpha", c.measure.alpha}, {"pass", chi.pass}};
  }
  if (!sink.frames.empty()) {
    std::vector<double> freq(dim);
    for (std::size_t j = 0; j < dim; ++j) freq[j] = static_cast<double>(hist[j]) / static_cast<double>(c.measure.trials);
    sink.image(bar_chart(freq, c.output.frame_size, c.output.frame_size));
  }
  return {{"scenario", "measure"},
          {"trials", c.measure.trials},
          {"protocol", to_string(c.measure.protocol)},
          {"seed", c.engine.seed},
          {"histogram", hist},
          {"expected", expected},
          {"chi_square", chi_json}};
}

inline StateVector kron_all(const std::vector<StateVector>& parts) {
  StateVector out = StateVector::Ones(1);
  for (const auto& p : parts) {
    StateVector next(out.size() * p.size());
    for (Eigen::Index i = 0; i < out.size(); ++i)
      for (Eigen::Index j = 0; j < p.size(); ++j) next[i * p.size() + j] = out[i] * p[j];
    out = next;
  }
  return out;
}

/// Sum over slot permutations, signed for fermions.
inline StateVector symmetrize(const StateVector& psi, std::uint32_t n, std::uint32_t N, int s) {
  StateVector out = StateVector::Zero(psi.size());
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  do {
    int inversions = 0;
    for (std::uint32_t a = 0; a < n; ++a)
      for (std::uint32_t b = a + 1; b < n; ++b) inversions += perm[a] > perm[b];
    const double sign = (s < 0 && inversions % 2) ? -1.0 : 1.0;
    for (Eigen::Index idx = 0; idx < psi.size(); ++idx) {
      const auto d = joint_digits(static_cast<std::uint64_t>(idx), n, N);
      std::vector<std::uint32_t> e(n);
      for (std::uint32_t k = 0; k < n; ++k) e[k] = d[perm[k]];
      out[static_cast<Eigen::Index>(joint_index(e, N))] += sign * psi[idx];
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

inline json run_multi(const RunConfig& c, Sink& sink) {
  const auto& m = c.multi;
  const auto n = static_cast<std::uint32_t>(m.particles.size());
  const auto N = static_cast<std::uint32_t>(m.particles[0].size());
  std::vector<Bubble> bubbles;
  std::vector<StateVector> normed;
  for (const auto& p : m.particles) {
    normed.push_back(p / p.norm());
    bubbles.push_back(bubble_from_state(normed.back(), c.engine.A));
  }
  CouplingConfig cc;
  cc.links = m.links;
  cc.seed = c.engine.seed;
  cc.statistics = m.statistics;
  ChainSystem sys = couple_bubbles(bubbles, cc);

  json report = {{"scenario", "multi"}, {"particles", n}, {"N", N}, {"statistics", to_string(m.statistics)}, {"seed", c.engine.seed},
                 {"joint_total", sys.A}};
  StateVector psi0 = kron_all(normed);
  if (m.statistics != Statistics::distinct) {
    ExchangeConfig ex = m.exchange;
    ex.seed = c.engine.seed;
    const int s = m.statistics == Statistics::boson ? 1 : -1;
    psi0 = symmetrize(psi0, n, N, s);
    if (psi0.norm() < 1e-12) fail(ErrorKind::AllCountsZero, "the antisymmetrized initial state vanishes");
    const auto r = s > 0 ? exchange_bosons(sys, ex) : exchange_fermions(sys, ex);
    report["exchange"] = {{"ticks", r.ticks}, {"defect", r.defect}, {"converged", r.converged}};
  }
  psi0 /= psi0.norm();

  const auto every = c.output.snapshot_interval;
  const auto record = [&](std::uint64_t tick, double time, const ChainSystem& s) {
    json rho = json::array();
    for (std::uint32_t p = 0; p < n; ++p) rho.push_back(matrix_json(reduced_density_matrix(s, p)));
    sink.trajectory.write({{"tick", tick}, {"time", time}, {"chains", s.chains.size()}, {"state", state_json(joint_state_from_chains(s))},
                           {"rho", rho}});
    if (!sink.frames.empty()) {
      const StateVector psi = joint_state_from_chains(s);
      std::vector<double> w(static_cast<std::size_t>(psi.size()));
      for (Eigen::Index k = 0; k < psi.size(); ++k) w[static_cast<std::size_t>(k)] = std::norm(psi[k]);
      sink.image(bar_chart(w, c.output.frame_size, c.output.frame_size));
    }
  };
  record(0, 0.0, sys);
  std::uint64_t last = 0;
  double end = 0;
  evolve_chains(sys, c.hamiltonian, c.t, c.engine, [&](std::uint64_t tick, double time, const ChainSystem& s) {
    last = tick;
    end = time;
    if (tick % every == 0) record(tick, time, s);
  });
  if (last % every != 0) record(last, end, sys);

  const StateVector got = joint_state_from_chains(sys);
  const StateVector exact = oracle::exact_propagate(c.hamiltonian, psi0, c.t);
  report["ticks"] = last;
  report["final_state"] = state_json(got);
  report["exact_state"] = state_json(exact);
  report["fidelity"] = oracle::fidelity(got, exact);
  json rho = json::array();
  for (std::uint32_t p = 0; p < n; ++p) rho.push_back(matrix_json(reduced_density_matrix(sys, p)));
  report["reduced_density_matrices"] = rho;
  if (m.statistics != Statistics::distinct) report["swap_defect"] = swap_defect(got, n, N, m.statistics == Statistics::boson ? 1 : -1);

  if (m.decohere) {
    DecohereConfig d = *m.decohere;
    d.seed = c.engine.seed;
    d.A = c.engine.A;
    const auto res = decohere_components(sys, d);
    json parts = json::array();
    for (const auto& p : res.parts) {
      json e = {{"particles", p.particles}};
      if (p.bubble) e["state"] = state_json(state_from_bubble(*p.bubble));
      if (p.chains) e["state"] = state_json(joint_state_from_chains(*p.chains));
      parts.push_back(e);
    }
    report["decoherence"] = {{"parts", parts}, {"weights", res.weights}};
    if (res.chosen) report["decoherence"]["chosen"] = *res.chosen;
  }
  return report;
}

inline json run_faulty(const RunConfig& c, Sink& sink) {
  const StateVector psi0 = c.initial / c.initial.norm();
  const Bubble b = bubble_from_state(psi0, c.engine.A);
  const auto rep = run_partitioned_faulty(b, c.hamiltonian, c.t, c.engine, c.faulty,
                                          [&](double eps, std::uint64_t seed, const std::vector<std::uint32_t>& hung, double d) {
                                            sink.trajectory.write({{"eps", eps}, {"seed", seed}, {"hung", hung}, {"tv", d}});
                                          });
  json report = degradation_json(rep);
  report["scenario"] = "faulty";
  report["hang_seed"] = c.faulty.hang_seed;
  report["seeds"] = c.faulty.seeds;
  return report;
}

}  // namespace detail

/// Execute a scenario; writes trajectory.jsonl, report.json and frames under
/// the output directory when one is set. Returns the report.
inline json run(const RunConfig& c) {
  if (c.scenario == Scenario::faulty && c.engine.backend != Backend::spatial)
    fail(ErrorKind::ConfigError, "config.engine.backend: the faulty scenario needs spatial");
  detail::Sink sink(c.output);
  json report;
  switch (c.scenario) {
    case Scenario::single: report = detail::run_single(c, sink); break;
    case Scenario::measure: report = detail::run_measure(c, sink); break;
    case Scenario::multi: report = detail::run_multi(c, sink); break;
    case Scenario::faulty: report = detail::run_faulty(c, sink); break;
  }
  if (!c.output.dir.empty()) write_json_file(c.output.dir / "report.json", report);
  return report;
}

/// Decomposition and per-block reaction lists as structured records.
inline json compile_json(const CMatrix& h) {
  const auto d = pauli_decompose(h);
  json blocks = json::array();
  for (const auto& b : d) {
    json rules = json::array();
    for (const auto& r : reactions_for_block(b).rules) rules.push_back(to_string(r));
    blocks.push_back({{"i", b.i}, {"j", b.j}, {"kind", to_string(b.kind)}, {"coefficient", b.coefficient}, {"rules", rules}});
  }
  return {{"dimension", h.rows()}, {"blocks", blocks}};
}

/// CLI exit status for a failure kind: 2 for configuration, 3 for numerics.
inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::ConfigError:
    case ErrorKind::IoError:
    case ErrorKind::DimensionMismatch:
    case ErrorKind::UnsupportedKind:
    case ErrorKind::NotHermitian:
    case ErrorKind::TooFewWorkers:
      return 2;
    default:
      return 3;
  }
}

}  // namespace aq
