#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "aq/compiler.hpp"
#include "aq/core.hpp"
#include "aq/rng.hpp"

namespace aq {

enum class Backend { wellmixed, spatial, meanfield };

inline std::string to_string(Backend b) {
  switch (b) {
    case Backend::wellmixed: return "wellmixed";
    case Backend::spatial: return "spatial";
    case Backend::meanfield: return "meanfield";
  }
  return "?";
}

/// Time is measured in kinetic units; one unit of Hamiltonian time equals
/// omega = gamma0 * A kinetic units of rotation.
struct EngineConfig {
  Backend backend = Backend::wellmixed;
  double dt = 0.01;         // kinetic tick
  double gamma0 = 1e-4;     // pair-collision propensity per unit time
  std::uint64_t A = 10000;  // per-type total {x} held by replenishment
  bool replenish = true;
  std::uint64_t seed = 1;
  double r0 = 0.0;             // spatial: 0 selects the calibrated radius
  double bubble_radius = 1.0;  // spatial
  double speed = 0.1;          // spatial: |v| per tick in units of the radius
  double neighbors = 1.0;      // spatial: expected partners within a calibrated r0
  ScheduleMode mode = ScheduleMode::division;
  double trotter_dt = 0.01;  // Hamiltonian time per Trotter cycle slot
  double stability = 0.05;   // max rotation angle per tick
  std::uint64_t count_cap = std::uint64_t{1} << 48;
  bool staged = true;  // false: every conversion sees start-of-tick counts
  std::vector<std::uint8_t> active_states;  // replenish only these states; empty means all

  double omega() const { return gamma0 * static_cast<double>(A); }

  /// gamma0 = omega / A and dt so that omega * dt = angle.
  static EngineConfig matched(double omega, std::uint64_t A, double angle = 0.01) {
    EngineConfig c;
    c.A = A;
    c.gamma0 = omega / static_cast<double>(A);
    c.dt = angle / omega;
    return c;
  }
};

// ---------------------------------------------------------------------------
// well-mixed stochastic backend

/// Precompiled catalysis rules split in two stages: conversions that keep
/// the sign (X^s -> Y^s) run first on start-of-tick counts, then the
/// sign-flipping conversions (Y^s -> X^-s) see the updated counts. For a
/// single rotation pair this is the symplectic Euler scheme, so the count
/// norm does not grow tick over tick. Unstaged plans put every conversion
/// in stage 0, which is the plain explicit Euler map of the rate equations.
struct WellMixedPlan {
  struct Conv {
    std::size_t from, to, catalyst;
    double rate;
  };
  struct Spawn {
    std::size_t from, product;
    double rate;
  };
  std::array<std::vector<Conv>, 2> stages;
  std::vector<Spawn> spawns;
  std::size_t species = 0;
};

inline WellMixedPlan plan_wellmixed(const std::vector<ReactionRule>& rules, std::uint32_t dim, bool staged = true) {
  WellMixedPlan p;
  p.species = static_cast<std::size_t>(dim) * 4;
  for (const auto& r : rules) {
    for (const auto& t : r.reagents)
      if (t.state >= dim) fail(ErrorKind::DimensionMismatch, "rule references a state beyond the bubble");
    if (r.kind == RuleKind::catalysis) {
      const auto c = conversion_of(r);
      if (!c) fail(ErrorKind::UnsupportedKind, "catalysis rule without catalyst: " + to_string(r));
      const auto& from = r.reagents[c->converted];
      const int stage = (staged && from.sign != c->target.sign) ? 1 : 0;
      p.stages[stage].push_back({species_index(from), species_index(c->target), species_index(r.reagents[c->catalyst]), r.rate});
    } else if (r.kind == RuleKind::nonequilibrium) {
      if (r.reagents.size() != 1 || r.products.size() != 2 || !(r.products[0] == r.reagents[0]))
        fail(ErrorKind::UnsupportedKind, "nonequilibrium rules must have the form x -> x, y");
      p.spawns.push_back({species_index(r.reagents[0]), species_index(r.products[1]), r.rate});
    } else {
      fail(ErrorKind::UnsupportedKind, "well-mixed backend runs catalysis and creation rules only");
    }
  }
  return p;
}

/// Target total for a (part, state) type: A, or A - 1 when the net count's
/// parity forbids A; |net| itself when that already exceeds A.
inline std::uint64_t replenish_target(std::int64_t net, std::uint64_t A) {
  const auto mag = static_cast<std::uint64_t>(net < 0 ? -net : net);
  if (mag > A) return mag;
  return ((A - mag) % 2 == 0) ? A : A - 1;
}

/// Insert or delete (+, -) pairs so every type total returns to A. With an
/// `active` mask only states flagged 1 are touched.
inline void replenish_species(std::vector<std::uint64_t>& c, std::uint64_t A,
                              const std::vector<std::uint8_t>* active = nullptr) {
  for (std::size_t k = 0; k + 1 < c.size(); k += 2) {
    if (active && !active->empty() && !(*active)[k / 4]) continue;
    std::uint64_t& plus = c[k];
    std::uint64_t& minus = c[k + 1];
    const std::int64_t net = static_cast<std::int64_t>(plus) - static_cast<std::int64_t>(minus);
    const std::uint64_t target = replenish_target(net, A);
    const std::uint64_t total = plus + minus;
    if (total < target) {
      const std::uint64_t pairs = (target - total) / 2;
      plus += pairs;
      minus += pairs;
    } else if (total > target) {
      std::uint64_t pairs = (total - target) / 2;
      if (pairs > std::min(plus, minus)) fail(ErrorKind::CannotDelete, "deletion would break a pair");
      plus -= pairs;
      minus -= pairs;
    }
  }
}

/// Observers for the individual events of a tick; used by representations
/// that track quanta individually (chains).
struct StepHooks {
  std::function<void(std::size_t from, std::size_t to, std::uint64_t k)> convert;
  std::function<void(std::size_t from, std::size_t product, std::uint64_t k)> spawn;
  std::function<void(const std::vector<std::uint64_t>& before, const std::vector<std::uint64_t>& after)> replenish;
};

/// One tick. gamma = gamma0 * dt (pair conversion probability scale),
/// omega_dt = omega * dt (one-body creation probability scale). A nonzero
/// `hold` restores every total to that value after each stage; otherwise
/// stage-0 conversions shift totals between partner types and the second
/// stage picks up an O(dt^2) non-rotational term.
inline void step_species(std::vector<std::uint64_t>& c, const WellMixedPlan& plan, double gamma, double omega_dt,
                         CounterStream& rng, std::uint64_t cap = std::numeric_limits<std::uint64_t>::max(),
                         std::uint64_t hold = 0, const std::vector<std::uint8_t>* active = nullptr,
                         const StepHooks* hooks = nullptr) {
  if (c.size() != plan.species) fail(ErrorKind::DimensionMismatch, "species vector size mismatch");
  for (const auto& stage : plan.stages) {
    if (stage.empty()) continue;
    const std::vector<std::uint64_t> start = c;
    // total conversion probability per source species, then a sequential
    // multinomial split so events never exceed the available quanta
    std::vector<double> ptotal(c.size(), 0.0);
    for (const auto& cv : stage) ptotal[cv.from] += gamma * cv.rate * static_cast<double>(start[cv.catalyst]);
    std::vector<double> pleft(c.size(), 1.0);
    std::vector<std::uint64_t> left = start;
    std::vector<std::int64_t> delta(c.size(), 0);
    for (const auto& cv : stage) {
      const double p = gamma * cv.rate * static_cast<double>(start[cv.catalyst]);
      if (p <= 0 || left[cv.from] == 0) continue;
      // scale when the summed probability would exceed one
      const double scaled = ptotal[cv.from] > 1.0 ? p / ptotal[cv.from] : p;
      const double cond = std::min(1.0, scaled / pleft[cv.from]);
      std::binomial_distribution<std::uint64_t> dist(left[cv.from], cond);
      const std::uint64_t k = dist(rng);
      left[cv.from] -= k;
      pleft[cv.from] = std::max(0.0, pleft[cv.from] - scaled);
      delta[cv.from] -= static_cast<std::int64_t>(k);
      delta[cv.to] += static_cast<std::int64_t>(k);
      if (hooks && hooks->convert && k > 0) hooks->convert(cv.from, cv.to, k);
    }
    for (std::size_t s = 0; s < c.size(); ++s) c[s] = static_cast<std::uint64_t>(static_cast<std::int64_t>(c[s]) + delta[s]);
    if (hold) {
      const auto before = c;
      replenish_species(c, hold, active);
      if (hooks && hooks->replenish) hooks->replenish(before, c);
    }
  }
  if (!plan.spawns.empty()) {
    const std::vector<std::uint64_t> start = c;
    for (const auto& sp : plan.spawns) {
      const double p = std::min(1.0, omega_dt * sp.rate);
      if (p <= 0 || start[sp.from] == 0) continue;
      std::binomial_distribution<std::uint64_t> dist(start[sp.from], p);
      const std::uint64_t k = dist(rng);
      c[sp.product] += k;
      if (hooks && hooks->spawn && k > 0) hooks->spawn(sp.from, sp.product, k);
    }
  }
  for (auto x : c)
    if (x > cap) fail(ErrorKind::CountOverflow, "species count " + std::to_string(x) + " exceeds cap");
}

/// Bubble-level tick: pooled counts advance, tags are dropped.
inline void step_wellmixed(Bubble& b, const ReactionList& list, const EngineConfig& cfg, std::uint64_t tick = 0) {
  if (cfg.backend != Backend::wellmixed) fail(ErrorKind::ConfigError, "step_wellmixed needs the wellmixed backend");
  if (list.rules.empty()) return;
  auto c = species_counts(b);
  const auto plan = plan_wellmixed(list.rules, b.dimension, cfg.staged);
  CounterStream rng(cfg.seed, stream_id("wellmixed", tick));
  step_species(c, plan, cfg.gamma0 * cfg.dt, cfg.omega() * cfg.dt, rng, cfg.count_cap, cfg.replenish ? cfg.A : 0,
               &cfg.active_states);
  b.quanta.clear();
  set_pool(b, c);
}

inline void replenish_pairs(Bubble& b, const EngineConfig& cfg) {
  if (!cfg.replenish) return;
  if (!b.quanta.empty()) fail(ErrorKind::ConfigError, "bubble holds explicit quanta; use the spatial replenisher");
  auto c = species_counts(b);
  replenish_species(c, cfg.A, &cfg.active_states);
  set_pool(b, c);
}

// ---------------------------------------------------------------------------
// mean field

struct MeanFieldOptions {
  bool hold_totals = true;  // totals frozen at A (the replenished limit)
  double max_step = 0.0;    // 0: dt / 10
  std::size_t record_every = 1;
};

struct CountTrajectory {
  std::vector<double> times;
  std::vector<std::vector<double>> species;  // per sample, dense species order

  double net_of(std::size_t sample, Part p, std::uint32_t state) const {
    const auto k = species_index(p, Sign::plus, state);
    return species[sample][k] - species[sample][k + 1];
  }
};

inline std::vector<double> meanfield_rhs(const std::vector<ReactionRule>& rules, const std::vector<double>& c,
                                         double gamma0, double omega) {
  std::vector<double> d(c.size(), 0.0);
  for (const auto& r : rules) {
    if (r.kind == RuleKind::catalysis) {
      const auto cv = conversion_of(r);
      if (!cv) continue;
      const double flux = gamma0 * r.rate * c[species_index(r.reagents[cv->converted])] *
                          c[species_index(r.reagents[cv->catalyst])];
      d[species_index(r.reagents[cv->converted])] -= flux;
      d[species_index(cv->target)] += flux;
    } else if (r.kind == RuleKind::nonequilibrium) {
      const double flux = omega * r.rate * c[species_index(r.reagents[0])];
      d[species_index(r.products[1])] += flux;
    }
  }
  return d;
}

/// Fixed-step RK4 integration of the mass-action ODEs from `initial`
/// species counts over kinetic time t. With hold_totals the totals are
/// frozen at A and only net counts evolve.
inline CountTrajectory meanfield_evolve(const std::vector<double>& initial, const ReactionList& list, double gamma0,
                                        double A, double t, double dt, const MeanFieldOptions& opt = {}) {
  if (t < 0) fail(ErrorKind::ConfigError, "negative duration");
  const double omega = gamma0 * A;
  const double hmax = opt.max_step > 0 ? opt.max_step : dt / 10;
  const auto steps = static_cast<std::size_t>(std::max<double>(1.0, std::ceil(t / hmax - 1e-9)));
  const double h = t / static_cast<double>(steps);

  auto project = [&](std::vector<double> c) {
    if (!opt.hold_totals) return c;
    for (std::size_t k = 0; k + 1 < c.size(); k += 2) {
      const double net = c[k] - c[k + 1];
      c[k] = (A + net) / 2;
      c[k + 1] = (A - net) / 2;
    }
    return c;
  };
  // with frozen totals, the state is the net vector embedded in species form
  auto rhs = [&](const std::vector<double>& c) {
    auto d = meanfield_rhs(list.rules, project(c), gamma0, omega);
    if (opt.hold_totals)
      for (std::size_t k = 0; k + 1 < d.size(); k += 2) {
        const double dn = d[k] - d[k + 1];
        d[k] = dn / 2;
        d[k + 1] = -dn / 2;
      }
    return d;
  };

  CountTrajectory out;
  std::vector<double> c = project(initial);
  out.times.push_back(0);
  out.species.push_back(c);
  const std::size_t n = c.size();
  std::vector<double> tmp(n);
  for (std::size_t s = 1; s <= steps; ++s) {
    const auto k1 = rhs(c);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = c[i] + 0.5 * h * k1[i];
    const auto k2 = rhs(tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = c[i] + 0.5 * h * k2[i];
    const auto k3 = rhs(tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = c[i] + h * k3[i];
    const auto k4 = rhs(tmp);
    for (std::size_t i = 0; i < n; ++i) c[i] += h / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    if (s % opt.record_every == 0 || s == steps) {
      out.times.push_back(h * static_cast<double>(s));
      out.species.push_back(c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// schedules and evolution

/// One stretch of ticks during which a fixed rule set is active.
struct Phase {
  std::vector<ReactionRule> rules;
  std::uint64_t ticks = 0;
  double angle = 0.0;  // omega * dt for these ticks
};

/// Largest per-tick rotation angle a Hamiltonian induces on any amplitude.
inline double rotation_load(const PauliDecomposition& d, std::uint32_t n) {
  std::vector<double> load(n, 0.0);
  for (const auto& b : d) {
    load[b.i] += b.coefficient;
    if (b.j != b.i) load[b.j] += b.coefficient;
  }
  double m = 0;
  for (double x : load) m = std::max(m, x);
  return m;
}

/// Translate (H, t) into tick phases. Division: every block concurrently
/// at rate l for ceil(t / angle) ticks. Trotter: cycles of per-block
/// slices, slice k lasting l_k * trotter_dt of Hamiltonian time.
inline std::vector<Phase> plan_phases(const PauliDecomposition& d, std::uint32_t n, double t, const EngineConfig& cfg) {
  std::vector<Phase> phases;
  if (t <= 0 || d.empty()) return phases;
  const double angle = cfg.omega() * cfg.dt;
  if (!(angle > 0)) fail(ErrorKind::ConfigError, "omega * dt must be positive");
  if (angle > cfg.stability) fail(ErrorKind::ConfigError, "omega * dt exceeds the stability guard");
  if (cfg.mode == ScheduleMode::division) {
    if (angle * rotation_load(d, n) > cfg.stability)
      fail(ErrorKind::ConfigError, "per-tick rotation exceeds the stability guard; reduce dt");
    Phase p;
    for (const auto& b : d) {
      auto l = reactions_for_block(b);
      p.rules.insert(p.rules.end(), l.rules.begin(), l.rules.end());
    }
    p.ticks = static_cast<std::uint64_t>(std::ceil(t / angle - 1e-9));
    p.angle = t / static_cast<double>(p.ticks);
    phases.push_back(std::move(p));
    return phases;
  }
  const auto sched = membrane_schedule(d, ScheduleMode::trotter, cfg.trotter_dt);
  const auto cycles = static_cast<std::uint64_t>(std::ceil(t / cfg.trotter_dt - 1e-9));
  const double cycle_len = t / static_cast<double>(cycles);
  std::vector<Phase> cycle;
  for (const auto& s : sched.slices) {
    PauliBlock unit = d[s.block];
    unit.coefficient = 1.0;
    Phase p;
    p.rules = reactions_for_block(unit).rules;
    const double duration = d[s.block].coefficient * cycle_len;
    p.ticks = static_cast<std::uint64_t>(std::ceil(duration / angle - 1e-9));
    if (p.ticks == 0) continue;
    p.angle = duration / static_cast<double>(p.ticks);
    cycle.push_back(std::move(p));
  }
  for (std::uint64_t c = 0; c < cycles; ++c) phases.insert(phases.end(), cycle.begin(), cycle.end());
  return phases;
}

struct TickInfo {
  std::uint64_t tick = 0;
  double time = 0.0;  // Hamiltonian time elapsed
  const std::vector<std::uint64_t>* species = nullptr;
  std::function<std::vector<AmplitudeQuantum>()> quanta;  // spatial backend only
};

using TickObserver = std::function<void(const TickInfo&)>;

/// Well-mixed evolution of species counts through a phase list.
inline std::uint64_t run_phases(std::vector<std::uint64_t>& c, const std::vector<Phase>& phases, std::uint32_t dim,
                                const EngineConfig& cfg, const TickObserver& observe = {}, std::uint64_t first_tick = 0) {
  std::uint64_t tick = first_tick;
  double time = 0;
  for (const auto& ph : phases) {
    const auto plan = plan_wellmixed(ph.rules, dim, cfg.staged);
    // gamma0 * dt scaled so omega * dt equals the phase angle
    const double gamma = ph.angle / static_cast<double>(cfg.A);
    for (std::uint64_t k = 0; k < ph.ticks; ++k) {
      CounterStream rng(cfg.seed, stream_id("wellmixed", tick));
      step_species(c, plan, gamma, ph.angle, rng, cfg.count_cap, cfg.replenish ? cfg.A : 0, &cfg.active_states);
      if (cfg.replenish) replenish_species(c, cfg.A, &cfg.active_states);
      ++tick;
      time += ph.angle;
      if (observe) observe({tick, time, &c, {}});
    }
  }
  return tick;
}

/// Evolve a pooled bubble under H for Hamiltonian time t (well-mixed or
/// mean-field backend; the spatial backend lives in spatial.hpp).
inline Bubble evolve_wellmixed(Bubble b, const CMatrix& h, double t, const EngineConfig& cfg,
                               const TickObserver& observe = {}) {
  if (t < 0) fail(ErrorKind::ConfigError, "negative duration");
  if (h.rows() != b.dimension) fail(ErrorKind::DimensionMismatch, "H and bubble differ in dimension");
  const auto d = pauli_decompose(h);
  if (t == 0 || d.empty()) return b;
  const auto phases = plan_phases(d, b.dimension, t, cfg);
  auto c = species_counts(b);
  if (cfg.backend == Backend::meanfield) {
    std::vector<double> x(c.begin(), c.end());
    for (const auto& ph : phases) {
      ReactionList l{ph.rules, {}};
      const double gamma0 = 1.0 / static_cast<double>(cfg.A);
      auto tr = meanfield_evolve(x, l, gamma0, static_cast<double>(cfg.A), ph.angle * static_cast<double>(ph.ticks), 1.0,
                                 {true, 0.1 * ph.angle, 1u << 30});
      x = tr.species.back();
    }
    for (std::size_t k = 0; k < c.size(); ++k) c[k] = static_cast<std::uint64_t>(std::llround(std::max(0.0, x[k])));
  } else {
    run_phases(c, phases, b.dimension, cfg, observe);
  }
  b.quanta.clear();
  set_pool(b, c);
  return b;
}

/// Creation-list evolution (type 4 rules from second quantization). Every
/// tick spawns on start-of-tick counts with probability angle * rate per
/// source quantum, then r-reduction annihilates opposite-sign pairs so the
/// totals track |net| instead of growing. No replenishment.
inline Bubble evolve_nonequilibrium(Bubble b, const ReactionList& list, double t, const EngineConfig& cfg,
                                    const TickObserver& observe = {}) {
  if (t < 0) fail(ErrorKind::ConfigError, "negative duration");
  for (const auto& r : list.rules)
    if (r.kind != RuleKind::nonequilibrium) fail(ErrorKind::UnsupportedKind, "creation lists only: " + to_string(r));
  if (t == 0 || list.rules.empty()) return b;
  const double angle0 = cfg.omega() * cfg.dt;
  std::vector<double> load(b.dimension * 4, 0.0);
  for (const auto& r : list.rules) load[species_index(r.reagents[0])] += r.rate;
  const double worst = *std::max_element(load.begin(), load.end());
  if (!(angle0 > 0) || angle0 * worst > cfg.stability) fail(ErrorKind::ConfigError, "per-tick spawn probability exceeds the stability guard");
  const auto ticks = static_cast<std::uint64_t>(std::ceil(t / angle0 - 1e-9));
  const double angle = t / static_cast<double>(ticks);
  const auto plan = plan_wellmixed(list.rules, b.dimension);
  auto c = species_counts(b);
  const auto reduce = [&] {
    for (std::size_t k = 0; k < c.size(); k += 2) {
      const auto m = std::min(c[k], c[k + 1]);
      c[k] -= m;
      c[k + 1] -= m;
    }
  };
  reduce();
  double time = 0;
  for (std::uint64_t k = 0; k < ticks; ++k) {
    CounterStream rng(cfg.seed, stream_id("spawn", k));
    step_species(c, plan, 0.0, angle, rng, cfg.count_cap);
    reduce();
    time += angle;
    if (observe) observe({k + 1, time, &c, {}});
  }
  b.quanta.clear();
  set_pool(b, c);
  return b;
}

}  // namespace aq
