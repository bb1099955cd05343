#pragma once

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "aq/compiler.hpp"
#include "aq/core.hpp"
#include "aq/kinetics.hpp"
#include "aq/measurement.hpp"
#include "aq/rng.hpp"

namespace aq {

enum class Statistics { distinct, boson, fermion };

inline std::string to_string(Statistics s) {
  switch (s) {
    case Statistics::distinct: return "distinct";
    case Statistics::boson: return "boson";
    case Statistics::fermion: return "fermion";
  }
  return "?";
}

/// One component per particle; idents hold one coupling number per link of
/// the touch topology (a bubble with two neighbours carries two).
struct Chain {
  std::vector<QuantumType> parts;
  std::vector<std::uint64_t> idents;
};

using Link = std::pair<std::uint32_t, std::uint32_t>;

struct ChainSystem {
  std::uint32_t n = 0;  // particles
  std::uint32_t N = 0;  // basic states per particle
  std::vector<Link> links;
  std::vector<Chain> chains;
  std::uint64_t budget = 0;  // quanta of the initial bubbles
  std::uint64_t A = 0;       // per-type chain total held by replenishment
  std::uint64_t next_ident = 1;
  std::uint64_t peak = 0;
  Statistics statistics = Statistics::distinct;

  std::uint64_t joint_dim() const {
    std::uint64_t d = 1;
    for (std::uint32_t k = 0; k < n; ++k) d *= N;
    return d;
  }
};

// Slot 0 is the most significant digit of the joint index.
inline std::uint64_t joint_index(const std::vector<std::uint32_t>& digits, std::uint32_t N) {
  std::uint64_t idx = 0;
  for (auto d : digits) idx = idx * N + d;
  return idx;
}

inline std::vector<std::uint32_t> joint_digits(std::uint64_t idx, std::uint32_t n, std::uint32_t N) {
  std::vector<std::uint32_t> d(n);
  for (std::uint32_t k = n; k-- > 0;) {
    d[k] = static_cast<std::uint32_t>(idx % N);
    idx /= N;
  }
  return d;
}

/// The chain as one joint quantum: phases multiply (exponents of i add),
/// basic states combine into the joint index.
inline QuantumType joint_type(const Chain& c, std::uint32_t N) {
  int k = 0;
  std::vector<std::uint32_t> digits;
  digits.reserve(c.parts.size());
  for (const auto& p : c.parts) {
    k += phase_exponent(p.part, p.sign);
    digits.push_back(p.state);
  }
  return qt(part_of_exponent(k & 3), sign_of_exponent(k & 3), static_cast<std::uint32_t>(joint_index(digits, N)));
}

inline std::size_t chain_species_index(const Chain& c, std::uint32_t N) { return species_index(joint_type(c, N)); }

inline std::vector<std::uint64_t> chain_species(const ChainSystem& sys) {
  std::vector<std::uint64_t> c(sys.joint_dim() * 4, 0);
  for (const auto& ch : sys.chains) ++c[chain_species_index(ch, sys.N)];
  return c;
}

inline void set_exponent(QuantumType& t, int k) {
  t.part = part_of_exponent(k & 3);
  t.sign = sign_of_exponent(k & 3);
}

/// Give a chain a new joint type. Only slots whose basic state changes are
/// touched; the phase change lands on the first of them (slot 0 if none).
inline void retype(Chain& c, std::size_t species, std::uint32_t N) {
  const QuantumType target = species_type(species);
  const auto digits = joint_digits(target.state, static_cast<std::uint32_t>(c.parts.size()), N);
  std::optional<std::size_t> first;
  for (std::size_t k = 0; k < c.parts.size(); ++k) {
    if (c.parts[k].state != digits[k]) {
      if (!first) first = k;
      c.parts[k].state = digits[k];
    }
  }
  int have = 0;
  for (const auto& p : c.parts) have += phase_exponent(p.part, p.sign);
  const int want = phase_exponent(target.part, target.sign);
  auto& slot = c.parts[first.value_or(0)];
  set_exponent(slot, phase_exponent(slot.part, slot.sign) + ((want - have) % 4 + 4));
}

inline Chain new_chain(ChainSystem& sys, std::size_t species) {
  Chain c;
  const QuantumType t = species_type(species);
  const auto digits = joint_digits(t.state, sys.n, sys.N);
  for (std::uint32_t k = 0; k < sys.n; ++k) c.parts.push_back(qt(Part::alpha, Sign::plus, digits[k]));
  set_exponent(c.parts[0], phase_exponent(t.part, t.sign));
  for (std::size_t l = 0; l < sys.links.size(); ++l) c.idents.push_back(sys.next_ident++);
  return c;
}

inline std::vector<Link> linear_links(std::uint32_t n) {
  std::vector<Link> out;
  for (std::uint32_t k = 0; k + 1 < n; ++k) out.emplace_back(k, k + 1);
  return out;
}

inline std::vector<std::vector<std::uint32_t>> graph_components(std::uint32_t n, const std::vector<Link>& links) {
  std::vector<std::uint32_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (auto [a, b] : links) parent[find(a)] = find(b);
  std::map<std::uint32_t, std::vector<std::uint32_t>> groups;
  for (std::uint32_t k = 0; k < n; ++k) groups[find(k)].push_back(k);
  std::vector<std::vector<std::uint32_t>> out;
  for (auto& [r, g] : groups) out.push_back(g);
  std::sort(out.begin(), out.end());
  return out;
}

struct CouplingConfig {
  std::vector<Link> links;  // empty: linear topology 0-1-...-(n-1)
  std::uint64_t seed = 1;
  std::uint64_t budget = 0;       // 0: total quanta of the bubbles
  std::uint64_t joint_total = 0;  // 0: floor(0.95 * budget / (2 N^n))
  Statistics statistics = Statistics::distinct;
};

inline bool membranes_touch(const Bubble& a, const Bubble& b) {
  if (a.membrane.empty() || b.membrane.empty()) return true;  // well-mixed bubbles touch by declaration
  const double r = std::max({a.collision_radius, b.collision_radius, 1e-12});
  for (const auto& ca : a.membrane)
    for (const auto& cb : b.membrane)
      if ((ca.coords - cb.coords).norm2() <= r * r) return true;
  return false;
}

/// Couple bubbles through their touching areas. Each bubble is fully
/// reduced; then m quanta are drawn from each without replacement and the
/// k-th draws form chain k, with a fresh ident per link. The expected
/// joint readout is the product of the one-particle states.
inline ChainSystem couple_bubbles(const std::vector<Bubble>& bubbles, const CouplingConfig& cfg = {}) {
  const auto n = static_cast<std::uint32_t>(bubbles.size());
  if (n < 2) fail(ErrorKind::NoTouchingArea, "coupling needs at least two bubbles");
  ChainSystem sys;
  sys.n = n;
  sys.N = bubbles[0].dimension;
  sys.statistics = cfg.statistics;
  for (const auto& b : bubbles)
    if (b.dimension != sys.N) fail(ErrorKind::DimensionMismatch, "coupled bubbles must share the basis size");
  sys.links = cfg.links.empty() ? linear_links(n) : cfg.links;
  for (auto [a, b] : sys.links) {
    if (a >= n || b >= n || a == b) fail(ErrorKind::NoTouchingArea, "link does not join two distinct bubbles");
    if (!membranes_touch(bubbles[a], bubbles[b])) fail(ErrorKind::NoTouchingArea, "membranes do not touch");
  }
  if (graph_components(n, sys.links).size() != 1) fail(ErrorKind::NoTouchingArea, "touch topology is not connected");

  sys.budget = cfg.budget;
  if (sys.budget == 0)
    for (const auto& b : bubbles) sys.budget += quantum_count(b);
  sys.A = cfg.joint_total ? cfg.joint_total
                          : static_cast<std::uint64_t>(std::floor(0.95 * static_cast<double>(sys.budget) /
                                                                  (2.0 * static_cast<double>(sys.joint_dim()))));
  if (sys.A == 0) fail(ErrorKind::ConfigError, "quanta budget too small for the joint space");

  std::vector<std::vector<std::uint64_t>> urns;
  std::uint64_t m = sys.A;
  for (const auto& b : bubbles) {
    Bubble r = b;
    apply_full_reduction(r);
    urns.push_back(species_counts(r));
    m = std::min(m, std::accumulate(urns.back().begin(), urns.back().end(), std::uint64_t{0}));
  }
  if (m == 0) fail(ErrorKind::AllCountsZero, "a coupled bubble has no quanta after reduction");
  sys.chains.assign(m, Chain{});
  for (std::uint32_t i = 0; i < n; ++i) {
    CounterStream rng(cfg.seed, stream_id("couple", i));
    auto& urn = urns[i];
    std::uint64_t total = std::accumulate(urn.begin(), urn.end(), std::uint64_t{0});
    for (std::uint64_t k = 0; k < m; ++k) {
      std::uint64_t r = rng.below(total);
      std::size_t s = 0;
      while (r >= urn[s]) r -= urn[s++];
      --urn[s];
      --total;
      sys.chains[k].parts.push_back(species_type(s));
    }
  }
  for (auto& c : sys.chains)
    for (std::size_t l = 0; l < sys.links.size(); ++l) c.idents.push_back(sys.next_ident++);
  sys.peak = sys.chains.size();
  return sys;
}

/// Chains built directly from a joint state (used when rebuilding
/// multi-particle components).
inline ChainSystem chains_from_state(const StateVector& joint, std::uint32_t n, std::uint32_t N, std::uint64_t A) {
  ChainSystem sys;
  sys.n = n;
  sys.N = N;
  if (static_cast<std::uint64_t>(joint.size()) != sys.joint_dim()) fail(ErrorKind::DimensionMismatch, "joint size is not N^n");
  sys.links = linear_links(n);
  sys.A = A;
  const Bubble b = bubble_from_state(joint, A);
  const auto c = species_counts(b);
  for (std::size_t s = 0; s < c.size(); ++s)
    for (std::uint64_t k = 0; k < c[s]; ++k) sys.chains.push_back(new_chain(sys, s));
  sys.budget = sys.peak = sys.chains.size();
  return sys;
}

/// Every ident sits on exactly one chain link.
inline bool idents_unique(const ChainSystem& sys) {
  std::set<std::uint64_t> seen;
  for (const auto& c : sys.chains)
    for (auto id : c.idents)
      if (!seen.insert(id).second) return false;
  return true;
}

/// Sparse net counts per joint basis index: {[alpha], [beta]}.
inline std::map<std::uint64_t, std::array<std::int64_t, 2>> chain_net(const ChainSystem& sys) {
  std::map<std::uint64_t, std::array<std::int64_t, 2>> net;
  for (const auto& c : sys.chains) {
    const auto t = joint_type(c, sys.N);
    net[t.state][t.part == Part::alpha ? 0 : 1] += value(t.sign);
  }
  std::erase_if(net, [](const auto& kv) { return kv.second[0] == 0 && kv.second[1] == 0; });
  return net;
}

inline std::map<std::uint64_t, cplx> joint_amplitudes(const ChainSystem& sys) {
  std::map<std::uint64_t, cplx> amp;
  double norm2 = 0;
  for (const auto& [idx, v] : chain_net(sys)) {
    const cplx a(static_cast<double>(v[0]), static_cast<double>(v[1]));
    amp[idx] = a;
    norm2 += std::norm(a);
  }
  if (norm2 == 0) fail(ErrorKind::AllCountsZero, "every chain count cancels");
  for (auto& [idx, a] : amp) a /= std::sqrt(norm2);
  return amp;
}

inline StateVector joint_state_from_chains(const ChainSystem& sys) {
  if (sys.chains.empty()) fail(ErrorKind::AllCountsZero, "no chains");
  StateVector psi = StateVector::Zero(static_cast<Eigen::Index>(sys.joint_dim()));
  for (const auto& [idx, a] : joint_amplitudes(sys)) psi[static_cast<Eigen::Index>(idx)] = a;
  return psi;
}

/// Annihilate (+, -) chain pairs of equal joint type.
inline void reduce_chains(ChainSystem& sys) {
  std::map<std::pair<std::uint64_t, int>, std::array<std::vector<std::size_t>, 2>> groups;
  for (std::size_t k = 0; k < sys.chains.size(); ++k) {
    const auto t = joint_type(sys.chains[k], sys.N);
    groups[{t.state, static_cast<int>(t.part)}][t.sign == Sign::plus ? 0 : 1].push_back(k);
  }
  std::vector<char> dead(sys.chains.size(), 0);
  for (auto& [key, g] : groups) {
    const std::size_t pairs = std::min(g[0].size(), g[1].size());
    for (std::size_t k = 0; k < pairs; ++k) dead[g[0][k]] = dead[g[1][k]] = 1;
  }
  std::size_t w = 0;
  for (std::size_t k = 0; k < sys.chains.size(); ++k)
    if (!dead[k]) {
      if (w != k) sys.chains[w] = std::move(sys.chains[k]);
      ++w;
    }
  sys.chains.resize(w);
}

/// Reduced density matrix over the given particle slots (ascending), from
/// the sparse joint readout.
inline CMatrix reduced_density_matrix(const ChainSystem& sys, const std::vector<std::uint32_t>& keep) {
  const auto amp = joint_amplitudes(sys);
  std::uint64_t dk = 1;
  for (std::size_t k = 0; k < keep.size(); ++k) dk *= sys.N;
  std::vector<char> kept(sys.n, 0);
  for (auto s : keep) {
    if (s >= sys.n) fail(ErrorKind::DimensionMismatch, "particle index out of range");
    kept[s] = 1;
  }
  // group amplitudes by the traced-out digits
  std::map<std::vector<std::uint32_t>, std::vector<std::pair<std::uint64_t, cplx>>> groups;
  for (const auto& [idx, a] : amp) {
    const auto d = joint_digits(idx, sys.n, sys.N);
    std::vector<std::uint32_t> rest, mine;
    for (std::uint32_t k = 0; k < sys.n; ++k) (kept[k] ? mine : rest).push_back(d[k]);
    groups[rest].emplace_back(joint_index(mine, sys.N), a);
  }
  CMatrix rho = CMatrix::Zero(static_cast<Eigen::Index>(dk), static_cast<Eigen::Index>(dk));
  for (const auto& [rest, v] : groups)
    for (const auto& [i, a] : v)
      for (const auto& [j, b] : v) rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += a * std::conj(b);
  return rho;
}

inline CMatrix reduced_density_matrix(const ChainSystem& sys, std::uint32_t particle) {
  return reduced_density_matrix(sys, std::vector<std::uint32_t>{particle});
}

// ---------------------------------------------------------------------------
// reaction lists on chains

/// Number of particle slots in which two joint indices differ.
inline std::uint32_t slots_changed(std::uint64_t a, std::uint64_t b, std::uint32_t n, std::uint32_t N) {
  std::uint32_t c = 0;
  for (std::uint32_t k = 0; k < n; ++k, a /= N, b /= N) c += (a % N) != (b % N);
  return c;
}

inline void check_spectators(const WellMixedPlan& plan, const ChainSystem& sys) {
  auto check = [&](std::size_t from, std::size_t to) {
    if (slots_changed(from / 4, to / 4, sys.n, sys.N) > 2)
      fail(ErrorKind::SpectatorMismatch, "rule changes more than two particle slots");
  };
  for (const auto& stage : plan.stages)
    for (const auto& cv : stage) check(cv.from, cv.to);
  for (const auto& sp : plan.spawns) check(sp.from, sp.product);
}

/// Embed a one-particle list on particle `slot` into the joint space: every
/// rule is repeated for each configuration of the other particles.
inline ReactionList lift_list(const ReactionList& list, std::uint32_t slot, std::uint32_t n, std::uint32_t N) {
  if (slot >= n) fail(ErrorKind::DimensionMismatch, "slot out of range");
  std::uint64_t others = 1;
  for (std::uint32_t k = 0; k + 1 < n; ++k) others *= N;
  ReactionList out;
  for (std::uint64_t o = 0; o < others; ++o) {
    auto digits = joint_digits(o, n - 1, N);
    digits.insert(digits.begin() + slot, 0u);
    auto lift = [&](QuantumType t) {
      digits[slot] = t.state;
      t.state = static_cast<std::uint32_t>(joint_index(digits, N));
      return t;
    };
    for (const auto& r : list.rules) {
      ReactionRule lr = r;
      for (auto& t : lr.reagents) t = lift(t);
      for (auto& t : lr.products) t = lift(t);
      out.rules.push_back(std::move(lr));
    }
  }
  return out;
}

/// I (x) ... (x) h (x) ... (x) I with h on `slot`.
inline CMatrix lift_operator(const CMatrix& h, std::uint32_t slot, std::uint32_t n) {
  CMatrix out = CMatrix::Identity(1, 1);
  for (std::uint32_t k = 0; k < n; ++k) {
    const CMatrix f = k == slot ? h : CMatrix::Identity(h.rows(), h.cols());
    CMatrix next(out.rows() * f.rows(), out.cols() * f.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j) next.block(i * f.rows(), j * f.cols(), f.rows(), f.cols()) = out(i, j) * f;
    out = std::move(next);
  }
  return out;
}

/// One tick at chain granularity. The well-mixed step draws the event
/// counts; each conversion event picks a random chain of the source type
/// and retypes it (idents are inherited), creations and replenishment add
/// chains with fresh idents, deletions remove random chains.
inline void chain_tick(ChainSystem& sys, const WellMixedPlan& plan, double angle, const EngineConfig& cfg,
                       std::uint64_t tick) {
  const std::size_t species = sys.joint_dim() * 4;
  std::vector<std::vector<std::size_t>> bucket(species);
  for (std::size_t k = 0; k < sys.chains.size(); ++k) bucket[chain_species_index(sys.chains[k], sys.N)].push_back(k);
  std::vector<char> dead(sys.chains.size(), 0);
  CounterStream pick(cfg.seed, stream_id("chainpick", tick));

  auto take = [&](std::size_t s) {
    auto& b = bucket[s];
    const std::size_t j = pick.below(b.size());
    const std::size_t idx = b[j];
    b[j] = b.back();
    b.pop_back();
    return idx;
  };
  auto add = [&](std::size_t s, std::uint64_t k) {
    for (std::uint64_t q = 0; q < k; ++q) {
      sys.chains.push_back(new_chain(sys, s));
      dead.push_back(0);
      bucket[s].push_back(sys.chains.size() - 1);
    }
  };
  StepHooks hooks;
  hooks.convert = [&](std::size_t from, std::size_t to, std::uint64_t k) {
    for (std::uint64_t q = 0; q < k; ++q) {
      const std::size_t idx = take(from);
      retype(sys.chains[idx], to, sys.N);
      bucket[to].push_back(idx);
    }
  };
  hooks.spawn = [&](std::size_t, std::size_t product, std::uint64_t k) { add(product, k); };
  hooks.replenish = [&](const std::vector<std::uint64_t>& before, const std::vector<std::uint64_t>& after) {
    for (std::size_t s = 0; s < species; ++s) {
      if (after[s] > before[s]) add(s, after[s] - before[s]);
      for (std::uint64_t q = after[s]; q < before[s]; ++q) dead[take(s)] = 1;
    }
  };

  auto c = chain_species(sys);
  CounterStream rng(cfg.seed, stream_id("chains", tick));
  const double gamma = angle / static_cast<double>(sys.A);
  step_species(c, plan, gamma, angle, rng, cfg.count_cap, cfg.replenish ? sys.A : 0, nullptr, &hooks);
  if (cfg.replenish) {
    const auto before = c;
    replenish_species(c, sys.A);
    hooks.replenish(before, c);
  }
  std::size_t w = 0;
  for (std::size_t k = 0; k < sys.chains.size(); ++k)
    if (!dead[k]) {
      if (w != k) sys.chains[w] = std::move(sys.chains[k]);
      ++w;
    }
  sys.chains.resize(w);
  sys.peak = std::max<std::uint64_t>(sys.peak, sys.chains.size());
}

/// Run a joint-space reaction list for `ticks` ticks at rotation angle
/// omega * dt per tick.
inline void apply_two_particle_list(ChainSystem& sys, const ReactionList& list, const EngineConfig& cfg,
                                    std::uint64_t ticks = 1, std::uint64_t first_tick = 0) {
  if (list.rules.empty() || ticks == 0) return;
  const auto plan = plan_wellmixed(list.rules, static_cast<std::uint32_t>(sys.joint_dim()), cfg.staged);
  check_spectators(plan, sys);
  const double angle = cfg.omega() * cfg.dt;
  for (std::uint64_t t = 0; t < ticks; ++t) chain_tick(sys, plan, angle, cfg, first_tick + t);
}

/// Evolve chains under a joint Hamiltonian over N^n for Hamiltonian time t.
inline void evolve_chains(ChainSystem& sys, const CMatrix& h, double t, const EngineConfig& cfg,
                          const std::function<void(std::uint64_t, double, const ChainSystem&)>& observe = {}) {
  if (static_cast<std::uint64_t>(h.rows()) != sys.joint_dim()) fail(ErrorKind::DimensionMismatch, "H is not N^n square");
  const auto d = pauli_decompose(h);
  for (const auto& b : d)
    if (slots_changed(b.i, b.j, sys.n, sys.N) > 2) fail(ErrorKind::SpectatorMismatch, "term couples more than two particles");
  if (t <= 0 || d.empty()) return;
  EngineConfig c = cfg;
  c.A = sys.A;
  c.gamma0 = cfg.omega() / static_cast<double>(sys.A);
  const auto dim = static_cast<std::uint32_t>(sys.joint_dim());
  std::uint64_t tick = 0;
  double time = 0;
  for (const auto& ph : plan_phases(d, dim, t, c)) {
    const auto plan = plan_wellmixed(ph.rules, dim, c.staged);
    for (std::uint64_t k = 0; k < ph.ticks; ++k) {
      chain_tick(sys, plan, ph.angle, c, tick++);
      time += ph.angle;
      if (observe) observe(tick, time, sys);
    }
  }
}

// ---------------------------------------------------------------------------
// identical particles

/// Largest ||psi - s * P psi|| over adjacent transpositions P, with s = +1
/// for bosons and -1 for fermions.
inline double swap_defect(const StateVector& psi, std::uint32_t n, std::uint32_t N, int s) {
  double worst = 0;
  for (std::uint32_t k = 0; k + 1 < n; ++k) {
    StateVector swapped(psi.size());
    for (Eigen::Index i = 0; i < psi.size(); ++i) {
      auto d = joint_digits(static_cast<std::uint64_t>(i), n, N);
      std::swap(d[k], d[k + 1]);
      swapped[static_cast<Eigen::Index>(joint_index(d, N))] = psi[i];
    }
    worst = std::max(worst, (psi - static_cast<double>(s) * swapped).norm());
  }
  return worst;
}

struct ExchangeConfig {
  double p = 0.05;  // exchange probability per chain, adjacent pair and tick
  std::uint64_t max_ticks = 5000;
  std::uint64_t checkpoint = 10;  // ticks between defect checks
  int patience = 10;              // checkpoints without improvement before stopping
  std::uint64_t seed = 1;
};

struct ExchangeReport {
  std::uint64_t ticks = 0;
  double defect = 0;
  bool converged = false;
};

/// Exchange lists: adjacent components of a chain trade places; for
/// fermions the component that moves into the second bubble flips sign.
inline ExchangeReport exchange(ChainSystem& sys, bool fermion, const ExchangeConfig& cfg) {
  ExchangeReport rep;
  const int s = fermion ? -1 : 1;
  if (sys.n < 2) {
    rep.converged = true;
    return rep;
  }
  double best = swap_defect(joint_state_from_chains(sys), sys.n, sys.N, s);
  int stale = 0;
  for (rep.ticks = 0; rep.ticks < cfg.max_ticks;) {
    CounterStream rng(cfg.seed, stream_id("exchange", rep.ticks));
    for (std::uint32_t k = 0; k + 1 < sys.n; ++k) {
      for (auto& c : sys.chains) {
        if (rng.uniform() >= cfg.p) continue;
        std::swap(c.parts[k], c.parts[k + 1]);
        if (fermion) c.parts[k + 1].sign = -c.parts[k + 1].sign;
      }
    }
    ++rep.ticks;
    if (rep.ticks % cfg.checkpoint) continue;
    const double d = swap_defect(joint_state_from_chains(sys), sys.n, sys.N, s);
    if (d < best) {
      best = d;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      rep.converged = true;
      break;
    }
  }
  rep.defect = swap_defect(joint_state_from_chains(sys), sys.n, sys.N, s);
  return rep;
}

inline ExchangeReport exchange_bosons(ChainSystem& sys, const ExchangeConfig& cfg = {}) {
  sys.statistics = Statistics::boson;
  return exchange(sys, false, cfg);
}

inline ExchangeReport exchange_fermions(ChainSystem& sys, const ExchangeConfig& cfg = {}) {
  sys.statistics = Statistics::fermion;
  return exchange(sys, true, cfg);
}

/// Occupation-number amplitudes of a symmetric state:
/// c(n_0..n_{N-1}) = psi(l) * sqrt(n! / prod n_k!) for any l with those occupations.
inline std::map<std::vector<std::uint32_t>, cplx> occupation_amplitudes(const StateVector& psi, std::uint32_t n, std::uint32_t N) {
  std::map<std::vector<std::uint32_t>, cplx> out;
  for (Eigen::Index i = 0; i < psi.size(); ++i) {
    std::vector<std::uint32_t> occ(N, 0);
    for (auto d : joint_digits(static_cast<std::uint64_t>(i), n, N)) ++occ[d];
    if (out.count(occ)) continue;
    double mult = std::tgamma(n + 1.0);
    for (auto o : occ) mult /= std::tgamma(o + 1.0);
    out[occ] = psi[i] * std::sqrt(mult);
  }
  return out;
}

// ---------------------------------------------------------------------------
// decoherence

enum class DecoherenceWay { bubble_connectivity, support_connectivity };

struct DecohereConfig {
  DecoherenceWay way = DecoherenceWay::bubble_connectivity;
  std::vector<Link> touches;  // way 1: links still in contact after separation
  double eps0 = 0;            // way 2: 0 selects 1 / A
  double eps1 = 0;            // way 2: 0 selects 2 * eps0
  double spacing = 1.0;       // way 2: distance between neighbouring basis lists
  std::uint64_t seed = 1;
  std::uint64_t trial = 0;
  std::uint64_t A = 10000;  // totals of rebuilt bubbles
};

struct Subsystem {
  std::vector<std::uint32_t> particles;
  std::optional<Bubble> bubble;        // one particle
  std::optional<ChainSystem> chains;   // several particles
};

struct DecoherenceResult {
  std::vector<Subsystem> parts;
  std::vector<std::vector<std::uint64_t>> components;  // way 2: basis lists per support component
  std::vector<double> weights;                         // way 2: probability of each component
  std::optional<std::size_t> chosen;                   // way 2
  std::optional<ChainSystem> survivors;                // way 2: chains of the chosen component
};

/// Sample an eigenvector of a density matrix with probability equal to its
/// eigenvalue.
inline StateVector sample_eigenvector(const CMatrix& rho, CounterStream& rng) {
  Eigen::SelfAdjointEigenSolver<CMatrix> es(rho);
  const auto& w = es.eigenvalues();
  double total = 0;
  for (Eigen::Index k = 0; k < w.size(); ++k) total += std::max(0.0, w[k]);
  double u = rng.uniform() * total;
  Eigen::Index pickk = w.size() - 1;
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    const double x = std::max(0.0, w[k]);
    if (u < x) {
      pickk = k;
      break;
    }
    u -= x;
  }
  return es.eigenvectors().col(pickk);
}

inline Subsystem rebuild_component(const ChainSystem& sys, const std::vector<std::uint32_t>& slots, std::uint64_t A,
                                   CounterStream& rng) {
  Subsystem s;
  s.particles = slots;
  const StateVector v = sample_eigenvector(reduced_density_matrix(sys, slots), rng);
  if (slots.size() == 1)
    s.bubble = bubble_from_state(v, A);
  else
    s.chains = chains_from_state(v, static_cast<std::uint32_t>(slots.size()), sys.N, A);
  return s;
}

/// Max-norm single-linkage components of a set of basis lists.
inline std::vector<std::vector<std::uint64_t>> support_components(const std::vector<std::uint64_t>& support, std::uint32_t n,
                                                                  std::uint32_t N, double spacing, double eps) {
  const std::size_t m = support.size();
  std::vector<std::vector<std::uint32_t>> pts;
  for (auto idx : support) pts.push_back(joint_digits(idx, n, N));
  std::vector<int> comp(m, -1);
  std::vector<std::vector<std::uint64_t>> out;
  for (std::size_t s = 0; s < m; ++s) {
    if (comp[s] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    std::vector<std::size_t> stack{s};
    comp[s] = id;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      out[id].push_back(support[i]);
      for (std::size_t j = 0; j < m; ++j) {
        if (comp[j] >= 0) continue;
        double d = 0;
        for (std::uint32_t k = 0; k < n; ++k)
          d = std::max(d, spacing * std::abs(static_cast<double>(pts[i][k]) - static_cast<double>(pts[j][k])));
        if (d <= eps) {
          comp[j] = id;
          stack.push_back(j);
        }
      }
    }
  }
  for (auto& c : out) std::sort(c.begin(), c.end());
  std::sort(out.begin(), out.end());
  return out;
}

inline DecoherenceResult decohere_components(const ChainSystem& sys, const DecohereConfig& cfg = {}) {
  DecoherenceResult res;
  CounterStream rng(cfg.seed, stream_id("decohere", cfg.trial));
  if (cfg.way == DecoherenceWay::bubble_connectivity) {
    for (auto [a, b] : cfg.touches)
      if (a >= sys.n || b >= sys.n) fail(ErrorKind::DimensionMismatch, "touch refers to a missing particle");
    const auto comps = graph_components(sys.n, cfg.touches);
    if (comps.size() < 2) fail(ErrorKind::NoSplit, "bubbles still form one connected system");
    for (const auto& c : comps) res.parts.push_back(rebuild_component(sys, c, cfg.A, rng));
    return res;
  }

  const double eps0 = cfg.eps0 > 0 ? cfg.eps0 : 1.0 / static_cast<double>(sys.A ? sys.A : cfg.A);
  const double eps1 = cfg.eps1 > 0 ? cfg.eps1 : 2.0 * eps0;
  if (!(eps1 > eps0)) fail(ErrorKind::ConfigError, "need eps0 < eps1");
  ChainSystem reduced = sys;
  reduce_chains(reduced);
  std::vector<std::uint64_t> support;
  for (const auto& [idx, v] : chain_net(reduced)) support.push_back(idx);
  if (support.empty()) fail(ErrorKind::AllCountsZero, "no chain support");
  res.components = support_components(support, sys.n, sys.N, cfg.spacing, eps1);
  if (res.components.size() < 2) fail(ErrorKind::NoSplit, "chain support is still connected");

  // select through the virtual-state automaton on the joint types
  Bubble joint;
  joint.dimension = static_cast<std::uint32_t>(sys.joint_dim());
  set_pool(joint, chain_species(reduced));
  const auto amp = joint_amplitudes(reduced);
  for (const auto& comp : res.components) {
    double w = 0;
    for (auto idx : comp) w += std::norm(amp.at(idx));
    res.weights.push_back(w);
  }
  MeasureConfig mc;
  mc.seed = cfg.seed;
  mc.trial = cfg.trial;
  const auto outcome = measure(joint, mc).first.outcome;
  for (std::size_t c = 0; c < res.components.size(); ++c)
    if (std::binary_search(res.components[c].begin(), res.components[c].end(), outcome)) res.chosen = c;

  ChainSystem kept = reduced;
  const auto& chosen = res.components[*res.chosen];
  std::erase_if(kept.chains, [&](const Chain& c) {
    return !std::binary_search(chosen.begin(), chosen.end(), static_cast<std::uint64_t>(joint_type(c, kept.N).state));
  });
  for (std::uint32_t p = 0; p < sys.n; ++p) res.parts.push_back(rebuild_component(kept, {p}, cfg.A, rng));
  res.survivors = std::move(kept);
  return res;
}

}  // namespace aq
