#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>
#include <unordered_map>
#include <vector>

#include "aq/core.hpp"
#include "aq/kinetics.hpp"

namespace aq {

struct MembraneConfig {
  double X0 = 0.01;  // retract below this normalized modulus
  double X1 = 0.1;   // extend above this normalized modulus
  bool retract_first = true;
  std::uint64_t seed_total = 100;  // per-type total seeded into extended grains
  int max_passes = 64;
};

// Face directions: +x, -x, +y, -y, +z, -z.
constexpr std::array<std::array<int, 3>, 6> kFaces{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};

// Cells sit slightly inside the grain face so that caps facing each other
// across an empty grain are farther apart than side cells of neighbours.
constexpr double kCellInset = 0.4;
constexpr double kLayoutAdjacency = 1.05;  // membrane adjacency radius / spacing

inline std::optional<std::uint32_t> neighbor(const GrainLayout& g, std::uint32_t j, int face) {
  auto c = g.cell(j);
  std::array<std::int64_t, 3> n{};
  for (int a = 0; a < 3; ++a) {
    n[a] = static_cast<std::int64_t>(c[a]) + kFaces[face][a];
    if (n[a] < 0 || n[a] >= static_cast<std::int64_t>(g.dims[a])) return std::nullopt;
  }
  return g.index(static_cast<std::uint32_t>(n[0]), static_cast<std::uint32_t>(n[1]), static_cast<std::uint32_t>(n[2]));
}

inline bool is_interior(const GrainLayout& g, std::uint32_t j) { return j < g.interior.size() && g.interior[j]; }

/// Membrane cells on every face between an interior grain and the outside.
/// Cell ids are grain * 6 + face, so they are stable across rebuilds.
inline std::vector<MembraneCell> build_membrane(const GrainLayout& g) {
  std::vector<MembraneCell> cells;
  for (std::uint32_t j = 0; j < g.size(); ++j) {
    if (!is_interior(g, j)) continue;
    for (int f = 0; f < 6; ++f) {
      const auto nb = neighbor(g, j, f);
      if (nb && is_interior(g, *nb)) continue;
      MembraneCell c;
      c.id = static_cast<std::uint64_t>(j) * 6 + static_cast<std::uint64_t>(f);
      const Vec3 d{static_cast<double>(kFaces[f][0]), static_cast<double>(kFaces[f][1]), static_cast<double>(kFaces[f][2])};
      c.coords = g.coords(j) + (kCellInset * g.spacing) * d;
      c.inner_grain = j;
      cells.push_back(c);
    }
  }
  return cells;
}

/// Attach a grain layout to a bubble (one grain per basic state) and build
/// its membrane. Interior defaults to every grain with a nonzero net count.
inline void attach_layout(Bubble& b, GrainLayout g, bool interior_from_counts = true) {
  if (g.size() != b.dimension) fail(ErrorKind::DimensionMismatch, "layout size differs from bubble dimension");
  if (interior_from_counts) {
    const auto net = net_counts(b);
    g.interior.assign(g.size(), 0);
    for (std::uint32_t j = 0; j < g.size(); ++j) g.interior[j] = (net[2 * j] != 0 || net[2 * j + 1] != 0) ? 1 : 0;
  } else if (g.interior.size() != g.size()) {
    g.interior.assign(g.size(), 1);
  }
  b.layout = std::move(g);
  b.collision_radius = kLayoutAdjacency * b.layout->spacing;
  b.membrane = build_membrane(*b.layout);
}

/// Normalized amplitude modulus per grain.
inline std::vector<double> grain_moduli(const Bubble& b) {
  const auto net = net_counts(b);
  double norm2 = 0;
  for (auto x : net) norm2 += static_cast<double>(x) * static_cast<double>(x);
  std::vector<double> m(b.dimension, 0.0);
  if (norm2 == 0) return m;
  for (std::uint32_t j = 0; j < b.dimension; ++j)
    m[j] = std::hypot(static_cast<double>(net[2 * j]), static_cast<double>(net[2 * j + 1])) / std::sqrt(norm2);
  return m;
}

inline void refresh_meters(Bubble& b) {
  const auto net = net_counts(b);
  for (auto& c : b.membrane)
    if (c.inner_grain) c.amplitude_meter = {net[2 * *c.inner_grain], net[2 * *c.inner_grain + 1]};
}

inline void remove_state(Bubble& b, std::uint32_t j) {
  std::erase_if(b.pool, [&](const auto& kv) { return kv.first.state == j; });
  std::erase_if(b.quanta, [&](const AmplitudeQuantum& q) { return q.type.state == j; });
}

inline void seed_pairs(Bubble& b, std::uint32_t j, std::uint64_t total) {
  for (Part p : {Part::alpha, Part::beta}) {
    b.pool[qt(p, Sign::plus, j)] += total / 2;
    b.pool[qt(p, Sign::minus, j)] += total / 2;
  }
  std::erase_if(b.pool, [](const auto& kv) { return kv.second == 0; });
}

inline std::vector<std::uint32_t> boundary_grains(const GrainLayout& g) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t j = 0; j < g.size(); ++j) {
    if (!is_interior(g, j)) continue;
    for (int f = 0; f < 6; ++f) {
      const auto nb = neighbor(g, j, f);
      if (!nb || !is_interior(g, *nb)) {
        out.push_back(j);
        break;
      }
    }
  }
  return out;
}

struct MembraneUpdate {
  std::vector<std::uint32_t> retracted;
  std::vector<std::uint32_t> extended;
};

/// Move the membrane one step: boundary grains whose modulus fell below X0
/// leave the bubble (their quanta are deleted), repeatedly, then grains
/// outside boundary grains with modulus above X1 join it, seeded with
/// zero-net pairs. Grains retracted in this call are not re-extended, and
/// grains extended in this call are not retracted until the next call.
inline MembraneUpdate update_membrane(Bubble& b, const MembraneConfig& cfg) {
  if (!b.layout) fail(ErrorKind::ConfigError, "membrane dynamics needs a grain layout");
  if (!(cfg.X0 > 0 && cfg.X0 < cfg.X1)) fail(ErrorKind::ConfigError, "need 0 < X0 < X1");
  auto& g = *b.layout;
  MembraneUpdate upd;
  std::set<std::uint32_t> retracted;

  auto retract = [&] {
    for (int pass = 0; pass < cfg.max_passes; ++pass) {
      const auto m = grain_moduli(b);
      std::vector<std::uint32_t> drop;
      for (auto j : boundary_grains(g))
        if (m[j] < cfg.X0 && std::find(upd.extended.begin(), upd.extended.end(), j) == upd.extended.end()) drop.push_back(j);
      if (drop.empty()) return;
      std::size_t interior = 0;
      for (auto f : g.interior) interior += f;
      if (drop.size() >= interior) fail(ErrorKind::EmptyBubble, "retraction would remove the last grain");
      for (auto j : drop) {
        g.interior[j] = 0;
        remove_state(b, j);
        retracted.insert(j);
        upd.retracted.push_back(j);
      }
    }
  };
  auto extend = [&] {
    const auto m = grain_moduli(b);
    std::set<std::uint32_t> add;
    for (auto j : boundary_grains(g)) {
      if (m[j] <= cfg.X1) continue;
      for (int f = 0; f < 6; ++f) {
        const auto nb = neighbor(g, j, f);
        if (nb && !is_interior(g, *nb) && !retracted.count(*nb)) add.insert(*nb);
      }
    }
    for (auto j : add) {
      g.interior[j] = 1;
      seed_pairs(b, j, cfg.seed_total);
      upd.extended.push_back(j);
    }
  };
  if (cfg.retract_first) {
    retract();
    extend();
  } else {
    extend();
    retract();
  }
  b.membrane = build_membrane(g);
  refresh_meters(b);
  return upd;
}

/// Probability-weighted mean of grain coordinates.
inline Vec3 bubble_centroid(const Bubble& b) {
  if (!b.layout) fail(ErrorKind::ConfigError, "centroid needs grain coordinates");
  const auto p = probability_weights(b);
  Vec3 c;
  for (std::uint32_t j = 0; j < b.dimension; ++j) c += p[j] * b.layout->coords(j);
  return c;
}

inline Vec3 centroid_of(const StateVector& psi, const GrainLayout& g) {
  Vec3 c;
  const double n2 = psi.squaredNorm();
  if (n2 == 0) fail(ErrorKind::AllCountsZero, "zero state");
  for (Eigen::Index j = 0; j < psi.size(); ++j) c += (std::norm(psi[j]) / n2) * g.coords(static_cast<std::uint32_t>(j));
  return c;
}

/// Well-mixed evolution with a moving membrane: only interior grains are
/// replenished (so exterior grains hold no quanta and act as walls), and
/// the membrane is updated every `interval` of Hamiltonian time.
inline Bubble evolve_with_membrane(Bubble b, const CMatrix& h, double t, double interval, EngineConfig cfg,
                                   const MembraneConfig& mcfg,
                                   const std::function<void(double, const Bubble&)>& observe = {}) {
  if (!b.layout) fail(ErrorKind::ConfigError, "membrane dynamics needs a grain layout");
  if (!(interval > 0)) fail(ErrorKind::ConfigError, "membrane interval must be positive");
  const auto d = pauli_decompose(h);
  const auto chunks = static_cast<std::uint64_t>(std::ceil(t / interval - 1e-9));
  std::uint64_t tick = 0;
  double time = 0;
  if (observe) observe(time, b);
  for (std::uint64_t k = 0; k < chunks; ++k) {
    const double span = std::min(interval, t - time);
    cfg.active_states = b.layout->interior;
    auto c = species_counts(b);
    tick = run_phases(c, plan_phases(d, b.dimension, span, cfg), b.dimension, cfg, {}, tick);
    b.quanta.clear();
    set_pool(b, c);
    time += span;
    update_membrane(b, mcfg);
    if (observe) observe(time, b);
  }
  return b;
}

// ---------------------------------------------------------------------------
// membrane connectivity

/// Connected components of the membrane graph (cells closer than r0 are
/// adjacent). Each component lists cell ids in ascending order; components
/// are ordered by their smallest id.
inline std::vector<std::vector<std::uint64_t>> membrane_components(const std::vector<MembraneCell>& cells, double r0) {
  const std::size_t n = cells.size();
  if (n == 0) return {};
  if (!(r0 > 0)) fail(ErrorKind::ConfigError, "adjacency radius must be positive");
  struct Key {
    std::int64_t x, y, z;
    bool operator==(const Key&) const = default;
  };
  struct Hash {
    std::size_t operator()(const Key& k) const {
      return static_cast<std::size_t>(k.x * 73856093LL ^ k.y * 19349663LL ^ k.z * 83492791LL);
    }
  };
  auto key = [&](const Vec3& p) {
    return Key{static_cast<std::int64_t>(std::floor(p.x / r0)), static_cast<std::int64_t>(std::floor(p.y / r0)),
               static_cast<std::int64_t>(std::floor(p.z / r0))};
  };
  std::unordered_map<Key, std::vector<std::size_t>, Hash> grid;
  for (std::size_t i = 0; i < n; ++i) grid[key(cells[i].coords)].push_back(i);

  const double r2 = r0 * r0;
  std::vector<int> comp(n, -1);
  std::vector<std::vector<std::uint64_t>> out;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    std::deque<std::size_t> queue{s};
    comp[s] = id;
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      out[id].push_back(cells[i].id);
      const Key k = key(cells[i].coords);
      for (std::int64_t dx = -1; dx <= 1; ++dx)
        for (std::int64_t dy = -1; dy <= 1; ++dy)
          for (std::int64_t dz = -1; dz <= 1; ++dz) {
            const auto it = grid.find(Key{k.x + dx, k.y + dy, k.z + dz});
            if (it == grid.end()) continue;
            for (std::size_t j : it->second) {
              if (comp[j] >= 0) continue;
              if ((cells[j].coords - cells[i].coords).norm2() <= r2) {
                comp[j] = id;
                queue.push_back(j);
              }
            }
          }
    }
  }
  for (auto& c : out) std::sort(c.begin(), c.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

inline std::vector<std::vector<std::uint64_t>> detect_split(const Bubble& b) {
  return membrane_components(b.membrane, b.collision_radius);
}

}  // namespace aq
