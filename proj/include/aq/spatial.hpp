#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <thread>
#include <vector>

#include "aq/compiler.hpp"
#include "aq/core.hpp"
#include "aq/kinetics.hpp"
#include "aq/rng.hpp"

namespace aq {

// ---------------------------------------------------------------------------
// geometry

/// n cells on a sphere of radius r along a golden-angle spiral. Cell k sits
/// at height 1 - (2k + 1)/n, so contiguous id runs are latitude bands.
inline std::vector<MembraneCell> sphere_membrane(std::size_t n, double r) {
  std::vector<MembraneCell> cells(n);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t k = 0; k < n; ++k) {
    const double z = 1.0 - (2.0 * static_cast<double>(k) + 1.0) / static_cast<double>(n);
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(k);
    cells[k].id = k;
    cells[k].coords = Vec3{r * rho * std::cos(phi), r * rho * std::sin(phi), r * z};
  }
  return cells;
}

inline std::size_t nearest_cell(const std::vector<MembraneCell>& cells, const Vec3& p) {
  std::size_t best = 0;
  double best_dot = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const double d = cells[k].coords.dot(p);
    if (d > best_dot) {
      best_dot = d;
      best = k;
    }
  }
  return best;
}

/// CDF of the distance between two independent uniform points of a ball,
/// as a function of s = distance / radius.
inline double ball_distance_cdf(double s) {
  s = std::clamp(s, 0.0, 2.0);
  const double s3 = s * s * s;
  return s3 - 9.0 / 16.0 * s3 * s + s3 * s3 / 32.0;
}

/// Radius at which each of `quanta` uniform points expects `neighbors`
/// others within r0.
inline double calibrate_r0(std::uint64_t quanta, double radius, double neighbors) {
  if (quanta < 2) fail(ErrorKind::ConfigError, "r0 calibration needs at least two quanta");
  const double target = std::min(1.0, neighbors / static_cast<double>(quanta - 1));
  double lo = 0.0, hi = 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ball_distance_cdf(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi) * radius;
}

// ---------------------------------------------------------------------------
// rules

struct SpatialMatch {
  std::size_t catalyst;
  std::size_t to;
  double rate;
};

/// Collision rules by block tag. Untagged rule sets have a single table
/// that applies to every quantum.
struct SpatialRules {
  bool tagged = false;
  std::vector<BlockTag> tags;
  std::vector<std::vector<std::vector<SpatialMatch>>> table;  // [tag][from species]
  std::vector<double> load;  // per state: summed coefficient of the tags holding it

  std::optional<std::size_t> slot(const QuantumType& t) const {
    if (!tagged) return 0;
    if (!t.block) return std::nullopt;
    const auto it = std::lower_bound(tags.begin(), tags.end(), *t.block);
    if (it == tags.end() || !(*it == *t.block)) return std::nullopt;
    return static_cast<std::size_t>(it - tags.begin());
  }
};

namespace detail {

inline void add_matches(std::vector<std::vector<SpatialMatch>>& t, const std::vector<ReactionRule>& rules,
                        std::uint32_t dim, double weight) {
  const auto plan = plan_wellmixed(rules, dim, false);
  if (!plan.spawns.empty()) fail(ErrorKind::UnsupportedKind, "spatial backend runs collision rules only");
  for (const auto& cv : plan.stages[0]) t[cv.from].push_back({cv.catalyst, cv.to, cv.rate * weight});
}

}  // namespace detail

inline SpatialRules spatial_rules(const ReactionList& list, std::uint32_t dim) {
  SpatialRules r;
  r.table.assign(1, std::vector<std::vector<SpatialMatch>>(static_cast<std::size_t>(dim) * 4));
  detail::add_matches(r.table[0], list.rules, dim, 1.0);
  r.load.assign(dim, 1.0);
  return r;
}

/// Tagged rules for a decomposition: blocks sharing (i, j) share a tag and
/// split its rate by coefficient.
inline SpatialRules spatial_rules(const PauliDecomposition& d, std::uint32_t dim) {
  SpatialRules r;
  r.tagged = true;
  std::map<BlockTag, double> total;
  for (const auto& b : d) total[BlockTag{b.i, b.j}] += b.coefficient;
  for (const auto& [tag, l] : total) r.tags.push_back(tag);
  r.table.assign(r.tags.size(), std::vector<std::vector<SpatialMatch>>(static_cast<std::size_t>(dim) * 4));
  r.load.assign(dim, 0.0);
  for (const auto& b : d) {
    const BlockTag tag{b.i, b.j};
    const auto k = static_cast<std::size_t>(std::lower_bound(r.tags.begin(), r.tags.end(), tag) - r.tags.begin());
    PauliBlock unit = b;
    unit.coefficient = 1.0;
    detail::add_matches(r.table[k], reactions_for_block(unit).rules, dim, b.coefficient / total[tag]);
  }
  for (const auto& [tag, l] : total) {
    r.load[tag.i] += l;
    if (tag.j != tag.i) r.load[tag.j] += l;
  }
  return r;
}

// ---------------------------------------------------------------------------
// model

/// Everything a tick needs besides the quanta; shared read-only by workers.
struct SpatialModel {
  std::uint32_t dim = 0;
  double radius = 1.0;
  double r0 = 0.0;
  double step = 0.1;  // |velocity| per tick
  std::uint64_t seed = 1;
  std::uint64_t A = 0;  // replenishment target, 0 disables
  double scale = 1.0;   // conversion probability per matching collision, per unit rate and load
  std::vector<MembraneCell> cells;
  std::vector<std::vector<std::size_t>> cells_of_state;  // labelled cells whose tag holds the state
  SpatialRules rules;
};

inline void label_cells(SpatialModel& m, const PauliDecomposition& d) {
  apply_division(m.cells, d, membrane_schedule(d, ScheduleMode::division, 1.0));
  m.cells_of_state.assign(m.dim, {});
  for (std::size_t k = 0; k < m.cells.size(); ++k) {
    const auto& l = m.cells[k].division_label;
    if (!l) continue;
    m.cells_of_state[l->i].push_back(k);
    if (l->j != l->i) m.cells_of_state[l->j].push_back(k);
  }
}

/// A fresh quantum of type t: uniform position in the ball, isotropic
/// velocity, and (for tagged rules) the tag of a random labelled cell that
/// holds its state. Depends only on the seed and the id.
inline AmplitudeQuantum make_quantum(const SpatialModel& m, std::uint64_t id, QuantumType t) {
  CounterStream s(m.seed, stream_id("quantum", id));
  AmplitudeQuantum q;
  q.id = id;
  const double R = m.radius;
  do {
    q.position = Vec3{(2 * s.uniform() - 1) * R, (2 * s.uniform() - 1) * R, (2 * s.uniform() - 1) * R};
  } while (q.position.norm2() >= R * R);
  const double z = 2 * s.uniform() - 1;
  const double phi = 2 * std::numbers::pi * s.uniform();
  const double rho = std::sqrt(std::max(0.0, 1 - z * z));
  q.velocity = Vec3{rho * std::cos(phi), rho * std::sin(phi), z} * m.step;
  if (m.rules.tagged && t.state < m.cells_of_state.size() && !m.cells_of_state[t.state].empty()) {
    const auto& cs = m.cells_of_state[t.state];
    t = reflection_tag(t, m.cells[cs[s.below(cs.size())]]);
  }
  q.type = t;
  return q;
}

/// Ballistic move for one tick with specular reflection at the sphere. A
/// wall hit applies the tag of the nearest membrane cell.
inline void move_quantum(AmplitudeQuantum& q, const SpatialModel& m) {
  const double R = m.radius, R2 = R * R;
  if (q.position.norm2() > R2 * (1 + 1e-9)) fail(ErrorKind::EscapedQuantum, "quantum " + std::to_string(q.id) + " is outside the membrane");
  Vec3 p = q.position, v = q.velocity;
  double remaining = 1.0;
  for (int bounce = 0;; ++bounce) {
    const Vec3 end = p + v * remaining;
    if (end.norm2() <= R2) {
      p = end;
      break;
    }
    if (bounce == 8) fail(ErrorKind::EscapedQuantum, "quantum " + std::to_string(q.id) + " left the bubble; dt too large");
    const double a = v.norm2(), b = 2 * p.dot(v), c = p.norm2() - R2;
    const double s = std::clamp((-b + std::sqrt(std::max(0.0, b * b - 4 * a * c))) / (2 * a), 0.0, remaining);
    const Vec3 hit = p + v * s;
    const Vec3 n = hit * (1.0 / hit.norm());
    v = v - n * (2 * v.dot(n));
    q.type = reflection_tag(q.type, m.cells[nearest_cell(m.cells, n)]);
    p = hit;
    remaining -= s;
  }
  // rounding can leave the point a hair outside
  if (p.norm2() > R2) p = p * (R / p.norm() * (1 - 1e-12));
  q.position = p;
  q.velocity = v;
}

/// For each of the first `own` points, the index of its mutual nearest
/// neighbor within r0 (ties to the lower id), or npos.
inline std::vector<std::size_t> mutual_partners(const std::vector<const AmplitudeQuantum*>& pts, std::size_t own,
                                                double r0) {
  constexpr auto npos = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> out(own, npos);
  if (pts.size() < 2 || r0 <= 0) return out;
  Vec3 lo = pts[0]->position, hi = lo;
  for (const auto* q : pts) {
    lo = Vec3{std::min(lo.x, q->position.x), std::min(lo.y, q->position.y), std::min(lo.z, q->position.z)};
    hi = Vec3{std::max(hi.x, q->position.x), std::max(hi.y, q->position.y), std::max(hi.z, q->position.z)};
  }
  // any cell edge >= r0 keeps the 27-cell scan exact; cap the grid at ~4 cells per point
  const double volume = std::max(hi.x - lo.x, r0) * std::max(hi.y - lo.y, r0) * std::max(hi.z - lo.z, r0);
  const double edge = std::max(r0, std::cbrt(volume / (4.0 * static_cast<double>(pts.size()))));
  auto cells_along = [&](double a, double b) { return static_cast<std::int64_t>(std::floor((b - a) / edge)) + 1; };
  const std::int64_t gx = cells_along(lo.x, hi.x), gy = cells_along(lo.y, hi.y), gz = cells_along(lo.z, hi.z);
  auto coord = [&](const Vec3& p) {
    return std::array<std::int64_t, 3>{std::min(gx - 1, static_cast<std::int64_t>((p.x - lo.x) / edge)),
                                       std::min(gy - 1, static_cast<std::int64_t>((p.y - lo.y) / edge)),
                                       std::min(gz - 1, static_cast<std::int64_t>((p.z - lo.z) / edge))};
  };
  auto key = [&](std::int64_t x, std::int64_t y, std::int64_t z) { return static_cast<std::size_t>((x * gy + y) * gz + z); };
  const std::size_t ncell = static_cast<std::size_t>(gx * gy * gz);
  std::vector<std::size_t> start(ncell + 1, 0), order(pts.size());
  std::vector<std::size_t> cell_of(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto c = coord(pts[i]->position);
    cell_of[i] = key(c[0], c[1], c[2]);
    ++start[cell_of[i] + 1];
  }
  for (std::size_t c = 0; c < ncell; ++c) start[c + 1] += start[c];
  {
    std::vector<std::size_t> fill(start.begin(), start.end() - 1);
    for (std::size_t i = 0; i < pts.size(); ++i) order[fill[cell_of[i]]++] = i;
  }
  const double r2 = r0 * r0;
  std::vector<std::size_t> nearest(pts.size(), npos - 1);  // npos - 1: not computed yet
  auto find = [&](std::size_t i) {
    if (nearest[i] != npos - 1) return nearest[i];
    const auto c = coord(pts[i]->position);
    std::size_t best = npos;
    double best_d = r2;
    std::uint64_t best_id = 0;
    for (std::int64_t x = std::max<std::int64_t>(0, c[0] - 1); x <= std::min(gx - 1, c[0] + 1); ++x)
      for (std::int64_t y = std::max<std::int64_t>(0, c[1] - 1); y <= std::min(gy - 1, c[1] + 1); ++y)
        for (std::int64_t z = std::max<std::int64_t>(0, c[2] - 1); z <= std::min(gz - 1, c[2] + 1); ++z) {
          const std::size_t k = key(x, y, z);
          for (std::size_t o = start[k]; o < start[k + 1]; ++o) {
            const std::size_t j = order[o];
            if (j == i) continue;
            const double d = (pts[j]->position - pts[i]->position).norm2();
            if (d > r2) continue;
            if (best == npos || d < best_d || (d == best_d && pts[j]->id < best_id)) {
              best = j;
              best_d = d;
              best_id = pts[j]->id;
            }
          }
        }
    return nearest[i] = best;
  };
  for (std::size_t i = 0; i < own; ++i) {
    const std::size_t j = find(i);
    if (j != npos && find(j) == i) out[i] = j;
  }
  return out;
}

/// Type of `self` after a collision with `partner`, given the uniform
/// draw u; unchanged when no rule fires.
inline QuantumType collide_type(const SpatialModel& m, const QuantumType& self, const QuantumType& partner, double u) {
  const auto slot = m.rules.slot(self);
  if (!slot) return self;
  const std::size_t from = species_index(self), cat = species_index(partner);
  double acc = 0;
  for (const auto& mt : m.rules.table[*slot][from]) {
    if (mt.catalyst != cat) continue;
    acc += m.scale * mt.rate * m.rules.load[self.state];
    if (u < acc) {
      QuantumType t = self;
      const auto s = species_type(mt.to);
      t.part = s.part;
      t.sign = s.sign;
      t.state = s.state;
      return t;
    }
  }
  return self;
}

/// Largest total conversion probability any collision can reach.
inline double max_collision_probability(const SpatialModel& m) {
  double worst = 0;
  for (const auto& tab : m.rules.table)
    for (std::size_t from = 0; from < tab.size(); ++from) {
      std::map<std::size_t, double> by_cat;
      for (const auto& mt : tab[from]) by_cat[mt.catalyst] += m.scale * mt.rate * m.rules.load[from / 4];
      for (const auto& [c, p] : by_cat) worst = std::max(worst, p);
    }
  return worst;
}

/// Fraction of quanta that sit in a mutual-nearest pair within r0.
inline double collision_fraction(const std::vector<AmplitudeQuantum>& quanta, double r0) {
  if (quanta.empty()) return 0;
  std::vector<const AmplitudeQuantum*> pts;
  pts.reserve(quanta.size());
  for (const auto& q : quanta) pts.push_back(&q);
  const auto p = mutual_partners(pts, pts.size(), r0);
  const auto paired = std::count_if(p.begin(), p.end(), [](std::size_t j) { return j != std::numeric_limits<std::size_t>::max(); });
  return static_cast<double>(paired) / static_cast<double>(quanta.size());
}

// ---------------------------------------------------------------------------
// partitioned engine

struct PartitionConfig {
  std::uint32_t workers = 1;
  std::uint64_t channel_capacity = std::uint64_t{1} << 20;  // quanta per link per tick
  std::vector<std::uint32_t> hung;  // workers that stop replying
  std::uint64_t hang_tick = 0;      // first tick they miss
  bool threads = true;
};

/// floor(eps * k) distinct workers drawn from the hang seed.
inline std::vector<std::uint32_t> choose_hung(std::uint32_t k, double eps, std::uint64_t seed) {
  if (eps < 0 || eps >= 0.5) fail(ErrorKind::ConfigError, "hang fraction must lie in [0, 0.5)");
  const auto k0 = static_cast<std::uint32_t>(std::floor(eps * k + 1e-12));
  std::vector<std::uint32_t> all(k);
  std::iota(all.begin(), all.end(), 0u);
  CounterStream s(seed, stream_id("hang"));
  for (std::uint32_t i = 0; i < k0; ++i) std::swap(all[i], all[i + s.below(k - i)]);
  all.resize(k0);
  std::sort(all.begin(), all.end());
  return all;
}

struct PartitionStats {
  std::uint64_t crossings = 0;  // quanta handed to a neighbor
  std::uint64_t deferred = 0;   // hand-offs postponed by channel capacity
  std::uint64_t absorbed = 0;   // quanta swallowed by hung workers
  std::uint64_t created = 0;
  std::uint64_t deleted = 0;
};

/// k workers, each owning an equal-width slab along x. Per tick: move and
/// hand off crossing quanta over bounded channels, exchange halos of width
/// 2 r0, resolve collisions locally, then the coordinator replenishes.
/// One worker is the serial engine.
class SpatialEngine {
 public:
  SpatialEngine(SpatialModel model, std::vector<AmplitudeQuantum> quanta, std::uint64_t next_id, PartitionConfig p = {})
      : m_(std::move(model)), p_(std::move(p)), next_id_(next_id) {
    if (p_.workers == 0) fail(ErrorKind::TooFewWorkers, "need at least one worker");
    const double width = 2 * m_.radius / p_.workers;
    if (p_.workers > 1 && width < 2 * m_.r0) fail(ErrorKind::ConfigError, "slab narrower than the 2 r0 halo");
    if (p_.workers > 1 && m_.step > width) fail(ErrorKind::ConfigError, "quanta would skip a slab in one tick");
    for (auto h : p_.hung)
      if (h >= p_.workers) fail(ErrorKind::ConfigError, "hung worker index out of range");
    w_.resize(p_.workers);
    for (std::uint32_t k = 0; k < p_.workers; ++k) {
      w_[k].lo = -m_.radius + width * k;
      w_[k].hi = k + 1 == p_.workers ? m_.radius : -m_.radius + width * (k + 1);
      w_[k].out.resize(p_.workers);
    }
    for (auto& q : quanta) w_[region(q.position.x)].own.push_back(std::move(q));
  }

  std::uint32_t region(double x) const {
    const double width = 2 * m_.radius / p_.workers;
    const auto k = static_cast<std::int64_t>(std::floor((x + m_.radius) / width));
    return static_cast<std::uint32_t>(std::clamp<std::int64_t>(k, 0, p_.workers - 1));
  }

  void tick(std::uint64_t t) {
    for (auto h : p_.hung)
      if (t >= p_.hang_tick) w_[h].hung = true;

    // move, hand off
    run([&](std::uint32_t k) {
      auto& w = w_[k];
      for (auto& q : w.own) move_quantum(q, m_);
      std::vector<AmplitudeQuantum> stay, wait;
      std::vector<std::uint64_t> used(p_.workers, 0);
      auto send = [&](AmplitudeQuantum&& q) {
        const auto dst = region(q.position.x);
        if (dst == k) {
          stay.push_back(std::move(q));
        } else if (used[dst] < p_.channel_capacity) {
          ++used[dst];
          w.out[dst].push_back(std::move(q));
        } else {
          wait.push_back(std::move(q));
        }
      };
      for (auto& q : w.pending) send(std::move(q));
      for (auto& q : w.own) send(std::move(q));
      w.own = std::move(stay);
      w.pending = std::move(wait);
    });
    for (std::uint32_t src = 0; src < p_.workers; ++src) {
      auto& w = w_[src];
      if (w.hung) continue;
      stats_.deferred += w.pending.size();
      for (std::uint32_t dst = 0; dst < p_.workers; ++dst) {
        auto& box = w.out[dst];
        stats_.crossings += box.size();
        if (w_[dst].hung) {
          stats_.absorbed += box.size();
        } else {
          for (auto& q : box) w_[dst].own.push_back(std::move(q));
        }
        box.clear();
      }
    }

    // halos, then collisions on pre-collision types
    run([&](std::uint32_t k) {
      auto& w = w_[k];
      w.halo_lo.clear();
      w.halo_hi.clear();
      if (p_.workers == 1) return;
      for (const auto& q : w.own) {
        if (q.position.x < w.lo + 2 * m_.r0) w.halo_lo.push_back(q);
        if (q.position.x >= w.hi - 2 * m_.r0) w.halo_hi.push_back(q);
      }
    });
    run([&](std::uint32_t k) {
      auto& w = w_[k];
      std::vector<const AmplitudeQuantum*> pts;
      pts.reserve(w.own.size());
      for (const auto& q : w.own) pts.push_back(&q);
      if (k > 0 && !w_[k - 1].hung)
        for (const auto& q : w_[k - 1].halo_hi) pts.push_back(&q);
      if (k + 1 < p_.workers && !w_[k + 1].hung)
        for (const auto& q : w_[k + 1].halo_lo) pts.push_back(&q);
      const auto partner = mutual_partners(pts, w.own.size(), m_.r0);
      std::vector<QuantumType> next(w.own.size());
      for (std::size_t i = 0; i < w.own.size(); ++i) {
        next[i] = w.own[i].type;
        if (partner[i] == std::numeric_limits<std::size_t>::max()) continue;
        const auto& other = *pts[partner[i]];
        const bool low = w.own[i].id < other.id;
        CounterStream s(m_.seed, stream_id("collide", t, low ? w.own[i].id : other.id));
        const double u_low = s.uniform(), u_high = s.uniform();
        next[i] = collide_type(m_, w.own[i].type, other.type, low ? u_low : u_high);
      }
      for (std::size_t i = 0; i < w.own.size(); ++i) w.own[i].type = next[i];
    });

    if (m_.A > 0) replenish();
  }

  /// Species counts over the workers that still reply.
  std::vector<std::uint64_t> species() const {
    std::vector<std::uint64_t> c(static_cast<std::size_t>(m_.dim) * 4, 0);
    for (const auto& w : w_) {
      if (w.hung) continue;
      for (const auto& q : w.own) ++c[species_index(q.type)];
      for (const auto& q : w.pending) ++c[species_index(q.type)];
    }
    return c;
  }

  /// Quanta of the replying workers in canonical id order.
  std::vector<AmplitudeQuantum> collect() const {
    std::vector<AmplitudeQuantum> all;
    for (const auto& w : w_) {
      if (w.hung) continue;
      all.insert(all.end(), w.own.begin(), w.own.end());
      all.insert(all.end(), w.pending.begin(), w.pending.end());
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return all;
  }

  std::uint64_t next_id() const { return next_id_; }
  const PartitionStats& stats() const { return stats_; }
  const SpatialModel& model() const { return m_; }

 private:
  struct Worker {
    double lo = 0, hi = 0;
    bool hung = false;
    std::vector<AmplitudeQuantum> own, pending, halo_lo, halo_hi;
    std::vector<std::vector<AmplitudeQuantum>> out;
  };

  template <class F>
  void run(F&& f) {
    std::vector<std::uint32_t> live;
    for (std::uint32_t k = 0; k < p_.workers; ++k)
      if (!w_[k].hung) live.push_back(k);
    if (!p_.threads || live.size() < 2) {
      for (auto k : live) f(k);
      return;
    }
    std::vector<std::exception_ptr> err(live.size());
    {
      std::vector<std::jthread> pool;
      pool.reserve(live.size());
      for (std::size_t i = 0; i < live.size(); ++i)
        pool.emplace_back([&, i] {
          try {
            f(live[i]);
          } catch (...) {
            err[i] = std::current_exception();
          }
        });
    }
    for (auto& e : err)
      if (e) std::rethrow_exception(e);
  }

  // Coordinator barrier: totals back to A per (part, state). Deletions take
  // the highest ids of each sign; new pairs get fresh ids.
  void replenish() {
    const auto c = species();
    for (std::size_t k = 0; k + 1 < c.size(); k += 2) {
      const std::int64_t net = static_cast<std::int64_t>(c[k]) - static_cast<std::int64_t>(c[k + 1]);
      const std::uint64_t total = c[k] + c[k + 1];
      const std::uint64_t target = replenish_target(net, m_.A);
      if (total < target) {
        for (std::uint64_t q = 0; q < (target - total) / 2; ++q) {
          for (std::size_t s : {k, k + 1}) {
            auto quantum = make_quantum(m_, next_id_++, species_type(s));
            auto& w = w_[region(quantum.position.x)];
            ++stats_.created;
            if (w.hung) {
              ++stats_.absorbed;
            } else {
              w.own.push_back(std::move(quantum));
            }
          }
        }
      } else if (total > target) {
        const std::uint64_t drop = (total - target) / 2;
        for (std::size_t s : {k, k + 1}) {
          std::vector<std::uint64_t> ids;
          for (const auto& w : w_) {
            if (w.hung) continue;
            for (const auto* list : {&w.own, &w.pending})
              for (const auto& q : *list)
                if (species_index(q.type) == s) ids.push_back(q.id);
          }
          const auto cut = ids.end() - static_cast<std::ptrdiff_t>(drop);
          std::nth_element(ids.begin(), cut, ids.end());
          const std::set<std::uint64_t> gone(cut, ids.end());
          for (auto& w : w_) {
            if (w.hung) continue;
            for (auto* list : {&w.own, &w.pending})
              std::erase_if(*list, [&](const AmplitudeQuantum& q) { return gone.count(q.id) > 0; });
          }
          stats_.deleted += drop;
        }
      }
    }
  }

  SpatialModel m_;
  PartitionConfig p_;
  std::uint64_t next_id_ = 0;
  std::vector<Worker> w_;
  PartitionStats stats_;
};

// ---------------------------------------------------------------------------
// bubble-level entry points

/// Explicit quanta for every pooled one, ids in species order.
inline void materialize(Bubble& b, const SpatialModel& m) {
  const auto c = species_counts(b);
  b.pool.clear();
  for (const auto& q : b.quanta)
    if (q.position.norm2() > m.radius * m.radius) fail(ErrorKind::EscapedQuantum, "quantum outside the membrane");
  for (std::size_t s = 0; s < c.size(); ++s) {
    std::uint64_t have = 0;
    for (const auto& q : b.quanta) have += species_index(q.type) == s ? 1 : 0;
    for (std::uint64_t n = have; n < c[s]; ++n) b.quanta.push_back(make_quantum(m, b.next_id++, species_type(s)));
  }
  b.radius = m.radius;
  b.collision_radius = m.r0;
  b.membrane = m.cells;
}

/// Model for a bubble and its rules; r0 from the ball distance CDF unless
/// configured.
inline SpatialModel spatial_model(const Bubble& b, SpatialRules rules, const EngineConfig& cfg,
                                  std::size_t membrane_cells = 256) {
  SpatialModel m;
  m.dim = b.dimension;
  m.radius = cfg.bubble_radius;
  m.step = cfg.speed * cfg.bubble_radius;
  m.seed = cfg.seed;
  m.A = cfg.replenish ? cfg.A : 0;
  m.rules = std::move(rules);
  m.cells = sphere_membrane(membrane_cells, m.radius);
  m.cells_of_state.assign(m.dim, {});
  const std::uint64_t total = quantum_count(b);
  m.r0 = cfg.r0 > 0 ? cfg.r0 : calibrate_r0(total, m.radius, cfg.neighbors);
  return m;
}

/// Conversion probability per matching collision, set so expected event
/// counts equal the mass-action count gamma * n_from * n_cat with
/// gamma = angle / A.
inline void calibrate_scale(SpatialModel& m, const std::vector<AmplitudeQuantum>& quanta, double angle, std::uint64_t A) {
  const double qc = collision_fraction(quanta, m.r0);
  if (qc <= 0) fail(ErrorKind::ConfigError, "no collisions at this r0");
  m.scale = angle / static_cast<double>(A) * static_cast<double>(quanta.size() - 1) / qc;
  if (max_collision_probability(m) > 1.0)
    fail(ErrorKind::ConfigError, "collision conversion probability exceeds one; reduce dt or raise r0");
}

struct SpatialReport {
  std::uint64_t ticks = 0;
  double angle = 0;  // per tick
  double r0 = 0;
  double scale = 0;
  PartitionStats stats;
};

/// Spatial evolution under H for Hamiltonian time t with real membrane
/// division labels (division mode only).
inline Bubble evolve_spatial(const Bubble& in, const CMatrix& h, double t, const EngineConfig& cfg,
                             const PartitionConfig& part = {}, const TickObserver& observe = {},
                             SpatialReport* report = nullptr) {
  if (t < 0) fail(ErrorKind::ConfigError, "negative duration");
  if (h.rows() != in.dimension) fail(ErrorKind::DimensionMismatch, "H and bubble differ in dimension");
  if (cfg.mode != ScheduleMode::division) fail(ErrorKind::ConfigError, "spatial backend runs division mode only");
  const auto d = pauli_decompose(h);
  if (t == 0 || d.empty()) return in;
  const double angle0 = cfg.omega() * cfg.dt;
  if (!(angle0 > 0) || angle0 > cfg.stability) fail(ErrorKind::ConfigError, "omega * dt outside (0, stability]");
  if (angle0 * rotation_load(d, in.dimension) > cfg.stability)
    fail(ErrorKind::ConfigError, "per-tick rotation exceeds the stability guard; reduce dt");
  const auto ticks = static_cast<std::uint64_t>(std::ceil(t / angle0 - 1e-9));
  const double angle = t / static_cast<double>(ticks);

  SpatialModel m = spatial_model(in, spatial_rules(d, in.dimension), cfg);
  label_cells(m, d);
  Bubble b = in;
  for (auto& q : b.quanta) q.type = make_quantum(m, q.id, q.type).type;
  materialize(b, m);
  b.membrane = m.cells;
  calibrate_scale(m, b.quanta, angle, cfg.A);

  SpatialEngine eng(m, std::move(b.quanta), b.next_id, part);
  double time = 0;
  for (std::uint64_t k = 0; k < ticks; ++k) {
    eng.tick(k);
    time += angle;
    if (observe) {
      const auto c = eng.species();
      observe({k + 1, time, &c, [&eng] { return eng.collect(); }});
    }
  }
  b.quanta = eng.collect();
  b.next_id = eng.next_id();
  if (report) *report = {ticks, angle, m.r0, m.scale, eng.stats()};
  return b;
}

/// One serial tick of an explicit-quanta bubble under a model.
inline void step_spatial(Bubble& b, const SpatialModel& m, std::uint64_t tick) {
  SpatialEngine eng(m, std::move(b.quanta), b.next_id, {});
  eng.tick(tick);
  b.quanta = eng.collect();
  b.next_id = eng.next_id();
}

}  // namespace aq
