#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aq/core.hpp"
#include "aq/membrane.hpp"
#include "aq/rng.hpp"

namespace aq {

/// Eq. (virt): an empty slot accepts any arrival, a matching second arrival
/// makes the state real, a mismatching one replaces the occupant. The
/// displaced occupant (if any) is returned alongside the new state.
inline std::pair<VirtualState, std::optional<QuantumType>> virtual_state_step_released(const VirtualState& vs,
                                                                                      const QuantumType& arrival) {
  switch (vs.status()) {
    case VirtualStatus::real:
      fail(ErrorKind::AlreadyReal, "virtual state is already real");
    case VirtualStatus::empty:
      return {VirtualState{arrival, std::nullopt}, std::nullopt};
    case VirtualStatus::half:
      break;
  }
  if (*vs.slot1 == arrival) return {VirtualState{arrival, arrival}, std::nullopt};
  return {VirtualState{arrival, std::nullopt}, vs.slot1};
}

inline VirtualState virtual_state_step(const VirtualState& vs, const QuantumType& arrival) {
  return virtual_state_step_released(vs, arrival).first;
}

enum class MeasureProtocol {
  paired,   // re-arm after each mismatching second arrival
  sliding,  // Eq. (virt) applied to the raw arrival stream
};
enum class VirtualPlacement { lowest_id, event_point };

inline std::string to_string(MeasureProtocol p) { return p == MeasureProtocol::paired ? "paired" : "sliding"; }

struct MeasureConfig {
  std::uint64_t seed = 1;
  std::uint64_t trial = 0;
  MeasureProtocol protocol = MeasureProtocol::paired;
  VirtualPlacement placement = VirtualPlacement::lowest_id;
  std::optional<std::uint64_t> event_cell;  // used with event_point
  std::uint64_t arrival_cap = 1'000'000;
  std::uint64_t replenish_A = 0;  // pad the surviving state back to this total; 0 leaves it reduced
};

struct MeasurementRecord {
  std::uint32_t outcome = 0;
  std::vector<QuantumType> arrivals;
  std::uint64_t ticks_to_completion = 0;
  std::optional<std::uint64_t> cell;  // membrane cell hosting the virtual state
};

inline void set_color(Bubble& b, std::optional<std::uint8_t> color) {
  CountTable pool;
  for (const auto& [key, n] : b.pool) {
    QuantumType t = key;
    t.color = color;
    pool[t] += n;
  }
  b.pool = std::move(pool);
  for (auto& q : b.quanta) q.type.color = color;
  for (auto& c : b.membrane) c.color = color;
}

/// Keep only state l, clear colors and re-form the membrane around the
/// component holding grain l.
inline Bubble rebuild_after_measurement(const Bubble& in, std::uint32_t l, std::uint64_t replenish_A = 0) {
  if (l >= in.dimension) fail(ErrorKind::InvalidOutcome, "outcome index out of range");
  const auto net = net_counts(in);
  if (net[2 * l] == 0 && net[2 * l + 1] == 0) fail(ErrorKind::InvalidOutcome, "outcome has zero amplitude");
  Bubble b = in;
  for (std::uint32_t j = 0; j < b.dimension; ++j)
    if (j != l) remove_state(b, j);
  set_color(b, std::nullopt);
  b.virtual_state.reset();
  if (replenish_A > 0) {
    auto c = species_counts(b);
    b.quanta.clear();
    for (Part p : {Part::alpha, Part::beta}) {
      const std::size_t ip = species_index(p, Sign::plus, l), im = species_index(p, Sign::minus, l);
      const std::int64_t n = static_cast<std::int64_t>(c[ip]) - static_cast<std::int64_t>(c[im]);
      const std::uint64_t mag = static_cast<std::uint64_t>(n < 0 ? -n : n);
      const std::uint64_t pairs = mag < replenish_A ? (replenish_A - mag) / 2 : 0;
      c[ip] = (n >= 0 ? mag : 0) + pairs;
      c[im] = (n < 0 ? mag : 0) + pairs;
    }
    set_pool(b, c);
  }
  if (b.layout) {
    auto& g = *b.layout;
    const auto comps = detect_split(in);
    std::vector<std::uint8_t> keep(g.size(), 0);
    keep[l] = 1;
    for (const auto& comp : comps) {
      if (std::none_of(comp.begin(), comp.end(), [&](std::uint64_t id) { return id / 6 == l; })) continue;
      for (auto id : comp) keep[id / 6] = 1;
    }
    for (std::uint32_t j = 0; j < g.size(); ++j) g.interior[j] = g.interior[j] && keep[j] ? 1 : 0;
    g.interior[l] = 1;
    b.membrane = build_membrane(g);
    refresh_meters(b);
  }
  return b;
}

/// Full measurement: color the membrane and quanta, reduce every type to
/// completion, feed count-proportional arrivals to a virtual state until
/// it turns real, then rebuild around the outcome.
inline std::pair<MeasurementRecord, Bubble> measure(const Bubble& in, const MeasureConfig& cfg = {}) {
  (void)probability_weights(in);  // throws AllCountsZero
  Bubble b = in;
  set_color(b, std::uint8_t{1});
  apply_full_reduction(b);

  MeasurementRecord rec;
  if (!b.membrane.empty()) {
    if (cfg.placement == VirtualPlacement::event_point && cfg.event_cell) {
      rec.cell = *cfg.event_cell;
    } else {
      rec.cell = b.membrane.front().id;
      for (const auto& c : b.membrane) rec.cell = std::min(*rec.cell, c.id);
    }
  }

  std::vector<std::uint64_t> urn = species_counts(b);
  std::uint64_t total = 0;
  for (auto n : urn) total += n;
  CounterStream rng(cfg.seed, stream_id("measure", cfg.trial));
  auto draw = [&]() {
    if (total == 0) fail(ErrorKind::Timeout, "no quanta left to reach the virtual state");
    std::uint64_t r = rng.below(total);
    std::size_t k = 0;
    while (r >= urn[k]) r -= urn[k++];
    --urn[k];
    --total;
    return k;
  };
  auto release = [&](const QuantumType& t) {
    ++urn[species_index(t)];
    ++total;
  };

  VirtualState vs;
  while (vs.status() != VirtualStatus::real) {
    if (rec.arrivals.size() >= cfg.arrival_cap) fail(ErrorKind::Timeout, "virtual state did not turn real");
    const QuantumType arrival = species_type(draw());
    rec.arrivals.push_back(arrival);
    const bool second = vs.status() == VirtualStatus::half;
    auto [next, released] = virtual_state_step_released(vs, arrival);
    if (released) release(*released);
    vs = next;
    if (second && cfg.protocol == MeasureProtocol::paired && vs.status() == VirtualStatus::half) {
      release(*vs.slot1);
      vs = VirtualState{};
    }
  }
  rec.outcome = vs.slot1->state;
  rec.ticks_to_completion = rec.arrivals.size();
  b.virtual_state = vs;
  return {rec, rebuild_after_measurement(b, rec.outcome, cfg.replenish_A)};
}

}  // namespace aq
