#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <complex>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "aq/error.hpp"

namespace aq {

using cplx = std::complex<double>;
using StateVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;

enum class Part : std::uint8_t { alpha = 0, beta = 1 };
enum class Sign : std::int8_t { minus = -1, plus = 1 };

constexpr Sign operator-(Sign s) { return s == Sign::plus ? Sign::minus : Sign::plus; }
constexpr Sign operator*(Sign a, Sign b) { return a == b ? Sign::plus : Sign::minus; }
constexpr int value(Sign s) { return static_cast<int>(s); }

// Quanta carry one of four unit values {+1, +i, -1, -i}; the exponent k of
// i^k is additive under multiplication, which is what chains rely on.
constexpr int phase_exponent(Part p, Sign s) {
  return (p == Part::beta ? 1 : 0) + (s == Sign::minus ? 2 : 0);
}
constexpr Part part_of_exponent(int k) { return (k & 1) ? Part::beta : Part::alpha; }
constexpr Sign sign_of_exponent(int k) { return (k & 2) ? Sign::minus : Sign::plus; }

struct BlockTag {
  std::uint32_t i = 0;
  std::uint32_t j = 0;
  auto operator<=>(const BlockTag&) const = default;
};

/// Tag of an amplitude quantum: part, sign, basic state and the fixed set
/// of auxiliary options {block, color, ident}. Adding an option requires a
/// snapshot format version bump.
struct QuantumType {
  Part part = Part::alpha;
  Sign sign = Sign::plus;
  std::uint32_t state = 0;
  std::optional<BlockTag> block;
  std::optional<std::uint8_t> color;
  std::optional<std::uint64_t> ident;

  auto operator<=>(const QuantumType&) const = default;

  QuantumType twin() const {
    QuantumType t = *this;
    t.sign = -sign;
    return t;
  }
  QuantumType bare() const { return QuantumType{part, sign, state, {}, {}, {}}; }
};

inline QuantumType qt(Part p, Sign s, std::uint32_t state) { return QuantumType{p, s, state, {}, {}, {}}; }

// Dense species index over (state, part, sign), aux options dropped.
constexpr std::size_t species_index(Part p, Sign s, std::uint32_t state) {
  return static_cast<std::size_t>(state) * 4 + static_cast<std::size_t>(p) * 2 + (s == Sign::minus ? 1 : 0);
}
inline std::size_t species_index(const QuantumType& t) { return species_index(t.part, t.sign, t.state); }
inline QuantumType species_type(std::size_t idx) {
  return qt(((idx >> 1) & 1) ? Part::beta : Part::alpha, (idx & 1) ? Sign::minus : Sign::plus,
            static_cast<std::uint32_t>(idx / 4));
}

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  friend Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
  friend Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
  friend Vec3 operator*(double s, const Vec3& v) { return {s * v.x, s * v.y, s * v.z}; }
  friend Vec3 operator*(const Vec3& v, double s) { return s * v; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm2() const { return dot(*this); }
  double norm() const { return std::sqrt(norm2()); }
};

struct AmplitudeQuantum {
  std::uint64_t id = 0;
  QuantumType type;
  Vec3 position;
  Vec3 velocity;  // length per tick
};

struct MembraneCell {
  std::uint64_t id = 0;
  Vec3 coords;
  std::optional<BlockTag> division_label;
  std::optional<std::uint8_t> color;
  std::array<std::int64_t, 2> amplitude_meter{0, 0};  // ([alpha], [beta]) of the inner grain
  std::optional<std::uint32_t> inner_grain;            // r'(c) on grain layouts
  std::vector<std::uint64_t> idents;                   // coupling idents held by this cell
};

enum class VirtualStatus { empty, half, real };

struct VirtualState {
  std::optional<QuantumType> slot1;
  std::optional<QuantumType> slot2;

  VirtualStatus status() const {
    if (!slot1) return VirtualStatus::empty;
    return slot2 ? VirtualStatus::real : VirtualStatus::half;
  }
  bool valid() const { return !slot2 || (slot1 && *slot1 == *slot2); }
  friend bool operator==(const VirtualState&, const VirtualState&) = default;
};

/// Cubic grid of grains, one basic state per grain, row-major in (x, y, z).
struct GrainLayout {
  std::array<std::uint32_t, 3> dims{1, 1, 1};
  double spacing = 1.0;
  Vec3 origin;
  std::vector<std::uint8_t> interior;  // 1 if the grain is inside the bubble

  std::uint32_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::array<std::uint32_t, 3> cell(std::uint32_t j) const {
    return {j % dims[0], (j / dims[0]) % dims[1], j / (dims[0] * dims[1])};
  }
  std::uint32_t index(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) const {
    return ix + dims[0] * (iy + dims[1] * iz);
  }
  Vec3 coords(std::uint32_t j) const {
    const auto c = cell(j);
    return origin + Vec3{spacing * c[0], spacing * c[1], spacing * c[2]};
  }
};

using CountTable = std::map<QuantumType, std::uint64_t>;

/// A population of amplitude quanta plus its membrane. Quanta are either
/// explicit (with trajectories, used by the spatial backend) or pooled
/// (position-free counts, used by the well-mixed backend); readouts sum both.
struct Bubble {
  std::uint32_t dimension = 0;
  double grain = 1.0;
  double collision_radius = 0.0;
  double radius = 1.0;  // sphere radius for the spatial backend
  std::vector<AmplitudeQuantum> quanta;
  CountTable pool;
  std::vector<MembraneCell> membrane;
  std::optional<VirtualState> virtual_state;
  std::optional<GrainLayout> layout;
  std::uint64_t next_id = 0;
};

// ---------------------------------------------------------------------------
// counts

/// Per-species counts [x^s_j] in dense species_index order.
inline std::vector<std::uint64_t> species_counts(const Bubble& b) {
  std::vector<std::uint64_t> out(static_cast<std::size_t>(b.dimension) * 4, 0);
  for (const auto& [t, n] : b.pool) {
    if (t.state >= b.dimension) fail(ErrorKind::DimensionMismatch, "pooled quantum state out of range");
    out[species_index(t)] += n;
  }
  for (const auto& q : b.quanta) {
    if (q.type.state >= b.dimension) fail(ErrorKind::DimensionMismatch, "quantum state out of range");
    out[species_index(q.type)] += 1;
  }
  return out;
}

/// Net counts [x_j] = [x^+_j] - [x^-_j], laid out as index 2*j + part.
inline std::vector<std::int64_t> net_counts(const std::vector<std::uint64_t>& species) {
  std::vector<std::int64_t> out(species.size() / 2, 0);
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = static_cast<std::int64_t>(species[2 * k]) - static_cast<std::int64_t>(species[2 * k + 1]);
  return out;
}
inline std::vector<std::int64_t> net_counts(const Bubble& b) { return net_counts(species_counts(b)); }

/// Totals {x_j} = [x^+_j] + [x^-_j], same layout as net_counts.
inline std::vector<std::uint64_t> total_counts(const std::vector<std::uint64_t>& species) {
  std::vector<std::uint64_t> out(species.size() / 2, 0);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = species[2 * k] + species[2 * k + 1];
  return out;
}

inline std::uint64_t quantum_count(const Bubble& b) {
  std::uint64_t n = b.quanta.size();
  for (const auto& [t, c] : b.pool) n += c;
  return n;
}

/// Replace the pool with untagged quanta matching the given species counts.
inline void set_pool(Bubble& b, const std::vector<std::uint64_t>& species) {
  b.pool.clear();
  for (std::size_t k = 0; k < species.size(); ++k)
    if (species[k] > 0) b.pool[species_type(k)] = species[k];
}

// ---------------------------------------------------------------------------
// readout

/// Unnormalized amplitudes from net counts: lambda_j = ([alpha_j] + i[beta_j]) g.
inline StateVector amplitudes_from_net(const std::vector<std::int64_t>& net, double grain) {
  StateVector v(static_cast<Eigen::Index>(net.size() / 2));
  for (Eigen::Index j = 0; j < v.size(); ++j)
    v[j] = cplx(static_cast<double>(net[2 * j]), static_cast<double>(net[2 * j + 1])) * grain;
  return v;
}

/// The normalized state corresponding to the bubble.
inline StateVector state_from_bubble(const Bubble& b) {
  StateVector v = amplitudes_from_net(net_counts(b), b.grain);
  const double n = v.norm();
  if (n == 0.0) fail(ErrorKind::AllCountsZero, "every net count vanishes");
  return v / n;
}

/// p_j = ([alpha_j]^2 + [beta_j]^2) / sum_k ([alpha_k]^2 + [beta_k]^2).
inline std::vector<double> probability_weights(const std::vector<std::int64_t>& net) {
  std::vector<double> p(net.size() / 2, 0.0);
  long double denom = 0;
  for (auto x : net) denom += static_cast<long double>(x) * static_cast<long double>(x);
  if (denom == 0) fail(ErrorKind::AllCountsZero, "every net count vanishes");
  for (std::size_t j = 0; j < p.size(); ++j) {
    const long double a = net[2 * j], c = net[2 * j + 1];
    p[j] = static_cast<double>((a * a + c * c) / denom);
  }
  return p;
}
inline std::vector<double> probability_weights(const Bubble& b) { return probability_weights(net_counts(b)); }

// ---------------------------------------------------------------------------
// reduction

/// j-reduction: annihilate x^+_j / x^-_j pairs for both parts until one
/// side is exhausted. Net counts are unchanged; other states untouched.
/// Pooled quanta pair across aux variants in table order; explicit quanta
/// pair by ascending id.
inline void apply_reduction(Bubble& b, std::uint32_t j) {
  if (j >= b.dimension) fail(ErrorKind::DimensionMismatch, "reduction index out of range");
  for (Part part : {Part::alpha, Part::beta}) {
    std::uint64_t plus = 0, minus = 0;
    std::vector<CountTable::iterator> plus_it, minus_it;
    for (auto it = b.pool.begin(); it != b.pool.end(); ++it) {
      if (it->first.state != j || it->first.part != part) continue;
      (it->first.sign == Sign::plus ? plus : minus) += it->second;
      (it->first.sign == Sign::plus ? plus_it : minus_it).push_back(it);
    }
    std::vector<std::size_t> plus_q, minus_q;
    for (std::size_t k = 0; k < b.quanta.size(); ++k) {
      const auto& t = b.quanta[k].type;
      if (t.state != j || t.part != part) continue;
      (t.sign == Sign::plus ? plus_q : minus_q).push_back(k);
    }
    plus += plus_q.size();
    minus += minus_q.size();
    std::uint64_t pairs = std::min(plus, minus);
    if (pairs == 0) continue;

    // Remove `pairs` from each side: pooled first, then explicit by id.
    auto drain = [&](std::vector<CountTable::iterator>& its, std::vector<std::size_t>& qs, std::uint64_t n,
                     std::vector<std::size_t>& erase) {
      for (auto& it : its) {
        const std::uint64_t take = std::min(n, it->second);
        it->second -= take;
        n -= take;
      }
      std::sort(qs.begin(), qs.end(), [&](std::size_t a, std::size_t c) { return b.quanta[a].id < b.quanta[c].id; });
      for (std::size_t k = 0; k < qs.size() && n > 0; ++k, --n) erase.push_back(qs[k]);
    };
    std::vector<std::size_t> erase;
    drain(plus_it, plus_q, pairs, erase);
    drain(minus_it, minus_q, pairs, erase);
    std::sort(erase.begin(), erase.end());
    for (auto k = erase.rbegin(); k != erase.rend(); ++k) b.quanta.erase(b.quanta.begin() + static_cast<std::ptrdiff_t>(*k));
    std::erase_if(b.pool, [](const auto& kv) { return kv.second == 0; });
  }
}

inline void apply_full_reduction(Bubble& b) {
  for (std::uint32_t j = 0; j < b.dimension; ++j) apply_reduction(b, j);
}

// ---------------------------------------------------------------------------
// construction

/// Pooled bubble representing `psi` with amplitude scale A: net counts are
/// round(A * component) and every (part, state) is padded with zero-net
/// (+,-) pairs up to total A (or A-1 where parity forbids A). Grain g = 1/A
/// so a fully-loaded single state reads as amplitude 1.
inline Bubble bubble_from_state(const StateVector& psi, std::uint64_t A, bool pad = true) {
  if (psi.size() == 0) fail(ErrorKind::DimensionMismatch, "empty state");
  const double n = psi.norm();
  if (n == 0.0) fail(ErrorKind::AllCountsZero, "zero state vector");
  Bubble b;
  b.dimension = static_cast<std::uint32_t>(psi.size());
  b.grain = 1.0 / static_cast<double>(A);
  std::vector<std::uint64_t> species(static_cast<std::size_t>(b.dimension) * 4, 0);
  for (std::uint32_t j = 0; j < b.dimension; ++j) {
    const cplx c = psi[j] / n;
    for (Part part : {Part::alpha, Part::beta}) {
      const double comp = part == Part::alpha ? c.real() : c.imag();
      const auto net = static_cast<std::int64_t>(std::llround(comp * static_cast<double>(A)));
      const std::uint64_t mag = static_cast<std::uint64_t>(net < 0 ? -net : net);
      std::uint64_t pairs = 0;
      if (pad && mag < A) pairs = (A - mag) / 2;
      const std::uint64_t major = mag + pairs;
      species[species_index(part, net >= 0 ? Sign::plus : Sign::minus, j)] = major;
      species[species_index(part, net >= 0 ? Sign::minus : Sign::plus, j)] = pairs;
    }
  }
  set_pool(b, species);
  return b;
}

inline StateVector basis_state(std::uint32_t dim, std::uint32_t j) {
  StateVector v = StateVector::Zero(dim);
  v[j] = 1.0;
  return v;
}

}  // namespace aq
