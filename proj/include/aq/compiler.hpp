#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aq/core.hpp"
#include "aq/error.hpp"

namespace aq {

// ---------------------------------------------------------------------------
// Pauli blocks

enum class BlockKind { plus_identity, minus_identity, plus_x, minus_x, plus_y, minus_y, plus_z, minus_z };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::plus_identity: return "+I";
    case BlockKind::minus_identity: return "-I";
    case BlockKind::plus_x: return "+sx";
    case BlockKind::minus_x: return "-sx";
    case BlockKind::plus_y: return "+sy";
    case BlockKind::minus_y: return "-sy";
    case BlockKind::plus_z: return "+sz";
    case BlockKind::minus_z: return "-sz";
  }
  return "?";
}

inline std::optional<BlockKind> block_kind_from_string(const std::string& s) {
  for (auto k : {BlockKind::plus_identity, BlockKind::minus_identity, BlockKind::plus_x, BlockKind::minus_x,
                 BlockKind::plus_y, BlockKind::minus_y, BlockKind::plus_z, BlockKind::minus_z})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

/// One term l * H_{i,j} of the Hamiltonian, i <= j. For i == j only the
/// identity kinds are meaningful and act as a phase on index i.
struct PauliBlock {
  std::uint32_t i = 0;
  std::uint32_t j = 0;
  BlockKind kind = BlockKind::minus_x;
  double coefficient = 0.0;

  friend bool operator==(const PauliBlock&, const PauliBlock&) = default;
};

using PauliDecomposition = std::vector<PauliBlock>;

/// The 2x2 (or 1x1) pattern of a block embedded into an N x N matrix.
inline CMatrix block_matrix(const PauliBlock& b, std::uint32_t n) {
  CMatrix m = CMatrix::Zero(n, n);
  const auto i = static_cast<Eigen::Index>(b.i), j = static_cast<Eigen::Index>(b.j);
  const cplx I(0, 1);
  const double l = b.coefficient;
  if (b.i == b.j) {
    if (b.kind == BlockKind::plus_identity) m(i, i) = l;
    else if (b.kind == BlockKind::minus_identity) m(i, i) = -l;
    else fail(ErrorKind::UnsupportedKind, "diagonal block must be +I or -I");
    return m;
  }
  switch (b.kind) {
    case BlockKind::plus_identity: m(i, i) = l; m(j, j) = l; break;
    case BlockKind::minus_identity: m(i, i) = -l; m(j, j) = -l; break;
    case BlockKind::plus_x: m(i, j) = l; m(j, i) = l; break;
    case BlockKind::minus_x: m(i, j) = -l; m(j, i) = -l; break;
    case BlockKind::plus_y: m(i, j) = -I * l; m(j, i) = I * l; break;
    case BlockKind::minus_y: m(i, j) = I * l; m(j, i) = -I * l; break;
    case BlockKind::plus_z: m(i, i) = l; m(j, j) = -l; break;
    case BlockKind::minus_z: m(i, i) = -l; m(j, j) = l; break;
  }
  return m;
}

inline CMatrix reconstruct(const PauliDecomposition& d, std::uint32_t n) {
  CMatrix h = CMatrix::Zero(n, n);
  for (const auto& b : d) h += block_matrix(b, n);
  return h;
}

/// Expand a Hermitian H as a sum of Pauli blocks with non-negative
/// coefficients. Off-diagonal h_ij = a - ic splits into (+-sx, |a|) and
/// (+-sy, |c|); each diagonal entry becomes a phase block (+-I on (i,i)).
inline PauliDecomposition pauli_decompose(const CMatrix& h, double tol = 1e-10) {
  if (h.rows() != h.cols()) fail(ErrorKind::NotHermitian, "matrix is not square");
  const double dev = h.rows() ? (h - h.adjoint()).cwiseAbs().maxCoeff() : 0.0;
  if (dev > tol) fail(ErrorKind::NotHermitian, "max |H - H^dagger| = " + std::to_string(dev));
  constexpr double kZero = 1e-15;
  PauliDecomposition out;
  const auto n = static_cast<std::uint32_t>(h.rows());
  for (std::uint32_t i = 0; i < n; ++i) {
    const double d = h(i, i).real();
    if (std::abs(d) > kZero)
      out.push_back({i, i, d > 0 ? BlockKind::plus_identity : BlockKind::minus_identity, std::abs(d)});
    for (std::uint32_t j = i + 1; j < n; ++j) {
      // use the Hermitian average so tiny asymmetries do not leak through
      const cplx hij = 0.5 * (h(i, j) + std::conj(h(j, i)));
      const double a = hij.real(), c = -hij.imag();
      if (std::abs(a) > kZero) out.push_back({i, j, a > 0 ? BlockKind::plus_x : BlockKind::minus_x, std::abs(a)});
      if (std::abs(c) > kZero) out.push_back({i, j, c > 0 ? BlockKind::plus_y : BlockKind::minus_y, std::abs(c)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// reaction rules

enum class RuleKind { membrane_transform = 1, annihilation = 2, catalysis = 3, nonequilibrium = 4 };

inline std::string to_string(RuleKind k) {
  switch (k) {
    case RuleKind::membrane_transform: return "membrane_transform";
    case RuleKind::annihilation: return "annihilation";
    case RuleKind::catalysis: return "catalysis";
    case RuleKind::nonequilibrium: return "nonequilibrium";
  }
  return "?";
}

/// Membrane-cell pattern for type-1 rules; empty fields match anything.
struct CellPattern {
  std::optional<BlockTag> division_label;
  std::optional<std::uint8_t> color;
  friend bool operator==(const CellPattern&, const CellPattern&) = default;
};

/// A rewrite rule of one of the four kinds. `rate` scales the base
/// propensity (gamma0 for collisions, omega for one-body creation).
/// inheritance[k] names the reagent whose ident/color product k keeps.
struct ReactionRule {
  RuleKind kind = RuleKind::catalysis;
  std::vector<QuantumType> reagents;
  std::optional<CellPattern> cell;
  std::vector<QuantumType> products;
  std::vector<int> inheritance;
  double rate = 1.0;

  friend bool operator==(const ReactionRule&, const ReactionRule&) = default;
};

struct ReactionList {
  std::vector<ReactionRule> rules;
  std::optional<BlockTag> scope;
};

inline std::string type_label(const QuantumType& t) {
  std::string s = t.part == Part::alpha ? "a" : "b";
  s += std::to_string(t.state);
  s += t.sign == Sign::plus ? "+" : "-";
  return s;
}

inline std::string to_string(const ReactionRule& r) {
  std::string s;
  for (std::size_t k = 0; k < r.reagents.size(); ++k) s += (k ? ", " : "") + type_label(r.reagents[k]);
  s += " -> ";
  if (r.products.empty()) s += "0";
  for (std::size_t k = 0; k < r.products.size(); ++k) s += (k ? ", " : "") + type_label(r.products[k]);
  return s;
}

/// For a 2 -> 2 catalysis rule: which reagent is converted and into what.
struct Conversion {
  std::size_t converted = 0;  // reagent index
  std::size_t catalyst = 1;   // reagent index
  QuantumType target;
};

inline std::optional<Conversion> conversion_of(const ReactionRule& r) {
  if (r.reagents.size() != 2 || r.products.size() != 2) return std::nullopt;
  for (std::size_t cat = 0; cat < 2; ++cat) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (r.products[p].bare() == r.reagents[cat].bare()) {
        return Conversion{1 - cat, cat, r.products[1 - p]};
      }
    }
  }
  return std::nullopt;
}

namespace detail {

struct Amp {
  Part part;
  std::uint32_t state;
};

inline bool amp_less(const Amp& a, const Amp& b) {
  return a.part != b.part ? a.part < b.part : a.state < b.state;
}

inline ReactionRule catalysis_rule(QuantumType converted, QuantumType catalyst, QuantumType target, double rate) {
  ReactionRule r;
  r.kind = RuleKind::catalysis;
  // reagents in (part, state) order; the catalyst is reproduced in place
  const bool converted_first = amp_less({converted.part, converted.state}, {catalyst.part, catalyst.state});
  if (converted_first) {
    r.reagents = {converted, catalyst};
  } else {
    r.reagents = {catalyst, converted};
  }
  if (target.bare() == catalyst.bare()) {
    r.products = {catalyst, catalyst};
  } else {
    r.products = {target, target};
  }
  r.inheritance = {0, 1};
  r.rate = rate;
  return r;
}

/// Rotation list for a pair of amplitudes (X, Y) with mean field
/// d[X]/dt = -g{X}[Y], d[Y]/dt = +g{Y}[X].
inline void rotation(std::vector<ReactionRule>& out, Amp x, Amp y, double rate) {
  const auto X = [&](Sign s) { return qt(x.part, s, x.state); };
  const auto Y = [&](Sign s) { return qt(y.part, s, y.state); };
  out.push_back(catalysis_rule(X(Sign::plus), Y(Sign::plus), Y(Sign::plus), rate));
  out.push_back(catalysis_rule(Y(Sign::minus), X(Sign::plus), X(Sign::plus), rate));
  out.push_back(catalysis_rule(Y(Sign::plus), X(Sign::minus), X(Sign::minus), rate));
  out.push_back(catalysis_rule(X(Sign::minus), Y(Sign::minus), Y(Sign::minus), rate));
}

}  // namespace detail

/// Equilibrium (catalysis) list reproducing exp(-i l H_block t) at rate
/// omega = gamma0 A. Sign-inverted kinds swap the roles of the two
/// amplitudes in each rotation, which reverses the rotation direction.
inline ReactionList reactions_for_block(const PauliBlock& b) {
  using detail::Amp;
  if (b.i > b.j) fail(ErrorKind::UnsupportedKind, "block indices must satisfy i <= j");
  if (b.coefficient < 0) fail(ErrorKind::UnsupportedKind, "negative block coefficient");
  ReactionList list;
  list.scope = BlockTag{b.i, b.j};
  const Amp ai{Part::alpha, b.i}, bi{Part::beta, b.i}, aj{Part::alpha, b.j}, bj{Part::beta, b.j};
  const double l = b.coefficient;
  auto& r = list.rules;
  if (b.i == b.j) {
    if (b.kind == BlockKind::minus_identity) detail::rotation(r, ai, bi, l);
    else if (b.kind == BlockKind::plus_identity) detail::rotation(r, bi, ai, l);
    else fail(ErrorKind::UnsupportedKind, "diagonal block must be +I or -I");
    return list;
  }
  switch (b.kind) {
    case BlockKind::minus_x: detail::rotation(r, ai, bj, l); detail::rotation(r, aj, bi, l); break;
    case BlockKind::plus_x: detail::rotation(r, bj, ai, l); detail::rotation(r, bi, aj, l); break;
    case BlockKind::minus_y: detail::rotation(r, aj, ai, l); detail::rotation(r, bj, bi, l); break;
    case BlockKind::plus_y: detail::rotation(r, ai, aj, l); detail::rotation(r, bi, bj, l); break;
    case BlockKind::minus_z: detail::rotation(r, ai, bi, l); detail::rotation(r, bj, aj, l); break;
    case BlockKind::plus_z: detail::rotation(r, bi, ai, l); detail::rotation(r, aj, bj, l); break;
    case BlockKind::minus_identity: detail::rotation(r, ai, bi, l); detail::rotation(r, aj, bj, l); break;
    case BlockKind::plus_identity: detail::rotation(r, bi, ai, l); detail::rotation(r, bj, aj, l); break;
  }
  return list;
}

/// The phase list L_phi: every basic state rotates as e^{i phi t}.
inline ReactionList phase_list(std::uint32_t n, double phi = 1.0) {
  ReactionList list;
  for (std::uint32_t j = 0; j < n; ++j) {
    auto part = reactions_for_block({j, j, BlockKind::minus_identity, phi});
    list.rules.insert(list.rules.end(), part.rules.begin(), part.rules.end());
  }
  return list;
}

/// Reject lists where two collision rules share a reagent pattern.
inline void validate_dispatch(const ReactionList& list) {
  std::set<std::vector<QuantumType>> seen;
  for (const auto& r : list.rules) {
    if (r.kind != RuleKind::catalysis && r.kind != RuleKind::annihilation) continue;
    auto key = r.reagents;
    std::sort(key.begin(), key.end());
    if (!seen.insert(key).second) fail(ErrorKind::UnsupportedKind, "two rules share reagent pattern " + to_string(r));
    if (r.kind == RuleKind::catalysis && !conversion_of(r))
      fail(ErrorKind::UnsupportedKind, "catalysis rule without a catalyst: " + to_string(r));
    if (r.kind == RuleKind::annihilation &&
        (r.reagents.size() != 2 || r.reagents[0].twin().bare() != r.reagents[1].bare()))
      fail(ErrorKind::UnsupportedKind, "annihilation must pair sign-opposite twins");
  }
}

// ---------------------------------------------------------------------------
// second quantization

/// c * a^+_{p...} a_{q...}. One-particle: one creator, one annihilator.
/// Two-particle: creators (p, q), annihilators (r, s) acting on distinguishable
/// slots as |p q><r s| over the joint index p*N + q.
struct SqTerm {
  cplx coefficient;
  std::vector<std::uint32_t> creators;
  std::vector<std::uint32_t> annihilators;
};

/// Nonequilibrium (type 4) list for -iH. For a real element H_ab = c,
/// beta_b^s spawns alpha_a^{sgn(c) s} and alpha_b^s spawns beta_a^{-sgn(c) s};
/// for an imaginary element H_ab = ic, alpha_b^s spawns alpha_a^{sgn(c) s} and
/// beta_b^s spawns beta_a^{sgn(c) s}. Per-quantum rate |c|. `n` is the
/// one-particle dimension.
inline ReactionList sq_reactions(const std::vector<SqTerm>& terms, std::uint32_t n) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, cplx> elements;  // (target, source) -> c
  for (const auto& t : terms) {
    if (std::abs(t.coefficient.imag()) > 1e-15 && std::abs(t.coefficient.real()) > 1e-15)
      fail(ErrorKind::NonRealCoefficient, "split complex coefficients into sx/sy parts first");
    if (t.creators.size() != t.annihilators.size() || t.creators.empty() || t.creators.size() > 2)
      fail(ErrorKind::UnsupportedKind, "terms must be one- or two-particle");
    std::uint32_t target = 0, source = 0;
    for (std::size_t k = 0; k < t.creators.size(); ++k) {
      if (t.creators[k] >= n || t.annihilators[k] >= n) fail(ErrorKind::DimensionMismatch, "mode index out of range");
      target = target * n + t.creators[k];
      source = source * n + t.annihilators[k];
    }
    elements[{target, source}] += t.coefficient;
  }
  ReactionList list;
  auto spawn = [&](Part from, Sign s, std::uint32_t b, Part to, Sign ps, std::uint32_t a, double rate) {
    ReactionRule r;
    r.kind = RuleKind::nonequilibrium;
    r.reagents = {qt(from, s, b)};
    r.products = {qt(from, s, b), qt(to, ps, a)};
    r.inheritance = {0, 0};
    r.rate = rate;
    list.rules.push_back(r);
  };
  for (const auto& [ab, c] : elements) {
    const auto [a, b] = ab;
    if (std::abs(c.real()) > 1e-15) {
      const Sign sc = c.real() > 0 ? Sign::plus : Sign::minus;
      for (Sign s : {Sign::plus, Sign::minus}) {
        spawn(Part::beta, s, b, Part::alpha, sc * s, a, std::abs(c.real()));
        spawn(Part::alpha, s, b, Part::beta, -(sc * s), a, std::abs(c.real()));
      }
    }
    if (std::abs(c.imag()) > 1e-15) {
      const Sign sc = c.imag() > 0 ? Sign::plus : Sign::minus;
      for (Sign s : {Sign::plus, Sign::minus}) {
        spawn(Part::alpha, s, b, Part::alpha, sc * s, a, std::abs(c.imag()));
        spawn(Part::beta, s, b, Part::beta, sc * s, a, std::abs(c.imag()));
      }
    }
  }
  return list;
}

/// One-particle second-quantized terms for a real-valued Hermitian H.
inline std::vector<SqTerm> sq_terms_from_matrix(const CMatrix& h) {
  std::vector<SqTerm> out;
  for (Eigen::Index a = 0; a < h.rows(); ++a)
    for (Eigen::Index b = 0; b < h.cols(); ++b)
      if (std::abs(h(a, b)) > 1e-15)
        out.push_back({h(a, b), {static_cast<std::uint32_t>(a)}, {static_cast<std::uint32_t>(b)}});
  return out;
}

// ---------------------------------------------------------------------------
// membrane schedules

enum class ScheduleMode { division, trotter };

struct TrotterSlice {
  std::size_t block = 0;  // index into the decomposition
  double duration = 0.0;  // l * dt
};

struct MembraneSchedule {
  ScheduleMode mode = ScheduleMode::division;
  std::vector<double> fractions;      // division: membrane fraction per block
  std::vector<TrotterSlice> slices;   // trotter: one cycle
  double dt = 0.0;
};

inline MembraneSchedule membrane_schedule(const PauliDecomposition& d, ScheduleMode mode, double dt) {
  if (d.empty()) fail(ErrorKind::EmptyDecomposition, "no blocks to schedule");
  MembraneSchedule s;
  s.mode = mode;
  s.dt = dt;
  double total = 0;
  for (const auto& b : d) total += b.coefficient;
  if (mode == ScheduleMode::division) {
    for (const auto& b : d) s.fractions.push_back(b.coefficient / total);
  } else {
    for (std::size_t k = 0; k < d.size(); ++k) s.slices.push_back({k, d[k].coefficient * dt});
  }
  return s;
}

/// Label membrane cells with block tags, contiguous runs in cell order,
/// run lengths proportional to the division fractions.
inline void apply_division(std::vector<MembraneCell>& cells, const PauliDecomposition& d, const MembraneSchedule& s) {
  if (s.mode != ScheduleMode::division) fail(ErrorKind::ConfigError, "apply_division needs a division schedule");
  const std::size_t n = cells.size();
  double acc = 0;
  std::size_t start = 0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    acc += s.fractions[k];
    const std::size_t end = k + 1 == d.size() ? n : std::min(n, static_cast<std::size_t>(std::llround(acc * n)));
    for (std::size_t c = start; c < end; ++c) cells[c].division_label = BlockTag{d[k].i, d[k].j};
    start = end;
  }
}

/// Collision with a labelled cell tags quanta of either basic state of the
/// block with that block; other quanta keep their tag.
inline QuantumType reflection_tag(QuantumType t, const MembraneCell& c) {
  if (c.division_label && (t.state == c.division_label->i || t.state == c.division_label->j)) t.block = c.division_label;
  if (c.color) t.color = c.color;
  return t;
}

}  // namespace aq
