#include <gtest/gtest.h>

#include <random>

#include "aq/measurement.hpp"
#include "aq/oracle.hpp"

using namespace aq;

namespace {

const auto a1p = qt(Part::alpha, Sign::plus, 1);
const auto b0m = qt(Part::beta, Sign::minus, 0);

// Outcome histogram over `trials` seeds.
std::vector<std::uint64_t> histogram(const Bubble& b, std::uint64_t trials, MeasureProtocol protocol = MeasureProtocol::paired) {
  std::vector<std::uint64_t> h(b.dimension, 0);
  MeasureConfig cfg;
  cfg.seed = 2024;
  cfg.protocol = protocol;
  for (std::uint64_t t = 0; t < trials; ++t) {
    cfg.trial = t;
    ++h[measure(b, cfg).first.outcome];
  }
  return h;
}

// Born weights recomputed from the raw table, independent of the library.
std::vector<double> born(const std::vector<std::uint64_t>& species, std::uint32_t dim) {
  std::vector<double> p(dim, 0.0);
  for (std::uint32_t j = 0; j < dim; ++j) {
    for (int part = 0; part < 2; ++part) {
      const double net = static_cast<double>(species[4 * j + 2 * part]) - static_cast<double>(species[4 * j + 2 * part + 1]);
      p[j] += net * net;
    }
  }
  return p;
}

Bubble from_species(const std::vector<std::uint64_t>& species) {
  Bubble b;
  b.dimension = static_cast<std::uint32_t>(species.size() / 4);
  set_pool(b, species);
  return b;
}

}  // namespace

TEST(VirtualState, TransitionRules) {
  const VirtualState empty;
  const auto half = virtual_state_step(empty, a1p);
  EXPECT_EQ(half, (VirtualState{a1p, std::nullopt}));
  EXPECT_EQ(half.status(), VirtualStatus::half);

  const auto real = virtual_state_step(half, a1p);
  EXPECT_EQ(real, (VirtualState{a1p, a1p}));
  EXPECT_EQ(real.status(), VirtualStatus::real);

  const auto [swapped, released] = virtual_state_step_released(half, b0m);
  EXPECT_EQ(swapped, (VirtualState{b0m, std::nullopt}));
  ASSERT_TRUE(released);
  EXPECT_EQ(*released, a1p);
}

TEST(VirtualState, RealStateRejectsArrivals) {
  try {
    virtual_state_step(VirtualState{a1p, a1p}, b0m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::AlreadyReal);
  }
}

TEST(VirtualState, SlotInvariantOnRandomSequences) {
  std::mt19937_64 gen(5);
  for (int run = 0; run < 1000; ++run) {
    VirtualState vs;
    for (int step = 0; step < 50 && vs.status() != VirtualStatus::real; ++step) {
      const auto t = qt(gen() % 2 ? Part::beta : Part::alpha, gen() % 2 ? Sign::minus : Sign::plus,
                        static_cast<std::uint32_t>(gen() % 3));
      const auto before = vs;
      vs = virtual_state_step(vs, t);
      ASSERT_TRUE(vs.valid());
      ASSERT_EQ(vs.slot1, t);  // the latest arrival always occupies the first slot
      if (vs.status() == VirtualStatus::real) {
        EXPECT_EQ(before.slot1, t);
      }
    }
  }
}

TEST(Measure, BasisStateAlwaysGivesItsIndex) {
  const Bubble b = bubble_from_state(basis_state(3, 0), 1000);
  for (std::uint64_t t = 0; t < 200; ++t) {
    MeasureConfig cfg;
    cfg.trial = t;
    const auto [rec, rebuilt] = measure(b, cfg);
    EXPECT_EQ(rec.outcome, 0u);
  }
}

TEST(Measure, RecordEndsWithTwoEqualArrivals) {
  const Bubble b = bubble_from_state(StateVector::Constant(4, 0.5), 500);
  for (std::uint64_t t = 0; t < 100; ++t) {
    MeasureConfig cfg;
    cfg.trial = t;
    const auto rec = measure(b, cfg).first;
    ASSERT_GE(rec.arrivals.size(), 2u);
    const auto& last = rec.arrivals.back();
    EXPECT_EQ(last, rec.arrivals[rec.arrivals.size() - 2]);
    EXPECT_EQ(last.state, rec.outcome);
    EXPECT_EQ(rec.ticks_to_completion, rec.arrivals.size());
  }
}

TEST(Measure, EqualSuperpositionStatistics) {
  StateVector psi(2);
  psi << 1, 1;
  const Bubble b = bubble_from_state(psi, 10000);
  const auto h = histogram(b, 10000);
  const std::vector<double> expected{0.5, 0.5};
  const auto chi = oracle::chi_square_test(h, expected);
  EXPECT_TRUE(chi.pass) << h[0] << " " << h[1] << " stat " << chi.statistic;
}

TEST(Measure, UnequalSuperpositionStatistics) {
  StateVector psi(2);
  psi << 0.6, cplx(0, 0.8);
  const Bubble b = bubble_from_state(psi, 10000);
  const auto h = histogram(b, 10000);
  const std::vector<double> expected{0.36, 0.64};
  const auto chi = oracle::chi_square_test(h, expected);
  EXPECT_TRUE(chi.pass) << h[0] << " " << h[1] << " stat " << chi.statistic;
}

// Random count tables with up to 8 states: frequencies match the Born
// weights of the table.
TEST(Measure, RandomTablesPassChiSquare) {
  std::mt19937_64 gen(99);
  int failures = 0;
  const int tables = 10;
  for (int k = 0; k < tables; ++k) {
    const std::uint32_t dim = 2 + static_cast<std::uint32_t>(gen() % 7);
    std::vector<std::uint64_t> species(dim * 4);
    std::uniform_int_distribution<std::uint64_t> u(0, 3000);
    for (auto& s : species) s = u(gen);
    const Bubble b = from_species(species);
    const auto h = histogram(b, 10000);
    const auto expected = born(species, dim);
    const auto chi = oracle::chi_square_test(h, expected);
    failures += chi.pass ? 0 : 1;
  }
  // at alpha = 0.01 one false rejection in ten tables is already unlikely
  EXPECT_LE(failures, 1);
}

// The literal sliding automaton does not reproduce the Born rule. Its
// outcome law for iid arrivals with type frequencies q is proportional to
// q^2 / (1 + q), obtained from the first-step equations of its Markov chain.
TEST(Measure, SlidingProtocolFollowsItsMarkovLaw) {
  StateVector psi(2);
  psi << 0.6, 0.8;
  const Bubble b = bubble_from_state(psi, 20000, false);
  const auto h = histogram(b, 10000, MeasureProtocol::sliding);
  const double q0 = 0.6 / 1.4, q1 = 0.8 / 1.4;
  const std::vector<double> markov{q0 * q0 / (1 + q0), q1 * q1 / (1 + q1)};
  EXPECT_TRUE(oracle::chi_square_test(h, markov).pass) << h[0] << " " << h[1];
  const std::vector<double> bornp{0.36, 0.64};
  EXPECT_FALSE(oracle::chi_square_test(h, bornp).pass);
}

TEST(Measure, SeedFixesEverything) {
  const Bubble b = bubble_from_state(StateVector::Constant(5, 1.0), 300);
  MeasureConfig cfg;
  cfg.seed = 77;
  cfg.trial = 3;
  const auto r1 = measure(b, cfg).first, r2 = measure(b, cfg).first;
  EXPECT_EQ(r1.outcome, r2.outcome);
  EXPECT_EQ(r1.arrivals, r2.arrivals);
}

TEST(Measure, ReductionRunsToCompletionBeforeArrivals) {
  const Bubble b = bubble_from_state(StateVector::Constant(2, 1.0), 1000);
  const auto rec = measure(b).first;
  // after reduction only + quanta of the alpha parts exist
  for (const auto& a : rec.arrivals) {
    EXPECT_EQ(a.part, Part::alpha);
    EXPECT_EQ(a.sign, Sign::plus);
  }
}

TEST(Measure, TooFewQuantaTimesOut) {
  Bubble b;
  b.dimension = 2;
  b.pool[qt(Part::alpha, Sign::plus, 0)] = 1;
  b.pool[qt(Part::alpha, Sign::plus, 1)] = 1;
  MeasureConfig cfg;
  cfg.arrival_cap = 1000;
  try {
    measure(b, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Timeout);
  }
}

TEST(Measure, ZeroBubbleIsRejected) {
  Bubble b;
  b.dimension = 2;
  b.pool[qt(Part::alpha, Sign::plus, 0)] = 3;
  b.pool[qt(Part::alpha, Sign::minus, 0)] = 3;
  EXPECT_THROW(measure(b), Error);
}

TEST(Measure, VirtualStateSitsOnLowestCell) {
  Bubble b = bubble_from_state(basis_state(3, 1), 100);
  GrainLayout g;
  g.dims = {3, 1, 1};
  attach_layout(b, g);
  const auto rec = measure(b).first;
  ASSERT_TRUE(rec.cell);
  EXPECT_EQ(*rec.cell, b.membrane.front().id);
  MeasureConfig at_event;
  at_event.placement = VirtualPlacement::event_point;
  at_event.event_cell = b.membrane.back().id;
  EXPECT_EQ(*measure(b, at_event).first.cell, b.membrane.back().id);
}

TEST(Rebuild, OutcomeKeepsOnlyThatState) {
  std::vector<std::uint64_t> species{40, 3, 9, 9, 10, 60, 0, 5, 7, 0, 7, 1};
  const Bubble b = from_species(species);
  const Bubble r = rebuild_after_measurement(b, 1);
  const auto p = probability_weights(r);
  EXPECT_EQ(p, (std::vector<double>{0, 1, 0}));
  const auto psi = state_from_bubble(r);
  EXPECT_NEAR(std::abs(psi[1]), 1.0, 1e-12);
}

TEST(Rebuild, InvalidOutcomes) {
  const Bubble b = bubble_from_state(basis_state(2, 0), 100);
  for (std::uint32_t l : {1u, 2u}) {
    try {
      rebuild_after_measurement(b, l);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidOutcome);
    }
  }
}

TEST(Rebuild, PureStateUnchangedUpToReplenishment) {
  const Bubble b = bubble_from_state(basis_state(3, 2), 100);
  MeasureConfig cfg;
  cfg.replenish_A = 100;
  const auto [rec, r] = measure(b, cfg);
  EXPECT_EQ(rec.outcome, 2u);
  // padding pairs of the other states go; state 2 and every net count stay
  EXPECT_EQ(net_counts(r), net_counts(b));
  const auto cr = species_counts(r), cb = species_counts(b);
  for (std::size_t k = 8; k < 12; ++k) EXPECT_EQ(cr[k], cb[k]);
  for (const auto& [t, n] : r.pool) EXPECT_FALSE(t.color);
}

TEST(Rebuild, DumbbellDiscardsTheOtherLobe) {
  // grains 0-2 and 4-6 occupied, grain 3 empty: two membrane components
  StateVector psi = StateVector::Zero(7);
  for (int j : {0, 1, 2, 4, 5, 6}) psi[j] = 1.0;
  Bubble b = bubble_from_state(psi, 600, false);
  GrainLayout g;
  g.dims = {7, 1, 1};
  attach_layout(b, g);
  ASSERT_EQ(detect_split(b).size(), 2u);
  const Bubble r = rebuild_after_measurement(b, 1);
  EXPECT_EQ(r.layout->interior, (std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0}));
  EXPECT_EQ(detect_split(r).size(), 1u);
  for (const auto& c : r.membrane) EXPECT_LT(*c.inner_grain, 3u);
  EXPECT_EQ(probability_weights(r)[1], 1.0);
}

TEST(Measure, ColorIsClearedAfterRebuild) {
  Bubble b = bubble_from_state(StateVector::Constant(2, 1.0), 100);
  GrainLayout g;
  g.dims = {2, 1, 1};
  attach_layout(b, g);
  const auto r = measure(b).second;
  for (const auto& c : r.membrane) EXPECT_FALSE(c.color);
  for (const auto& [t, n] : r.pool) EXPECT_FALSE(t.color);
  EXPECT_FALSE(r.virtual_state);
}
