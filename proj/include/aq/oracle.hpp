#pragma once

// Ground truth for every acceptance check. Nothing in here may depend on the
// reaction compiler, the kinetics engine or the measurement automaton.

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "aq/core.hpp"

namespace aq::oracle {

inline void require_hermitian(const CMatrix& h, double tol = 1e-10) {
  if (h.rows() != h.cols()) fail(ErrorKind::NotHermitian, "matrix is not square");
  const double dev = (h - h.adjoint()).cwiseAbs().maxCoeff();
  if (dev > tol) fail(ErrorKind::NotHermitian, "max |H - H^dagger| = " + std::to_string(dev));
}

/// exp(A) by scaling and squaring of a truncated Taylor series.
inline CMatrix expm(const CMatrix& a) {
  const Eigen::Index n = a.rows();
  if (n == 0) return a;
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm1 > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm1 / 0.5)));
  const CMatrix b = a / std::ldexp(1.0, squarings);

  CMatrix result = CMatrix::Identity(n, n);
  CMatrix term = CMatrix::Identity(n, n);
  for (int k = 1; k <= 40; ++k) {
    term = (term * b) / static_cast<double>(k);
    result += term;
    if (term.cwiseAbs().maxCoeff() < 1e-18) break;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

/// U(t) = exp(-iHt), checked unitary to 1e-10.
inline CMatrix propagator(const CMatrix& h, double t) {
  require_hermitian(h);
  CMatrix u = expm(cplx(0.0, -t) * h);
  const double dev = (u.adjoint() * u - CMatrix::Identity(h.rows(), h.cols())).cwiseAbs().maxCoeff();
  if (dev > 1e-10) fail(ErrorKind::NotHermitian, "propagator lost unitarity: " + std::to_string(dev));
  return u;
}

inline StateVector exact_propagate(const CMatrix& h, const StateVector& psi0, double t) {
  if (t < 0) fail(ErrorKind::ConfigError, "negative propagation time");
  if (h.rows() != psi0.size()) fail(ErrorKind::DimensionMismatch, "H and psi differ in dimension");
  return propagator(h, t) * psi0;
}

/// Piecewise-constant propagation: slices applied in order, each as exp(-i H_k t_k).
inline StateVector propagate_slices(std::span<const std::pair<CMatrix, double>> slices, StateVector psi) {
  for (const auto& [h, dt] : slices) psi = expm(cplx(0.0, -dt) * h) * psi;
  return psi;
}

inline double fidelity(const StateVector& a, const StateVector& b) {
  if (a.size() != b.size()) fail(ErrorKind::DimensionMismatch, "fidelity of vectors with different sizes");
  return std::norm(a.dot(b));  // Eigen's dot conjugates the left operand
}

struct ChiSquare {
  double statistic = 0.0;
  double critical = 0.0;
  int dof = 0;
  bool pass = false;
};

/// Pearson goodness-of-fit at significance `alpha` (k-1 degrees of freedom
/// over the cells with positive expectation).
inline ChiSquare chi_square_test(std::span<const std::uint64_t> observed, std::span<const double> expected,
                                 double alpha = 0.01) {
  if (observed.size() != expected.size()) fail(ErrorKind::DimensionMismatch, "observed/expected size mismatch");
  std::uint64_t total = 0;
  for (auto o : observed) total += o;
  double esum = 0;
  int support = 0;
  for (double e : expected) {
    if (e < 0 || !std::isfinite(e)) fail(ErrorKind::DegenerateExpected, "negative or non-finite expectation");
    esum += e;
    if (e > 0) ++support;
  }
  if (total == 0) fail(ErrorKind::DegenerateExpected, "no observations");
  if (support < 2) fail(ErrorKind::DegenerateExpected, "fewer than two cells with positive expectation");

  ChiSquare r;
  r.dof = support - 1;
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const double e = expected[k] / esum * static_cast<double>(total);
    if (e == 0) {
      if (observed[k] > 0) r.statistic = std::numeric_limits<double>::infinity();
      continue;
    }
    const double d = static_cast<double>(observed[k]) - e;
    r.statistic += d * d / e;
  }
  boost::math::chi_squared dist(r.dof);
  r.critical = boost::math::quantile(boost::math::complement(dist, alpha));
  r.pass = r.statistic < r.critical;
  return r;
}

/// Brute-force reduced density matrix of particle `keep` from a dense joint
/// vector over dims^n (particle 0 is the most significant digit).
inline CMatrix partial_trace(const StateVector& joint, std::uint32_t dims, std::uint32_t n, std::uint32_t keep) {
  CMatrix rho = CMatrix::Zero(dims, dims);
  const StateVector psi = joint / joint.norm();
  std::uint64_t stride = 1;
  for (std::uint32_t k = keep + 1; k < n; ++k) stride *= dims;
  for (Eigen::Index a = 0; a < psi.size(); ++a) {
    for (Eigen::Index b = 0; b < psi.size(); ++b) {
      const auto ia = static_cast<std::uint64_t>(a), ib = static_cast<std::uint64_t>(b);
      const std::uint64_t da = (ia / stride) % dims, db = (ib / stride) % dims;
      // all other digits must agree
      if (ia - da * stride != ib - db * stride) continue;
      rho(static_cast<Eigen::Index>(da), static_cast<Eigen::Index>(db)) += psi[a] * std::conj(psi[b]);
    }
  }
  return rho;
}

}  // namespace aq::oracle
