#pragma once

#include "aq/kinetics.hpp"
#include "aq/spatial.hpp"

namespace aq {

/// Evolve a bubble under H for Hamiltonian time t on the configured backend.
inline Bubble evolve(const Bubble& b, const CMatrix& h, double t, const EngineConfig& cfg,
                     const TickObserver& observe = {}) {
  if (cfg.backend == Backend::spatial) return evolve_spatial(b, h, t, cfg, {}, observe);
  return evolve_wellmixed(b, h, t, cfg, observe);
}

}  // namespace aq
