// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "aq/harness.hpp"

using namespace aq;
using std::numbers::pi;
namespace fs = std::filesystem;

namespace {

const cplx I(0, 1);

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

CMatrix pauli(char which, double sign) {
  CMatrix m(2, 2);
  if (which == 'x') m << 0, 1, 1, 0;
  if (which == 'y') m << 0, -I, I, 0;
  if (which == 'z') m << 1, 0, 0, -1;
  return sign * m;
}

CMatrix kron(const CMatrix& a, const CMatrix& b) {
  CMatrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

StateVector vec(std::initializer_list<cplx> v) {
  StateVector s(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (auto x : v) s[k++] = x;
  return s;
}

// independent component labelling for criterion 8
std::vector<std::vector<std::uint64_t>> union_find(const std::vector<MembraneCell>& cells, double r0) {
  std::vector<std::size_t> parent(cells.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (std::size_t j = i + 1; j < cells.size(); ++j)
      if ((cells[i].coords - cells[j].coords).norm2() <= r0 * r0) parent[find(i)] = find(j);
  std::map<std::size_t, std::vector<std::uint64_t>> groups;
  for (std::size_t i = 0; i < cells.size(); ++i) groups[find(i)].push_back(cells[i].id);
  std::vector<std::vector<std::uint64_t>> out;
  for (auto& [root, ids] : groups) {
    std::sort(ids.begin(), ids.end());
    out.push_back(ids);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Bubble spatial_start() { return bubble_from_state(vec({1, 0}), 5000); }

EngineConfig spatial_engine() {
  EngineConfig cfg = EngineConfig::matched(1.0, 5000, 0.01);
  cfg.backend = Backend::spatial;
  cfg.speed = 0.02;
  cfg.neighbors = 0.15;
  return cfg;
}

std::string sweep_summary(const DegradationReport& r) {
  std::string s;
  for (const auto& p : r.points) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "eps=%.2f hung=%u tv=%.4f; ", p.eps, p.hung, p.median);
    s += buf;
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "fit slope=%.3f intercept=%.4f residual=%.4f c=%.3f monotone=%s", r.slope, r.intercept,
                r.max_residual, r.c, r.monotone ? "yes" : "no");
  return s + buf;
}

}  // namespace

int main() {
  std::printf("acceptance criteria\n");

  criterion(1, "Pauli-list fidelity", [] {
    Outcome o{true, ""};
    for (char w : {'x', 'y', 'z'}) {
      for (double sign : {-1.0, 1.0}) {
        const CMatrix h = pauli(w, sign);
        // sz leaves |0> alone; start it from |+> so the phase matters
        const StateVector psi0 = w == 'z' ? StateVector(vec({1, 1}) / std::sqrt(2.0)) : vec({1, 0});
        const auto t0 = std::chrono::steady_clock::now();
        const EngineConfig cfg = EngineConfig::matched(1.0, 10000, 0.01);
        const Bubble out = evolve_wellmixed(bubble_from_state(psi0, cfg.A), h, pi / 2, cfg);
        const double f = oracle::fidelity(state_from_bubble(out), oracle::exact_propagate(h, psi0, pi / 2));
        const double secs = seconds_since(t0);
        o.pass = o.pass && f >= 0.99 && secs <= 30;
        o.detail += std::string(sign < 0 ? "-" : "+") + "s" + w + fmt(" F=%.4f", f) + fmt(" %.2fs; ", secs);
      }
    }
    return o;
  });

  criterion(2, "Mean-field closed form", [] {
    const double A = 1e4, A0 = 1e4;
    std::vector<double> init(8, A / 2);
    init[species_index(Part::alpha, Sign::plus, 0)] = A0;
    init[species_index(Part::alpha, Sign::minus, 0)] = 0;
    const auto list = reactions_for_block({0, 1, BlockKind::minus_x, 1.0});
    const auto tr = meanfield_evolve(init, list, 1.0 / A, A, 2 * pi, 0.01);
    double err2 = 0, ref2 = 0;
    for (std::size_t s = 0; s < tr.times.size(); ++s) {
      const double ea = A0 * std::cos(tr.times[s]), eb = A0 * std::sin(tr.times[s]);
      err2 += std::pow(tr.net_of(s, Part::alpha, 0) - ea, 2) + std::pow(tr.net_of(s, Part::beta, 1) - eb, 2);
      ref2 += ea * ea + eb * eb;
    }
    const double rel = std::sqrt(err2 / ref2);
    return Outcome{rel <= 1e-6, fmt("relative L2 %.2e over one period", rel)};
  });

  criterion(3, "Second-quantization route", [] {
    const auto list = sq_reactions({{-1.0, {1}, {0}}, {-1.0, {0}, {1}}}, 2);
    const CMatrix h = pauli('x', -1.0);
    const auto cfg = EngineConfig::matched(1.0, 10000, 0.01);
    const Bubble out = evolve_nonequilibrium(bubble_from_state(vec({1, 0}), 10000), list, pi / 2, cfg);
    const double f = oracle::fidelity(state_from_bubble(out), oracle::exact_propagate(h, vec({1, 0}), pi / 2));
    return Outcome{f >= 0.98, fmt("F=%.4f", f)};
  });

  criterion(4, "Urn statistics", [] {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o{true, ""};
    for (const auto& [psi, p] : {std::pair{vec({1, 1}), std::vector<double>{0.5, 0.5}},
                                 std::pair{vec({0.6, 0.8 * I}), std::vector<double>{0.36, 0.64}}}) {
      const Bubble b = bubble_from_state(psi / psi.norm(), 10000);
      std::vector<std::uint64_t> hist(2, 0);
      MeasureConfig mc;
      mc.seed = 77;
      for (std::uint64_t k = 0; k < 10000; ++k) {
        mc.trial = k;
        ++hist[measure(b, mc).first.outcome];
      }
      const auto chi = oracle::chi_square_test(hist, p, 0.01);
      o.pass = o.pass && chi.pass;
      o.detail += fmt("p0=%.2f: ", p[0]) + std::to_string(hist[0]) + "/" + std::to_string(hist[1]) + fmt(" chi2=%.3f; ", chi.statistic);
    }
    const double secs = seconds_since(t0);
    o.pass = o.pass && secs <= 60;
    o.detail += fmt("%.1f s total", secs);
    return o;
  });

  criterion(5, "General Hamiltonian", [] {
    std::mt19937_64 gen(2025);
    std::normal_distribution<double> g(0, 1);
    Outcome o{true, ""};
    double worst = 1;
    for (int k = 0; k < 10; ++k) {
      CMatrix h(4, 4);
      for (int i = 0; i < 4; ++i) {
        h(i, i) = g(gen) * 0.5;
        for (int j = i + 1; j < 4; ++j) {
          h(i, j) = cplx(g(gen), g(gen)) * 0.5;
          h(j, i) = std::conj(h(i, j));
        }
      }
      const StateVector psi0 = basis_state(4, 0);
      EngineConfig cfg = EngineConfig::matched(1.0, 10000, 0.04);
      cfg.mode = ScheduleMode::trotter;
      cfg.trotter_dt = 0.02;
      cfg.seed = 10 + k;
      // membrane_schedule must be satisfiable: halve the tick until the guard accepts it
      std::optional<Bubble> out;
      while (!out) {
        try {
          out = evolve_wellmixed(bubble_from_state(psi0, cfg.A), h, 1.0, cfg);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::ConfigError || cfg.dt < 1e-6) throw;
          cfg.dt /= 2;
        }
      }
      const double f = oracle::fidelity(state_from_bubble(*out), oracle::exact_propagate(h, psi0, 1.0));
      worst = std::min(worst, f);
      o.pass = o.pass && f >= 0.98;
    }
    o.detail = fmt("worst F=%.4f over 10 random N=4", worst);
    return o;
  });

  criterion(6, "Two-particle entanglement", [] {
    const CMatrix h = -kron(pauli('x', 1), pauli('x', 1));
    const Bubble b = bubble_from_state(basis_state(2, 0), 10000);
    auto sys = couple_bubbles({b, b});
    evolve_chains(sys, h, pi / 2, EngineConfig::matched(1.0, sys.A));
    const double f = oracle::fidelity(joint_state_from_chains(sys), vec({0, 0, 0, I}));
    // (|00> + i|11>)/sqrt2 halfway to i|11>
    const auto deviation = [&](std::uint64_t seed) {
      auto half = couple_bubbles({b, b}, {{}, seed});
      EngineConfig cfg = EngineConfig::matched(1.0, half.A);
      cfg.seed = seed;
      evolve_chains(half, h, pi / 4, cfg);
      double dev = 0;
      for (std::uint32_t p = 0; p < 2; ++p)
        dev = std::max(dev, (reduced_density_matrix(half, p) - CMatrix::Identity(2, 2) * 0.5).cwiseAbs().maxCoeff());
      return dev;
    };
    const double dev = deviation(1);
    // spread over further seeds, for context only
    int over = 0;
    std::vector<double> devs;
    for (std::uint64_t s = 1; s <= 10; ++s) {
      devs.push_back(s == 1 ? dev : deviation(s));
      over += devs.back() > 0.02;
    }
    std::sort(devs.begin(), devs.end());
    return Outcome{f >= 0.98 && dev <= 0.02, fmt("F(i|11>)=%.4f", f) + fmt(", max |rho - I/2| = %.4f at t=pi/4 (seed 1)", dev) +
                                                 fmt("; seeds 1-10: median %.4f, ", 0.5 * (devs[4] + devs[5])) +
                                                 std::to_string(over) + "/10 above 0.02"};
  });

  criterion(7, "Identity statistics", [] {
    auto bos = couple_bubbles({bubble_from_state(basis_state(2, 0), 40000), bubble_from_state(basis_state(2, 1), 40000)});
    const auto rb = exchange_bosons(bos);
    auto fer = couple_bubbles({bubble_from_state(basis_state(2, 0), 40000), bubble_from_state(basis_state(2, 1), 40000)});
    const auto rf = exchange_fermions(fer);
    auto dbl = couple_bubbles({bubble_from_state(vec({1, 1}) / std::sqrt(2.0), 40000), bubble_from_state(basis_state(2, 0), 40000)});
    exchange_fermions(dbl);
    reduce_chains(dbl);
    const StateVector psi = joint_state_from_chains(dbl);
    const double occ = std::max(std::abs(psi[0]), std::abs(psi[3]));
    const bool pass = rb.converged && rf.converged && rb.defect <= 0.02 && rf.defect <= 0.02 && occ <= 0.02;
    return Outcome{pass, fmt("boson defect %.4f", rb.defect) + fmt(", fermion defect %.4f", rf.defect) +
                             fmt(", double occupation %.4f", occ)};
  });

  criterion(8, "Membrane and Ehrenfest", [] {
    const std::uint32_t n = 16;
    CMatrix h = CMatrix::Zero(n, n);
    for (std::uint32_t j = 0; j + 1 < n; ++j) h(j, j + 1) = h(j + 1, j) = -1.0;
    StateVector psi(n);
    for (std::uint32_t j = 0; j < n; ++j)
      psi[j] = std::exp(-std::pow(j - 4.0, 2) / (4 * 1.2 * 1.2)) * std::exp(cplx(0, pi / 4 * j));
    psi /= psi.norm();
    GrainLayout line;
    line.dims = {n, 1, 1};
    Bubble b = bubble_from_state(psi, 20000, false);
    attach_layout(b, line);
    MembraneConfig mcfg;
    update_membrane(b, mcfg);
    EngineConfig cfg = EngineConfig::matched(1.0, 20000, 0.01);
    cfg.seed = 3;
    double worst = 0;
    evolve_with_membrane(b, h, 5.0, 0.1, cfg, mcfg, [&](double t, const Bubble& s) {
      const StateVector e = oracle::exact_propagate(h, psi, t);
      double num = 0, den = 0;
      for (std::uint32_t j = 0; j < n; ++j) {
        num += j * std::norm(e[j]);
        den += std::norm(e[j]);
      }
      const double exact = num / den;
      worst = std::max(worst, std::abs(bubble_centroid(s).x - exact) / exact);
    });

    std::mt19937_64 gen(8);
    std::uniform_real_distribution<double> u(0, 10);
    int agree = 0;
    for (int rep = 0; rep < 100; ++rep) {
      Bubble m;
      m.membrane.resize(20 + rep * 5);
      for (std::size_t i = 0; i < m.membrane.size(); ++i) {
        m.membrane[i].id = i * 2 + 1;
        m.membrane[i].coords = {u(gen), u(gen), u(gen)};
      }
      m.collision_radius = 1.0 + 0.02 * rep;
      agree += detect_split(m) == union_find(m.membrane, m.collision_radius);
    }
    return Outcome{worst <= 0.10 && agree == 100,
                   fmt("max centroid error %.4f over 5 hop times", worst) + ", split agreement " + std::to_string(agree) + "/100"};
  });

  criterion(9, "Fault robustness", [] {
    FaultyConfig f;
    f.workers = 8;
    const auto r = run_partitioned_faulty(spatial_start(), pauli('x', -1), pi / 4, spatial_engine(), f);
    const bool pass = r.serial_identical && r.zero_identical && r.slope >= 0 && r.intercept <= 0.01 && r.max_residual <= 0.02 &&
                      r.bound_holds && r.seconds <= 300;
    return Outcome{pass, "k=8, 20 seeds: serial identical " + std::string(r.serial_identical ? "yes" : "no") + ", eps=0 identical " +
                             (r.zero_identical ? "yes" : "no") + "; " + sweep_summary(r) +
                             "; note floor(eps*8)=0 for every eps here, so no worker hangs"};
  });
  {
    // same sweep with enough workers that floor(eps*k) > 0; reported, not counted
    const auto t0 = std::chrono::steady_clock::now();
    try {
      FaultyConfig f;
      f.workers = 50;
      const auto r = run_partitioned_faulty(spatial_start(), pauli('x', -1), pi / 4, spatial_engine(), f);
      const bool pass = r.zero_identical && r.slope >= 0 && r.intercept <= 0.01 && r.max_residual <= 0.02 && r.bound_holds;
      std::printf("       9 supplementary k=50 sweep [%s]: %s (%.1f s)\n", pass ? "pass" : "fail", sweep_summary(r).c_str(),
                  seconds_since(t0));
    } catch (const std::exception& e) {
      std::printf("       9 supplementary k=50 sweep [fail]: error: %s\n", e.what());
    }
    std::fflush(stdout);
  }

  criterion(10, "Determinism", [] {
    const auto root = fs::temp_directory_path() / "aq_acceptance";
    fs::remove_all(root);
    const json single = json::parse(R"({"scenario": "single", "hamiltonian": [[0, -1], [-1, 0]], "t": 1.0,
      "engine": {"A": 5000, "seed": 4}, "output": {"snapshot_interval": 5}})");
    const json spatial = json::parse(R"({"scenario": "single", "hamiltonian": [[0, -1], [-1, 0]], "t": 0.5,
      "engine": {"backend": "spatial", "A": 2000, "angle": 0.02, "speed": 0.05, "seed": 4}})");
    const json meas = json::parse(R"({"scenario": "measure", "hamiltonian": [[0, 0], [0, 0]], "initial": [1, 1],
      "engine": {"A": 1000, "seed": 4}, "measure": {"trials": 200}})");
    const json multi = json::parse(R"({"scenario": "multi", "hamiltonian": [[0,0,0,-1],[0,0,-1,0],[0,-1,0,0],[-1,0,0,0]],
      "t": 0.5, "engine": {"A": 5000, "seed": 4}, "multi": {"particles": [[1, 0], [1, 0]]}})");
    const json faulty = json::parse(R"({"scenario": "faulty", "hamiltonian": [[0, -1], [-1, 0]], "t": 0.2,
      "engine": {"backend": "spatial", "A": 1000, "angle": 0.02, "speed": 0.05, "seed": 4},
      "faulty": {"workers": 4, "eps": [0, 0.25], "seeds": 2}})");
    int same = 0, total = 0;
    for (const auto& [name, j] : {std::pair{"single", single}, std::pair{"spatial", spatial}, std::pair{"measure", meas},
                                  std::pair{"multi", multi}, std::pair{"faulty", faulty}}) {
      std::string first;
      for (int rep = 0; rep < 2; ++rep) {
        auto c = parse_config(j);
        c.output.dir = root / (std::string(name) + std::to_string(rep));
        run(c);
        const auto bytes = slurp(c.output.dir / "trajectory.jsonl");
        if (rep == 0) first = bytes;
        else same += !bytes.empty() && bytes == first;
      }
      ++total;
    }
    return Outcome{same == total, std::to_string(same) + "/" + std::to_string(total) + " scenarios byte-identical on repeat"};
  });

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
