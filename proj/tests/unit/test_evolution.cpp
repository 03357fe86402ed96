#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>

#include "core/error.hpp"
#include "core/evolution.hpp"

using namespace spdelab;

namespace {

constexpr double kPi = std::numbers::pi;

// Fourier multiplier m(|xi|^2) as an action.
Action multiplier(const TriplePtr& tri, std::function<double(double)> m) {
  std::vector<double> sym(tri->size());
  const auto xi2 = tri->xi_squared();
  for (std::size_t q = 0; q < sym.size(); ++q) sym[q] = m(xi2[q]);
  return [tri, sym](const StepContext&, std::span<const double> v, std::span<double> out) {
    auto h = tri->forward(v);
    for (std::size_t q = 0; q < h.size(); ++q) h[q] *= sym[q];
    const Field r = tri->inverse(h);
    std::copy(r.begin(), r.end(), out.begin());
  };
}

OperatorPair heat_pair(const TriplePtr& tri, double a, double shift, int channels = 0) {
  OperatorPair ops;
  ops.A = multiplier(tri, [a, shift](double x2) { return -a * x2 - shift; });
  ops.channels = channels;
  ops.principal_symbol.resize(tri->size());
  const auto xi2 = tri->xi_squared();
  for (std::size_t q = 0; q < xi2.size(); ++q) ops.principal_symbol[q] = -a * xi2[q] - shift;
  ops.symbol_exact = true;
  ops.B = [](const StepContext&, int, std::span<const double>, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
  return ops;
}

Field sine(const SpectralTriple& tri) {
  Field f(tri.size());
  for (std::size_t q = 0; q < f.size(); ++q) f[q] = std::sin(tri.coord(q, 0));
  return f;
}

NoiseModel noise(int channels, double dt, int steps, std::uint64_t seed = 1) {
  NoiseModel nm;
  nm.channels = channels;
  nm.dt = dt;
  nm.steps = steps;
  nm.seed = seed;
  return nm;
}

}  // namespace

TEST(Coercivity, LaplacianMinusIdentity) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  const auto r = check_coercivity(heat_pair(tri, 1.0, 1.0), *tri, 6, {0.0});
  EXPECT_NEAR(r.delta_est, 2.0, 1e-10);
  EXPECT_TRUE(r.certified);
}

// B^k v = D_k v with A = Δ - I: per mode (2 ξ² + 2 - ξ²) / (1 + ξ²), minimum at the largest resolved ξ.
TEST(Coercivity, GradientNoise) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  auto ops = heat_pair(tri, 1.0, 1.0, 1);
  ops.B = [tri](const StepContext&, int, std::span<const double> v, std::span<double> out) {
    const Field g = tri->gradient(v, 0);
    std::copy(g.begin(), g.end(), out.begin());
  };
  double oracle = 1e300;
  for (int k = 0; k < 16; ++k) {  // Nyquist column dropped from D
    const double x2 = double(k) * k;
    oracle = std::min(oracle, (x2 + 2.0) / (1.0 + x2));
  }
  const auto r = check_coercivity(ops, *tri, 6, {0.0});
  EXPECT_NEAR(r.delta_est, oracle, 1e-9);
  EXPECT_GT(r.delta_est, 1.0);
}

TEST(Coercivity, ZeroOperatorFails) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  const auto r = check_coercivity(heat_pair(tri, 0.0, 0.0), *tri, 4, {0.0});
  EXPECT_LE(r.delta_est, 0.0);
  EXPECT_FALSE(r.certified);
  EXPECT_FALSE(r.worst_sample.empty());
}

TEST(Solve, ZeroDataStaysZero) {
  auto tri = SpectralTriple::create({2, 8, 3.0, 1});
  EvolutionProblem p{tri, heat_pair(tri, 1.0, 0.0, 2), {}, {}, Field(tri->size(), 0.0)};
  const auto tr = solve(p, noise(2, 0.01, 20), 0);
  for (const auto& s : tr.states) {
    for (double x : s) EXPECT_EQ(x, 0.0);
  }
}

// Implicit Euler on du = Δu: u_n = (1 + dt)^{-n} sin x, within 5 dt of e^{-t} sin x.
TEST(Solve, HeatMatchesClosedForm) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  EvolutionProblem p{tri, heat_pair(tri, 1.0, 0.0), {}, {}, sine(*tri)};
  const double dt = 1e-3;
  const auto tr = solve(p, noise(0, dt, 1000), 0);
  double err = 0.0, disc = 0.0;
  for (int n = 0; n <= 1000; ++n) {
    for (std::size_t q = 0; q < tri->size(); ++q) {
      const double s = std::sin(tri->coord(q, 0));
      err = std::max(err, std::abs(tr.states[n][q] - std::exp(-n * dt) * s));
      disc = std::max(disc, std::abs(tr.states[n][q] - std::pow(1.0 + dt, -n) * s));
    }
  }
  EXPECT_LE(err, 5 * dt);
  EXPECT_LT(disc, 1e-12);
}

TEST(Solve, LinearInDataOnSharedNoise) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  auto make = [&](double su, double sf) {
    EvolutionProblem p{tri, heat_pair(tri, 1.0, 0.5, 1), {}, {}, sine(*tri)};
    p.ops.B = [tri](const StepContext&, int, std::span<const double> v, std::span<double> out) {
      const Field g = tri->gradient(v, 0);
      for (std::size_t i = 0; i < g.size(); ++i) out[i] = 0.5 * g[i];
    };
    for (auto& x : p.u0) x *= su;
    p.forcing.f = [tri, sf](const StepContext& c, std::span<double> out) {
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = sf * std::cos(2 * tri->coord(q, 0)) * (1 + c.t);
    };
    p.forcing.h = [tri, sf](const StepContext&, int, std::span<double> out) {
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = sf * std::exp(-tri->coord(q, 0) * tri->coord(q, 0));
    };
    return p;
  };
  const auto nm = noise(1, 0.01, 50, 3);
  const auto a = solve(make(1.0, 0.0), nm, 0);
  const auto b = solve(make(0.0, 1.0), nm, 0);
  const auto c = solve(make(1.0, 1.0), nm, 0);
  double scale = 0.0, err = 0.0;
  for (int n = 0; n <= nm.steps; ++n) {
    for (std::size_t q = 0; q < tri->size(); ++q) {
      scale = std::max(scale, std::abs(c.states[n][q]));
      err = std::max(err, std::abs(c.states[n][q] - a.states[n][q] - b.states[n][q]));
    }
  }
  EXPECT_LT(err, 1e-10 * scale);
}

TEST(Solve, BitReproducible) {
  auto tri = SpectralTriple::create({2, 8, 3.0, 1});
  EvolutionProblem p{tri, heat_pair(tri, 1.0, 0.0, 1), {}, {}, Field(tri->size(), 1.0)};
  p.forcing.h = [](const StepContext&, int, std::span<double> out) { std::fill(out.begin(), out.end(), 1.0); };
  const auto nm = noise(1, 0.01, 30, 5);
  const auto a = solve(p, nm, 4), b = solve(p, nm, 4);
  for (std::size_t n = 0; n < a.states.size(); ++n) {
    EXPECT_EQ(std::memcmp(a.states[n].data(), b.states[n].data(), a.states[n].size() * sizeof(double)), 0);
  }
  const auto c = solve(p, nm, 5);
  EXPECT_NE(std::memcmp(a.states.back().data(), c.states.back().data(), a.states.back().size() * sizeof(double)), 0);
}

// du = -u dt + dw on a constant mode: E u_T^2 = u0^2 e^{-2T} + (1 - e^{-2T}) / 2.
TEST(Solve, OrnsteinUhlenbeckMoments) {
  auto tri = SpectralTriple::create({1, 2, 1.0, 1});
  EvolutionProblem p{tri, heat_pair(tri, 0.0, 1.0, 1), {}, {}, Field(2, 1.0)};
  p.forcing.h = [](const StepContext&, int, std::span<double> out) { std::fill(out.begin(), out.end(), 1.0); };
  const auto nm = noise(1, 1e-3, 1000, 17);
  const int paths = 2000;
  std::vector<double> m1(paths), m2(paths);
  for_each_path(paths, [&](std::size_t i) {
    const auto tr = solve(p, nm, i, {1e-10, 400, 1e12, false});
    m1[i] = tr.states.back()[0];
    m2[i] = m1[i] * m1[i];
  });
  double mean = 0.0, second = 0.0, s4 = 0.0;
  for (int i = 0; i < paths; ++i) {
    mean += m1[i] / paths;
    second += m2[i] / paths;
    s4 += m2[i] * m2[i] / paths;
  }
  const double e = std::exp(-2.0);
  const double se = std::sqrt((s4 - second * second) / paths);
  EXPECT_NEAR(mean, std::exp(-1.0), 4 * std::sqrt((second - mean * mean) / paths));
  EXPECT_NEAR(second, e + (1 - e) / 2, 4 * se + 2 * nm.dt);
}

TEST(ItoResidual, DeterministicOdeIsFirstOrder) {
  auto tri = SpectralTriple::create({1, 2, 1.0, 1});
  EvolutionProblem p{tri, heat_pair(tri, 0.0, 1.0), {}, {}, Field(2, 1.0)};
  double prev = 0.0;
  for (int steps : {100, 200, 400}) {
    const auto tr = solve(p, noise(0, 1.0 / steps, steps), 0);
    const double r = ito_residual(tr, p).max_abs;
    if (prev > 0.0) {
      EXPECT_NEAR(prev / r, 2.0, 0.1);
    }
    prev = r;
  }
  EXPECT_LT(prev, 0.01);
}

TEST(EnergyReport, ZeroDataGivesZeroRatio) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  EvolutionProblem p{tri, heat_pair(tri, 1.0, 1.0, 1), {}, {}, Field(tri->size(), 0.0)};
  const auto nm = noise(1, 0.01, 10);
  const auto w = WeightProcess::from_alpha(std::vector<double>(10, 1.0), nm.dt);
  EnsembleOptions eo;
  eo.n_paths = 4;
  const auto r = energy_ensemble(p, nm, w, eo);
  EXPECT_EQ(r.lhs, 0.0);
  EXPECT_EQ(r.rhs, 0.0);
  EXPECT_EQ(r.ratio, 0.0);
}

TEST(EnergyReport, QuadraticHomogeneity) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  const auto nm = noise(1, 0.01, 20, 2);
  const auto w = WeightProcess::from_alpha(std::vector<double>(20, 1.0), nm.dt);
  EnsembleOptions eo;
  eo.n_paths = 8;
  auto run = [&](double c) {
    EvolutionProblem p{tri, heat_pair(tri, 1.0, 1.0, 1), {}, {}, Field(tri->size(), 0.0)};
    p.forcing.g = [tri, c](const StepContext&, std::span<double> out) {
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = c * std::cos(tri->coord(q, 0));
    };
    return energy_ensemble(p, nm, w, eo);
  };
  const auto a = run(1.3), b = run(2.6);
  EXPECT_NEAR(b.rhs / a.rhs, 4.0, 1e-10);
  EXPECT_NEAR(b.lhs / a.lhs, 4.0, 1e-10);
  EXPECT_NEAR(b.ratio, a.ratio, 1e-10 * a.ratio);
}

TEST(Weights, PhiIsCumulative) {
  const auto w = WeightProcess::from_alpha({1.0, 2.0, 0.5}, 0.1);
  ASSERT_EQ(w.phi.size(), 4u);
  EXPECT_EQ(w.phi[0], 0.0);
  EXPECT_NEAR(w.phi[3], 0.35, 1e-15);
  for (std::size_t i = 1; i < w.phi.size(); ++i) EXPECT_GE(w.phi[i], w.phi[i - 1]);
}

TEST(Stability, IdenticalSequenceGivesZero) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  EvolutionProblem p{tri, heat_pair(tri, 1.0, 0.0, 1), {}, {}, sine(*tri)};
  p.forcing.h = [](const StepContext&, int, std::span<double> out) { std::fill(out.begin(), out.end(), 0.3); };
  EnsembleOptions eo;
  eo.n_paths = 3;
  const auto t = stability_experiment(p, {p, p}, noise(1, 0.01, 20), eo);
  for (double d : t.distance) EXPECT_EQ(d, 0.0);
}

// Diffusion a_n = 1 + 1/n on u0 = sin x; the discrete solutions are r_n^k sin x
// with r_n = 1 / (1 + dt a_n).
TEST(Stability, PerturbedDiffusionMatchesDiscreteOracle) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  const double dt = 0.01;
  const int steps = 100;
  EvolutionProblem base{tri, heat_pair(tri, 1.0, 0.0), {}, {}, sine(*tri)};
  std::vector<EvolutionProblem> seq;
  const std::vector<int> ns{1, 2, 4, 8, 16};
  for (int n : ns) seq.push_back({tri, heat_pair(tri, 1.0 + 1.0 / n, 0.0), {}, {}, sine(*tri)});
  EnsembleOptions eo;
  const auto t = stability_experiment(base, seq, noise(0, dt, steps), eo);
  EXPECT_TRUE(t.decreasing);
  for (std::size_t j = 0; j < ns.size(); ++j) {
    const double r0 = 1.0 / (1.0 + dt), rn = 1.0 / (1.0 + dt * (1.0 + 1.0 / ns[j]));
    double sup = 0.0, vint = 0.0;
    for (int k = 0; k <= steps; ++k) {
      const double d = std::pow(rn, k) - std::pow(r0, k);
      sup = std::max(sup, kPi * d * d);
      if (k < steps) vint += 2 * kPi * d * d * dt;
    }
    EXPECT_NEAR(t.distance[j], sup + vint, 1e-10 * (sup + vint));
  }
  // O(1/n^2)
  EXPECT_NEAR(t.distance[3] / t.distance[4], 4.0, 0.5);
}

TEST(Stability, RejectsMismatchedGrids) {
  auto a = SpectralTriple::create({1, 16, 2 * kPi, 1});
  auto b = SpectralTriple::create({1, 32, 2 * kPi, 1});
  EvolutionProblem pa{a, heat_pair(a, 1.0, 0.0), {}, {}, sine(*a)};
  EvolutionProblem pb{b, heat_pair(b, 1.0, 0.0), {}, {}, sine(*b)};
  EXPECT_THROW(stability_experiment(pa, {pb}, noise(0, 0.01, 5), {}), Error);
}
