#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "core/error.hpp"
#include "core/spde.hpp"

using namespace spdelab;

namespace {

constexpr double kPi = std::numbers::pi;

SPDEProblem heat(const SpectralTriple& tri, int channels) {
  SPDEProblem p;
  p.coeffs = heat_coefficients(tri, channels, 1.0, 1.0);
  p.u0.resize(tri.size());
  for (std::size_t q = 0; q < tri.size(); ++q) p.u0[q] = std::sin(tri.coord(q, 0));
  return p;
}

Trajectory frozen(const TriplePtr& tri, const Field& u, double dt, int steps) {
  Trajectory tr;
  tr.triple = tri;
  tr.dt = dt;
  for (int n = 0; n <= steps; ++n) {
    tr.states.push_back(u);
    tr.times.push_back(n * dt);
  }
  return tr;
}

}  // namespace

TEST(Assemble, HeatMarginIsTwiceMinOfOneAndShift) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  for (double delta : {0.25, 0.5, 1.0}) {
    AssemblyOptions o;
    o.delta = delta;
    const auto as = assemble_L2(tri, heat(*tri, 1), o);
    EXPECT_EQ(as.n0, 0.0);
    EXPECT_NEAR(as.c0, delta, 1e-15);
    EXPECT_NEAR(as.coercivity.delta_est, 2.0 * std::min(1.0, as.c0), 1e-9);
    EXPECT_TRUE(as.gate.passed);
  }
}

// σ = sqrt(2 - δ) I leaves exactly δ of ellipticity: per mode δ(ξ² + 2) / (1 + ξ²).
TEST(Assemble, CriticalNoiseLeavesDelta) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  const double delta = 0.5;
  auto p = heat(*tri, 1);
  std::fill(p.coeffs.sigma[0].begin(), p.coeffs.sigma[0].end(), std::sqrt(2.0 - delta));
  AssemblyOptions o;
  o.delta = delta;
  const auto as = assemble_L2(tri, p, o);
  EXPECT_NEAR(as.ellipticity, delta, 1e-12);
  const double x2 = 15.0 * 15.0;
  EXPECT_NEAR(as.coercivity.delta_est, delta * (x2 + 2.0) / (1.0 + x2), 1e-9);
  EXPECT_GE(as.coercivity.delta_est, delta);
}

TEST(Assemble, EllipticityViolationIsGated) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  auto p = heat(*tri, 1);
  std::fill(p.coeffs.sigma[0].begin(), p.coeffs.sigma[0].end(), 1.6);
  EXPECT_THROW(
      {
        try {
          assemble_L2(tri, p, {});
        } catch (const Error& e) {
          EXPECT_EQ(e.kind(), ErrorKind::Gate);
          throw;
        }
      },
      Error);
}

TEST(Assemble, SingularDriftAboveThresholdIsRefused) {
  auto tri = SpectralTriple::create({3, 8, 2.0, 1});
  const auto smp = BallSampler::strided(*tri, 2, 2 * tri->spacing(), 0.8, 3);
  MorreyParams mp;
  mp.r = 2.5;
  auto p = heat(*tri, 1);
  auto rad = radial_vector_field(*tri, 1.0);
  for (auto& c : rad) {
    for (auto& x : c) x *= -2.0;
  }
  p.coeffs.b = make_admissible(*tri, rad, std::vector<Field>(3, Field(tri->size(), 0.0)), mp, smp);
  AssemblyOptions o;
  const auto gate = smallness_gate(p.coeffs, 1, o.theta);
  EXPECT_FALSE(gate.passed);
  EXPECT_GT(gate.sum, o.theta);
  try {
    assemble_L2(tri, p, o);
    FAIL() << "expected a gate refusal";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Gate);
  }
  o.enforce_gate = false;
  const auto as = assemble_L2(tri, p, o);
  EXPECT_FALSE(as.gate.passed);
}

TEST(Assemble, OrderMismatchIsConfigError) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  EXPECT_THROW(assemble_W12(tri, heat(*tri, 0), {}), Error);
}

// With o = 2 the forcing f enters as F* and |F*|_{V*} = |f|_{L2}.
TEST(Assemble, SecondOrderForcingDualNorm) {
  auto tri = SpectralTriple::create({2, 16, 2 * kPi, 2});
  auto p = heat(*tri, 0);
  p.forcing.f.resize(tri->size());
  for (std::size_t q = 0; q < tri->size(); ++q) p.forcing.f[q] = std::cos(2 * tri->coord(q, 1)) + 0.3;
  const auto smp = BallSampler::strided(*tri, 4, 2 * tri->spacing(), 1.0, 2);
  derive_derivatives(*tri, p.coeffs, smp);
  const auto as = assemble_W12(tri, p, {});
  ASSERT_TRUE(static_cast<bool>(as.problem.forcing.f_star));
  Field y(tri->size());
  as.problem.forcing.f_star({0.0, 0, 0, {}}, y);
  EXPECT_NEAR(tri->norm_vstar(y), std::sqrt(tri->inner_l2(p.forcing.f, p.forcing.f)), 1e-10);
}

TEST(Assemble, SecondOrderHeatDecaysLikeFirstOrder) {
  auto t1 = SpectralTriple::create({1, 32, 2 * kPi, 1});
  auto t2 = SpectralTriple::create({1, 32, 2 * kPi, 2});
  auto p1 = heat(*t1, 0), p2 = heat(*t2, 0);
  const auto smp = BallSampler::strided(*t2, 4, 2 * t2->spacing(), 1.0, 2);
  derive_derivatives(*t2, p2.coeffs, smp);
  AssemblyOptions o;
  o.n0 = 0.0;
  const auto a1 = assemble_L2(t1, p1, o), a2 = assemble_W12(t2, p2, o);
  NoiseModel nm;
  nm.channels = 0;
  nm.dt = 0.01;
  nm.steps = 50;
  const auto r1 = solve(a1.problem, nm, 0), r2 = solve(a2.problem, nm, 0);
  for (std::size_t q = 0; q < t1->size(); ++q) EXPECT_NEAR(r1.states.back()[q], r2.states.back()[q], 1e-10);
}

// Node weights summing to one; convolving sin x multiplies it by Σ_j k_j cos(y_j).
TEST(Mollifier, UnitMassWeights) {
  auto tri = SpectralTriple::create({2, 64, 2.0, 1});
  auto wide = SpectralTriple::create({1, 64, 2 * kPi, 1});
  Field s(wide->size());
  for (std::size_t q = 0; q < s.size(); ++q) s[q] = std::sin(wide->coord(q, 0));
  for (double eps : {0.2, 0.3, 0.9}) {
    const Field k = mollifier_kernel(*tri, eps);
    double mass = 0.0;
    for (double x : k) {
      EXPECT_GE(x, 0.0);
      mass += x;
    }
    EXPECT_NEAR(mass, 1.0, 1e-12);

    const Field kw = mollifier_kernel(*wide, eps);
    double mult = 0.0;
    for (std::size_t j = 0; j < kw.size(); ++j) {
      int i = static_cast<int>(j);
      if (i >= 32) i -= 64;
      mult += kw[j] * std::cos(i * wide->spacing());
    }
    const Field c = convolve(*wide, kw, s);
    for (std::size_t q = 0; q < s.size(); ++q) EXPECT_NEAR(c[q], mult * s[q], 1e-12);
    EXPECT_LT(mult, 1.0);
  }
  EXPECT_THROW(mollifier_kernel(*tri, 0.04), Error);
  EXPECT_THROW(mollifier_kernel(*tri, 1.5), Error);
}

TEST(Mollifier, KeepsConstantsAndShrinksHats) {
  auto tri = SpectralTriple::create({3, 16, 1.0, 1});
  const auto smp = BallSampler::strided(*tri, 2, 2 * tri->spacing(), 0.4, 3);
  MorreyParams mp;
  mp.r = 2.5;
  auto p = heat(*tri, 1);
  auto rad = radial_vector_field(*tri, 1.0);
  const auto cut = smooth_cutoff(*tri, 0.4);
  for (auto& c : rad) {
    for (std::size_t q = 0; q < c.size(); ++q) c[q] *= -0.02 * cut[q];
  }
  p.coeffs.b = make_admissible(*tri, rad, std::vector<Field>(3, Field(tri->size(), 0.0)), mp, smp);
  p.forcing.g.assign(tri->size(), 2.0);
  MollifyOptions mo;
  mo.sampler = &smp;
  MollifyReport rep;
  const auto m = mollify_problem(*tri, p, 0.25, mo, &rep);
  EXPECT_TRUE(rep.hats_monotone);
  for (const auto& [name, hats] : rep.hats) EXPECT_LE(hats.second, hats.first * (1 + 1e-12)) << name;
  for (std::size_t q = 0; q < tri->size(); ++q) {
    EXPECT_NEAR(m.coeffs.a[0][q], 1.0, 1e-12);
    EXPECT_NEAR(m.forcing.g[q], 2.0, 1e-12);
  }
}

// u = sin x is stationary for du = (Δu + sin x) dt.
TEST(WeakResidual, StationarySolutionIsExact) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  auto p = heat(*tri, 0);
  p.forcing.f = p.u0;
  const auto tr = frozen(tri, p.u0, 0.01, 10);
  EXPECT_LT(weak_residual(tr, p, default_test_set(*tri, 4, 11)), 1e-10);
  p.forcing.f.assign(tri->size(), 0.0);
  EXPECT_GT(weak_residual(tr, p, default_test_set(*tri, 4, 11)), 1e-3);
}

TEST(Gaussian, SquaredNormMatchesClosedForm) {
  for (int d : {1, 2}) {
    auto tri = SpectralTriple::create({d, 128, 16.0, 1});
    for (double t : {0.25, 0.5, 1.0}) {
      const Field u = gaussian_field(*tri, t, std::vector<double>(static_cast<std::size_t>(d), 0.3));
      EXPECT_NEAR(tri->inner_l2(u, u), std::pow(kPi * t, 0.5 * d), 1e-9);
    }
  }
}

TEST(LpReport, ZeroDataAndHomogeneity) {
  auto tri = SpectralTriple::create({2, 16, 2 * kPi, 1});
  auto p = heat(*tri, 1);
  std::fill(p.coeffs.sigma[0].begin(), p.coeffs.sigma[0].end(), 0.5);
  p.forcing.f.resize(tri->size());
  p.forcing.g.resize(tri->size());
  p.forcing.h.assign(1, Field(tri->size()));
  for (std::size_t q = 0; q < tri->size(); ++q) {
    p.forcing.f[q] = std::cos(tri->coord(q, 1));
    p.forcing.g[q] = 0.5 * std::sin(tri->coord(q, 0) + tri->coord(q, 1));
    p.forcing.h[0][q] = 0.2;
  }
  const double p_exp = 4.0, dt = 0.02;
  const int steps = 10;
  ReportWeights rw;
  NoiseModel nm;
  nm.channels = 1;
  nm.dt = dt;
  nm.steps = steps;
  const auto w = WeightProcess::from_alpha(lp_alpha(p.coeffs, nm, rw), dt);

  SPDEProblem zero = p;
  zero.forcing.scale(0.0);
  const auto z = lp_terms(frozen(tri, Field(tri->size(), 0.0), dt, steps), zero, w, p_exp);
  for (double x : z.lhs) EXPECT_EQ(x, 0.0);
  for (double x : z.rhs) EXPECT_EQ(x, 0.0);

  Field u = p.u0;
  for (std::size_t q = 0; q < u.size(); ++q) u[q] += 0.4 * std::cos(tri->coord(q, 1));
  const auto a = lp_terms(frozen(tri, u, dt, steps), p, w, p_exp);
  const double c = 3.7;
  SPDEProblem pc = p;
  pc.forcing.scale(c);
  for (auto& x : u) x *= c;
  const auto b = lp_terms(frozen(tri, u, dt, steps), pc, w, p_exp);
  const double cp = std::pow(c, p_exp);
  for (std::size_t i = 0; i < a.lhs.size(); ++i) EXPECT_NEAR(b.lhs[i], cp * a.lhs[i], 1e-9 * cp * (a.lhs[i] + 1e-300));
  for (std::size_t i = 0; i < a.rhs.size(); ++i) EXPECT_NEAR(b.rhs[i], cp * a.rhs[i], 1e-9 * cp * (a.rhs[i] + 1e-300));
  EXPECT_THROW(lp_terms(frozen(tri, u, dt, steps), p, w, 2.0), Error);
}

TEST(LpNorm, MatchesQuadrature) {
  auto tri = SpectralTriple::create({1, 64, 2 * kPi, 1});
  Field u(tri->size());
  for (std::size_t q = 0; q < u.size(); ++q) u[q] = std::sin(tri->coord(q, 0));
  // ∫ sin^4 over a period = 3π/4
  EXPECT_NEAR(lp_norm(*tri, u, 4.0), std::pow(0.75 * kPi, 0.25), 1e-12);
}
