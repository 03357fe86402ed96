#include "core/suites.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "core/error.hpp"
#include "core/evolution.hpp"
#include "core/morrey.hpp"
#include "core/rng.hpp"

namespace spdelab {

bool SuiteReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

void SuiteReport::add(std::string name, double value, double bound, bool passed, std::string detail) {
  checks.push_back(Check{std::move(name), value, bound, passed, std::move(detail)});
}

namespace {

Field random_field(const SpectralTriple& tri, std::uint64_t seed, std::uint64_t index) {
  Field f(tri.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = counter_normal(seed, i, static_cast<std::uint32_t>(index), 0x5E50);
  return f;
}

GridFunction gf(const TriplePtr& tri, Field f) { return GridFunction{tri, std::move(f)}; }

}  // namespace

SuiteReport resolvent_suite(const TriplePtr& triple, const ResolventSuiteOptions& o) {
  SuiteReport rep;
  rep.suite = "resolvent-suite";
  const SpectralTriple& tri = *triple;
  const int pairs = 10;

  double sym_h = 0.0, sym_v = 0.0, ident = 0.0, con_h = 0.0, con_v = 0.0, rv = 0.0, dens = 0.0, order = 0.0;
  for (double lambda : o.lambdas) {
    for (int q = 0; q < pairs; ++q) {
      const Field f = random_field(tri, o.seed, 2 * q);
      const Field g = random_field(tri, o.seed, 2 * q + 1);
      const Field rf = resolvent(triple, lambda, gf(triple, f)).values;
      const Field rg = resolvent(triple, lambda, gf(triple, g)).values;
      const double sh = std::abs(tri.inner_h(rf, g) - tri.inner_h(f, rg)) / (tri.norm_h(f) * tri.norm_h(g));
      const double sv = std::abs(tri.inner_v(rf, g) - tri.inner_v(f, rg)) / (tri.norm_v(f) * tri.norm_v(g));
      sym_h = std::max(sym_h, sh);
      sym_v = std::max(sym_v, sv);
      Field lhs_f(f.size());
      for (std::size_t i = 0; i < f.size(); ++i) lhs_f[i] = f[i] - lambda * rf[i];
      const double id = std::abs(tri.inner_v(rf, g) - tri.inner_h(lhs_f, g)) / (tri.norm_h(f) * tri.norm_v(g));
      ident = std::max(ident, id);
      const Field pre = resolvent_preimage(triple, lambda, gf(triple, g)).values;
      const Field back = resolvent(triple, lambda, gf(triple, pre)).values;
      double diff = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) diff = std::max(diff, std::abs(back[i] - g[i]));
      double gmax = 0.0;
      for (double x : g) gmax = std::max(gmax, std::abs(x));
      dens = std::max(dens, diff / gmax);
    }
    for (int q = 0; q < o.random_fields; ++q) {
      const Field f = random_field(tri, o.seed + 1, static_cast<std::uint64_t>(q));
      const Field rf = resolvent(triple, lambda, gf(triple, f)).values;
      con_h = std::max(con_h, lambda * tri.norm_h(rf) / tri.norm_h(f));
      con_v = std::max(con_v, lambda * tri.norm_v(rf) / tri.norm_v(f));
      rv = std::max(rv, tri.norm_v(rf) / tri.norm_h(f));
      order = std::max(order, tri.norm_h(f) / tri.norm_v(f));
    }
  }
  for (int q = 0; q < o.random_fields; ++q) {
    const Field f = random_field(tri, o.seed + 1, static_cast<std::uint64_t>(q));
    rv = std::max(rv, tri.norm_v(resolvent(triple, 0.0, gf(triple, f)).values) / tri.norm_h(f));
  }
  const double tol = o.tolerance;
  rep.add("symmetry_h", sym_h, tol, sym_h <= tol, "max |(R f, g)_H - (f, R g)_H| / (|f|_H |g|_H)");
  rep.add("symmetry_v", sym_v, tol, sym_v <= tol, "max |(R f, g)_V - (f, R g)_V| / (|f|_V |g|_V)");
  rep.add("identity_v_h", ident, tol, ident <= tol, "max |(R f, u)_V - ((1 - λR) f, u)_H| / (|f|_H |u|_V)");
  rep.add("contraction_h", con_h, 1.0 + tol, con_h <= 1.0 + tol, "max |λ R f|_H / |f|_H");
  rep.add("contraction_v", con_v, 1.0 + tol, con_v <= 1.0 + tol, "max |λ R f|_V / |f|_V");
  rep.add("resolvent_v_by_h", rv, 2.0, rv <= 2.0, "max |R f|_V / |f|_H over λ in {0} and the ladder");
  rep.add("norm_order", order, 1.0, order <= 1.0, "max |f|_H / |f|_V");
  rep.add("preimage_roundtrip", dens, 1e-12, dens <= 1e-12, "max |R g - v| / max |v| for g the inverse-symbol preimage");

  // Fixed points: λ w_H / (λ w_H + w_V) < 1 on every mode.
  double mult = 0.0;
  for (double lambda : o.lambdas) {
    for (std::size_t s = 0; s < tri.size(); ++s) {
      const double wh = tri.weight_h()[s], wv = tri.weight_v()[s];
      mult = std::max(mult, lambda * wh / (lambda * wh + wv));
    }
  }
  rep.add("no_fixed_point", mult, 1.0, mult < 1.0, "max per-mode multiplier of λR");

  // λ = 1, f ≡ 1: R f ≡ 1/2 when o = 1.
  if (tri.order() == 1) {
    const Field one(tri.size(), 1.0);
    const Field r1 = resolvent(triple, 1.0, gf(triple, one)).values;
    double e = 0.0;
    for (double x : r1) e = std::max(e, std::abs(x - 0.5));
    rep.add("constant_mode", e, 1e-14, e <= 1e-14, "max |R_1 1 - 1/2|");
  }

  // Convergence on a band-limited field: modes with |ξ|^2 <= band_xi2.
  Field f = random_field(tri, o.seed + 2, 0);
  {
    auto fh = tri.forward(f);
    for (std::size_t s = 0; s < fh.size(); ++s) {
      if (tri.xi_squared()[s] > o.band_xi2) fh[s] = 0.0;
    }
    f = tri.inverse(fh);
  }
  const double fv = tri.norm_v(f), fhn = tri.norm_h(f);
  double prev_v = std::numeric_limits<double>::infinity(), prev_h = prev_v;
  bool mono = true;
  double last_v = 0.0;
  for (int j = 0; j <= o.max_power; ++j) {
    const double lambda = std::ldexp(1.0, j);
    const Field r = resolvent(triple, lambda, gf(triple, f)).values;
    Field d(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) d[i] = f[i] - lambda * r[i];
    const double ev = tri.norm_v(d) / fv, eh = tri.norm_h(d) / fhn;
    mono = mono && ev <= prev_v * (1.0 + 1e-12) && eh <= prev_h * (1.0 + 1e-12);
    prev_v = ev;
    prev_h = eh;
    last_v = ev;
  }
  rep.add("convergence_monotone", mono ? 1.0 : 0.0, 1.0, mono, "|f - λR f|_{H,V} nonincreasing along λ = 2^j");
  std::ostringstream os;
  os << "|f - λR f|_V / |f|_V at λ = 2^" << o.max_power << ", f band-limited to |ξ|^2 <= " << o.band_xi2;
  rep.add("convergence_final", last_v, o.convergence_target, last_v < o.convergence_target, os.str());
  return rep;
}

SuiteReport morrey_suite(const MorreySuiteOptions& o) {
  SuiteReport rep;
  rep.suite = "morrey-suite";

  // Constant field on a coarse 3-D grid: norm = rho0 * C.
  {
    auto tri = SpectralTriple::create({3, 24, o.box, 1});
    auto s = BallSampler::strided(*tri, 4, 2.0 * tri->spacing(), o.rho0, 4);
    const Field c(tri->size(), o.constant);
    const double v = morrey_norm(*tri, c, o.r, 1.0, s);
    const double e = std::abs(v / (o.rho0 * o.constant) - 1.0);
    rep.add("constant_norm", e, 1e-12, e <= 1e-12, "| |C|_{r,1} / (rho0 C) - 1 |");
    const double scaled = morrey_norm(*tri, Field(tri->size(), 3.0 * o.constant), o.r, 1.0, s);
    const double es = std::abs(scaled / (3.0 * v) - 1.0);
    rep.add("norm_homogeneity", es, 1e-12, es <= 1e-12, "| |3C| / (3 |C|) - 1 |");
  }

  // 1/|x| scaling: rho (mean_{B_rho(0)} |x|^{-2})^{1/2} = sqrt(3) for every rho.
  {
    auto tri = SpectralTriple::create({3, o.scaling_grid, o.box, 1});
    const double h = tri->spacing();
    BallSampler s;
    s.centers = {origin_node(*tri)};
    s.radii = BallSampler::geometric(4.0 * h, 0.2 * o.box, o.scaling_radii);
    const Field f = power_field(*tri, 1.0);
    const auto means = ball_means(*tri, f, 2.0, s);
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    std::ostringstream os;
    os << "rho * (mean |x|^-2)^{1/2} at rho =";
    for (std::size_t j = 0; j < means.size(); ++j) {
      const double v = s.radii[j] * std::sqrt(means[j]);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      os << ' ' << s.radii[j] << ':' << v;
    }
    const double spread = hi / lo - 1.0;
    rep.add("inverse_distance_scaling", spread, o.scaling_tolerance, spread <= o.scaling_tolerance, os.str());
    const double dev = std::abs(hi / std::sqrt(3.0) - 1.0);
    rep.add("inverse_distance_value", dev, o.scaling_tolerance, dev <= o.scaling_tolerance, "max |value / sqrt(3) - 1|");
  }

  // Threshold decomposition of |x|^{-1/2}: fitted constant stable across grids,
  // hats nonincreasing in N_hat.
  {
    std::vector<double> fitted;
    bool mono = true, exact = true;
    std::ostringstream os;
    for (int m : o.decompose_grids) {
      auto tri = SpectralTriple::create({3, m, o.box, 1});
      const double h = tri->spacing();
      auto s = BallSampler::strided(*tri, std::max(1, m / 16), 2.0 * h, o.rho0, 4, {origin_node(*tri)});
      const Field cut = smooth_cutoff(*tri, 0.8 * o.box / 2.0);
      Field b0 = power_field(*tri, 0.5);
      for (std::size_t q = 0; q < b0.size(); ++q) b0[q] *= cut[q];
      const std::vector<Field> b{b0};
      MorreyParams mp;
      mp.r = o.r;
      mp.rho0 = o.rho0;
      double fit = 0.0, prev_hat = std::numeric_limits<double>::infinity();
      for (double nh : o.n_hats) {
        const auto res = decompose_lpq(*tri, {0.0}, {b}, o.decompose_p, nh, mp, s);
        fit = std::max(fit, res.fitted_constant);
        mono = mono && res.field.hat <= prev_hat * (1.0 + 1e-12);
        prev_hat = res.field.hat;
        for (std::size_t c = 0; c < b.size(); ++c) {
          for (std::size_t q = 0; q < b[c].size(); ++q) {
            exact = exact && res.field.singular[0][c][q] + res.field.bounded[0][c][q] == b[c][q];
          }
        }
      }
      fitted.push_back(fit);
      os << " M=" << m << ":" << fit;
    }
    const double spread = *std::max_element(fitted.begin(), fitted.end()) / *std::min_element(fitted.begin(), fitted.end()) - 1.0;
    rep.add("decompose_fit_stability", spread, o.decompose_tolerance, spread <= o.decompose_tolerance,
            "fitted N in rho^d mean|b^M|^d <= N N_hat^{d-p}:" + os.str());
    rep.add("decompose_hat_monotone", mono ? 1.0 : 0.0, 1.0, mono, "hat nonincreasing over the N_hat ladder");
    rep.add("decompose_exact_split", exact ? 1.0 : 0.0, 1.0, exact, "b^M + b^B == b bitwise");
  }

  // LPS bookkeeping.
  {
    const bool a = check_lps(3, 3.0, std::numeric_limits<double>::infinity()).critical;
    const bool b = check_lps(3, std::numeric_limits<double>::infinity(), 2.0).critical;
    const bool c = !check_lps(3, 4.0, 4.0).critical;
    rep.add("lps_examples", (a && b && c) ? 1.0 : 0.0, 1.0, a && b && c, "(3,inf) and (inf,2) critical, (4,4) not");
  }
  return rep;
}

namespace {

EvolutionProblem scalar_problem(const TriplePtr& tri, double decay, double u0) {
  EvolutionProblem p;
  p.triple = tri;
  p.ops.channels = 1;
  p.ops.principal_symbol.assign(tri->size(), -decay);
  p.ops.symbol_exact = true;
  p.ops.delta = 1.0;
  p.forcing.h = [](const StepContext&, int, std::span<double> out) { std::fill(out.begin(), out.end(), 1.0); };
  p.u0.assign(tri->size(), u0);
  return p;
}

}  // namespace

ItoSuiteResult ito_suite(const ItoSuiteOptions& o) {
  ItoSuiteResult res;
  res.report.suite = "ito-suite";
  // Constants on a two-node grid of box 1 stand in for H = V = R.
  auto tri = SpectralTriple::create({1, 2, 1.0, 1});
  const auto ou = scalar_problem(tri, 1.0, o.u0);
  const auto mart = scalar_problem(tri, 0.0, 0.0);
  const double T = o.horizon;
  const double ou_exact = o.u0 * o.u0 * std::exp(-2.0 * T) + 0.5 * (1.0 - std::exp(-2.0 * T));
  const double fine = *std::min_element(o.dts.begin(), o.dts.end());
  for (double dt : o.dts) {
    NoiseModel nm;
    nm.channels = 1;
    nm.dt = dt;
    nm.steps = static_cast<int>(std::lround(T / dt));
    nm.substeps = static_cast<int>(std::lround(dt / fine));
    nm.seed = o.seed;
    nm.validate();
    const std::size_t n = static_cast<std::size_t>(o.n_paths);
    std::vector<double> maxr(n), u2(n), mr(n);
    for_each_path(n, [&](std::size_t path) {
      const auto tr = solve(ou, nm, path);
      maxr[path] = ito_residual(tr, ou, QuadraticVariation::Realized).max_abs;
      u2[path] = tri->inner_h(tr.states.back(), tr.states.back());
      const auto tm = solve(mart, nm, path);
      const auto r = ito_residual(tm, mart, QuadraticVariation::Compensator);
      mr[path] = r.series.back() * r.series.back();
    });
    double m1 = 0.0, m2 = 0.0, m3 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      m1 += maxr[i];
      m2 += u2[i];
      m3 += mr[i];
    }
    m1 /= static_cast<double>(n);
    m2 /= static_cast<double>(n);
    m3 /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) s2 += (u2[i] - m2) * (u2[i] - m2);
    const double se = std::sqrt(s2 / static_cast<double>(n - 1) / static_cast<double>(n));
    res.ou_mean_max.push_back(m1);
    res.ou_second_moment.push_back(m2);
    res.martingale_ms.push_back(m3);
    std::ostringstream os;
    os << "dt=" << dt << ": E u_T^2 = " << m2 << " vs " << ou_exact << " (stderr " << se << ", bias allowance 2dt)";
    const double dev = std::abs(m2 - ou_exact);
    std::ostringstream name;
    name << "ou_second_moment[dt=" << dt << "]";
    res.report.add(name.str(), dev, 4.0 * se + 2.0 * dt, dev <= 4.0 * se + 2.0 * dt, os.str());
  }
  for (std::size_t i = 1; i < o.dts.size(); ++i) {
    const double q = o.dts[i] / o.dts[i - 1];
    const double ratio = res.ou_mean_max[i] / res.ou_mean_max[i - 1];
    const double tol = o.halving_tolerance;
    std::ostringstream os;
    os << "mean max|R| " << res.ou_mean_max[i - 1] << " -> " << res.ou_mean_max[i] << " (dt ratio " << q << ")";
    res.report.add("ou_residual_order", ratio, q, std::abs(ratio / q - 1.0) <= tol, os.str());
    const double mratio = res.martingale_ms[i] / res.martingale_ms[i - 1];
    std::ostringstream om;
    om << "E R_T^2 " << res.martingale_ms[i - 1] << " -> " << res.martingale_ms[i] << " (2 T dt = "
       << 2.0 * T * o.dts[i - 1] << " -> " << 2.0 * T * o.dts[i] << ")";
    res.report.add("martingale_residual_order", mratio, q, std::abs(mratio / q - 1.0) <= tol, om.str());
  }
  return res;
}

}  // namespace spdelab
