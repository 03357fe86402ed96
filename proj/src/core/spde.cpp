#include "core/spde.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>

#include "core/error.hpp"

namespace spdelab {

namespace {

bool any_nonzero(const std::vector<Field>& comps) {
  for (const auto& c : comps) {
    for (double x : c) {
      if (x != 0.0) return true;
    }
  }
  return false;
}

bool any_nonzero_slices(const std::vector<std::vector<Field>>& slices) {
  for (const auto& s : slices) {
    if (any_nonzero(s)) return true;
  }
  return false;
}

bool is_constant(const Field& f) {
  if (f.empty()) return true;
  for (double x : f) {
    if (x != f.front()) return false;
  }
  return true;
}

double profile_at(const std::function<double(double)>& p, double t) { return p ? p(t) : 1.0; }

void check_admissible(const SpectralTriple& triple, const AdmissibleField& f, int comps, const char* name) {
  if (f.empty()) fail(ErrorKind::Config, std::string("coefficient '") + name + "' is missing");
  if (f.components != comps) {
    fail(ErrorKind::Shape, std::string("coefficient '") + name + "' needs " + std::to_string(comps) + " components");
  }
  if (f.singular.size() != f.times.size() || f.bounded.size() != f.times.size() || f.bar.size() != f.times.size()) {
    fail(ErrorKind::Shape, std::string("coefficient '") + name + "' has inconsistent time slices");
  }
  for (std::size_t s = 0; s < f.times.size(); ++s) {
    if (f.singular[s].size() != static_cast<std::size_t>(comps) || f.bounded[s].size() != static_cast<std::size_t>(comps)) {
      fail(ErrorKind::Shape, std::string("coefficient '") + name + "' has the wrong component count");
    }
    for (const auto& c : f.singular[s]) triple.check_shape(c);
    for (const auto& c : f.bounded[s]) triple.check_shape(c);
  }
}

}  // namespace

void SPDECoefficients::validate(const SpectralTriple& triple) const {
  if (dim != triple.dim()) fail(ErrorKind::Shape, "coefficients: dimension differs from the triple");
  if (channels < 0) fail(ErrorKind::Config, "coefficients: negative channel count");
  if (!(rho0 > 0.0 && rho0 <= 1.0)) fail(ErrorKind::Config, "coefficients: rho0 must lie in (0, 1]");
  const auto d = static_cast<std::size_t>(dim);
  const auto k = static_cast<std::size_t>(channels);
  if (a.size() != d * d) fail(ErrorKind::Shape, "coefficients: a needs d*d fields");
  if (sigma.size() != d * k) fail(ErrorKind::Shape, "coefficients: sigma needs d*K fields");
  for (const auto& f : a) triple.check_shape(f);
  for (const auto& f : sigma) triple.check_shape(f);
  check_admissible(triple, beta, dim, "beta");
  check_admissible(triple, b, dim, "b");
  check_admissible(triple, c, 1, "c");
  check_admissible(triple, nu, channels, "nu");
  if (Da) check_admissible(triple, *Da, dim * dim * dim, "Da");
  if (Dsigma) check_admissible(triple, *Dsigma, dim * dim * channels, "Dsigma");
  if (Dnu) check_admissible(triple, *Dnu, dim * channels, "Dnu");
  if (Dc) check_admissible(triple, *Dc, dim, "Dc");
}

SPDECoefficients heat_coefficients(const SpectralTriple& triple, int channels, double a_scale, double rho0) {
  SPDECoefficients co;
  co.dim = triple.dim();
  co.channels = channels;
  co.rho0 = rho0;
  const auto d = static_cast<std::size_t>(co.dim);
  co.a.assign(d * d, Field(triple.size(), 0.0));
  for (std::size_t i = 0; i < d; ++i) std::fill(co.a[i * d + i].begin(), co.a[i * d + i].end(), a_scale);
  co.sigma.assign(d * static_cast<std::size_t>(channels), Field(triple.size(), 0.0));
  MorreyParams p;
  p.rho0 = rho0;
  p.r = std::max(2.0, static_cast<double>(co.dim));
  co.beta = zero_admissible(triple, co.dim, p);
  co.b = zero_admissible(triple, co.dim, p);
  MorreyParams pc = p;
  pc.alpha = 0.5;
  co.c = zero_admissible(triple, 1, pc);
  co.nu = zero_admissible(triple, channels, p);
  return co;
}

void SPDEForcing::validate(const SpectralTriple& triple, int channels) const {
  if (!frf.empty() && frf.size() != static_cast<std::size_t>(triple.dim())) {
    fail(ErrorKind::Shape, "forcing: frf needs d components");
  }
  if (!h.empty() && h.size() != static_cast<std::size_t>(channels)) fail(ErrorKind::Shape, "forcing: h needs K components");
  for (const auto& c : frf) triple.check_shape(c);
  for (const auto& c : h) triple.check_shape(c);
  if (!f.empty()) triple.check_shape(f);
  if (!g.empty()) triple.check_shape(g);
}

void SPDEForcing::scale(double factor) {
  auto sc = [&](Field& x) {
    for (auto& v : x) v *= factor;
  };
  for (auto& c : frf) sc(c);
  for (auto& c : h) sc(c);
  sc(f);
  sc(g);
}

std::string GateReport::describe() const {
  std::ostringstream os;
  os.precision(6);
  os << "smallness gate: ";
  for (std::size_t i = 0; i < hats.size(); ++i) os << (i ? " + " : "") << hats[i].first << "=" << hats[i].second;
  os << " = " << sum << (passed ? " <= " : " > ") << "theta=" << theta;
  return os.str();
}

GateReport smallness_gate(const SPDECoefficients& co, int order, double theta) {
  GateReport g;
  g.theta = theta;
  g.hats.emplace_back("b", co.b.hat + co.dynamic_drift_hat);
  if (order == 1) g.hats.emplace_back("beta", co.beta.hat);
  g.hats.emplace_back("c", co.c.hat);
  g.hats.emplace_back("nu", co.nu.hat);
  if (order == 2) {
    g.hats.emplace_back("Da", co.Da ? co.Da->hat : 0.0);
    g.hats.emplace_back("Dsigma", co.Dsigma ? co.Dsigma->hat : 0.0);
    g.hats.emplace_back("Dnu", co.Dnu ? co.Dnu->hat : 0.0);
  }
  for (const auto& [name, v] : g.hats) g.sum += v;
  g.passed = g.sum <= theta;
  return g;
}

std::pair<double, double> ellipticity(const SpectralTriple& triple, const SPDECoefficients& co) {
  const int d = co.dim;
  const int kc = co.channels;
  double min_eig = std::numeric_limits<double>::infinity();
  double max_a = 0.0;
  Eigen::MatrixXd a(d, d), s(d, d), sig(d, std::max(kc, 1));
  for (std::size_t node = 0; node < triple.size(); ++node) {
    sig.setZero();
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) a(i, j) = co.a[static_cast<std::size_t>(i * d + j)][node];
      for (int k = 0; k < kc; ++k) sig(i, k) = co.sigma[static_cast<std::size_t>(i * kc + k)][node];
    }
    s = a + a.transpose() - sig * sig.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (s + s.transpose()), Eigen::EigenvaluesOnly);
    min_eig = std::min(min_eig, es.eigenvalues().minCoeff());
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    max_a = std::max(max_a, svd.singularValues()(0));
  }
  return {min_eig, max_a};
}

namespace {

// Shared, immutable operator data captured by the assembled actions.
struct OpData {
  TriplePtr tri;
  std::shared_ptr<const SPDECoefficients> co;
  int order = 1;
  int d = 1;
  int k = 0;
  double c0 = 0.0;
  std::vector<double> a_mean;        // d*d
  std::vector<Field> a_var;          // a - a_mean, empty when constant
  std::vector<double> symbol;        // -ξ·a_mean ξ - c0
  bool beta_m = false, b_m = false, c_m = false, nu_m = false;
  bool beta_b = false, b_b = false, c_b = false, nu_b = false;
  bool sigma_any = false;
  std::vector<Field> da_m, da_b;     // contracted (Σ_i D_i a^{ij}) parts, o = 2
  bool da_m_any = false, da_b_any = false;
};

std::vector<Field> grads_from(const SpectralTriple& tri, const Spectrum& vhat, int d) {
  std::vector<Field> g;
  for (int a = 0; a < d; ++a) g.push_back(tri.inverse(tri.derivative(vhat, a)));
  return g;
}

void add_dot(std::span<double> out, const std::vector<Field>& coef, const std::vector<Field>& g) {
  for (std::size_t a = 0; a < coef.size() && a < g.size(); ++a) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += coef[a][i] * g[a][i];
  }
}

std::vector<Field> dynamic_at(const OpData& od, const StepContext& ctx) {
  std::vector<Field> out;
  if (od.co->dynamic_drift) {
    out.assign(static_cast<std::size_t>(od.d), Field(od.tri->size(), 0.0));
    od.co->dynamic_drift(ctx, out);
  }
  return out;
}

void apply_principal(const OpData& od, const StepContext& ctx, std::span<const double> v, std::span<double> out) {
  const SpectralTriple& tri = *od.tri;
  const std::size_t n = tri.size();
  const auto vhat = tri.forward(v);
  Spectrum acc(n);
  for (std::size_t s = 0; s < n; ++s) acc[s] = od.symbol[s] * vhat[s];

  const auto& co = *od.co;
  const std::vector<Field> dyn = dynamic_at(od, ctx);
  const bool need_grad = !od.a_var.empty() || od.b_m || !dyn.empty() || (od.order == 2 && od.da_m_any);
  std::vector<Field> g;
  if (need_grad) g = grads_from(tri, vhat, od.d);

  const std::size_t bs = co.b.slice_at(ctx.t);
  if (od.order == 1) {
    const std::size_t bes = co.beta.slice_at(ctx.t);
    if (!od.a_var.empty() || od.beta_m) {
      for (int i = 0; i < od.d; ++i) {
        Field flux(n, 0.0);
        if (!od.a_var.empty()) {
          for (int j = 0; j < od.d; ++j) {
            const auto& aij = od.a_var[static_cast<std::size_t>(i * od.d + j)];
            const auto& gj = g[static_cast<std::size_t>(j)];
            for (std::size_t q = 0; q < n; ++q) flux[q] += aij[q] * gj[q];
          }
        }
        if (od.beta_m) {
          const auto& bm = co.beta.singular[bes][static_cast<std::size_t>(i)];
          for (std::size_t q = 0; q < n; ++q) flux[q] += bm[q] * v[q];
        }
        const auto fd = tri.derivative(tri.forward(flux), i);
        for (std::size_t s = 0; s < n; ++s) acc[s] += fd[s];
      }
    }
  } else if (!od.a_var.empty()) {
    for (int i = 0; i < od.d; ++i) {
      const auto di = tri.derivative(vhat, i);
      for (int j = 0; j < od.d; ++j) {
        const Field dij = tri.inverse(tri.derivative(di, j));
        Field prod(n);
        const auto& aij = od.a_var[static_cast<std::size_t>(i * od.d + j)];
        for (std::size_t q = 0; q < n; ++q) prod[q] = aij[q] * dij[q];
        const auto ph = tri.forward(prod);
        for (std::size_t s = 0; s < n; ++s) acc[s] += ph[s];
      }
    }
  }
  const Field base = tri.inverse(acc);
  std::copy(base.begin(), base.end(), out.begin());
  if (od.b_m) add_dot(out, co.b.singular[bs], g);
  if (!dyn.empty()) add_dot(out, dyn, g);
  if (od.order == 2 && od.da_m_any) add_dot(out, od.da_m, g);
  if (od.c_m) {
    const auto& cm = co.c.singular[co.c.slice_at(ctx.t)][0];
    for (std::size_t q = 0; q < n; ++q) out[q] += cm[q] * v[q];
  }
}

void apply_b(const OpData& od, const StepContext& ctx, int k, std::span<const double> v, std::span<double> out) {
  const SpectralTriple& tri = *od.tri;
  const std::size_t n = tri.size();
  std::fill(out.begin(), out.end(), 0.0);
  const auto& co = *od.co;
  if (od.sigma_any) {
    const auto vhat = tri.forward(v);
    for (int i = 0; i < od.d; ++i) {
      const auto& s = co.sigma[static_cast<std::size_t>(i * od.k + k)];
      if (!any_nonzero({s})) continue;
      const Field gi = tri.inverse(tri.derivative(vhat, i));
      for (std::size_t q = 0; q < n; ++q) out[q] += s[q] * gi[q];
    }
  }
  if (od.nu_m) {
    const auto& nm = co.nu.singular[co.nu.slice_at(ctx.t)][static_cast<std::size_t>(k)];
    for (std::size_t q = 0; q < n; ++q) out[q] += nm[q] * v[q];
  }
}

std::shared_ptr<OpData> make_opdata(const TriplePtr& triple, const SPDEProblem& problem, int order) {
  auto od = std::make_shared<OpData>();
  od->tri = triple;
  od->co = std::make_shared<const SPDECoefficients>(problem.coeffs);
  od->order = order;
  od->d = triple->dim();
  od->k = problem.coeffs.channels;
  const auto& co = *od->co;
  const auto d = static_cast<std::size_t>(od->d);
  od->a_mean.assign(d * d, 0.0);
  bool constant = true;
  for (std::size_t e = 0; e < d * d; ++e) {
    double m = 0.0;
    for (double x : co.a[e]) m += x;
    od->a_mean[e] = m / static_cast<double>(triple->size());
    constant = constant && is_constant(co.a[e]);
  }
  if (!constant) {
    od->a_var = co.a;
    for (std::size_t e = 0; e < d * d; ++e) {
      for (auto& x : od->a_var[e]) x -= od->a_mean[e];
    }
  }
  od->beta_m = any_nonzero_slices(co.beta.singular);
  od->b_m = any_nonzero_slices(co.b.singular);
  od->c_m = any_nonzero_slices(co.c.singular);
  od->nu_m = any_nonzero_slices(co.nu.singular);
  od->beta_b = any_nonzero_slices(co.beta.bounded);
  od->b_b = any_nonzero_slices(co.b.bounded);
  od->c_b = any_nonzero_slices(co.c.bounded);
  od->nu_b = any_nonzero_slices(co.nu.bounded);
  od->sigma_any = any_nonzero(co.sigma);
  if (order == 2 && co.Da) {
    od->da_m.assign(d, Field(triple->size(), 0.0));
    od->da_b.assign(d, Field(triple->size(), 0.0));
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < d; ++i) {
        const std::size_t idx = i * d * d + i * d + j;
        const auto& m = co.Da->singular[0][idx];
        const auto& b = co.Da->bounded[0][idx];
        for (std::size_t q = 0; q < triple->size(); ++q) {
          od->da_m[j][q] += m[q];
          od->da_b[j][q] += b[q];
        }
      }
    }
    od->da_m_any = any_nonzero(od->da_m);
    od->da_b_any = any_nonzero(od->da_b);
  }
  return od;
}

void set_symbol(OpData& od, double c0) {
  od.c0 = c0;
  const SpectralTriple& tri = *od.tri;
  od.symbol.assign(tri.size(), 0.0);
  for (std::size_t s = 0; s < tri.size(); ++s) {
    double q = 0.0;
    for (int i = 0; i < od.d; ++i) {
      for (int j = 0; j < od.d; ++j) q += od.a_mean[static_cast<std::size_t>(i * od.d + j)] * tri.xi(s, i) * tri.xi(s, j);
    }
    od.symbol[s] = -q - c0;
  }
}

OperatorPair build_ops(const std::shared_ptr<const OpData>& od, double delta) {
  OperatorPair ops;
  ops.channels = od->k;
  ops.delta = delta;
  ops.principal_symbol = od->symbol;
  const bool exact = od->a_var.empty() && !od->beta_m && !od->b_m && !od->c_m && !od->co->dynamic_drift &&
                     !(od->order == 2 && od->da_m_any);
  ops.symbol_exact = exact;
  if (!exact) {
    ops.A = [od](const StepContext& ctx, std::span<const double> v, std::span<double> out) {
      apply_principal(*od, ctx, v, out);
    };
  }
  if (od->k > 0 && (od->sigma_any || od->nu_m)) {
    ops.B = [od](const StepContext& ctx, int k, std::span<const double> v, std::span<double> out) {
      apply_b(*od, ctx, k, v, out);
    };
  }
  return ops;
}

LowerOrderSet build_lower(const std::shared_ptr<const OpData>& od) {
  LowerOrderSet lo;
  const auto co = od->co;
  const int order = od->order;
  const double c0 = od->c0;
  if (order == 1) {
    if (od->b_b) {
      lo.a_vh = [od](const StepContext& ctx, std::span<const double> v, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        const auto g = grads_from(*od->tri, od->tri->forward(v), od->d);
        add_dot(out, od->co->b.bounded[od->co->b.slice_at(ctx.t)], g);
      };
    }
    if (od->beta_b) {
      lo.a_star = [od](const StepContext& ctx, std::span<const double> v, std::span<double> out) {
        const SpectralTriple& tri = *od->tri;
        const auto& bb = od->co->beta.bounded[od->co->beta.slice_at(ctx.t)];
        Spectrum acc(tri.size(), 0.0);
        for (int i = 0; i < od->d; ++i) {
          Field flux(tri.size());
          for (std::size_t q = 0; q < flux.size(); ++q) flux[q] = bb[static_cast<std::size_t>(i)][q] * v[q];
          const auto fd = tri.derivative(tri.forward(flux), i);
          for (std::size_t s = 0; s < acc.size(); ++s) acc[s] += fd[s];
        }
        const Field y = tri.inverse(acc);
        std::copy(y.begin(), y.end(), out.begin());
      };
    }
    lo.c_hh = [od, c0](const StepContext& ctx, std::span<const double> v, std::span<double> out) {
      const bool cb = od->c_b;
      const Field* c = cb ? &od->co->c.bounded[od->co->c.slice_at(ctx.t)][0] : nullptr;
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = (c0 + (cb ? (*c)[q] : 0.0)) * v[q];
    };
    lo.a_norm = [co](double t) { return co->b.bar_at(t); };
    lo.a_star_norm = [co](double t) { return co->beta.bar_at(t); };
    lo.c_norm = [co, c0](double t) { return co->c.bar_at(t) + c0; };
  } else {
    if (od->b_b || od->c_b || od->da_b_any) {
      lo.a_star = [od](const StepContext& ctx, std::span<const double> v, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        const auto g = grads_from(*od->tri, od->tri->forward(v), od->d);
        if (od->b_b) add_dot(out, od->co->b.bounded[od->co->b.slice_at(ctx.t)], g);
        if (od->da_b_any) add_dot(out, od->da_b, g);
        if (od->c_b) {
          const auto& c = od->co->c.bounded[od->co->c.slice_at(ctx.t)][0];
          for (std::size_t q = 0; q < out.size(); ++q) out[q] += c[q] * v[q];
        }
      };
    }
    lo.c_hh = [c0](const StepContext&, std::span<const double> v, std::span<double> out) {
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = c0 * v[q];
    };
    lo.a_star_norm = [co](double t) {
      double da = co->Da ? co->Da->bar_at(t) : 0.0;
      return co->b.bar_at(t) + co->c.bar_at(t) + da;
    };
    lo.c_norm = [c0](double) { return c0; };
  }
  if (od->nu_b) {
    lo.b_ell2 = [od](const StepContext& ctx, int k, std::span<const double> v, std::span<double> out) {
      const auto& nb = od->co->nu.bounded[od->co->nu.slice_at(ctx.t)][static_cast<std::size_t>(k)];
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = nb[q] * v[q];
    };
    lo.b_norm = [co, order](double t) {
      return co->nu.bar_at(t) + (order == 2 && co->Dnu ? co->Dnu->bar_at(t) : 0.0);
    };
  }
  return lo;
}

ForcingSet build_forcing(const TriplePtr& triple, const SPDEProblem& problem, int order) {
  ForcingSet fs;
  auto fo = std::make_shared<const SPDEForcing>(problem.forcing);
  const TriplePtr tri = triple;
  if (order == 1) {
    if (any_nonzero(fo->frf)) {
      // f* = D_i 𝔣^i
      auto div = std::make_shared<Field>([&] {
        Spectrum acc(tri->size(), 0.0);
        for (int i = 0; i < tri->dim(); ++i) {
          const auto fd = tri->derivative(tri->forward(fo->frf[static_cast<std::size_t>(i)]), i);
          for (std::size_t s = 0; s < acc.size(); ++s) acc[s] += fd[s];
        }
        return tri->inverse(acc);
      }());
      fs.f_star = [fo, div](const StepContext& ctx, std::span<double> out) {
        const double p = profile_at(fo->frf_profile, ctx.t);
        for (std::size_t q = 0; q < out.size(); ++q) out[q] = p * (*div)[q];
      };
    }
    if (any_nonzero({fo->f})) {
      fs.f = [fo](const StepContext& ctx, std::span<double> out) {
        const double p = profile_at(fo->f_profile, ctx.t);
        for (std::size_t q = 0; q < out.size(); ++q) out[q] = p * fo->f[q];
      };
    }
  } else if (any_nonzero({fo->f})) {
    // F* with |F*|_{V*} = |f|_{L2}
    fs.f_star = [fo](const StepContext& ctx, std::span<double> out) {
      const double p = profile_at(fo->f_profile, ctx.t);
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = p * fo->f[q];
    };
  }
  if (any_nonzero({fo->g})) {
    fs.g = [fo](const StepContext& ctx, std::span<double> out) {
      const double p = profile_at(fo->g_profile, ctx.t);
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = p * fo->g[q];
    };
  }
  if (any_nonzero(fo->h)) {
    fs.h = [fo](const StepContext& ctx, int k, std::span<double> out) {
      const double p = profile_at(fo->h_profile, ctx.t);
      const auto& hk = fo->h[static_cast<std::size_t>(k)];
      for (std::size_t q = 0; q < out.size(); ++q) out[q] = p * hk[q];
    };
  }
  return fs;
}

Assembly assemble(const TriplePtr& triple, const SPDEProblem& problem, const AssemblyOptions& opt, int order) {
  if (!triple) fail(ErrorKind::Config, "assembly: null triple");
  if (triple->order() != order) {
    fail(ErrorKind::Config, order == 1 ? "assemble_L2 needs an order-1 triple" : "assemble_W12 needs an order-2 triple");
  }
  if (!(opt.delta > 0.0 && opt.delta <= 1.0)) fail(ErrorKind::Config, "assembly: delta must lie in (0, 1]");
  problem.coeffs.validate(*triple);
  problem.forcing.validate(*triple, problem.coeffs.channels);
  triple->check_shape(problem.u0);
  if (order == 2) {
    if (any_nonzero_slices(problem.coeffs.beta.singular) || any_nonzero_slices(problem.coeffs.beta.bounded) ||
        any_nonzero(problem.forcing.frf)) {
      fail(ErrorKind::Config, "assemble_W12: beta and frf must vanish");
    }
    if (!problem.coeffs.Da || !problem.coeffs.Dsigma || !problem.coeffs.Dnu) {
      fail(ErrorKind::Config, "assemble_W12: derivative admissibles Da, Dsigma, Dnu are required");
    }
  }

  Assembly as;
  const auto [min_eig, max_a] = ellipticity(*triple, problem.coeffs);
  as.ellipticity = min_eig;
  std::vector<std::string> flags;
  if (min_eig < opt.delta * (1.0 - 1e-9) || max_a > (1.0 + 1e-9) / opt.delta) {
    std::ostringstream os;
    os << "ellipticity: min eig(2a - sigma sigma^T) = " << min_eig << ", |a| = " << max_a << " for delta = " << opt.delta;
    if (opt.enforce_gate) fail(ErrorKind::Gate, os.str());
  }
  as.gate = smallness_gate(problem.coeffs, order, opt.theta);
  if (!as.gate.passed && opt.enforce_gate) fail(ErrorKind::Gate, as.gate.describe());

  auto od = make_opdata(triple, problem, order);
  const double rho0 = problem.coeffs.rho0;
  as.required_margin = order == 1 ? opt.delta / 4.0 : opt.delta / 2.0;

  std::vector<double> ladder;
  if (opt.n0 >= 0.0) {
    ladder = {opt.n0};
  } else {
    ladder = {0.0, 0.5};
    for (double x = 1.0; x <= 1024.0; x *= 2.0) ladder.push_back(x);
  }
  bool found = false;
  double best_n0 = ladder.front();
  CoercivityResult best;
  best.delta_est = -std::numeric_limits<double>::infinity();
  for (double n0 : ladder) {
    set_symbol(*od, n0 / (rho0 * rho0) + opt.delta);
    const auto ops = build_ops(od, opt.delta);
    const auto cr = check_coercivity(ops, *triple, opt.coercivity_samples, opt.check_times);
    if (cr.delta_est > best.delta_est) {
      best = cr;
      best_n0 = n0;
    }
    if (cr.delta_est >= as.required_margin) {
      best = cr;
      best_n0 = n0;
      found = true;
      break;
    }
  }
  if (!found && opt.enforce_gate) {
    std::ostringstream os;
    os << "coercivity margin " << as.required_margin << " not reached (best " << best.delta_est << " at N0 = " << best_n0
       << ", worst sample " << best.worst_sample << ")";
    fail(ErrorKind::Gate, os.str());
  }
  as.n0 = best_n0;
  as.c0 = best_n0 / (rho0 * rho0) + opt.delta;
  set_symbol(*od, as.c0);
  as.coercivity = best;
  std::shared_ptr<const OpData> cod = od;
  as.problem.triple = triple;
  as.problem.ops = build_ops(cod, opt.delta);
  as.problem.ops.K_bound = best.k_est;
  as.problem.ops.K0_bound = best.k0_est;
  as.problem.lower = build_lower(cod);
  as.problem.forcing = build_forcing(triple, problem, order);
  as.problem.u0 = problem.u0;
  return as;
}

}  // namespace

Assembly assemble_L2(const TriplePtr& triple, const SPDEProblem& problem, const AssemblyOptions& options) {
  return assemble(triple, problem, options, 1);
}

Assembly assemble_W12(const TriplePtr& triple, const SPDEProblem& problem, const AssemblyOptions& options) {
  return assemble(triple, problem, options, 2);
}

namespace {

AdmissibleField derive_one(const SpectralTriple& tri, const AdmissibleField& f, const BallSampler& sampler) {
  const int d = tri.dim();
  AdmissibleField out;
  out.components = f.components * d;
  out.times = f.times;
  out.params = f.params;
  out.params.alpha = 1.0;
  for (std::size_t s = 0; s < f.slices(); ++s) {
    std::vector<Field> sing, bnd;
    for (int l = 0; l < d; ++l) {
      for (int c = 0; c < f.components; ++c) {
        const auto& fm = f.singular[s][static_cast<std::size_t>(c)];
        const auto& fb = f.bounded[s][static_cast<std::size_t>(c)];
        sing.push_back(any_nonzero({fm}) ? tri.gradient(fm, l) : Field(tri.size(), 0.0));
        bnd.push_back(any_nonzero({fb}) ? tri.gradient(fb, l) : Field(tri.size(), 0.0));
      }
    }
    out.bar.push_back(sup_abs(bnd));
    out.singular.push_back(std::move(sing));
    out.bounded.push_back(std::move(bnd));
  }
  out.hat = any_nonzero_slices(out.singular) ? certify_hat(tri, out, sampler) : 0.0;
  return out;
}

AdmissibleField derive_plain(const SpectralTriple& tri, const std::vector<Field>& fields, const MorreyParams& params) {
  const int d = tri.dim();
  AdmissibleField out;
  out.components = static_cast<int>(fields.size()) * d;
  out.params = params;
  std::vector<Field> bnd, sing;
  for (int l = 0; l < d; ++l) {
    for (const auto& f : fields) {
      bnd.push_back(is_constant(f) ? Field(tri.size(), 0.0) : tri.gradient(f, l));
      sing.emplace_back(tri.size(), 0.0);
    }
  }
  out.bar = {sup_abs(bnd)};
  out.singular.push_back(std::move(sing));
  out.bounded.push_back(std::move(bnd));
  return out;
}

}  // namespace

void derive_derivatives(const SpectralTriple& triple, SPDECoefficients& co, const BallSampler& sampler) {
  MorreyParams p = co.b.params;
  p.alpha = 1.0;
  co.Da = derive_plain(triple, co.a, p);
  co.Dsigma = derive_plain(triple, co.sigma, p);
  co.Dnu = derive_one(triple, co.nu, sampler);
  co.Dc = derive_one(triple, co.c, sampler);
}

Field mollifier_kernel(const SpectralTriple& tri, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) fail(ErrorKind::Domain, "mollifier: epsilon must lie in (0, 1)");
  if (tri.spacing() > 0.5 * eps * (1.0 + 1e-12)) {
    fail(ErrorKind::Domain, "mollifier: grid spacing must be at most epsilon / 2");
  }
  const int d = tri.dim();
  const int m = tri.grid();
  const double h = tri.spacing();
  const double box = tri.box();
  const int images = static_cast<int>(std::ceil(eps / box)) + 1;
  Field k(tri.size(), 0.0);
  for (std::size_t node = 0; node < tri.size(); ++node) {
    const auto idx = tri.index(node);
    // offset represented by index j: j*h wrapped to [-L/2, L/2)
    std::array<double, 3> off{0.0, 0.0, 0.0};
    for (int a = 0; a < d; ++a) {
      int j = idx[static_cast<std::size_t>(a)];
      if (j >= m / 2) j -= m;
      off[static_cast<std::size_t>(a)] = j * h;
    }
    double acc = 0.0;
    const int r1 = d > 1 ? images : 0, r2 = d > 2 ? images : 0;
    for (int i = -images; i <= images; ++i) {
      for (int j = -r1; j <= r1; ++j) {
        for (int l = -r2; l <= r2; ++l) {
          const double x = off[0] + i * box, y = off[1] + j * box, z = off[2] + l * box;
          const double q = (x * x + y * y + z * z) / (eps * eps);
          if (q < 1.0) acc += std::exp(-1.0 / (1.0 - q));
        }
      }
    }
    k[node] = acc;
  }
  double mass = 0.0;
  for (double x : k) mass += x;
  for (auto& x : k) x /= mass;
  return k;
}

Field convolve(const SpectralTriple& tri, const Field& kernel, const Field& f) {
  const auto kh = tri.forward(kernel);
  auto fh = tri.forward(f);
  const double s = std::pow(tri.box(), 0.5 * tri.dim()) / static_cast<double>(tri.size());
  for (std::size_t q = 0; q < fh.size(); ++q) fh[q] *= kh[q] / s;
  return tri.inverse(fh);
}

namespace {

Field conv_or_keep(const SpectralTriple& tri, const Field& k, const Field& f) {
  if (is_constant(f)) return f;
  return convolve(tri, k, f);
}

AdmissibleField mollify_admissible(const SpectralTriple& tri, const Field& k, const AdmissibleField& f, double eps,
                                   const BallSampler* sampler) {
  AdmissibleField out = f;
  for (std::size_t s = 0; s < f.slices(); ++s) {
    const bool keep_bounded = f.bar[s] <= 1.0 / eps;
    for (std::size_t c = 0; c < static_cast<std::size_t>(f.components); ++c) {
      out.singular[s][c] = any_nonzero({f.singular[s][c]}) ? convolve(tri, k, f.singular[s][c]) : f.singular[s][c];
      if (keep_bounded) {
        out.bounded[s][c] = conv_or_keep(tri, k, f.bounded[s][c]);
      } else {
        std::fill(out.bounded[s][c].begin(), out.bounded[s][c].end(), 0.0);
      }
    }
    out.bar[s] = std::min(f.bar[s], sup_abs(out.bounded[s]));
  }
  if (sampler != nullptr && any_nonzero_slices(out.singular)) out.hat = certify_hat(tri, out, *sampler);
  return out;
}

std::function<double(double)> cutoff_profile(const std::function<double(double)>& base, double norm, double eps) {
  return [base, norm, eps](double t) {
    const double p = base ? base(t) : 1.0;
    return std::abs(p) * norm <= 1.0 / eps ? p : 0.0;
  };
}

double lp_norm_vec(const SpectralTriple& tri, const std::vector<Field>& comps, double p) {
  if (comps.empty()) return 0.0;
  return lp_norm(tri, magnitude(comps), p);
}

}  // namespace

SPDEProblem mollify_problem(const SpectralTriple& tri, const SPDEProblem& problem, double eps,
                            const MollifyOptions& options, MollifyReport* report) {
  const Field k = mollifier_kernel(tri, eps);
  SPDEProblem out = problem;
  auto& co = out.coeffs;
  for (auto& f : co.a) f = conv_or_keep(tri, k, f);
  for (auto& f : co.sigma) f = conv_or_keep(tri, k, f);
  const BallSampler* smp = options.sampler;
  std::vector<std::pair<std::string, std::pair<double, double>>> hats;
  auto channel = [&](const char* name, AdmissibleField& f) {
    const double before = f.hat;
    f = mollify_admissible(tri, k, f, eps, smp);
    hats.push_back({name, {before, f.hat}});
  };
  channel("beta", co.beta);
  channel("b", co.b);
  channel("c", co.c);
  channel("nu", co.nu);
  if (co.Da) channel("Da", *co.Da);
  if (co.Dsigma) channel("Dsigma", *co.Dsigma);
  if (co.Dnu) channel("Dnu", *co.Dnu);
  if (co.Dc) channel("Dc", *co.Dc);

  auto& fo = out.forcing;
  const double p = options.p;
  const auto& src = problem.forcing;
  if (!src.frf.empty()) {
    for (auto& c : fo.frf) c = conv_or_keep(tri, k, c);
    fo.frf_profile = cutoff_profile(src.frf_profile, lp_norm_vec(tri, src.frf, p), eps);
  }
  if (!src.f.empty()) {
    fo.f = conv_or_keep(tri, k, src.f);
    fo.f_profile = cutoff_profile(src.f_profile, lp_norm(tri, src.f, p), eps);
  }
  if (!src.g.empty()) {
    fo.g = conv_or_keep(tri, k, src.g);
    fo.g_profile = cutoff_profile(src.g_profile, lp_norm(tri, src.g, p), eps);
  }
  if (!src.h.empty()) {
    for (auto& c : fo.h) c = conv_or_keep(tri, k, c);
    fo.h_profile = cutoff_profile(src.h_profile, lp_norm_vec(tri, src.h, p), eps);
  }
  out.u0 = conv_or_keep(tri, k, problem.u0);
  if (report != nullptr) {
    report->hats = hats;
    report->hats_monotone = true;
    for (const auto& [name, ba] : hats) {
      if (ba.second > ba.first * (1.0 + 1e-12) + 1e-300) report->hats_monotone = false;
    }
  }
  return out;
}

namespace {

struct ForcingAt {
  std::vector<Field> frf;
  Field f, g;
  std::vector<Field> h;
};

ForcingAt forcing_at(const SPDEForcing& fo, double t) {
  ForcingAt r;
  auto scaled = [](const Field& x, double p) {
    Field y = x;
    for (auto& v : y) v *= p;
    return y;
  };
  for (const auto& c : fo.frf) r.frf.push_back(scaled(c, profile_at(fo.frf_profile, t)));
  if (!fo.f.empty()) r.f = scaled(fo.f, profile_at(fo.f_profile, t));
  if (!fo.g.empty()) r.g = scaled(fo.g, profile_at(fo.g_profile, t));
  for (const auto& c : fo.h) r.h.push_back(scaled(c, profile_at(fo.h_profile, t)));
  return r;
}

std::vector<Field> total_at(const AdmissibleField& f, double t) { return f.total(f.slice_at(t)); }

}  // namespace

double weak_residual(const Trajectory& traj, const SPDEProblem& problem, const std::vector<Field>& tests) {
  const SpectralTriple& tri = *traj.triple;
  const auto& co = problem.coeffs;
  co.validate(tri);
  const int d = tri.dim();
  const int kc = traj.channels;
  if (kc != co.channels) fail(ErrorKind::Config, "weak_residual: channel count mismatch");
  if (traj.states.size() != traj.times.size()) fail(ErrorKind::Config, "weak_residual: trajectory states not retained");
  const std::size_t n = tri.size();
  const double dt = traj.dt;

  std::vector<std::vector<Field>> dphi;
  std::vector<double> scale;
  for (const auto& phi : tests) {
    tri.check_shape(phi);
    std::vector<Field> g;
    for (int a = 0; a < d; ++a) g.push_back(tri.gradient(phi, a));
    dphi.push_back(std::move(g));
    const auto ph = tri.forward(phi);
    double w = 0.0;
    const auto xi2 = tri.xi_squared();
    for (std::size_t s = 0; s < n; ++s) w += (1.0 + xi2[s]) * std::norm(ph[s]);
    scale.push_back(1.0 + std::sqrt(w));
  }
  std::vector<double> accum(tests.size(), 0.0);
  double worst = 0.0;
  const int steps = static_cast<int>(traj.states.size()) - 1;
  for (int step = 0; step < steps; ++step) {
    const auto& u = traj.states[static_cast<std::size_t>(step)];
    const double t = traj.times[static_cast<std::size_t>(step)];
    const auto w = traj.wiener_at(step);
    const StepContext ctx{t, step, traj.path, w};
    const auto uh = tri.forward(u);
    std::vector<Field> du;
    for (int a = 0; a < d; ++a) du.push_back(tri.inverse(tri.derivative(uh, a)));
    const auto beta = total_at(co.beta, t);
    auto bvec = total_at(co.b, t);
    if (co.dynamic_drift) {
      std::vector<Field> dyn(static_cast<std::size_t>(d), Field(n, 0.0));
      co.dynamic_drift(ctx, dyn);
      for (int a = 0; a < d; ++a) {
        for (std::size_t q = 0; q < n; ++q) bvec[static_cast<std::size_t>(a)][q] += dyn[static_cast<std::size_t>(a)][q];
      }
    }
    const auto c = total_at(co.c, t);
    const auto nu = total_at(co.nu, t);
    const auto fo = forcing_at(problem.forcing, t);

    // flux_i = a^{ij} D_j u + β^i u + 𝔣^i ;  src = b^i D_i u + c u + f + g
    std::vector<Field> flux(static_cast<std::size_t>(d), Field(n, 0.0));
    Field src(n, 0.0);
    for (int i = 0; i < d; ++i) {
      auto& fl = flux[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        const auto& aij = co.a[static_cast<std::size_t>(i * d + j)];
        for (std::size_t q = 0; q < n; ++q) fl[q] += aij[q] * du[static_cast<std::size_t>(j)][q];
      }
      for (std::size_t q = 0; q < n; ++q) {
        fl[q] += beta[static_cast<std::size_t>(i)][q] * u[q];
        if (!fo.frf.empty()) fl[q] += fo.frf[static_cast<std::size_t>(i)][q];
        src[q] += bvec[static_cast<std::size_t>(i)][q] * du[static_cast<std::size_t>(i)][q];
      }
    }
    for (std::size_t q = 0; q < n; ++q) {
      src[q] += c[0][q] * u[q];
      if (!fo.f.empty()) src[q] += fo.f[q];
      if (!fo.g.empty()) src[q] += fo.g[q];
    }
    std::vector<Field> noise(static_cast<std::size_t>(kc), Field(n, 0.0));
    for (int k = 0; k < kc; ++k) {
      auto& nk = noise[static_cast<std::size_t>(k)];
      for (int i = 0; i < d; ++i) {
        const auto& s = co.sigma[static_cast<std::size_t>(i * kc + k)];
        for (std::size_t q = 0; q < n; ++q) nk[q] += s[q] * du[static_cast<std::size_t>(i)][q];
      }
      for (std::size_t q = 0; q < n; ++q) {
        nk[q] += nu[static_cast<std::size_t>(k)][q] * u[q];
        if (!fo.h.empty()) nk[q] += fo.h[static_cast<std::size_t>(k)][q];
      }
    }
    const auto& un1 = traj.states[static_cast<std::size_t>(step) + 1];
    for (std::size_t j = 0; j < tests.size(); ++j) {
      double drift = tri.inner_l2(src, tests[j]);
      for (int i = 0; i < d; ++i) drift -= tri.inner_l2(flux[static_cast<std::size_t>(i)], dphi[j][static_cast<std::size_t>(i)]);
      double mart = 0.0;
      for (int k = 0; k < kc; ++k) mart += tri.inner_l2(noise[static_cast<std::size_t>(k)], tests[j]) * traj.dw[static_cast<std::size_t>(step * kc + k)];
      accum[j] += drift * dt + mart;
      const double defect = tri.inner_l2(un1, tests[j]) - tri.inner_l2(traj.states.front(), tests[j]) - accum[j];
      worst = std::max(worst, std::abs(defect) / scale[j]);
    }
  }
  return worst;
}

std::vector<Field> default_test_set(const SpectralTriple& tri, int bumps, std::uint64_t seed) {
  std::vector<Field> out;
  const int d = tri.dim();
  const double two_pi_l = 2.0 * std::numbers::pi / tri.box();
  for (int a = 0; a < d; ++a) {
    for (int k = 1; k <= 2; ++k) {
      Field c(tri.size()), s(tri.size());
      for (std::size_t node = 0; node < tri.size(); ++node) {
        c[node] = std::cos(two_pi_l * k * tri.coord(node, a));
        s[node] = std::sin(two_pi_l * k * tri.coord(node, a));
      }
      out.push_back(std::move(c));
      out.push_back(std::move(s));
    }
  }
  auto b = bump_battery(tri, bumps, 0.05 * tri.box(), 0.15 * tri.box(), 0.2 * tri.box(), seed);
  for (auto& f : b) out.push_back(std::move(f));
  return out;
}

Field gaussian_field(const SpectralTriple& tri, double t, const std::vector<double>& w) {
  Field u(tri.size());
  const double box = tri.box();
  for (std::size_t node = 0; node < tri.size(); ++node) {
    double q = 0.0;
    for (int a = 0; a < tri.dim(); ++a) {
      double z = tri.coord(node, a) + (a < static_cast<int>(w.size()) ? w[static_cast<std::size_t>(a)] : 0.0);
      z -= box * std::round(z / box);
      q += z * z;
    }
    u[node] = std::exp(-q / (2.0 * t));
  }
  return u;
}

namespace {
double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

double mass_outside(int d, double box, double t, const std::vector<double>& w) {
  // fraction of ∫u^2 = ∫exp(-|z|^2/t) lying outside the box
  double inside = 1.0;
  for (int a = 0; a < d; ++a) {
    const double wa = w[static_cast<std::size_t>(a)];
    const double s = std::sqrt(t);
    const double out = 0.5 * (std::erfc((0.5 * box + wa) / s) + std::erfc((0.5 * box - wa) / s));
    inside *= 1.0 - out;
  }
  return 1.0 - inside;
}
}  // namespace

GaussianBenchmark gaussian_benchmark(int dim, double box, int grid, const std::vector<double>& times,
                                     std::uint64_t seed, double drift_amplitude) {
  if (times.size() < 2) fail(ErrorKind::Config, "gaussian_benchmark: at least two times are needed");
  auto tri = SpectralTriple::create(TripleSpec{dim, grid, box, 1});
  GaussianBenchmark gb;
  gb.dim = dim;
  gb.drift_amplitude = drift_amplitude < 0.0 ? 0.5 * dim : drift_amplitude;
  gb.times = times;
  const double cd = std::pow(std::numbers::pi, 0.5 * dim);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double t = times[i];
    if (!(t > 0.0)) fail(ErrorKind::Domain, "gaussian_benchmark: times must be positive");
    std::vector<double> w(static_cast<std::size_t>(dim));
    for (int a = 0; a < dim; ++a) w[static_cast<std::size_t>(a)] = std::sqrt(t) * counter_normal(seed, i, static_cast<std::uint32_t>(a), 0x6A55);
    const double leak = mass_outside(dim, box, t, w);
    gb.mass_outside = std::max(gb.mass_outside, leak);
    if (leak >= 1e-8) {
      std::ostringstream os;
      os << "gaussian_benchmark: mass outside the box is " << leak << " at t=" << t << " (needs < 1e-8)";
      fail(ErrorKind::Domain, os.str());
    }
    const Field u = gaussian_field(*tri, t, w);
    gb.l2_sq.push_back(tri->inner_l2(u, u));
    gb.l2_expected.push_back(std::pow(std::numbers::pi * t, 0.5 * dim));
    gb.l2_rel_error.push_back(std::abs(gb.l2_sq.back() / gb.l2_expected.back() - 1.0));
    const auto uh = tri->forward(u);
    double g2 = 0.0;
    for (std::size_t s = 0; s < uh.size(); ++s) g2 += tri->xi_squared()[s] * std::norm(uh[s]);
    gb.grad_sq.push_back(g2);
    gb.grad_expected.push_back(cd * 0.5 * dim * std::pow(t, 0.5 * dim - 1.0));
  }
  gb.l2_power_fit = fit_slope(gb.times, gb.l2_sq);
  gb.grad_power_fit = fit_slope(gb.times, gb.grad_sq);

  // Sharpness: u_0 = 0, no forcing, so the right side of the L2 estimate is 0.
  const double tmax = *std::max_element(times.begin(), times.end());
  const int steps = 200;
  const double dt = tmax / steps;
  const double alpha = 1.0 + 1.0;  // λ(ρ0^{-2} + δ) with λ = ρ0 = δ = 1 and all bars zero
  std::vector<double> w(static_cast<std::size_t>(dim), 0.0);
  double sup = 0.0, vint = 0.0, aint = 0.0;
  for (int n = 1; n <= steps; ++n) {
    for (int a = 0; a < dim; ++a) {
      w[static_cast<std::size_t>(a)] += std::sqrt(dt) * counter_normal(seed, static_cast<std::uint64_t>(n), static_cast<std::uint32_t>(a), 0x5A4F);
    }
    const double t = n * dt;
    const Field u = gaussian_field(*tri, t, w);
    const double e2 = std::exp(-2.0 * alpha * t);
    const double l2 = tri->inner_l2(u, u);
    sup = std::max(sup, l2 * e2);
    vint += tri->norm_v(u) * tri->norm_v(u) * e2 * dt;
    aint += alpha * l2 * e2 * dt;
  }
  gb.sharp_lhs = sup + vint + aint;
  gb.sharp_rhs = 0.0;
  return gb;
}

SPDEProblem gaussian_problem(const SpectralTriple& tri, double amp, double t0) {
  const int d = tri.dim();
  SPDEProblem p;
  p.coeffs = heat_coefficients(tri, d, 1.0, 1.0);
  for (int i = 0; i < d; ++i) {
    auto& s = p.coeffs.sigma[static_cast<std::size_t>(i * d + i)];
    std::fill(s.begin(), s.end(), 1.0);
  }
  auto coords = std::make_shared<std::vector<Field>>();
  for (int a = 0; a < d; ++a) {
    Field x(tri.size());
    for (std::size_t node = 0; node < tri.size(); ++node) x[node] = tri.coord(node, a);
    coords->push_back(std::move(x));
  }
  const double box = tri.box();
  p.coeffs.dynamic_drift = [coords, amp, d, box](const StepContext& ctx, std::vector<Field>& out) {
    const std::size_t n = coords->front().size();
    for (std::size_t q = 0; q < n; ++q) {
      double z[3] = {0.0, 0.0, 0.0};
      double r2 = 0.0;
      for (int a = 0; a < d; ++a) {
        double za = (*coords)[static_cast<std::size_t>(a)][q] + (a < static_cast<int>(ctx.w.size()) ? ctx.w[static_cast<std::size_t>(a)] : 0.0);
        za -= box * std::round(za / box);
        z[a] = za;
        r2 += za * za;
      }
      for (int a = 0; a < d; ++a) out[static_cast<std::size_t>(a)][q] = r2 > 0.0 ? -amp * z[a] / r2 : 0.0;
    }
  };
  p.u0 = gaussian_field(tri, t0, std::vector<double>(static_cast<std::size_t>(d), 0.0));
  return p;
}

Trajectory gaussian_trajectory(const TriplePtr& triple, const NoiseModel& noise, std::uint64_t path, double t0) {
  if (noise.channels != triple->dim()) fail(ErrorKind::Config, "gaussian_trajectory: noise needs d channels");
  Trajectory tr;
  tr.triple = triple;
  tr.dt = noise.dt;
  tr.channels = noise.channels;
  tr.path = path;
  tr.dw = noise.increments(path);
  std::vector<double> w(static_cast<std::size_t>(noise.channels), 0.0);
  for (int n = 0; n <= noise.steps; ++n) {
    if (n > 0) {
      for (int k = 0; k < noise.channels; ++k) w[static_cast<std::size_t>(k)] += tr.dw[static_cast<std::size_t>((n - 1) * noise.channels + k)];
    }
    Field u = gaussian_field(*triple, t0 + n * noise.dt, w);
    tr.times.push_back(n * noise.dt);
    tr.h_norm.push_back(triple->norm_h(u));
    tr.v_norm.push_back(triple->norm_v(u));
    tr.states.push_back(std::move(u));
  }
  return tr;
}

SpdeBars bars_at(const SPDECoefficients& co, double t) {
  SpdeBars b;
  b.b = co.b.bar_at(t);
  b.beta = co.beta.bar_at(t);
  b.c = co.c.bar_at(t);
  b.nu = co.nu.bar_at(t);
  b.Da = co.Da ? co.Da->bar_at(t) : 0.0;
  b.Dsigma = co.Dsigma ? co.Dsigma->bar_at(t) : 0.0;
  b.Dnu = co.Dnu ? co.Dnu->bar_at(t) : 0.0;
  return b;
}

namespace {
template <typename F>
std::vector<double> per_step(const NoiseModel& noise, F&& f) {
  std::vector<double> out(static_cast<std::size_t>(noise.steps));
  for (int n = 0; n < noise.steps; ++n) out[static_cast<std::size_t>(n)] = f(n * noise.dt);
  return out;
}
}  // namespace

std::vector<double> l2_alpha(const SPDECoefficients& co, const NoiseModel& noise, const ReportWeights& w) {
  const double r2 = 1.0 / (co.rho0 * co.rho0);
  return per_step(noise, [&](double t) {
    const auto b = bars_at(co, t);
    return w.lambda * (b.b * b.b + b.beta * b.beta + b.nu * b.nu + b.c + r2 + w.delta) + w.mu;
  });
}

std::vector<double> lp_alpha(const SPDECoefficients& co, const NoiseModel& noise, const ReportWeights& w) {
  const double r2 = 1.0 / (co.rho0 * co.rho0);
  return per_step(noise, [&](double t) {
    const auto b = bars_at(co, t);
    return w.lambda * (b.b * b.b + b.beta * b.beta + b.nu * b.nu + b.c + r2 + 1.0) + w.mu;
  });
}

std::vector<double> w12_alpha(const SPDECoefficients& co, const NoiseModel& noise, const ReportWeights& w) {
  const double r2 = 1.0 / (co.rho0 * co.rho0);
  return per_step(noise, [&](double t) {
    const auto b = bars_at(co, t);
    return w.lambda * (b.b * b.b + b.c * b.c + b.nu * b.nu + b.Da * b.Da + b.Dsigma * b.Dsigma + b.Dnu * b.Dnu + r2 +
                       w.delta) +
           w.mu;
  });
}

std::vector<double> w1p_lambda(const SPDECoefficients& co, const NoiseModel& noise, const ReportWeights& w) {
  return per_step(noise, [&](double t) {
    const auto b = bars_at(co, t);
    return w.lambda * (1.0 + b.Da * b.Da + b.Dsigma * b.Dsigma + b.b * b.b + b.c * b.c + b.nu * b.nu + b.Dnu * b.Dnu) +
           w.mu;
  });
}

double lp_norm(const SpectralTriple& tri, const Field& u, double p) {
  tri.check_shape(u);
  double acc = 0.0;
  for (double x : u) acc += std::pow(std::abs(x), p);
  return std::pow(acc * tri.cell_volume(), 1.0 / p);
}

namespace {

double l2sq(const SpectralTriple& tri, const Field& u) { return u.empty() ? 0.0 : tri.inner_l2(u, u); }
double l2sq_vec(const SpectralTriple& tri, const std::vector<Field>& c) {
  double s = 0.0;
  for (const auto& x : c) s += l2sq(tri, x);
  return s;
}

// Σ_s w(ξ)|û|^2 with w = (1+|ξ|^2)^m
double sobolev_sq(const SpectralTriple& tri, const Field& u, int m) {
  if (u.empty()) return 0.0;
  const auto uh = tri.forward(u);
  const auto xi2 = tri.xi_squared();
  double acc = 0.0;
  for (std::size_t s = 0; s < uh.size(); ++s) acc += std::pow(1.0 + xi2[s], m) * std::norm(uh[s]);
  return acc;
}

std::vector<Field> gradient_all(const SpectralTriple& tri, const Field& u) {
  std::vector<Field> g;
  const auto uh = tri.forward(u);
  for (int a = 0; a < tri.dim(); ++a) g.push_back(tri.inverse(tri.derivative(uh, a)));
  return g;
}

// (|u|_{Lp}^p + |Du|_{Lp}^p) for a vector-valued field
double w1p_pow(const SpectralTriple& tri, const std::vector<Field>& comps, double p) {
  if (comps.empty()) return 0.0;
  const double u = lp_norm(tri, magnitude(comps), p);
  std::vector<Field> all;
  for (const auto& c : comps) {
    auto g = gradient_all(tri, c);
    for (auto& x : g) all.push_back(std::move(x));
  }
  const double du = lp_norm(tri, magnitude(all), p);
  return std::pow(u, p) + std::pow(du, p);
}

void check_weights(const Trajectory& traj, const WeightProcess& w) {
  if (static_cast<int>(w.alpha.size()) < traj.steps() || static_cast<int>(w.phi.size()) < traj.steps() + 1) {
    fail(ErrorKind::Config, "estimate report: weight process shorter than the trajectory");
  }
  if (traj.states.size() != traj.times.size()) fail(ErrorKind::Config, "estimate report: trajectory states not retained");
}

}  // namespace

PathTerms l2_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& weights) {
  PathTerms pt;
  pt.lhs.assign(3, 0.0);
  pt.rhs.assign(4, 0.0);
  if (traj.diverged) {
    pt.diverged = true;
    return pt;
  }
  check_weights(traj, weights);
  const SpectralTriple& tri = *traj.triple;
  const double dt = traj.dt;
  const int steps = traj.steps();
  double gint = 0.0;
  for (int n = 0; n <= steps; ++n) {
    const auto& u = traj.states[static_cast<std::size_t>(n)];
    const double phi = weights.phi[static_cast<std::size_t>(n)];
    const double e2 = std::exp(-2.0 * phi);
    const double u2 = l2sq(tri, u);
    pt.lhs[0] = std::max(pt.lhs[0], u2 * e2);
    if (n == steps) break;
    const double t = traj.times[static_cast<std::size_t>(n)];
    pt.lhs[1] += sobolev_sq(tri, u, 1) * e2 * dt;
    pt.lhs[2] += weights.alpha[static_cast<std::size_t>(n)] * u2 * e2 * dt;
    const auto fo = forcing_at(problem.forcing, t);
    pt.rhs[1] += l2sq_vec(tri, fo.h) * e2 * dt;
    gint += std::sqrt(l2sq(tri, fo.g)) * std::exp(-phi) * dt;
    pt.rhs[3] += (l2sq_vec(tri, fo.frf) + l2sq(tri, fo.f)) * e2 * dt;
  }
  pt.rhs[0] = l2sq(tri, traj.states.front());
  pt.rhs[2] = gint * gint;
  return pt;
}

PathTerms w12_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& weights) {
  PathTerms pt;
  pt.lhs.assign(2, 0.0);
  pt.rhs.assign(3, 0.0);
  if (traj.diverged) {
    pt.diverged = true;
    return pt;
  }
  check_weights(traj, weights);
  const SpectralTriple& tri = *traj.triple;
  const double dt = traj.dt;
  const int steps = traj.steps();
  double gint = 0.0;
  for (int n = 0; n <= steps; ++n) {
    const auto& u = traj.states[static_cast<std::size_t>(n)];
    const double phi = weights.phi[static_cast<std::size_t>(n)];
    const double e2 = std::exp(-2.0 * phi);
    pt.lhs[0] = std::max(pt.lhs[0], sobolev_sq(tri, u, 1) * e2);
    if (n == steps) break;
    const double t = traj.times[static_cast<std::size_t>(n)];
    pt.lhs[1] += sobolev_sq(tri, u, 2) * e2 * dt;
    const auto fo = forcing_at(problem.forcing, t);
    double h2 = 0.0;
    for (const auto& c : fo.h) h2 += sobolev_sq(tri, c, 1);
    pt.rhs[1] += (h2 + l2sq(tri, fo.f)) * e2 * dt;
    gint += std::sqrt(sobolev_sq(tri, fo.g, 1)) * std::exp(-phi) * dt;
  }
  pt.rhs[0] = sobolev_sq(tri, traj.states.front(), 1);
  pt.rhs[2] = gint * gint;
  return pt;
}

PathTerms lp_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& weights, double p) {
  if (!(p > 2.0)) fail(ErrorKind::Domain, "lp_report: p must exceed 2");
  PathTerms pt;
  pt.lhs.assign(3, 0.0);
  pt.rhs.assign(4, 0.0);
  if (traj.diverged) {
    pt.diverged = true;
    return pt;
  }
  check_weights(traj, weights);
  const SpectralTriple& tri = *traj.triple;
  const double dt = traj.dt;
  const int steps = traj.steps();
  double hint = 0.0, gint = 0.0, fint = 0.0;
  for (int n = 0; n <= steps; ++n) {
    const auto& u = traj.states[static_cast<std::size_t>(n)];
    const double phi = weights.phi[static_cast<std::size_t>(n)];
    const double ep = std::exp(-p * phi);
    const double up = std::pow(lp_norm(tri, u, p), p);
    pt.lhs[0] = std::max(pt.lhs[0], up * ep);
    if (n == steps) break;
    const double t = traj.times[static_cast<std::size_t>(n)];
    const auto g = gradient_all(tri, u);
    double grad = 0.0;
    for (std::size_t q = 0; q < u.size(); ++q) {
      double dq = 0.0;
      for (const auto& ga : g) dq += ga[q] * ga[q];
      const double au = std::abs(u[q]);
      grad += au > 0.0 ? std::pow(au, p - 2.0) * dq : 0.0;
    }
    grad *= tri.cell_volume();
    pt.lhs[1] += ep * grad * dt;
    pt.lhs[2] += weights.alpha[static_cast<std::size_t>(n)] * ep * (up * ep) * dt;
    const auto fo = forcing_at(problem.forcing, t);
    const double e1 = std::exp(-phi);
    const double hn = fo.h.empty() ? 0.0 : lp_norm(tri, magnitude(fo.h), p) * e1;
    hint += hn * hn * dt;
    gint += (fo.g.empty() ? 0.0 : lp_norm(tri, fo.g, p)) * e1 * dt;
    const double frn = fo.frf.empty() ? 0.0 : lp_norm(tri, magnitude(fo.frf), p) * e1;
    const double fn = fo.f.empty() ? 0.0 : lp_norm(tri, fo.f, p) * e1;
    fint += (frn * frn + fn * fn) * dt;
  }
  pt.rhs[0] = std::pow(lp_norm(tri, traj.states.front(), p), p);
  pt.rhs[1] = std::pow(hint, 0.5 * p);
  pt.rhs[2] = std::pow(gint, p);
  pt.rhs[3] = std::pow(fint, 0.5 * p);
  return pt;
}

PathTerms w1p_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& psi, double p) {
  if (!(p > 2.0)) fail(ErrorKind::Domain, "w1p_report: p must exceed 2");
  if (any_nonzero_slices(problem.coeffs.beta.singular) || any_nonzero_slices(problem.coeffs.beta.bounded) ||
      any_nonzero(problem.forcing.frf)) {
    fail(ErrorKind::Config, "w1p_report: beta and frf must vanish");
  }
  PathTerms pt;
  pt.lhs.assign(3, 0.0);
  pt.rhs.assign(3, 0.0);
  if (traj.diverged) {
    pt.diverged = true;
    return pt;
  }
  check_weights(traj, psi);
  const SpectralTriple& tri = *traj.triple;
  const int d = tri.dim();
  const double dt = traj.dt;
  const int steps = traj.steps();
  double gint = 0.0, fhint = 0.0;
  for (int n = 0; n <= steps; ++n) {
    const auto& u = traj.states[static_cast<std::size_t>(n)];
    const double ps = psi.phi[static_cast<std::size_t>(n)];
    const double ep = std::exp(-p * ps);
    const double w1p = w1p_pow(tri, {u}, p);
    pt.lhs[0] = std::max(pt.lhs[0], w1p * ep);
    if (n == steps) break;
    const double t = traj.times[static_cast<std::size_t>(n)];
    const auto uh = tri.forward(u);
    std::vector<Spectrum> dh;
    std::vector<Field> g;
    for (int a = 0; a < d; ++a) {
      dh.push_back(tri.derivative(uh, a));
      g.push_back(tri.inverse(dh.back()));
    }
    Field hess(u.size(), 0.0);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        const Field dij = tri.inverse(tri.derivative(dh[static_cast<std::size_t>(i)], j));
        for (std::size_t q = 0; q < u.size(); ++q) hess[q] += dij[q] * dij[q];
      }
    }
    double second = 0.0;
    for (std::size_t q = 0; q < u.size(); ++q) {
      double dq = 0.0;
      for (const auto& ga : g) dq += ga[q] * ga[q];
      second += dq > 0.0 ? std::pow(dq, 0.5 * p - 1.0) * hess[q] : 0.0;
    }
    second *= tri.cell_volume();
    pt.lhs[1] += ep * second * dt;
    pt.lhs[2] += ep * psi.alpha[static_cast<std::size_t>(n)] * w1p * dt;
    const auto fo = forcing_at(problem.forcing, t);
    const double e1 = std::exp(-ps);
    if (!fo.g.empty()) gint += std::pow(w1p_pow(tri, {fo.g}, p), 1.0 / p) * e1 * dt;
    const double fn = fo.f.empty() ? 0.0 : lp_norm(tri, fo.f, p) * e1;
    const double hn = fo.h.empty() ? 0.0 : std::pow(w1p_pow(tri, fo.h, p), 1.0 / p) * e1;
    fhint += (fn * fn + hn * hn) * dt;
  }
  pt.rhs[0] = w1p_pow(tri, {traj.states.front()}, p);
  pt.rhs[1] = std::pow(gint, p);
  pt.rhs[2] = std::pow(fhint, 0.5 * p);
  return pt;
}

const std::vector<std::string>& l2_lhs_names() {
  static const std::vector<std::string> v{"sup_l2_weighted", "int_w12_weighted", "int_alpha_l2_weighted"};
  return v;
}
const std::vector<std::string>& l2_rhs_names() {
  static const std::vector<std::string> v{"initial_l2", "int_h_weighted", "g_l1_squared", "int_frf_f_weighted"};
  return v;
}
const std::vector<std::string>& w12_lhs_names() {
  static const std::vector<std::string> v{"sup_w12_weighted", "int_w22_weighted"};
  return v;
}
const std::vector<std::string>& w12_rhs_names() {
  static const std::vector<std::string> v{"initial_w12", "int_h_w12_f_l2_weighted", "g_w12_l1_squared"};
  return v;
}
const std::vector<std::string>& lp_lhs_names() {
  static const std::vector<std::string> v{"sup_lp_weighted", "int_gradient_weighted", "int_alpha_lp_weighted"};
  return v;
}
const std::vector<std::string>& lp_rhs_names() {
  static const std::vector<std::string> v{"initial_lp", "h_term", "g_term", "frf_f_term"};
  return v;
}
const std::vector<std::string>& w1p_lhs_names() {
  static const std::vector<std::string> v{"sup_w1p_weighted", "int_second_gradient_weighted", "int_lambda_w1p_weighted"};
  return v;
}
const std::vector<std::string>& w1p_rhs_names() {
  static const std::vector<std::string> v{"initial_w1p", "g_term", "f_h_term"};
  return v;
}

}  // namespace spdelab
