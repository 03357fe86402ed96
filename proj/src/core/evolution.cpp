#include "core/evolution.hpp"

#include <Eigen/Core>
#include <Eigen/IterativeLinearSolvers>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "core/error.hpp"

namespace spdelab {

namespace {

void apply_a(const OperatorPair& ops, const SpectralTriple& triple, const StepContext& ctx, std::span<const double> v,
             std::span<double> out) {
  if (ops.A) {
    ops.A(ctx, v, out);
    return;
  }
  if (!ops.principal_symbol.empty()) {
    auto vhat = triple.forward(v);
    for (std::size_t s = 0; s < vhat.size(); ++s) vhat[s] *= ops.principal_symbol[s];
    const Field y = triple.inverse(vhat);
    std::copy(y.begin(), y.end(), out.begin());
    return;
  }
  std::fill(out.begin(), out.end(), 0.0);
}

struct ImplicitData {
  const OperatorPair* ops;
  const SpectralTriple* triple;
  const StepContext* ctx;
  double dt;
};

}  // namespace

class ImplicitOperator;

}  // namespace spdelab

namespace Eigen::internal {
template <>
struct traits<spdelab::ImplicitOperator> : public Eigen::internal::traits<Eigen::SparseMatrix<double>> {};
}  // namespace Eigen::internal

namespace spdelab {

// x -> x - dt A_t x, applied matrix-free.
class ImplicitOperator : public Eigen::EigenBase<ImplicitOperator> {
 public:
  using Scalar = double;
  using RealScalar = double;
  using StorageIndex = int;
  enum { ColsAtCompileTime = Eigen::Dynamic, MaxColsAtCompileTime = Eigen::Dynamic, IsRowMajor = false };

  explicit ImplicitOperator(ImplicitData data) : data_(data) {}
  [[nodiscard]] Eigen::Index rows() const { return static_cast<Eigen::Index>(data_.triple->size()); }
  [[nodiscard]] Eigen::Index cols() const { return rows(); }

  template <typename Rhs>
  Eigen::Product<ImplicitOperator, Rhs, Eigen::AliasFreeProduct> operator*(const Eigen::MatrixBase<Rhs>& x) const {
    return Eigen::Product<ImplicitOperator, Rhs, Eigen::AliasFreeProduct>(*this, x.derived());
  }

  void apply(const double* x, double* y) const {
    const std::size_t n = data_.triple->size();
    std::span<const double> in(x, n);
    Field ax(n);
    apply_a(*data_.ops, *data_.triple, *data_.ctx, in, ax);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] - data_.dt * ax[i];
  }
  [[nodiscard]] const ImplicitData& data() const { return data_; }

 private:
  ImplicitData data_;
};

// Inverse of the diagonal part (1 - dt P(ξ)).
class SymbolPreconditioner {
 public:
  using StorageIndex = int;
  enum { ColsAtCompileTime = Eigen::Dynamic, MaxColsAtCompileTime = Eigen::Dynamic };

  SymbolPreconditioner() = default;
  template <typename M>
  SymbolPreconditioner& analyzePattern(const M&) { return *this; }
  template <typename M>
  SymbolPreconditioner& factorize(const M& m) { return compute(m); }
  template <typename M>
  SymbolPreconditioner& compute(const M& m) {
    data_ = &m.data();
    return *this;
  }
  template <typename Rhs>
  Eigen::VectorXd solve(const Rhs& b) const {
    Eigen::VectorXd out(b.size());
    const auto& sym = data_->ops->principal_symbol;
    if (sym.empty()) {
      out = b;
      return out;
    }
    const Eigen::VectorXd bb = b;
    auto bhat = data_->triple->forward(std::span<const double>(bb.data(), static_cast<std::size_t>(bb.size())));
    for (std::size_t s = 0; s < bhat.size(); ++s) bhat[s] /= (1.0 - data_->dt * sym[s]);
    const Field x = data_->triple->inverse(bhat);
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = x[static_cast<std::size_t>(i)];
    return out;
  }
  Eigen::ComputationInfo info() { return Eigen::Success; }

 private:
  const ImplicitData* data_ = nullptr;
};

}  // namespace spdelab

namespace Eigen::internal {
template <typename Rhs>
struct generic_product_impl<spdelab::ImplicitOperator, Rhs, SparseShape, DenseShape, GemvProduct>
    : generic_product_impl_base<spdelab::ImplicitOperator, Rhs,
                                generic_product_impl<spdelab::ImplicitOperator, Rhs>> {
  using Scalar = typename Product<spdelab::ImplicitOperator, Rhs>::Scalar;
  template <typename Dest>
  static void scaleAndAddTo(Dest& dst, const spdelab::ImplicitOperator& lhs, const Rhs& rhs, const Scalar& alpha) {
    const Eigen::VectorXd x = rhs;
    Eigen::VectorXd y(x.size());
    lhs.apply(x.data(), y.data());
    dst.noalias() += alpha * y;
  }
};
}  // namespace Eigen::internal

namespace spdelab {

std::vector<double> Trajectory::wiener_at(int n) const {
  std::vector<double> w(static_cast<std::size_t>(channels), 0.0);
  for (int m = 0; m < n; ++m) {
    for (int k = 0; k < channels; ++k) w[static_cast<std::size_t>(k)] += dw[static_cast<std::size_t>(m * channels + k)];
  }
  return w;
}

namespace {

Field channel_total(const EvolutionProblem& p, const StepContext& ctx, int k, std::span<const double> u) {
  const std::size_t n = u.size();
  Field g(n, 0.0), tmp(n);
  if (p.ops.B) {
    p.ops.B(ctx, k, u, tmp);
    for (std::size_t i = 0; i < n; ++i) g[i] += tmp[i];
  }
  if (p.lower.b_ell2) {
    p.lower.b_ell2(ctx, k, u, tmp);
    for (std::size_t i = 0; i < n; ++i) g[i] += tmp[i];
  }
  if (p.forcing.h) {
    p.forcing.h(ctx, k, tmp);
    for (std::size_t i = 0; i < n; ++i) g[i] += tmp[i];
  }
  return g;
}

// 𝔞*u + 𝔞u + 𝔠u + f* + f + g at the context time.
Field explicit_drift(const EvolutionProblem& p, const StepContext& ctx, std::span<const double> u) {
  const std::size_t n = u.size();
  Field e(n, 0.0), tmp(n);
  auto add = [&](const Action& op) {
    if (!op) return;
    op(ctx, u, tmp);
    for (std::size_t i = 0; i < n; ++i) e[i] += tmp[i];
  };
  auto add_source = [&](const Source& src) {
    if (!src) return;
    src(ctx, tmp);
    for (std::size_t i = 0; i < n; ++i) e[i] += tmp[i];
  };
  add(p.lower.a_star);
  add(p.lower.a_vh);
  add(p.lower.c_hh);
  add_source(p.forcing.f_star);
  add_source(p.forcing.f);
  add_source(p.forcing.g);
  return e;
}

bool all_finite(std::span<const double> u) {
  return std::all_of(u.begin(), u.end(), [](double x) { return std::isfinite(x); });
}

std::vector<double> cumulative_w(const std::vector<double>& dw, int channels, int n) {
  std::vector<double> w(static_cast<std::size_t>(channels), 0.0);
  for (int m = 0; m < n; ++m) {
    for (int k = 0; k < channels; ++k) w[static_cast<std::size_t>(k)] += dw[static_cast<std::size_t>(m * channels + k)];
  }
  return w;
}

std::vector<Field> coercivity_samples(const SpectralTriple& triple, int samples, std::uint64_t seed,
                                      std::vector<std::string>& labels) {
  const int d = triple.dim();
  const int m = triple.grid();
  std::vector<std::array<int, 3>> modes;
  auto add_mode = [&](std::array<int, 3> k) {
    // one representative of ±k
    for (int a = 0; a < d; ++a) {
      const int ka = k[static_cast<std::size_t>(a)];
      if (ka < 0) return;
      if (ka > 0) break;
    }
    if (std::find(modes.begin(), modes.end(), k) == modes.end()) modes.push_back(k);
  };
  const bool full = triple.size() <= 1024;
  const int reach = full ? m / 2 : (triple.size() > 8192 ? 2 : 3);
  const int lo1 = d > 1 ? -reach : 0, lo2 = d > 2 ? -reach : 0;
  for (int i = -reach; i <= reach; ++i) {
    for (int j = lo1; j <= -lo1; ++j) {
      for (int k = lo2; k <= -lo2; ++k) {
        if (std::abs(i) > m / 2 || std::abs(j) > m / 2 || std::abs(k) > m / 2) continue;
        add_mode({i, j, k});
      }
    }
  }
  if (!full) {
    for (int s = 4; s <= m / 2; s *= 2) {
      add_mode({s, 0, 0});
      if (d > 1) add_mode({s, s, 0});
      if (d > 2) add_mode({s, s, s});
    }
    add_mode({m / 2, d > 1 ? m / 2 : 0, d > 2 ? m / 2 : 0});
  }
  std::vector<Field> out;
  const double two_pi_l = 2.0 * std::numbers::pi / triple.box();
  for (const auto& k : modes) {
    Field c(triple.size()), s(triple.size());
    bool sin_nonzero = false;
    for (std::size_t node = 0; node < triple.size(); ++node) {
      double phase = 0.0;
      for (int a = 0; a < d; ++a) phase += two_pi_l * k[static_cast<std::size_t>(a)] * triple.coord(node, a);
      c[node] = std::cos(phase);
      s[node] = std::sin(phase);
      sin_nonzero = sin_nonzero || std::abs(s[node]) > 1e-8;
    }
    std::ostringstream os;
    os << "mode (" << k[0];
    for (int a = 1; a < d; ++a) os << "," << k[static_cast<std::size_t>(a)];
    os << ")";
    out.push_back(std::move(c));
    labels.push_back(os.str() + " cos");
    if (sin_nonzero) {
      out.push_back(std::move(s));
      labels.push_back(os.str() + " sin");
    }
  }
  for (int r = 0; r < samples; ++r) {
    Field v(triple.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = counter_normal(seed, i, static_cast<std::uint32_t>(r), 0xC0E1);
    if (r % 2 == 1) {
      auto vhat = triple.forward(v);
      const auto xi2 = triple.xi_squared();
      for (std::size_t q = 0; q < vhat.size(); ++q) vhat[q] /= (1.0 + xi2[q]);
      v = triple.inverse(vhat);
    }
    out.push_back(std::move(v));
    labels.push_back("random #" + std::to_string(r));
  }
  return out;
}

}  // namespace

CoercivityResult check_coercivity(const OperatorPair& ops, const SpectralTriple& triple, int samples,
                                  const std::vector<double>& times, std::uint64_t seed) {
  if (samples < 1) fail(ErrorKind::Domain, "check_coercivity: samples must be >= 1");
  std::vector<std::string> labels;
  const auto battery = coercivity_samples(triple, samples, seed, labels);
  std::vector<double> ts = times.empty() ? std::vector<double>{0.0} : times;
  std::vector<double> w(static_cast<std::size_t>(ops.channels), 0.0);
  CoercivityResult res;
  res.delta_est = std::numeric_limits<double>::infinity();
  const std::size_t n = triple.size();
  Field av(n), bv(n);
  for (double t : ts) {
    const StepContext ctx{t, 0, 0, w};
    for (std::size_t q = 0; q < battery.size(); ++q) {
      const auto& v = battery[q];
      apply_a(ops, triple, ctx, v, av);
      double pairing = 2.0 * triple.inner_h(v, av);
      double bsum = 0.0;
      if (ops.B) {
        for (int k = 0; k < ops.channels; ++k) {
          ops.B(ctx, k, v, bv);
          const double b = triple.norm_h(bv);
          bsum += b * b;
        }
      }
      const double vn = triple.norm_v(v);
      if (vn == 0.0) continue;
      const double ratio = -(pairing + bsum) / (vn * vn);
      if (!std::isfinite(ratio)) fail(ErrorKind::Numeric, "check_coercivity: non-finite pairing at " + labels[q]);
      if (ratio < res.delta_est) {
        res.delta_est = ratio;
        res.worst_sample = labels[q] + " at t=" + std::to_string(t);
      }
      res.k_est = std::max(res.k_est, triple.norm_vstar(av) / vn);
      res.k0_est = std::max(res.k0_est, std::sqrt(bsum) / vn);
    }
  }
  res.certified = res.delta_est > 0.0;
  return res;
}

Trajectory solve(const EvolutionProblem& problem, const NoiseModel& noise, std::uint64_t path, const Scheme& scheme) {
  noise.validate();
  if (!problem.triple) fail(ErrorKind::Config, "solve: problem has no triple");
  const SpectralTriple& triple = *problem.triple;
  triple.check_shape(problem.u0);
  const int kc = problem.ops.channels;
  if (kc != noise.channels) fail(ErrorKind::Config, "solve: operator channels differ from noise channels");
  if (!problem.ops.principal_symbol.empty() && problem.ops.principal_symbol.size() != triple.size()) {
    fail(ErrorKind::Shape, "solve: principal symbol size mismatch");
  }
  const std::size_t n = triple.size();
  const double dt = noise.dt;

  Trajectory tr;
  tr.triple = problem.triple;
  tr.dt = dt;
  tr.channels = kc;
  tr.path = path;
  tr.dw = noise.increments(path);
  tr.times.reserve(static_cast<std::size_t>(noise.steps) + 1);

  Field u = problem.u0;
  auto record = [&](int step) {
    const auto uhat = triple.forward(u);
    const auto wh = triple.weight_h();
    const auto wv = triple.weight_v();
    double h2 = 0.0, v2 = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double a = std::norm(uhat[s]);
      h2 += wh[s] * a;
      v2 += wv[s] * a;
    }
    tr.times.push_back(step * dt);
    tr.h_norm.push_back(std::sqrt(h2));
    tr.v_norm.push_back(std::sqrt(v2));
    if (scheme.keep_states || step == 0) tr.states.push_back(u);
  };
  record(0);

  std::vector<double> w(static_cast<std::size_t>(kc), 0.0);
  const bool direct = problem.ops.symbol_exact && !problem.ops.principal_symbol.empty();
  Field rhs(n);
  for (int step = 0; step < noise.steps; ++step) {
    const StepContext ctx{step * dt, step, path, w};
    const Field e = explicit_drift(problem, ctx, u);
    for (std::size_t i = 0; i < n; ++i) rhs[i] = u[i] + dt * e[i];
    for (int k = 0; k < kc; ++k) {
      const double dwk = tr.dw[static_cast<std::size_t>(step * kc + k)];
      if (dwk == 0.0) continue;
      const Field g = channel_total(problem, ctx, k, u);
      for (std::size_t i = 0; i < n; ++i) rhs[i] += g[i] * dwk;
    }

    if (direct) {
      auto rhat = triple.forward(rhs);
      for (std::size_t s = 0; s < n; ++s) rhat[s] /= (1.0 - dt * problem.ops.principal_symbol[s]);
      u = triple.inverse(rhat);
    } else {
      const ImplicitData data{&problem.ops, &triple, &ctx, dt};
      ImplicitOperator op(data);
      Eigen::BiCGSTAB<ImplicitOperator, SymbolPreconditioner> solver;
      solver.setTolerance(scheme.solver_tolerance);
      solver.setMaxIterations(scheme.max_iterations);
      solver.compute(op);
      const Eigen::Map<const Eigen::VectorXd> b(rhs.data(), static_cast<Eigen::Index>(n));
      Eigen::VectorXd guess = SymbolPreconditioner().compute(op).solve(b);
      Eigen::VectorXd x = solver.solveWithGuess(b, guess);
      if (solver.info() != Eigen::Success && !(solver.error() <= scheme.solver_tolerance)) {
        std::ostringstream os;
        os << "implicit solve did not converge at step " << step << " (residual " << solver.error() << ")";
        fail(ErrorKind::Numeric, os.str());
      }
      tr.solver_iterations += solver.iterations();
      u.assign(x.data(), x.data() + x.size());
    }
    for (int k = 0; k < kc; ++k) w[static_cast<std::size_t>(k)] += tr.dw[static_cast<std::size_t>(step * kc + k)];

    if (!all_finite(u)) {
      tr.diverged = true;
      tr.diverged_step = step + 1;
      break;
    }
    if (!scheme.keep_states) tr.states.back() = u;
    record(step + 1);
    if (tr.h_norm.back() > scheme.overflow_guard) {
      tr.diverged = true;
      tr.diverged_step = step + 1;
      break;
    }
  }
  return tr;
}

ItoResidual ito_residual(const Trajectory& traj, const EvolutionProblem& problem, QuadraticVariation qv) {
  if (traj.states.size() != traj.times.size()) {
    fail(ErrorKind::Config, "ito_residual: trajectory was solved without retained states");
  }
  const SpectralTriple& triple = *traj.triple;
  const std::size_t n = triple.size();
  const int kc = traj.channels;
  const double dt = traj.dt;
  ItoResidual res;
  const double u0sq = triple.inner_h(traj.states[0], traj.states[0]);
  res.series.push_back(0.0);
  double drift = 0.0, martingale = 0.0, quad = 0.0;
  Field au(n);
  for (int step = 0; step + 1 < static_cast<int>(traj.states.size()); ++step) {
    const auto& un = traj.states[static_cast<std::size_t>(step)];
    const auto& un1 = traj.states[static_cast<std::size_t>(step) + 1];
    const auto w = cumulative_w(traj.dw, kc, step);
    const StepContext ctx{step * dt, step, traj.path, w};
    apply_a(problem.ops, triple, ctx, un1, au);
    const Field e = explicit_drift(problem, ctx, un);
    for (std::size_t i = 0; i < n; ++i) au[i] += e[i];
    drift += 2.0 * dt * triple.inner_h(un, au);
    Field dm(n, 0.0);
    for (int k = 0; k < kc; ++k) {
      const Field g = channel_total(problem, ctx, k, un);
      const double dwk = traj.dw[static_cast<std::size_t>(step * kc + k)];
      for (std::size_t i = 0; i < n; ++i) dm[i] += g[i] * dwk;
      if (qv == QuadraticVariation::Compensator) quad += triple.inner_h(g, g) * dt;
    }
    if (qv == QuadraticVariation::Realized) quad += triple.inner_h(dm, dm);
    martingale += 2.0 * triple.inner_h(un, dm);
    const double r = triple.inner_h(un1, un1) - u0sq - drift - quad - martingale;
    res.series.push_back(r);
    res.max_abs = std::max(res.max_abs, std::abs(r));
  }
  return res;
}

WeightProcess WeightProcess::from_alpha(std::vector<double> alpha, double dt) {
  WeightProcess w;
  w.phi.assign(alpha.size() + 1, 0.0);
  for (std::size_t n = 0; n < alpha.size(); ++n) {
    if (!(alpha[n] >= 0.0)) fail(ErrorKind::Domain, "weight process: alpha must be nonnegative");
    w.phi[n + 1] = w.phi[n] + alpha[n] * dt;
  }
  w.mu.assign(alpha.size(), 0.0);
  w.sup_bound = w.phi.back();
  w.alpha = std::move(alpha);
  return w;
}

namespace {
double eval_bound(const Bound& b, double t) { return b ? b(t) : 0.0; }

double recipe_alpha(const EvolutionProblem& p, double t, double epsilon) {
  const double delta = p.ops.delta;
  const double a = eval_bound(p.lower.a_norm, t);
  const double as = eval_bound(p.lower.a_star_norm, t);
  const double b = eval_bound(p.lower.b_norm, t);
  const double c = eval_bound(p.lower.c_norm, t);
  const double k0 = p.ops.K0_bound;
  const double k1 = p.ops.K1_bound;
  return std::max({epsilon, 16.0 / delta * a * a,
                   32.0 / delta * as * as + (2056.0 + 32.0 * k0 * k0 / delta) * b * b + 4.0 * c, k1 * k1});
}
}  // namespace

WeightProcess default_weights(const EvolutionProblem& problem, const NoiseModel& noise, double epsilon, double mu) {
  if (!(epsilon > 0.0)) fail(ErrorKind::Domain, "default_weights: epsilon must be positive");
  std::vector<double> alpha(static_cast<std::size_t>(noise.steps));
  for (int n = 0; n < noise.steps; ++n) alpha[static_cast<std::size_t>(n)] = recipe_alpha(problem, n * noise.dt, epsilon) + mu;
  auto w = WeightProcess::from_alpha(std::move(alpha), noise.dt);
  std::fill(w.mu.begin(), w.mu.end(), mu);
  return w;
}

bool weights_satisfy_recipe(const EvolutionProblem& problem, const NoiseModel& noise, const WeightProcess& w) {
  if (static_cast<int>(w.alpha.size()) < noise.steps) return false;
  for (int n = 0; n < noise.steps; ++n) {
    const double need = recipe_alpha(problem, n * noise.dt, std::numeric_limits<double>::min());
    if (w.alpha[static_cast<std::size_t>(n)] < need * (1.0 - 1e-12)) return false;
  }
  return true;
}

double safe_ratio(double lhs, double rhs) {
  if (rhs > 0.0) return lhs / rhs;
  if (lhs > 0.0) return std::numeric_limits<double>::infinity();
  return 0.0;
}

EstimateReport reduce_report(std::string estimate, std::vector<std::string> lhs_names,
                             std::vector<std::string> rhs_names, const std::vector<PathTerms>& paths, double dt) {
  EstimateReport rep;
  rep.estimate = std::move(estimate);
  rep.dt = dt;
  rep.lhs_terms.assign(lhs_names.size(), 0.0);
  rep.rhs_terms.assign(rhs_names.size(), 0.0);
  std::vector<double> lhs_path, rhs_path;
  for (const auto& p : paths) {
    if (p.diverged) {
      ++rep.n_diverged;
      continue;
    }
    ++rep.n_paths;
    double l = 0.0, r = 0.0;
    for (std::size_t i = 0; i < rep.lhs_terms.size(); ++i) {
      rep.lhs_terms[i] += p.lhs[i];
      l += p.lhs[i];
    }
    for (std::size_t i = 0; i < rep.rhs_terms.size(); ++i) {
      rep.rhs_terms[i] += p.rhs[i];
      r += p.rhs[i];
    }
    lhs_path.push_back(l);
    rhs_path.push_back(r);
  }
  const double count = static_cast<double>(rep.n_paths);
  if (rep.n_paths > 0) {
    for (auto& x : rep.lhs_terms) x /= count;
    for (auto& x : rep.rhs_terms) x /= count;
  }
  for (double x : rep.lhs_terms) rep.lhs += x;
  for (double x : rep.rhs_terms) rep.rhs += x;
  auto stderr_of = [&](const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  };
  rep.lhs_stderr = stderr_of(lhs_path, rep.lhs);
  rep.rhs_stderr = stderr_of(rhs_path, rep.rhs);
  rep.ratio = safe_ratio(rep.lhs, rep.rhs);
  rep.lhs_names = std::move(lhs_names);
  rep.rhs_names = std::move(rhs_names);
  if (rep.n_diverged > 0) rep.flags.push_back("diverged_paths_excluded");
  if (rep.n_paths == 0) rep.flags.push_back("no_valid_paths");
  return rep;
}

PathTerms energy_terms(const Trajectory& traj, const EvolutionProblem& problem, const WeightProcess& weights) {
  PathTerms pt;
  pt.lhs.assign(3, 0.0);
  pt.rhs.assign(3, 0.0);
  if (traj.diverged) {
    pt.diverged = true;
    return pt;
  }
  const SpectralTriple& triple = *traj.triple;
  const std::size_t n = triple.size();
  const double dt = traj.dt;
  const int steps = traj.steps();
  if (static_cast<int>(weights.alpha.size()) < steps) fail(ErrorKind::Config, "energy report: weight process too short");
  const int kc = traj.channels;
  double sup = 0.0, vint = 0.0, aint = 0.0, forcing = 0.0, gint = 0.0;
  Field tmp(n);
  std::vector<double> w(static_cast<std::size_t>(kc), 0.0);
  for (int step = 0; step <= steps; ++step) {
    const double e2 = std::exp(-2.0 * weights.phi[static_cast<std::size_t>(step)]);
    const double h = traj.h_norm[static_cast<std::size_t>(step)];
    sup = std::max(sup, h * h * e2);
    if (step == steps) break;
    const double alpha = weights.alpha[static_cast<std::size_t>(step)];
    const double v = traj.v_norm[static_cast<std::size_t>(step)];
    vint += e2 * v * v * dt;
    aint += alpha * h * h * e2 * dt;
    const StepContext ctx{step * dt, step, traj.path, w};
    double term = 0.0;
    if (problem.forcing.f_star) {
      problem.forcing.f_star(ctx, tmp);
      const double x = triple.norm_vstar(tmp);
      term += x * x;
    }
    if (problem.forcing.f) {
      problem.forcing.f(ctx, tmp);
      const double x = triple.norm_h(tmp);
      if (x > 0.0) term += alpha > 0.0 ? x * x / alpha : std::numeric_limits<double>::infinity();
    }
    if (problem.forcing.h) {
      for (int k = 0; k < kc; ++k) {
        problem.forcing.h(ctx, k, tmp);
        const double x = triple.norm_h(tmp);
        term += x * x;
      }
    }
    forcing += e2 * term * dt;
    if (problem.forcing.g) {
      problem.forcing.g(ctx, tmp);
      gint += std::exp(-weights.phi[static_cast<std::size_t>(step)]) * triple.norm_h(tmp) * dt;
    }
    for (int k = 0; k < kc; ++k) w[static_cast<std::size_t>(k)] += traj.dw[static_cast<std::size_t>(step * kc + k)];
  }
  const double h0 = traj.h_norm.front();
  pt.lhs = {sup, vint, aint};
  pt.rhs = {h0 * h0, forcing, gint * gint};
  return pt;
}

namespace {
const std::vector<std::string> kEnergyLhs{"sup_h_weighted", "int_v_weighted", "int_alpha_h_weighted"};
const std::vector<std::string> kEnergyRhs{"initial_h", "int_fstar_f_h_weighted", "g_l1_squared"};
}  // namespace

EstimateReport energy_report(const std::vector<Trajectory>& trajs, const EvolutionProblem& problem,
                             const WeightProcess& weights) {
  std::vector<PathTerms> terms;
  for (const auto& t : trajs) terms.push_back(energy_terms(t, problem, weights));
  auto rep = reduce_report("energy", kEnergyLhs, kEnergyRhs, terms, trajs.empty() ? 0.0 : trajs.front().dt);
  if (!weights.hypotheses_met) rep.flags.push_back("hypotheses_unmet");
  return rep;
}

int worker_count() {
  if (const char* env = std::getenv("SPDELAB_WORKERS")) {
    const int w = std::atoi(env);
    if (w >= 1) return w;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void for_each_path(std::size_t n_paths, const std::function<void(std::size_t)>& fn, int workers) {
  if (workers <= 0) workers = worker_count();
  workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(workers), std::max<std::size_t>(n_paths, 1)));
  if (workers <= 1) {
    for (std::size_t p = 0; p < n_paths; ++p) fn(p);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t p = next.fetch_add(1);
        if (p >= n_paths) return;
        try {
          fn(p);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          next.store(n_paths);
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<PathTerms> run_ensemble(const EvolutionProblem& problem, const NoiseModel& noise,
                                    const EnsembleOptions& options,
                                    const std::function<PathTerms(const Trajectory&)>& terms) {
  std::vector<PathTerms> out(options.n_paths);
  for_each_path(
      options.n_paths,
      [&](std::size_t p) {
        const auto traj = solve(problem, noise, options.first_path + p, options.scheme);
        out[p] = terms(traj);
        if (traj.diverged) out[p].diverged = true;
      },
      options.workers);
  return out;
}

EstimateReport energy_ensemble(const EvolutionProblem& problem, const NoiseModel& noise, const WeightProcess& weights,
                               const EnsembleOptions& options) {
  const auto terms = run_ensemble(problem, noise, options,
                                  [&](const Trajectory& t) { return energy_terms(t, problem, weights); });
  auto rep = reduce_report("energy", kEnergyLhs, kEnergyRhs, terms, noise.dt);
  if (!weights.hypotheses_met) rep.flags.push_back("hypotheses_unmet");
  return rep;
}

StabilityTable stability_experiment(const EvolutionProblem& base, const std::vector<EvolutionProblem>& sequence,
                                    const NoiseModel& noise, const EnsembleOptions& options) {
  for (const auto& p : sequence) {
    if (!p.triple || p.triple->spec().grid != base.triple->spec().grid || p.triple->dim() != base.triple->dim() ||
        p.triple->box() != base.triple->box() || p.triple->order() != base.triple->order()) {
      fail(ErrorKind::Config, "stability_experiment: all problems must share one grid");
    }
    if (p.ops.channels != base.ops.channels) fail(ErrorKind::Config, "stability_experiment: channel count mismatch");
  }
  const std::size_t m = sequence.size();
  std::vector<std::vector<double>> sup(options.n_paths, std::vector<double>(m, 0.0));
  std::vector<std::vector<double>> vint = sup;
  std::vector<char> bad(options.n_paths, 0);
  const SpectralTriple& triple = *base.triple;
  for_each_path(
      options.n_paths,
      [&](std::size_t p) {
        const std::uint64_t path = options.first_path + p;
        const auto ref = solve(base, noise, path, options.scheme);
        if (ref.diverged) {
          bad[p] = 1;
          return;
        }
        for (std::size_t j = 0; j < m; ++j) {
          const auto tr = solve(sequence[j], noise, path, options.scheme);
          if (tr.diverged) {
            bad[p] = 1;
            return;
          }
          for (std::size_t s = 0; s < ref.states.size(); ++s) {
            Field diff(triple.size());
            for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = tr.states[s][i] - ref.states[s][i];
            const auto dh = triple.forward(diff);
            double h2 = 0.0, v2 = 0.0;
            const auto wh = triple.weight_h();
            const auto wv = triple.weight_v();
            for (std::size_t q = 0; q < dh.size(); ++q) {
              h2 += wh[q] * std::norm(dh[q]);
              v2 += wv[q] * std::norm(dh[q]);
            }
            sup[p][j] = std::max(sup[p][j], h2);
            if (s + 1 < ref.states.size()) vint[p][j] += v2 * noise.dt;
          }
        }
      },
      options.workers);
  StabilityTable table;
  table.distance.assign(m, 0.0);
  table.sup_term.assign(m, 0.0);
  table.v_term.assign(m, 0.0);
  std::size_t good = 0;
  for (std::size_t p = 0; p < options.n_paths; ++p) {
    if (bad[p]) continue;
    ++good;
    for (std::size_t j = 0; j < m; ++j) {
      table.sup_term[j] += sup[p][j];
      table.v_term[j] += vint[p][j];
    }
  }
  if (good == 0) fail(ErrorKind::Divergence, "stability_experiment: every path diverged");
  for (std::size_t j = 0; j < m; ++j) {
    table.sup_term[j] /= static_cast<double>(good);
    table.v_term[j] /= static_cast<double>(good);
    table.distance[j] = table.sup_term[j] + table.v_term[j];
  }
  table.decreasing = true;
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const double r = safe_ratio(table.distance[j + 1], table.distance[j]);
    table.max_ratio = std::max(table.max_ratio, r);
    table.decreasing = table.decreasing && table.distance[j + 1] < table.distance[j];
  }
  return table;
}

}  // namespace spdelab
