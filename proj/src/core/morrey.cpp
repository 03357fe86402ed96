#include "core/morrey.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "core/error.hpp"
#include "core/rng.hpp"

namespace spdelab {

void MorreyParams::validate_admissibility(int dim) const {
  if (!(rho0 > 0.0 && rho0 <= 1.0)) fail(ErrorKind::Domain, "morrey: rho0 must lie in (0, 1]");
  if (!(r > 2.0 && r <= dim)) fail(ErrorKind::Domain, "morrey: admissibility exponent r must lie in (2, d]");
  if (alpha != 1.0 && alpha != 0.5) fail(ErrorKind::Domain, "morrey: admissibility order must be 1 or 1/2");
}

double unit_ball_volume(int dim) {
  return std::pow(std::numbers::pi, 0.5 * dim) / std::tgamma(0.5 * dim + 1.0);
}

std::size_t origin_node(const SpectralTriple& triple) {
  std::size_t node = 0;
  const auto m = static_cast<std::size_t>(triple.grid());
  for (int a = 0; a < triple.dim(); ++a) node = node * m + m / 2;
  return node;
}

std::size_t nearest_node(const SpectralTriple& triple, const std::vector<double>& x) {
  std::size_t node = 0;
  const long m = triple.grid();
  for (int a = 0; a < triple.dim(); ++a) {
    const double xa = a < static_cast<int>(x.size()) ? x[static_cast<std::size_t>(a)] : 0.0;
    long j = std::lround((xa + 0.5 * triple.box()) / triple.spacing());
    j = ((j % m) + m) % m;
    node = node * static_cast<std::size_t>(m) + static_cast<std::size_t>(j);
  }
  return node;
}

std::vector<double> BallSampler::geometric(double lo, double hi, int count) {
  if (count < 1 || !(lo > 0.0) || hi < lo) fail(ErrorKind::Config, "ball sampler: invalid radius ladder");
  std::vector<double> r(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) {
    r[static_cast<std::size_t>(j)] = count == 1 ? hi : lo * std::pow(hi / lo, static_cast<double>(j) / (count - 1));
  }
  return r;
}

BallSampler BallSampler::strided(const SpectralTriple& triple, int stride, double rmin, double rmax, int count,
                                 std::vector<std::size_t> extra) {
  if (stride < 1) fail(ErrorKind::Config, "ball sampler: stride must be >= 1");
  BallSampler s;
  for (std::size_t node = 0; node < triple.size(); ++node) {
    const auto idx = triple.index(node);
    bool keep = true;
    for (int a = 0; a < triple.dim(); ++a) keep = keep && idx[static_cast<std::size_t>(a)] % stride == 0;
    if (keep) s.centers.push_back(node);
  }
  for (auto c : extra) {
    if (std::find(s.centers.begin(), s.centers.end(), c) == s.centers.end()) s.centers.push_back(c);
  }
  s.radii = geometric(rmin, rmax, count);
  return s;
}

void BallSampler::validate(const SpectralTriple& triple) const {
  if (centers.empty() || radii.empty()) fail(ErrorKind::Config, "ball sampler is empty");
  for (auto c : centers) {
    if (c >= triple.size()) fail(ErrorKind::Config, "ball sampler center outside the grid");
  }
  for (double r : radii) {
    if (r < 2.0 * triple.spacing() * (1.0 - 1e-12)) {
      fail(ErrorKind::Config, "ball sampler radius " + std::to_string(r) + " is below two grid spacings");
    }
    if (r >= 0.5 * triple.box()) fail(ErrorKind::Config, "ball sampler radius must be below half the box");
  }
}

namespace {

struct Offset {
  std::array<int, 3> o;
  double dist2;
};

std::vector<Offset> ball_offsets(const SpectralTriple& triple, double radius) {
  const double h = triple.spacing();
  const int reach = static_cast<int>(std::floor(radius / h + 1e-9));
  const double r2 = radius * radius * (1.0 + 1e-12);
  std::vector<Offset> out;
  const int d = triple.dim();
  const int lo1 = d > 1 ? -reach : 0, lo2 = d > 2 ? -reach : 0;
  for (int i = -reach; i <= reach; ++i) {
    for (int j = lo1; j <= -lo1; ++j) {
      for (int k = lo2; k <= -lo2; ++k) {
        const double q = h * h * (static_cast<double>(i) * i + static_cast<double>(j) * j + static_cast<double>(k) * k);
        if (q <= r2) out.push_back({{i, j, k}, q});
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Offset& a, const Offset& b) { return a.dist2 < b.dist2; });
  return out;
}

std::size_t shifted(const SpectralTriple& triple, const std::array<int, 3>& base, const std::array<int, 3>& o) {
  const int m = triple.grid();
  std::size_t node = 0;
  for (int a = 0; a < triple.dim(); ++a) {
    int j = base[static_cast<std::size_t>(a)] + o[static_cast<std::size_t>(a)];
    j %= m;
    if (j < 0) j += m;
    node = node * static_cast<std::size_t>(m) + static_cast<std::size_t>(j);
  }
  return node;
}

}  // namespace

std::vector<double> ball_means(const SpectralTriple& triple, const Field& f, double r, const BallSampler& sampler) {
  triple.check_shape(f);
  sampler.validate(triple);
  std::vector<double> radii = sampler.radii;
  std::vector<std::size_t> order(radii.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return radii[a] < radii[b]; });
  const double rmax = radii[order.back()];
  const auto offsets = ball_offsets(triple, rmax);

  Field powered(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) powered[i] = std::pow(std::abs(f[i]), r);

  const double wd = unit_ball_volume(triple.dim());
  const double hd = triple.cell_volume();
  std::vector<double> out(sampler.centers.size() * radii.size(), 0.0);
  for (std::size_t c = 0; c < sampler.centers.size(); ++c) {
    const auto base = triple.index(sampler.centers[c]);
    double sum = 0.0;
    std::size_t count = 0;
    std::size_t next = 0;
    for (std::size_t q = 0; q <= offsets.size(); ++q) {
      const bool done = q == offsets.size();
      while (next < order.size()) {
        const double rj = radii[order[next]];
        if (!done && offsets[q].dist2 <= rj * rj * (1.0 + 1e-12)) break;
        double mean = 0.0;
        if (sampler.quadrature == BallQuadrature::Indicator) {
          mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
        } else {
          mean = hd * sum / (wd * std::pow(rj, triple.dim()));
        }
        out[c * radii.size() + order[next]] = mean;
        ++next;
      }
      if (done || next == order.size()) break;
      sum += powered[shifted(triple, base, offsets[q].o)];
      ++count;
    }
  }
  return out;
}

double morrey_norm(const SpectralTriple& triple, const Field& f, double r, double lambda_exp,
                   const BallSampler& sampler) {
  if (!(r > 0.0)) fail(ErrorKind::Domain, "morrey_norm: exponent must be positive");
  for (double x : f) {
    if (!std::isfinite(x)) fail(ErrorKind::Numeric, "morrey_norm: non-finite field value");
  }
  const auto means = ball_means(triple, f, r, sampler);
  const std::size_t nr = sampler.radii.size();
  double best = 0.0;
  for (std::size_t i = 0; i < means.size(); ++i) {
    const double rho = sampler.radii[i % nr];
    best = std::max(best, std::pow(rho, lambda_exp) * std::pow(means[i], 1.0 / r));
  }
  return best;
}

double morrey_norm(const SpectralTriple& triple, const Field& f, const MorreyParams& params,
                   const BallSampler& sampler) {
  for (double rho : sampler.radii) {
    if (rho > params.rho0 * (1.0 + 1e-12)) fail(ErrorKind::Config, "morrey_norm: sampler radius exceeds rho0");
  }
  return morrey_norm(triple, f, params.r, params.lambda_exp, sampler);
}

Field magnitude(const std::vector<Field>& components) {
  if (components.empty()) return {};
  Field m(components.front().size(), 0.0);
  if (components.size() == 1) {
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::abs(components[0][i]);
    return m;
  }
  for (const auto& c : components) {
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += c[i] * c[i];
  }
  for (auto& x : m) x = std::sqrt(x);
  return m;
}

double sup_abs(const std::vector<Field>& components) {
  double s = 0.0;
  for (double x : magnitude(components)) s = std::max(s, x);
  return s;
}

std::size_t AdmissibleField::slice_at(double t) const {
  std::size_t s = 0;
  while (s + 1 < times.size() && times[s + 1] <= t + 1e-14) ++s;
  return s;
}

std::vector<Field> AdmissibleField::total(std::size_t slice) const {
  std::vector<Field> out = singular.at(slice);
  const auto& b = bounded.at(slice);
  for (std::size_t k = 0; k < out.size(); ++k) {
    for (std::size_t i = 0; i < out[k].size(); ++i) out[k][i] += b[k][i];
  }
  return out;
}

double AdmissibleField::bar_integral(double horizon) const {
  double acc = 0.0;
  for (std::size_t s = 0; s < times.size(); ++s) {
    const double end = s + 1 < times.size() ? std::min(times[s + 1], horizon) : horizon;
    const double span = std::max(0.0, end - times[s]);
    acc += std::pow(bar[s], 2.0 * params.alpha) * span;
  }
  return acc;
}

AdmissibleField zero_admissible(const SpectralTriple& triple, int components, const MorreyParams& params) {
  AdmissibleField f;
  f.components = components;
  f.params = params;
  f.singular.assign(1, std::vector<Field>(static_cast<std::size_t>(components), Field(triple.size(), 0.0)));
  f.bounded = f.singular;
  f.bar = {0.0};
  return f;
}

double certify_hat(const SpectralTriple& triple, const AdmissibleField& f, const BallSampler& sampler) {
  double hat = 0.0;
  const double alpha = f.params.alpha;
  for (const auto& slice : f.singular) {
    const Field mag = magnitude(slice);
    bool any = false;
    for (double x : mag) any = any || x != 0.0;
    if (!any) continue;
    hat = std::max(hat, morrey_norm(triple, mag, alpha * f.params.r, 1.0 / alpha, sampler));
  }
  return hat;
}

AdmissibleField make_admissible(const SpectralTriple& triple, std::vector<Field> singular, std::vector<Field> bounded,
                                const MorreyParams& params, const BallSampler& sampler) {
  if (singular.size() != bounded.size()) fail(ErrorKind::Shape, "admissible field: component count mismatch");
  for (const auto& c : singular) triple.check_shape(c);
  for (const auto& c : bounded) triple.check_shape(c);
  AdmissibleField f;
  f.components = static_cast<int>(singular.size());
  f.params = params;
  f.bar = {sup_abs(bounded)};
  f.singular.push_back(std::move(singular));
  f.bounded.push_back(std::move(bounded));
  f.hat = certify_hat(triple, f, sampler);
  return f;
}

DecomposeResult decompose_lpq(const SpectralTriple& triple, const std::vector<double>& times,
                              const std::vector<std::vector<Field>>& b, double p, double n_hat,
                              const MorreyParams& params, const BallSampler& sampler) {
  const int d = triple.dim();
  if (!(p > d)) fail(ErrorKind::Domain, "decompose_lpq: p must exceed the dimension");
  if (!(n_hat > 0.0)) fail(ErrorKind::Domain, "decompose_lpq: N_hat must be positive");
  if (times.size() != b.size() || b.empty()) fail(ErrorKind::Shape, "decompose_lpq: one field per time slice required");

  DecomposeResult res;
  res.theoretical_bound = 1.0 / unit_ball_volume(d);
  AdmissibleField& f = res.field;
  f.components = static_cast<int>(b.front().size());
  f.times = times;
  f.params = params;
  const double scale = std::pow(n_hat, d - p);
  for (const auto& slice : b) {
    for (const auto& c : slice) triple.check_shape(c);
    const Field mag = magnitude(slice);
    double integral = 0.0;
    for (double x : mag) integral += std::pow(x, p);
    integral *= triple.cell_volume();
    if (!std::isfinite(integral)) fail(ErrorKind::Domain, "decompose_lpq: field is not in L_p");
    const double lambda = n_hat * std::pow(integral, 1.0 / (p - d));
    std::vector<Field> sing(slice.size(), Field(triple.size(), 0.0));
    std::vector<Field> bnd(slice.size(), Field(triple.size(), 0.0));
    for (std::size_t i = 0; i < mag.size(); ++i) {
      const bool above = mag[i] >= lambda;
      for (std::size_t k = 0; k < slice.size(); ++k) (above ? sing : bnd)[k][i] = slice[k][i];
    }
    const Field sing_mag = magnitude(sing);
    const auto means = ball_means(triple, sing_mag, static_cast<double>(d), sampler);
    const std::size_t nr = sampler.radii.size();
    for (std::size_t i = 0; i < means.size(); ++i) {
      const double rho = sampler.radii[i % nr];
      res.fitted_constant = std::max(res.fitted_constant, std::pow(rho, d) * means[i] / scale);
    }
    res.threshold.push_back(lambda);
    f.bar.push_back(lambda);
    f.singular.push_back(std::move(sing));
    f.bounded.push_back(std::move(bnd));
  }
  f.hat = certify_hat(triple, f, sampler);
  return res;
}

LpsResult check_lps(int dim, double p, double q) {
  auto inv = [](double x) { return std::isinf(x) ? 0.0 : 1.0 / x; };
  LpsResult r;
  r.value = dim * inv(p) + 2.0 * inv(q);
  r.critical = std::abs(r.value - 1.0) <= 1e-12;
  r.subcritical = r.value < 1.0 - 1e-12;
  return r;
}

WeakLdResult check_weak_ld(const SpectralTriple& triple, const Field& b_abs, const BallSampler& sampler, double r,
                           std::vector<double> levels) {
  triple.check_shape(b_abs);
  const int d = triple.dim();
  double top = 0.0;
  for (double x : b_abs) top = std::max(top, std::abs(x));
  WeakLdResult res;
  if (top == 0.0) return res;
  if (levels.empty()) levels = BallSampler::geometric(top * 1e-3, top * 0.5, 24);
  if (1.0 >= 0.5 * triple.box()) fail(ErrorKind::Config, "check_weak_ld: unit balls need a box longer than 2");
  const auto offsets = ball_offsets(triple, 1.0);
  for (auto c : sampler.centers) {
    const auto base = triple.index(c);
    for (double lambda : levels) {
      std::size_t count = 0;
      for (const auto& o : offsets) count += std::abs(b_abs[shifted(triple, base, o.o)]) > lambda ? 1 : 0;
      res.weak_norm = std::max(res.weak_norm, std::pow(lambda, d) * triple.cell_volume() * static_cast<double>(count));
    }
  }
  if (res.weak_norm > 0.0) {
    const auto means = ball_means(triple, b_abs, r, sampler);
    const std::size_t nr = sampler.radii.size();
    for (std::size_t i = 0; i < means.size(); ++i) {
      const double rho = sampler.radii[i % nr];
      res.fitted_constant = std::max(res.fitted_constant, std::pow(rho, r) * means[i] / std::pow(res.weak_norm, r / d));
    }
  }
  return res;
}

namespace {
double grad_sq(const SpectralTriple& triple, const Field& u) {
  const auto uhat = triple.forward(u);
  const auto xi2 = triple.xi_squared();
  double acc = 0.0;
  for (std::size_t s = 0; s < uhat.size(); ++s) acc += xi2[s] * std::norm(uhat[s]);
  return acc;
}
}  // namespace

EmbeddingReport verify_embedding(const SpectralTriple& triple, const AdmissibleField& f, std::size_t slice,
                                 const std::vector<Field>& battery) {
  EmbeddingReport rep;
  const Field mag = magnitude(f.total(slice));
  const double hat2 = f.hat * f.hat;
  const double bar = f.bar.at(slice);
  const double rho0 = f.params.rho0;
  for (const auto& u : battery) {
    triple.check_shape(u);
    double lhs = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) lhs += mag[i] * mag[i] * u[i] * u[i];
    lhs *= triple.cell_volume();
    const double u2 = triple.inner_l2(u, u);
    const double rhs = hat2 * grad_sq(triple, u) + (hat2 / (rho0 * rho0) + 2.0 * bar * bar) * u2;
    double ratio = 0.0;
    if (rhs > 0.0) {
      ratio = lhs / rhs;
    } else if (lhs > 0.0) {
      ratio = std::numeric_limits<double>::infinity();
    }
    rep.ratios.push_back(ratio);
    rep.constant = std::max(rep.constant, ratio);
  }
  return rep;
}

double fit_bdu_constant(const SpectralTriple& triple, const AdmissibleField& b, const std::vector<Field>& battery) {
  if (b.hat == 0.0) return 0.0;
  const auto& sing = b.singular.front();
  const int d = triple.dim();
  double best = 0.0;
  for (const auto& u : battery) {
    std::vector<Field> du;
    for (int a = 0; a < d; ++a) du.push_back(triple.gradient(u, a));
    const double du_norm = std::sqrt(grad_sq(triple, u));
    Field bdu(u.size(), 0.0);
    for (int a = 0; a < std::min(d, b.components); ++a) {
      for (std::size_t i = 0; i < u.size(); ++i) bdu[i] += sing[static_cast<std::size_t>(a)][i] * du[static_cast<std::size_t>(a)][i];
    }
    for (const auto& v : battery) {
      const double num = std::abs(triple.inner_l2(v, bdu));
      const double den = b.hat * (std::sqrt(grad_sq(triple, v)) + triple.norm_l2(v) / b.params.rho0) * du_norm;
      if (den > 0.0) best = std::max(best, num / den);
    }
  }
  return best;
}

std::vector<Field> bump_battery(const SpectralTriple& triple, int count, double min_width, double max_width,
                                double spread, std::uint64_t seed) {
  std::vector<Field> out;
  const int d = triple.dim();
  for (int i = 0; i < count; ++i) {
    std::array<double, 3> c{0.0, 0.0, 0.0};
    for (int a = 0; a < d; ++a) {
      c[static_cast<std::size_t>(a)] = spread * (2.0 * counter_uniform(seed, static_cast<std::uint64_t>(i), static_cast<std::uint32_t>(a), 7) - 1.0);
    }
    const double w = min_width + (max_width - min_width) * counter_uniform(seed, static_cast<std::uint64_t>(i), 3, 7);
    Field u(triple.size());
    for (std::size_t node = 0; node < triple.size(); ++node) {
      double q = 0.0;
      for (int a = 0; a < d; ++a) {
        const double z = triple.coord(node, a) - c[static_cast<std::size_t>(a)];
        q += z * z;
      }
      u[node] = std::exp(-q / (2.0 * w * w));
    }
    out.push_back(std::move(u));
  }
  return out;
}

namespace {
double radius_of(const SpectralTriple& triple, std::size_t node) {
  double q = 0.0;
  for (int a = 0; a < triple.dim(); ++a) {
    const double x = triple.coord(node, a);
    q += x * x;
  }
  return std::sqrt(q);
}
}  // namespace

Field smooth_cutoff(const SpectralTriple& triple, double radius) {
  if (!(radius > 0.0)) fail(ErrorKind::Domain, "cutoff radius must be positive");
  auto psi = [](double t) { return t > 0.0 ? std::exp(-1.0 / t) : 0.0; };
  Field chi(triple.size());
  for (std::size_t node = 0; node < triple.size(); ++node) {
    const double s = (radius_of(triple, node) - 0.5 * radius) / (0.5 * radius);
    if (s <= 0.0) {
      chi[node] = 1.0;
    } else if (s >= 1.0) {
      chi[node] = 0.0;
    } else {
      chi[node] = psi(1.0 - s) / (psi(1.0 - s) + psi(s));
    }
  }
  return chi;
}

double cell_average_power(int dim, double spacing, double power) {
  if (!(power < dim)) fail(ErrorKind::Domain, "|x|^-p is not locally integrable for p >= d");
  const int n = dim == 3 ? 48 : (dim == 2 ? 256 : 4096);
  double acc = 0.0;
  std::size_t total = 0;
  const int n1 = dim > 1 ? n : 1, n2 = dim > 2 ? n : 1;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n1; ++j) {
      for (int k = 0; k < n2; ++k) {
        const double x = (i + 0.5) / n - 0.5;
        const double y = dim > 1 ? (j + 0.5) / n - 0.5 : 0.0;
        const double z = dim > 2 ? (k + 0.5) / n - 0.5 : 0.0;
        acc += std::pow(x * x + y * y + z * z, -0.5 * power);
        ++total;
      }
    }
  }
  return acc / static_cast<double>(total) * std::pow(spacing, -power);
}

Field power_field(const SpectralTriple& triple, double power) {
  Field f(triple.size());
  const std::size_t o = origin_node(triple);
  for (std::size_t node = 0; node < triple.size(); ++node) {
    f[node] = node == o ? 0.0 : std::pow(radius_of(triple, node), -power);
  }
  if (power > 0.0) {
    f[o] = cell_average_power(triple.dim(), triple.spacing(), power);
  } else {
    f[o] = power == 0.0 ? 1.0 : 0.0;
  }
  return f;
}

std::vector<Field> radial_vector_field(const SpectralTriple& triple, double power) {
  const int d = triple.dim();
  std::vector<Field> out(static_cast<std::size_t>(d), Field(triple.size(), 0.0));
  const std::size_t o = origin_node(triple);
  for (std::size_t node = 0; node < triple.size(); ++node) {
    if (node == o) continue;
    const double rad = radius_of(triple, node);
    const double s = std::pow(rad, -power - 1.0);
    for (int a = 0; a < d; ++a) out[static_cast<std::size_t>(a)][node] = triple.coord(node, a) * s;
  }
  return out;
}

}  // namespace spdelab
