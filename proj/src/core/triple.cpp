#include "core/triple.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "core/error.hpp"

namespace spdelab {

SpectralTriple::SpectralTriple(const TripleSpec& spec) : spec_(spec) {
  if (spec.dim < 1 || spec.dim > 3) fail(ErrorKind::Domain, "triple: dim must be 1, 2 or 3");
  if (spec.grid < 2 || spec.grid % 2 != 0) fail(ErrorKind::Domain, "triple: grid must be a positive even integer");
  if (!(spec.box > 0.0) || !std::isfinite(spec.box)) fail(ErrorKind::Domain, "triple: box length must be positive");
  if (spec.order != 1 && spec.order != 2) fail(ErrorKind::Domain, "triple: order must be 1 or 2");

  const int m = spec.grid;
  size_ = 1;
  for (int a = 0; a < spec.dim; ++a) size_ *= static_cast<std::size_t>(m);
  spacing_ = spec.box / m;
  cell_volume_ = std::pow(spacing_, spec.dim);
  scale_ = std::pow(spec.box, 0.5 * spec.dim) / static_cast<double>(size_);

  axis_xi_.resize(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    const int k = j < m / 2 ? j : j - m;
    axis_xi_[static_cast<std::size_t>(j)] = 2.0 * std::numbers::pi * k / spec.box;
  }

  xi2_.resize(size_);
  wh_.resize(size_);
  wv_.resize(size_);
  for (std::size_t s = 0; s < size_; ++s) {
    double q = 0.0;
    for (int a = 0; a < spec.dim; ++a) {
      const double x = xi(s, a);
      q += x * x;
    }
    xi2_[s] = q;
    wh_[s] = spec.order == 1 ? 1.0 : 1.0 + q;
    wv_[s] = spec.order == 1 ? 1.0 + q : (1.0 + q) * (1.0 + q);
  }
  plan_ = std::make_unique<FftPlan>(spec.dim, m);
}

std::shared_ptr<const SpectralTriple> SpectralTriple::create(const TripleSpec& spec) {
  return std::shared_ptr<const SpectralTriple>(new SpectralTriple(spec));
}

std::array<int, 3> SpectralTriple::index(std::size_t node) const {
  std::array<int, 3> idx{0, 0, 0};
  const auto m = static_cast<std::size_t>(spec_.grid);
  for (int a = spec_.dim - 1; a >= 0; --a) {
    idx[static_cast<std::size_t>(a)] = static_cast<int>(node % m);
    node /= m;
  }
  return idx;
}

double SpectralTriple::coord(std::size_t node, int axis) const {
  const auto idx = index(node);
  return -0.5 * spec_.box + idx[static_cast<std::size_t>(axis)] * spacing_;
}

double SpectralTriple::xi(std::size_t mode, int axis) const {
  return axis_xi_[static_cast<std::size_t>(index(mode)[static_cast<std::size_t>(axis)])];
}

bool SpectralTriple::nyquist(std::size_t mode, int axis) const {
  return index(mode)[static_cast<std::size_t>(axis)] == spec_.grid / 2;
}

void SpectralTriple::check_shape(std::span<const double> u) const {
  if (u.size() != size_) {
    fail(ErrorKind::Shape, "grid function has " + std::to_string(u.size()) + " values, triple expects " +
                               std::to_string(size_));
  }
}

Spectrum SpectralTriple::forward(std::span<const double> u) const {
  check_shape(u);
  Spectrum in(size_), out(size_);
  for (std::size_t i = 0; i < size_; ++i) in[i] = u[i];
  plan_->forward(in.data(), out.data());
  for (auto& z : out) z *= scale_;
  return out;
}

Field SpectralTriple::inverse(std::span<const cplx> uhat) const {
  if (uhat.size() != size_) fail(ErrorKind::Shape, "spectrum size mismatch");
  Spectrum out(size_);
  plan_->backward(uhat.data(), out.data());
  Field u(size_);
  const double s = 1.0 / (scale_ * static_cast<double>(size_));
  for (std::size_t i = 0; i < size_; ++i) u[i] = out[i].real() * s;
  return u;
}

Spectrum SpectralTriple::derivative(std::span<const cplx> uhat, int axis) const {
  Spectrum d(size_);
  const auto m = static_cast<std::size_t>(spec_.grid);
  std::size_t stride = 1;
  for (int a = spec_.dim - 1; a > axis; --a) stride *= m;
  for (std::size_t s = 0; s < size_; ++s) {
    const std::size_t j = (s / stride) % m;
    if (j == m / 2) {
      d[s] = 0.0;
    } else {
      d[s] = cplx(0.0, axis_xi_[j]) * uhat[s];
    }
  }
  return d;
}

Field SpectralTriple::gradient(std::span<const double> u, int axis) const {
  const auto uhat = forward(u);
  return inverse(derivative(uhat, axis));
}

Field SpectralTriple::laplacian(std::span<const double> u) const {
  auto uhat = forward(u);
  for (std::size_t s = 0; s < size_; ++s) uhat[s] *= -xi2_[s];
  return inverse(uhat);
}

namespace {
double weighted_inner(std::span<const cplx> a, std::span<const cplx> b, std::span<const double> w) {
  double acc = 0.0;
  for (std::size_t s = 0; s < a.size(); ++s) acc += w[s] * (a[s].real() * b[s].real() + a[s].imag() * b[s].imag());
  return acc;
}
}  // namespace

double SpectralTriple::inner_h(std::span<const double> u, std::span<const double> v) const {
  return weighted_inner(forward(u), forward(v), wh_);
}

double SpectralTriple::inner_v(std::span<const double> u, std::span<const double> v) const {
  return weighted_inner(forward(u), forward(v), wv_);
}

double SpectralTriple::inner_l2(std::span<const double> u, std::span<const double> v) const {
  check_shape(u);
  check_shape(v);
  double acc = 0.0;
  for (std::size_t i = 0; i < size_; ++i) acc += u[i] * v[i];
  return acc * cell_volume_;
}

double SpectralTriple::norm_h(std::span<const double> u) const {
  const auto uhat = forward(u);
  return std::sqrt(weighted_inner(uhat, uhat, wh_));
}

double SpectralTriple::norm_v(std::span<const double> u) const {
  const auto uhat = forward(u);
  return std::sqrt(weighted_inner(uhat, uhat, wv_));
}

double SpectralTriple::norm_l2(std::span<const double> u) const { return std::sqrt(inner_l2(u, u)); }

double SpectralTriple::norm_vstar(std::span<const double> y) const {
  const auto yhat = forward(y);
  double acc = 0.0;
  for (std::size_t s = 0; s < size_; ++s) acc += wh_[s] * wh_[s] / wv_[s] * std::norm(yhat[s]);
  return std::sqrt(acc);
}

GridFunction make_grid_function(const TriplePtr& triple, Field values) {
  if (!triple) fail(ErrorKind::Shape, "null triple");
  triple->check_shape(values);
  for (double x : values) {
    if (!std::isfinite(x)) fail(ErrorKind::Numeric, "grid function has a non-finite entry");
  }
  return GridFunction{triple, std::move(values)};
}

namespace {
void check_same(const TriplePtr& triple, const GridFunction& f) {
  if (!triple) fail(ErrorKind::Shape, "null triple");
  if (f.triple && f.triple != triple && f.triple->spec().grid != triple->spec().grid) {
    fail(ErrorKind::Shape, "grid function belongs to a different triple");
  }
  triple->check_shape(f.values);
}
}  // namespace

GridFunction resolvent(const TriplePtr& triple, double lambda, const GridFunction& f) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorKind::Domain, "resolvent: lambda must be a finite nonnegative number");
  check_same(triple, f);
  auto fhat = triple->forward(f.values);
  const auto wh = triple->weight_h();
  const auto wv = triple->weight_v();
  for (std::size_t s = 0; s < fhat.size(); ++s) fhat[s] *= wh[s] / (lambda * wh[s] + wv[s]);
  return GridFunction{triple, triple->inverse(fhat)};
}

GridFunction smooth(const TriplePtr& triple, int n, const GridFunction& f) {
  if (n < 1) fail(ErrorKind::Domain, "smooth: n must be >= 1");
  auto v = resolvent(triple, static_cast<double>(n), f);
  for (auto& x : v.values) x *= n;
  return v;
}

Norms norms(const TriplePtr& triple, const GridFunction& f) {
  check_same(triple, f);
  return Norms{triple->norm_h(f.values), triple->norm_v(f.values)};
}

GridFunction resolvent_preimage(const TriplePtr& triple, double lambda, const GridFunction& v) {
  if (!(lambda >= 0.0)) fail(ErrorKind::Domain, "resolvent: lambda must be nonnegative");
  check_same(triple, v);
  auto vhat = triple->forward(v.values);
  const auto wh = triple->weight_h();
  const auto wv = triple->weight_v();
  for (std::size_t s = 0; s < vhat.size(); ++s) vhat[s] *= (lambda * wh[s] + wv[s]) / wh[s];
  return GridFunction{triple, triple->inverse(vhat)};
}

}  // namespace spdelab
