#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "core/triple.hpp"

namespace spdelab {

struct MorreyParams {
  double r = 2.0;
  double rho0 = 1.0;
  double lambda_exp = 1.0;
  double alpha = 1.0;  // admissibility order, 1 or 1/2

  void validate_admissibility(int dim) const;
};

enum class BallQuadrature { Indicator, Volume };

struct BallSampler {
  std::vector<std::size_t> centers;
  std::vector<double> radii;
  BallQuadrature quadrature = BallQuadrature::Indicator;

  // Centers on every `stride`-th node along each axis (plus `extra`), radii
  // geometric in [rmin, rmax] with `count` levels.
  static BallSampler strided(const SpectralTriple& triple, int stride, double rmin, double rmax, int count,
                             std::vector<std::size_t> extra = {});
  static std::vector<double> geometric(double lo, double hi, int count);
  void validate(const SpectralTriple& triple) const;
};

double unit_ball_volume(int dim);
std::size_t origin_node(const SpectralTriple& triple);
std::size_t nearest_node(const SpectralTriple& triple, const std::vector<double>& x);

// max over sampled (center, rho) of rho^lambda (mean_B |f|^r)^{1/r}, f a nonnegative field.
double morrey_norm(const SpectralTriple& triple, const Field& f, double r, double lambda_exp,
                   const BallSampler& sampler);
double morrey_norm(const SpectralTriple& triple, const Field& f, const MorreyParams& params,
                   const BallSampler& sampler);

// Ball means of |f|^r for every (center, radius); layout [center * radii + j].
std::vector<double> ball_means(const SpectralTriple& triple, const Field& f, double r, const BallSampler& sampler);

// Pointwise Euclidean magnitude of a vector field.
Field magnitude(const std::vector<Field>& components);

// Coefficient split f = f^M + f^B, piecewise constant in time over `times`.
struct AdmissibleField {
  int components = 1;
  std::vector<double> times{0.0};
  std::vector<std::vector<Field>> singular;  // [slice][component]
  std::vector<std::vector<Field>> bounded;   // [slice][component]
  double hat = 0.0;
  std::vector<double> bar;                   // per slice, sup |f^B|
  MorreyParams params;

  [[nodiscard]] std::size_t slices() const { return times.size(); }
  [[nodiscard]] std::size_t slice_at(double t) const;
  [[nodiscard]] double bar_at(double t) const { return bar.empty() ? 0.0 : bar[slice_at(t)]; }
  [[nodiscard]] bool empty() const { return singular.empty(); }
  [[nodiscard]] std::vector<Field> total(std::size_t slice) const;
  // Sum over slices of bar^{2 alpha} * dt_slice, the discrete ∫ f̄^{2α} dt.
  [[nodiscard]] double bar_integral(double horizon) const;
};

double sup_abs(const std::vector<Field>& components);

AdmissibleField zero_admissible(const SpectralTriple& triple, int components, const MorreyParams& params);
// Static field with the given split; hat certified by the sampler, bar = sup |f^B|.
AdmissibleField make_admissible(const SpectralTriple& triple, std::vector<Field> singular, std::vector<Field> bounded,
                                const MorreyParams& params, const BallSampler& sampler);
// hat = (max rho (mean |f^M|^{alpha r})^{1/r})^{1/alpha} over the sampler.
double certify_hat(const SpectralTriple& triple, const AdmissibleField& f, const BallSampler& sampler);

struct DecomposeResult {
  AdmissibleField field;
  std::vector<double> threshold;   // lambda(t) per slice
  double fitted_constant = 0.0;    // max rho^d mean|b^M|^d / N_hat^{d-p}
  double theoretical_bound = 0.0;  // 1/omega_d
};

// Threshold split b^M = b 1{|b| >= lambda(t)}, lambda(t) = N_hat (∫|b|^p)^{1/(p-d)}.
DecomposeResult decompose_lpq(const SpectralTriple& triple, const std::vector<double>& times,
                              const std::vector<std::vector<Field>>& b, double p, double n_hat,
                              const MorreyParams& params, const BallSampler& sampler);

struct LpsResult {
  double value = 0.0;  // d/p + 2/q
  bool critical = false;
  bool subcritical = false;
};
LpsResult check_lps(int dim, double p, double q);

struct WeakLdResult {
  double weak_norm = 0.0;       // M
  double fitted_constant = 0.0; // N in rho^r mean|b|^r <= N M^{r/d}
};
// lambda ladder defaults to a geometric ladder spanning the field's range.
WeakLdResult check_weak_ld(const SpectralTriple& triple, const Field& b_abs, const BallSampler& sampler, double r,
                           std::vector<double> levels = {});

struct EmbeddingReport {
  double constant = 0.0;
  std::vector<double> ratios;
};
// C = max over u of ∫|f|^2 u^2 / (f̂^2|Du|^2 + (rho0^{-2} f̂^2 + 2 f̄^2)|u|^2).
EmbeddingReport verify_embedding(const SpectralTriple& triple, const AdmissibleField& f, std::size_t slice,
                                 const std::vector<Field>& battery);

// N = max |(v, b^{Mi} D_i u)| / (b̂ (|Dv| + rho0^{-1}|v|) |Du|) over the battery pairs.
double fit_bdu_constant(const SpectralTriple& triple, const AdmissibleField& b, const std::vector<Field>& battery);

// Gaussian bumps with random centers and widths, deterministic in the seed.
std::vector<Field> bump_battery(const SpectralTriple& triple, int count, double min_width, double max_width,
                                double spread, std::uint64_t seed);

// Smooth radial cutoff: 1 on |x| <= R/2, 0 on |x| >= R.
Field smooth_cutoff(const SpectralTriple& triple, double radius);
// |x|^{-power}; the origin node carries the cell average.
Field power_field(const SpectralTriple& triple, double power);
// x / |x|^{power + 1} (magnitude |x|^{-power}); zero at the origin node.
std::vector<Field> radial_vector_field(const SpectralTriple& triple, double power);
// Average of |x|^{-power} over the cell [-h/2, h/2]^d.
double cell_average_power(int dim, double spacing, double power);

}  // namespace spdelab
