#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "core/evolution.hpp"
#include "core/morrey.hpp"

namespace spdelab {

// Drift replacing b^M pointwise at each step (e.g. a singularity riding on w_t).
using DynamicField = std::function<void(const StepContext&, std::vector<Field>& out)>;

struct SPDECoefficients {
  int dim = 1;
  int channels = 0;
  double rho0 = 1.0;
  std::vector<Field> a;      // [i * d + j]
  std::vector<Field> sigma;  // [i * K + k]
  AdmissibleField beta;      // d components
  AdmissibleField b;         // d components
  AdmissibleField c;         // 1 component
  AdmissibleField nu;        // K components
  // Derivative admissibles: Da [k*d*d + i*d + j], Dsigma [l*d*K + i*K + k],
  // Dnu [l*K + k], Dc [l].
  std::optional<AdmissibleField> Da, Dsigma, Dnu, Dc;
  DynamicField dynamic_drift;  // adds to b^M when set
  double dynamic_drift_hat = 0.0;

  void validate(const SpectralTriple& triple) const;
};

// a = a_scale I, everything else zero.
SPDECoefficients heat_coefficients(const SpectralTriple& triple, int channels, double a_scale = 1.0,
                                   double rho0 = 1.0);

// Time profiles multiply static spatial data; empty fields are zero.
struct SPDEForcing {
  std::vector<Field> frf;  // d components (divergence-form 𝔣)
  Field f;
  Field g;
  std::vector<Field> h;    // K components
  std::function<double(double)> frf_profile, f_profile, g_profile, h_profile;

  void validate(const SpectralTriple& triple, int channels) const;
  void scale(double factor);
};

struct SPDEProblem {
  SPDECoefficients coeffs;
  SPDEForcing forcing;
  Field u0;
};

struct AssemblyOptions {
  double delta = 0.5;
  double n0 = -1.0;          // < 0: fit on the ladder {0, 0.5, 1, 2, 4, ...}
  double theta = 0.1;        // smallness gate threshold
  bool enforce_gate = true;
  int coercivity_samples = 4;
  std::vector<double> check_times{0.0};
};

struct GateReport {
  std::vector<std::pair<std::string, double>> hats;
  double sum = 0.0;
  double theta = 0.0;
  bool passed = true;
  [[nodiscard]] std::string describe() const;
};

struct Assembly {
  EvolutionProblem problem;
  double n0 = 0.0;
  double c0 = 0.0;
  CoercivityResult coercivity;
  double required_margin = 0.0;
  GateReport gate;
  double ellipticity = 0.0;  // min eigenvalue of 2a - σσ^T over the grid
};

GateReport smallness_gate(const SPDECoefficients& coeffs, int order, double theta);
// min over nodes of the smallest eigenvalue of 2a - σσ^T, and max |a|.
std::pair<double, double> ellipticity(const SpectralTriple& triple, const SPDECoefficients& coeffs);

// H = L2, V = W^1_2.
Assembly assemble_L2(const TriplePtr& triple, const SPDEProblem& problem, const AssemblyOptions& options);
// H = W^1_2, V = W^2_2; requires beta = frf = 0 and derivative admissibles.
Assembly assemble_W12(const TriplePtr& triple, const SPDEProblem& problem, const AssemblyOptions& options);

// Spectral derivatives of every coefficient channel; singular parts differentiate
// into singular parts with certified hats, bounded parts into bounded parts.
void derive_derivatives(const SpectralTriple& triple, SPDECoefficients& coeffs, const BallSampler& sampler);

// Bump kernel of radius eps as node weights summing to one, periodized; requires h <= eps / 2.
Field mollifier_kernel(const SpectralTriple& triple, double eps);
Field convolve(const SpectralTriple& triple, const Field& kernel_hat_source, const Field& f);

struct MollifyOptions {
  double p = 2.0;              // data cutoff norm L_p
  const BallSampler* sampler = nullptr;  // re-certifies hats when set
};

struct MollifyReport {
  std::vector<std::pair<std::string, std::pair<double, double>>> hats;  // channel -> (before, after)
  bool hats_monotone = true;
};

SPDEProblem mollify_problem(const SpectralTriple& triple, const SPDEProblem& problem, double eps,
                            const MollifyOptions& options = {}, MollifyReport* report = nullptr);

// max over test functions and steps of the tested-identity defect / (1 + |φ|_{W^1_2}).
double weak_residual(const Trajectory& traj, const SPDEProblem& problem, const std::vector<Field>& tests);
std::vector<Field> default_test_set(const SpectralTriple& triple, int bumps = 4, std::uint64_t seed = 11);

struct GaussianBenchmark {
  int dim = 1;
  double drift_amplitude = 0.5;  // b = -amplitude (x + w) / |x + w|^2
  std::vector<double> times;
  std::vector<double> l2_sq, l2_expected, l2_rel_error;
  std::vector<double> grad_sq, grad_expected;
  double l2_power_fit = 0.0;
  double grad_power_fit = 0.0;
  double mass_outside = 0.0;
  double sharp_lhs = 0.0;
  double sharp_rhs = 0.0;
};

// u_t(x) = exp(-|x + w_t|^2 / (2t)) on the grid.
Field gaussian_field(const SpectralTriple& triple, double t, const std::vector<double>& w);
GaussianBenchmark gaussian_benchmark(int dim, double box, int grid, const std::vector<double>& times,
                                     std::uint64_t seed, double drift_amplitude = -1.0);
// Problem whose exact solution is the Gaussian above (a = I, σ = I, moving drift).
SPDEProblem gaussian_problem(const SpectralTriple& triple, double drift_amplitude, double t0);
// Trajectory of exact values at t0 + n dt along a Wiener path from `noise`.
Trajectory gaussian_trajectory(const TriplePtr& triple, const NoiseModel& noise, std::uint64_t path, double t0);

struct SpdeBars {
  double b = 0, beta = 0, c = 0, nu = 0, Da = 0, Dsigma = 0, Dnu = 0;
};
SpdeBars bars_at(const SPDECoefficients& coeffs, double t);

struct ReportWeights {
  double lambda = 1.0;  // multiplier in α (L2, L_p) or C (W^1_p), or N in the W^1_2 weight
  double mu = 0.0;
  double delta = 0.5;
};

// Per-step α for each estimate; length noise.steps.
std::vector<double> l2_alpha(const SPDECoefficients& coeffs, const NoiseModel& noise, const ReportWeights& w);
std::vector<double> lp_alpha(const SPDECoefficients& coeffs, const NoiseModel& noise, const ReportWeights& w);
std::vector<double> w12_alpha(const SPDECoefficients& coeffs, const NoiseModel& noise, const ReportWeights& w);
std::vector<double> w1p_lambda(const SPDECoefficients& coeffs, const NoiseModel& noise, const ReportWeights& w);

// Terms of the L2 estimate with weight φ = Σ α dt (trajectory from an o=1 solve).
PathTerms l2_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& weights);
// Terms of the W^1_2 estimate (trajectory from an o=2 solve).
PathTerms w12_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& weights);
PathTerms lp_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& weights, double p);
PathTerms w1p_terms(const Trajectory& traj, const SPDEProblem& problem, const WeightProcess& psi, double p);

const std::vector<std::string>& l2_lhs_names();
const std::vector<std::string>& l2_rhs_names();
const std::vector<std::string>& w12_lhs_names();
const std::vector<std::string>& w12_rhs_names();
const std::vector<std::string>& lp_lhs_names();
const std::vector<std::string>& lp_rhs_names();
const std::vector<std::string>& w1p_lhs_names();
const std::vector<std::string>& w1p_rhs_names();

double lp_norm(const SpectralTriple& triple, const Field& u, double p);

}  // namespace spdelab
