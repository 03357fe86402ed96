#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "core/rng.hpp"
#include "core/triple.hpp"

namespace spdelab {

struct StepContext {
  double t = 0.0;
  int step = 0;
  std::uint64_t path = 0;
  std::span<const double> w;  // cumulative Wiener values at t, one per channel
};

// Linear maps are supplied through their H-representatives: out = y with
// <u, Op v> = (u, y)_H for all u. Actions overwrite `out`.
using Action = std::function<void(const StepContext&, std::span<const double> v, std::span<double> out)>;
using ChannelAction =
    std::function<void(const StepContext&, int k, std::span<const double> v, std::span<double> out)>;
using Source = std::function<void(const StepContext&, std::span<double> out)>;
using ChannelSource = std::function<void(const StepContext&, int k, std::span<double> out)>;
using Bound = std::function<double(double t)>;

struct OperatorPair {
  Action A;
  ChannelAction B;
  int channels = 0;
  // Per-mode diagonal part P(ξ) <= 0 of A. With symbol_exact the action is
  // the Fourier multiplier itself and the implicit step is solved in spectral
  // space; otherwise it preconditions an iterative solve.
  std::vector<double> principal_symbol;
  bool symbol_exact = false;
  double delta = 1.0;
  double K_bound = 0.0;
  double K0_bound = 0.0;
  double K1_bound = 0.0;
};

struct LowerOrderSet {
  Action a_vh;          // 𝔞: V -> H
  Action a_star;        // 𝔞*: H -> V*
  Action c_hh;          // 𝔠: H -> H
  ChannelAction b_ell2; // 𝔟: H -> l2(H)
  Bound a_norm, a_star_norm, b_norm, c_norm;
};

struct ForcingSet {
  Source f_star;
  Source f;
  Source g;
  ChannelSource h;
};

struct EvolutionProblem {
  TriplePtr triple;
  OperatorPair ops;
  LowerOrderSet lower;
  ForcingSet forcing;
  Field u0;
};

struct Scheme {
  double solver_tolerance = 1e-10;
  int max_iterations = 400;
  double overflow_guard = 1e12;
  bool keep_states = true;
};

struct Trajectory {
  TriplePtr triple;
  double dt = 0.0;
  int channels = 0;
  std::uint64_t path = 0;
  std::vector<Field> states;     // u_0 .. u_N (only the last one unless keep_states)
  std::vector<double> dw;        // [n * channels + k]
  std::vector<double> times;
  std::vector<double> h_norm;
  std::vector<double> v_norm;
  bool diverged = false;
  int diverged_step = -1;
  long solver_iterations = 0;

  [[nodiscard]] int steps() const { return static_cast<int>(times.size()) - 1; }
  [[nodiscard]] std::vector<double> wiener_at(int n) const;
};

struct CoercivityResult {
  double delta_est = 0.0;
  bool certified = false;
  std::string worst_sample;
  double k_est = 0.0;   // max |A v|_{V*} / |v|_V
  double k0_est = 0.0;  // max (sum_k |B^k v|_H^2)^{1/2} / |v|_V
};

// min over sampled v and t of -(2<v, A_t v> + sum_k |B^k_t v|_H^2) / |v|_V^2.
CoercivityResult check_coercivity(const OperatorPair& ops, const SpectralTriple& triple, int samples,
                                  const std::vector<double>& times, std::uint64_t seed = 7);

// Semi-implicit Euler-Maruyama: (I - dt A_{t_n}) u_{n+1} = u_n + dt (lower(u_n) + f* + f + g)
// + sum_k (B^k u_n + 𝔟^k u_n + h^k) ΔW^k_n.
Trajectory solve(const EvolutionProblem& problem, const NoiseModel& noise, std::uint64_t path,
                 const Scheme& scheme = {});

enum class QuadraticVariation { Realized, Compensator };

struct ItoResidual {
  std::vector<double> series;
  double max_abs = 0.0;
};

ItoResidual ito_residual(const Trajectory& traj, const EvolutionProblem& problem,
                         QuadraticVariation qv = QuadraticVariation::Realized);

struct WeightProcess {
  std::vector<double> alpha;  // per step n = 0..N-1
  std::vector<double> phi;    // n = 0..N, phi_0 = 0
  std::vector<double> mu;
  double sup_bound = 0.0;
  bool hypotheses_met = true;

  static WeightProcess from_alpha(std::vector<double> alpha, double dt);
};

// α_t = max(ε, (16/δ)|𝔞|², (32/δ)|𝔞*|² + (2056 + 32K₀²/δ)|𝔟|² + 4|𝔠|, K₁²) + μ.
WeightProcess default_weights(const EvolutionProblem& problem, const NoiseModel& noise, double epsilon,
                              double mu = 0.0);
// Flags steps where α falls below the recipe thresholds.
bool weights_satisfy_recipe(const EvolutionProblem& problem, const NoiseModel& noise, const WeightProcess& w);

struct PathTerms {
  std::vector<double> lhs;
  std::vector<double> rhs;
  bool diverged = false;
};

struct EstimateReport {
  std::string estimate;
  std::vector<std::string> lhs_names;
  std::vector<std::string> rhs_names;
  std::vector<double> lhs_terms;
  std::vector<double> rhs_terms;
  double lhs = 0.0;
  double rhs = 0.0;
  double ratio = 0.0;
  double lhs_stderr = 0.0;
  double rhs_stderr = 0.0;
  std::size_t n_paths = 0;
  std::size_t n_diverged = 0;
  double dt = 0.0;
  std::vector<std::string> flags;
};

double safe_ratio(double lhs, double rhs);
EstimateReport reduce_report(std::string estimate, std::vector<std::string> lhs_names,
                             std::vector<std::string> rhs_names, const std::vector<PathTerms>& paths, double dt);

PathTerms energy_terms(const Trajectory& traj, const EvolutionProblem& problem, const WeightProcess& weights);
EstimateReport energy_report(const std::vector<Trajectory>& trajs, const EvolutionProblem& problem,
                             const WeightProcess& weights);

int worker_count();
// Runs fn(path) for path = 0..n-1 over the worker pool; results are stored by
// path index so any reduction over them is order-fixed.
void for_each_path(std::size_t n_paths, const std::function<void(std::size_t)>& fn, int workers = 0);

struct EnsembleOptions {
  std::size_t n_paths = 1;
  std::uint64_t first_path = 0;
  int workers = 0;
  Scheme scheme{};
};

// Solves each path and maps its trajectory to report terms.
std::vector<PathTerms> run_ensemble(const EvolutionProblem& problem, const NoiseModel& noise,
                                    const EnsembleOptions& options,
                                    const std::function<PathTerms(const Trajectory&)>& terms);

EstimateReport energy_ensemble(const EvolutionProblem& problem, const NoiseModel& noise, const WeightProcess& weights,
                               const EnsembleOptions& options);

struct StabilityTable {
  std::vector<double> distance;   // D_n
  std::vector<double> sup_term;
  std::vector<double> v_term;
  bool decreasing = false;
  double max_ratio = 0.0;         // max D_{n+1} / D_n
};

// D_n = Ê sup_t |u^n - u^0|_H^2 + Ê Σ |u^n - u^0|_V^2 dt on a shared noise record.
StabilityTable stability_experiment(const EvolutionProblem& base, const std::vector<EvolutionProblem>& sequence,
                                    const NoiseModel& noise, const EnsembleOptions& options);

}  // namespace spdelab
