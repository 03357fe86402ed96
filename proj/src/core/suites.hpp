#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/triple.hpp"

namespace spdelab {

struct Check {
  std::string name;
  double value = 0.0;
  double bound = 0.0;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;

  [[nodiscard]] bool passed() const;
  void add(std::string name, double value, double bound, bool passed, std::string detail = {});
};

struct ResolventSuiteOptions {
  std::vector<double> lambdas{1.0, 10.0, 1000.0};
  int random_fields = 100;
  int max_power = 20;          // convergence ladder λ = 2^0 .. 2^max_power
  double band_xi2 = 0.03;      // band-limited f keeps modes with |ξ|^2 <= band_xi2
  double tolerance = 1e-12;
  double convergence_target = 1e-6;
  std::uint64_t seed = 1;
};

SuiteReport resolvent_suite(const TriplePtr& triple, const ResolventSuiteOptions& options = {});

struct MorreySuiteOptions {
  double constant = 2.5;
  double rho0 = 0.5;
  double r = 2.5;
  int scaling_grid = 96;       // d = 3 grid for the 1/|x| scaling check
  double box = 2.0;
  int scaling_radii = 4;
  double scaling_tolerance = 0.10;
  std::vector<int> decompose_grids{32, 48};
  double decompose_p = 5.0;
  std::vector<double> n_hats{1.0, 2.0, 4.0, 8.0};
  double decompose_tolerance = 0.25;
};

SuiteReport morrey_suite(const MorreySuiteOptions& options = {});

struct ItoSuiteOptions {
  std::vector<double> dts{1e-2, 5e-3};
  double horizon = 1.0;
  double u0 = 1.0;
  int n_paths = 1000;
  std::uint64_t seed = 3;
  double halving_tolerance = 0.30;
};

// Ornstein-Uhlenbeck battery du = -u dt + dw on a one-mode triple, and the
// pure martingale u = w.
struct ItoSuiteResult {
  SuiteReport report;
  std::vector<double> ou_mean_max;      // per dt
  std::vector<double> ou_second_moment; // E u_T^2 per dt
  std::vector<double> martingale_ms;    // E R_T^2 per dt (compensated)
};

ItoSuiteResult ito_suite(const ItoSuiteOptions& options = {});

}  // namespace spdelab
