#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace spdelab {

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

// Philox4x32-10 block function.
PhiloxCounter philox4x32(PhiloxCounter ctr, PhiloxKey key);

// Standard normal addressed by (seed, a, b, c); a pure function of its arguments.
double counter_normal(std::uint64_t seed, std::uint64_t a, std::uint32_t b, std::uint64_t c);
// Uniform on (0,1) addressed the same way.
double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint32_t b, std::uint64_t c);

// Brownian increments on a uniform time grid. Each coarse step is the sum of
// `substeps` fine increments, so models sharing a seed and fine step are
// pathwise consistent under refinement.
struct NoiseModel {
  int channels = 1;          // K
  double dt = 0.01;
  int steps = 100;
  std::uint64_t seed = 1;
  int substeps = 1;

  [[nodiscard]] double horizon() const { return dt * steps; }
  [[nodiscard]] double fine_dt() const { return dt / substeps; }
  // Increments for one path, layout [step * channels + k].
  [[nodiscard]] std::vector<double> increments(std::uint64_t path) const;
  void validate() const;
};

}  // namespace spdelab
