#include "core/rng.hpp"

#include <cmath>
#include <numbers>

#include "core/error.hpp"

namespace spdelab {

namespace {
constexpr std::uint32_t kM0 = 0xD2511F53u;
constexpr std::uint32_t kM1 = 0xCD9E8D57u;
constexpr std::uint32_t kW0 = 0x9E3779B9u;
constexpr std::uint32_t kW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline double to_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t x = (static_cast<std::uint64_t>(hi) << 32) | lo;
  return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
}

PhiloxCounter block(std::uint64_t seed, std::uint64_t a, std::uint32_t b, std::uint64_t c) {
  const PhiloxCounter ctr{static_cast<std::uint32_t>(a) ^ static_cast<std::uint32_t>(a >> 32) * 0x9E3779B9u, b,
                          static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
  const PhiloxKey key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  return philox4x32(ctr, key);
}
}  // namespace

PhiloxCounter philox4x32(PhiloxCounter ctr, PhiloxKey key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kM0, ctr[0], hi0, lo0);
    mulhilo(kM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint32_t b, std::uint64_t c) {
  const auto r = block(seed, a, b, c);
  return to_unit(r[0], r[1]);
}

double counter_normal(std::uint64_t seed, std::uint64_t a, std::uint32_t b, std::uint64_t c) {
  const auto r = block(seed, a, b, c);
  const double u1 = to_unit(r[0], r[1]);
  const double u2 = to_unit(r[2], r[3]);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void NoiseModel::validate() const {
  if (channels < 0) fail(ErrorKind::Config, "noise: channels must be >= 0");
  if (!(dt > 0.0) || !std::isfinite(dt)) fail(ErrorKind::Config, "noise: dt must be positive");
  if (steps < 1) fail(ErrorKind::Config, "noise: steps must be >= 1");
  if (substeps < 1) fail(ErrorKind::Config, "noise: substeps must be >= 1");
}

std::vector<double> NoiseModel::increments(std::uint64_t path) const {
  validate();
  const auto k_count = static_cast<std::size_t>(channels);
  std::vector<double> dw(static_cast<std::size_t>(steps) * k_count, 0.0);
  const double scale = std::sqrt(fine_dt());
  for (int n = 0; n < steps; ++n) {
    for (std::size_t k = 0; k < k_count; ++k) {
      double acc = 0.0;
      for (int s = 0; s < substeps; ++s) {
        const auto fine = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(substeps) + static_cast<std::uint64_t>(s);
        acc += counter_normal(seed, fine, static_cast<std::uint32_t>(k), path);
      }
      dw[static_cast<std::size_t>(n) * k_count + k] = scale * acc;
    }
  }
  return dw;
}

}  // namespace spdelab
