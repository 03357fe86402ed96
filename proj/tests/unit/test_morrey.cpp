#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "core/error.hpp"
#include "core/morrey.hpp"

using namespace spdelab;

namespace {

constexpr double kPi = std::numbers::pi;

BallSampler origin_sampler(const SpectralTriple& tri, std::vector<double> radii) {
  BallSampler s;
  s.centers = {origin_node(tri)};
  s.radii = std::move(radii);
  return s;
}

}  // namespace

TEST(Morrey, UnitBallVolume) {
  EXPECT_NEAR(unit_ball_volume(1), 2.0, 1e-15);
  EXPECT_NEAR(unit_ball_volume(2), kPi, 1e-15);
  EXPECT_NEAR(unit_ball_volume(3), 4.0 * kPi / 3.0, 1e-14);
}

TEST(Morrey, ConstantFieldNormIsRho0TimesConstant) {
  auto tri = SpectralTriple::create({2, 32, 4.0, 1});
  const double rho0 = 0.75;
  auto s = BallSampler::strided(*tri, 4, 2 * tri->spacing(), rho0, 5);
  const Field f(tri->size(), 2.5);
  EXPECT_NEAR(morrey_norm(*tri, f, 2.5, 1.0, s), rho0 * 2.5, 1e-13);
}

TEST(Morrey, HomogeneousAndMonotoneInBalls) {
  auto tri = SpectralTriple::create({3, 24, 3.0, 1});
  const Field f = power_field(*tri, 1.0);
  auto small = BallSampler::strided(*tri, 4, 2 * tri->spacing(), 0.6, 3);
  auto big = small;
  big.centers.push_back(origin_node(*tri));
  const double a = morrey_norm(*tri, f, 2.5, 1.0, small);
  const double b = morrey_norm(*tri, f, 2.5, 1.0, big);
  EXPECT_GE(b, a);
  Field g = f;
  for (auto& x : g) x *= 3.0;
  EXPECT_NEAR(morrey_norm(*tri, g, 2.5, 1.0, big), 3.0 * b, 1e-12 * b);
}

// rho (mean_{B_rho(0)} |x|^{-2})^{1/2} = sqrt(3) for every rho.
TEST(Morrey, InverseDistanceScaleFree) {
  auto tri = SpectralTriple::create({3, 64, 2.0, 1});
  const Field f = power_field(*tri, 1.0);
  std::vector<double> values;
  for (double rho : {0.15, 0.3, 0.6}) {
    values.push_back(morrey_norm(*tri, f, 2.0, 1.0, origin_sampler(*tri, {rho})));
  }
  for (double v : values) EXPECT_NEAR(v, std::sqrt(3.0), 0.1 * std::sqrt(3.0));
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  EXPECT_LT((*hi - *lo) / *lo, 0.1);
}

// Midpoint quadrature of |x|^{-1} over the unit cube; exact value 3 ln(2 + sqrt 3) - pi/2.
TEST(Morrey, CellAveragePower) {
  const double exact = 3.0 * std::log(2.0 + std::sqrt(3.0)) - kPi / 2.0;
  EXPECT_NEAR(cell_average_power(3, 1.0, 1.0), exact, 1e-3);
  const int n = 80;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const double x = (i + 0.5) / n - 0.5, y = (j + 0.5) / n - 0.5, z = (k + 0.5) / n - 0.5;
        sum += 1.0 / std::sqrt(x * x + y * y + z * z);
      }
    }
  }
  EXPECT_NEAR(sum / (n * n * n), exact, 2e-2);
  // scaling: the average over a cell of side h is h^{-power} times the unit value
  EXPECT_NEAR(cell_average_power(3, 0.25, 1.0), 4.0 * cell_average_power(3, 1.0, 1.0), 1e-9);
}

TEST(Morrey, AdmissibleSplitAndHats) {
  auto tri = SpectralTriple::create({3, 24, 3.0, 1});
  MorreyParams mp;
  mp.r = 2.5;
  auto s = BallSampler::strided(*tri, 4, 2 * tri->spacing(), 1.0, 4, {origin_node(*tri)});
  auto rad = radial_vector_field(*tri, 1.0);
  std::vector<Field> bounded(3, Field(tri->size(), 0.5));
  const auto f = make_admissible(*tri, rad, bounded, mp, s);
  EXPECT_GT(f.hat, 0.0);
  EXPECT_TRUE(std::isfinite(f.hat));
  EXPECT_NEAR(f.bar[0], 0.5 * std::sqrt(3.0), 1e-15);  // sup of the pointwise magnitude
  const auto tot = f.total(0);
  for (int a = 0; a < 3; ++a) {
    for (std::size_t q = 0; q < tri->size(); ++q) EXPECT_EQ(tot[a][q], rad[a][q] + 0.5);
  }
  const auto zero = make_admissible(*tri, std::vector<Field>(3, Field(tri->size(), 0.0)), bounded, mp, s);
  EXPECT_EQ(zero.hat, 0.0);

  // 1/|x|^2 is 1/2-admissible
  MorreyParams half = mp;
  half.alpha = 0.5;
  const auto c = make_admissible(*tri, {power_field(*tri, 2.0)}, {Field(tri->size(), 0.0)}, half, s);
  EXPECT_GT(c.hat, 0.0);
  EXPECT_TRUE(std::isfinite(c.hat));
}

TEST(Morrey, DecomposeProperties) {
  auto tri = SpectralTriple::create({3, 24, 3.0, 1});
  MorreyParams mp;
  mp.r = 2.5;
  auto s = BallSampler::strided(*tri, 4, 2 * tri->spacing(), 1.0, 3, {origin_node(*tri)});
  Field b = power_field(*tri, 0.5);
  const Field cut = smooth_cutoff(*tri, 1.2);
  for (std::size_t q = 0; q < b.size(); ++q) b[q] *= cut[q];

  double prev = 1e300;
  for (double n_hat : {1.0, 2.0, 4.0, 8.0}) {
    const auto r = decompose_lpq(*tri, {0.0}, {{b}}, 5.0, n_hat, mp, s);
    const auto& sing = r.field.singular[0][0];
    const auto& bnd = r.field.bounded[0][0];
    for (std::size_t q = 0; q < b.size(); ++q) EXPECT_EQ(sing[q] + bnd[q], b[q]);
    EXPECT_LE(r.field.hat, prev);
    EXPECT_EQ(r.field.bar[0], r.threshold[0]);
    prev = r.field.hat;
  }
  // a huge threshold leaves nothing singular
  const auto r = decompose_lpq(*tri, {0.0}, {{Field(tri->size(), 0.1)}}, 5.0, 1e6, mp, s);
  EXPECT_EQ(r.field.hat, 0.0);
  EXPECT_THROW(decompose_lpq(*tri, {0.0}, {{b}}, 3.0, 1.0, mp, s), Error);
}

TEST(Morrey, LpsClassification) {
  EXPECT_TRUE(check_lps(3, 3.0, std::numeric_limits<double>::infinity()).critical);
  EXPECT_TRUE(check_lps(3, std::numeric_limits<double>::infinity(), 2.0).critical);
  const auto r = check_lps(3, 4.0, 4.0);
  EXPECT_FALSE(r.critical);
  EXPECT_NEAR(r.value, 1.25, 1e-15);
  EXPECT_TRUE(check_lps(3, 8.0, 8.0).subcritical);
}

TEST(Morrey, WeakLd) {
  auto tri = SpectralTriple::create({3, 32, 4.0, 1});
  auto s = origin_sampler(*tri, {1.0});
  EXPECT_EQ(check_weak_ld(*tri, Field(tri->size(), 0.0), s, 2.5).weak_norm, 0.0);
  // |{|x| < 1/lambda}| lambda^3 = 4 pi / 3 for lambda >= 1
  const Field f = power_field(*tri, 1.0);
  const auto r = check_weak_ld(*tri, f, s, 2.5, {1.5, 2.0, 3.0});
  EXPECT_NEAR(r.weak_norm, 4.0 * kPi / 3.0, 0.25 * 4.0 * kPi / 3.0);
  EXPECT_GT(r.fitted_constant, 0.0);
}

TEST(Morrey, EmbeddingConstants) {
  auto tri = SpectralTriple::create({3, 16, 4.0, 1});
  MorreyParams mp;
  mp.r = 2.5;
  auto s = BallSampler::strided(*tri, 4, 2 * tri->spacing(), 1.0, 3);
  const auto battery = bump_battery(*tri, 6, 0.3, 0.8, 1.0, 2);
  const auto zero = zero_admissible(*tri, 1, mp);
  EXPECT_EQ(verify_embedding(*tri, zero, 0, battery).constant, 0.0);
  // f = c: c^2 |u|^2 <= C (2 c^2) |u|^2 with C = 1/2
  const auto c = make_admissible(*tri, {Field(tri->size(), 0.0)}, {Field(tri->size(), 1.7)}, mp, s);
  EXPECT_NEAR(verify_embedding(*tri, c, 0, battery).constant, 0.5, 1e-12);
}

TEST(Morrey, SamplerValidation) {
  auto tri = SpectralTriple::create({2, 16, 4.0, 1});
  auto s = origin_sampler(*tri, {0.5 * tri->spacing()});
  EXPECT_THROW(s.validate(*tri), Error);
  s.radii = {2.5};
  EXPECT_THROW(s.validate(*tri), Error);
  BallSampler empty;
  EXPECT_THROW(empty.validate(*tri), Error);
  EXPECT_THROW(morrey_norm(*tri, Field(tri->size(), 1.0), 2.5, 1.0, empty), Error);
  MorreyParams mp;
  mp.r = 2.0;
  EXPECT_THROW(mp.validate_admissibility(3), Error);
  mp.r = 2.5;
  EXPECT_NO_THROW(mp.validate_admissibility(3));
  mp.rho0 = 1.5;
  EXPECT_THROW(mp.validate_admissibility(3), Error);
}
