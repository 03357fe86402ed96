#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "core/error.hpp"
#include "core/triple.hpp"

using namespace spdelab;

namespace {

constexpr double kPi = std::numbers::pi;

Field random_field(const SpectralTriple& tri, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n;
  Field f(tri.size());
  for (auto& x : f) x = n(gen);
  return f;
}

Field map_nodes(const SpectralTriple& tri, double (*fn)(double)) {
  Field f(tri.size());
  for (std::size_t q = 0; q < tri.size(); ++q) f[q] = fn(tri.coord(q, 0));
  return f;
}

double max_abs_diff(const Field& a, const Field& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Triple, GridLayout) {
  auto tri = SpectralTriple::create({2, 8, 4.0, 1});
  EXPECT_EQ(tri->size(), 64u);
  EXPECT_DOUBLE_EQ(tri->spacing(), 0.5);
  // origin sits at index M/2 on every axis, axis 0 slowest
  const std::size_t origin = 4 * 8 + 4;
  EXPECT_DOUBLE_EQ(tri->coord(origin, 0), 0.0);
  EXPECT_DOUBLE_EQ(tri->coord(origin, 1), 0.0);
  EXPECT_DOUBLE_EQ(tri->coord(0, 0), -2.0);
  EXPECT_DOUBLE_EQ(tri->coord(1, 1), -1.5);
}

TEST(Triple, RejectsBadSpec) {
  EXPECT_THROW(SpectralTriple::create({1, 7, 1.0, 1}), Error);
  EXPECT_THROW(SpectralTriple::create({4, 8, 1.0, 1}), Error);
  EXPECT_THROW(SpectralTriple::create({1, 8, -1.0, 1}), Error);
  EXPECT_THROW(SpectralTriple::create({1, 8, 1.0, 3}), Error);
}

TEST(Triple, ParsevalMatchesGridSum) {
  auto tri = SpectralTriple::create({2, 16, 3.0, 1});
  const Field f = random_field(*tri, 1);
  double grid = 0.0;
  for (double x : f) grid += x * x;
  grid *= tri->cell_volume();
  EXPECT_NEAR(tri->norm_l2(f) * tri->norm_l2(f), grid, 1e-12 * grid);
  EXPECT_NEAR(tri->norm_h(f), tri->norm_l2(f), 1e-12 * grid);
}

// |sin|^2 over [-pi, pi) is pi; the V-norm adds |cos|^2 = pi.
TEST(Triple, SineNormsByQuadrature) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  const Field s = map_nodes(*tri, [](double x) { return std::sin(x); });
  EXPECT_NEAR(tri->norm_h(s), std::sqrt(kPi), 1e-13);
  EXPECT_NEAR(tri->norm_v(s), std::sqrt(2 * kPi), 1e-13);

  auto tri2 = SpectralTriple::create({1, 32, 2 * kPi, 2});
  const Field s3 = map_nodes(*tri2, [](double x) { return std::sin(3 * x); });
  // H = W^1_2: (1 + 9) pi, V = W^2_2: (1 + 9)^2 pi
  EXPECT_NEAR(tri2->norm_h(s3), std::sqrt(10 * kPi), 1e-12);
  EXPECT_NEAR(tri2->norm_v(s3), std::sqrt(100 * kPi), 1e-11);
}

TEST(Triple, NormsZeroAndOrdered) {
  auto tri = SpectralTriple::create({2, 16, 5.0, 2});
  const auto zero = norms(tri, make_grid_function(tri, Field(tri->size(), 0.0)));
  EXPECT_EQ(zero.h_norm, 0.0);
  EXPECT_EQ(zero.v_norm, 0.0);
  for (unsigned s = 0; s < 10; ++s) {
    const auto n = norms(tri, make_grid_function(tri, random_field(*tri, s)));
    EXPECT_GE(n.v_norm, n.h_norm);
  }
}

TEST(Triple, DerivativesOfTrigonometricModes) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  const Field s = map_nodes(*tri, [](double x) { return std::sin(2 * x); });
  const Field c2 = map_nodes(*tri, [](double x) { return 2 * std::cos(2 * x); });
  const Field m4 = map_nodes(*tri, [](double x) { return -4 * std::sin(2 * x); });
  EXPECT_LT(max_abs_diff(tri->gradient(s, 0), c2), 1e-12);
  EXPECT_LT(max_abs_diff(tri->laplacian(s), m4), 1e-11);
}

TEST(Resolvent, ConstantModeHalves) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  const auto v = resolvent(tri, 1.0, make_grid_function(tri, Field(tri->size(), 1.0)));
  for (double x : v.values) EXPECT_NEAR(x, 0.5, 1e-15);
}

// For o = 1, R_lambda sin(kx) = sin(kx) / (lambda + 1 + k^2).
TEST(Resolvent, SingleModeSymbol) {
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  const Field s = map_nodes(*tri, [](double x) { return std::sin(3 * x); });
  for (double lambda : {0.0, 1.0, 10.0, 1000.0}) {
    const auto v = resolvent(tri, lambda, make_grid_function(tri, s));
    Field expect = s;
    for (auto& x : expect) x /= lambda + 10.0;
    EXPECT_LT(max_abs_diff(v.values, expect), 1e-15);
  }
}

// lambda = 0 solves v - v'' = f.
TEST(Resolvent, ZeroLambdaSolvesHelmholtz) {
  auto tri = SpectralTriple::create({1, 64, 2 * kPi, 1});
  const Field f = map_nodes(*tri, [](double x) { return std::exp(std::cos(x)); });
  const auto v = resolvent(tri, 0.0, make_grid_function(tri, f));
  Field lhs = v.values;
  const Field lap = tri->laplacian(v.values);
  for (std::size_t i = 0; i < lhs.size(); ++i) lhs[i] -= lap[i];
  EXPECT_LT(max_abs_diff(lhs, f), 1e-12);
}

TEST(Resolvent, Properties) {
  for (int order : {1, 2}) {
    auto tri = SpectralTriple::create({2, 16, 6.0, order});
    for (unsigned s = 0; s < 20; ++s) {
      const Field f = random_field(*tri, 2 * s), g = random_field(*tri, 2 * s + 1);
      for (double lambda : {1.0, 10.0, 1000.0}) {
        const Field rf = resolvent(tri, lambda, make_grid_function(tri, f)).values;
        const Field rg = resolvent(tri, lambda, make_grid_function(tri, g)).values;
        const double sh = tri->inner_h(rf, g), sh2 = tri->inner_h(f, rg);
        EXPECT_NEAR(sh, sh2, 1e-12 * std::max(1.0, std::abs(sh)));
        const double sv = tri->inner_v(rf, g), sv2 = tri->inner_v(f, rg);
        EXPECT_NEAR(sv, sv2, 1e-12 * std::max(1.0, std::abs(sv)));
        // (R f, u)_V = ((1 - lambda R) f, u)_H
        Field resid = f;
        for (std::size_t i = 0; i < resid.size(); ++i) resid[i] -= lambda * rf[i];
        const double a = tri->inner_v(rf, g), b = tri->inner_h(resid, g);
        EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, std::abs(a)));
        Field lrf = rf;
        for (auto& x : lrf) x *= lambda;
        EXPECT_LE(tri->norm_h(lrf), tri->norm_h(f) * (1 + 1e-12));
        EXPECT_LE(tri->norm_v(lrf), tri->norm_v(f) * (1 + 1e-12));
        EXPECT_LE(tri->norm_v(rf), 2 * tri->norm_h(f));
      }
    }
  }
}

TEST(Resolvent, PreimageRoundTrip) {
  auto tri = SpectralTriple::create({1, 32, 5.0, 2});
  const Field v = random_field(*tri, 3);
  const auto g = resolvent_preimage(tri, 7.0, make_grid_function(tri, v));
  const auto back = resolvent(tri, 7.0, g);
  EXPECT_LT(max_abs_diff(back.values, v), 1e-11);
}

TEST(Resolvent, SmoothingConvergesOnBandLimited) {
  auto tri = SpectralTriple::create({1, 64, 2 * kPi, 1});
  const Field f = map_nodes(*tri, [](double x) { return std::sin(x) + 0.5 * std::cos(2 * x); });
  double prev = 1e300;
  for (int j = 0; j <= 20; ++j) {
    const int n = 1 << j;
    const Field sf = smooth(tri, n, make_grid_function(tri, f)).values;
    Field diff = f;
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= sf[i];
    const double e = tri->norm_v(diff);
    EXPECT_LE(e, prev);
    prev = e;
  }
  // per-mode error (1 + k^2) / (n + 1 + k^2) with k = 2
  EXPECT_LT(prev, 5.0 / (1 << 20) * tri->norm_v(f));
}

TEST(Resolvent, FixedPointOnlyAtZero) {
  auto tri = SpectralTriple::create({1, 16, 2 * kPi, 1});
  const Field f = random_field(*tri, 8);
  const Field rf = smooth(tri, 4, make_grid_function(tri, f)).values;
  EXPECT_GT(max_abs_diff(rf, f), 1e-3);
  const Field z = smooth(tri, 4, make_grid_function(tri, Field(tri->size(), 0.0))).values;
  EXPECT_EQ(max_abs_diff(z, Field(tri->size(), 0.0)), 0.0);
}

TEST(Resolvent, RejectsNegativeLambdaAndShape) {
  auto tri = SpectralTriple::create({1, 16, 1.0, 1});
  EXPECT_THROW(resolvent(tri, -1.0, make_grid_function(tri, Field(16, 0.0))), Error);
  EXPECT_THROW(make_grid_function(tri, Field(15, 0.0)), Error);
}

TEST(Triple, DualNormOfH) {
  // |y|_{V*} for the H-pairing functional equals sqrt(sum |y^|^2 w_H^2 / w_V)
  auto tri = SpectralTriple::create({1, 32, 2 * kPi, 1});
  const Field s = map_nodes(*tri, [](double x) { return std::sin(2 * x); });
  EXPECT_NEAR(tri->norm_vstar(s), std::sqrt(kPi / 5.0), 1e-13);
}
