#include <gtest/gtest.h>

#include <cmath>

#include "core/error.hpp"
#include "core/rng.hpp"

using namespace spdelab;

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswers) {
  EXPECT_EQ(philox4x32({0, 0, 0, 0}, {0, 0}), (PhiloxCounter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(philox4x32({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}),
            (PhiloxCounter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(philox4x32({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}),
            (PhiloxCounter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(CounterNormal, PureFunctionOfKey) {
  EXPECT_EQ(counter_normal(5, 1, 2, 3), counter_normal(5, 1, 2, 3));
  EXPECT_NE(counter_normal(5, 1, 2, 3), counter_normal(5, 1, 2, 4));
  EXPECT_NE(counter_normal(5, 1, 2, 3), counter_normal(6, 1, 2, 3));
  const double u = counter_uniform(1, 2, 3, 4);
  EXPECT_GT(u, 0.0);
  EXPECT_LT(u, 1.0);
}

TEST(CounterNormal, Moments) {
  const int n = 200000;
  double s1 = 0.0, s2 = 0.0, s4 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = counter_normal(42, 0, 0, static_cast<std::uint64_t>(i));
    s1 += z;
    s2 += z * z;
    s4 += z * z * z * z;
  }
  EXPECT_NEAR(s1 / n, 0.0, 5.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 5.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(s4 / n, 3.0, 5.0 * std::sqrt(96.0 / n));
}

TEST(NoiseModel, IncrementVariance) {
  NoiseModel nm;
  nm.channels = 2;
  nm.dt = 0.01;
  nm.steps = 50;
  nm.seed = 9;
  double s2 = 0.0;
  std::size_t count = 0;
  for (std::uint64_t p = 0; p < 400; ++p) {
    for (double x : nm.increments(p)) {
      s2 += x * x;
      ++count;
    }
  }
  const double var = s2 / static_cast<double>(count);
  EXPECT_NEAR(var / nm.dt, 1.0, 5.0 * std::sqrt(2.0 / static_cast<double>(count)));
}

TEST(NoiseModel, CoarseStepsSumFineSteps) {
  NoiseModel fine;
  fine.channels = 3;
  fine.dt = 0.001;
  fine.steps = 80;
  fine.seed = 4;
  NoiseModel coarse = fine;
  coarse.dt = 0.004;
  coarse.steps = 20;
  coarse.substeps = 4;
  const auto f = fine.increments(7);
  const auto c = coarse.increments(7);
  for (int n = 0; n < coarse.steps; ++n) {
    for (int k = 0; k < 3; ++k) {
      double sum = 0.0;
      for (int j = 0; j < 4; ++j) sum += f[static_cast<std::size_t>((4 * n + j) * 3 + k)];
      EXPECT_NEAR(c[static_cast<std::size_t>(n * 3 + k)], sum, 1e-15);
    }
  }
}

TEST(NoiseModel, RejectsBadSpec) {
  NoiseModel nm;
  nm.dt = -1.0;
  EXPECT_THROW(nm.validate(), Error);
  nm.dt = 0.1;
  nm.steps = 0;
  EXPECT_THROW(nm.validate(), Error);
}
