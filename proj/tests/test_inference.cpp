/**
 * @file test_inference.cpp
 * @brief Unit tests for the RNG streams, likelihood, reflected proposals, and
 *        the three MCMC kernels against analytic and Monte Carlo oracles.
 */

#include "ductile/inference.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ductile;
using namespace ductile::inference;

namespace {

PriorBox box1d(double lo, double hi) {
  PriorBox p;
  p.lo = Eigen::VectorXd::Constant(1, lo);
  p.hi = Eigen::VectorXd::Constant(1, hi);
  return p;
}

PriorBox box2d(double lo, double hi) {
  PriorBox p;
  p.lo = Eigen::VectorXd::Constant(2, lo);
  p.hi = Eigen::VectorXd::Constant(2, hi);
  return p;
}

Eigen::VectorXd vec1(double v) { return Eigen::VectorXd::Constant(1, v); }

}  // namespace

// ============================================================================
// RNG
// ============================================================================

TEST(Rng, SplitmixKnownVector) {
  std::uint64_t s = 0;
  EXPECT_EQ(rng::splitmix64(s), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(rng::splitmix64(s), 0x6E789E6AA1B965F4ULL);
}

TEST(Rng, DeriveSeedSeparatesStreams) {
  const std::uint64_t root = 123456789ULL;
  EXPECT_NE(rng::derive_seed(root, 1, 0), rng::derive_seed(root, 1, 1));
  EXPECT_NE(rng::derive_seed(root, 1, 0), rng::derive_seed(root, 2, 0));
  EXPECT_EQ(rng::derive_seed(root, 3, 2), rng::derive_seed(root, 3, 2));
}

TEST(Rng, UniformRangeAndMean) {
  rng::Rng r(7);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.01);
}

TEST(Rng, NormalMoments) {
  rng::Rng r(11);
  const int n = 200000;
  double s1 = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s1 += z;
    s2 += z * z;
  }
  const double mean = s1 / n;
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(s2 / n - mean * mean, 1.0, 0.02);
}

TEST(Rng, DeterministicStream) {
  rng::Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    ASSERT_EQ(a.raw(), b.raw());
  }
}

// ============================================================================
// Likelihood
// ============================================================================

TEST(LogLikelihood, ExactMatchGivesNormalizationOnly) {
  Observation obs;
  obs.m = Eigen::VectorXd::LinSpaced(7, 0.0, 3.0);
  obs.sigma2 = 1e-3;
  const double expect =
      -0.5 * 7.0 * std::log(2.0 * M_PI * obs.sigma2);
  EXPECT_NEAR(log_likelihood(obs, obs.m), expect, 1e-12);
}

TEST(LogLikelihood, SingleResidualExponentTerm) {
  Observation obs;
  obs.m = vec1(1.0);
  obs.sigma2 = 1e-3;
  const double ll = log_likelihood(obs, vec1(1.1));
  const double norm = -0.5 * std::log(2.0 * M_PI * obs.sigma2);
  EXPECT_NEAR(ll - norm, -5.0, 1e-12);  // 0.01 / (2e-3)
}

TEST(LogLikelihood, NanRejected) {
  Observation obs;
  obs.m = vec1(1.0);
  EXPECT_EQ(log_likelihood(obs, vec1(std::nan(""))), kNegInf);
}

TEST(LogLikelihood, LengthMismatchThrows) {
  Observation obs;
  obs.m = Eigen::VectorXd::Zero(3);
  EXPECT_THROW(log_likelihood(obs, Eigen::VectorXd::Zero(2)),
               std::runtime_error);
}

TEST(LogLikelihood, MaximizedAtObservation) {
  Observation obs;
  obs.m = Eigen::VectorXd::LinSpaced(10, -1.0, 2.5);
  const double at_obs = log_likelihood(obs, obs.m);
  rng::Rng r(3);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd sim = obs.m;
    for (int i = 0; i < sim.size(); ++i) sim[i] += 0.1 * r.normal();
    EXPECT_LT(log_likelihood(obs, sim), at_obs);
  }
}

TEST(PadResponse, ShortPaddedWithTerminalValue) {
  Eigen::VectorXd sim(3);
  sim << 1.0, 2.0, 1.5;
  const Eigen::VectorXd padded = pad_response(sim, 5);
  ASSERT_EQ(padded.size(), 5);
  EXPECT_EQ(padded[2], 1.5);
  EXPECT_EQ(padded[3], 1.5);
  EXPECT_EQ(padded[4], 1.5);
}

TEST(PadResponse, LongTruncatedEmptyZeroed) {
  Eigen::VectorXd sim(4);
  sim << 1.0, 2.0, 3.0, 4.0;
  const Eigen::VectorXd t = pad_response(sim, 2);
  ASSERT_EQ(t.size(), 2);
  EXPECT_EQ(t[1], 2.0);
  const Eigen::VectorXd z = pad_response(Eigen::VectorXd(), 3);
  EXPECT_EQ(z.norm(), 0.0);
}

// ============================================================================
// Reflected proposal
// ============================================================================

TEST(Reflection, InteriorPointsUnchanged) {
  EXPECT_DOUBLE_EQ(fold(0.37, 0.0, 1.0), 0.37);
  EXPECT_DOUBLE_EQ(fold(0.0, 0.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(fold(1.0, 0.0, 1.0), 1.0);
}

TEST(Reflection, LowerBoundNegativeStep) {
  // chi at the lower bound, step s < 0: chi* = min + |s|.
  const double lo = 2.0, hi = 5.0, s = -0.4;
  EXPECT_DOUBLE_EQ(fold(lo + s, lo, hi), lo + std::abs(s));
}

TEST(Reflection, UpperBoundOvershoot) {
  EXPECT_DOUBLE_EQ(fold(5.3, 2.0, 5.0), 4.7);
}

TEST(Reflection, MultipleFolds) {
  // Overshoot by more than the box width still lands inside: walking 7.3 up
  // from 2 in [2,5] bounces at 5 and at 2, ending at 3.3.
  const double v = fold(2.0 + 7.3, 2.0, 5.0);
  EXPECT_NEAR(v, 3.3, 1e-12);
}

TEST(ProposeReflected, ZeroScaleIdentity) {
  PriorBox p = box2d(-1.0, 1.0);
  rng::Rng r(5);
  Eigen::VectorXd x(2);
  x << 0.2, -0.7;
  const Eigen::VectorXd y =
      propose_reflected(x, Eigen::VectorXd::Zero(2), p, r);
  EXPECT_EQ(y, x);
}

TEST(ProposeReflected, FuzzAlwaysInsideBox) {
  PriorBox p = box2d(-0.5, 2.0);
  rng::Rng r(17);
  Eigen::VectorXd x(2);
  x << 1.0, 0.0;
  const Eigen::VectorXd scale = Eigen::VectorXd::Constant(2, 4.0);  // > width
  for (int i = 0; i < 1000000; ++i) {
    x = propose_reflected(x, scale, p, r);
    ASSERT_TRUE(p.contains(x)) << "escaped at iteration " << i;
  }
}

// ============================================================================
// Metropolis-Hastings
// ============================================================================

TEST(MhChain, FlatTargetAcceptsEverything) {
  PriorBox p = box1d(0.0, 1.0);
  auto flat = [](const Eigen::VectorXd&) { return 0.0; };
  Chain c = mh_chain(flat, p, vec1(0.3), 2000, 99);
  EXPECT_DOUBLE_EQ(c.acceptance_rate(), 1.0);
  for (int j = 0; j < c.length(); ++j) {
    EXPECT_TRUE(p.contains(c.samples.row(j).transpose()));
  }
}

TEST(MhChain, StandardNormalMoments) {
  PriorBox p = box1d(-10.0, 10.0);
  p.init = vec1(0.0);
  auto target = [](const Eigen::VectorXd& x) { return -0.5 * x[0] * x[0]; };
  Chain c = mh_chain(target, p, vec1(2.4), 50000, 2024);
  const double mean = c.samples.col(0).mean();
  const double var =
      (c.samples.col(0).array() - mean).square().sum() / (c.length() - 1);
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(var, 1.0, 0.1);
}

TEST(MhChain, DiscreteThreeStateDetailedBalance) {
  // Piecewise-constant density over [0,3): cell probabilities (0.2, 0.3, 0.5).
  // The empirical cell occupancy must match within total variation 0.02.
  const double probs[3] = {0.2, 0.3, 0.5};
  PriorBox p = box1d(0.0, 3.0);
  p.init = vec1(1.5);
  auto target = [&probs](const Eigen::VectorXd& x) {
    const int cell = std::min(2, static_cast<int>(std::floor(x[0])));
    return std::log(probs[cell]);
  };
  Chain c = mh_chain(target, p, vec1(1.2), 100000, 314159);
  double count[3] = {0, 0, 0};
  for (int j = 0; j < c.length(); ++j) {
    count[std::min(2, static_cast<int>(std::floor(c.samples(j, 0))))] += 1.0;
  }
  double tv = 0;
  for (int i = 0; i < 3; ++i) {
    tv += std::abs(count[i] / c.length() - probs[i]);
  }
  EXPECT_LE(0.5 * tv, 0.02);
}

TEST(MhChain, RejectionRepeatsPreviousSample) {
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.5);
  // Only a tiny neighborhood of the start has support: every proposal lands
  // outside it and must be rejected.
  auto spike = [](const Eigen::VectorXd& x) {
    return std::abs(x[0] - 0.5) < 1e-12 ? 0.0 : kNegInf;
  };
  Chain c = mh_chain(spike, p, vec1(0.2), 500, 8);
  EXPECT_DOUBLE_EQ(c.acceptance_rate(), 0.0);
  for (int j = 0; j < c.length(); ++j) {
    EXPECT_EQ(c.samples(j, 0), 0.5);
    EXPECT_EQ(c.log_post[j], 0.0);
  }
}

TEST(MhChain, BitExactReproducibility) {
  PriorBox p = box2d(-3.0, 3.0);
  auto target = [](const Eigen::VectorXd& x) { return -x.squaredNorm(); };
  const Eigen::VectorXd scale = Eigen::VectorXd::Constant(2, 0.8);
  Chain a = mh_chain(target, p, scale, 3000, 777);
  Chain b = mh_chain(target, p, scale, 3000, 777);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.log_post, b.log_post);
  Chain d = mh_chain(target, p, scale, 3000, 778);
  EXPECT_NE(a.samples, d.samples);
}

TEST(MhChain, EvaluatorExceptionRejected) {
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.2);
  auto moody = [](const Eigen::VectorXd& x) -> double {
    if (x[0] > 0.6) throw std::runtime_error("solver blew up");
    return 0.0;
  };
  Chain c = mh_chain(moody, p, vec1(0.3), 5000, 55);
  EXPECT_GT(c.failed_evals, 0);
  for (int j = 0; j < c.length(); ++j) {
    EXPECT_LE(c.samples(j, 0), 0.6);
  }
}

// ============================================================================
// DRAM
// ============================================================================

TEST(DramChain, DefaultsMatchConvention) {
  DramOptions opt;
  EXPECT_DOUBLE_EQ(opt.gamma2, 0.2);  // = 1/5
}

TEST(DramChain, FirstStageAcceptSkipsSecond) {
  PriorBox p = box1d(0.0, 1.0);
  auto flat = [](const Eigen::VectorXd&) { return 0.0; };
  Chain c = dram_chain(flat, p, 2000, 31);
  EXPECT_DOUBLE_EQ(c.acceptance_rate(), 1.0);
  for (int j = 0; j < c.length(); ++j) {
    EXPECT_EQ(c.stage[j], 1);  // the narrowed kernel is never consulted
  }
}

TEST(DramChain, StandardNormalMoments) {
  PriorBox p = box1d(-10.0, 10.0);
  p.init = vec1(0.0);
  auto target = [](const Eigen::VectorXd& x) { return -0.5 * x[0] * x[0]; };
  DramOptions opt;
  opt.scale0 = vec1(2.4);
  Chain c = dram_chain(target, p, 50000, 4096, opt);
  const double mean = c.samples.col(0).mean();
  const double var =
      (c.samples.col(0).array() - mean).square().sum() / (c.length() - 1);
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(var, 1.0, 0.1);
}

TEST(DramChain, SecondStageRescuesRejections) {
  // Narrow target + wide initial kernel: the first stage almost always
  // misses, the shrunken second stage keeps the chain moving.
  PriorBox p = box1d(-5.0, 5.0);
  p.init = vec1(0.0);
  auto target = [](const Eigen::VectorXd& x) {
    return -0.5 * x[0] * x[0] / (0.01 * 0.01);
  };
  DramOptions opt;
  opt.scale0 = vec1(1.0);
  opt.gamma2 = 0.01;
  opt.adapt_interval = 1000000;  // keep the kernel fixed for the test
  Chain c = dram_chain(target, p, 4000, 12, opt);
  int second = 0;
  for (int j = 1; j < c.length(); ++j) second += (c.stage[j] == 2);
  EXPECT_GT(second, 100);
}

TEST(DramChain, BeatsMhAcceptanceOnCorrelatedTarget) {
  // rho = 0.9 bivariate normal; matched initial scales.
  Eigen::Matrix2d prec;
  const double rho = 0.9;
  const double det = 1.0 - rho * rho;
  prec << 1.0 / det, -rho / det, -rho / det, 1.0 / det;
  auto target = [prec](const Eigen::VectorXd& x) {
    return -0.5 * x.dot(prec * x);
  };
  PriorBox p = box2d(-8.0, 8.0);
  p.init = Eigen::VectorXd::Zero(2);
  const Eigen::VectorXd scale = Eigen::VectorXd::Constant(2, 1.0);
  for (std::uint64_t seed : {101, 202, 303, 404, 505}) {
    Chain mh = mh_chain(target, p, scale, 8000, seed);
    DramOptions opt;
    opt.scale0 = scale;
    Chain dr = dram_chain(target, p, 8000, seed, opt);
    EXPECT_GT(dr.acceptance_rate(), mh.acceptance_rate()) << "seed " << seed;
  }
}

TEST(DramChain, DegenerateTargetStillCompletes) {
  // Every proposal rejected: the sample covariance is singular and the ridge
  // has to keep the adapted kernel SPD.
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.5);
  auto spike = [](const Eigen::VectorXd& x) {
    return std::abs(x[0] - 0.5) < 1e-12 ? 0.0 : kNegInf;
  };
  DramOptions opt;
  opt.adapt_interval = 50;
  Chain c = dram_chain(spike, p, 1000, 77, opt);
  EXPECT_DOUBLE_EQ(c.acceptance_rate(), 0.0);
  EXPECT_EQ(c.samples(999, 0), 0.5);
}

TEST(DramChain, BitExactReproducibility) {
  PriorBox p = box2d(-2.0, 2.0);
  auto target = [](const Eigen::VectorXd& x) { return -x.squaredNorm(); };
  Chain a = dram_chain(target, p, 2000, 1234);
  Chain b = dram_chain(target, p, 2000, 1234);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.log_post, b.log_post);
}

// ============================================================================
// EnKF-MCMC
// ============================================================================

namespace {

ForwardFn identity_model() {
  return [](const Eigen::VectorXd& chi) {
    return ForwardResponse{chi, false};
  };
}

}  // namespace

TEST(EnkfChain, ScalarGainWhiteBox) {
  // Scalar linear model f(chi) = chi: replicate the RNG stream and verify the
  // first proposal is chi + K (m - chi + s) with K = v / (v + sigma2).
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.2);
  Observation obs;
  obs.m = vec1(0.7);
  obs.sigma2 = 1e-3;
  const std::uint64_t seed = 2718;
  Chain c = enkf_chain(p, identity_model(), obs, 2, 2, seed);

  rng::Rng r(seed);
  const double u1 = r.uniform(0.0, 1.0);  // second ensemble member
  const double s = std::sqrt(obs.sigma2) * r.normal();
  const double acc_u = r.uniform();
  const double x0 = 0.2;
  const double mean = 0.5 * (x0 + u1);
  const double v = (x0 - mean) * (x0 - mean) + (u1 - mean) * (u1 - mean);
  const double K = v / (v + obs.sigma2);
  const double cand = x0 + K * (obs.m[0] - x0 + s);

  auto ll = [&obs](double x) {
    return -0.5 * std::log(2.0 * M_PI * obs.sigma2) -
           (obs.m[0] - x) * (obs.m[0] - x) / (2.0 * obs.sigma2);
  };
  const bool in_box = cand >= 0.0 && cand <= 1.0;
  const bool accept =
      in_box && std::log(1.0 - acc_u + 1e-300) < ll(cand) - ll(x0);
  EXPECT_NEAR(c.samples(1, 0), accept ? cand : x0, 1e-12);
  EXPECT_EQ(c.accepted[1], accept ? 1 : 0);
}

TEST(EnkfChain, ExactObservationKeepsChainPut) {
  // m = f(init) and near-zero noise: y = 0 and s ~ 0, so the Kalman jump
  // stays at the start.
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.42);
  Observation obs;
  obs.m = vec1(0.42);
  obs.sigma2 = 1e-12;
  Chain c = enkf_chain(p, identity_model(), obs, 4, 300, 5);
  for (int j = 0; j < c.length(); ++j) {
    EXPECT_NEAR(c.samples(j, 0), 0.42, 1e-4);
  }
}

TEST(EnkfChain, ConjugateScalarPosterior) {
  // Uniform box much wider than the likelihood: posterior ~ N(m, sigma2).
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.15);
  Observation obs;
  obs.m = vec1(0.7);
  obs.sigma2 = 1e-3;
  Chain c = enkf_chain(p, identity_model(), obs, 8, 10000, 424242);
  const double mean = c.samples.col(0).mean();
  const double sd = std::sqrt(obs.sigma2);
  EXPECT_NEAR(mean, 0.7, 2.0 * sd);
  EXPECT_GT(c.acceptance_rate(), 0.05);
}

TEST(EnkfChain, SamplesStayInsideBox) {
  PriorBox p = box2d(-1.0, 1.0);
  p.init = Eigen::VectorXd::Zero(2);
  Observation obs;
  obs.m = Eigen::VectorXd::Constant(2, 0.9);
  obs.sigma2 = 1e-3;
  auto model = [](const Eigen::VectorXd& chi) {
    Eigen::VectorXd f(2);
    f << chi[0] + chi[1], chi[0] - chi[1];
    return ForwardResponse{f, false};
  };
  Chain c = enkf_chain(p, model, obs, 6, 3000, 99);
  for (int j = 0; j < c.length(); ++j) {
    ASSERT_TRUE(p.contains(c.samples.row(j).transpose()));
  }
  EXPECT_GT(c.acceptance_rate(), 0.0);
}

TEST(EnkfChain, ShortResponsePaddedForLikelihood) {
  // The forward model reports early full failure with a truncated curve; the
  // kernel must pad it and keep running.
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.5);
  Observation obs;
  obs.m = Eigen::VectorXd::Constant(4, 0.5);
  obs.sigma2 = 1e-3;
  auto model = [](const Eigen::VectorXd& chi) {
    Eigen::VectorXd f(2);  // shorter than the observation
    f << chi[0], chi[0];
    return ForwardResponse{f, true};
  };
  Chain c = enkf_chain(p, model, obs, 4, 500, 3);
  EXPECT_TRUE(c.log_post.allFinite());
}

TEST(EnkfChain, EvaluatorExceptionRejected) {
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.2);
  Observation obs;
  obs.m = vec1(0.9);  // pulls proposals toward the throwing region
  obs.sigma2 = 1e-3;
  auto moody = [](const Eigen::VectorXd& chi) {
    if (chi[0] > 0.8) throw std::runtime_error("no convergence");
    return ForwardResponse{chi, false};
  };
  Chain c = enkf_chain(p, moody, obs, 4, 2000, 21);
  EXPECT_GT(c.failed_evals, 0);
  for (int j = 0; j < c.length(); ++j) {
    EXPECT_LE(c.samples(j, 0), 0.8);
  }
}

TEST(EnkfChain, BitExactReproducibility) {
  PriorBox p = box1d(0.0, 1.0);
  p.init = vec1(0.3);
  Observation obs;
  obs.m = vec1(0.6);
  obs.sigma2 = 1e-3;
  Chain a = enkf_chain(p, identity_model(), obs, 5, 2000, 31337);
  Chain b = enkf_chain(p, identity_model(), obs, 5, 2000, 31337);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.log_post, b.log_post);
  Chain d = enkf_chain(p, identity_model(), obs, 5, 2000, 31338);
  EXPECT_NE(a.samples, d.samples);
}
