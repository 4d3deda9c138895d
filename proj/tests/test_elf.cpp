#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "elf_checks.hpp"
#include "elfqr/elf.hpp"
#include "oracles.hpp"

using namespace elfqr;

TEST(Log1pexp, SmallAndLargeArguments) {
  EXPECT_NEAR(log1pexp(0.0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(log1pexp(1000.0), 1000.0);
  EXPECT_TRUE(std::isfinite(log1pexp(-1000.0)));
  EXPECT_GE(log1pexp(-1000.0), 0.0);
}

TEST(Log1pexp, MatchesExtendedPrecisionAcrossBranch) {
  for (double z : {17.5, 18.0, 18.0000001, 18.5, 25.0, 40.0, -5.0, 3.0}) {
    const oracle::big ref = boost::multiprecision::log1p(boost::multiprecision::exp(oracle::big(z)));
    const double r = static_cast<double>(ref);
    EXPECT_LE(std::abs(log1pexp(z) - r) / r, 1e-12) << "z = " << z;
  }
}

TEST(Log1pexp, Monotone) {
  double prev = log1pexp(-40.0);
  for (double z = -40.0; z <= 40.0; z += 0.01) {
    const double v = log1pexp(z);
    EXPECT_GE(v, prev) << z;
    prev = v;
  }
}

TEST(Pinball, Examples) {
  EXPECT_NEAR(pinball_loss(-2.0, 0.9), 0.2, 1e-15);
  EXPECT_DOUBLE_EQ(pinball_loss(3.0, 0.5), 1.5);
  EXPECT_DOUBLE_EQ(pinball_loss(0.0, 0.1), 0.0);
}

TEST(ElfLoss, AtZeroResidual) {
  EXPECT_NEAR(elf_loss(1.0, 1.0, {0.5, 1.0, 1.0}), std::log(2.0), 1e-15);
}

TEST(ElfLoss, PinballLimitForSmallLambda) {
  const double v = elf_loss(5.0, 0.0, {0.5, 0.01, 1.0});
  EXPECT_NEAR(v, pinball_loss(5.0, 0.5), 1e-6);
}

TEST(ElfLoss, MatchesExtendedPrecision) {
  const double ref = static_cast<double>(oracle::elf_loss_big(1.0, 0.0, 0.9, 0.5, 2.0));
  EXPECT_LE(std::abs(elf_loss(1.0, 0.0, {0.9, 0.5, 2.0}) - ref) / std::abs(ref), 1e-12);
  std::mt19937_64 gen(7);
  for (int i = 0; i < 200; ++i) {
    const auto t = checks::random_tuple(gen);
    const double r = static_cast<double>(oracle::elf_loss_big(t.y, t.mu, t.p.tau, t.p.lambda, t.p.sigma));
    EXPECT_LE(std::abs(elf_loss(t.y, t.mu, t.p) - r), 1e-12 * (1.0 + std::abs(r)));
  }
}

TEST(ElfLoss, SupGapToPinballIsLambdaSigmaLog2) {
  for (double lam : {0.01, 0.3, 1.0}) {
    for (double sig : {0.5, 2.0}) {
      double worst = 0.0;
      for (double u = -50.0; u <= 50.0; u += 0.001) {
        const double h = lam * sig;
        worst = std::max(worst, std::abs(h * log1pexp(u / h) - std::max(u, 0.0)));
      }
      EXPECT_NEAR(worst, lam * sig * std::log(2.0), 1e-8);
    }
  }
}

TEST(ElfLogpdf, ValueAtCentre) {
  // Beta(1/2, 1/2) = pi
  const double expected = -std::log(2.0) - std::log(std::numbers::pi);
  EXPECT_NEAR(elf_logpdf(0.3, 0.3, {0.5, 1.0, 1.0}), expected, 1e-14);
}

TEST(ElfLogpdf, NormalisedOnGrid) {
  for (double tau : {0.05, 0.5, 0.95})
    for (double lam : {0.01, 0.3, 1.0, 3.0})
      for (double sig : {0.5, 1.0, 5.0}) {
        const double mass = checks::density_mass({tau, lam, sig}, 0.7);
        EXPECT_NEAR(mass, 1.0, 1e-6) << tau << " " << lam << " " << sig;
      }
}

TEST(ElfLogpdf, NormalisedOnFiniteInterval) {
  // the fixed-interval version of the normalisation check
  const ElfParams p{0.5, 1.0, 1.0};
  boost::math::quadrature::gauss_kronrod<double, 61> gk;
  const double half = 60.0 * p.lambda * p.sigma + 60.0 * p.sigma;
  const double mass = gk.integrate([&](double y) { return std::exp(elf_logpdf(y, 0.0, p)); }, -half, half, 15, 1e-12);
  EXPECT_NEAR(mass, 1.0, 1e-6);
}

TEST(ElfLogpdf, ModeLocation) {
  // In y the density peaks where the saturated mu would sit at the origin:
  // y - mu = -lambda sigma log(tau / (1 - tau)).
  const ElfParams p{0.8, 0.7, 1.3};
  const double mode = -saturated_mu(0.0, p);
  EXPECT_NEAR(mode, -p.lambda * p.sigma * std::log(p.tau / (1 - p.tau)), 1e-15);
  const double f0 = elf_logpdf(mode, 0.0, p);
  for (double dx : {-1e-3, 1e-3, -0.1, 0.1}) EXPECT_LT(elf_logpdf(mode + dx, 0.0, p), f0);
}

TEST(ElfLogpdf, RaisesWhenBetaUnderflows) {
  EXPECT_THROW(elf_logpdf(0.0, 0.0, {0.01, 1e-322, 1.0}), std::domain_error);
}

TEST(ElfParams, Validation) {
  EXPECT_THROW((ElfParams{0.0, 1.0, 1.0}.validate()), std::invalid_argument);
  EXPECT_THROW((ElfParams{0.5, -1.0, 1.0}.validate()), std::invalid_argument);
  EXPECT_THROW((ElfParams{0.5, 1.0, 0.0}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((ElfParams{0.5, 1.0, 1.0}.validate()));
}

TEST(ElfDerivatives, GradientAtCentre) {
  const ElfParams p{0.3, 0.8, 2.0};
  const auto d = elf_derivatives(1.0, 1.0, p, 2);
  EXPECT_NEAR(d.d_mu(1), (0.3 - 0.5) / 2.0, 1e-15);
  // second mu-derivative is minus the logistic density over sigma
  EXPECT_NEAR(d.d_mu(2), -0.25 / (p.lambda * p.sigma) / p.sigma, 1e-15);
}

TEST(ElfDerivatives, InvariantsOnRandomInputs) {
  std::mt19937_64 gen(11);
  for (int i = 0; i < 2000; ++i) {
    const auto t = checks::random_tuple(gen);
    const auto d = elf_derivatives(t.y, t.mu, t.p, 2);
    EXPECT_GT(d.d_mu(1), (t.p.tau - 1.0) / t.p.sigma);
    EXPECT_LT(d.d_mu(1), t.p.tau / t.p.sigma);
    EXPECT_LT(d.d_mu(2), 0.0);
    EXPECT_NEAR(d.ll, elf_logpdf(t.y, t.mu, t.p), 1e-12 * (1 + std::abs(d.ll)));
  }
}

TEST(ElfDerivatives, MatchFiniteDifferences) {
  std::mt19937_64 gen(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto t = checks::random_tuple(gen);
    const auto rep = checks::check_derivatives(t.y, t.mu, t.p);
    EXPECT_LE(rep.worst, 1e-6) << "d[" << rep.worst_a << "][" << rep.worst_b << "] tau=" << t.p.tau
                               << " lambda=" << t.p.lambda << " sigma=" << t.p.sigma << " y=" << t.y;
  }
}

TEST(ElfDerivatives, OrderRange) {
  EXPECT_THROW(elf_derivatives(0, 0, {}, 0), std::invalid_argument);
  EXPECT_THROW(elf_derivatives(0, 0, {}, 5), std::invalid_argument);
  const auto d = elf_derivatives(0.5, 0, {0.5, 1, 1}, 1);
  EXPECT_EQ(d.d[2][0], 0.0);
}

TEST(Saturated, Examples) {
  EXPECT_NEAR(saturated_loss(0.5, 1.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(saturated_mu(0.0, {0.9, 0.1, 2.0}), 0.2 * std::log(9.0), 1e-15);
  std::mt19937_64 gen(3);
  for (int i = 0; i < 500; ++i) {
    const auto t = checks::random_tuple(gen);
    const double mu_hat = saturated_mu(t.y, t.p);
    EXPECT_NEAR(elf_loss(t.y, mu_hat, t.p), saturated_loss(t.p.tau, t.p.lambda),
                1e-12 * (1 + saturated_loss(t.p.tau, t.p.lambda)) + 1e-13 * std::abs(t.y - t.mu) / t.p.sigma);
  }
}

TEST(Deviance, NonNegativeAndZeroAtSaturation) {
  std::mt19937_64 gen(5);
  for (int i = 0; i < 1000; ++i) {
    const auto t = checks::random_tuple(gen);
    const double dev = deviance(t.y, t.mu, t.p);
    EXPECT_GE(dev, -1e-12);
    EXPECT_NEAR(dev, 2.0 * (elf_loss(t.y, t.mu, t.p) - saturated_loss(t.p.tau, t.p.lambda)), 1e-12 * (1 + dev));
    EXPECT_NEAR(deviance(t.y, saturated_mu(t.y, t.p), t.p), 0.0, 1e-11 * (1 + std::abs(t.y) / t.p.sigma));
  }
}

TEST(PirlsTerms, WeightAtCentreAndNewtonStep) {
  const ElfParams p{0.7, 0.4, 1.5};
  const auto t = pirls_terms(2.0, 2.0, p);
  EXPECT_NEAR(t.w, 1.0 / (4.0 * p.lambda * p.sigma * p.sigma), 1e-14);
  // w = (1/2) d^2 Dev / dmu^2 by differences of the deviance
  auto dev = [&](double mu) { return deviance(2.0, mu, p); };
  const double d2 = oracle::ridders([&](double m) { return oracle::ridders(dev, m, 0.1); }, 2.0, 0.1);
  EXPECT_NEAR(t.w, 0.5 * d2, 1e-7 * t.w);

  // minimising w (z - mu')^2 is one Newton step on Dev
  for (double y : {-3.0, 0.1, 4.0}) {
    const double mu = 0.5;
    const auto q = pirls_terms(y, mu, p);
    auto dev_y = [&](double m) { return deviance(y, m, p); };
    const double g = oracle::ridders_best(dev_y, mu, 0.1);
    const double h = oracle::ridders_best([&](double m) { return oracle::ridders_best(dev_y, m, 0.1); }, mu, 0.1);
    EXPECT_NEAR(q.z, mu - g / h, 1e-6 * (1 + std::abs(q.z)));
    EXPECT_NEAR(q.wz, q.w * q.z, 1e-12 * (1 + std::abs(q.wz)));
  }
}

TEST(PirlsTerms, WeightsDecayInTails) {
  const ElfParams p{0.5, 0.2, 1.0};
  double prev = pirls_terms(0.0, 0.0, p).w;
  for (double u = 0.1; u < 200.0; u += 0.1) {
    const double w = pirls_terms(u, 0.0, p).w;
    EXPECT_LE(w, prev);
    EXPECT_GE(w, 0.0);
    prev = w;
  }
  const auto far = pirls_terms(1e4, 0.0, p);
  EXPECT_TRUE(std::isfinite(far.wz));
}
