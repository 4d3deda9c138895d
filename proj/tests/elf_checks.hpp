#pragma once

// Finite-difference and quadrature checks of the ELF density, shared by the
// unit tests and the acceptance runner.

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <random>

#include "elfqr/elf.hpp"
#include "oracles.hpp"

namespace checks {

struct DerivativeReport {
  double worst = 0.0;  // largest scaled error over all (a, b)
  int worst_a = 0, worst_b = 0;
};

/// Each derivative of order k is compared with Ridders differences of the
/// analytic derivative of order k - 1 (order 1 against the log-density
/// itself), along mu and, for mixed terms, along sigma as well. Errors are
/// relative to max(|fd|, 1e-2 * s) with s = 1 / (sigma^(a+b) lambda^max(a-1,0)),
/// the natural magnitude of the derivative.
inline DerivativeReport check_derivatives(double y, double mu, const elfqr::ElfParams& p) {
  DerivativeReport rep;
  const auto base = elfqr::elf_derivatives(y, mu, p, 4);
  auto value = [&](int a, int b, double m, double s) {
    const elfqr::ElfParams q{p.tau, p.lambda, s};
    if (a == 0 && b == 0) return elfqr::elf_logpdf(y, m, q);
    return elfqr::elf_derivatives(y, m, q, 4).d[a][b];
  };
  // steps on the scale over which z = (y - mu) / (lambda sigma) changes by O(1)
  const double zabs = std::abs(y - mu) / (p.lambda * p.sigma);
  const double hmu = 0.4 * p.lambda * p.sigma;
  const double hsig = 0.2 * p.sigma / (1.0 + zabs);
  for (int k = 1; k <= 4; ++k) {
    for (int a = 0; a <= k; ++a) {
      const int b = k - a;
      const double scale = 1.0 / (std::pow(p.sigma, a + b) * std::pow(p.lambda, std::max(a - 1, 0)));
      const double analytic = base.d[a][b];
      auto record = [&](double fd) {
        const double denom = std::max(std::abs(fd), 1e-2 * scale);
        const double e = std::abs(analytic - fd) / denom;
        if (e > rep.worst) {
          rep.worst = e;
          rep.worst_a = a;
          rep.worst_b = b;
        }
      };
      if (a >= 1) {
        record(oracle::ridders_best([&](double m) { return value(a - 1, b, m, p.sigma); }, mu, hmu));
      }
      if (b >= 1) {
        record(oracle::ridders_best([&](double s) { return value(a, b - 1, mu, s); }, p.sigma, hsig));
      }
    }
  }
  return rep;
}

/// A random (y, mu, params) tuple with residuals spread over the bulk and
/// the tails of the density.
struct Tuple {
  double y, mu;
  elfqr::ElfParams p;
};

inline Tuple random_tuple(std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Tuple t{};
  t.p.tau = 0.02 + 0.96 * u01(gen);
  t.p.lambda = std::exp(std::log(0.05) + (std::log(5.0) - std::log(0.05)) * u01(gen));
  t.p.sigma = std::exp(std::log(0.2) + (std::log(5.0) - std::log(0.2)) * u01(gen));
  t.mu = -3.0 + 6.0 * u01(gen);
  const double z = -15.0 + 30.0 * u01(gen);
  t.y = t.mu + z * t.p.lambda * t.p.sigma;
  return t;
}

/// Integral of exp(logpdf) over the real line, split at the mode.
inline double density_mass(const elfqr::ElfParams& p, double mu = 0.0) {
  const double mode = mu - p.lambda * p.sigma * std::log(p.tau / (1.0 - p.tau));
  auto pdf = [&](double y) { return std::exp(elfqr::elf_logpdf(y, mu, p)); };
  boost::math::quadrature::exp_sinh<double> es;
  const double right = es.integrate([&](double t) { return pdf(mode + t); }, 1e-13);
  const double left = es.integrate([&](double t) { return pdf(mode - t); }, 1e-13);
  return left + right;
}

}  // namespace checks
