#pragma once

// Extended Log-F (ELF) loss and density: a smooth generalisation of the
// pinball loss. Everything here is a pure function of its arguments.
//
// Parameterisation: residual u = y - mu, scale sigma, smoothness lambda,
// standardised residual z = u / (lambda * sigma).

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace elfqr {

struct ElfParams {
  double tau = 0.5;
  double lambda = 1.0;
  double sigma = 1.0;

  void validate() const {
    if (!(tau > 0.0 && tau < 1.0)) {
      throw std::invalid_argument("ELF: tau must lie in (0, 1), got " + std::to_string(tau));
    }
    if (!(lambda > 0.0) || !std::isfinite(lambda)) {
      throw std::invalid_argument("ELF: lambda must be positive, got " + std::to_string(lambda));
    }
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw std::invalid_argument("ELF: sigma must be positive, got " + std::to_string(sigma));
    }
  }
};

/// log(1 + e^z). Switches to z + e^{-z} above 18, where log1p(e^z) would
/// eventually overflow.
inline double log1pexp(double z) {
  if (z > 18.0) return z + std::exp(-z);
  return std::log1p(std::exp(z));
}

/// Logistic cdf, evaluated without cancellation in either tail.
inline double logistic_cdf(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double pinball_loss(double z, double tau) {
  return z < 0.0 ? (tau - 1.0) * z : tau * z;
}

inline double elf_loss(double y, double mu, const ElfParams& p) {
  const double u = y - mu;
  return (p.tau - 1.0) * u / p.sigma + p.lambda * log1pexp(u / (p.lambda * p.sigma));
}

/// log Beta(lambda (1 - tau), lambda tau), via log-gamma differences.
inline double elf_log_beta(double tau, double lambda) {
  const double a = lambda * (1.0 - tau);
  const double b = lambda * tau;
  if (!(a > 0.0) || !(b > 0.0)) {
    throw std::domain_error("ELF: Beta arguments underflowed to zero");
  }
  const double v = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  if (!std::isfinite(v)) throw std::domain_error("ELF: non-finite log Beta");
  return v;
}

/// log normalising constant log(lambda sigma Beta(...)).
inline double elf_log_normaliser(const ElfParams& p) {
  return std::log(p.lambda * p.sigma) + elf_log_beta(p.tau, p.lambda);
}

inline double elf_logpdf(double y, double mu, const ElfParams& p) {
  return -elf_loss(y, mu, p) - elf_log_normaliser(p);
}

/// Saturated loss: min over mu of the ELF loss. Independent of y and sigma.
inline double saturated_loss(double tau, double lambda) {
  return -(1.0 - tau) * lambda * std::log1p(-tau) - lambda * tau * std::log(tau);
}

/// The mu that attains the saturated loss for observation y.
inline double saturated_mu(double y, const ElfParams& p) {
  return y + p.lambda * p.sigma * std::log(p.tau / (1.0 - p.tau));
}

inline double deviance(double y, double mu, const ElfParams& p) {
  return 2.0 * (elf_loss(y, mu, p) - saturated_loss(p.tau, p.lambda));
}

/// Derivatives of the sigmoid Phi(z) with respect to z, orders 0..3.
struct SigmoidDerivatives {
  double phi0, phi1, phi2, phi3;
  double upper;  // 1 - Phi(z), kept separately to avoid cancellation
};

inline SigmoidDerivatives sigmoid_derivatives(double z) {
  SigmoidDerivatives s{};
  s.phi0 = logistic_cdf(z);
  s.upper = logistic_cdf(-z);
  s.phi1 = s.phi0 * s.upper;
  const double one_minus_two = s.upper - s.phi0;
  s.phi2 = s.phi1 * one_minus_two;
  s.phi3 = s.phi2 * one_minus_two - 2.0 * s.phi1 * s.phi1;
  return s;
}

/// All partial derivatives d^{a+b} ll / dmu^a dsigma^b with a + b <= 4 of
/// the ELF log-density. Entries above max_order are left at zero.
struct ElfDerivatives {
  double ll = 0.0;
  std::array<std::array<double, 5>, 5> d{};  // d[a][b]

  double d_mu(int k) const { return d[k][0]; }
  double d_sigma(int k) const { return d[0][k]; }
  double mixed(int a, int b) const { return d[a][b]; }
};

inline ElfDerivatives elf_derivatives(double y, double mu, const ElfParams& p, int max_order = 4) {
  if (max_order < 1 || max_order > 4) {
    throw std::invalid_argument("ELF: derivative order must be in 1..4");
  }
  const double tau = p.tau, lam = p.lambda, sig = p.sigma;
  const double u = y - mu;
  const double z = u / (lam * sig);
  const auto s = sigmoid_derivatives(z);
  // Phi - 1 + tau, written as tau - (1 - Phi) for accuracy in the upper tail
  const double g = tau - s.upper;
  const double sig2 = sig * sig, sig3 = sig2 * sig, sig4 = sig3 * sig;

  ElfDerivatives r;
  r.ll = -elf_loss(y, mu, p) - elf_log_normaliser(p);
  auto& d = r.d;

  d[1][0] = g / sig;
  d[0][1] = u / sig2 * g - 1.0 / sig;
  if (max_order >= 2) {
    d[2][0] = -s.phi1 / (lam * sig2);
    d[0][2] = 2.0 * u / sig3 * (-g - 0.5 * z * s.phi1) + 1.0 / sig2;
    d[1][1] = -(z * s.phi1 + g) / sig2;
  }
  if (max_order >= 3) {
    d[3][0] = s.phi2 / (lam * lam * sig3);
    d[0][3] = -3.0 / sig * d[0][2] + lam * z * z / sig3 * (3.0 * s.phi1 + z * s.phi2) + 1.0 / sig3;
    d[2][1] = (z * s.phi2 + 2.0 * s.phi1) / (lam * sig3);
    d[1][2] = (2.0 * g + 4.0 * z * s.phi1 + z * z * s.phi2) / sig3;
  }
  if (max_order >= 4) {
    d[4][0] = -s.phi3 / (lam * lam * lam * sig4);
    d[0][4] = -4.0 / sig * (2.0 * d[0][3] + 3.0 / sig * d[0][2]) -
              lam * z * z * z / sig4 * (4.0 * s.phi2 + z * s.phi3) + 2.0 / sig4;
    d[3][1] = -(z * s.phi3 + 3.0 * s.phi2) / (lam * lam * sig4);
    d[1][3] = -3.0 / sig * d[1][2] - z / sig4 * (6.0 * s.phi1 + 6.0 * z * s.phi2 + z * z * s.phi3);
    d[2][2] = -(z * z * s.phi3 + 6.0 * z * s.phi2 + 6.0 * s.phi1) / (lam * sig4);
  }
  return r;
}

/// Loss derivatives in mu only, as needed inside PIRLS and LAML:
/// first, second and third derivative of the loss (= minus log-density).
struct LossMuDerivatives {
  double d1;  // d lo / d mu
  double d2;  // d^2 lo / d mu^2  (the PIRLS weight)
  double d3;  // d^3 lo / d mu^3
};

inline LossMuDerivatives elf_loss_mu_derivatives(double y, double mu, const ElfParams& p) {
  const double lam = p.lambda, sig = p.sigma;
  const double z = (y - mu) / (lam * sig);
  const auto s = sigmoid_derivatives(z);
  return {-(p.tau - s.upper) / sig, s.phi1 / (lam * sig * sig), -s.phi2 / (lam * lam * sig * sig * sig)};
}

/// PIRLS working weight and working response for one observation.
/// w = (1/2) d^2 Dev / dmu^2 and z = mu - (1 / 2w) dDev/dmu. The product
/// w * z is returned separately since it stays well scaled when w underflows.
struct PirlsTerms {
  double w;
  double z;
  double wz;
};

inline PirlsTerms pirls_terms(double y, double mu, const ElfParams& p) {
  const auto d = elf_loss_mu_derivatives(y, mu, p);
  PirlsTerms t{};
  t.w = d.d2;
  t.wz = d.d2 * mu - d.d1;
  t.z = t.w > 0.0 ? mu - d.d1 / t.w : (d.d1 > 0.0 ? -HUGE_VAL : HUGE_VAL);
  return t;
}

}  // namespace elfqr
