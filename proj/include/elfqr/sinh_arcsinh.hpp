#pragma once

// Four-parameter sinh-arcsinh distribution of Jones & Pewsey (2009):
// Y = xi + eta * sinh((asinh(Z) + eps) / delta), Z ~ N(0, 1).

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "elfqr/optim.hpp"

namespace elfqr {

struct SinhArcsinh {
  double xi = 0.0;     // location
  double eta = 1.0;    // scale
  double eps = 0.0;    // skewness
  double delta = 1.0;  // tail weight
  double loglik = 0.0;
  bool converged = false;
  bool gaussian_fallback = false;
  std::vector<std::string> warnings;

  double logpdf(double y) const {
    const double x = (y - xi) / eta;
    const double a = delta * std::asinh(x) - eps;
    const double s = std::sinh(a);
    const double aa = std::abs(a);
    const double logc = aa + std::log1p(std::exp(-2.0 * aa)) - std::numbers::ln2;
    return std::log(delta) + logc - std::log(eta) - 0.5 * std::log(2.0 * std::numbers::pi) -
           0.5 * std::log1p(x * x) - 0.5 * s * s;
  }

  double pdf(double y) const { return std::exp(logpdf(y)); }

  /// Analytic derivative of the density in y.
  double dpdf(double y) const {
    const double x = (y - xi) / eta;
    const double r = std::sqrt(1.0 + x * x);
    const double a = delta * std::asinh(x) - eps;
    const double da = delta / r;
    const double dlog = std::tanh(a) * da - x / (r * r) - std::sinh(a) * std::cosh(a) * da;
    return pdf(y) * dlog / eta;
  }

  double cdf(double y) const {
    const double x = (y - xi) / eta;
    const double s = std::sinh(delta * std::asinh(x) - eps);
    return 0.5 * std::erfc(-s / std::numbers::sqrt2);
  }

  /// Closed-form inverse of the cdf.
  double quantile(double u) const {
    const boost::math::normal_distribution<double> nd;
    const double zq = boost::math::quantile(nd, u);
    return xi + eta * std::sinh((std::asinh(zq) + eps) / delta);
  }

  double mode() const {
    const double lo = quantile(1e-3), hi = quantile(1.0 - 1e-3);
    const auto r = brent_minimize([&](double y) { return -logpdf(y); }, lo, hi, 1e-10 * eta);
    return r.x;
  }
};

namespace detail {

/// Mean negative log-likelihood and its gradient in (xi, log eta, eps, log delta).
inline double sas_objective(const std::vector<double>& z, const Eigen::VectorXd& th, Eigen::VectorXd& g) {
  const double xi = th(0), eta = std::exp(th(1)), eps = th(2), delta = std::exp(th(3));
  const double n = static_cast<double>(z.size());
  double nll = 0.0;
  g.setZero(4);
  for (double y : z) {
    const double x = (y - xi) / eta;
    const double r2 = 1.0 + x * x;
    const double r = std::sqrt(r2);
    const double ash = std::asinh(x);
    const double a = delta * ash - eps;
    const double s = std::sinh(a), c = std::cosh(a);
    const double aa = std::abs(a);
    const double logc = aa + std::log1p(std::exp(-2.0 * aa)) - std::numbers::ln2;
    nll -= std::log(delta) + logc - std::log(eta) - 0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * std::log(r2) -
           0.5 * s * s;
    const double la = std::tanh(a) - s * c;  // d loglik / dA
    const double lx = -x / r2 + la * delta / r;
    g(0) -= lx * (-1.0 / eta);
    g(1) -= -1.0 + lx * (-x);
    g(2) -= -la;
    g(3) -= 1.0 + la * delta * ash;
  }
  g /= n;
  return nll / n;
}

}  // namespace detail

/// Maximum likelihood fit. Falls back to a Gaussian (eps = 0, delta = 1)
/// when the optimiser fails.
inline SinhArcsinh fit_sinh_arcsinh(const std::vector<double>& z) {
  if (z.size() < 3) throw std::invalid_argument("sinh-arcsinh fit needs at least 3 observations");
  SinhArcsinh out;
  if (z.size() < 50) out.warnings.push_back("sinh-arcsinh fit on fewer than 50 observations");
  std::vector<double> s(z);
  std::sort(s.begin(), s.end());
  const double median = s[s.size() / 2];
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(z.size());
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(z.size() - 1));
  if (!(sd > 0.0)) throw std::invalid_argument("sinh-arcsinh fit: data have zero spread");

  Eigen::VectorXd th(4);
  th << median, std::log(sd), 0.0, 0.0;
  const auto res = bfgs_minimize([&](const Eigen::VectorXd& t, Eigen::VectorXd& g) { return detail::sas_objective(z, t, g); },
                                 th, 1e-9, 1000);
  if (res.converged && res.x.allFinite() && std::isfinite(res.fx)) {
    out.xi = res.x(0);
    out.eta = std::exp(res.x(1));
    out.eps = res.x(2);
    out.delta = std::exp(res.x(3));
    out.loglik = -res.fx * static_cast<double>(z.size());
    out.converged = true;
    return out;
  }
  out.xi = mean;
  out.eta = sd;
  out.eps = 0.0;
  out.delta = 1.0;
  Eigen::VectorXd g(4);
  Eigen::VectorXd t(4);
  t << mean, std::log(sd), 0.0, 0.0;
  out.loglik = -detail::sas_objective(z, t, g) * static_cast<double>(z.size());
  out.gaussian_fallback = true;
  out.warnings.push_back("sinh-arcsinh optimiser failed; using a Gaussian fit");
  return out;
}

}  // namespace elfqr
