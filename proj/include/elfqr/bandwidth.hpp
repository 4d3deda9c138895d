#pragma once

// Loss bandwidth selection: a Gaussian location-scale fit, a sinh-arcsinh
// density for the standardised residuals, the AMSE-optimal bandwidth and
// its split into lambda and a relative scale.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "elfqr/basis.hpp"
#include "elfqr/fit.hpp"
#include "elfqr/sinh_arcsinh.hpp"

namespace elfqr {

class BandwidthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LocationScaleFit {
  GaussianFit mean_fit;
  GaussianFit var_fit;
  Vector alpha;  // fitted conditional mean at the training rows
  Vector kappa;  // fitted conditional sd at the training rows
  double edf_mean = 0.0;

  /// Standardised residuals (y - alpha) / kappa.
  std::vector<double> standardized(const Vector& y) const {
    std::vector<double> z(static_cast<std::size_t>(y.size()));
    for (Index i = 0; i < y.size(); ++i) z[static_cast<std::size_t>(i)] = (y(i) - alpha(i)) / kappa(i);
    return z;
  }
};

/// Mean by a Gaussian additive model; variance by a Gaussian additive model
/// on log squared residuals, bias-corrected by -E[log chi^2_1] = 1.2704.
inline LocationScaleFit fit_location_scale(const DesignArtifacts& mean_art, const DesignArtifacts& var_art,
                                           const Vector& y) {
  constexpr double log_chi2_bias = 1.2704;
  LocationScaleFit out;
  out.mean_fit = gaussian_gam(mean_art, y);
  out.alpha = out.mean_fit.fitted;
  out.edf_mean = out.mean_fit.edf;
  const Vector r2 = (y - out.alpha).array().square().matrix();
  const double rmax = r2.maxCoeff();
  // residuals at rounding level mean an exact fit, with nothing to scale
  const double ytop = 1.0 + y.cwiseAbs().maxCoeff();
  if (!(std::sqrt(rmax) > 1e-12 * ytop)) throw BandwidthError("location fit leaves all residuals at zero");
  const double floor = rmax * 1e-16;
  Vector lr(y.size());
  for (Index i = 0; i < y.size(); ++i) lr(i) = std::log(std::max(r2(i), floor)) + log_chi2_bias;
  out.var_fit = gaussian_gam(var_art, lr);
  out.kappa = (0.5 * out.var_fit.fitted.array()).exp().matrix();
  return out;
}

struct BandwidthOptions {
  double eps_factor = 0.01;  // mode-proximity threshold, in units of sd(z)
  double delta = 0.05;       // probability shift away from the mode
  double fprime_floor = 1e-8;
};

struct BandwidthDiagnostics {
  double h_z_star = 0.0;
  double xi = 0.0;  // quantile actually used
  double tau_used = 0.0;
  double f = 0.0;
  double fprime = 0.0;
  double mode = 0.0;
  double d = 0.0;
  Index n = 0;
  bool shifted = false;
};

/// h = [(d/n) 9 f / (pi^4 f'^2)]^(1/3) for a density with value f and
/// slope fprime at the target quantile.
inline double bandwidth_formula(double f, double fprime, double d, double n) {
  const double pi4 = std::pow(std::numbers::pi, 4);
  return std::cbrt(d / n * 9.0 * f / (pi4 * fprime * fprime));
}

/// Evaluates the optimal standardised bandwidth from a fitted residual
/// density, stepping the quantile level away from the mode when the slope
/// would be close to zero.
inline BandwidthDiagnostics optimal_bandwidth(const SinhArcsinh& fit, double tau, double d, Index n,
                                              double sd_z = 1.0, const BandwidthOptions& opt = {}) {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
  if (!(d > 0.0) || n <= 0) throw std::invalid_argument("bandwidth needs d > 0 and n > 0");
  BandwidthDiagnostics out;
  out.d = d;
  out.n = n;
  out.mode = fit.mode();
  out.tau_used = tau;
  out.xi = fit.quantile(tau);
  const double eps = opt.eps_factor * sd_z;
  if (std::abs(out.xi - out.mode) < eps) {
    out.shifted = true;
    out.tau_used = out.xi >= out.mode ? tau + opt.delta : tau - opt.delta;
    if (!(out.tau_used > 0.0 && out.tau_used < 1.0)) throw BandwidthError("quantile shift leaves (0, 1)");
    out.xi = fit.quantile(out.tau_used);
  }
  out.f = fit.pdf(out.xi);
  out.fprime = fit.dpdf(out.xi);
  if (std::abs(out.fprime) < opt.fprime_floor) {
    throw BandwidthError("density slope at the target quantile is ~0 even after shifting; increase delta");
  }
  out.h_z_star = bandwidth_formula(out.f, out.fprime, d, static_cast<double>(n));
  return out;
}

struct BandwidthSplit {
  double lambda = 0.0;
  Vector sigma_tilde;
};

/// lambda = h * mean(kappa) / sigma0 and sigma_tilde = kappa / mean(kappa),
/// so that lambda * sigma0 * sigma_tilde_i = h * kappa_i.
inline BandwidthSplit decompose_bandwidth(double h_z_star, const Vector& kappa, double sigma0) {
  if (!(sigma0 > 0.0)) throw std::invalid_argument("sigma0 must be positive");
  if (kappa.size() == 0 || kappa.minCoeff() <= 0.0) throw std::invalid_argument("kappa must be positive");
  BandwidthSplit out;
  const double kbar = kappa.mean();
  out.lambda = h_z_star * kbar / sigma0;
  out.sigma_tilde = kappa / kbar;
  return out;
}

/// Everything needed to build the ELF loss for any sigma0 at one tau.
struct BandwidthEstimate {
  BandwidthDiagnostics diag;
  Vector kappa;
  double kappa_mean = 0.0;
  Vector sigma_tilde;

  double h_z_star() const { return diag.h_z_star; }

  double lambda(double sigma0) const { return diag.h_z_star * kappa_mean / sigma0; }

  ElfSetting elf(double tau, double sigma0) const {
    ElfSetting e;
    e.tau = tau;
    e.lambda = lambda(sigma0);
    e.sigma = sigma0 * sigma_tilde;
    return e;
  }
};

inline BandwidthEstimate make_bandwidth(const BandwidthDiagnostics& diag, const Vector& kappa) {
  BandwidthEstimate b;
  b.diag = diag;
  b.kappa = kappa;
  const auto split = decompose_bandwidth(diag.h_z_star, kappa, 1.0);
  b.kappa_mean = kappa.mean();
  b.sigma_tilde = split.sigma_tilde;
  return b;
}

}  // namespace elfqr
