#pragma once

// Learning-rate calibration: sigma0 is chosen to minimise an estimate of the
// integrated KL divergence between the posterior marginals of mu(x) under V
// and under a better-calibrated reference (the sandwich covariance, or a
// bootstrap estimate of var{mu_hat(x)} plus bias). Also the end-to-end
// single- and multi-quantile pipelines.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "elfqr/bandwidth.hpp"
#include "elfqr/basis.hpp"
#include "elfqr/data.hpp"
#include "elfqr/fit.hpp"
#include "elfqr/optim.hpp"
#include "elfqr/parallel.hpp"
#include "elfqr/rng.hpp"
#include "elfqr/sinh_arcsinh.hpp"

namespace elfqr {

class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An error from one pipeline stage; what() is prefixed with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& msg)
      : std::runtime_error(stage + ": " + msg), stage(std::move(stage)) {}
  std::string stage;
};

enum class CalibrationMethod { Sandwich, Bootstrap, LamlComparator };

inline const char* method_name(CalibrationMethod m) {
  switch (m) {
    case CalibrationMethod::Sandwich:
      return "sandwich";
    case CalibrationMethod::Bootstrap:
      return "bootstrap";
    case CalibrationMethod::LamlComparator:
      return "laml-comparator";
  }
  return "?";
}

inline CalibrationMethod parse_method(const std::string& s) {
  if (s == "sandwich") return CalibrationMethod::Sandwich;
  if (s == "bootstrap") return CalibrationMethod::Bootstrap;
  if (s == "laml" || s == "laml-comparator") return CalibrationMethod::LamlComparator;
  throw std::invalid_argument("unknown calibration method '" + s + "' (sandwich | bootstrap | laml)");
}

// ---------------------------------------------------------------------------
// Gradient covariance

struct GradientCovariance {
  Matrix sigma_hat;    // empirical covariance of lo'_i x_i
  Matrix sigma_tilde;  // the PD surrogate built from X'X and the mean row
  Matrix sigma_reg;    // alpha sigma_hat + (1 - alpha) sigma_tilde
  double alpha = 1.0;
  double ess = 0.0;  // Kish effective sample size of |lo'|
  double ridge = 0.0;
  std::vector<std::string> warnings;
};

/// lo'_i = (F(y_i) - 1 + tau) / sigma_i with F the logistic cdf of scale
/// lambda sigma_i centred on mu_i.
inline Vector score_values(const Vector& y, const Vector& mu, const ElfSetting& elf) {
  Vector s(y.size());
  for (Index i = 0; i < y.size(); ++i) {
    const double h = elf.lambda * elf.sigma(i);
    s(i) = (logistic_cdf((y(i) - mu(i)) / h) - 1.0 + elf.tau) / elf.sigma(i);
  }
  return s;
}

inline GradientCovariance gradient_covariance_from_scores(const Matrix& X, const Vector& score) {
  const Index n = X.rows(), d = X.cols();
  const double nd = static_cast<double>(n);
  GradientCovariance g;
  const Vector om = score.cwiseAbs();
  const double sw = om.sum();
  const double sw2 = om.squaredNorm();
  if (!(sw2 > 0.0)) throw CalibrationError("all loss gradients are zero");
  const Vector xw = X.transpose() * score / nd;  // s_i w_i = lo'_i
  g.sigma_hat = X.transpose() * om.array().square().matrix().asDiagonal() * X / nd - xw * xw.transpose();
  const Vector xbar = X.colwise().mean().transpose();
  const double ssw = score.sum();
  g.sigma_tilde = (sw2 * (X.transpose() * X) - ssw * ssw * xbar * xbar.transpose()) / (nd * nd);
  g.ess = sw * sw / sw2;
  g.alpha = std::min(g.ess / static_cast<double>(d * d), 1.0);
  g.sigma_reg = g.alpha * g.sigma_hat + (1.0 - g.alpha) * g.sigma_tilde;
  g.sigma_hat = 0.5 * (g.sigma_hat + g.sigma_hat.transpose()).eval();
  g.sigma_tilde = 0.5 * (g.sigma_tilde + g.sigma_tilde.transpose()).eval();
  g.sigma_reg = 0.5 * (g.sigma_reg + g.sigma_reg.transpose()).eval();

  Eigen::LLT<Matrix> llt(g.sigma_reg);
  if (llt.info() == Eigen::Success) return g;
  const double base = g.sigma_reg.trace() / static_cast<double>(d);
  for (double r = 1e-8; r <= 1e-2; r *= 10.0) {
    Matrix a = g.sigma_reg;
    a.diagonal().array() += r * base;
    llt.compute(a);
    if (llt.info() == Eigen::Success) {
      g.sigma_reg = std::move(a);
      g.ridge = r * base;
      g.warnings.push_back("gradient covariance was singular; added ridge " + std::to_string(r) + " * tr/d");
      return g;
    }
  }
  throw CalibrationError("gradient covariance is singular even after ridging");
}

inline GradientCovariance gradient_covariance(const DesignArtifacts& art, const Vector& y, const QuantileFit& fit) {
  return gradient_covariance_from_scores(art.X, score_values(y, fit.fitted, fit.elf));
}

// ---------------------------------------------------------------------------
// IKL estimates

/// x_i' V x_i for every row of X.
inline Vector row_variances(const Matrix& X, const Matrix& V) {
  return (X * V).cwiseProduct(X).rowwise().sum();
}

/// r - log r, which is >= 1; evaluated as 1 + (e - log1p(e)) with e = r - 1.
inline double kl_term(double r) {
  const double e = r - 1.0;
  double t = e - std::log1p(e);
  if (!(t >= -1e-12)) throw std::logic_error("IKL summand below 1: r = " + std::to_string(r));
  return 1.0 + std::max(t, 0.0);
}

/// n^-1 sum [v~/v + log(v/v~)]^zeta.
inline double ikl_value(const Vector& v, const Vector& v_tilde, double zeta) {
  double s = 0.0;
  for (Index i = 0; i < v.size(); ++i) s += std::pow(kl_term(v_tilde(i) / v(i)), zeta);
  return s / static_cast<double>(v.size());
}

struct CalibrationOptions {
  CalibrationMethod method = CalibrationMethod::Sandwich;
  double zeta = 0.5;
  double tol = 1e-2;                                 // Brent tolerance in log sigma0
  std::optional<std::pair<double, double>> bracket;  // log sigma0
  int boot_k = 100;
  std::uint64_t seed = 1;
  SmoothingOptions smoothing;

  void validate() const {
    if (!(zeta > 0.0 && zeta <= 1.0)) throw std::invalid_argument("zeta must lie in (0, 1]");
    if (!(tol > 0.0)) throw std::invalid_argument("calibration tolerance must be positive");
    if (method == CalibrationMethod::Bootstrap && boot_k < 2) throw std::invalid_argument("bootstrap needs k >= 2");
    if (bracket && !(std::isfinite(bracket->first) && std::isfinite(bracket->second) && bracket->first <= bracket->second)) {
      throw std::invalid_argument("sigma0 bracket must be finite with lo <= hi");
    }
  }
};

/// Starting point for a fit at a new sigma0, taken from a fit at another
/// sigma0. The loss scales as 1/sigma0 with lambda sigma fixed, so shifting
/// rho by -dlog(sigma0) leaves the penalised minimiser unchanged.
struct WarmStart {
  double log_sigma0 = 0.0;
  Vector rho;
  Vector beta;
};

struct SandwichEvaluation {
  double sigma0 = 0.0;
  double value = std::numeric_limits<double>::infinity();
  bool converged = false;
  QuantileFit fit;
  GradientCovariance gcov;
  Vector v, v_tilde;
};

struct BootstrapEvaluation {
  double sigma0 = 0.0;
  double value = std::numeric_limits<double>::infinity();
  bool converged = false;
  QuantileFit fit;  // full-data fit giving gamma_hat and mu0
  Matrix replicates;  // n x k predictions on the original design; failed columns are NaN
  Vector mean, var, v;
  Vector bias_term;  // (mu0 - mean)^2 / v
  int failures = 0;
};

struct LamlEvaluation {
  double sigma0 = 0.0;
  double value = std::numeric_limits<double>::infinity();
  bool converged = false;
  QuantileFit fit;
};

/// Bootstrap row indices, drawn once: replicate j uses the stream seeded by
/// seed + j.
inline std::vector<std::vector<Index>> bootstrap_indices(Index n, int k, std::uint64_t seed) {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    Philox4x32 rng(seed + static_cast<std::uint64_t>(j));
    auto& idx = out[static_cast<std::size_t>(j)];
    idx.resize(static_cast<std::size_t>(n));
    for (auto& i : idx) i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
  }
  return out;
}

/// Everything the sigma0 objectives need for one tau: design, response,
/// bandwidth split and a starting beta.
class CalibrationContext {
 public:
  CalibrationContext(const DesignArtifacts& art, const Vector& y, double tau, BandwidthEstimate bw, Vector beta_init,
                     CalibrationOptions opt = {})
      : art_(&art), y_(&y), tau_(tau), bw_(std::move(bw)), beta_init_(std::move(beta_init)), opt_(std::move(opt)) {
    if (y.size() != art.n()) throw std::invalid_argument("response length does not match design");
    if (beta_init_.size() != art.d()) throw std::invalid_argument("initial coefficients have wrong length");
    opt_.validate();
  }

  const DesignArtifacts& design() const { return *art_; }
  const Vector& response() const { return *y_; }
  double tau() const { return tau_; }
  const BandwidthEstimate& bandwidth() const { return bw_; }
  const CalibrationOptions& options() const { return opt_; }
  CalibrationOptions& options() { return opt_; }

  ElfSetting elf(double sigma0) const { return bw_.elf(tau_, sigma0); }

  /// [log kbar - 6, log kbar + 3] unless overridden.
  std::pair<double, double> bracket() const {
    if (opt_.bracket) return *opt_.bracket;
    const double lk = std::log(bw_.kappa_mean);
    return {lk - 6.0, lk + 3.0};
  }

  /// Full fit (smoothing parameters and coefficients) at sigma0.
  QuantileFit fit(double sigma0, const WarmStart* warm = nullptr) const {
    std::optional<Vector> rho0;
    Vector beta0 = beta_init_;
    if (warm && warm->rho.size() == art_->m()) {
      rho0 = (warm->rho.array() - (std::log(sigma0) - warm->log_sigma0)).matrix();
      beta0 = warm->beta;
    }
    return optimize_smoothing(*art_, *y_, elf(sigma0), rho0, beta0, opt_.smoothing);
  }

  SandwichEvaluation sandwich(double sigma0, const WarmStart* warm = nullptr) const {
    SandwichEvaluation e;
    e.sigma0 = sigma0;
    e.fit = fit(sigma0, warm);
    e.converged = e.fit.converged;
    e.gcov = gradient_covariance(*art_, *y_, e.fit);
    const Matrix G = static_cast<double>(art_->n()) * e.gcov.sigma_reg;
    const auto cov = compute_covariances(*art_, e.fit.state, e.fit.gamma, G);
    e.fit.V_tilde = cov.V_tilde;
    e.v = row_variances(art_->X, e.fit.V);
    e.v_tilde = row_variances(art_->X, e.fit.V_tilde);
    e.value = ikl_value(e.v, e.v_tilde, opt_.zeta);
    return e;
  }

  /// Sandwich IKL as a function of sigma0 alone (cold start).
  double ikl_objective(double sigma0) const {
    if (!(sigma0 > 0.0)) throw std::invalid_argument("sigma0 must be positive");
    const auto e = sandwich(sigma0);
    return e.converged ? e.value : std::numeric_limits<double>::quiet_NaN();
  }

  BootstrapEvaluation bootstrap(double sigma0, const std::vector<std::vector<Index>>& samples,
                                const WarmStart* warm = nullptr) const {
    const Index n = art_->n(), d = art_->d();
    const auto k = static_cast<Index>(samples.size());
    if (k < 2) throw std::invalid_argument("bootstrap needs k >= 2");
    BootstrapEvaluation e;
    e.sigma0 = sigma0;
    e.fit = fit(sigma0, warm);
    const ElfSetting full = elf(sigma0);
    e.replicates = Matrix::Constant(n, k, std::numeric_limits<double>::quiet_NaN());
    const auto errors = parallel_for(static_cast<std::size_t>(k), [&](std::size_t j) {
      const auto& idx = samples[j];
      DesignArtifacts sub;
      sub.X.resize(n, d);
      Vector ys(n);
      ElfSetting es{full.tau, full.lambda, Vector(n)};
      for (Index r = 0; r < n; ++r) {
        const Index i = idx[static_cast<std::size_t>(r)];
        sub.X.row(r) = art_->X.row(i);
        ys(r) = (*y_)(i);
        es.sigma(r) = full.sigma(i);
      }
      sub.penalties = art_->penalties;
      sub.layout = art_->layout;
      const auto st = pirls_fit(sub, ys, e.fit.gamma, es, e.fit.beta, opt_.smoothing.pirls);
      e.replicates.col(static_cast<Index>(j)) = art_->X * st.beta;
    });
    std::vector<Index> ok;
    for (Index j = 0; j < k; ++j) {
      if (errors[static_cast<std::size_t>(j)]) {
        ++e.failures;
      } else {
        ok.push_back(j);
      }
    }
    if (e.failures * 5 > k) {
      throw CalibrationError(std::to_string(e.failures) + " of " + std::to_string(k) +
                             " bootstrap refits failed (first: " + exception_message(*std::find_if(errors.begin(), errors.end(), [](const auto& p) { return static_cast<bool>(p); })) + ")");
    }
    const auto kk = static_cast<double>(ok.size());
    e.mean = Vector::Zero(n);
    for (Index j : ok) e.mean += e.replicates.col(j);
    e.mean /= kk;
    e.var = Vector::Zero(n);
    for (Index j : ok) e.var += (e.replicates.col(j) - e.mean).array().square().matrix();
    e.var /= kk - 1.0;
    e.v = row_variances(art_->X, e.fit.V);
    e.bias_term = (e.fit.fitted - e.mean).array().square().matrix().cwiseQuotient(e.v);
    double s = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double r = e.var(i) / e.v(i);
      const double term = r > 0.0 ? kl_term(r) + e.bias_term(i) : std::numeric_limits<double>::infinity();
      s += std::pow(term, opt_.zeta);
    }
    e.value = s / static_cast<double>(n);
    e.converged = e.fit.converged && std::isfinite(e.value);
    return e;
  }

  /// Bootstrap IKL as a function of sigma0 alone (cold start), for fixed
  /// bootstrap samples.
  double bootstrap_objective(double sigma0, const std::vector<std::vector<Index>>& samples) const {
    const auto e = bootstrap(sigma0, samples);
    return e.converged ? e.value : std::numeric_limits<double>::quiet_NaN();
  }

  /// Negative log marginal likelihood of the ELF density model at sigma0:
  /// LAML plus the density normalisers.
  LamlEvaluation laml(double sigma0, const WarmStart* warm = nullptr) const {
    LamlEvaluation e;
    e.sigma0 = sigma0;
    e.fit = fit(sigma0, warm);
    e.converged = e.fit.converged;
    double norm = 0.0;
    for (Index i = 0; i < art_->n(); ++i) norm += elf_log_normaliser(e.fit.elf.at(i));
    e.value = e.fit.laml + norm;
    return e;
  }

 private:
  const DesignArtifacts* art_;
  const Vector* y_;
  double tau_;
  BandwidthEstimate bw_;
  Vector beta_init_;
  CalibrationOptions opt_;
};

// ---------------------------------------------------------------------------
// sigma0 search

struct TracePoint {
  double log_sigma0 = 0.0;
  double value = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  std::string error;
};

struct CalibrationTrace {
  std::vector<TracePoint> points;  // in evaluation order
  double sigma0 = 0.0;
  CalibrationMethod method = CalibrationMethod::Sandwich;
  double zeta = 0.5;
  double lo = 0.0, hi = 0.0;
  bool unimodal = true;  // soft diagnostic
  std::vector<std::string> warnings;
};

struct Calibration {
  CalibrationTrace trace;
  QuantileFit fit;  // the fit at the selected sigma0
};

namespace detail {

/// Values sorted by log sigma0 should fall then rise.
inline bool looks_unimodal(std::vector<TracePoint> pts) {
  std::erase_if(pts, [](const TracePoint& p) { return !p.converged || !std::isfinite(p.value); });
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.log_sigma0 < b.log_sigma0; });
  std::size_t i = 1;
  auto tol = [](double a) { return 1e-9 * (1.0 + std::abs(a)); };
  while (i < pts.size() && pts[i].value <= pts[i - 1].value + tol(pts[i - 1].value)) ++i;
  while (i < pts.size() && pts[i].value >= pts[i - 1].value - tol(pts[i - 1].value)) ++i;
  return i >= pts.size();
}

/// Brent over log sigma0 with warm starts; `eval(sigma0, warm)` returns an
/// object with value, converged and fit.
template <class Eval>
Calibration brent_calibration(const CalibrationContext& ctx, Eval&& eval) {
  const auto& opt = ctx.options();
  Calibration out;
  auto& tr = out.trace;
  tr.method = opt.method;
  tr.zeta = opt.zeta;
  std::tie(tr.lo, tr.hi) = ctx.bracket();
  if (!(std::isfinite(tr.lo) && std::isfinite(tr.hi)) || tr.lo > tr.hi) {
    throw std::invalid_argument("sigma0 bracket must be finite with lo <= hi");
  }
  std::optional<WarmStart> warm;
  double best = std::numeric_limits<double>::infinity();
  bool have = false;
  auto f = [&](double ls) {
    TracePoint p;
    p.log_sigma0 = ls;
    try {
      auto e = eval(std::exp(ls), warm ? &*warm : nullptr);
      p.value = e.value;
      p.converged = e.converged && std::isfinite(e.value);
      if (e.fit.converged) warm = WarmStart{ls, e.fit.rho, e.fit.beta};
      if (p.converged && e.value < best) {
        best = e.value;
        out.fit = std::move(e.fit);
        tr.sigma0 = std::exp(ls);
        have = true;
      }
    } catch (const std::exception& ex) {
      p.error = ex.what();
    }
    tr.points.push_back(p);
    return p.converged ? p.value : std::numeric_limits<double>::infinity();
  };
  if (tr.lo == tr.hi) {
    f(tr.lo);
  } else {
    brent_minimize(f, tr.lo, tr.hi, opt.tol);
  }
  if (!have) {
    std::string msg = "all " + std::to_string(tr.points.size()) + " sigma0 evaluations failed";
    for (const auto& p : tr.points) {
      if (!p.error.empty()) {
        msg += " (" + p.error + ")";
        break;
      }
    }
    throw CalibrationError(msg);
  }
  if (tr.lo < tr.hi) {
    const double ls = std::log(tr.sigma0);
    if (ls - tr.lo < 2.0 * opt.tol || tr.hi - ls < 2.0 * opt.tol) {
      tr.warnings.push_back("selected sigma0 is at the edge of the search bracket; consider widening it");
    }
  }
  tr.unimodal = looks_unimodal(tr.points);
  if (!tr.unimodal) tr.warnings.push_back("calibration objective does not look unimodal along the trace");
  return out;
}

}  // namespace detail

inline Calibration calibrate_sandwich(const CalibrationContext& ctx) {
  return detail::brent_calibration(ctx, [&](double s0, const WarmStart* w) { return ctx.sandwich(s0, w); });
}

inline Calibration calibrate_bootstrap(const CalibrationContext& ctx, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("bootstrap needs k >= 2");
  const auto samples = bootstrap_indices(ctx.design().n(), k, seed);
  return detail::brent_calibration(ctx, [&](double s0, const WarmStart* w) { return ctx.bootstrap(s0, samples, w); });
}

/// Selects sigma0 by the marginal likelihood. Known to give miscalibrated
/// intervals; provided for comparison only.
inline Calibration calibrate_laml(const CalibrationContext& ctx) {
  auto c = detail::brent_calibration(ctx, [&](double s0, const WarmStart* w) { return ctx.laml(s0, w); });
  c.trace.warnings.push_back("known-miscalibrated: sigma0 chosen by marginal likelihood");
  return c;
}

inline Calibration calibrate(const CalibrationContext& ctx) {
  switch (ctx.options().method) {
    case CalibrationMethod::Sandwich:
      return calibrate_sandwich(ctx);
    case CalibrationMethod::Bootstrap:
      return calibrate_bootstrap(ctx, ctx.options().boot_k, ctx.options().seed);
    case CalibrationMethod::LamlComparator:
      return calibrate_laml(ctx);
  }
  throw std::logic_error("bad calibration method");
}

/// Sandwich-IKL search over the bracket (overriding the bracket when given).
inline CalibrationTrace calibrate_sigma0(CalibrationContext ctx, std::optional<std::pair<double, double>> bracket = {}) {
  if (bracket) ctx.options().bracket = bracket;
  ctx.options().method = CalibrationMethod::Sandwich;
  return calibrate_sandwich(ctx).trace;
}

inline CalibrationTrace bootstrap_calibrate(CalibrationContext ctx, int k, std::uint64_t seed) {
  ctx.options().method = CalibrationMethod::Bootstrap;
  return calibrate_bootstrap(ctx, k, seed).trace;
}

// ---------------------------------------------------------------------------
// Intervals

struct Interval {
  Vector lower, upper;
};

/// x'beta -+ z_{(1+level)/2} sqrt(x'Vx).
inline Interval credible_interval(const Matrix& X, const Vector& beta, const Matrix& V, double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("interval level must lie in (0, 1)");
  const boost::math::normal_distribution<double> nd;
  const double z = boost::math::quantile(nd, 0.5 * (1.0 + level));
  const Vector mu = X * beta;
  const Vector se = row_variances(X, V).cwiseMax(0.0).cwiseSqrt();
  return {mu - z * se, mu + z * se};
}

// ---------------------------------------------------------------------------
// Pipeline

struct QuantileOptions {
  CalibrationOptions calibration;
  BandwidthOptions bandwidth;
};

struct QuantileResult {
  double tau = 0.5;
  QuantileFit fit;  // V and V_tilde both filled
  CalibrationTrace trace;
  BandwidthEstimate bandwidth;
  GradientCovariance gcov;
  double sigma0 = 0.0;
  double lambda = 0.0;
  std::vector<std::string> warnings;
};

struct MultiQuantileResult {
  std::vector<double> taus;
  std::vector<std::optional<QuantileResult>> fits;  // aligned with taus
  std::vector<std::pair<double, std::string>> failures;
  int crossings = 0;  // rows x adjacent-tau pairs whose fitted quantiles cross
};

/// Shares the design and the preliminary location-scale and residual
/// density fits across quantile levels.
class QuantilePipeline {
 public:
  QuantilePipeline(ModelSpec spec, const DataTable& data) : spec_(std::move(spec)) {
    try {
      spec_.validate();
      if (!data.has(spec_.response)) throw DataError("missing response column '" + spec_.response + "'");
      const auto& yv = data.numeric(spec_.response);
      y_ = Eigen::Map<const Vector>(yv.data(), static_cast<Index>(yv.size()));
      if (!y_.allFinite()) throw DataError("response has non-finite values");
      art_ = assemble_design(spec_, data);
      var_art_ = assemble_design(spec_.variance_model(), data);
    } catch (const std::exception& e) {
      throw StageError("design", e.what());
    }
    if (!art_.full_rank) throw StageError("design", art_.warnings.empty() ? "rank deficient" : art_.warnings.back());
  }

  const ModelSpec& spec() const { return spec_; }
  const DesignArtifacts& design() const { return art_; }
  const Vector& response() const { return y_; }
  int preliminary_fit_count() const { return prelim_count_; }

  const LocationScaleFit& preliminary() {
    std::call_once(prelim_once_, [&] {
      ++prelim_count_;
      try {
        prelim_ = fit_location_scale(art_, var_art_, y_);
        z_ = prelim_->standardized(y_);
        density_ = fit_sinh_arcsinh(z_);
      } catch (const std::exception& e) {
        prelim_error_ = e.what();
      }
    });
    if (!prelim_) throw StageError("preliminary", prelim_error_);
    return *prelim_;
  }

  const SinhArcsinh& residual_density() {
    preliminary();
    return density_;
  }

  BandwidthEstimate bandwidth(double tau, const BandwidthOptions& opt = {}) {
    const auto& pre = preliminary();
    try {
      double m = 0.0, s2 = 0.0;
      for (double v : z_) m += v;
      m /= static_cast<double>(z_.size());
      for (double v : z_) s2 += (v - m) * (v - m);
      const double sd = std::sqrt(s2 / static_cast<double>(z_.size() - 1));
      const auto diag = optimal_bandwidth(density_, tau, pre.edf_mean, art_.n(), sd, opt);
      return make_bandwidth(diag, pre.kappa);
    } catch (const std::exception& e) {
      throw StageError("bandwidth", e.what());
    }
  }

  /// Least-squares coefficients for alpha + kappa xi_tau.
  Vector initial_beta(double tau) {
    const auto& pre = preliminary();
    const Vector target = pre.alpha + density_.quantile(tau) * pre.kappa;
    return art_.X.colPivHouseholderQr().solve(target);
  }

  CalibrationContext context(double tau, const QuantileOptions& opt = {}) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
    auto bw = bandwidth(tau, opt.bandwidth);
    return CalibrationContext(art_, y_, tau, std::move(bw), initial_beta(tau), opt.calibration);
  }

  QuantileResult fit(double tau, const QuantileOptions& opt = {}) {
    QuantileResult r;
    r.tau = tau;
    auto ctx = context(tau, opt);
    r.bandwidth = ctx.bandwidth();
    Calibration cal;
    try {
      cal = calibrate(ctx);
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError("calibration", e.what());
    }
    r.trace = std::move(cal.trace);
    r.fit = std::move(cal.fit);
    r.sigma0 = r.trace.sigma0;
    r.lambda = r.fit.elf.lambda;
    try {
      r.gcov = gradient_covariance(art_, y_, r.fit);
      const Matrix G = static_cast<double>(art_.n()) * r.gcov.sigma_reg;
      r.fit.V_tilde = compute_covariances(art_, r.fit.state, r.fit.gamma, G).V_tilde;
    } catch (const std::exception& e) {
      throw StageError("final fit", e.what());
    }
    r.warnings = r.fit.warnings;
    for (const auto& w : r.trace.warnings) r.warnings.push_back(w);
    for (const auto& w : r.gcov.warnings) r.warnings.push_back(w);
    for (const auto& w : density_.warnings) r.warnings.push_back(w);
    if (r.bandwidth.diag.shifted) {
      r.warnings.push_back("tau is close to the residual mode; bandwidth evaluated at tau = " +
                           std::to_string(r.bandwidth.diag.tau_used));
    }
    return r;
  }

  MultiQuantileResult fit_many(const std::vector<double>& taus, const QuantileOptions& opt = {}) {
    MultiQuantileResult out;
    out.taus = taus;
    {
      std::vector<double> s(taus);
      std::sort(s.begin(), s.end());
      if (std::adjacent_find(s.begin(), s.end()) != s.end()) throw std::invalid_argument("duplicate tau values");
      for (double t : taus)
        if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
    }
    out.fits.resize(taus.size());
    preliminary();  // once, before dispatch
    const auto errors = parallel_for(taus.size(), [&](std::size_t i) { out.fits[i] = fit(taus[i], opt); });
    for (std::size_t i = 0; i < taus.size(); ++i) {
      if (errors[i]) out.failures.emplace_back(taus[i], exception_message(errors[i]));
    }
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < taus.size(); ++i)
      if (out.fits[i]) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return taus[a] < taus[b]; });
    for (std::size_t a = 1; a < order.size(); ++a) {
      const Vector& lo = out.fits[order[a - 1]]->fit.fitted;
      const Vector& hi = out.fits[order[a]]->fit.fitted;
      out.crossings += static_cast<int>((lo.array() > hi.array()).count());
    }
    return out;
  }

 private:
  ModelSpec spec_;
  Vector y_;
  DesignArtifacts art_, var_art_;
  std::once_flag prelim_once_;
  int prelim_count_ = 0;
  std::optional<LocationScaleFit> prelim_;
  std::string prelim_error_;
  std::vector<double> z_;
  SinhArcsinh density_;
};

inline QuantileResult fit_quantile(const DataTable& data, const ModelSpec& spec, double tau,
                                   const QuantileOptions& opt = {}) {
  QuantilePipeline p(spec, data);
  return p.fit(tau, opt);
}

inline MultiQuantileResult fit_multi_quantile(const DataTable& data, const ModelSpec& spec,
                                              const std::vector<double>& taus, const QuantileOptions& opt = {}) {
  QuantilePipeline p(spec, data);
  return p.fit_many(taus, opt);
}

}  // namespace elfqr
