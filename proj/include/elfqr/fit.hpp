#pragma once

// Coefficient estimation by stabilised PIRLS, the Laplace approximate
// marginal loss (LAML) with its gradient in log smoothing parameters, outer
// Newton selection of the smoothing parameters, and posterior covariances.
// Also a Gaussian additive model fitted by REML, used for the preliminary
// location-scale fit.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "elfqr/basis.hpp"
#include "elfqr/elf.hpp"

namespace elfqr {

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, int iterations, Vector last_beta, double last_loss)
      : std::runtime_error(what), iterations(iterations), last_beta(std::move(last_beta)), last_loss(last_loss) {}
  int iterations;
  Vector last_beta;
  double last_loss;
};

class RankDeficiencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// ELF loss parameters for every observation: common tau and lambda, and a
/// per-observation scale sigma_i = sigma0 * sigma_tilde_i.
struct ElfSetting {
  double tau = 0.5;
  double lambda = 1.0;
  Vector sigma;

  static ElfSetting constant(double tau, double lambda, double sigma, Index n) {
    return {tau, lambda, Vector::Constant(n, sigma)};
  }

  ElfParams at(Index i) const { return {tau, lambda, sigma(i)}; }
  Index size() const { return sigma.size(); }

  void validate(Index n) const {
    if (sigma.size() != n) throw std::invalid_argument("ELF scale vector has wrong length");
    ElfParams{tau, lambda, 1.0}.validate();
    for (Index i = 0; i < n; ++i) {
      if (!(sigma(i) > 0.0) || !std::isfinite(sigma(i))) throw std::invalid_argument("ELF: sigma must be positive");
    }
  }
};

inline double total_loss(const Vector& y, const Vector& eta, const ElfSetting& elf) {
  double s = 0.0;
  for (Index i = 0; i < y.size(); ++i) s += elf_loss(y(i), eta(i), elf.at(i));
  return s;
}

/// Penalised loss: sum of ELF losses plus (1/2) beta' S beta.
inline double penalized_loss(const DesignArtifacts& art, const Vector& y, const Vector& beta, const Vector& gamma,
                             const ElfSetting& elf) {
  const Vector eta = art.X * beta;
  double pen = 0.0;
  for (Index j = 0; j < art.m(); ++j) pen += gamma(j) * beta.dot(art.penalties[j].S * beta);
  return total_loss(y, eta, elf) + 0.5 * pen;
}

// ---------------------------------------------------------------------------
// Penalty determinants

/// Generalised log-determinant log|S^gamma|_+ and its rho-derivatives.
/// When penalties act on disjoint coefficient blocks the determinant
/// factorises and is computed from per-penalty constants; otherwise the
/// eigenvalues of S^gamma are used with the rank fixed at that of sum S_j.
class PenaltyStructure {
 public:
  PenaltyStructure() = default;

  explicit PenaltyStructure(const DesignArtifacts& art) : d_(art.d()) {
    const auto& pens = art.penalties;
    disjoint_ = true;
    for (std::size_t a = 0; a < pens.size(); ++a) {
      for (std::size_t b = a + 1; b < pens.size(); ++b) {
        const bool apart = pens[a].offset + pens[a].size <= pens[b].offset ||
                           pens[b].offset + pens[b].size <= pens[a].offset;
        disjoint_ = disjoint_ && apart;
      }
    }
    if (disjoint_) {
      rank_ = 0;
      for (const auto& p : pens) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(p.block(), Eigen::EigenvaluesOnly);
        const Vector ev = es.eigenvalues();
        double ld = 0.0;
        for (Index i = ev.size() - p.rank; i < ev.size(); ++i) ld += std::log(ev(i));
        unit_logdet_.push_back(ld);
        ranks_.push_back(p.rank);
        rank_ += p.rank;
      }
    } else {
      Matrix total = Matrix::Zero(d_, d_);
      for (const auto& p : pens) total += p.S;
      Eigen::SelfAdjointEigenSolver<Matrix> es(total, Eigen::EigenvaluesOnly);
      const Vector ev = es.eigenvalues();
      const double tol = static_cast<double>(d_) * std::numeric_limits<double>::epsilon() * ev.cwiseAbs().maxCoeff();
      rank_ = 0;
      for (Index i = 0; i < ev.size(); ++i) rank_ += ev(i) > tol ? 1 : 0;
      for (const auto& p : pens) ranks_.push_back(p.rank);
    }
  }

  int rank() const { return rank_; }
  Index null_dim() const { return d_ - rank_; }
  bool disjoint() const { return disjoint_; }

  double logdet(const DesignArtifacts& art, const Vector& rho) const {
    if (disjoint_) {
      double s = 0.0;
      for (std::size_t j = 0; j < ranks_.size(); ++j) s += ranks_[j] * rho(static_cast<Index>(j)) + unit_logdet_[j];
      return s;
    }
    if (rank_ == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> es(art.total_penalty(rho.array().exp().matrix()), Eigen::EigenvaluesOnly);
    const Vector ev = es.eigenvalues();
    double s = 0.0;
    for (Index i = ev.size() - rank_; i < ev.size(); ++i) s += std::log(ev(i));
    return s;
  }

  /// d log|S|_+ / d rho_j = gamma_j tr(S^+ S_j).
  Vector logdet_gradient(const DesignArtifacts& art, const Vector& rho) const {
    const Index m = art.m();
    Vector g(m);
    if (disjoint_) {
      for (Index j = 0; j < m; ++j) g(j) = ranks_[static_cast<std::size_t>(j)];
      return g;
    }
    const Vector gamma = rho.array().exp().matrix();
    Eigen::SelfAdjointEigenSolver<Matrix> es(art.total_penalty(gamma));
    const Matrix U = es.eigenvectors().rightCols(rank_);
    const Vector inv = es.eigenvalues().tail(rank_).cwiseInverse();
    const Matrix spinv = U * inv.asDiagonal() * U.transpose();
    for (Index j = 0; j < m; ++j) g(j) = gamma(j) * (spinv.cwiseProduct(art.penalties[j].S)).sum();
    return g;
  }

 private:
  Index d_ = 0;
  bool disjoint_ = true;
  int rank_ = 0;
  std::vector<int> ranks_;
  std::vector<double> unit_logdet_;
};

// ---------------------------------------------------------------------------
// PIRLS

struct PirlsOptions {
  int max_iter = 200;
  double grad_tol = 1e-10;  // on max |X' lo' + S beta|, relative to 1 + |loss|
  double rel_tol = 1e-8;    // on the change in penalised loss
  // Newton decrement g' H^-1 g, relative to 1 + |loss|. Used when heavy
  // penalties put a rounding floor under the raw gradient.
  double decrement_tol = 1e-14;
  double stability_tol = 1e-8;
};

struct PirlsState {
  Vector beta;
  Vector eta;
  Vector w;   // PIRLS weights at beta
  Vector z;   // working response (may be infinite where w underflows)
  Vector wz;  // w * z, always finite
  double loss = 0.0;            // sum of ELF losses
  double penalized_loss = 0.0;  // loss + beta' S beta / 2
  double grad_norm = 0.0;       // max-norm of the penalised-loss gradient
  int iterations = 0;
  bool converged = false;
  int fallback_solves = 0;  // iterations that needed the recomputed f
  std::vector<double> history;
  Matrix R;  // upper triangular, R'R = X'WX + S at beta
};

namespace detail {

inline Matrix penalty_root(const DesignArtifacts& art, const Vector& gamma) {
  Index rows = 0;
  for (const auto& p : art.penalties) rows += p.rank;
  Matrix E = Matrix::Zero(rows, art.d());
  Index r = 0;
  for (Index j = 0; j < art.m(); ++j) {
    const auto& p = art.penalties[j];
    E.block(r, p.offset, p.rank, p.size) = std::sqrt(gamma(j)) * p.root;
    r += p.rank;
  }
  return E;
}

struct StackedQr {
  Matrix R;
  Vector f;
  bool fallback = false;
};

/// Two-stage QR: sqrt(W) X = QcRc, then [Rc; E] = QR. Returns R and
/// f = Q1' sqrt(W) z, replaced by R^{-T} X'Wz when that product is not
/// reproduced accurately by R'f.
inline StackedQr stacked_qr(const Matrix& X, const Vector& w, const Vector& wz, const Matrix& E, double tol) {
  const Index n = X.rows(), d = X.cols();
  Vector sw(n), swz(n);
  for (Index i = 0; i < n; ++i) {
    sw(i) = std::sqrt(w(i));
    swz(i) = sw(i) > 0.0 ? wz(i) / sw(i) : 0.0;
  }
  Matrix A = sw.asDiagonal() * X;
  Eigen::HouseholderQR<Eigen::Ref<Matrix>> qr1(A);
  const Index k1 = std::min(n, d);
  Matrix stack = Matrix::Zero(k1 + E.rows(), d);
  stack.topRows(k1) = A.topRows(k1).triangularView<Eigen::Upper>();
  stack.bottomRows(E.rows()) = E;
  Vector c = qr1.householderQ().transpose() * swz;
  Vector cs = Vector::Zero(stack.rows());
  cs.head(k1) = c.head(k1);
  Eigen::HouseholderQR<Matrix> qr2(stack);
  if (stack.rows() < d) throw RankDeficiencyError("fewer rows than coefficients in the penalised least squares problem");
  StackedQr out;
  out.R = qr2.matrixQR().topRows(d).triangularView<Eigen::Upper>();
  const double rmax = out.R.diagonal().cwiseAbs().maxCoeff();
  const double rtol = static_cast<double>(d) * std::numeric_limits<double>::epsilon() * rmax;
  if (out.R.diagonal().cwiseAbs().minCoeff() <= rtol) {
    throw RankDeficiencyError("penalised design is rank deficient");
  }
  out.f = (qr2.householderQ().transpose() * cs).head(d);
  const Vector xtwz = X.transpose() * wz;
  const Vector check = out.R.transpose() * out.f;
  const double scale = std::max(xtwz.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  if (!check.allFinite() || (check - xtwz).cwiseAbs().maxCoeff() > tol * scale) {
    out.f = out.R.transpose().triangularView<Eigen::Lower>().solve(xtwz);
    out.fallback = true;
  }
  return out;
}

}  // namespace detail

/// Default starting coefficients: the tau-th sample quantile of y for the
/// intercept, zero elsewhere.
inline Vector default_beta_init(const DesignArtifacts& art, const Vector& y, double tau) {
  Vector b = Vector::Zero(art.d());
  if (art.layout.intercept && art.d() > 0 && y.size() > 0) {
    std::vector<double> s(y.data(), y.data() + y.size());
    const auto k = static_cast<std::size_t>(std::clamp(tau * static_cast<double>(s.size() - 1), 0.0,
                                                       static_cast<double>(s.size() - 1)));
    std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
    b(0) = s[k];
  }
  return b;
}

/// Minimises the penalised ELF loss for fixed smoothing parameters gamma.
inline PirlsState pirls_fit(const DesignArtifacts& art, const Vector& y, const Vector& gamma, const ElfSetting& elf,
                            const Vector& beta_init, const PirlsOptions& opt = {}) {
  const Index n = art.n(), d = art.d();
  if (y.size() != n) throw std::invalid_argument("response length does not match design");
  if (gamma.size() != art.m()) throw std::invalid_argument("wrong number of smoothing parameters");
  if (beta_init.size() != d) throw std::invalid_argument("initial coefficients have wrong length");
  for (Index j = 0; j < gamma.size(); ++j) {
    if (!(gamma(j) > 0.0) || !std::isfinite(gamma(j))) throw std::invalid_argument("smoothing parameters must be positive");
  }
  elf.validate(n);

  const Matrix S = art.total_penalty(gamma);
  const Matrix E = detail::penalty_root(art, gamma);

  PirlsState st;
  st.beta = beta_init;
  st.eta = art.X * st.beta;
  st.loss = total_loss(y, st.eta, elf);
  st.penalized_loss = st.loss + 0.5 * st.beta.dot(S * st.beta);
  st.history.push_back(st.penalized_loss);
  st.w.resize(n);
  st.z.resize(n);
  st.wz.resize(n);
  Vector d1(n);

  double prev = std::numeric_limits<double>::quiet_NaN();
  for (int it = 0; it <= opt.max_iter; ++it) {
    for (Index i = 0; i < n; ++i) {
      const auto ld = elf_loss_mu_derivatives(y(i), st.eta(i), elf.at(i));
      const auto t = pirls_terms(y(i), st.eta(i), elf.at(i));
      d1(i) = ld.d1;
      st.w(i) = t.w;
      st.z(i) = t.z;
      st.wz(i) = t.wz;
    }
    const Vector grad = art.X.transpose() * d1 + S * st.beta;
    st.grad_norm = grad.cwiseAbs().maxCoeff();
    auto qr = detail::stacked_qr(art.X, st.w, st.wz, E, opt.stability_tol);
    st.R = std::move(qr.R);
    st.iterations = it;

    const double scale = 1.0 + std::abs(st.penalized_loss);
    const Vector u = st.R.transpose().triangularView<Eigen::Lower>().solve(grad);
    const bool grad_ok = st.grad_norm <= opt.grad_tol * scale || u.squaredNorm() <= opt.decrement_tol * scale;
    const bool change_ok = it == 0 || std::abs(prev - st.penalized_loss) <= opt.rel_tol * scale;
    if (grad_ok && change_ok) {
      st.converged = true;
      return st;
    }
    if (it == opt.max_iter) break;
    st.fallback_solves += qr.fallback ? 1 : 0;

    // R^{-1} f - beta, written as a Newton step on the gradient: the two
    // agree in exact arithmetic, but f carries wz / sqrt(w), which loses
    // precision when weights underflow.
    const Vector delta = -st.R.triangularView<Eigen::Upper>().solve(u);
    double step = 1.0;
    bool accepted = false;
    for (int h = 0; h < 50; ++h) {
      const Vector b = st.beta + step * delta;
      const Vector e = art.X * b;
      const double l = total_loss(y, e, elf);
      const double pl = l + 0.5 * b.dot(S * b);
      // Within rounding of the current loss the decrease cannot be seen,
      // so such a step is taken only if it reduces the gradient.
      bool take = std::isfinite(pl) && pl < st.penalized_loss;
      if (!take && std::isfinite(pl) && pl <= st.penalized_loss + 1e-10 * scale) {
        Vector g1 = S * b;
        for (Index i = 0; i < n; ++i) g1.noalias() += art.X.row(i).transpose() * elf_loss_mu_derivatives(y(i), e(i), elf.at(i)).d1;
        take = g1.cwiseAbs().maxCoeff() < st.grad_norm;
      }
      if (take) {
        prev = st.penalized_loss;
        st.beta = b;
        st.eta = e;
        st.loss = l;
        st.penalized_loss = pl;
        st.history.push_back(pl);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // No decrease is representable: we are at the minimum up to rounding.
      st.converged = st.grad_norm <= 1e-6 * scale;
      if (st.converged) return st;
      break;
    }
  }
  throw ConvergenceError("PIRLS did not converge after " + std::to_string(st.iterations) +
                             " iterations (gradient " + std::to_string(st.grad_norm) + ")",
                         st.iterations, st.beta, st.penalized_loss);
}

// ---------------------------------------------------------------------------
// LAML

/// G_L = sum lo + beta'S beta/2 + (log|X'WX+S| - log|S|_+)/2 - M_p log(2 pi)/2.
inline double laml(const DesignArtifacts& art, const Vector& rho, const PenaltyStructure& ps, const PirlsState& st) {
  double logdet_h = 0.0;
  for (Index i = 0; i < st.R.rows(); ++i) logdet_h += std::log(std::abs(st.R(i, i)));
  logdet_h *= 2.0;
  const double logdet_s = ps.logdet(art, rho);
  return st.penalized_loss + 0.5 * (logdet_h - logdet_s) -
         0.5 * static_cast<double>(ps.null_dim()) * std::log(2.0 * std::numbers::pi);
}

inline double laml(const DesignArtifacts& art, const Vector& rho, const PirlsState& st) {
  return laml(art, rho, PenaltyStructure(art), st);
}

struct LamlGradient {
  Vector grad;
  Matrix dbeta;  // d x m, d beta / d rho
};

/// Analytic gradient of G_L in rho. The derivative of log|X'WX+S| uses
/// P = R^{-1} and T_j = diag(dw_i/drho_j), with dw/dmu taken directly from
/// the third loss derivative, so nothing is divided by a weight.
inline LamlGradient laml_gradient(const DesignArtifacts& art, const Vector& y, const Vector& rho,
                                  const ElfSetting& elf, const PenaltyStructure& ps, const PirlsState& st) {
  const Index n = art.n(), d = art.d(), m = art.m();
  const Vector gamma = rho.array().exp().matrix();
  const Matrix P = st.R.triangularView<Eigen::Upper>().solve(Matrix::Identity(d, d));
  const Matrix XP = art.X * P;
  const Vector hdiag = XP.rowwise().squaredNorm();
  Vector d3(n);
  for (Index i = 0; i < n; ++i) d3(i) = elf_loss_mu_derivatives(y(i), st.eta(i), elf.at(i)).d3;
  const Vector dlogs = ps.logdet_gradient(art, rho);

  LamlGradient out;
  out.grad.resize(m);
  out.dbeta.resize(d, m);
  for (Index j = 0; j < m; ++j) {
    const auto& pen = art.penalties[j];
    const Vector sb = pen.S * st.beta;
    const Vector db = -gamma(j) * (P * (P.transpose() * sb));
    out.dbeta.col(j) = db;
    const Vector dw = d3.cwiseProduct(art.X * db);
    const double tr_w = dw.dot(hdiag);
    const double tr_s = (pen.root * P.middleRows(pen.offset, pen.size)).squaredNorm();
    out.grad(j) = 0.5 * gamma(j) * st.beta.dot(sb) + 0.5 * (tr_w + gamma(j) * tr_s) - 0.5 * dlogs(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Covariances

struct Covariances {
  Matrix info;  // X'WX
  Matrix V;
  Matrix V_tilde;
  double edf = 0.0;
  Vector edf_per_coef;  // diag(V info)
};

/// V = (I + S)^{-1} and the sandwich V~ = (I G^{-1} I + S)^{-1}, where G is
/// the covariance of the total loss gradient. Without G, V~ = V.
inline Covariances compute_covariances(const DesignArtifacts& art, const PirlsState& st, const Vector& gamma,
                                       const std::optional<Matrix>& score_cov = std::nullopt) {
  const Index d = art.d();
  Covariances c;
  c.info = art.X.transpose() * st.w.asDiagonal() * art.X;
  c.info = 0.5 * (c.info + c.info.transpose()).eval();
  const Matrix P = st.R.triangularView<Eigen::Upper>().solve(Matrix::Identity(d, d));
  c.V = P * P.transpose();
  c.V = 0.5 * (c.V + c.V.transpose()).eval();
  c.edf_per_coef = (c.V * c.info).diagonal();
  c.edf = c.edf_per_coef.sum();
  if (!score_cov) {
    c.V_tilde = c.V;
    return c;
  }
  const Matrix S = art.total_penalty(gamma);
  Eigen::LLT<Matrix> lg(*score_cov);
  if (lg.info() != Eigen::Success) throw std::runtime_error("gradient covariance is not positive definite");
  const Matrix L = lg.matrixL().solve(c.info);
  Matrix A = L.transpose() * L + S;
  A = 0.5 * (A + A.transpose()).eval();
  Eigen::LLT<Matrix> la(A);
  if (la.info() != Eigen::Success) throw std::runtime_error("sandwich precision is not positive definite");
  c.V_tilde = la.solve(Matrix::Identity(d, d));
  c.V_tilde = 0.5 * (c.V_tilde + c.V_tilde.transpose()).eval();
  return c;
}

// ---------------------------------------------------------------------------
// Smoothing parameter selection

struct SmoothingOptions {
  int max_outer = 100;
  double grad_tol = 1e-6;  // max |dG/drho| relative to 1 + |G|
  double rel_tol = 1e-9;   // relative change of G
  double fd_step = 1e-4;   // central differences of the gradient for the Hessian
  double rho_span = 18.0;  // rho is kept within reference +- span
  double max_step = 5.0;
  PirlsOptions pirls;
};

struct QuantileFit {
  Vector beta;
  Vector gamma;
  Vector rho;
  double laml = 0.0;
  Matrix V;
  Matrix V_tilde;
  Matrix info;
  double edf = 0.0;
  Vector edf_per_coef;
  ElfSetting elf;
  Vector fitted;
  PirlsState state;
  int outer_iterations = 0;
  bool converged = false;
  std::vector<std::string> warnings;
};

namespace detail {

struct LamlPoint {
  Vector rho;
  PirlsState st;
  double G = 0.0;
  LamlGradient g;
};

}  // namespace detail

/// Reference log smoothing parameters: the log ratio of the trace of the
/// X'WX block of each penalty to the trace of the penalty.
inline Vector reference_rho(const DesignArtifacts& art, const Vector& y, const ElfSetting& elf, const Vector& beta) {
  const Vector eta = art.X * beta;
  Vector w(art.n());
  for (Index i = 0; i < art.n(); ++i) w(i) = pirls_terms(y(i), eta(i), elf.at(i)).w;
  Vector rho(art.m());
  for (Index j = 0; j < art.m(); ++j) {
    const auto& p = art.penalties[j];
    const auto xb = art.X.middleCols(p.offset, p.size);
    const double tr_info = (xb.array().square().colwise() * w.array()).sum();
    const double tr_s = p.block().trace();
    rho(j) = std::log(std::max(tr_info, std::numeric_limits<double>::min()) / tr_s);
  }
  return rho;
}

/// Outer Newton minimisation of LAML over rho. The Hessian is obtained by
/// central differences of the analytic gradient, with its eigenvalues
/// floored so that each step is a descent direction.
inline QuantileFit optimize_smoothing(const DesignArtifacts& art, const Vector& y, const ElfSetting& elf,
                                      std::optional<Vector> rho_init = std::nullopt,
                                      std::optional<Vector> beta_init = std::nullopt,
                                      const SmoothingOptions& opt = {}) {
  const Index m = art.m();
  const PenaltyStructure ps(art);
  Vector beta0 = beta_init ? *beta_init : default_beta_init(art, y, elf.tau);
  QuantileFit fit;
  fit.elf = elf;

  const Vector ref = reference_rho(art, y, elf, beta0);
  const Vector lo = ref.array() - opt.rho_span;
  const Vector hi = ref.array() + opt.rho_span;
  Vector rho = rho_init ? *rho_init : ref;
  if (rho.size() != m) throw std::invalid_argument("rho_init has wrong length");
  if (!rho.allFinite()) throw std::invalid_argument("rho_init must be finite");
  rho = rho.cwiseMax(lo).cwiseMin(hi);

  auto evaluate = [&](const Vector& r, const Vector& b0) {
    detail::LamlPoint p;
    p.rho = r;
    p.st = pirls_fit(art, y, r.array().exp().matrix(), elf, b0, opt.pirls);
    p.G = laml(art, r, ps, p.st);
    p.g = laml_gradient(art, y, r, elf, ps, p.st);
    return p;
  };

  detail::LamlPoint cur = evaluate(rho, beta0);
  int iter = 0;
  if (m > 0) {
    for (; iter < opt.max_outer; ++iter) {
      // coordinates held at a bound by the gradient are frozen
      std::vector<Index> free;
      for (Index j = 0; j < m; ++j) {
        const bool at_lo = cur.rho(j) <= lo(j) && cur.g.grad(j) > 0.0;
        const bool at_hi = cur.rho(j) >= hi(j) && cur.g.grad(j) < 0.0;
        if (!at_lo && !at_hi) free.push_back(j);
      }
      double gmax = 0.0;
      for (Index j : free) gmax = std::max(gmax, std::abs(cur.g.grad(j)));
      if (gmax <= opt.grad_tol * (1.0 + std::abs(cur.G))) {
        fit.converged = true;
        break;
      }
      const auto nf = static_cast<Index>(free.size());
      Matrix H(nf, nf);
      for (Index a = 0; a < nf; ++a) {
        const Index j = free[static_cast<std::size_t>(a)];
        Vector rp = cur.rho, rm = cur.rho;
        rp(j) += opt.fd_step;
        rm(j) -= opt.fd_step;
        const Vector bp = cur.st.beta + opt.fd_step * cur.g.dbeta.col(j);
        const Vector bm = cur.st.beta - opt.fd_step * cur.g.dbeta.col(j);
        const auto gp = evaluate(rp, bp).g.grad;
        const auto gm = evaluate(rm, bm).g.grad;
        for (Index b = 0; b < nf; ++b) {
          const Index k = free[static_cast<std::size_t>(b)];
          H(b, a) = (gp(k) - gm(k)) / (2.0 * opt.fd_step);
        }
      }
      H = 0.5 * (H + H.transpose()).eval();
      Eigen::SelfAdjointEigenSolver<Matrix> es(H);
      Vector ev = es.eigenvalues().cwiseAbs();
      const double floor = std::max(1e-6 * ev.maxCoeff(), 1e-10);
      ev = ev.cwiseMax(floor);
      Vector gf(nf);
      for (Index a = 0; a < nf; ++a) gf(a) = cur.g.grad(free[static_cast<std::size_t>(a)]);
      Vector step = -(es.eigenvectors() * (es.eigenvectors().transpose() * gf).cwiseQuotient(ev));
      const double smax = step.cwiseAbs().maxCoeff();
      if (smax > opt.max_step) step *= opt.max_step / smax;

      bool accepted = false;
      detail::LamlPoint next;
      double s = 1.0;
      for (int h = 0; h < 30; ++h) {
        Vector r = cur.rho;
        for (Index a = 0; a < nf; ++a) r(free[static_cast<std::size_t>(a)]) += s * step(a);
        r = r.cwiseMax(lo).cwiseMin(hi);
        try {
          Vector b0 = cur.st.beta + cur.g.dbeta * (r - cur.rho);
          next = evaluate(r, b0);
          if (next.G <= cur.G) {
            accepted = true;
            break;
          }
        } catch (const ConvergenceError&) {
          // treat as an uphill step
        }
        s *= 0.5;
      }
      if (!accepted) {
        fit.converged = gmax <= 1e-3 * (1.0 + std::abs(cur.G));
        if (!fit.converged) fit.warnings.push_back("smoothing parameter search stalled");
        break;
      }
      const double change = std::abs(cur.G - next.G);
      cur = std::move(next);
      if (change <= opt.rel_tol * (1.0 + std::abs(cur.G))) {
        fit.converged = true;
        ++iter;
        break;
      }
    }
    if (iter >= opt.max_outer && !fit.converged) {
      throw ConvergenceError("smoothing parameter selection did not converge after " + std::to_string(iter) +
                                 " Newton iterations",
                             iter, cur.st.beta, cur.G);
    }
    for (Index j = 0; j < m; ++j) {
      if (cur.rho(j) <= lo(j) || cur.rho(j) >= hi(j)) {
        fit.warnings.push_back("log smoothing parameter " + std::to_string(j) + " clamped at " +
                               std::to_string(cur.rho(j)));
      }
    }
  } else {
    fit.converged = cur.st.converged;
  }

  fit.rho = cur.rho;
  fit.gamma = cur.rho.array().exp().matrix();
  fit.beta = cur.st.beta;
  fit.laml = cur.G;
  fit.outer_iterations = iter;
  fit.fitted = cur.st.eta;
  const auto cov = compute_covariances(art, cur.st, fit.gamma);
  fit.V = cov.V;
  fit.V_tilde = cov.V_tilde;
  fit.info = cov.info;
  fit.edf = cov.edf;
  fit.edf_per_coef = cov.edf_per_coef;
  fit.state = std::move(cur.st);
  return fit;
}

/// Refits beta only (gamma fixed) and fills the covariance fields.
inline QuantileFit fit_fixed_gamma(const DesignArtifacts& art, const Vector& y, const ElfSetting& elf,
                                   const Vector& gamma, const Vector& beta_init, const PirlsOptions& opt = {}) {
  QuantileFit fit;
  fit.elf = elf;
  fit.state = pirls_fit(art, y, gamma, elf, beta_init, opt);
  fit.gamma = gamma;
  fit.rho = gamma.array().log().matrix();
  fit.beta = fit.state.beta;
  fit.fitted = fit.state.eta;
  fit.laml = laml(art, fit.rho, fit.state);
  fit.converged = fit.state.converged;
  const auto cov = compute_covariances(art, fit.state, gamma);
  fit.V = cov.V;
  fit.V_tilde = cov.V_tilde;
  fit.info = cov.info;
  fit.edf = cov.edf;
  fit.edf_per_coef = cov.edf_per_coef;
  return fit;
}

// ---------------------------------------------------------------------------
// Gaussian additive model by REML

struct GaussianFit {
  Vector beta;
  Vector rho;
  Vector fitted;
  Matrix Vp;  // scale * (X'X + S)^{-1}
  double scale = 0.0;
  double edf = 0.0;
  double reml = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Penalised least squares with smoothing parameters chosen by REML (scale
/// profiled out).
inline GaussianFit gaussian_gam(const DesignArtifacts& art, const Vector& y, const SmoothingOptions& opt = {}) {
  const Index n = art.n(), d = art.d(), m = art.m();
  if (y.size() != n) throw std::invalid_argument("response length does not match design");
  const PenaltyStructure ps(art);
  const Matrix xtx = art.X.transpose() * art.X;
  const Vector xty = art.X.transpose() * y;
  const double nm = static_cast<double>(n - ps.null_dim());
  if (nm <= 0.0) throw std::invalid_argument("too few observations for the Gaussian model");

  struct Point {
    Vector rho, beta, grad;
    Eigen::LLT<Matrix> llt;
    double D = 0.0, value = 0.0;
  };
  auto evaluate = [&](const Vector& rho) {
    Point p;
    p.rho = rho;
    const Vector gamma = rho.array().exp().matrix();
    const Matrix S = art.total_penalty(gamma);
    p.llt.compute(xtx + S);
    if (p.llt.info() != Eigen::Success) throw RankDeficiencyError("X'X + S is not positive definite");
    p.beta = p.llt.solve(xty);
    const Vector r = y - art.X * p.beta;
    p.D = r.squaredNorm() + p.beta.dot(S * p.beta);
    if (!(p.D > 0.0)) throw std::runtime_error("Gaussian model fits the data exactly");
    const Matrix L = p.llt.matrixL();
    const double logdet_h = 2.0 * L.diagonal().array().log().sum();
    p.value = 0.5 * nm * std::log(p.D) + 0.5 * logdet_h - 0.5 * ps.logdet(art, rho);
    const Vector dls = ps.logdet_gradient(art, rho);
    const Matrix hinv = p.llt.solve(Matrix::Identity(d, d));
    p.grad.resize(m);
    for (Index j = 0; j < m; ++j) {
      const auto& pen = art.penalties[j];
      const double bsb = p.beta.dot(pen.S * p.beta);
      const double tr = (hinv.cwiseProduct(pen.S)).sum();
      p.grad(j) = 0.5 * nm * gamma(j) * bsb / p.D + 0.5 * gamma(j) * tr - 0.5 * dls(j);
    }
    return p;
  };

  // start with penalties on the scale of X'X
  Vector rho(m);
  for (Index j = 0; j < m; ++j) {
    const auto& pen = art.penalties[j];
    rho(j) = std::log(xtx.block(pen.offset, pen.offset, pen.size, pen.size).trace() / pen.block().trace());
  }
  const Vector lo = rho.array() - opt.rho_span;
  const Vector hi = rho.array() + opt.rho_span;

  GaussianFit out;
  Point cur = evaluate(rho);
  int iter = 0;
  for (; m > 0 && iter < opt.max_outer; ++iter) {
    std::vector<Index> free;
    for (Index j = 0; j < m; ++j) {
      const bool at_lo = cur.rho(j) <= lo(j) && cur.grad(j) > 0.0;
      const bool at_hi = cur.rho(j) >= hi(j) && cur.grad(j) < 0.0;
      if (!at_lo && !at_hi) free.push_back(j);
    }
    double gmax = 0.0;
    for (Index j : free) gmax = std::max(gmax, std::abs(cur.grad(j)));
    if (gmax <= opt.grad_tol * (1.0 + std::abs(cur.value))) {
      out.converged = true;
      break;
    }
    const auto nf = static_cast<Index>(free.size());
    Matrix H(nf, nf);
    for (Index a = 0; a < nf; ++a) {
      const Index j = free[static_cast<std::size_t>(a)];
      Vector rp = cur.rho, rm = cur.rho;
      rp(j) += opt.fd_step;
      rm(j) -= opt.fd_step;
      const Vector gp = evaluate(rp).grad, gm = evaluate(rm).grad;
      for (Index b = 0; b < nf; ++b) {
        const Index k = free[static_cast<std::size_t>(b)];
        H(b, a) = (gp(k) - gm(k)) / (2.0 * opt.fd_step);
      }
    }
    H = 0.5 * (H + H.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> es(H);
    Vector ev = es.eigenvalues().cwiseAbs();
    ev = ev.cwiseMax(std::max(1e-6 * ev.maxCoeff(), 1e-10));
    Vector gf(nf);
    for (Index a = 0; a < nf; ++a) gf(a) = cur.grad(free[static_cast<std::size_t>(a)]);
    Vector step = -(es.eigenvectors() * (es.eigenvectors().transpose() * gf).cwiseQuotient(ev));
    const double smax = step.cwiseAbs().maxCoeff();
    if (smax > opt.max_step) step *= opt.max_step / smax;
    bool accepted = false;
    Point next;
    double s = 1.0;
    for (int h = 0; h < 30; ++h) {
      Vector r = cur.rho;
      for (Index a = 0; a < nf; ++a) r(free[static_cast<std::size_t>(a)]) += s * step(a);
      r = r.cwiseMax(lo).cwiseMin(hi);
      next = evaluate(r);
      if (next.value <= cur.value) {
        accepted = true;
        break;
      }
      s *= 0.5;
    }
    if (!accepted) {
      out.converged = gmax <= 1e-3 * (1.0 + std::abs(cur.value));
      break;
    }
    const double change = std::abs(cur.value - next.value);
    cur = std::move(next);
    if (change <= opt.rel_tol * (1.0 + std::abs(cur.value))) {
      out.converged = true;
      ++iter;
      break;
    }
  }
  if (m == 0) out.converged = true;
  out.iterations = iter;
  out.rho = cur.rho;
  out.beta = cur.beta;
  out.fitted = art.X * cur.beta;
  out.reml = cur.value;
  out.scale = cur.D / nm;
  const Matrix hinv = cur.llt.solve(Matrix::Identity(d, d));
  out.edf = (hinv.cwiseProduct(xtx)).sum();
  out.Vp = out.scale * hinv;
  return out;
}

}  // namespace elfqr
