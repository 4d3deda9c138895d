#pragma once

// Small optimisers: Brent's derivative-free 1-d minimiser with an absolute
// x tolerance, and BFGS with a backtracking Armijo line search.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>

namespace elfqr {

struct BrentResult {
  double x = 0.0;
  double fx = 0.0;
  int evaluations = 0;
  bool converged = false;
};

/// Minimises f on [a, b] to absolute tolerance `tol` in x. Golden-section
/// steps are taken whenever the parabolic step is not acceptable.
/// Non-finite function values are treated as +inf.
template <class F>
BrentResult brent_minimize(F&& f, double a, double b, double tol, int max_iter = 100) {
  constexpr double golden = 0.3819660112501051;  // (3 - sqrt 5) / 2
  const double eps = std::sqrt(std::numeric_limits<double>::epsilon());
  BrentResult res;
  auto eval = [&](double x) {
    ++res.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };
  if (a > b) std::swap(a, b);
  double x = a + golden * (b - a);
  double w = x, v = x;
  double fx = eval(x);
  double fw = fx, fv = fx;
  double d = 0.0, e = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const double m = 0.5 * (a + b);
    const double tol1 = eps * std::abs(x) + tol / 3.0;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - m) <= tol2 - 0.5 * (b - a)) {
      res.converged = true;
      break;
    }
    bool golden_step = true;
    if (std::abs(e) > tol1) {
      // fit a parabola through x, w, v
      double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::abs(q);
      const double etemp = e;
      e = d;
      if (std::abs(p) < std::abs(0.5 * q * etemp) && p > q * (a - x) && p < q * (b - x)) {
        d = p / q;
        const double u = x + d;
        if (u - a < tol2 || b - u < tol2) d = x < m ? tol1 : -tol1;
        golden_step = false;
      }
    }
    if (golden_step) {
      e = (x < m ? b : a) - x;
      d = golden * e;
    }
    const double u = x + (std::abs(d) >= tol1 ? d : (d > 0.0 ? tol1 : -tol1));
    const double fu = eval(u);
    if (fu <= fx) {
      (u < x ? b : a) = x;
      v = w;
      fv = fw;
      w = x;
      fw = fx;
      x = u;
      fx = fu;
    } else {
      (u < x ? a : b) = u;
      if (fu <= fw || w == x) {
        v = w;
        fv = fw;
        w = u;
        fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u;
        fv = fu;
      }
    }
  }
  res.x = x;
  res.fx = fx;
  return res;
}

struct BfgsResult {
  Eigen::VectorXd x;
  double fx = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Quasi-Newton minimisation. `fg(x, grad)` returns f(x) and fills grad.
/// Converges when the max-norm of the gradient drops below gtol * (1 + |f|).
inline BfgsResult bfgs_minimize(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fg,
                                Eigen::VectorXd x, double gtol = 1e-8, int max_iter = 500) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd g(n), g_new(n);
  double f = fg(x, g);
  BfgsResult res;
  if (!std::isfinite(f)) {
    res.x = x;
    res.fx = f;
    return res;
  }
  for (int it = 0; it < max_iter; ++it) {
    res.iterations = it;
    if (g.cwiseAbs().maxCoeff() <= gtol * (1.0 + std::abs(f))) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd p = -hinv * g;
    double slope = g.dot(p);
    if (slope >= 0.0) {
      hinv.setIdentity();
      p = -g;
      slope = -g.squaredNorm();
    }
    double step = 1.0;
    Eigen::VectorXd x_new;
    double f_new = f;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      x_new = x + step * p;
      f_new = fg(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // no decrease possible along p: accept stationarity to rounding
      res.converged = g.cwiseAbs().maxCoeff() <= 1e3 * gtol * (1.0 + std::abs(f));
      break;
    }
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (it == 0) hinv *= sy / yv.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      hinv = (I - rho * s * yv.transpose()) * hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    const double f_old = f;
    x = x_new;
    f = f_new;
    g = g_new;
    if (std::abs(f_old - f) <= 1e-15 * (1.0 + std::abs(f)) && g.cwiseAbs().maxCoeff() <= 1e3 * gtol * (1.0 + std::abs(f))) {
      res.converged = true;
      break;
    }
  }
  res.x = x;
  res.fx = f;
  return res;
}

}  // namespace elfqr
