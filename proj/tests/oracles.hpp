#pragma once

// Independent numerical oracles shared by the unit and acceptance tests.
// None of these call into the library's numerical code paths.

#include <Eigen/Dense>
#include <boost/multiprecision/cpp_bin_float.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace oracle {

using big = boost::multiprecision::cpp_bin_float_50;

/// Ridders' extrapolated central difference of f at x with initial step h.
template <class F>
double ridders(F&& f, double x, double h, double* err_out = nullptr) {
  constexpr int ntab = 12;
  constexpr double con = 1.4, con2 = con * con, safe = 2.0;
  double a[ntab][ntab];
  double hh = h;
  a[0][0] = (f(x + hh) - f(x - hh)) / (2.0 * hh);
  double err = std::numeric_limits<double>::max();
  double ans = a[0][0];
  for (int i = 1; i < ntab; ++i) {
    hh /= con;
    a[0][i] = (f(x + hh) - f(x - hh)) / (2.0 * hh);
    double fac = con2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= con2;
      const double errt = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (errt <= err) {
        err = errt;
        ans = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= safe * err) break;
  }
  if (err_out) *err_out = err;
  return ans;
}

/// Ridders differences from several starting steps; keeps the estimate with
/// the smallest internal error.
template <class F>
double ridders_best(F&& f, double x, double h) {
  double best = 0.0, best_err = std::numeric_limits<double>::max();
  for (double scale : {1.0, 0.25, 0.0625, 0.015625}) {
    double err = 0.0;
    const double v = ridders(f, x, h * scale, &err);
    if (err < best_err) {
      best_err = err;
      best = v;
    }
  }
  return best;
}

/// ELF loss in 50-digit arithmetic.
inline big elf_loss_big(double y, double mu, double tau, double lambda, double sigma) {
  const big u = big(y) - big(mu);
  const big s = big(sigma), l = big(lambda);
  return (big(tau) - 1) * u / s + l * boost::multiprecision::log1p(boost::multiprecision::exp(u / (l * s)));
}

/// Nelder-Mead simplex minimiser with restarts.
inline Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x0,
                                   double step, double ftol = 1e-15, int max_eval = 400000, int restarts = 6) {
  const Eigen::Index n = x0.size();
  Eigen::VectorXd best = x0;
  int evals = 0;
  for (int r = 0; r < restarts && evals < max_eval; ++r) {
    std::vector<Eigen::VectorXd> s(static_cast<std::size_t>(n + 1), best);
    std::vector<double> fv(static_cast<std::size_t>(n + 1));
    for (Eigen::Index i = 0; i < n; ++i) s[static_cast<std::size_t>(i + 1)](i) += step;
    for (std::size_t i = 0; i < s.size(); ++i) fv[i] = f(s[i]);
    evals += static_cast<int>(n + 1);
    std::vector<std::size_t> order(s.size());
    for (; evals < max_eval;) {
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto a, auto b) { return fv[a] < fv[b]; });
      const auto ib = order.front(), iw = order.back(), isw = order[order.size() - 2];
      if (std::abs(fv[iw] - fv[ib]) <= ftol * (std::abs(fv[ib]) + 1e-300)) break;
      Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
      for (std::size_t i = 0; i < s.size(); ++i)
        if (i != iw) c += s[i];
      c /= static_cast<double>(n);
      const Eigen::VectorXd xr = c + (c - s[iw]);
      const double fr = f(xr);
      ++evals;
      if (fr < fv[ib]) {
        const Eigen::VectorXd xe = c + 2.0 * (c - s[iw]);
        const double fe = f(xe);
        ++evals;
        if (fe < fr) {
          s[iw] = xe;
          fv[iw] = fe;
        } else {
          s[iw] = xr;
          fv[iw] = fr;
        }
      } else if (fr < fv[isw]) {
        s[iw] = xr;
        fv[iw] = fr;
      } else {
        const bool outside = fr < fv[iw];
        const Eigen::VectorXd xc = outside ? Eigen::VectorXd(c + 0.5 * (xr - c)) : Eigen::VectorXd(c + 0.5 * (s[iw] - c));
        const double fc = f(xc);
        ++evals;
        if (fc < (outside ? fr : fv[iw])) {
          s[iw] = xc;
          fv[iw] = fc;
        } else {
          for (std::size_t i = 0; i < s.size(); ++i) {
            if (i == ib) continue;
            s[i] = s[ib] + 0.5 * (s[i] - s[ib]);
            fv[i] = f(s[i]);
            ++evals;
          }
        }
      }
    }
    std::size_t ib = 0;
    for (std::size_t i = 1; i < s.size(); ++i)
      if (fv[i] < fv[ib]) ib = i;
    best = s[ib];
    step *= 0.1;
  }
  return best;
}

/// Gamma(shape, 1) cdf by series / continued fraction in long double.
inline double gamma_cdf(double x, double a) {
  if (x <= 0.0) return 0.0;
  const long double lx = x, la = a;
  const long double lg = std::lgamma(la);
  if (x < a + 1.0) {
    long double sum = 1.0L / la, term = sum;
    for (int n = 1; n < 10000; ++n) {
      term *= lx / (la + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-19L) break;
    }
    return static_cast<double>(sum * std::exp(-lx + la * std::log(lx) - lg));
  }
  // Lentz continued fraction for the upper tail
  long double b = lx + 1.0L - la, c = 1.0L / 1e-300L, d = 1.0L / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const long double an = -i * (i - la);
    b += 2.0L;
    d = an * d + b;
    if (std::abs(d) < 1e-300L) d = 1e-300L;
    c = b + an / c;
    if (std::abs(c) < 1e-300L) c = 1e-300L;
    d = 1.0L / d;
    const long double del = d * c;
    h *= del;
    if (std::abs(del - 1.0L) < 1e-19L) break;
  }
  return static_cast<double>(1.0L - std::exp(-lx + la * std::log(lx) - lg) * h);
}

/// Gamma(shape, 1) quantile by bisection on the cdf.
inline double gamma_quantile(double p, double a) {
  double lo = 0.0, hi = a + 50.0 * std::sqrt(a) + 50.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (gamma_cdf(mid, a) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Standard normal quantile by bisection on erfc.
inline double normal_quantile(double p) {
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace oracle
