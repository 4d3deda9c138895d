#pragma once

// Simulation harness for the additive model with gamma(3, 1) noise:
// y = x + x^2 - z + 2 sin z + 0.1 v^3 + 3 cos v + e.

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "elfqr/calibrate.hpp"
#include "elfqr/data.hpp"
#include "elfqr/parallel.hpp"
#include "elfqr/rng.hpp"

namespace elfqr {

struct SimulatedData {
  DataTable data;  // columns y, x, z, v
  Vector truth;    // additive part, without noise
};

inline double additive_truth(double x, double z, double v) {
  return x + x * x - z + 2.0 * std::sin(z) + 0.1 * v * v * v + 3.0 * std::cos(v);
}

inline SimulatedData simulate_additive_gamma(Index n, std::uint64_t seed) {
  Philox4x32 rng(seed);
  std::vector<double> y(static_cast<std::size_t>(n)), x(y.size()), z(y.size()), v(y.size());
  SimulatedData out;
  out.truth.resize(n);
  for (std::size_t i = 0; i < y.size(); ++i) {
    x[i] = rng.uniform(-4.0, 4.0);
    z[i] = rng.uniform(-8.0, 8.0);
    v[i] = rng.uniform(-4.0, 4.0);
    const double f = additive_truth(x[i], z[i], v[i]);
    out.truth(static_cast<Index>(i)) = f;
    y[i] = f + rng.gamma(3.0);
  }
  out.data.add("y", y);
  out.data.add("x", x);
  out.data.add("z", z);
  out.data.add("v", v);
  return out;
}

/// tau-quantile of the gamma(3, 1) noise.
inline double gamma3_quantile(double tau) { return boost::math::gamma_p_inv(3.0, tau); }

inline ModelSpec additive_spec(int rank = 30) {
  ModelSpec s;
  s.response = "y";
  for (const char* v : {"x", "z", "v"}) s.terms.push_back({TermKind::Smooth, v, rank});
  return s;
}

struct SimulationConfig {
  std::string scenario = "additive_gamma";
  Index n = 1000;
  int reps = 20;
  std::vector<double> taus{0.5};
  std::uint64_t seed = 1;
  std::vector<double> levels{0.5, 0.75, 0.95};
  int rank = 30;
  QuantileOptions options;
};

struct SimulationRecord {
  int rep = 0;
  double tau = 0.0;
  bool ok = false;
  std::string error;
  double rmse = 0.0;
  std::vector<double> coverage;  // aligned with levels, V-based intervals
  double sigma0 = 0.0, lambda = 0.0, edf = 0.0;
  double seconds = 0.0;  // not written to the CSV
};

struct SimulationReport {
  SimulationConfig config;
  std::vector<SimulationRecord> records;  // rep-major, then tau
  int failures() const {
    int f = 0;
    for (const auto& r : records) f += r.ok ? 0 : 1;
    return f;
  }
};

inline std::uint64_t replicate_seed(std::uint64_t seed, int rep) { return seed + static_cast<std::uint64_t>(rep); }

/// Fits every tau on every replicate. Replicates run through the parallel
/// map; each writes only its own records.
inline SimulationReport run_simulation(const SimulationConfig& cfg) {
  if (cfg.scenario != "additive_gamma") throw std::invalid_argument("unknown scenario '" + cfg.scenario + "'");
  if (cfg.reps < 1) throw std::invalid_argument("replicates must be >= 1");
  for (double l : cfg.levels)
    if (!(l > 0.0 && l < 1.0)) throw std::invalid_argument("interval levels must lie in (0, 1)");
  SimulationReport rep;
  rep.config = cfg;
  const std::size_t nt = cfg.taus.size();
  rep.records.resize(static_cast<std::size_t>(cfg.reps) * nt);
  const ModelSpec spec = additive_spec(cfg.rank);
  parallel_for(static_cast<std::size_t>(cfg.reps), [&](std::size_t r) {
    const auto sim = simulate_additive_gamma(cfg.n, replicate_seed(cfg.seed, static_cast<int>(r)));
    std::optional<QuantilePipeline> pipe;
    std::string setup_error;
    try {
      pipe.emplace(spec, sim.data);
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    for (std::size_t t = 0; t < nt; ++t) {
      auto& rec = rep.records[r * nt + t];
      rec.rep = static_cast<int>(r);
      rec.tau = cfg.taus[t];
      if (!pipe) {
        rec.error = setup_error;
        continue;
      }
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto res = pipe->fit(rec.tau, cfg.options);
        const Vector truth = sim.truth.array() + gamma3_quantile(rec.tau);
        const Vector& fitted = res.fit.fitted;
        rec.rmse = std::sqrt((fitted - truth).squaredNorm() / static_cast<double>(truth.size()));
        for (double l : cfg.levels) {
          const auto ci = credible_interval(pipe->design().X, res.fit.beta, res.fit.V, l);
          const auto inside = ((truth.array() >= ci.lower.array()) && (truth.array() <= ci.upper.array())).count();
          rec.coverage.push_back(static_cast<double>(inside) / static_cast<double>(truth.size()));
        }
        rec.sigma0 = res.sigma0;
        rec.lambda = res.lambda;
        rec.edf = res.fit.edf;
        rec.ok = true;
      } catch (const std::exception& e) {
        rec.error = e.what();
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  });
  return rep;
}

/// Long format: one row per (replicate, tau). Failed fits keep their row
/// with ok = 0 and empty metrics.
inline void write_simulation_csv(std::ostream& out, const SimulationReport& rep) {
  const auto& c = rep.config;
  out << "scenario,n,method,rep,tau,ok,sigma0,lambda,edf,rmse";
  for (double l : c.levels) out << ",coverage_" << DataTable::format_number(l);
  out << '\n';
  for (const auto& r : rep.records) {
    out << c.scenario << ',' << c.n << ',' << method_name(c.options.calibration.method) << ',' << r.rep << ','
        << DataTable::format_number(r.tau) << ',' << (r.ok ? 1 : 0);
    if (r.ok) {
      out << ',' << DataTable::format_number(r.sigma0) << ',' << DataTable::format_number(r.lambda) << ','
          << DataTable::format_number(r.edf) << ',' << DataTable::format_number(r.rmse);
      for (double v : r.coverage) out << ',' << DataTable::format_number(v);
    } else {
      out << ",,,,";
      for (std::size_t i = 0; i < c.levels.size(); ++i) out << ',';
    }
    out << '\n';
  }
}

struct SimulationSummary {
  double tau = 0.0;
  int ok = 0, failed = 0;
  double rmse_mean = 0.0, rmse_sd = 0.0;
  std::vector<double> coverage_mean;
  double seconds_mean = 0.0;
};

inline std::vector<SimulationSummary> summarize(const SimulationReport& rep) {
  std::vector<SimulationSummary> out;
  for (double tau : rep.config.taus) {
    SimulationSummary s;
    s.tau = tau;
    s.coverage_mean.assign(rep.config.levels.size(), 0.0);
    std::vector<double> rm;
    for (const auto& r : rep.records) {
      if (r.tau != tau) continue;
      if (!r.ok) {
        ++s.failed;
        continue;
      }
      ++s.ok;
      rm.push_back(r.rmse);
      s.seconds_mean += r.seconds;
      for (std::size_t l = 0; l < r.coverage.size(); ++l) s.coverage_mean[l] += r.coverage[l];
    }
    if (s.ok > 0) {
      for (double v : rm) s.rmse_mean += v;
      s.rmse_mean /= s.ok;
      for (double v : rm) s.rmse_sd += (v - s.rmse_mean) * (v - s.rmse_mean);
      s.rmse_sd = s.ok > 1 ? std::sqrt(s.rmse_sd / (s.ok - 1)) : 0.0;
      for (double& cv : s.coverage_mean) cv /= s.ok;
      s.seconds_mean /= s.ok;
    }
    out.push_back(s);
  }
  return out;
}

/// Mean (sd) RMSE per tau, as rows of a table, plus mean coverage.
inline void print_summary(std::ostream& out, const SimulationReport& rep) {
  const auto sums = summarize(rep);
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %-16s %-6s %-6s", "tau", "RMSE mean(sd)", "ok", "failed");
  out << buf;
  for (double l : rep.config.levels) {
    std::snprintf(buf, sizeof buf, " cover@%-5g", l);
    out << buf;
  }
  out << "  sec/fit\n";
  for (const auto& s : sums) {
    std::snprintf(buf, sizeof buf, "%-8g %.3f(%.3f)     %-6d %-6d", s.tau, s.rmse_mean, s.rmse_sd, s.ok, s.failed);
    out << buf;
    for (double c : s.coverage_mean) {
      std::snprintf(buf, sizeof buf, " %-11.3f", c);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "  %.2f\n", s.seconds_mean);
    out << buf;
  }
}

}  // namespace elfqr
