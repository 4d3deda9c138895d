// elfqr: fit, predict, simulate and calibrate-trace subcommands.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "elfqr/elfqr.hpp"

using namespace elfqr;

namespace {

struct CommonFitArgs {
  std::string data, spec;
  std::string method = "sandwich";
  int k = 100;
  std::uint64_t seed = 1;
  std::vector<double> bracket;
  double zeta = 0.5;
  double eps = 0.01, delta = 0.05;

  void add(CLI::App* app) {
    app->add_option("--data", data, "CSV file with a header row")->required()->check(CLI::ExistingFile);
    app->add_option("--spec", spec, "model spec JSON")->required()->check(CLI::ExistingFile);
    app->add_option("--method", method, "sandwich | bootstrap | laml")->check(CLI::IsMember({"sandwich", "bootstrap", "laml"}));
    app->add_option("--k", k, "bootstrap replicates")->check(CLI::Range(2, 100000));
    app->add_option("--seed", seed, "bootstrap seed");
    app->add_option("--bracket", bracket, "log sigma0 search bracket lo,hi")->delimiter(',')->expected(2);
    app->add_option("--zeta", zeta, "IKL exponent in (0, 1]")->check(CLI::Range(1e-12, 1.0));
    app->add_option("--eps", eps, "mode-proximity threshold in sd units");
    app->add_option("--delta", delta, "quantile shift near the mode");
  }

  QuantileOptions options() const {
    QuantileOptions o;
    o.calibration.method = parse_method(method);
    o.calibration.boot_k = k;
    o.calibration.seed = seed;
    o.calibration.zeta = zeta;
    if (bracket.size() == 2) o.calibration.bracket = std::make_pair(bracket[0], bracket[1]);
    o.bandwidth.eps_factor = eps;
    o.bandwidth.delta = delta;
    return o;
  }
};

ModelSpec read_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw SpecError("'" + path + "' is not valid JSON: " + e.what());
  }
  return ModelSpec::from_json(j);
}

void check_taus(const std::vector<double>& taus) {
  if (taus.empty()) throw std::invalid_argument("no tau given");
  for (double t : taus)
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
}

void print_fit_summary(std::ostream& out, const DesignArtifacts& art, const QuantileResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "tau = %g  sigma0 = %.6g  lambda = %.6g  edf = %.3f  (%s)\n", r.tau, r.sigma0,
                r.lambda, r.fit.edf, method_name(r.trace.method));
  out << buf;
  std::snprintf(buf, sizeof buf, "  bandwidth h_z = %.6g at tau %g%s; %zu sigma0 evaluations, %d Newton steps, %d PIRLS steps\n",
                r.bandwidth.diag.h_z_star, r.bandwidth.diag.tau_used, r.bandwidth.diag.shifted ? " (shifted)" : "",
                r.trace.points.size(), r.fit.outer_iterations, r.fit.state.iterations);
  out << buf;
  if (art.layout.intercept) {
    std::snprintf(buf, sizeof buf, "  %-20s edf %.3f\n", "(intercept)", r.fit.edf_per_coef(0));
    out << buf;
  }
  for (const auto& t : art.layout.terms) {
    const double e = r.fit.edf_per_coef.segment(t.first_col, t.ncols).sum();
    const std::string label = std::string(t.kind == TermKind::Smooth ? "s(" : t.kind == TermKind::Factor ? "f(" : "") +
                              t.var + (t.kind == TermKind::Linear ? "" : ")");
    std::snprintf(buf, sizeof buf, "  %-20s edf %.3f\n", label.c_str(), e);
    out << buf;
  }
  for (const auto& w : r.warnings) out << "  warning: " << w << '\n';
}

int cmd_fit(const CommonFitArgs& a, const std::vector<double>& taus, const std::string& out_path) {
  check_taus(taus);
  const auto spec = read_spec(a.spec);
  const auto data = read_csv(a.data);
  QuantilePipeline pipe(spec, data);
  const auto res = pipe.fit_many(taus, a.options());
  std::vector<const QuantileResult*> ok;
  for (std::size_t i = 0; i < res.taus.size(); ++i) {
    if (res.fits[i]) {
      ok.push_back(&*res.fits[i]);
      print_fit_summary(std::cout, pipe.design(), *res.fits[i]);
    }
  }
  for (const auto& w : pipe.design().warnings) std::cout << "warning: " << w << '\n';
  if (taus.size() > 1) std::cout << "quantile crossings: " << res.crossings << '\n';
  for (const auto& [tau, msg] : res.failures) std::cerr << "error: tau = " << tau << ": " << msg << '\n';
  if (!ok.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write '" + out_path + "'");
    out << model_json(spec, pipe.design().layout, ok).dump(1) << '\n';
  }
  return res.failures.empty() ? 0 : 1;
}

int cmd_predict(const std::string& model_path, const std::string& data_path, const std::vector<double>& levels,
                bool sandwich, const std::string& out_path) {
  const auto model = load_model(model_path);
  const auto data = read_csv(data_path);
  std::vector<std::string> flags;
  const auto table = predict_table(model, data, levels, sandwich, &flags);
  for (const auto& f : flags) std::cerr << "note: " << f << '\n';
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write '" + out_path + "'");
  write_csv(out, table);
  return 0;
}

int cmd_simulate(SimulationConfig cfg, const std::string& method, int k, const std::string& out_path) {
  check_taus(cfg.taus);
  cfg.options.calibration.method = parse_method(method);
  cfg.options.calibration.boot_k = k;
  const auto rep = run_simulation(cfg);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write '" + out_path + "'");
  write_simulation_csv(out, rep);
  print_summary(std::cout, rep);
  for (const auto& r : rep.records)
    if (!r.ok) std::cerr << "replicate " << r.rep << ", tau " << r.tau << " failed: " << r.error << '\n';
  if (rep.failures() > 0) std::cerr << rep.failures() << " fit(s) failed and were excluded\n";
  return 0;
}

int cmd_trace(const CommonFitArgs& a, double tau, int grid, const std::string& out_path) {
  check_taus({tau});
  const auto spec = read_spec(a.spec);
  const auto data = read_csv(a.data);
  QuantilePipeline pipe(spec, data);
  auto opt = a.options();
  auto ctx = pipe.context(tau, opt);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write '" + out_path + "'");
  out << "log_sigma0,sigma0,value,converged,selected\n";
  auto row = [&](double ls, double v, bool conv, bool sel) {
    out << DataTable::format_number(ls) << ',' << DataTable::format_number(std::exp(ls)) << ','
        << (std::isfinite(v) ? DataTable::format_number(v) : std::string()) << ',' << (conv ? 1 : 0) << ','
        << (sel ? 1 : 0) << '\n';
  };
  if (grid > 1) {
    // independent evaluations on an even grid over the bracket
    const auto [lo, hi] = ctx.bracket();
    const auto samples = opt.calibration.method == CalibrationMethod::Bootstrap
                             ? bootstrap_indices(ctx.design().n(), opt.calibration.boot_k, opt.calibration.seed)
                             : std::vector<std::vector<Index>>{};
    for (int g = 0; g < grid; ++g) {
      const double ls = lo + (hi - lo) * g / (grid - 1);
      double v = std::numeric_limits<double>::quiet_NaN();
      bool conv = false;
      try {
        switch (opt.calibration.method) {
          case CalibrationMethod::Sandwich: {
            const auto e = ctx.sandwich(std::exp(ls));
            v = e.value;
            conv = e.converged;
            break;
          }
          case CalibrationMethod::Bootstrap: {
            const auto e = ctx.bootstrap(std::exp(ls), samples);
            v = e.value;
            conv = e.converged;
            break;
          }
          case CalibrationMethod::LamlComparator: {
            const auto e = ctx.laml(std::exp(ls));
            v = e.value;
            conv = e.converged;
            break;
          }
        }
      } catch (const std::exception& e) {
        std::cerr << "log sigma0 = " << ls << ": " << e.what() << '\n';
      }
      row(ls, v, conv, false);
    }
    return 0;
  }
  const auto cal = calibrate(ctx);
  for (const auto& p : cal.trace.points) row(p.log_sigma0, p.value, p.converged, std::exp(p.log_sigma0) == cal.trace.sigma0);
  std::cout << "selected sigma0 = " << cal.trace.sigma0 << " (" << method_name(cal.trace.method) << ")\n";
  for (const auto& w : cal.trace.warnings) std::cout << "warning: " << w << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Additive quantile regression with the ELF loss"};
  app.require_subcommand(1);

  CommonFitArgs fit_args;
  std::vector<double> fit_taus{0.5};
  std::string fit_out = "model.json";
  auto* fit = app.add_subcommand("fit", "fit one or more quantiles and write a model file");
  fit_args.add(fit);
  fit->add_option("--tau", fit_taus, "quantile level(s), comma separated")->delimiter(',');
  fit->add_option("--out", fit_out, "model file");

  std::string model_path, pred_data, pred_out = "predictions.csv";
  std::vector<double> levels{0.95};
  bool sandwich = false;
  auto* pred = app.add_subcommand("predict", "predict quantiles and credible intervals");
  pred->add_option("--model", model_path, "model file")->required()->check(CLI::ExistingFile);
  pred->add_option("--data", pred_data, "CSV with the model covariates")->required()->check(CLI::ExistingFile);
  pred->add_option("--levels", levels, "interval levels in (0, 1)")->delimiter(',');
  pred->add_flag("--sandwich", sandwich, "use the sandwich covariance");
  pred->add_option("--out", pred_out, "output CSV");

  SimulationConfig sim;
  std::string sim_method = "sandwich", sim_out = "report.csv";
  int sim_k = 100;
  Index sim_n = 1000;
  auto* simc = app.add_subcommand("simulate", "run the simulation study");
  simc->add_option("--scenario", sim.scenario, "additive_gamma")->check(CLI::IsMember({"additive_gamma"}));
  simc->add_option("--n", sim_n, "observations per replicate")->check(CLI::PositiveNumber);
  simc->add_option("--reps", sim.reps, "replicates")->check(CLI::PositiveNumber);
  simc->add_option("--taus", sim.taus, "quantile levels")->delimiter(',');
  simc->add_option("--seed", sim.seed, "base seed");
  simc->add_option("--levels", sim.levels, "coverage levels")->delimiter(',');
  simc->add_option("--method", sim_method, "sandwich | bootstrap | laml")->check(CLI::IsMember({"sandwich", "bootstrap", "laml"}));
  simc->add_option("--k", sim_k, "bootstrap replicates")->check(CLI::Range(2, 100000));
  simc->add_option("--rank", sim.rank, "spline rank per covariate")->check(CLI::Range(3, 1000));
  simc->add_option("--out", sim_out, "long-format report CSV");

  CommonFitArgs trace_args;
  double trace_tau = 0.5;
  int grid = 0;
  std::string trace_out = "trace.csv";
  auto* tr = app.add_subcommand("calibrate-trace", "write the sigma0 objective curve");
  trace_args.add(tr);
  tr->add_option("--tau", trace_tau, "quantile level");
  tr->add_option("--grid", grid, "evaluate on an even grid of this many points instead of the Brent trace");
  tr->add_option("--out", trace_out, "output CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fit) return cmd_fit(fit_args, fit_taus, fit_out);
    if (*pred) return cmd_predict(model_path, pred_data, levels, sandwich, pred_out);
    if (*simc) {
      sim.n = sim_n;
      return cmd_simulate(sim, sim_method, sim_k, sim_out);
    }
    if (*tr) return cmd_trace(trace_args, trace_tau, grid, trace_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
