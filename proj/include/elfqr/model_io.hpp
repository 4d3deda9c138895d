#pragma once

// JSON model files: spec, design layout (knots, constraints, factor
// levels) and one entry per fitted quantile. Matrices are dense row-major.

#include "json.hpp"

#include <fstream>
#include <string>
#include <vector>

#include "elfqr/basis.hpp"
#include "elfqr/calibrate.hpp"
#include "elfqr/data.hpp"

namespace elfqr {

inline constexpr const char* kSchemaVersion = "1.0";

class ModelFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SavedQuantile {
  double tau = 0.5;
  Vector beta, gamma, rho, fitted;
  Matrix V, V_tilde;
  double sigma0 = 0.0, lambda = 0.0, edf = 0.0;
  nlohmann::json extra;  // bandwidth diagnostics, trace, warnings
};

struct SavedModel {
  std::string schema_version = kSchemaVersion;
  ModelSpec spec;
  DesignLayout layout;
  std::vector<SavedQuantile> fits;
};

namespace detail {

inline nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline nlohmann::json trace_json(const CalibrationTrace& t) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : t.points) {
    nlohmann::json pj = {{"log_sigma0", p.log_sigma0}, {"converged", p.converged}};
    pj["value"] = std::isfinite(p.value) ? nlohmann::json(p.value) : nlohmann::json(nullptr);
    if (!p.error.empty()) pj["error"] = p.error;
    pts.push_back(pj);
  }
  return {{"method", method_name(t.method)}, {"zeta", t.zeta},       {"bracket", {t.lo, t.hi}},
          {"sigma0", t.sigma0},              {"unimodal", t.unimodal}, {"points", pts},
          {"warnings", t.warnings}};
}

}  // namespace detail

inline nlohmann::json quantile_json(const QuantileResult& r) {
  const auto& b = r.bandwidth.diag;
  nlohmann::json bw = {{"h_z_star", b.h_z_star}, {"tau_used", b.tau_used}, {"xi", b.xi},   {"f", b.f},
                       {"fprime", b.fprime},     {"mode", b.mode},         {"d", b.d},     {"n", b.n},
                       {"shifted", b.shifted},   {"kappa_mean", r.bandwidth.kappa_mean}};
  nlohmann::json gc = {{"alpha", r.gcov.alpha}, {"ess", r.gcov.ess}, {"ridge", r.gcov.ridge}};
  return {{"tau", r.tau},
          {"sigma0", r.sigma0},
          {"lambda", r.lambda},
          {"edf", r.fit.edf},
          {"laml", r.fit.laml},
          {"outer_iterations", r.fit.outer_iterations},
          {"pirls_iterations", r.fit.state.iterations},
          {"beta", detail::vec_json(r.fit.beta)},
          {"gamma", detail::vec_json(r.fit.gamma)},
          {"rho", detail::vec_json(r.fit.rho)},
          {"edf_per_coef", detail::vec_json(r.fit.edf_per_coef)},
          {"fitted", detail::vec_json(r.fit.fitted)},
          {"V", detail::matrix_to_json(r.fit.V)},
          {"V_tilde", detail::matrix_to_json(r.fit.V_tilde)},
          {"bandwidth", bw},
          {"gradient_covariance", gc},
          {"calibration", detail::trace_json(r.trace)},
          {"warnings", r.warnings}};
}

inline nlohmann::json model_json(const ModelSpec& spec, const DesignLayout& layout,
                                 const std::vector<const QuantileResult*>& fits) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto* f : fits) arr.push_back(quantile_json(*f));
  return {{"schema_version", kSchemaVersion}, {"spec", spec.to_json()}, {"layout", layout.to_json()}, {"fits", arr}};
}

inline SavedModel model_from_json(const nlohmann::json& j) {
  SavedModel m;
  try {
    m.schema_version = j.at("schema_version").get<std::string>();
    const auto major = m.schema_version.substr(0, m.schema_version.find('.'));
    const std::string ours(kSchemaVersion);
    if (major != ours.substr(0, ours.find('.'))) {
      throw ModelFileError("unsupported model schema version " + m.schema_version);
    }
    m.spec = ModelSpec::from_json(j.at("spec"));
    m.layout = DesignLayout::from_json(j.at("layout"));
    for (const auto& q : j.at("fits")) {
      SavedQuantile s;
      s.tau = q.at("tau").get<double>();
      s.beta = detail::json_vec(q.at("beta"));
      s.gamma = detail::json_vec(q.at("gamma"));
      s.rho = detail::json_vec(q.at("rho"));
      s.fitted = detail::json_vec(q.at("fitted"));
      s.V = detail::matrix_from_json(q.at("V"));
      s.V_tilde = detail::matrix_from_json(q.at("V_tilde"));
      s.sigma0 = q.at("sigma0").get<double>();
      s.lambda = q.at("lambda").get<double>();
      s.edf = q.at("edf").get<double>();
      s.extra = q;
      const Index d = m.layout.columns;
      if (s.beta.size() != d || s.V.rows() != d || s.V.cols() != d || s.V_tilde.rows() != d || s.V_tilde.cols() != d) {
        throw ModelFileError("coefficient dimensions do not match the design layout");
      }
      m.fits.push_back(std::move(s));
    }
  } catch (const ModelFileError&) {
    throw;
  } catch (const std::exception& e) {
    throw ModelFileError(std::string("malformed model file: ") + e.what());
  }
  return m;
}

inline SavedModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelFileError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ModelFileError("'" + path + "' is not valid JSON: " + e.what());
  }
  return model_from_json(j);
}

/// Long-format predictions: row, tau, fit and lower/upper per level.
inline DataTable predict_table(const SavedModel& m, const DataTable& data, const std::vector<double>& levels,
                               bool sandwich, std::vector<std::string>* flags = nullptr) {
  for (double l : levels)
    if (!(l > 0.0 && l < 1.0)) throw std::invalid_argument("interval level must lie in (0, 1)");
  const Matrix X = predict_design(m.layout, data, flags);
  const std::size_t n = data.rows();
  std::vector<double> row, tau, fit;
  std::vector<std::vector<double>> lo(levels.size()), hi(levels.size());
  for (const auto& q : m.fits) {
    const Vector mu = X * q.beta;
    std::vector<Interval> ci;
    for (double l : levels) ci.push_back(credible_interval(X, q.beta, sandwich ? q.V_tilde : q.V, l));
    for (std::size_t i = 0; i < n; ++i) {
      row.push_back(static_cast<double>(i));
      tau.push_back(q.tau);
      fit.push_back(mu(static_cast<Index>(i)));
      for (std::size_t l = 0; l < levels.size(); ++l) {
        lo[l].push_back(ci[l].lower(static_cast<Index>(i)));
        hi[l].push_back(ci[l].upper(static_cast<Index>(i)));
      }
    }
  }
  DataTable out;
  out.add("row", row);
  out.add("tau", tau);
  out.add("fit", fit);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto tag = DataTable::format_number(levels[l]);
    out.add("lower_" + tag, lo[l]);
    out.add("upper_" + tag, hi[l]);
  }
  return out;
}

}  // namespace elfqr
