#pragma once

// Cubic regression spline bases, identifiability constraints and assembly
// of the additive-model design matrix with its penalty matrices.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "elfqr/data.hpp"
#include "json.hpp"

namespace elfqr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Natural cubic spline parameterised by its values at the knots. The
/// penalty is the integrated squared second derivative.
class CubicRegressionSpline {
 public:
  CubicRegressionSpline() = default;

  explicit CubicRegressionSpline(std::vector<double> knots) : knots_(std::move(knots)) { setup(); }

  /// Knots at `rank` evenly spaced quantiles of the distinct covariate values.
  static CubicRegressionSpline from_data(const std::vector<double>& x, int rank) {
    if (rank < 3) throw SpecError("cubic regression spline rank must be at least 3");
    std::vector<double> u(x.begin(), x.end());
    for (double v : u) {
      if (!std::isfinite(v)) throw SpecError("non-finite covariate value");
    }
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    if (u.size() < static_cast<std::size_t>(rank)) {
      throw SpecError("need at least " + std::to_string(rank) + " distinct covariate values, found " +
                      std::to_string(u.size()));
    }
    std::vector<double> knots(rank);
    const double m = static_cast<double>(u.size() - 1);
    for (int j = 0; j < rank; ++j) {
      const double pos = m * j / (rank - 1);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, u.size() - 1);
      knots[j] = u[lo] + (pos - lo) * (u[hi] - u[lo]);
    }
    knots.front() = u.front();
    knots.back() = u.back();
    return CubicRegressionSpline(std::move(knots));
  }

  int rank() const { return static_cast<int>(knots_.size()); }
  const std::vector<double>& knots() const { return knots_; }
  const Matrix& penalty() const { return penalty_; }

  /// Maps knot values beta to second derivatives at the knots (zero at the ends).
  const Matrix& second_derivative_map() const { return f_full_; }

  /// Row of basis function values at x. Linear extrapolation outside the knots.
  Vector evaluate(double x) const {
    const int k = rank();
    Vector row = Vector::Zero(k);
    const double a = knots_.front(), b = knots_.back();
    if (x < a) {
      const double h = knots_[1] - knots_[0];
      // f(a) + f'(a) (x - a), with f'(a) = (b1 - b0)/h - h/6 (2 d0 + d1), d0 = 0
      row(0) += 1.0 - (x - a) / h;
      row(1) += (x - a) / h;
      row -= (x - a) * h / 6.0 * f_full_.row(1).transpose();
      return row;
    }
    if (x > b) {
      const double h = knots_[k - 1] - knots_[k - 2];
      row(k - 2) -= (x - b) / h;
      row(k - 1) += 1.0 + (x - b) / h;
      row += (x - b) * h / 6.0 * f_full_.row(k - 2).transpose();
      return row;
    }
    auto it = std::upper_bound(knots_.begin(), knots_.end(), x);
    int j = static_cast<int>(it - knots_.begin()) - 1;
    j = std::clamp(j, 0, k - 2);
    const double h = knots_[j + 1] - knots_[j];
    const double am = (knots_[j + 1] - x) / h;
    const double ap = (x - knots_[j]) / h;
    const double dm = knots_[j + 1] - x;
    const double dp = x - knots_[j];
    const double cm = (dm * dm * dm / h - h * dm) / 6.0;
    const double cp = (dp * dp * dp / h - h * dp) / 6.0;
    row(j) += am;
    row(j + 1) += ap;
    row += cm * f_full_.row(j).transpose() + cp * f_full_.row(j + 1).transpose();
    return row;
  }

  Matrix evaluate(const std::vector<double>& x) const {
    Matrix out(static_cast<Index>(x.size()), rank());
    for (std::size_t i = 0; i < x.size(); ++i) out.row(static_cast<Index>(i)) = evaluate(x[i]).transpose();
    return out;
  }

 private:
  void setup() {
    const int k = rank();
    if (k < 3) throw SpecError("cubic regression spline rank must be at least 3");
    for (int j = 1; j < k; ++j) {
      if (!(knots_[j] > knots_[j - 1])) throw SpecError("spline knots must be strictly increasing");
    }
    std::vector<double> h(k - 1);
    for (int j = 0; j + 1 < k; ++j) h[j] = knots_[j + 1] - knots_[j];
    Matrix d = Matrix::Zero(k - 2, k);
    Matrix bm = Matrix::Zero(k - 2, k - 2);
    for (int i = 0; i < k - 2; ++i) {
      d(i, i) = 1.0 / h[i];
      d(i, i + 1) = -1.0 / h[i] - 1.0 / h[i + 1];
      d(i, i + 2) = 1.0 / h[i + 1];
      bm(i, i) = (h[i] + h[i + 1]) / 3.0;
      if (i + 1 < k - 2) {
        bm(i, i + 1) = h[i + 1] / 6.0;
        bm(i + 1, i) = h[i + 1] / 6.0;
      }
    }
    Eigen::LDLT<Matrix> ldlt(bm);
    const Matrix f = ldlt.solve(d);
    f_full_ = Matrix::Zero(k, k);
    f_full_.middleRows(1, k - 2) = f;
    penalty_ = d.transpose() * f;
    penalty_ = 0.5 * (penalty_ + penalty_.transpose()).eval();
  }

  std::vector<double> knots_;
  Matrix f_full_;
  Matrix penalty_;
};

// ---------------------------------------------------------------------------
// Model specification

enum class TermKind { Smooth, Linear, Factor };

struct TermSpec {
  TermKind kind = TermKind::Linear;
  std::string var;
  int rank = 10;  // smooth terms only
};

struct ModelSpec {
  std::string response = "y";
  bool intercept = true;
  std::vector<TermSpec> terms;
  std::vector<TermSpec> variance_terms;  // empty: intercept-only variance model

  static std::vector<TermSpec> parse_terms(const nlohmann::json& arr) {
    std::vector<TermSpec> out;
    if (!arr.is_array()) throw SpecError("'terms' must be an array");
    for (const auto& t : arr) {
      TermSpec ts;
      const std::string type = t.value("type", "");
      ts.var = t.value("var", "");
      if (ts.var.empty()) throw SpecError("term without 'var'");
      if (type == "smooth") {
        ts.kind = TermKind::Smooth;
        ts.rank = t.value("k", 10);
      } else if (type == "linear") {
        ts.kind = TermKind::Linear;
      } else if (type == "factor") {
        ts.kind = TermKind::Factor;
      } else {
        throw SpecError("unknown term type '" + type + "'");
      }
      out.push_back(ts);
    }
    return out;
  }

  static nlohmann::json terms_to_json(const std::vector<TermSpec>& terms) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : terms) {
      nlohmann::json j;
      switch (t.kind) {
        case TermKind::Smooth:
          j = {{"type", "smooth"}, {"var", t.var}, {"k", t.rank}};
          break;
        case TermKind::Linear:
          j = {{"type", "linear"}, {"var", t.var}};
          break;
        case TermKind::Factor:
          j = {{"type", "factor"}, {"var", t.var}};
          break;
      }
      arr.push_back(j);
    }
    return arr;
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.response = j.value("response", "y");
    s.intercept = j.value("intercept", true);
    if (j.contains("terms")) s.terms = parse_terms(j.at("terms"));
    if (j.contains("variance_terms")) s.variance_terms = parse_terms(j.at("variance_terms"));
    s.validate();
    return s;
  }

  nlohmann::json to_json() const {
    return {{"response", response},
            {"intercept", intercept},
            {"terms", terms_to_json(terms)},
            {"variance_terms", terms_to_json(variance_terms)}};
  }

  void validate() const {
    std::set<std::string> smooth_vars;
    for (const auto& t : terms) {
      if (t.kind == TermKind::Smooth) {
        if (t.rank < 3) throw SpecError("smooth of '" + t.var + "' has rank < 3");
        if (!smooth_vars.insert(t.var).second) throw SpecError("duplicate smooth of '" + t.var + "'");
      }
    }
  }

  /// The same right-hand side used for the log-variance model.
  ModelSpec variance_model() const {
    ModelSpec v;
    v.response = response;
    v.intercept = true;
    v.terms = variance_terms;
    return v;
  }
};

// ---------------------------------------------------------------------------
// Design artifacts

/// One penalty S_j, stored zero-padded (d x d) together with its support block.
struct Penalty {
  Matrix S;          // d x d
  Index offset = 0;  // first column of the block
  Index size = 0;    // block width
  Matrix root;       // r x size, root^T root = S restricted to the block
  int rank = 0;

  Matrix block() const { return S.block(offset, offset, size, size); }
};

/// Builds a Penalty from a full d x d matrix; the support block is the
/// smallest contiguous range covering the nonzero rows.
inline Penalty make_penalty(const Matrix& full) {
  const Index d = full.rows();
  if (full.cols() != d) throw SpecError("penalty must be square");
  Index first = d, last = -1;
  for (Index i = 0; i < d; ++i) {
    if (full.row(i).cwiseAbs().maxCoeff() > 0.0 || full.col(i).cwiseAbs().maxCoeff() > 0.0) {
      first = std::min(first, i);
      last = std::max(last, i);
    }
  }
  if (last < 0) throw SpecError("penalty matrix is identically zero");
  Penalty p;
  p.S = 0.5 * (full + full.transpose());
  p.offset = first;
  p.size = last - first + 1;
  Eigen::SelfAdjointEigenSolver<Matrix> es(p.block());
  const Vector ev = es.eigenvalues();
  const double tol = static_cast<double>(p.size) * std::numeric_limits<double>::epsilon() * ev.cwiseAbs().maxCoeff();
  if (ev.minCoeff() < -1e-10 * ev.maxCoeff()) throw SpecError("penalty matrix is not positive semi-definite");
  std::vector<Index> keep;
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > tol) keep.push_back(i);
  }
  p.rank = static_cast<int>(keep.size());
  p.root.resize(p.rank, p.size);
  for (int r = 0; r < p.rank; ++r) {
    p.root.row(r) = std::sqrt(ev(keep[r])) * es.eigenvectors().col(keep[r]).transpose();
  }
  return p;
}

/// Everything needed to rebuild design rows for new data.
struct TermLayout {
  TermKind kind = TermKind::Linear;
  std::string var;
  Index first_col = 0;
  Index ncols = 0;
  // smooth terms
  std::vector<double> knots;
  Matrix constraint;  // rank x (rank - 1), sum-to-zero absorption
  double penalty_scale = 1.0;
  double range_lo = 0.0, range_hi = 0.0;
  // factor terms
  std::vector<std::string> levels;  // levels[0] is the reference
};

struct DesignLayout {
  bool intercept = true;
  std::vector<TermLayout> terms;
  Index columns = 0;

  nlohmann::json to_json() const;
  static DesignLayout from_json(const nlohmann::json& j);
};

struct DesignArtifacts {
  Matrix X;
  std::vector<Penalty> penalties;
  DesignLayout layout;
  int rank = 0;
  bool full_rank = true;
  std::vector<std::string> warnings;

  Index n() const { return X.rows(); }
  Index d() const { return X.cols(); }
  Index m() const { return static_cast<Index>(penalties.size()); }

  /// Wraps a raw design matrix and penalty list (used by tests and tools).
  static DesignArtifacts from_matrices(Matrix X, const std::vector<Matrix>& penalties) {
    DesignArtifacts a;
    a.X = std::move(X);
    for (const auto& s : penalties) a.penalties.push_back(make_penalty(s));
    a.layout.intercept = false;
    a.layout.columns = a.X.cols();
    a.check_rank();
    return a;
  }

  Matrix total_penalty(const Vector& gamma) const {
    Matrix s = Matrix::Zero(d(), d());
    for (Index j = 0; j < m(); ++j) s += gamma(j) * penalties[j].S;
    return s;
  }

  /// Term-wise column ranges for smooth terms, in penalty order.
  std::vector<std::pair<Index, Index>> smooth_blocks() const {
    std::vector<std::pair<Index, Index>> out;
    for (const auto& p : penalties) out.emplace_back(p.offset, p.size);
    return out;
  }

  void check_rank() {
    Eigen::ColPivHouseholderQR<Matrix> qr(X);
    const double tol = static_cast<double>(std::max(X.rows(), X.cols())) * std::numeric_limits<double>::epsilon();
    qr.setThreshold(tol);
    rank = static_cast<int>(qr.rank());
    full_rank = rank == X.cols();
    if (!full_rank) {
      warnings.push_back("design matrix is rank deficient: rank " + std::to_string(rank) + " < " +
                         std::to_string(X.cols()) + " columns");
    }
  }
};

namespace detail {

inline std::vector<std::string> sorted_levels(const std::vector<std::string>& v) {
  std::set<std::string> s(v.begin(), v.end());
  return {s.begin(), s.end()};
}

/// Orthonormal basis of the complement of c (k x (k-1)), via a Householder QR of c.
inline Matrix null_space_of(const Vector& c) {
  const Matrix cm = c;
  Eigen::HouseholderQR<Matrix> qr(cm);
  Matrix q = qr.householderQ() * Matrix::Identity(c.size(), c.size());
  return q.rightCols(c.size() - 1);
}

}  // namespace detail

/// Builds the smooth-term block of a design from a covariate.
struct SmoothBlock {
  Matrix X;        // n x (rank - 1)
  Matrix penalty;  // (rank - 1) x (rank - 1), unscaled
  TermLayout layout;
};

inline SmoothBlock build_smooth_block(const std::string& var, const std::vector<double>& x, int rank) {
  auto spline = CubicRegressionSpline::from_data(x, rank);
  Matrix raw = spline.evaluate(x);
  const Vector colsum = raw.colwise().sum().transpose();
  SmoothBlock b;
  b.layout.kind = TermKind::Smooth;
  b.layout.var = var;
  b.layout.knots = spline.knots();
  b.layout.constraint = detail::null_space_of(colsum);
  b.layout.range_lo = spline.knots().front();
  b.layout.range_hi = spline.knots().back();
  b.X = raw * b.layout.constraint;
  b.penalty = b.layout.constraint.transpose() * spline.penalty() * b.layout.constraint;
  b.penalty = 0.5 * (b.penalty + b.penalty.transpose()).eval();
  b.layout.ncols = b.X.cols();
  return b;
}

/// Design rows for `data` under a fixed layout. `flags` receives notes about
/// extrapolation.
inline Matrix predict_design(const DesignLayout& layout, const DataTable& data,
                             std::vector<std::string>* flags = nullptr) {
  const auto n = static_cast<Index>(data.rows());
  Matrix X(n, layout.columns);
  Index col = 0;
  if (layout.intercept) {
    X.col(0).setOnes();
    col = 1;
  }
  for (const auto& t : layout.terms) {
    if (t.first_col != col) throw SpecError("corrupt design layout");
    switch (t.kind) {
      case TermKind::Linear: {
        const auto& v = data.numeric(t.var);
        for (Index i = 0; i < n; ++i) X(i, col) = v[static_cast<std::size_t>(i)];
        break;
      }
      case TermKind::Factor: {
        const auto v = data.as_text(t.var);
        X.block(0, col, n, t.ncols).setZero();
        std::map<std::string, Index> pos;
        for (std::size_t l = 0; l < t.levels.size(); ++l) pos[t.levels[l]] = static_cast<Index>(l);
        for (Index i = 0; i < n; ++i) {
          auto it = pos.find(v[static_cast<std::size_t>(i)]);
          if (it == pos.end()) {
            throw DataError("unseen level '" + v[static_cast<std::size_t>(i)] + "' of factor '" + t.var + "'");
          }
          if (it->second > 0) X(i, col + it->second - 1) = 1.0;
        }
        break;
      }
      case TermKind::Smooth: {
        if (!data.is_numeric(t.var)) throw DataError("smooth covariate '" + t.var + "' is not numeric");
        const auto& v = data.numeric(t.var);
        CubicRegressionSpline spline(t.knots);
        Matrix raw = spline.evaluate(v);
        X.block(0, col, n, t.ncols) = raw * t.constraint;
        if (flags) {
          std::size_t outside = 0;
          for (double x : v) outside += (x < t.range_lo || x > t.range_hi) ? 1 : 0;
          if (outside > 0) {
            flags->push_back(std::to_string(outside) + " value(s) of '" + t.var +
                             "' lie outside the training range (linear extrapolation)");
          }
        }
        break;
      }
    }
    col += t.ncols;
  }
  return X;
}

/// Assembles intercept, parametric and constrained smooth columns, plus one
/// penalty per smooth. Penalties are rescaled so that unit smoothing
/// parameters put them on the scale of their design block.
inline DesignArtifacts assemble_design(const ModelSpec& spec, const DataTable& data) {
  spec.validate();
  const auto n = static_cast<Index>(data.rows());
  DesignArtifacts art;
  auto& layout = art.layout;
  layout.intercept = spec.intercept;
  Index col = spec.intercept ? 1 : 0;

  struct PendingPenalty {
    Matrix S;
    Index offset;
  };
  std::vector<PendingPenalty> pending;
  std::vector<Matrix> blocks;

  for (const auto& t : spec.terms) {
    if (!data.has(t.var)) throw DataError("missing column '" + t.var + "'");
    switch (t.kind) {
      case TermKind::Linear: {
        if (!data.is_numeric(t.var)) throw DataError("linear covariate '" + t.var + "' is not numeric");
        TermLayout tl;
        tl.kind = TermKind::Linear;
        tl.var = t.var;
        tl.first_col = col;
        tl.ncols = 1;
        layout.terms.push_back(tl);
        col += 1;
        break;
      }
      case TermKind::Factor: {
        TermLayout tl;
        tl.kind = TermKind::Factor;
        tl.var = t.var;
        tl.levels = detail::sorted_levels(data.as_text(t.var));
        if (tl.levels.size() < 2) throw DataError("factor '" + t.var + "' has a single level");
        tl.first_col = col;
        tl.ncols = static_cast<Index>(tl.levels.size()) - 1;
        layout.terms.push_back(tl);
        col += tl.ncols;
        break;
      }
      case TermKind::Smooth: {
        if (!data.is_numeric(t.var)) throw DataError("smooth covariate '" + t.var + "' is not numeric");
        const auto& x = data.numeric(t.var);
        const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
        if (x.empty() || *mn == *mx) throw DataError("smooth covariate '" + t.var + "' is constant");
        auto sb = build_smooth_block(t.var, x, t.rank);
        // scale the penalty to the design block: ||X_j||_inf^2 / ||S_j||_1
        const double xnorm = sb.X.cwiseAbs().rowwise().sum().maxCoeff();
        const double snorm = sb.penalty.cwiseAbs().colwise().sum().maxCoeff();
        sb.layout.penalty_scale = xnorm * xnorm / snorm;
        sb.layout.first_col = col;
        pending.push_back({sb.penalty * sb.layout.penalty_scale, col});
        layout.terms.push_back(sb.layout);
        col += sb.layout.ncols;
        break;
      }
    }
  }
  layout.columns = col;
  if (col == 0) throw SpecError("model has no columns");
  if (n < col) art.warnings.push_back("fewer observations than coefficients");

  art.X = predict_design(layout, data);
  for (const auto& p : pending) {
    Matrix full = Matrix::Zero(col, col);
    full.block(p.offset, p.offset, p.S.rows(), p.S.cols()) = p.S;
    art.penalties.push_back(make_penalty(full));
  }
  art.check_rank();
  return art;
}

// ---------------------------------------------------------------------------
// Layout serialisation

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", flat}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto r = j.at("rows").get<Index>();
  const auto c = j.at("cols").get<Index>();
  const auto flat = j.at("data").get<std::vector<double>>();
  if (static_cast<Index>(flat.size()) != r * c) throw SpecError("matrix payload has wrong size");
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index k = 0; k < c; ++k) m(i, k) = flat[static_cast<std::size_t>(i * c + k)];
  return m;
}

inline const char* kind_name(TermKind k) {
  switch (k) {
    case TermKind::Smooth:
      return "smooth";
    case TermKind::Linear:
      return "linear";
    case TermKind::Factor:
      return "factor";
  }
  return "linear";
}

}  // namespace detail

inline nlohmann::json DesignLayout::to_json() const {
  nlohmann::json terms_json = nlohmann::json::array();
  for (const auto& t : terms) {
    nlohmann::json j = {{"type", detail::kind_name(t.kind)},
                        {"var", t.var},
                        {"first_col", t.first_col},
                        {"ncols", t.ncols}};
    if (t.kind == TermKind::Smooth) {
      j["knots"] = t.knots;
      j["constraint"] = detail::matrix_to_json(t.constraint);
      j["penalty_scale"] = t.penalty_scale;
      j["range"] = {t.range_lo, t.range_hi};
    }
    if (t.kind == TermKind::Factor) j["levels"] = t.levels;
    terms_json.push_back(j);
  }
  return {{"intercept", intercept}, {"columns", columns}, {"terms", terms_json}};
}

inline DesignLayout DesignLayout::from_json(const nlohmann::json& j) {
  DesignLayout l;
  l.intercept = j.at("intercept").get<bool>();
  l.columns = j.at("columns").get<Index>();
  for (const auto& tj : j.at("terms")) {
    TermLayout t;
    const auto type = tj.at("type").get<std::string>();
    t.kind = type == "smooth" ? TermKind::Smooth : type == "factor" ? TermKind::Factor : TermKind::Linear;
    t.var = tj.at("var").get<std::string>();
    t.first_col = tj.at("first_col").get<Index>();
    t.ncols = tj.at("ncols").get<Index>();
    if (t.kind == TermKind::Smooth) {
      t.knots = tj.at("knots").get<std::vector<double>>();
      t.constraint = detail::matrix_from_json(tj.at("constraint"));
      t.penalty_scale = tj.at("penalty_scale").get<double>();
      t.range_lo = tj.at("range").at(0).get<double>();
      t.range_hi = tj.at("range").at(1).get<double>();
    }
    if (t.kind == TermKind::Factor) t.levels = tj.at("levels").get<std::vector<std::string>>();
    l.terms.push_back(std::move(t));
  }
  return l;
}

}  // namespace elfqr
