#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numeric>

#include "elfqr/basis.hpp"
#include "elfqr/rng.hpp"

using namespace elfqr;

namespace {

std::vector<double> uniform_sample(std::size_t n, double a, double b, std::uint64_t seed) {
  Philox4x32 g(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = g.uniform(a, b);
  return x;
}

int null_dim(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(S);
  const auto ev = es.eigenvalues();
  const double tol = S.rows() * 1e-12 * ev.cwiseAbs().maxCoeff();
  int k = 0;
  for (Index i = 0; i < ev.size(); ++i) k += std::abs(ev(i)) <= tol ? 1 : 0;
  return k;
}

DataTable table_xz(std::size_t n, std::uint64_t seed) {
  DataTable t;
  t.add("x", uniform_sample(n, 0.0, 1.0, seed));
  t.add("z", uniform_sample(n, -2.0, 3.0, seed + 100));
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = std::sin(6 * t.numeric("x")[i]);
  t.add("y", y);
  return t;
}

ModelSpec smooth_spec(std::initializer_list<const char*> vars, int rank) {
  ModelSpec s;
  for (const char* v : vars) s.terms.push_back({TermKind::Smooth, v, rank});
  return s;
}

}  // namespace

TEST(CrSpline, Rank3PenaltyHasTwoDimensionalNullSpace) {
  const auto sp = CubicRegressionSpline::from_data(uniform_sample(100, 0, 1, 1), 3);
  EXPECT_EQ(null_dim(sp.penalty()), 2);
}

TEST(CrSpline, PenaltyIsSymmetricPsd) {
  for (int rank : {3, 5, 10, 30}) {
    const auto sp = CubicRegressionSpline::from_data(uniform_sample(400, -3, 5, rank), rank);
    const Matrix& S = sp.penalty();
    EXPECT_LT((S - S.transpose()).cwiseAbs().maxCoeff(), 1e-12 * S.cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Matrix> es(S);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10 * es.eigenvalues().maxCoeff());
    EXPECT_EQ(null_dim(S), 2);
  }
}

TEST(CrSpline, KnotsIncreasingAndSpanData) {
  const auto x = uniform_sample(300, 2, 7, 4);
  const auto sp = CubicRegressionSpline::from_data(x, 12);
  const auto& k = sp.knots();
  for (std::size_t i = 1; i < k.size(); ++i) EXPECT_LT(k[i - 1], k[i]);
  EXPECT_EQ(k.front(), *std::min_element(x.begin(), x.end()));
  EXPECT_EQ(k.back(), *std::max_element(x.begin(), x.end()));
}

TEST(CrSpline, InterpolatesAtKnots) {
  const auto sp = CubicRegressionSpline::from_data(uniform_sample(200, 0, 1, 2), 8);
  for (std::size_t j = 0; j < sp.knots().size(); ++j) {
    const Vector b = sp.evaluate(sp.knots()[j]);
    for (Index k = 0; k < b.size(); ++k) EXPECT_NEAR(b(k), k == static_cast<Index>(j) ? 1.0 : 0.0, 1e-13);
  }
}

TEST(CrSpline, ReproducesLinesWithZeroPenalty) {
  const auto sp = CubicRegressionSpline::from_data(uniform_sample(200, -1, 2, 3), 9);
  Vector beta(sp.rank());
  for (int j = 0; j < sp.rank(); ++j) beta(j) = 1.5 - 2.0 * sp.knots()[static_cast<std::size_t>(j)];
  for (double x : {-1.0, -0.3, 0.0, 0.77, 1.9, 2.0}) EXPECT_NEAR(sp.evaluate(x).dot(beta), 1.5 - 2.0 * x, 1e-12);
  EXPECT_NEAR(beta.dot(sp.penalty() * beta), 0.0, 1e-10);
}

// The implied spline is cubic between knots, so f'' is linear there: a
// central second difference is exact up to rounding and two-point Gauss
// integrates f''^2 exactly on each interval.
TEST(CrSpline, PenaltyEqualsIntegratedSquaredCurvature) {
  const auto sp = CubicRegressionSpline::from_data(uniform_sample(200, 0, 1, 5), 10);
  Philox4x32 g(6);
  for (int rep = 0; rep < 5; ++rep) {
    Vector beta(sp.rank());
    for (Index j = 0; j < beta.size(); ++j) beta(j) = g.normal();
    auto f = [&](double x) { return sp.evaluate(x).dot(beta); };
    const auto& k = sp.knots();
    double integral = 0;
    for (std::size_t i = 0; i + 1 < k.size(); ++i) {
      const double a = k[i], b = k[i + 1], m = 0.5 * (a + b), r = 0.5 * (b - a);
      const double h = 1e-3 * (b - a);
      for (double s : {-1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0)}) {
        const double x = m + r * s;
        const double f2 = (f(x + h) - 2 * f(x) + f(x - h)) / (h * h);
        integral += r * f2 * f2;
      }
    }
    EXPECT_NEAR(beta.dot(sp.penalty() * beta) / integral, 1.0, 1e-6);
  }
}

TEST(CrSpline, Errors) {
  EXPECT_THROW(CubicRegressionSpline::from_data(uniform_sample(50, 0, 1, 1), 2), SpecError);
  EXPECT_THROW(CubicRegressionSpline::from_data({1, 2, 3, 3, 3}, 4), SpecError);
}

TEST(Design, InterceptOnly) {
  ModelSpec s;
  const auto t = table_xz(30, 1);
  const auto art = assemble_design(s, t);
  EXPECT_EQ(art.d(), 1);
  EXPECT_EQ(art.m(), 0);
  EXPECT_TRUE((art.X.array() == 1.0).all());
}

TEST(Design, SmoothLosesOneColumnToConstraint) {
  const auto art = assemble_design(smooth_spec({"x"}, 10), table_xz(200, 2));
  EXPECT_EQ(art.d(), 10);
  ASSERT_EQ(art.m(), 1);
  EXPECT_EQ(art.penalties[0].offset, 1);
  EXPECT_EQ(art.penalties[0].size, 9);
  EXPECT_TRUE(art.full_rank);
}

TEST(Design, SmoothBlocksHaveZeroColumnMeans) {
  const auto art = assemble_design(smooth_spec({"x", "z"}, 8), table_xz(300, 3));
  for (auto [off, size] : art.smooth_blocks()) {
    const Vector means = art.X.block(0, off, art.n(), size).colwise().mean().transpose();
    EXPECT_LT(means.cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Design, PenaltiesAreZeroOutsideTheirBlock) {
  const auto art = assemble_design(smooth_spec({"x", "z"}, 6), table_xz(100, 4));
  for (const auto& p : art.penalties) {
    Matrix outside = p.S;
    outside.block(p.offset, p.offset, p.size, p.size).setZero();
    EXPECT_EQ(outside.cwiseAbs().maxCoeff(), 0.0);
    const Matrix rr = p.root.transpose() * p.root;
    EXPECT_LT((rr - p.block()).cwiseAbs().maxCoeff(), 1e-10 * p.block().cwiseAbs().maxCoeff());
  }
}

TEST(Design, ConstrainedLineIsUnpenalized) {
  const auto t = table_xz(150, 5);
  const auto art = assemble_design(smooth_spec({"x"}, 7), t);
  const auto& tl = art.layout.terms[0];
  const auto& x = t.numeric("x");
  const double xbar = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  Vector raw(static_cast<Index>(tl.knots.size()));
  for (Index j = 0; j < raw.size(); ++j) raw(j) = tl.knots[static_cast<std::size_t>(j)] - xbar;
  const Vector bc = tl.constraint.transpose() * raw;
  EXPECT_LT((tl.constraint * bc - raw).cwiseAbs().maxCoeff(), 1e-10);  // centred line lies in the constrained space
  const Matrix Sb = art.penalties[0].block();
  EXPECT_NEAR(bc.dot(Sb * bc), 0.0, 1e-9);
  // and the block reproduces the centred line at every row
  const Vector fx = art.X.block(0, 1, art.n(), bc.size()) * bc;
  for (Index i = 0; i < art.n(); ++i) EXPECT_NEAR(fx(i), x[static_cast<std::size_t>(i)] - xbar, 1e-10);
}

TEST(Design, LinearPredictorIsSumOfTerms) {
  const auto t = table_xz(120, 6);
  const auto art = assemble_design(smooth_spec({"x", "z"}, 6), t);
  Philox4x32 g(1);
  Vector beta(art.d());
  for (Index j = 0; j < beta.size(); ++j) beta(j) = g.normal();
  Vector sum = Vector::Constant(art.n(), beta(0));
  for (const auto& tl : art.layout.terms) {
    CubicRegressionSpline sp(tl.knots);
    const Vector coef = tl.constraint * beta.segment(tl.first_col, tl.ncols);
    for (Index i = 0; i < art.n(); ++i) sum(i) += sp.evaluate(t.numeric(tl.var)[static_cast<std::size_t>(i)]).dot(coef);
  }
  EXPECT_LT((art.X * beta - sum).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Design, PredictOnTrainingDataIsBitwiseEqual) {
  const auto t = table_xz(90, 7);
  const auto art = assemble_design(smooth_spec({"x", "z"}, 5), t);
  const Matrix X2 = predict_design(art.layout, t);
  EXPECT_TRUE((X2.array() == art.X.array()).all());
}

TEST(Design, SingleRowAtKnotMatchesTraining) {
  const auto t = table_xz(90, 8);
  const auto art = assemble_design(smooth_spec({"x"}, 5), t);
  const auto& x = t.numeric("x");
  const auto it = std::min_element(x.begin(), x.end());  // the first knot
  DataTable one;
  one.add("x", DataTable::Numeric{*it});
  const Matrix row = predict_design(art.layout, one);
  EXPECT_TRUE((row.row(0).array() == art.X.row(it - x.begin()).array()).all());
}

TEST(Design, AssemblyIsDeterministic) {
  const auto t = table_xz(80, 9);
  const auto a = assemble_design(smooth_spec({"x", "z"}, 6), t);
  const auto b = assemble_design(smooth_spec({"x", "z"}, 6), t);
  EXPECT_TRUE((a.X.array() == b.X.array()).all());
  for (Index j = 0; j < a.m(); ++j) EXPECT_TRUE((a.penalties[j].S.array() == b.penalties[j].S.array()).all());
  EXPECT_EQ(a.layout.to_json().dump(), b.layout.to_json().dump());
}

TEST(Design, ExtrapolationIsFlagged) {
  const auto t = table_xz(80, 10);
  const auto art = assemble_design(smooth_spec({"x"}, 6), t);
  DataTable nd;
  nd.add("x", DataTable::Numeric{0.5, 1.5});
  std::vector<std::string> flags;
  const Matrix X = predict_design(art.layout, nd, &flags);
  EXPECT_EQ(flags.size(), 1u);
  EXPECT_TRUE(X.allFinite());
}

TEST(Design, FactorsAreDummyCodedAgainstFirstLevel) {
  DataTable t;
  t.add("g", DataTable::Text{"b", "a", "c", "a", "b"});
  t.add("v", DataTable::Numeric{1, 2, 3, 4, 5});
  ModelSpec s;
  s.terms = {{TermKind::Factor, "g", 0}, {TermKind::Linear, "v", 0}};
  const auto art = assemble_design(s, t);
  ASSERT_EQ(art.d(), 4);
  Matrix expect(5, 4);
  expect << 1, 1, 0, 1,  //
      1, 0, 0, 2,        //
      1, 0, 1, 3,        //
      1, 0, 0, 4,        //
      1, 1, 0, 5;
  EXPECT_TRUE((art.X.array() == expect.array()).all());
  DataTable nd;
  nd.add("g", DataTable::Text{"d"});
  nd.add("v", DataTable::Numeric{1});
  EXPECT_THROW(predict_design(art.layout, nd), DataError);
}

TEST(Design, Errors) {
  const auto t = table_xz(50, 11);
  EXPECT_THROW(assemble_design(smooth_spec({"w"}, 5), t), DataError);
  DataTable c = t;
  c.add("k", DataTable::Numeric(50, 3.0));
  EXPECT_THROW(assemble_design(smooth_spec({"k"}, 5), c), DataError);
  DataTable s = t;
  s.add("lbl", DataTable::Text(50, "a"));
  EXPECT_THROW(assemble_design(smooth_spec({"lbl"}, 5), s), DataError);
  ModelSpec dup = smooth_spec({"x", "x"}, 5);
  EXPECT_THROW(assemble_design(dup, t), SpecError);
  EXPECT_THROW(assemble_design(smooth_spec({"x"}, 2), t), SpecError);
}

TEST(Design, SpecJsonRoundTrip) {
  const auto j = nlohmann::json::parse(
      R"({"response":"y","terms":[{"type":"smooth","var":"x","k":12},{"type":"linear","var":"v"},{"type":"factor","var":"dow"}],"intercept":true,"variance_terms":[{"type":"smooth","var":"x","k":5}]})");
  const auto s = ModelSpec::from_json(j);
  EXPECT_EQ(s.terms.size(), 3u);
  EXPECT_EQ(s.terms[0].rank, 12);
  EXPECT_EQ(s.variance_terms.size(), 1u);
  EXPECT_EQ(ModelSpec::from_json(s.to_json()).to_json(), s.to_json());
}

// sqrt(x'Vx) against the Monte Carlo sd of x'beta with beta ~ N(b, V).
TEST(Design, IntervalWidthMatchesSampling) {
  const auto t = table_xz(60, 12);
  const auto art = assemble_design(smooth_spec({"x"}, 6), t);
  const Index d = art.d();
  Philox4x32 g(13);
  Matrix A(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) A(i, j) = g.normal();
  const Matrix V = A * A.transpose() / static_cast<double>(d) + 0.1 * Matrix::Identity(d, d);
  const Matrix L = V.llt().matrixL();
  const int ns = 40000;
  for (Index row : {0, 17, 42}) {
    const Vector x = art.X.row(row).transpose();
    double s = 0, s2 = 0;
    for (int k = 0; k < ns; ++k) {
      Vector e(d);
      for (Index j = 0; j < d; ++j) e(j) = g.normal();
      const double v = x.dot(L * e);
      s += v;
      s2 += v * v;
    }
    const double sd = std::sqrt((s2 - s * s / ns) / (ns - 1));
    EXPECT_NEAR(sd / std::sqrt(x.dot(V * x)), 1.0, 0.02);
  }
}
