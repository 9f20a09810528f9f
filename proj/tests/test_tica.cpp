#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "femtk/tica.hpp"
#include "support.hpp"

using namespace femtk;

namespace {

CovariancePair manual_pair(Matrix c0, Matrix ct) {
  CovariancePair p;
  p.mean = Vector::Zero(c0.rows());
  p.c0 = std::move(c0);
  p.c_tau = std::move(ct);
  p.feature_names = numbered_names("f", p.mean.size());
  return p;
}

FeatureTrajectory traj(RowMatrix f, std::string id = "t") {
  const auto n = f.cols();
  return FeatureTrajectory(std::move(f), 1.0, numbered_names("x", n), std::move(id));
}

}  // namespace

TEST(Covariances, ConstantTrajectoryIsZero) {
  const auto t = traj(RowMatrix::Constant(50, 3, 2.5));
  for (Index lag : {1, 7}) {
    const auto c = estimate_covariances(t, lag);
    EXPECT_TRUE((c.c0.array() == 0.0).all());
    EXPECT_TRUE((c.c_tau.array() == 0.0).all());
  }
}

TEST(Covariances, AlternatingSeries) {
  RowMatrix f(200, 1);
  for (Index i = 0; i < 200; ++i) f(i, 0) = static_cast<double>(i % 2);
  const auto c = estimate_covariances(traj(f), 1);
  EXPECT_NEAR(c.c0(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(c.c_tau(0, 0), -0.25, 1.0 / 200.0);
}

// Literal evaluation of the definitions with the global mean.
TEST(Covariances, BruteForceThreeFrames) {
  RowMatrix f(3, 2);
  f << 1, 2, 2, 4, 3, 6;
  const auto c = estimate_covariances(traj(f), 1);
  double mean[2] = {0, 0};
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 2; ++i) mean[i] += f(t, i) / 3.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double c0 = 0, a = 0, b = 0;
      for (int t = 0; t < 3; ++t) c0 += (f(t, i) - mean[i]) * (f(t, j) - mean[j]) / 3.0;
      for (int t = 0; t < 2; ++t) {
        a += (f(t, i) - mean[i]) * (f(t + 1, j) - mean[j]) / 2.0;
        b += (f(t + 1, i) - mean[i]) * (f(t, j) - mean[j]) / 2.0;
      }
      EXPECT_NEAR(c.c0(i, j), c0, 1e-12);
      EXPECT_NEAR(c.c_tau(i, j), 0.5 * a + 0.5 * b, 1e-12);
    }
  EXPECT_EQ(c.mean(0), 2.0);
  EXPECT_EQ(c.mean(1), 4.0);
}

TEST(Covariances, ExactSymmetryAndNoCrossTrajectoryPairs) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  RowMatrix a(300, 4), b(200, 4);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  for (Index i = 0; i < b.size(); ++i) b.data()[i] = n(rng) + 1.0;
  std::vector<FeatureTrajectory> ts{traj(a, "a"), traj(b, "b")};
  const auto c = estimate_covariances(ts, 3, 64);
  EXPECT_EQ(c.c_tau, Matrix(c.c_tau.transpose()));
  EXPECT_EQ(c.c0, Matrix(c.c0.transpose()));
  EXPECT_EQ(c.n_pairs, (300 - 3) + (200 - 3));
  EXPECT_EQ(c.n_samples, 500);
  // Oracle: accumulate pairs per trajectory by hand.
  RowMatrix all(500, 4);
  all << a, b;
  const Vector mean = all.colwise().mean();
  Matrix m = Matrix::Zero(4, 4);
  for (const auto* part : {&a, &b})
    for (Index t = 0; t + 3 < part->rows(); ++t)
      m += (part->row(t).transpose() - mean) * (part->row(t + 3).transpose() - mean).transpose();
  m /= static_cast<double>(c.n_pairs);
  const Matrix expected = 0.5 * (m + m.transpose());
  EXPECT_LT((c.c_tau - expected).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(c.c0);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
}

TEST(Covariances, ChunkSizeOnlyAffectsRoundoff) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  RowMatrix a(1000, 3);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  const auto t = traj(a);
  const auto c1 = estimate_covariances(t, 2, 7);
  const auto c2 = estimate_covariances(t, 2, 7);
  const auto c3 = estimate_covariances(t, 2, 4096);
  EXPECT_EQ(c1.c0, c2.c0);
  EXPECT_EQ(c1.c_tau, c2.c_tau);
  EXPECT_LT((c1.c0 - c3.c0).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariances, Errors) {
  const auto t = traj(RowMatrix::Random(5, 2));
  EXPECT_THROW(estimate_covariances(t, 5), InputError);
  RowMatrix other = RowMatrix::Random(10, 2);
  std::vector<FeatureTrajectory> ts{t, FeatureTrajectory(other, 1.0, {"p", "q"}, "other")};
  EXPECT_THROW(estimate_covariances(ts, 1), InputError);
}

TEST(FitTica, DiagonalCase) {
  Matrix ct = Matrix::Zero(2, 2);
  ct.diagonal() << 0.9, 0.1;
  const auto m = fit_tica(manual_pair(Matrix::Identity(2, 2), ct), 2, 0.0);
  EXPECT_NEAR(m.eigenvalues(0), 0.9, 1e-14);
  EXPECT_NEAR(m.eigenvalues(1), 0.1, 1e-14);
  EXPECT_NEAR(m.eigenvectors(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(m.eigenvectors(1, 1), 1.0, 1e-14);
  EXPECT_NEAR(m.explained_variance_ratio(0), 0.9, 1e-14);
  EXPECT_NEAR(m.explained_variance_ratio(1), 0.1, 1e-14);
  // Projecting (2, 3) with zero mean.
  RowMatrix f(1, 2);
  f << 2, 3;
  const RowMatrix y = project(m, f, 2);
  EXPECT_NEAR(y(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(y(0, 1), 3.0, 1e-14);
}

// c0 = diag(4, 1), c' = diag(2, 0.9): generalized eigenvalues 2/4 and 0.9/1,
// so the slow direction is the low-variance one.
TEST(FitTica, SlowDirectionNeedNotBeHighVariance) {
  Matrix c0 = Matrix::Zero(2, 2), ct = Matrix::Zero(2, 2);
  c0.diagonal() << 4, 1;
  ct.diagonal() << 2, 0.9;
  const auto m = fit_tica(manual_pair(c0, ct), 2, 0.0);
  EXPECT_NEAR(m.eigenvalues(0), 0.9, 1e-14);
  EXPECT_NEAR(m.eigenvalues(1), 0.5, 1e-14);
  EXPECT_NEAR(std::abs(m.eigenvectors(1, 0)), 1.0, 1e-14);
  EXPECT_NEAR(std::abs(m.eigenvectors(0, 1)), 0.5, 1e-14);  // C0-normalized
}

TEST(FitTica, WhiteNoiseHasSmallEigenvalues) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n;
  RowMatrix a(100000, 4);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  const auto c = estimate_covariances(traj(a), 1);
  const auto m = fit_tica(c, 4, default_ridge(c));
  EXPECT_LE(m.eigenvalues.cwiseAbs().maxCoeff(), 0.05);
}

TEST(FitTica, ResidualOrthonormalitySignAndOrdering) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  const Index d = 6;
  Matrix mix(d, d);
  for (Index i = 0; i < mix.size(); ++i) mix.data()[i] = n(rng);
  RowMatrix z(20000, d);
  Vector state = Vector::Zero(d);
  for (Index t = 0; t < z.rows(); ++t) {
    for (Index k = 0; k < d; ++k) state(k) = std::exp(-1.0 / (1.0 + 10.0 * static_cast<double>(k))) * state(k) + n(rng);
    z.row(t) = (mix * state).transpose();
  }
  const auto c = estimate_covariances(traj(z), 5);
  const double ridge = default_ridge(c);
  const auto m = fit_tica(c, d, ridge);
  Matrix c0r = c.c0;
  c0r.diagonal().array() += ridge;
  const double norm = Eigen::JacobiSVD<Matrix>(c.c_tau).singularValues()(0);
  for (Index k = 0; k < d; ++k) {
    const Vector v = m.eigenvectors.col(k);
    EXPECT_LE((c.c_tau * v - m.eigenvalues(k) * c0r * v).norm(), 1e-8 * norm);
    Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(v(arg), 0.0);
    if (k > 0) {
      EXPECT_GE(m.eigenvalues(k - 1), m.eigenvalues(k));
    }
  }
  const Matrix gram = m.eigenvectors.transpose() * c0r * m.eigenvectors;
  EXPECT_LE((gram - Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(m.explained_variance_ratio.sum(), 1.0, 1e-12);
}

TEST(FitTica, SingularC0IsNumericalError) {
  const auto t = traj(RowMatrix::Constant(20, 2, 1.0));
  const auto c = estimate_covariances(t, 1);
  EXPECT_THROW(fit_tica(c, 1, 0.0), NumericalError);
  EXPECT_THROW(fit_tica(c, 3, 1.0), InputError);
}

TEST(FitTica, EigenvalueOutsideUnitIntervalIsWarned) {
  Matrix ct = Matrix::Zero(2, 2);
  ct.diagonal() << 1.5, 0.2;
  const auto m = fit_tica(manual_pair(Matrix::Identity(2, 2), ct), 2, 0.0);
  EXPECT_EQ(m.warnings.size(), 1u);
}

TEST(FitTica, SlowModeRecoveryOnMixedOu) {
  Matrix mix(2, 2);
  mix << 1.0, 0.6, 0.3, 1.0;
  const RowMatrix x = femtk::testing::mixed_ou(1000000, 100.0, 1.0, mix, 17);
  const auto t = traj(x);
  const Index lag = 10;
  const auto c = estimate_covariances(t, lag);
  const auto m = fit_tica(c, 2, default_ridge(c));
  // v^T x recovers a, so v is parallel to mix^-T e_0.
  const Vector slow = mix.inverse().transpose().col(0).normalized();
  const double cosang = std::abs(m.eigenvectors.col(0).normalized().dot(slow));
  EXPECT_GE(cosang, 0.99);
  EXPECT_NEAR(m.eigenvalues(0), std::exp(-static_cast<double>(lag) / 100.0), 0.05);

  // Lag consistency: lambda(2 tau) ~ lambda(tau)^2.
  const auto c2 = estimate_covariances(t, 2 * lag);
  const auto m2 = fit_tica(c2, 2, default_ridge(c2));
  EXPECT_NEAR(m2.eigenvalues(0), m.eigenvalues(0) * m.eigenvalues(0), 0.05);
}

TEST(Project, CenteringAndIdentity) {
  RowMatrix f(5, 1);
  f << 1, 2, 3, 4, 5;
  TicaModel m;
  m.mean = Vector::Zero(1);
  m.eigenvectors = Matrix::Ones(1, 1);
  m.eigenvalues = Vector::Ones(1);
  m.feature_names = {"x0"};
  EXPECT_EQ(project(m, f, 1), f);
  m.mean(0) = 3.0;
  RowMatrix constant = RowMatrix::Constant(4, 1, 3.0);
  EXPECT_TRUE((project(m, constant, 1).array() == 0.0).all());
}

TEST(Project, FeatureMismatchRejected) {
  TicaModel m;
  m.mean = Vector::Zero(2);
  m.eigenvectors = Matrix::Identity(2, 2);
  m.eigenvalues = Vector::Ones(2);
  m.feature_names = {"a", "b"};
  const FeatureTrajectory t(RowMatrix::Zero(3, 2), 1.0, {"a", "c"}, "t");
  EXPECT_THROW(project(m, t, 1), InputError);
  EXPECT_THROW(project(m, RowMatrix::Zero(3, 2), 3), InputError);
}

TEST(TicaJson, RoundTrip) {
  Matrix c0 = Matrix::Zero(2, 2), ct = Matrix::Zero(2, 2);
  c0.diagonal() << 4, 1;
  ct.diagonal() << 2, 0.9;
  auto pair = manual_pair(c0, ct);
  pair.lag_frames = 10;
  pair.dt = 0.5;
  const auto m = fit_tica(pair, 2, 0.0);
  const auto j = to_json(m);
  EXPECT_EQ(j["lag_time"].get<double>(), 5.0);
  const auto back = tica_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.eigenvectors, m.eigenvectors);
  EXPECT_EQ(back.eigenvalues, m.eigenvalues);
  EXPECT_EQ(back.feature_names, m.feature_names);
  EXPECT_THROW(tica_from_json(nlohmann::json::object()), InputError);
}
