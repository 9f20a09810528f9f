#pragma once

// Time-lagged independent component analysis.
//
// Instantaneous covariance C0 and the symmetrized lagged covariance
//   C'(tau) = 1/2 Cov(x(t), x(t+tau)) + 1/2 Cov(x(t+tau), x(t))
// are accumulated around the global mean, then the generalized symmetric
// problem C' v = lambda (C0 + ridge I) v is reduced to a standard one through
// the Cholesky factor of the regularized C0.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "femtk/core.hpp"
#include "femtk/json_util.hpp"
#include "femtk/trajectory.hpp"

namespace femtk {

struct CovariancePair {
  Vector mean;
  Matrix c0;
  Matrix c_tau;
  Index lag_frames = 1;
  Index n_samples = 0;  // frames contributing to mean and c0
  Index n_pairs = 0;    // lagged pairs contributing to c_tau
  double dt = 1.0;
  std::vector<std::string> feature_names;

  Index n_features() const { return mean.size(); }
};

namespace detail {

// Sums partial results over a fixed binary tree of chunk indices so the
// result only depends on the chunk size, never on scheduling.
inline Matrix tree_reduce(std::vector<Matrix> parts) {
  if (parts.empty()) return {};
  while (parts.size() > 1) {
    std::vector<Matrix> next;
    next.reserve((parts.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < parts.size(); i += 2) next.push_back(parts[i] + parts[i + 1]);
    if (parts.size() % 2 == 1) next.push_back(std::move(parts.back()));
    parts = std::move(next);
  }
  return std::move(parts.front());
}

inline void check_same_features(const FeatureTrajectory& a, const FeatureTrajectory& b) {
  if (a.feature_names() != b.feature_names())
    throw InputError("feature mismatch between '" + a.source_id() + "' and '" + b.source_id() + "'");
}

}  // namespace detail

inline CovariancePair estimate_covariances(std::span<const FeatureTrajectory> trajs, Index lag_frames,
                                           Index chunk_rows = 4096) {
  if (trajs.empty()) throw InputError("estimate_covariances: no trajectories");
  if (lag_frames < 1) throw InputError("estimate_covariances: lag_frames must be >= 1");
  if (chunk_rows < 1) throw InputError("estimate_covariances: chunk_rows must be >= 1");
  const auto& first = trajs.front();
  bool any_long = false;
  for (const auto& t : trajs) {
    detail::check_same_features(first, t);
    if (std::abs(t.dt() - first.dt()) > 1e-12 * first.dt())
      throw InputError("time step mismatch between '" + first.source_id() + "' and '" + t.source_id() + "'");
    any_long = any_long || t.n_frames() > lag_frames;
  }
  if (!any_long)
    throw InputError("lag of " + std::to_string(lag_frames) + " frames is not shorter than any trajectory");

  // Mean, chunked.
  std::vector<Matrix> mean_parts;
  Index n_samples = 0;
  for (const auto& t : trajs) {
    for (Index start = 0; start < t.n_frames(); start += chunk_rows) {
      const Index len = std::min(chunk_rows, t.n_frames() - start);
      mean_parts.push_back(t.frames().middleRows(start, len).colwise().sum().transpose());
    }
    n_samples += t.n_frames();
  }
  const Vector mean = detail::tree_reduce(std::move(mean_parts)).col(0) / static_cast<double>(n_samples);

  std::vector<Matrix> c0_parts;
  std::vector<Matrix> ct_parts;
  Index n_pairs = 0;
  for (const auto& t : trajs) {
    const RowMatrix centered = t.frames().rowwise() - mean.transpose();
    for (Index start = 0; start < t.n_frames(); start += chunk_rows) {
      const Index len = std::min(chunk_rows, t.n_frames() - start);
      const auto block = centered.middleRows(start, len);
      c0_parts.push_back(block.transpose() * block);
    }
    const Index pairs = t.n_frames() - lag_frames;
    for (Index start = 0; start < pairs; start += chunk_rows) {
      const Index len = std::min(chunk_rows, pairs - start);
      ct_parts.push_back(centered.middleRows(start, len).transpose() *
                         centered.middleRows(start + lag_frames, len));
    }
    n_pairs += std::max<Index>(pairs, 0);
  }

  const Matrix c0_raw = detail::tree_reduce(std::move(c0_parts)) / static_cast<double>(n_samples);
  const Matrix ct_raw = detail::tree_reduce(std::move(ct_parts)) / static_cast<double>(n_pairs);

  CovariancePair out;
  out.mean = mean;
  // a + b == b + a in IEEE arithmetic, so both results are exactly symmetric.
  out.c0 = 0.5 * (c0_raw + c0_raw.transpose());
  out.c_tau = 0.5 * (ct_raw + ct_raw.transpose());
  out.lag_frames = lag_frames;
  out.n_samples = n_samples;
  out.n_pairs = n_pairs;
  out.dt = first.dt();
  out.feature_names = first.feature_names();
  return out;
}

inline CovariancePair estimate_covariances(const FeatureTrajectory& traj, Index lag_frames,
                                           Index chunk_rows = 4096) {
  return estimate_covariances(std::span<const FeatureTrajectory>(&traj, 1), lag_frames, chunk_rows);
}

// Ridge of 1e-6 times the mean diagonal of C0.
inline double default_ridge(const CovariancePair& cov, double relative = 1e-6) {
  return relative * cov.c0.trace() / static_cast<double>(cov.c0.rows());
}

struct TicaModel {
  Vector mean;
  std::vector<std::string> feature_names;
  Index lag_frames = 1;
  double dt = 1.0;
  double ridge = 0.0;
  Vector eigenvalues;   // retained, descending
  Matrix eigenvectors;  // n_features x n_components, columns C0-orthonormal
  Vector explained_variance_ratio;
  Vector spectrum;  // every generalized eigenvalue, descending
  std::vector<std::string> warnings;
  std::optional<CovariancePair> covariances;

  Index n_features() const { return eigenvectors.rows(); }
  Index n_components() const { return eigenvectors.cols(); }
  double lag_time() const { return static_cast<double>(lag_frames) * dt; }
};

inline constexpr double kMaxConditionNumber = 1e14;

inline TicaModel fit_tica(const CovariancePair& cov, Index n_components, double ridge) {
  const Index n = cov.c0.rows();
  if (n_components < 1 || n_components > n)
    throw InputError("fit_tica: n_components must be in [1, " + std::to_string(n) + "], got " +
                     std::to_string(n_components));
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw InputError("fit_tica: ridge must be finite and >= 0");

  Matrix c0r = cov.c0;
  c0r.diagonal().array() += ridge;

  Eigen::SelfAdjointEigenSolver<Matrix> c0_eig(c0r, Eigen::EigenvaluesOnly);
  const double lo = c0_eig.eigenvalues().minCoeff();
  const double hi = c0_eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxConditionNumber)
    throw NumericalError("fit_tica: regularized C0 is numerically singular (eigenvalue range [" + std::to_string(lo) +
                         ", " + std::to_string(hi) + "]); increase the ridge");

  Eigen::LLT<Matrix> llt(c0r);
  if (llt.info() != Eigen::Success) throw NumericalError("fit_tica: Cholesky factorization of C0 failed");
  const auto L = llt.matrixL();
  // A = L^-1 C' L^-T
  Matrix tmp = L.solve(cov.c_tau);
  Matrix a = L.solve(tmp.transpose());
  a = 0.5 * (a + a.transpose()).eval();

  Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
  if (eig.info() != Eigen::Success) throw NumericalError("fit_tica: symmetric eigensolver did not converge");
  const Matrix vecs = llt.matrixU().solve(eig.eigenvectors());

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return eig.eigenvalues()(i) > eig.eigenvalues()(j); });

  TicaModel m;
  m.mean = cov.mean;
  m.feature_names = cov.feature_names;
  m.lag_frames = cov.lag_frames;
  m.dt = cov.dt;
  m.ridge = ridge;
  m.covariances = cov;
  m.spectrum.resize(n);
  for (Index i = 0; i < n; ++i) m.spectrum(i) = eig.eigenvalues()(order[static_cast<std::size_t>(i)]);
  m.eigenvalues = m.spectrum.head(n_components);
  m.eigenvectors.resize(n, n_components);
  for (Index k = 0; k < n_components; ++k) {
    Vector v = vecs.col(order[static_cast<std::size_t>(k)]);
    Index arg = 0;
    for (Index i = 1; i < n; ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0.0) v = -v;
    m.eigenvectors.col(k) = v;
  }

  const Vector positive = m.eigenvalues.cwiseMax(0.0);
  const double total = positive.sum();
  m.explained_variance_ratio = total > 0.0 ? Vector(positive / total) : Vector::Zero(n_components);

  for (Index k = 0; k < n_components; ++k) {
    const double lam = m.eigenvalues(k);
    if (lam > 1.0 + 1e-6 || lam < -1.0 - 1e-6)
      m.warnings.push_back("eigenvalue " + std::to_string(k) + " = " + std::to_string(lam) +
                           " lies outside [-1, 1]; check lag and regularization");
  }
  return m;
}

inline RowMatrix project(const TicaModel& model, const RowMatrix& frames, Index k) {
  if (k < 1 || k > model.n_components())
    throw InputError("project: k must be in [1, " + std::to_string(model.n_components()) + "]");
  if (frames.cols() != model.n_features())
    throw InputError("project: frames have " + std::to_string(frames.cols()) + " features, model expects " +
                     std::to_string(model.n_features()));
  return (frames.rowwise() - model.mean.transpose()) * model.eigenvectors.leftCols(k);
}

inline RowMatrix project(const TicaModel& model, const FeatureTrajectory& traj, Index k) {
  if (traj.feature_names() != model.feature_names)
    throw InputError("project: feature names of '" + traj.source_id() + "' do not match the TICA model");
  return project(model, traj.frames(), k);
}

inline RowMatrix project(const TicaModel& model, std::span<const FeatureTrajectory> trajs, Index k) {
  Index rows = 0;
  for (const auto& t : trajs) rows += t.n_frames();
  RowMatrix out(rows, k);
  Index at = 0;
  for (const auto& t : trajs) {
    out.middleRows(at, t.n_frames()) = project(model, t, k);
    at += t.n_frames();
  }
  return out;
}

inline nlohmann::json to_json(const TicaModel& m) {
  nlohmann::json j;
  j["type"] = "tica";
  j["means"] = detail::vector_to_json(m.mean);
  j["eigenvalues"] = detail::vector_to_json(m.eigenvalues);
  j["eigenvectors"] = detail::matrix_to_json(m.eigenvectors);
  j["lag_frames"] = m.lag_frames;
  j["lag_time"] = m.lag_time();
  j["dt"] = m.dt;
  j["ridge"] = m.ridge;
  j["explained_variance_ratio"] = detail::vector_to_json(m.explained_variance_ratio);
  j["spectrum"] = detail::vector_to_json(m.spectrum);
  j["feature_names"] = m.feature_names;
  j["warnings"] = m.warnings;
  return j;
}

inline TicaModel tica_from_json(const nlohmann::json& j) {
  try {
    TicaModel m;
    m.mean = detail::vector_from_json(j.at("means"));
    m.eigenvalues = detail::vector_from_json(j.at("eigenvalues"));
    m.eigenvectors = detail::matrix_from_json(j.at("eigenvectors"), "eigenvectors");
    m.lag_frames = j.at("lag_frames").get<Index>();
    m.dt = j.value("dt", j.at("lag_time").get<double>() / static_cast<double>(m.lag_frames));
    m.ridge = j.at("ridge").get<double>();
    m.explained_variance_ratio = detail::vector_from_json(j.at("explained_variance_ratio"));
    m.spectrum = j.contains("spectrum") ? detail::vector_from_json(j["spectrum"]) : m.eigenvalues;
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    if (j.contains("warnings")) m.warnings = j["warnings"].get<std::vector<std::string>>();
    if (m.eigenvectors.rows() != m.mean.size() || m.eigenvectors.cols() != m.eigenvalues.size() ||
        static_cast<Index>(m.feature_names.size()) != m.mean.size())
      throw InputError("TICA model JSON has inconsistent dimensions");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed TICA model JSON: ") + e.what());
  }
}

}  // namespace femtk
