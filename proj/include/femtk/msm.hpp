#pragma once

// Markov state models over reduced coordinates: k-means microstates,
// symmetrized lagged transition counts restricted to the largest connected
// set, stationary distribution by power iteration, and per-state free
// energies G_i = -kT log(pi_i).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "femtk/core.hpp"
#include "femtk/json_util.hpp"

namespace femtk {

struct Clustering {
  Matrix centers;  // n_states x d
  std::vector<Index> assignments;
  double inertia = 0.0;
  Index iterations = 0;
};

namespace detail {

inline Index nearest_center(const Matrix& centers, const Eigen::Ref<const Eigen::RowVectorXd>& y, double* dist2 = nullptr) {
  Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < centers.rows(); ++k) {
    const double d = (centers.row(k) - y).squaredNorm();
    if (d < best_d) {  // strict: ties go to the lowest index
      best_d = d;
      best = k;
    }
  }
  if (dist2) *dist2 = best_d;
  return best;
}

inline Index count_distinct_rows(const RowMatrix& y, Index stop_at) {
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(y.rows()));
  for (Index i = 0; i < y.rows(); ++i) rows.emplace_back(y.row(i).data(), y.row(i).data() + y.cols());
  std::sort(rows.begin(), rows.end());
  Index distinct = rows.empty() ? 0 : 1;
  for (std::size_t i = 1; i < rows.size() && distinct < stop_at; ++i)
    if (rows[i] != rows[i - 1]) ++distinct;
  return distinct;
}

}  // namespace detail

inline Index assign_state(const Matrix& centers, const Eigen::Ref<const Eigen::RowVectorXd>& y) {
  return detail::nearest_center(centers, y);
}

// k-means with k-means++ seeding; Lloyd iterations until the relative change
// in inertia drops below 1e-8 or 500 iterations.
inline Clustering cluster(const RowMatrix& y, Index n_states, std::uint64_t seed, Index max_iterations = 500,
                          double tolerance = 1e-8) {
  if (n_states < 1) throw InputError("cluster: n_states must be >= 1");
  if (n_states > y.rows())
    throw InputError("cluster: n_states (" + std::to_string(n_states) + ") exceeds the number of frames (" +
                     std::to_string(y.rows()) + ")");
  if (detail::count_distinct_rows(y, n_states) < n_states)
    throw InputError("cluster: n_states (" + std::to_string(n_states) + ") exceeds the number of distinct points");
  const Index n = y.rows();
  std::mt19937_64 rng(seed);
  Clustering out;
  out.centers.resize(n_states, y.cols());
  std::uniform_int_distribution<Index> pick(0, n - 1);
  out.centers.row(0) = y.row(pick(rng));
  Vector d2 = (y.rowwise() - out.centers.row(0)).rowwise().squaredNorm();
  for (Index k = 1; k < n_states; ++k) {
    std::uniform_real_distribution<double> u(0.0, d2.sum());
    const double target = u(rng);
    double acc = 0.0;
    Index chosen = -1;
    for (Index i = 0; i < n; ++i) {
      acc += d2(i);
      if (d2(i) > 0.0 && acc >= target) {
        chosen = i;
        break;
      }
    }
    if (chosen < 0)
      for (Index i = n - 1; i >= 0; --i)
        if (d2(i) > 0.0) {
          chosen = i;
          break;
        }
    out.centers.row(k) = y.row(chosen);
    d2 = d2.cwiseMin((y.rowwise() - out.centers.row(k)).rowwise().squaredNorm());
  }

  out.assignments.assign(static_cast<std::size_t>(n), 0);
  double previous = std::numeric_limits<double>::infinity();
  for (Index it = 1; it <= max_iterations; ++it) {
    double inertia = 0.0;
    for (Index i = 0; i < n; ++i) {
      double dist = 0.0;
      out.assignments[static_cast<std::size_t>(i)] = detail::nearest_center(out.centers, y.row(i), &dist);
      inertia += dist;
    }
    out.inertia = inertia;
    out.iterations = it;
    Matrix sums = Matrix::Zero(n_states, y.cols());
    std::vector<Index> counts(static_cast<std::size_t>(n_states), 0);
    for (Index i = 0; i < n; ++i) {
      const auto k = out.assignments[static_cast<std::size_t>(i)];
      sums.row(k) += y.row(i);
      ++counts[static_cast<std::size_t>(k)];
    }
    for (Index k = 0; k < n_states; ++k)  // empty clusters keep their center
      if (counts[static_cast<std::size_t>(k)] > 0)
        out.centers.row(k) = sums.row(k) / static_cast<double>(counts[static_cast<std::size_t>(k)]);
    const bool done = std::isfinite(previous) && std::abs(previous - inertia) <= tolerance * std::max(previous, 1e-300);
    previous = inertia;
    if (done || inertia == 0.0) break;
  }
  // Final assignment against the final centers.
  out.inertia = 0.0;
  for (Index i = 0; i < n; ++i) {
    double dist = 0.0;
    out.assignments[static_cast<std::size_t>(i)] = detail::nearest_center(out.centers, y.row(i), &dist);
    out.inertia += dist;
  }
  return out;
}

struct MsmModel {
  Matrix centers;                       // all clustered states
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> counts;  // raw lagged counts, all states
  std::vector<Index> active_states;     // largest connected set, ascending
  std::vector<Index> dropped_states;
  Matrix transition;                    // over active states, row-stochastic
  Vector stationary;
  Vector free_energy;                   // kcal/mol, minimum shifted to 0
  Index lag_frames = 1;
  double temperature = 300.0;

  // Position of a state inside the active set, or -1.
  Index active_index(Index state) const {
    auto it = std::lower_bound(active_states.begin(), active_states.end(), state);
    return (it != active_states.end() && *it == state) ? static_cast<Index>(it - active_states.begin()) : -1;
  }
};

// Counts (t, t+lag) transitions inside each trajectory, symmetrizes as
// (C + C^T)/2, keeps the largest connected component (ties to the component
// with the lowest state index) and row-normalizes.
inline MsmModel estimate_transition_matrix(std::span<const std::vector<Index>> dtrajs, Index n_states, Index lag_frames) {
  if (lag_frames < 1) throw InputError("estimate_transition_matrix: lag must be >= 1");
  if (n_states < 1) throw InputError("estimate_transition_matrix: n_states must be >= 1");
  MsmModel m;
  m.lag_frames = lag_frames;
  m.counts.setZero(n_states, n_states);
  for (const auto& d : dtrajs) {
    if (static_cast<Index>(d.size()) <= lag_frames)
      throw InputError("estimate_transition_matrix: trajectory of " + std::to_string(d.size()) +
                       " frames is not longer than the lag");
    for (std::size_t t = 0; t + static_cast<std::size_t>(lag_frames) < d.size(); ++t) {
      const Index i = d[t];
      const Index j = d[t + static_cast<std::size_t>(lag_frames)];
      if (i < 0 || i >= n_states || j < 0 || j >= n_states)
        throw InputError("estimate_transition_matrix: state index out of range");
      ++m.counts(i, j);
    }
  }
  const Matrix c = m.counts.cast<double>();
  const Matrix sym = 0.5 * (c + c.transpose());

  std::vector<Index> component(static_cast<std::size_t>(n_states), -1);
  std::vector<Index> sizes;
  for (Index s = 0; s < n_states; ++s) {
    if (component[static_cast<std::size_t>(s)] >= 0) continue;
    const auto label = static_cast<Index>(sizes.size());
    Index size = 0;
    std::queue<Index> frontier;
    frontier.push(s);
    component[static_cast<std::size_t>(s)] = label;
    while (!frontier.empty()) {
      const Index u = frontier.front();
      frontier.pop();
      ++size;
      for (Index v = 0; v < n_states; ++v)
        if (sym(u, v) > 0.0 && component[static_cast<std::size_t>(v)] < 0) {
          component[static_cast<std::size_t>(v)] = label;
          frontier.push(v);
        }
    }
    sizes.push_back(size);
  }
  // Prefer components that carry counts; among those the largest.
  Index best = -1;
  for (Index l = 0; l < static_cast<Index>(sizes.size()); ++l) {
    bool has_counts = false;
    for (Index s = 0; s < n_states && !has_counts; ++s)
      if (component[static_cast<std::size_t>(s)] == l && sym.row(s).sum() > 0.0) has_counts = true;
    if (!has_counts) continue;
    if (best < 0 || sizes[static_cast<std::size_t>(l)] > sizes[static_cast<std::size_t>(best)]) best = l;
  }
  if (best < 0) throw InputError("estimate_transition_matrix: no transitions observed (empty connected component)");
  for (Index s = 0; s < n_states; ++s)
    (component[static_cast<std::size_t>(s)] == best ? m.active_states : m.dropped_states).push_back(s);

  const auto na = static_cast<Index>(m.active_states.size());
  m.transition.resize(na, na);
  for (Index a = 0; a < na; ++a) {
    double row_sum = 0.0;
    for (Index b = 0; b < na; ++b) {
      m.transition(a, b) = sym(m.active_states[static_cast<std::size_t>(a)], m.active_states[static_cast<std::size_t>(b)]);
      row_sum += m.transition(a, b);
    }
    if (!(row_sum > 0.0))
      throw InputError("estimate_transition_matrix: state " + std::to_string(m.active_states[static_cast<std::size_t>(a)]) +
                       " has no outgoing counts");
    m.transition.row(a) /= row_sum;
  }
  return m;
}

inline MsmModel estimate_transition_matrix(const std::vector<Index>& dtraj, Index n_states, Index lag_frames) {
  return estimate_transition_matrix(std::span<const std::vector<Index>>(&dtraj, 1), n_states, lag_frames);
}

namespace detail {

inline bool strongly_connected(const Matrix& t) {
  const Index n = t.rows();
  auto reach_all = [&](bool forward) {
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::queue<Index> q;
    q.push(0);
    seen[0] = true;
    Index count = 0;
    while (!q.empty()) {
      const Index u = q.front();
      q.pop();
      ++count;
      for (Index v = 0; v < n; ++v) {
        const double w = forward ? t(u, v) : t(v, u);
        if (w > 0.0 && !seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = true;
          q.push(v);
        }
      }
    }
    return count == n;
  };
  return reach_all(true) && reach_all(false);
}

}  // namespace detail

inline constexpr double kStationaryTolerance = 1e-12;
inline constexpr Index kStationaryMaxIterations = 1000000;

// Left eigenvector for eigenvalue 1 by power iteration pi <- pi T, stopping
// when |pi T - pi|_1 <= 1e-12. `start` seeds the iteration (uniform when
// empty).
inline Vector stationary_distribution(const Matrix& transition, const Vector& start = {}) {
  const Index n = transition.rows();
  if (n < 1 || transition.cols() != n) throw InputError("stationary_distribution: transition matrix must be square");
  for (Index i = 0; i < n; ++i) {
    if ((transition.row(i).array() < 0.0).any()) throw InputError("stationary_distribution: negative entry");
    if (std::abs(transition.row(i).sum() - 1.0) > 1e-10)
      throw InputError("stationary_distribution: row " + std::to_string(i) + " does not sum to 1");
  }
  if (!detail::strongly_connected(transition))
    throw NumericalError("stationary_distribution: transition matrix is reducible");
  Eigen::RowVectorXd pi = (start.size() == n && (start.array() > 0.0).all())
                              ? Eigen::RowVectorXd(start.transpose() / start.sum())
                              : Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
  Eigen::RowVectorXd next(n);
  for (Index it = 0; it < kStationaryMaxIterations; ++it) {
    next.noalias() = pi * transition;
    const double residual = (next - pi).lpNorm<1>();
    pi = next / next.sum();
    if (residual <= kStationaryTolerance) {
      if (!(pi.array() > 0.0).all()) break;
      return pi.transpose();
    }
  }
  throw NumericalError("stationary_distribution: power iteration did not converge (periodic or reducible chain?)");
}

// -kT log(pi_i), minimum shifted to zero.
inline Vector msm_free_energies(const Vector& stationary, double temperature) {
  if (!(temperature > 0.0)) throw InputError("msm_free_energies: temperature must be > 0");
  if (!(stationary.array() > 0.0).all()) throw InputError("msm_free_energies: stationary entries must be > 0");
  Vector g = -thermal_energy(temperature) * stationary.array().log();
  return g.array() - g.minCoeff();
}

struct MsmOptions {
  Index n_states = 50;
  Index lag_frames = 10;
  double temperature = 300.0;
  std::uint64_t seed = 0;
};

// Clusters the concatenated coordinates, counts transitions per trajectory
// and fills stationary distribution and free energies.
inline MsmModel build_msm(std::span<const RowMatrix> ys, const MsmOptions& opt, Clustering* clustering_out = nullptr) {
  if (ys.empty()) throw InputError("build_msm: no trajectories");
  Index rows = 0;
  for (const auto& y : ys) rows += y.rows();
  RowMatrix all(rows, ys.front().cols());
  Index at = 0;
  for (const auto& y : ys) {
    if (y.cols() != all.cols()) throw InputError("build_msm: trajectories differ in dimension");
    all.middleRows(at, y.rows()) = y;
    at += y.rows();
  }
  Clustering cl = cluster(all, opt.n_states, opt.seed);
  std::vector<std::vector<Index>> dtrajs;
  at = 0;
  for (const auto& y : ys) {
    dtrajs.emplace_back(cl.assignments.begin() + at, cl.assignments.begin() + at + y.rows());
    at += y.rows();
  }
  MsmModel m = estimate_transition_matrix(dtrajs, opt.n_states, opt.lag_frames);
  m.centers = cl.centers;
  m.temperature = opt.temperature;
  // For the symmetrized estimator the row sums of the symmetric counts are
  // already stationary; seed power iteration there.
  const Matrix c = m.counts.cast<double>();
  Vector start(static_cast<Index>(m.active_states.size()));
  for (Index a = 0; a < start.size(); ++a) {
    const Index s = m.active_states[static_cast<std::size_t>(a)];
    double sum = 0.0;
    for (Index b : m.active_states) sum += 0.5 * (c(s, b) + c(b, s));
    start(a) = sum;
  }
  m.stationary = stationary_distribution(m.transition, start);
  m.free_energy = msm_free_energies(m.stationary, opt.temperature);
  if (clustering_out) *clustering_out = std::move(cl);
  return m;
}

// Each frame takes the free energy of its state. Frames in dropped states
// have no defined target.
inline Vector frame_free_energies(const MsmModel& m, std::span<const Index> assignments) {
  Vector g(static_cast<Index>(assignments.size()));
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const Index a = m.active_index(assignments[i]);
    if (a < 0)
      throw InputError("frame " + std::to_string(i) + " lies in state " + std::to_string(assignments[i]) +
                       ", which is outside the connected set");
    g(static_cast<Index>(i)) = m.free_energy(a);
  }
  return g;
}

// Relaxation timescales -lag / ln(lambda_k) for the non-stationary eigenvalues,
// in frames, slowest first.
inline Vector implied_timescales(const MsmModel& m) {
  // Detailed balance makes D^1/2 T D^-1/2 symmetric.
  const Vector s = m.stationary.array().sqrt();
  Matrix sym = s.asDiagonal() * m.transition * s.cwiseInverse().asDiagonal();
  sym = 0.5 * (sym + sym.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  Vector lam = eig.eigenvalues().reverse();
  Vector ts(std::max<Index>(lam.size() - 1, 0));
  for (Index k = 1; k < lam.size(); ++k)
    ts(k - 1) = lam(k) > 0.0 ? -static_cast<double>(m.lag_frames) / std::log(lam(k))
                             : std::numeric_limits<double>::quiet_NaN();
  return ts;
}

inline nlohmann::json to_json(const MsmModel& m) {
  nlohmann::json j;
  j["type"] = "msm";
  j["lag_frames"] = m.lag_frames;
  j["temperature"] = m.temperature;
  j["centers"] = detail::matrix_to_json(m.centers);
  nlohmann::json counts = nlohmann::json::array();
  for (Index i = 0; i < m.counts.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index k = 0; k < m.counts.cols(); ++k) row.push_back(m.counts(i, k));
    counts.push_back(std::move(row));
  }
  j["counts"] = std::move(counts);
  j["active_states"] = m.active_states;
  j["dropped_states"] = m.dropped_states;
  j["transition"] = detail::matrix_to_json(m.transition);
  j["stationary"] = detail::vector_to_json(m.stationary);
  j["free_energy"] = detail::vector_to_json(m.free_energy);
  return j;
}

}  // namespace femtk
