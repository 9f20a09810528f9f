#pragma once

// Agreement between a model ensemble and ground truth on the first two
// reduced coordinates. Both ensembles must be projected with the same
// truth-fitted TICA model.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include <json.hpp>

#include "femtk/core.hpp"
#include "femtk/freeenergy.hpp"
#include "femtk/tica.hpp"

namespace femtk {

inline constexpr double kDefaultKlEpsilon = 0.5;
inline constexpr Index kDefaultKlBins = 50;

struct KlReport {
  double kl_nats = 0.0;
  double x_min = 0.0, x_max = 0.0, y_min = 0.0, y_max = 0.0;
  Index nx = kDefaultKlBins, ny = kDefaultKlBins;
  double smoothing_epsilon = kDefaultKlEpsilon;
  Index n_truth = 0, n_model = 0;
  std::array<double, 2> marginal_kl{0.0, 0.0};
  LandscapeGrid truth_density;  // mean_value holds smoothed probabilities
  LandscapeGrid model_density;
};

namespace detail {

// (count + eps) / (n + eps * bins)
inline Vector smoothed(const Vector& counts, double n, double eps) {
  return (counts.array() + eps) / (n + eps * static_cast<double>(counts.size()));
}

inline double kl_sum(const Vector& p, const Vector& q) {
  double kl = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    if (q(i) <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p(i) * std::log(p(i) / q(i));
  }
  return std::max(kl, 0.0);
}

}  // namespace detail

// KL(truth || model) in nats on a common nx x ny grid spanning the union of
// both bounding boxes, with pseudo-count smoothing epsilon per bin.
inline KlReport kl_divergence_2d(const RowMatrix& truth, const RowMatrix& model, Index nx = kDefaultKlBins,
                                 Index ny = kDefaultKlBins, double epsilon = kDefaultKlEpsilon) {
  if (truth.rows() == 0 || model.rows() == 0) throw InputError("kl_divergence_2d: empty input");
  if (truth.cols() < 2 || model.cols() < 2) throw InputError("kl_divergence_2d: need two coordinates");
  if (nx < 1 || ny < 1) throw InputError("kl_divergence_2d: bin counts must be >= 1");
  if (!(epsilon >= 0.0)) throw InputError("kl_divergence_2d: epsilon must be >= 0");
  KlReport r;
  r.nx = nx;
  r.ny = ny;
  r.smoothing_epsilon = epsilon;
  r.n_truth = truth.rows();
  r.n_model = model.rows();
  r.x_min = std::min(truth.col(0).minCoeff(), model.col(0).minCoeff());
  r.x_max = std::max(truth.col(0).maxCoeff(), model.col(0).maxCoeff());
  r.y_min = std::min(truth.col(1).minCoeff(), model.col(1).minCoeff());
  r.y_max = std::max(truth.col(1).maxCoeff(), model.col(1).maxCoeff());

  auto histogram = [&](const RowMatrix& y, Vector& joint, Vector& mx, Vector& my) {
    joint = Vector::Zero(nx * ny);
    mx = Vector::Zero(nx);
    my = Vector::Zero(ny);
    for (Index i = 0; i < y.rows(); ++i) {
      const Index bx = detail::grid_bin(y(i, 0), r.x_min, r.x_max, nx);
      const Index by = detail::grid_bin(y(i, 1), r.y_min, r.y_max, ny);
      joint(bx * ny + by) += 1.0;
      mx(bx) += 1.0;
      my(by) += 1.0;
    }
  };
  Vector tj, tx, ty, mj, mx, my;
  histogram(truth, tj, tx, ty);
  histogram(model, mj, mx, my);
  const auto nt = static_cast<double>(r.n_truth);
  const auto nm = static_cast<double>(r.n_model);
  const Vector p = detail::smoothed(tj, nt, epsilon);
  const Vector q = detail::smoothed(mj, nm, epsilon);
  r.kl_nats = detail::kl_sum(p, q);
  r.marginal_kl[0] = detail::kl_sum(detail::smoothed(tx, nt, epsilon), detail::smoothed(mx, nm, epsilon));
  r.marginal_kl[1] = detail::kl_sum(detail::smoothed(ty, nt, epsilon), detail::smoothed(my, nm, epsilon));

  auto to_grid = [&](const Vector& counts, const Vector& prob) {
    LandscapeGrid g;
    g.nx = nx;
    g.ny = ny;
    g.x_min = r.x_min;
    g.x_max = r.x_max;
    g.y_min = r.y_min;
    g.y_max = r.y_max;
    g.count.resize(nx, ny);
    g.mean_value.resize(nx, ny);
    for (Index i = 0; i < nx; ++i)
      for (Index j = 0; j < ny; ++j) {
        g.count(i, j) = static_cast<Index>(counts(i * ny + j));
        g.mean_value(i, j) = prob(i * ny + j);
      }
    return g;
  };
  r.truth_density = to_grid(tj, p);
  r.model_density = to_grid(mj, q);
  return r;
}

inline nlohmann::json to_json(const KlReport& r) {
  return {{"kl_nats", r.kl_nats},
          {"grid", {{"x_min", r.x_min}, {"x_max", r.x_max}, {"y_min", r.y_min}, {"y_max", r.y_max}, {"nx", r.nx}, {"ny", r.ny}}},
          {"smoothing_epsilon", r.smoothing_epsilon},
          {"direction", "KL(truth || model)"},
          {"n_truth", r.n_truth},
          {"n_model", r.n_model},
          {"marginal_kl", {{"tic0", r.marginal_kl[0]}, {"tic1", r.marginal_kl[1]}}}};
}

struct ExplainedVarianceCheck {
  bool passed = false;
  double cumulative = 0.0;
  Index k = 2;
  double threshold = 0.70;
};

inline ExplainedVarianceCheck check_explained_variance(const TicaModel& model, Index k = 2, double threshold = 0.70) {
  if (k < 1 || k > model.explained_variance_ratio.size())
    throw InputError("check_explained_variance: k must be in [1, " +
                     std::to_string(model.explained_variance_ratio.size()) + "]");
  ExplainedVarianceCheck c;
  c.k = k;
  c.threshold = threshold;
  c.cumulative = model.explained_variance_ratio.head(k).sum();
  c.passed = c.cumulative >= threshold;
  return c;
}

// RMS difference of offset-free bin means over bins occupied in both grids.
inline double landscape_compare(const LandscapeGrid& truth, const LandscapeGrid& model) {
  if (!truth.same_geometry(model)) throw InputError("landscape_compare: grid geometry mismatch");
  double sum_t = 0.0, sum_m = 0.0;
  Index shared = 0;
  for (Index i = 0; i < truth.nx; ++i)
    for (Index j = 0; j < truth.ny; ++j)
      if (truth.occupied(i, j) && model.occupied(i, j)) {
        sum_t += truth.mean_value(i, j);
        sum_m += model.mean_value(i, j);
        ++shared;
      }
  if (shared == 0) throw InputError("landscape_compare: no bin is occupied in both grids");
  const double mt = sum_t / static_cast<double>(shared);
  const double mm = sum_m / static_cast<double>(shared);
  double ss = 0.0;
  for (Index i = 0; i < truth.nx; ++i)
    for (Index j = 0; j < truth.ny; ++j)
      if (truth.occupied(i, j) && model.occupied(i, j)) {
        const double d = (truth.mean_value(i, j) - mt) - (model.mean_value(i, j) - mm);
        ss += d * d;
      }
  return std::sqrt(ss / static_cast<double>(shared));
}

}  // namespace femtk
