#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "femtk/evaluation.hpp"
#include "femtk/sampler.hpp"

using namespace femtk;

namespace {

RowMatrix gaussian_cloud(Index n, double shift_x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  RowMatrix y(n, 2);
  for (Index i = 0; i < n; ++i) {
    y(i, 0) = normal(rng) + shift_x;
    y(i, 1) = normal(rng);
  }
  return y;
}

// Points on the x axis: `left` at x = 0 and `right` at x = 1.
RowMatrix two_bin(Index left, Index right) {
  RowMatrix y = RowMatrix::Zero(left + right, 2);
  y.col(0).tail(right).setOnes();
  return y;
}

LandscapeGrid row_grid(std::initializer_list<double> values) {
  LandscapeGrid g;
  g.nx = static_cast<Index>(values.size());
  g.ny = 1;
  g.mean_value.resize(g.nx, 1);
  g.count.setOnes(g.nx, 1);
  Index i = 0;
  for (double v : values) g.mean_value(i++, 0) = v;
  return g;
}

TicaModel with_ratios(std::initializer_list<double> r) {
  TicaModel m;
  m.explained_variance_ratio = Vector::Map(std::data(r), static_cast<Index>(r.size()));
  return m;
}

}  // namespace

TEST(KlDivergence, IdentityIsExactlyZero) {
  const RowMatrix y = gaussian_cloud(5000, 0.0, 1);
  for (double eps : {0.0, 0.5, 3.0}) {
    const auto r = kl_divergence_2d(y, y, 50, 50, eps);
    EXPECT_EQ(r.kl_nats, 0.0);
    EXPECT_EQ(r.marginal_kl[0], 0.0);
    EXPECT_EQ(r.marginal_kl[1], 0.0);
  }
}

TEST(KlDivergence, TwoBinHandComputed) {
  const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  EXPECT_NEAR(expected, 0.5108, 1e-4);
  const auto r = kl_divergence_2d(two_bin(50, 50), two_bin(90, 10), 2, 1, 0.0);
  EXPECT_NEAR(r.kl_nats, expected, 1e-12);
  EXPECT_NEAR(r.marginal_kl[0], expected, 1e-12);
  EXPECT_EQ(r.marginal_kl[1], 0.0);
  // Vanishing pseudo-count approaches the same value.
  EXPECT_NEAR(kl_divergence_2d(two_bin(5000, 5000), two_bin(9000, 1000), 2, 1, 1e-6).kl_nats, expected, 1e-4);
}

TEST(KlDivergence, ShiftedGaussianIsHalfNat) {
  const auto truth = gaussian_cloud(1000000, 0.0, 11);
  const auto model = gaussian_cloud(1000000, 1.0, 12);
  const auto r = kl_divergence_2d(truth, model);
  EXPECT_NEAR(r.kl_nats, 0.5, 0.05);
  EXPECT_NEAR(r.marginal_kl[0], 0.5, 0.05);
  EXPECT_LT(r.marginal_kl[1], 0.01);
}

TEST(KlDivergence, NonIncreasingInEpsilon) {
  const auto truth = gaussian_cloud(3000, 0.0, 21);
  const auto model = gaussian_cloud(2000, 0.7, 22);
  double previous = std::numeric_limits<double>::infinity();
  for (double eps : {0.0, 0.01, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0}) {
    const double kl = kl_divergence_2d(truth, model, 30, 30, eps).kl_nats;
    EXPECT_GE(kl, 0.0);
    EXPECT_LE(kl, previous) << "epsilon " << eps;
    previous = kl;
  }
}

TEST(KlDivergence, GridSpansUnionAndDensitiesSumToOne) {
  const auto truth = gaussian_cloud(1000, 0.0, 31);
  const auto model = gaussian_cloud(800, 4.0, 32);
  const auto r = kl_divergence_2d(truth, model, 20, 10, 0.5);
  EXPECT_EQ(r.x_min, std::min(truth.col(0).minCoeff(), model.col(0).minCoeff()));
  EXPECT_EQ(r.x_max, std::max(truth.col(0).maxCoeff(), model.col(0).maxCoeff()));
  EXPECT_NEAR(r.truth_density.mean_value.sum(), 1.0, 1e-12);
  EXPECT_NEAR(r.model_density.mean_value.sum(), 1.0, 1e-12);
  EXPECT_EQ(r.truth_density.count.sum(), 1000);
  EXPECT_GT(r.kl_nats, 1.0);
  const auto j = to_json(r);
  EXPECT_EQ(j["grid"]["nx"], 20);
  EXPECT_EQ(j["direction"], "KL(truth || model)");
}

TEST(KlDivergence, Errors) {
  const RowMatrix y = gaussian_cloud(10, 0.0, 1);
  EXPECT_THROW(kl_divergence_2d(RowMatrix(0, 2), y), InputError);
  EXPECT_THROW(kl_divergence_2d(y, RowMatrix::Zero(10, 1)), InputError);
  EXPECT_THROW(kl_divergence_2d(y, y, 0, 5), InputError);
  EXPECT_THROW(kl_divergence_2d(y, y, 5, 5, -1.0), InputError);
}

// A model stuck in one basin of a two-basin truth is penalized by at least
// the missing half of the probability mass.
TEST(KlDivergence, DetectsBasinTrapping) {
  const auto dw = ReferenceLandscape::make("double_well_2d");
  LangevinConfig cfg;
  for (int c = 0; c < 16; ++c) cfg.initial_positions.push_back((Vector(2) << (c % 2 ? 1.0 : -1.0), 0.0).finished());
  cfg.n_steps = 400000;
  cfg.stride = 100;
  cfg.seed = 8;
  const auto run = simulate(dw, cfg);
  std::vector<Eigen::RowVector2d> all, right;
  for (const auto& ch : run.chains)
    for (Index i = 0; i < ch.positions.rows(); ++i) {
      all.push_back(ch.positions.row(i));
      if (ch.positions(i, 0) > 0.0) right.push_back(ch.positions.row(i));
    }
  RowMatrix truth(static_cast<Index>(all.size()), 2), trapped(static_cast<Index>(right.size()), 2);
  for (std::size_t i = 0; i < all.size(); ++i) truth.row(static_cast<Index>(i)) = all[i];
  for (std::size_t i = 0; i < right.size(); ++i) trapped.row(static_cast<Index>(i)) = right[i];
  ASSERT_GT(truth.rows() - trapped.rows(), truth.rows() / 4);
  EXPECT_GE(kl_divergence_2d(truth, trapped).kl_nats, std::log(2.0) - 0.1);
  EXPECT_LT(kl_divergence_2d(truth, truth).kl_nats, 1e-300);
}

TEST(ExplainedVariance, Examples) {
  auto pass = check_explained_variance(with_ratios({0.6, 0.2, 0.2}), 2, 0.7);
  EXPECT_TRUE(pass.passed);
  EXPECT_DOUBLE_EQ(pass.cumulative, 0.8);
  EXPECT_FALSE(check_explained_variance(with_ratios({0.5, 0.1, 0.4}), 2, 0.7).passed);
  const auto def = check_explained_variance(with_ratios({0.7, 0.0, 0.3}));
  EXPECT_EQ(def.threshold, 0.70);
  EXPECT_EQ(def.k, 2);
  EXPECT_TRUE(def.passed);
  EXPECT_THROW(check_explained_variance(with_ratios({0.5, 0.5}), 3), InputError);
}

TEST(LandscapeCompare, Examples) {
  EXPECT_EQ(landscape_compare(row_grid({1, 2, 5}), row_grid({1, 2, 5})), 0.0);
  EXPECT_NEAR(landscape_compare(row_grid({1, 2, 5}), row_grid({4, 5, 8})), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(landscape_compare(row_grid({1, 2}), row_grid({1, 4})), 1.0);
}

TEST(LandscapeCompare, OnlySharedBinsCount) {
  auto a = row_grid({1, 2, 100});
  auto b = row_grid({1, 4, -7});
  b.count(2, 0) = 0;
  EXPECT_DOUBLE_EQ(landscape_compare(a, b), 1.0);
  a.count.setZero();
  EXPECT_THROW(landscape_compare(a, b), InputError);
  auto c = row_grid({1, 2, 3});
  c.x_max = 2.0;
  EXPECT_THROW(landscape_compare(row_grid({1, 2, 3}), c), InputError);
}
