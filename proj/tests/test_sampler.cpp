#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "femtk/random.hpp"
#include "femtk/sampler.hpp"
#include "support.hpp"

using namespace femtk;

namespace {

constexpr double kT300 = 0.0019872041 * 300.0;

struct HarmonicField {
  double k;
  Index dim() const { return 1; }
  void force(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const { out = -k * x; }
};

struct ZeroField {
  Index d;
  Index dim() const { return d; }
  void force(const Eigen::Ref<const Vector>&, Eigen::Ref<Vector> out) const { out.setZero(); }
};

struct RepulsiveField {
  Index dim() const { return 1; }
  void force(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const { out = 1e4 * x; }
};

bool bit_equal(const RowMatrix& a, const RowMatrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

LangevinConfig config(std::vector<Vector> starts, Index steps, Index stride, std::uint64_t seed = 1) {
  LangevinConfig c;
  c.initial_positions = std::move(starts);
  c.n_steps = steps;
  c.stride = stride;
  c.seed = seed;
  return c;
}

}  // namespace

// Reference vectors published with the Random123 library.
TEST(Philox, KnownAnswers) {
  const auto zero = Philox4x32::generate({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(zero, (Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  const auto ones = Philox4x32::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(ones, (Philox4x32::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  const auto pi = Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(pi, (Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, NormalMomentsAndStreamIndependence) {
  const Index n = 200000;
  Vector a(n), b(n);
  for (Index s = 0; s < n; ++s) {
    a(s) = counter_normal_pair(42, 0, static_cast<std::uint64_t>(s + 1), 0)[0];
    b(s) = counter_normal_pair(42, 1, static_cast<std::uint64_t>(s + 1), 0)[0];
  }
  EXPECT_NEAR(a.mean(), 0.0, 0.01);
  EXPECT_NEAR(a.squaredNorm() / n, 1.0, 0.01);
  const double corr = (a.array() - a.mean()).matrix().dot((b.array() - b.mean()).matrix()) /
                      std::sqrt((a.array() - a.mean()).square().sum() * (b.array() - b.mean()).square().sum());
  EXPECT_LT(std::abs(corr), 0.01);
}

TEST(Sampler, ZeroForceZeroTemperatureIsStationary) {
  auto cfg = config({Vector::Constant(2, 0.75)}, 1000, 10);
  cfg.temperature = 0.0;
  const auto r = simulate(ZeroField{2}, cfg);
  ASSERT_EQ(r.chains[0].positions.rows(), 100);
  EXPECT_TRUE((r.chains[0].positions.array() == 0.75).all());
}

TEST(Sampler, FrameCountIsFloorOfStepsOverStride) {
  const auto r = simulate(ZeroField{1}, config({Vector::Zero(1), Vector::Ones(1)}, 1007, 10));
  EXPECT_EQ(r.chains.size(), 2u);
  EXPECT_EQ(r.chains[1].positions.rows(), 100);
  EXPECT_EQ(r.chains[1].forces.rows(), 100);
}

TEST(Sampler, HarmonicVarianceIsKtOverK) {
  const double k = 10.0;  // dt * k / gamma = 0.01
  const auto r = simulate(HarmonicField{k}, config({Vector::Zero(1)}, 10000000, 10, 5));
  const auto& x = r.chains[0].positions;
  const double mean = x.col(0).mean();
  const double var = (x.col(0).array() - mean).square().sum() / static_cast<double>(x.rows() - 1);
  EXPECT_NEAR(var, kT300 / k, 0.03 * kT300 / k);
}

TEST(Sampler, DeterministicAndOrderIndependent) {
  const auto dw = ReferenceLandscape::make("double_well_2d");
  std::vector<Vector> starts;
  for (int c = 0; c < 4; ++c) starts.push_back(Vector::Constant(2, c % 2 ? 1.0 : -1.0));
  auto cfg = config(starts, 20000, 50, 9);
  const auto a = simulate(dw, cfg);
  const auto b = simulate(dw, cfg);
  cfg.threads = 3;
  const auto c = simulate(dw, cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(bit_equal(a.chains[i].positions, b.chains[i].positions));
    EXPECT_TRUE(bit_equal(a.chains[i].positions, c.chains[i].positions));
    EXPECT_TRUE(bit_equal(a.chains[i].forces, c.chains[i].forces));
  }
  // Chains 0 and 2 share a start but not a noise stream.
  EXPECT_FALSE(bit_equal(a.chains[0].positions, a.chains[2].positions));
  cfg.seed = 10;
  EXPECT_FALSE(bit_equal(simulate(dw, cfg).chains[0].positions, a.chains[0].positions));
}

TEST(Sampler, RecordedForcesMatchPositions) {
  const auto dw = ReferenceLandscape::make("mueller_brown");
  Vector start(2);
  start << -0.55, 1.44;
  const auto r = simulate(dw, config({start}, 5000, 100));
  for (Index f = 0; f < r.chains[0].positions.rows(); ++f) {
    const auto [e, force] = reference_energy_force(dw, r.chains[0].positions.row(f).transpose());
    EXPECT_EQ(force.transpose(), r.chains[0].forces.row(f));
  }
}

TEST(Sampler, DivergenceNamesChainAndStep) {
  try {
    simulate(RepulsiveField{}, config({Vector::Zero(1), Vector::Constant(1, 0.1)}, 100000, 1));
    FAIL();
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("chain 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step"), std::string::npos) << msg;
  }
}

TEST(Sampler, StiffnessWarningAndValidation) {
  auto cfg = config({Vector::Zero(1)}, 10, 1);
  cfg.dt = 0.05;
  EXPECT_FALSE(simulate(HarmonicField{10.0}, cfg).warnings.empty());
  cfg.dt = 1e-3;
  EXPECT_TRUE(simulate(HarmonicField{10.0}, cfg).warnings.empty());
  cfg.stride = 0;
  EXPECT_THROW(simulate(HarmonicField{1.0}, cfg), InputError);
  cfg.stride = 1;
  cfg.initial_positions = {Vector::Zero(2)};
  EXPECT_THROW(simulate(HarmonicField{1.0}, cfg), InputError);
}

TEST(Sampler, ModelPotentialPath) {
  // Zero network plus harmonic prior behaves like the harmonic field.
  PotentialModel m(Matrix::Zero(1, 1), Vector::Ones(1), 1);
  const auto prior = PriorTerm::harmonic(Vector::Zero(1), 10.0);
  const auto cfg = config({Vector::Zero(1)}, 200000, 10, 3);
  const auto a = simulate(m, prior, cfg);
  const auto b = simulate(HarmonicField{10.0}, cfg);
  EXPECT_TRUE(bit_equal(a.chains[0].positions, b.chains[0].positions));
}

// Symmetric double well: equal basin populations and the Boltzmann histogram.
// Many independent chains keep the estimate well inside the tolerance; a single
// chain crosses the 4 kcal/mol barrier only a few dozen times per 1e7 steps.
TEST(Sampler, DoubleWellMatchesBoltzmann) {
  const auto dw = ReferenceLandscape::make("double_well_1d");
  std::vector<Vector> starts;
  for (int c = 0; c < 64; ++c) starts.push_back(Vector::Constant(1, c % 2 ? 1.0 : -1.0));
  const auto r = simulate(dw, config(starts, 10000000, 100, 2024));
  const Index bins = 50;
  const double lo = -2.0, hi = 2.0, w = (hi - lo) / bins;
  Vector hist = Vector::Zero(bins);
  double left = 0, right = 0, total = 0;
  for (const auto& ch : r.chains)
    for (Index i = 0; i < ch.positions.rows(); ++i) {
      const double y = ch.positions(i, 0);
      (y < 0 ? left : right) += 1;
      total += 1;
      if (y >= lo && y < hi) hist(static_cast<Index>((y - lo) / w)) += 1;
    }
  EXPECT_NEAR(left / right, 1.0, 0.1);
  // Reference bin masses by fine quadrature of exp(-U/kT).
  Vector ref = Vector::Zero(bins);
  const int sub = 200;
  for (Index b = 0; b < bins; ++b)
    for (int s = 0; s < sub; ++s) {
      const double y = lo + w * (static_cast<double>(b) + (s + 0.5) / sub);
      ref(b) += std::exp(-reference_energy_force(dw, Vector::Constant(1, y)).first / kT300);
    }
  ref /= ref.sum();
  const double tv = 0.5 * (hist / total - ref).cwiseAbs().sum();
  EXPECT_LE(tv, 0.05);
}
