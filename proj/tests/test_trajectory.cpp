#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "femtk/trajectory.hpp"
#include "support.hpp"

using namespace femtk;
using femtk::testing::TempDir;

namespace {

FeatureTrajectory small_traj() {
  RowMatrix f(4, 2);
  f << 0.1, -2.5, 1.0 / 3.0, 7e-12, -4.25, 1e300, 2.0, 3.0;
  return FeatureTrajectory(f, 0.002, {"phi", "psi"}, "small");
}

}  // namespace

TEST(Trajectory, CsvHeaderParse) {
  TempDir dir;
  const auto p = dir / "a.csv";
  std::ofstream(p) << "t0.002;phi,psi\n1,2\n3,4\n5,6\n";
  const auto t = load_trajectory(p);
  EXPECT_EQ(t.dt(), 0.002);
  EXPECT_EQ(t.n_features(), 2);
  EXPECT_EQ(t.n_frames(), 3);
  EXPECT_EQ(t.feature_names()[1], "psi");
  EXPECT_EQ(t.frames()(2, 1), 6.0);
}

TEST(Trajectory, BinaryRoundTripIsBitExact) {
  TempDir dir;
  const auto t = small_traj();
  save_trajectory(t, dir / "a.bin");
  const auto back = load_trajectory(dir / "a.bin");
  EXPECT_EQ(back.dt(), t.dt());
  EXPECT_EQ(back.feature_names(), t.feature_names());
  ASSERT_EQ(back.frames().rows(), t.frames().rows());
  EXPECT_EQ(std::memcmp(back.frames().data(), t.frames().data(), sizeof(double) * t.frames().size()), 0);
}

TEST(Trajectory, CsvRoundTripWithinTolerance) {
  TempDir dir;
  const auto t = small_traj();
  save_trajectory(t, dir / "a.csv");
  const auto back = load_trajectory(dir / "a.csv");
  for (Index i = 0; i < t.n_frames(); ++i)
    for (Index j = 0; j < t.n_features(); ++j)
      EXPECT_LE(femtk::testing::relative_error(back.frames()(i, j), t.frames()(i, j), 1e-300), 1e-12);
  EXPECT_EQ(back.dt(), t.dt());
}

TEST(Trajectory, MissingMagicIsFormatError) {
  TempDir dir;
  std::ofstream(dir / "x.bin", std::ios::binary) << "NOPE and some more bytes here";
  EXPECT_THROW(load_trajectory(dir / "x.bin"), InputError);
}

TEST(Trajectory, NanRowIsReportedByIndex) {
  TempDir dir;
  const auto p = dir / "nan.csv";
  std::ofstream(p) << "t1;a\n1\n2\n3\n4\nNaN\n6\n";
  try {
    load_trajectory(p);
    FAIL() << "expected an error";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("row 5"), std::string::npos) << e.what();
  }
}

TEST(Trajectory, NonFiniteRejectedOnEveryPath) {
  RowMatrix f = RowMatrix::Zero(3, 1);
  f(1, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(FeatureTrajectory(f, 1.0, {"a"}), InputError);
  TempDir dir;
  Table t{kMagicTrajectory, 1.0, {"a"}, f};
  write_table(t, dir / "inf.bin");
  EXPECT_THROW(load_trajectory(dir / "inf.bin"), InputError);
}

TEST(Trajectory, ValidationRules) {
  EXPECT_THROW(FeatureTrajectory(RowMatrix::Zero(1, 2), 1.0, {"a", "b"}), InputError);
  EXPECT_THROW(FeatureTrajectory(RowMatrix::Zero(3, 2), 1.0, {"a", "a"}), InputError);
  EXPECT_THROW(FeatureTrajectory(RowMatrix::Zero(3, 2), 0.0, {"a", "b"}), InputError);
  EXPECT_THROW(FeatureTrajectory(RowMatrix::Zero(3, 2), 1.0, {"a"}), InputError);
}

TEST(Trajectory, MalformedHeader) {
  TempDir dir;
  std::ofstream(dir / "h.csv") << "phi,psi\n1,2\n3,4\n";
  EXPECT_THROW(load_trajectory(dir / "h.csv"), InputError);
}

TEST(Trajectory, SaveToUnwritableLocationIsIoError) {
  EXPECT_THROW(save_trajectory(small_traj(), "/proc/femtk_nope/a.bin"), IoError);
  EXPECT_THROW(save_trajectory(small_traj(), "/proc/femtk_nope/a.csv"), IoError);
}

TEST(Trajectory, ForceAndEnergyRecordsRoundTrip) {
  TempDir dir;
  ForceRecord rec{RowMatrix::Random(5, 3), RowMatrix::Random(5, 3), 0.5};
  save_force_record(rec, dir / "f.bin");
  const auto back = load_force_record(dir / "f.bin");
  EXPECT_EQ(back.configs, rec.configs);
  EXPECT_EQ(back.forces, rec.forces);
  EXPECT_THROW(load_trajectory(dir / "f.bin", FileFormat::bin), InputError);  // wrong magic

  EnergyRecord e{Vector::Random(5), Vector(Vector::Random(5))};
  save_energy_record(e, dir / "e.bin");
  const auto eb = load_energy_record(dir / "e.bin");
  EXPECT_EQ(eb.prior_energy, e.prior_energy);
  ASSERT_TRUE(eb.correction.has_value());
  EXPECT_EQ(*eb.correction, *e.correction);
}

TEST(PairwiseDistances, ThreeFourFive) {
  RowMatrix c(1, 6);
  c << 0, 0, 0, 3, 4, 0;
  const RowMatrix d = pairwise_distances(c);
  ASSERT_EQ(d.cols(), 1);
  EXPECT_EQ(d(0, 0), 5.0);
}

TEST(PairwiseDistances, IdenticalSitesAreZero) {
  RowMatrix c = RowMatrix::Constant(2, 9, 1.5);
  const auto t = pairwise_distance_features(c);
  EXPECT_EQ(t.n_features(), 3);
  EXPECT_TRUE((t.frames().array() == 0.0).all());
}

TEST(PairwiseDistances, UnitRightTriangle) {
  RowMatrix c(2, 9);
  c.row(0) << 0, 0, 0, 1, 0, 0, 0, 1, 0;
  c.row(1) = c.row(0);
  const auto t = pairwise_distance_features(c);
  EXPECT_EQ(t.feature_names(), (std::vector<std::string>{"d0_1", "d0_2", "d1_2"}));
  EXPECT_DOUBLE_EQ(t.frames()(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t.frames()(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(t.frames()(0, 2), std::sqrt(2.0));
}

TEST(PairwiseDistances, ColumnCountMustBeMultipleOfThree) {
  EXPECT_THROW(pairwise_distances(RowMatrix::Zero(2, 7)), InputError);
}

// Relabeling sites permutes features by the induced pair permutation.
TEST(PairwiseDistances, PermutationCovariance) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  const Index sites = 5;
  RowMatrix c(4, 3 * sites);
  for (Index i = 0; i < c.size(); ++i) c.data()[i] = n(rng);
  std::vector<Index> perm{3, 0, 4, 1, 2};  // new site k is old site perm[k]
  RowMatrix cp(c.rows(), c.cols());
  for (Index k = 0; k < sites; ++k) cp.middleCols(3 * k, 3) = c.middleCols(3 * perm[static_cast<std::size_t>(k)], 3);
  const RowMatrix d = pairwise_distances(c);
  const RowMatrix dp = pairwise_distances(cp);
  auto pair_index = [&](Index i, Index j) {
    if (i > j) std::swap(i, j);
    return i * sites - i * (i + 1) / 2 + (j - i - 1);
  };
  for (Index i = 0; i < sites; ++i)
    for (Index j = i + 1; j < sites; ++j)
      for (Index t = 0; t < c.rows(); ++t)
        EXPECT_EQ(dp(t, pair_index(i, j)),
                  d(t, pair_index(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)])));
}
