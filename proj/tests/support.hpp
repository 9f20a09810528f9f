#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "femtk/core.hpp"

namespace femtk::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("femtk_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Two independent unit-variance AR(1) (discretized OU) processes with
// correlation times tau_slow and tau_fast frames, mixed by `mix`.
// Returns frames x = mix * (a, b).
inline RowMatrix mixed_ou(Index n, double tau_slow, double tau_fast, const Matrix& mix, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double pa = std::exp(-1.0 / tau_slow);
  const double pb = std::exp(-1.0 / tau_fast);
  const double sa = std::sqrt(1.0 - pa * pa);
  const double sb = std::sqrt(1.0 - pb * pb);
  RowMatrix out(n, 2);
  double a = normal(rng), b = normal(rng);
  for (Index t = 0; t < n; ++t) {
    out(t, 0) = mix(0, 0) * a + mix(0, 1) * b;
    out(t, 1) = mix(1, 0) * a + mix(1, 1) * b;
    a = pa * a + sa * normal(rng);
    b = pb * b + sb * normal(rng);
  }
  return out;
}

inline double relative_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace femtk::testing
