#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace femtk {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr const char* kVersion = "0.3.0";

// Boltzmann constant in kcal/(mol K). All energies in the toolkit are kcal/mol.
inline constexpr double kBoltzmann = 0.0019872041;

inline constexpr double thermal_energy(double temperature) { return kBoltzmann * temperature; }

// Base for every error the toolkit raises. The CLI maps InputError to exit
// code 1 and NumericalError to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files, inconsistent shapes, bad configuration.
class InputError : public Error {
 public:
  using Error::Error;
};

// Divergence, singular systems, non-convergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace detail

}  // namespace femtk
