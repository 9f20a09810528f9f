#pragma once

// Marginal densities over reduced coordinates and Boltzmann inversion.
//
// Each component k gets an independent 1-D estimator P_k, and
//   G_k(y) = -kT log max(P_k(y), floor),   G(y) = sum_k G_k(y_k).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "femtk/core.hpp"
#include "femtk/trajectory.hpp"

namespace femtk {

enum class DensityKind { kde, histogram };

inline std::string to_string(DensityKind k) { return k == DensityKind::kde ? "kde" : "histogram"; }

inline DensityKind density_kind_from_string(const std::string& s) {
  if (s == "kde") return DensityKind::kde;
  if (s == "histogram" || s == "hist") return DensityKind::histogram;
  throw InputError("unknown density kind '" + s + "' (expected kde or histogram)");
}

struct MarginalParams {
  DensityKind kind = DensityKind::histogram;
  Index n_bins = 100;
  std::optional<double> bandwidth;                     // KDE; Scott's rule when empty
  std::optional<std::pair<double, double>> range;      // histogram; empirical range when empty
  double floor_epsilon = 1e-12;
};

// One-dimensional density estimate. Histogram densities are bin probability
// divided by bin width so that KDE and histogram evaluate on the same scale.
class Marginal1D {
 public:
  static Marginal1D histogram(const Eigen::Ref<const Vector>& samples, Index n_bins,
                              std::optional<std::pair<double, double>> range = std::nullopt) {
    if (n_bins < 1) throw InputError("histogram: n_bins must be >= 1");
    Marginal1D m;
    m.kind_ = DensityKind::histogram;
    double lo = samples.minCoeff();
    double hi = samples.maxCoeff();
    if (range) {
      lo = range->first;
      hi = range->second;
      if (!(hi > lo)) throw InputError("histogram: range must satisfy min < max");
    } else {
      const double scale = std::max({hi - lo, std::abs(lo), std::abs(hi), 1.0});
      lo -= 1e-9 * scale;
      hi += 1e-9 * scale;
    }
    m.lo_ = lo;
    m.hi_ = hi;
    m.step_ = (hi - lo) / static_cast<double>(n_bins);
    m.edges_.resize(static_cast<std::size_t>(n_bins) + 1);
    for (Index b = 0; b <= n_bins; ++b) m.edges_[static_cast<std::size_t>(b)] = lo + m.step_ * static_cast<double>(b);
    m.edges_.back() = hi;
    std::vector<double> counts(static_cast<std::size_t>(n_bins), 0.0);
    Index inside = 0;
    for (Index i = 0; i < samples.size(); ++i) {
      const auto b = m.bin_of(samples(i));
      if (b < 0) continue;
      counts[static_cast<std::size_t>(b)] += 1.0;
      ++inside;
    }
    if (inside == 0) throw InputError("histogram: no samples inside the requested range");
    m.values_.resize(counts.size());
    for (std::size_t b = 0; b < counts.size(); ++b) m.values_[b] = counts[b] / static_cast<double>(inside);
    return m;
  }

  static Marginal1D kde(const Eigen::Ref<const Vector>& samples, std::optional<double> bandwidth = std::nullopt) {
    const auto n = samples.size();
    if (n < 2) throw InputError("kde: need at least 2 samples");
    Marginal1D m;
    m.kind_ = DensityKind::kde;
    const double mean = samples.mean();
    const double sd = std::sqrt((samples.array() - mean).square().sum() / static_cast<double>(n - 1));
    m.bandwidth_ = bandwidth ? *bandwidth : sd * std::pow(static_cast<double>(n), -0.2);
    if (!(m.bandwidth_ > 0.0) || !std::isfinite(m.bandwidth_)) throw InputError("kde: bandwidth is zero");
    m.samples_.assign(samples.data(), samples.data() + n);
    std::sort(m.samples_.begin(), m.samples_.end());
    m.build_kde_grid();
    return m;
  }

  DensityKind kind() const { return kind_; }
  double bandwidth() const { return bandwidth_; }
  const std::vector<double>& edges() const { return edges_; }
  // Histogram: bin probabilities. KDE: density on the interpolation grid.
  const std::vector<double>& values() const { return values_; }
  std::pair<double, double> support() const { return {lo_, hi_}; }

  // Histogram bin index of y, or -1 outside the edges. Bins are half-open
  // except the last, which is closed.
  Index bin_of(double y) const {
    if (!(y >= lo_ && y <= hi_)) return -1;
    const auto n = static_cast<Index>(edges_.size()) - 1;
    auto b = static_cast<Index>(std::floor((y - lo_) / step_));
    b = std::clamp<Index>(b, 0, n - 1);
    // Floating-point guard against the computed edge disagreeing with edges_.
    while (b > 0 && y < edges_[static_cast<std::size_t>(b)]) --b;
    while (b < n - 1 && y >= edges_[static_cast<std::size_t>(b) + 1]) ++b;
    return b;
  }

  // Unfloored density.
  double density(double y) const {
    if (kind_ == DensityKind::histogram) {
      const auto b = bin_of(y);
      if (b < 0) return 0.0;
      // Bins are equal-width; dividing by the nominal step keeps equal
      // probabilities at exactly equal densities.
      return values_[static_cast<std::size_t>(b)] / step_;
    }
    if (grid_exact_) return density_exact(y);
    if (!(y >= lo_ && y <= hi_)) return 0.0;
    const double pos = (y - lo_) / step_;
    auto i = static_cast<std::size_t>(std::floor(pos));
    if (i >= values_.size() - 1) return values_.back();
    const double frac = pos - static_cast<double>(i);
    return (1.0 - frac) * values_[i] + frac * values_[i + 1];
  }

  // Direct Gaussian-kernel sum over samples within 9 bandwidths.
  double density_exact(double y) const {
    if (kind_ != DensityKind::kde) return density(y);
    const double h = bandwidth_;
    auto first = std::lower_bound(samples_.begin(), samples_.end(), y - 9.0 * h);
    auto last = std::upper_bound(samples_.begin(), samples_.end(), y + 9.0 * h);
    double sum = 0.0;
    for (auto it = first; it != last; ++it) {
      const double u = (y - *it) / h;
      sum += std::exp(-0.5 * u * u);
    }
    return sum / (static_cast<double>(samples_.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  }

 private:
  // Linear binning onto a grid with spacing h/32, then a discrete Gaussian
  // convolution truncated at 8h. Queries interpolate linearly. Very wide
  // ranges relative to h fall back to the exact sum.
  void build_kde_grid() {
    const double h = bandwidth_;
    lo_ = samples_.front() - 8.0 * h;
    hi_ = samples_.back() + 8.0 * h;
    constexpr std::size_t kMaxGrid = std::size_t{1} << 18;
    const double wanted = std::ceil((hi_ - lo_) / (h / 32.0)) + 1.0;
    if (wanted > static_cast<double>(kMaxGrid)) {
      grid_exact_ = true;
      return;
    }
    const auto m = std::max<std::size_t>(static_cast<std::size_t>(wanted), 64);
    step_ = (hi_ - lo_) / static_cast<double>(m - 1);
    std::vector<double> weights(m, 0.0);
    for (double s : samples_) {
      const double pos = (s - lo_) / step_;
      auto i = static_cast<std::size_t>(std::floor(pos));
      i = std::min(i, m - 2);
      const double frac = pos - static_cast<double>(i);
      weights[i] += 1.0 - frac;
      weights[i + 1] += frac;
    }
    const auto half = static_cast<std::ptrdiff_t>(std::ceil(8.0 * h / step_));
    std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
    const double norm = 1.0 / (static_cast<double>(samples_.size()) * h * std::sqrt(2.0 * std::numbers::pi));
    for (std::ptrdiff_t d = -half; d <= half; ++d) {
      const double u = static_cast<double>(d) * step_ / h;
      kernel[static_cast<std::size_t>(d + half)] = norm * std::exp(-0.5 * u * u);
    }
    values_.assign(m, 0.0);
    const auto mm = static_cast<std::ptrdiff_t>(m);
    for (std::ptrdiff_t i = 0; i < mm; ++i) {
      const double w = weights[static_cast<std::size_t>(i)];
      if (w == 0.0) continue;
      const auto a = std::max<std::ptrdiff_t>(0, i - half);
      const auto b = std::min<std::ptrdiff_t>(mm - 1, i + half);
      for (std::ptrdiff_t g = a; g <= b; ++g)
        values_[static_cast<std::size_t>(g)] += w * kernel[static_cast<std::size_t>(g - i + half)];
    }
  }

  DensityKind kind_ = DensityKind::histogram;
  double lo_ = 0.0;
  double hi_ = 0.0;
  double step_ = 1.0;
  std::vector<double> edges_;
  std::vector<double> values_;
  std::vector<double> samples_;
  double bandwidth_ = 0.0;
  bool grid_exact_ = false;
};

struct MarginalDensity {
  DensityKind kind = DensityKind::histogram;
  std::vector<Marginal1D> components;
  double floor_epsilon = 1e-12;

  Index dim() const { return static_cast<Index>(components.size()); }

  // Density of component k at y, floored at floor_epsilon.
  double evaluate(Index k, double y) const {
    return std::max(components.at(static_cast<std::size_t>(k)).density(y), floor_epsilon);
  }
};

inline MarginalDensity fit_marginals(const RowMatrix& y, const MarginalParams& params = {}) {
  if (y.rows() < 10) throw InputError("fit_marginals: need at least 10 frames, got " + std::to_string(y.rows()));
  if (y.cols() < 1) throw InputError("fit_marginals: need at least one component");
  if (!(params.floor_epsilon > 0.0)) throw InputError("fit_marginals: floor_epsilon must be > 0");
  MarginalDensity d;
  d.kind = params.kind;
  d.floor_epsilon = params.floor_epsilon;
  for (Index k = 0; k < y.cols(); ++k) {
    const Vector col = y.col(k);
    if (params.kind == DensityKind::kde) {
      if (!params.bandwidth && col.maxCoeff() == col.minCoeff())
        throw InputError("fit_marginals: component " + std::to_string(k) + " has zero variance (KDE bandwidth would be 0)");
      d.components.push_back(Marginal1D::kde(col, params.bandwidth));
    } else {
      d.components.push_back(Marginal1D::histogram(col, params.n_bins, params.range));
    }
  }
  return d;
}

struct FreeEnergyTargets {
  Vector g_total;
  RowMatrix g_per_component;
  std::optional<Vector> delta_e;
  std::optional<Vector> prior_energy;
  double temperature = 300.0;
  double floor_epsilon = 1e-12;
  std::string constant_c_policy = "optimal offset fitted per batch at training time";

  Index n_frames() const { return g_total.size(); }
};

inline FreeEnergyTargets boltzmann_invert(const MarginalDensity& density, const RowMatrix& y, double temperature) {
  if (!(temperature > 0.0)) throw InputError("boltzmann_invert: temperature must be > 0");
  if (y.cols() != density.dim())
    throw InputError("boltzmann_invert: " + std::to_string(y.cols()) + " components given, density has " +
                     std::to_string(density.dim()));
  const double kt = thermal_energy(temperature);
  FreeEnergyTargets t;
  t.temperature = temperature;
  t.floor_epsilon = density.floor_epsilon;
  t.g_per_component.resize(y.rows(), y.cols());
  t.g_total.resize(y.rows());
  for (Index i = 0; i < y.rows(); ++i) {
    double sum = 0.0;
    for (Index k = 0; k < y.cols(); ++k) {
      const double g = -kt * std::log(density.evaluate(k, y(i, k)));
      t.g_per_component(i, k) = g;
      sum += g;
    }
    t.g_total(i) = sum;
  }
  return t;
}

inline FreeEnergyTargets energy_correction(FreeEnergyTargets targets, const EnergyRecord& prior) {
  if (prior.prior_energy.size() != targets.g_total.size())
    throw InputError("energy_correction: " + std::to_string(targets.g_total.size()) + " targets but " +
                     std::to_string(prior.prior_energy.size()) + " prior energies");
  prior.validate();
  targets.delta_e = targets.g_total - prior.prior_energy;
  targets.prior_energy = prior.prior_energy;
  return targets;
}

inline void save_targets(const FreeEnergyTargets& t, const std::filesystem::path& path, double dt = 1.0) {
  Table tab;
  tab.magic = kMagicEnergy;
  tab.dt = dt;
  const Index d = t.g_per_component.cols();
  const Index cols = 1 + d + (t.delta_e ? 1 : 0) + (t.prior_energy ? 1 : 0);
  tab.values.resize(t.n_frames(), cols);
  tab.names.push_back("g_total");
  tab.values.col(0) = t.g_total;
  for (Index k = 0; k < d; ++k) {
    tab.names.push_back("g_" + std::to_string(k));
    tab.values.col(1 + k) = t.g_per_component.col(k);
  }
  Index c = 1 + d;
  if (t.delta_e) {
    tab.names.push_back("delta_e");
    tab.values.col(c++) = *t.delta_e;
  }
  if (t.prior_energy) {
    tab.names.push_back("prior_energy");
    tab.values.col(c++) = *t.prior_energy;
  }
  write_table(tab, path);
}

inline FreeEnergyTargets load_targets(const std::filesystem::path& path, double temperature = 300.0) {
  Table tab = read_table(path, kMagicEnergy);
  const Index g = tab.column("g_total");
  if (g < 0) throw InputError(path.string() + ": no 'g_total' column");
  FreeEnergyTargets t;
  t.temperature = temperature;
  t.g_total = tab.values.col(g);
  Index d = 0;
  while (tab.column("g_" + std::to_string(d)) >= 0) ++d;
  t.g_per_component.resize(tab.values.rows(), d);
  for (Index k = 0; k < d; ++k) t.g_per_component.col(k) = tab.values.col(tab.column("g_" + std::to_string(k)));
  if (Index c = tab.column("delta_e"); c >= 0) t.delta_e = Vector(tab.values.col(c));
  if (Index c = tab.column("prior_energy"); c >= 0) t.prior_energy = Vector(tab.values.col(c));
  if (!t.g_total.allFinite()) throw InputError(path.string() + ": non-finite free-energy target");
  return t;
}

// Mean of per-frame values binned on an nx x ny grid over two coordinates.
struct LandscapeGrid {
  double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
  Index nx = 100, ny = 100;
  Matrix mean_value;                                           // 0 where count == 0
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> count;  // occupancy

  bool occupied(Index i, Index j) const { return count(i, j) > 0; }
  double x_center(Index i) const { return x_min + (static_cast<double>(i) + 0.5) * (x_max - x_min) / static_cast<double>(nx); }
  double y_center(Index j) const { return y_min + (static_cast<double>(j) + 0.5) * (y_max - y_min) / static_cast<double>(ny); }
  bool same_geometry(const LandscapeGrid& o) const {
    return nx == o.nx && ny == o.ny && x_min == o.x_min && x_max == o.x_max && y_min == o.y_min && y_max == o.y_max;
  }
};

inline constexpr Index kDefaultGridBins = 100;

namespace detail {

// Half-open bins, last bin closed. Degenerate ranges map to bin 0.
inline Index grid_bin(double v, double lo, double hi, Index n) {
  if (!(hi > lo)) return 0;
  auto b = static_cast<Index>(std::floor((v - lo) / (hi - lo) * static_cast<double>(n)));
  return std::clamp<Index>(b, 0, n - 1);
}

}  // namespace detail

inline LandscapeGrid mean_energy_grid(const RowMatrix& y2, const Eigen::Ref<const Vector>& values,
                                      Index nx = kDefaultGridBins, Index ny = kDefaultGridBins) {
  if (y2.rows() == 0) throw InputError("mean_energy_grid: no frames");
  if (y2.cols() < 2) throw InputError("mean_energy_grid: need two coordinates");
  if (values.size() != y2.rows()) throw InputError("mean_energy_grid: value count does not match frame count");
  if (nx < 1 || ny < 1) throw InputError("mean_energy_grid: nx and ny must be >= 1");
  LandscapeGrid g;
  g.nx = nx;
  g.ny = ny;
  g.x_min = y2.col(0).minCoeff();
  g.x_max = y2.col(0).maxCoeff();
  g.y_min = y2.col(1).minCoeff();
  g.y_max = y2.col(1).maxCoeff();
  Matrix sum = Matrix::Zero(nx, ny);
  g.count.setZero(nx, ny);
  for (Index i = 0; i < y2.rows(); ++i) {
    const Index bx = detail::grid_bin(y2(i, 0), g.x_min, g.x_max, nx);
    const Index by = detail::grid_bin(y2(i, 1), g.y_min, g.y_max, ny);
    sum(bx, by) += values(i);
    g.count(bx, by) += 1;
  }
  g.mean_value = Matrix::Zero(nx, ny);
  for (Index i = 0; i < nx; ++i)
    for (Index j = 0; j < ny; ++j)
      if (g.count(i, j) > 0) g.mean_value(i, j) = sum(i, j) / static_cast<double>(g.count(i, j));
  return g;
}

// CSV columns: x_index,y_index,x_center,y_center,count,mean. Empty bins carry
// count 0 and mean 0.
inline void save_grid_csv(const LandscapeGrid& g, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "x_index,y_index,x_center,y_center,count,mean\n";
  for (Index i = 0; i < g.nx; ++i)
    for (Index j = 0; j < g.ny; ++j)
      os << i << ',' << j << ',' << detail::format_double(g.x_center(i)) << ',' << detail::format_double(g.y_center(j))
         << ',' << g.count(i, j) << ',' << detail::format_double(g.mean_value(i, j)) << '\n';
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace femtk
