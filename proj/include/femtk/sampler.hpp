#pragma once

// Overdamped Langevin (Brownian) dynamics, Euler-Maruyama:
//   x <- x + (dt / gamma) F(x) + sqrt(2 D dt) xi,   D = kT / gamma.
// Noise for chain c, step s, component d comes from the counter-based
// generator keyed by (seed, c, s, d / 2), so chains can run in any order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <future>
#include <string>
#include <thread>
#include <vector>

#include "femtk/core.hpp"
#include "femtk/potential.hpp"
#include "femtk/random.hpp"
#include "femtk/trajectory.hpp"

namespace femtk {

struct LangevinConfig {
  double dt = 1e-3;
  double gamma = 1.0;
  double temperature = 300.0;
  Index n_steps = 100000;
  Index stride = 100;
  std::uint64_t seed = 0;
  std::vector<Vector> initial_positions;
  unsigned threads = 1;

  double diffusion() const { return kBoltzmann * temperature / gamma; }
  Index frames_per_chain() const { return n_steps / stride; }

  void validate() const {
    if (!(dt > 0.0)) throw InputError("langevin: dt must be > 0");
    if (!(gamma > 0.0)) throw InputError("langevin: gamma must be > 0");
    if (!(temperature >= 0.0)) throw InputError("langevin: temperature must be >= 0");
    if (n_steps < 0) throw InputError("langevin: n_steps must be >= 0");
    if (stride < 1) throw InputError("langevin: stride must be >= 1");
    if (initial_positions.empty()) throw InputError("langevin: at least one initial position is required");
    for (const auto& x : initial_positions)
      if (x.size() != initial_positions.front().size())
        throw InputError("langevin: initial positions differ in dimension");
  }
};

// Anything exposing dim() and force(x, out) can be sampled.
struct LandscapeField {
  const ReferenceLandscape& landscape;
  Index dim() const { return landscape.dim(); }
  void force(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const {
    landscape.energy_gradient(x, out);
    out = -out;
  }
};

struct ModelField {
  const PotentialModel& model;
  const PriorTerm& prior;
  Index dim() const { return model.input_dim(); }
  void force(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const {
    thread_local PotentialWorkspace ws;
    evaluate_network(model, x, ws);
    out = ws.grad;
    prior.add_gradient(x, out);
    out = -out;
  }
};

struct Chain {
  RowMatrix positions;  // frames_per_chain x dim
  RowMatrix forces;
};

struct SampleResult {
  std::vector<Chain> chains;
  std::vector<std::string> warnings;

  std::vector<FeatureTrajectory> trajectories(double dt_frame, const std::string& prefix = "chain") const {
    std::vector<FeatureTrajectory> out;
    for (std::size_t c = 0; c < chains.size(); ++c)
      out.emplace_back(chains[c].positions, dt_frame, numbered_names("x", chains[c].positions.cols()),
                       prefix + std::to_string(c));
    return out;
  }

  ForceRecord force_record(std::size_t c, double dt_frame) const {
    return ForceRecord{chains.at(c).positions, chains.at(c).forces, dt_frame};
  }
};

inline constexpr double kDivergenceBound = 1e6;

template <class Field>
Chain run_chain(const Field& field, const LangevinConfig& cfg, std::size_t chain_index) {
  const Index dim = field.dim();
  Vector x = cfg.initial_positions.at(chain_index);
  if (x.size() != dim) throw InputError("langevin: initial position dimension does not match the potential");
  Vector f(dim);
  field.force(x, f);
  if (!f.allFinite())
    throw NumericalError("langevin: non-finite force at the initial position of chain " + std::to_string(chain_index));
  const double drift = cfg.dt / cfg.gamma;
  const double noise = std::sqrt(2.0 * cfg.diffusion() * cfg.dt);
  const Index frames = cfg.frames_per_chain();
  Chain out{RowMatrix(frames, dim), RowMatrix(frames, dim)};
  const auto stream = static_cast<std::uint32_t>(chain_index);
  Index recorded = 0;
  for (Index step = 1; step <= cfg.n_steps; ++step) {
    for (Index d = 0; d < dim; d += 2) {
      const auto xi = counter_normal_pair(cfg.seed, stream, static_cast<std::uint64_t>(step),
                                          static_cast<std::uint32_t>(d / 2));
      x(d) += drift * f(d) + noise * xi[0];
      if (d + 1 < dim) x(d + 1) += drift * f(d + 1) + noise * xi[1];
    }
    field.force(x, f);
    if (!(x.cwiseAbs().maxCoeff() <= kDivergenceBound) || !f.allFinite())
      throw NumericalError("langevin: chain " + std::to_string(chain_index) + " diverged at step " +
                           std::to_string(step));
    if (step % cfg.stride == 0 && recorded < frames) {
      out.positions.row(recorded) = x.transpose();
      out.forces.row(recorded) = f.transpose();
      ++recorded;
    }
  }
  return out;
}

// Largest diagonal curvature at the initial positions, by central differences
// of the force.
template <class Field>
double max_initial_curvature(const Field& field, const LangevinConfig& cfg) {
  const Index dim = field.dim();
  double worst = 0.0;
  Vector fp(dim), fm(dim);
  for (const auto& x0 : cfg.initial_positions) {
    if (x0.size() != dim) continue;
    for (Index d = 0; d < dim; ++d) {
      const double h = 1e-5 * std::max(1.0, std::abs(x0(d)));
      Vector xp = x0, xm = x0;
      xp(d) += h;
      xm(d) -= h;
      field.force(xp, fp);
      field.force(xm, fm);
      worst = std::max(worst, std::abs(-(fp(d) - fm(d)) / (2.0 * h)));
    }
  }
  return worst;
}

// One chain per initial position; output is ordered by chain index so serial
// and threaded runs agree bit for bit.
template <class Field>
SampleResult simulate(const Field& field, const LangevinConfig& cfg) {
  cfg.validate();
  SampleResult result;
  const double stiffness = max_initial_curvature(field, cfg);
  if (cfg.dt * stiffness / cfg.gamma > 0.1)
    result.warnings.push_back("dt * curvature / gamma = " + std::to_string(cfg.dt * stiffness / cfg.gamma) +
                              " exceeds 0.1; the integrator may be inaccurate");
  const std::size_t n = cfg.initial_positions.size();
  result.chains.resize(n);
  const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(n)));
  if (threads == 1) {
    for (std::size_t c = 0; c < n; ++c) result.chains[c] = run_chain(field, cfg, c);
    return result;
  }
  std::vector<std::future<void>> jobs;
  std::atomic<std::size_t> next{0};
  for (unsigned t = 0; t < threads; ++t)
    jobs.push_back(std::async(std::launch::async, [&] {
      for (std::size_t c = next++; c < n; c = next++) result.chains[c] = run_chain(field, cfg, c);
    }));
  for (auto& j : jobs) j.get();
  return result;
}

inline SampleResult simulate(const ReferenceLandscape& landscape, const LangevinConfig& cfg) {
  return simulate(LandscapeField{landscape}, cfg);
}

inline SampleResult simulate(const PotentialModel& model, const PriorTerm& prior, const LangevinConfig& cfg) {
  return simulate(ModelField{model, prior}, cfg);
}

}  // namespace femtk
