#pragma once

// End-to-end run on a named toy system:
//   sample truth -> TICA -> free-energy targets -> train -> sample model -> KL.

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "femtk/evaluation.hpp"
#include "femtk/freeenergy.hpp"
#include "femtk/potential.hpp"
#include "femtk/sampler.hpp"
#include "femtk/tica.hpp"
#include "femtk/training.hpp"

namespace femtk {

struct PipelineConfig {
  std::string system = "double_well_2d";
  double temperature = 300.0;
  std::uint64_t seed = 0;

  // Langevin, shared by truth and model runs.
  Index chains = 16;
  Index steps = 1000000;  // per chain
  Index stride = 100;
  double dt = 1e-3;
  double gamma = 1.0;

  Index lag = 10;
  Index components = 2;

  DensityKind density = DensityKind::histogram;
  Index bins = 100;

  Index n_basis = 32;
  Index n_hidden = 32;
  double prior_stiffness = -1.0;  // < 0: kT / mean coordinate variance

  double lambda_energy = 0.0;
  double lambda_force = 1.0;
  Index epochs = 500;
  Index batch_size = 256;
  double learning_rate = 1e-3;
  Index train_frames = 20000;  // evenly strided subset of the truth frames

  Index kl_bins = kDefaultKlBins;
  double epsilon = kDefaultKlEpsilon;
};

struct PipelineResult {
  std::vector<Chain> truth;
  TicaModel tica;
  RowMatrix truth_projection;  // all truth frames, first `components` TICs
  FreeEnergyTargets targets;
  PotentialModel model;
  PriorTerm prior;
  TrainReport report;
  Vector model_start;
  std::vector<Chain> model_samples;
  RowMatrix model_projection;
  KlReport kl;
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

namespace detail {

inline RowMatrix stack_positions(const std::vector<Chain>& chains) {
  Index rows = 0;
  for (const auto& c : chains) rows += c.positions.rows();
  RowMatrix out(rows, chains.empty() ? 0 : chains.front().positions.cols());
  Index at = 0;
  for (const auto& c : chains) {
    out.middleRows(at, c.positions.rows()) = c.positions;
    at += c.positions.rows();
  }
  return out;
}

inline RowMatrix stack_forces(const std::vector<Chain>& chains) {
  Index rows = 0;
  for (const auto& c : chains) rows += c.forces.rows();
  RowMatrix out(rows, chains.empty() ? 0 : chains.front().forces.cols());
  Index at = 0;
  for (const auto& c : chains) {
    out.middleRows(at, c.forces.rows()) = c.forces;
    at += c.forces.rows();
  }
  return out;
}

inline std::vector<Vector> landscape_starts(const ReferenceLandscape& land, Index chains) {
  // Alternate between the known minima so the truth ensemble starts balanced.
  std::vector<Vector> minima;
  if (land.name() == "mueller_brown") {
    minima.push_back((Vector(2) << -0.558, 1.442).finished());
    minima.push_back((Vector(2) << 0.623, 0.028).finished());
    minima.push_back((Vector(2) << -0.050, 0.467).finished());
  } else {
    Vector a = Vector::Zero(land.dim()), b = Vector::Zero(land.dim());
    a(0) = -1.0;
    b(0) = 1.0;
    minima = {a, b};
  }
  std::vector<Vector> out;
  for (Index c = 0; c < chains; ++c) out.push_back(minima[static_cast<std::size_t>(c) % minima.size()]);
  return out;
}

}  // namespace detail

inline void validate(const PipelineConfig& c) {
  if (c.chains < 1) throw InputError("pipeline: chains must be >= 1");
  if (c.components < 1) throw InputError("pipeline: components must be >= 1");
  if (c.train_frames < 1) throw InputError("pipeline: train_frames must be >= 1");
  if (c.kl_bins < 1) throw InputError("pipeline: kl_bins must be >= 1");
  if (c.steps / std::max<Index>(c.stride, 1) <= c.lag)
    throw InputError("pipeline: each chain must record more than lag frames");
}

// Truth chains start alternately in the landscape minima. Model chains all
// start from the truth frame with the lowest free-energy target, the way a
// learned model is usually run from one reference structure; a model whose
// barriers are too high then stays in that basin and the KL shows it.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  PipelineResult r;
  const auto land = ReferenceLandscape::make(cfg.system);

  LangevinConfig lc;
  lc.dt = cfg.dt;
  lc.gamma = cfg.gamma;
  lc.temperature = cfg.temperature;
  lc.n_steps = cfg.steps;
  lc.stride = cfg.stride;
  lc.seed = cfg.seed;
  lc.initial_positions = detail::landscape_starts(land, cfg.chains);
  auto truth_run = simulate(land, lc);
  r.warnings = truth_run.warnings;
  r.truth = std::move(truth_run.chains);

  const double frame_dt = cfg.dt * static_cast<double>(cfg.stride);
  SampleResult truth_view{r.truth, {}};
  const auto truth_trajs = truth_view.trajectories(frame_dt, "truth");
  const auto cov = estimate_covariances(truth_trajs, cfg.lag);
  r.tica = fit_tica(cov, std::min(cfg.components, cov.n_features()), default_ridge(cov));
  r.tica.dt = frame_dt;
  for (const auto& w : r.tica.warnings) r.warnings.push_back(w);
  const Index k = r.tica.n_components();
  r.truth_projection = project(r.tica, truth_trajs, k);

  MarginalParams mp;
  mp.kind = cfg.density;
  mp.n_bins = cfg.bins;
  r.targets = boltzmann_invert(fit_marginals(r.truth_projection, mp), r.truth_projection, cfg.temperature);

  const RowMatrix configs = detail::stack_positions(r.truth);
  const RowMatrix forces = detail::stack_forces(r.truth);
  const Vector mean = configs.colwise().mean().transpose();
  double stiffness = cfg.prior_stiffness;
  if (stiffness < 0.0) {
    const double var = (configs.rowwise() - mean.transpose()).squaredNorm() / static_cast<double>(configs.size());
    stiffness = thermal_energy(cfg.temperature) / var;
  }
  r.prior = PriorTerm::harmonic(mean, stiffness);
  EnergyRecord prior_energy;
  prior_energy.prior_energy.resize(configs.rows());
  for (Index i = 0; i < configs.rows(); ++i) prior_energy.prior_energy(i) = r.prior.energy(configs.row(i).transpose());
  r.targets = energy_correction(std::move(r.targets), prior_energy);

  const Index every = std::max<Index>(1, (configs.rows() + cfg.train_frames - 1) / cfg.train_frames);
  const Index n_train = (configs.rows() + every - 1) / every;
  TrainingSet set{RowMatrix(n_train, configs.cols()), RowMatrix(n_train, configs.cols()), Vector(n_train)};
  for (Index i = 0; i < n_train; ++i) {
    set.configs.row(i) = configs.row(i * every);
    set.forces.row(i) = forces.row(i * every);
    set.g_targets(i) = r.targets.g_total(i * every);
  }
  InitOptions init;
  init.n_basis = cfg.n_basis;
  init.n_hidden = cfg.n_hidden;
  init.seed = cfg.seed;
  LossConfig loss;
  loss.lambda_energy = cfg.lambda_energy;
  loss.lambda_force = cfg.lambda_force;
  loss.max_epochs = cfg.epochs;
  loss.batch_size = cfg.batch_size;
  loss.learning_rate = cfg.learning_rate;
  loss.seed = cfg.seed;
  auto [model, report] = train(initialize_potential(set.configs, init), r.prior, set, loss);
  r.model = std::move(model);
  r.report = std::move(report);

  Index best = 0;
  for (Index i = 1; i < r.targets.g_total.size(); ++i)
    if (r.targets.g_total(i) < r.targets.g_total(best)) best = i;
  r.model_start = configs.row(best).transpose();
  LangevinConfig mc = lc;
  mc.seed = cfg.seed + 1;
  mc.initial_positions.assign(static_cast<std::size_t>(cfg.chains), r.model_start);
  auto model_run = simulate(r.model, r.prior, mc);
  for (auto& w : model_run.warnings) r.warnings.push_back("model sampling: " + w);
  r.model_samples = std::move(model_run.chains);
  r.model_projection = project(r.tica, detail::stack_positions(r.model_samples), k);

  if (k < 2) throw InputError("pipeline: KL evaluation needs at least 2 TICA components");
  r.kl = kl_divergence_2d(r.truth_projection.leftCols(2), r.model_projection.leftCols(2), cfg.kl_bins, cfg.kl_bins,
                          cfg.epsilon);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace femtk
