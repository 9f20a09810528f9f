#pragma once

// Mixed force/energy matching.
//
//   L(theta) = lambda_force * L_force + lambda_energy * L_energy
//   L_force  = 1/N sum_i |F_model(x_i) - F_target,i|^2
//   L_energy = 1/N sum_i (r_i + C*)^2,   r_i = U(x_i) + E_prior(x_i) - G_i,
//   C*       = -mean(r)
//
// C* is refit in closed form for every batch, so adding a constant to every G
// leaves both the loss and its gradient unchanged.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "femtk/core.hpp"
#include "femtk/potential.hpp"
#include "femtk/trajectory.hpp"

namespace femtk {

// lambda_energy values swept in the reference experiments.
inline constexpr std::array<double, 8> kLambdaEnergySweep = {0.0, 0.01, 0.05, 0.075, 0.1, 0.5, 0.8, 1.0};

struct LossConfig {
  double lambda_force = 1.0;
  double lambda_energy = 0.0;
  Index batch_size = 256;
  Index max_epochs = 500;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  static LossConfig with_lambda_energy(double lambda_energy) {
    LossConfig c;
    c.lambda_energy = lambda_energy;
    c.lambda_force = 1.0 - lambda_energy;
    return c;
  }

  void validate() const {
    if (!(lambda_force >= 0.0 && lambda_force <= 1.0) || !(lambda_energy >= 0.0 && lambda_energy <= 1.0))
      throw InputError("loss config: lambdas must lie in [0, 1]");
    if (std::abs(lambda_force + lambda_energy - 1.0) > 1e-12)
      throw InputError("loss config: lambda_force + lambda_energy must equal 1 (got " +
                       std::to_string(lambda_force + lambda_energy) + ")");
    if (batch_size < 1) throw InputError("loss config: batch_size must be >= 1");
    if (max_epochs < 0) throw InputError("loss config: max_epochs must be >= 0");
    if (!(learning_rate > 0.0)) throw InputError("loss config: learning_rate must be > 0");
  }
};

struct TrainingSet {
  RowMatrix configs;
  RowMatrix forces;
  Vector g_targets;

  Index size() const { return configs.rows(); }

  void validate() const {
    if (configs.rows() == 0) throw InputError("training set is empty");
    if (forces.rows() != configs.rows() || forces.cols() != configs.cols())
      throw InputError("training set: forces " + detail::shape_str(forces.rows(), forces.cols()) +
                       " do not match configs " + detail::shape_str(configs.rows(), configs.cols()));
    if (g_targets.size() != configs.rows())
      throw InputError("training set: " + std::to_string(g_targets.size()) + " energy targets for " +
                       std::to_string(configs.rows()) + " frames");
    if (!configs.allFinite() || !forces.allFinite() || !g_targets.allFinite())
      throw InputError("training set contains non-finite values");
  }
};

struct LossBreakdown {
  double total = 0.0;
  double force = 0.0;
  double energy = 0.0;
  double offset_c = 0.0;  // C* = -mean(residual)
};

namespace detail {

// Per-batch buffers for the batched backward pass.
struct BatchBuffers {
  RowMatrix phi, q;        // n x n_basis
  RowMatrix s, h, dt, p;   // n x n_hidden
  Vector r;                // energy residuals
  PotentialWorkspace ws;
  Vector prior_grad, err;
};

// Evaluates both loss terms over `rows`; when `grad` is non-null also writes
// the gradient of the weighted total with respect to theta.
inline LossBreakdown evaluate_batch(const PotentialModel& m, const PriorTerm& prior, const TrainingSet& set,
                                    std::span<const Index> rows, double lambda_force, double lambda_energy,
                                    Vector* grad, BatchBuffers& buf) {
  const auto n = static_cast<Index>(rows.size());
  if (n == 0) throw InputError("loss: empty batch");
  if (set.configs.cols() != m.input_dim())
    throw InputError("loss: configs have dimension " + std::to_string(set.configs.cols()) + ", model expects " +
                     std::to_string(m.input_dim()));
  const Index nb = m.n_basis();
  const Index nh = m.n_hidden();
  const Index dim = m.input_dim();
  const bool want_grad = grad != nullptr;
  if (want_grad) {
    buf.phi.resize(n, nb);
    buf.q.resize(n, nb);
    buf.s.resize(n, nh);
    buf.h.resize(n, nh);
    buf.dt.resize(n, nh);
    buf.p.resize(n, nh);
  }
  buf.r.resize(n);
  buf.prior_grad.resize(dim);
  buf.err.resize(dim);

  // Targets are taken relative to the first row of the batch. Any constant
  // shift of G cancels here before it meets the model energy, so it cannot
  // perturb the rounding of the residuals.
  const double g_ref = set.g_targets(rows[0]);
  double force_sum = 0.0;
  for (Index k = 0; k < n; ++k) {
    const Index row = rows[static_cast<std::size_t>(k)];
    const auto x = set.configs.row(row).transpose();
    const double u = evaluate_network(m, x, buf.ws);
    buf.prior_grad.setZero();
    prior.add_gradient(x, buf.prior_grad);
    // e = F_model - F_target = -(grad U + grad prior) - F_target
    buf.err = -(buf.ws.grad + buf.prior_grad) - set.forces.row(row).transpose();
    force_sum += buf.err.squaredNorm();
    buf.r(k) = u + prior.energy(x) - (set.g_targets(row) - g_ref);
    if (want_grad) {
      buf.phi.row(k) = buf.ws.phi.transpose();
      buf.s.row(k) = buf.ws.s.transpose();
      buf.h.row(k) = buf.ws.h.transpose();
      buf.dt.row(k) = buf.ws.dtanh.transpose();
      buf.q.row(k).noalias() = (buf.ws.jphi * buf.err).transpose();
      buf.p.row(k).noalias() = (m.hidden_weights() * buf.q.row(k).transpose()).transpose();
    }
  }
  const double mean_r = buf.r.mean();
  const Vector rc = buf.r.array() - mean_r;

  LossBreakdown out;
  out.force = force_sum / static_cast<double>(n);
  out.energy = rc.squaredNorm() / static_cast<double>(n);
  out.offset_c = g_ref - mean_r;
  out.total = lambda_force * out.force + lambda_energy * out.energy;

  if (want_grad) {
    grad->setZero(m.n_params());
    const double scale = 2.0 / static_cast<double>(n);
    // c_i = 2 w2_i h_i (1 - h_i^2), so that e . dF/dW1_ij = c_i p_i phi_j - s_i q_j.
    RowMatrix cp = (buf.h.array() * buf.dt.array()).matrix();
    cp.array().rowwise() *= (2.0 * m.output_weights().transpose()).array();
    cp.array() *= buf.p.array();
    RowMatrix left = lambda_force * cp;
    left.noalias() += lambda_energy * (rc.asDiagonal() * buf.s);
    Matrix g_w1 = left.transpose() * buf.phi;
    g_w1.noalias() -= lambda_force * (buf.s.transpose() * buf.q);
    g_w1 *= scale;
    Index at = 0;
    for (Index i = 0; i < nh; ++i)
      for (Index j = 0; j < nb; ++j) (*grad)(at++) = g_w1(i, j);
    grad->segment(m.offset_b1(), nh) = scale * left.colwise().sum().transpose();
    const RowMatrix dtp = (buf.dt.array() * buf.p.array()).matrix();
    grad->segment(m.offset_w2(), nh) =
        scale * (-lambda_force * dtp.colwise().sum().transpose() + lambda_energy * (buf.h.transpose() * rc));
    (*grad)(m.offset_b2()) = scale * lambda_energy * rc.sum();
  }
  return out;
}

inline std::vector<Index> all_rows(Index n) {
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  return rows;
}

}  // namespace detail

// Mean squared force residual per frame, summed over degrees of freedom.
inline double force_loss(const PotentialModel& m, const PriorTerm& prior, const RowMatrix& configs,
                         const RowMatrix& target_forces) {
  TrainingSet set{configs, target_forces, Vector::Zero(configs.rows())};
  set.validate();
  detail::BatchBuffers buf;
  const auto rows = detail::all_rows(set.size());
  return detail::evaluate_batch(m, prior, set, rows, 1.0, 0.0, nullptr, buf).force;
}

// Returns (loss, C*) after closed-form offset alignment.
inline std::pair<double, double> energy_loss(const PotentialModel& m, const PriorTerm& prior, const RowMatrix& configs,
                                             const Eigen::Ref<const Vector>& g_targets) {
  TrainingSet set{configs, RowMatrix::Zero(configs.rows(), configs.cols()), g_targets};
  set.validate();
  detail::BatchBuffers buf;
  const auto rows = detail::all_rows(set.size());
  const auto b = detail::evaluate_batch(m, prior, set, rows, 0.0, 1.0, nullptr, buf);
  return {b.energy, b.offset_c};
}

inline LossBreakdown loss_breakdown(const PotentialModel& m, const PriorTerm& prior, const TrainingSet& set,
                                    const LossConfig& cfg) {
  cfg.validate();
  set.validate();
  detail::BatchBuffers buf;
  const auto rows = detail::all_rows(set.size());
  return detail::evaluate_batch(m, prior, set, rows, cfg.lambda_force, cfg.lambda_energy, nullptr, buf);
}

inline double total_loss(const PotentialModel& m, const PriorTerm& prior, const TrainingSet& set,
                         const LossConfig& cfg) {
  return loss_breakdown(m, prior, set, cfg).total;
}

// Gradient of the total loss over the given rows (all rows when empty).
inline Vector total_loss_gradient(const PotentialModel& m, const PriorTerm& prior, const TrainingSet& set,
                                  const LossConfig& cfg, std::span<const Index> rows = {}) {
  cfg.validate();
  set.validate();
  detail::BatchBuffers buf;
  std::vector<Index> all;
  if (rows.empty()) {
    all = detail::all_rows(set.size());
    rows = all;
  }
  Vector grad;
  detail::evaluate_batch(m, prior, set, rows, cfg.lambda_force, cfg.lambda_energy, &grad, buf);
  return grad;
}

// Linear least squares for the output layer (w2, b2) with the hidden layer
// held fixed, fitting U + E_prior to `targets`.
inline PotentialModel fit_output_layer(PotentialModel m, const PriorTerm& prior, const RowMatrix& configs,
                                       const Eigen::Ref<const Vector>& targets) {
  if (configs.rows() != targets.size()) throw InputError("fit_output_layer: one target per configuration required");
  if (configs.rows() == 0) throw InputError("fit_output_layer: no configurations");
  const Index nh = m.n_hidden();
  Matrix design(configs.rows(), nh + 1);
  Vector rhs(configs.rows());
  PotentialWorkspace ws;
  for (Index i = 0; i < configs.rows(); ++i) {
    const auto x = configs.row(i).transpose();
    evaluate_network(m, x, ws);
    design.row(i).head(nh) = ws.h.transpose();
    design(i, nh) = 1.0;
    rhs(i) = targets(i) - prior.energy(x);
  }
  const Vector sol = design.colPivHouseholderQr().solve(rhs);
  Vector theta = m.parameters();
  theta.segment(m.offset_w2(), nh) = sol.head(nh);
  theta(m.offset_b2()) = sol(nh);
  m.set_parameters(theta);
  return m;
}

struct EpochRecord {
  Index epoch = 0;
  LossBreakdown loss;
};

struct TrainReport {
  LossConfig config;
  std::vector<EpochRecord> epochs;  // epoch 0 is the initial model
  Vector final_theta;
  bool converged = false;
};

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& msg, Vector last_finite_theta)
      : NumericalError(msg), last_finite_theta_(std::move(last_finite_theta)) {}
  const Vector& last_finite_theta() const { return last_finite_theta_; }

 private:
  Vector last_finite_theta_;
};

inline constexpr double kConvergenceTolerance = 1e-8;
inline constexpr Index kConvergenceWindow = 10;

// Mini-batch Adam with seeded shuffling. Stops after max_epochs or once the
// full-set total loss has improved by less than 1e-8 (relative) over 10 epochs.
inline std::pair<PotentialModel, TrainReport> train(PotentialModel model, const PriorTerm& prior,
                                                    const TrainingSet& set, const LossConfig& cfg) {
  cfg.validate();
  set.validate();
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;

  TrainReport report;
  report.config = cfg;
  detail::BatchBuffers buf;
  const auto all = detail::all_rows(set.size());
  auto full_loss = [&](const PotentialModel& mm) {
    return detail::evaluate_batch(mm, prior, set, all, cfg.lambda_force, cfg.lambda_energy, nullptr, buf);
  };
  auto check = [&](const LossBreakdown& l, const Vector& last_good, Index epoch) {
    if (!std::isfinite(l.total))
      throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)", last_good);
  };

  Vector theta = model.parameters();
  Vector last_good = theta;
  {
    const auto l0 = full_loss(model);
    check(l0, last_good, 0);
    report.epochs.push_back({0, l0});
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> order = all;
  Vector m1 = Vector::Zero(theta.size());
  Vector m2 = Vector::Zero(theta.size());
  Vector grad;
  std::int64_t step = 0;
  for (Index epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      std::span<const Index> rows(order.data() + start, len);
      detail::evaluate_batch(model, prior, set, rows, cfg.lambda_force, cfg.lambda_energy, &grad, buf);
      if (!grad.allFinite())
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " (non-finite gradient)",
                               last_good);
      ++step;
      m1 = beta1 * m1 + (1.0 - beta1) * grad;
      m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseAbs2();
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      theta.array() -= cfg.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
      model.set_parameters(theta);
    }
    const auto l = full_loss(model);
    check(l, last_good, epoch);
    last_good = theta;
    report.epochs.push_back({epoch, l});
    // Converged once the best loss of the last 10 epochs is no better (by
    // 1e-8 relative) than the best seen before them. Comparing against the
    // running best keeps single noisy mini-batch epochs from ending the run.
    if (epoch >= kConvergenceWindow) {
      const auto split = static_cast<std::size_t>(epoch - kConvergenceWindow + 1);
      double before = std::numeric_limits<double>::infinity();
      double recent = std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < report.epochs.size(); ++e)
        (e < split ? before : recent) = std::min(e < split ? before : recent, report.epochs[e].loss.total);
      if (before - recent < kConvergenceTolerance * std::abs(before)) {
        report.converged = true;
        break;
      }
    }
  }
  report.final_theta = theta;
  return {std::move(model), std::move(report)};
}

inline void save_report_csv(const TrainReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "epoch,total,force,energy,C\n";
  for (const auto& e : r.epochs)
    os << e.epoch << ',' << detail::format_double(e.loss.total) << ',' << detail::format_double(e.loss.force) << ','
       << detail::format_double(e.loss.energy) << ',' << detail::format_double(e.loss.offset_c) << '\n';
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline nlohmann::json to_json(const LossConfig& c) {
  return {{"lambda_force", c.lambda_force}, {"lambda_energy", c.lambda_energy}, {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},     {"learning_rate", c.learning_rate}, {"seed", c.seed}};
}

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json j;
  j["config"] = to_json(r.config);
  j["converged"] = r.converged;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : r.epochs)
    rows.push_back({{"epoch", e.epoch},
                    {"total", e.loss.total},
                    {"force", e.loss.force},
                    {"energy", e.loss.energy},
                    {"C", e.loss.offset_c}});
  j["epochs"] = std::move(rows);
  j["final_theta"] = detail::vector_to_json(r.final_theta);
  return j;
}

}  // namespace femtk
