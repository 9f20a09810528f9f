#pragma once

// Differentiable coarse-grained potential
//   U(theta, x) = w2 . tanh(W1 phi(x) + b1) + b2,
//   phi_j(x)    = exp(-|x - c_j|^2 / (2 width_j^2)),
// with fixed RBF centers/widths and trainable theta = (W1 row-major, b1, w2, b2).
// Energies, forces and every parameter derivative are closed form.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "femtk/core.hpp"
#include "femtk/json_util.hpp"

namespace femtk {

struct PriorTerm {
  enum class Kind { none, harmonic };
  Kind kind = Kind::none;
  Vector center;
  double stiffness = 0.0;  // kcal/mol per unit^2

  static PriorTerm harmonic(Vector center, double stiffness) {
    if (!(stiffness >= 0.0)) throw InputError("harmonic prior: stiffness must be >= 0");
    return PriorTerm{Kind::harmonic, std::move(center), stiffness};
  }

  double energy(const Eigen::Ref<const Vector>& x) const {
    if (kind == Kind::none) return 0.0;
    check(x);
    return 0.5 * stiffness * (x - center).squaredNorm();
  }

  // Adds the gradient of the prior energy to `grad`.
  void add_gradient(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> grad) const {
    if (kind == Kind::none) return;
    check(x);
    grad += stiffness * (x - center);
  }

 private:
  void check(const Eigen::Ref<const Vector>& x) const {
    if (x.size() != center.size())
      throw InputError("prior: dimension " + std::to_string(x.size()) + " != " + std::to_string(center.size()));
  }
};

class PotentialModel {
 public:
  PotentialModel() = default;

  PotentialModel(Matrix centers, Vector widths, Index n_hidden)
      : centers_(std::move(centers)), widths_(std::move(widths)) {
    if (centers_.rows() < 1 || centers_.cols() < 1) throw InputError("potential: need at least one center");
    if (widths_.size() != centers_.rows()) throw InputError("potential: one width per center required");
    if (!(widths_.array() > 0.0).all()) throw InputError("potential: widths must be > 0");
    if (n_hidden < 1) throw InputError("potential: n_hidden must be >= 1");
    w1_ = Matrix::Zero(n_hidden, centers_.rows());
    b1_ = Vector::Zero(n_hidden);
    w2_ = Vector::Zero(n_hidden);
  }

  Index input_dim() const { return centers_.cols(); }
  Index n_basis() const { return centers_.rows(); }
  Index n_hidden() const { return w1_.rows(); }
  Index n_params() const { return n_hidden() * n_basis() + 2 * n_hidden() + 1; }

  const Matrix& centers() const { return centers_; }
  const Vector& widths() const { return widths_; }
  const Matrix& hidden_weights() const { return w1_; }
  const Vector& hidden_bias() const { return b1_; }
  const Vector& output_weights() const { return w2_; }
  double output_bias() const { return b2_; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t s) { seed_ = s; }

  Vector parameters() const {
    Vector theta(n_params());
    Index at = 0;
    for (Index i = 0; i < w1_.rows(); ++i)
      for (Index j = 0; j < w1_.cols(); ++j) theta(at++) = w1_(i, j);
    theta.segment(at, n_hidden()) = b1_;
    at += n_hidden();
    theta.segment(at, n_hidden()) = w2_;
    at += n_hidden();
    theta(at) = b2_;
    return theta;
  }

  void set_parameters(const Eigen::Ref<const Vector>& theta) {
    if (theta.size() != n_params())
      throw InputError("potential: expected " + std::to_string(n_params()) + " parameters, got " +
                       std::to_string(theta.size()));
    Index at = 0;
    for (Index i = 0; i < w1_.rows(); ++i)
      for (Index j = 0; j < w1_.cols(); ++j) w1_(i, j) = theta(at++);
    b1_ = theta.segment(at, n_hidden());
    at += n_hidden();
    w2_ = theta.segment(at, n_hidden());
    at += n_hidden();
    b2_ = theta(at);
  }

  // Offsets of each block inside theta.
  Index offset_b1() const { return n_hidden() * n_basis(); }
  Index offset_w2() const { return offset_b1() + n_hidden(); }
  Index offset_b2() const { return offset_w2() + n_hidden(); }

 private:
  Matrix centers_;  // n_basis x input_dim
  Vector widths_;
  Matrix w1_;  // n_hidden x n_basis
  Vector b1_;
  Vector w2_;
  double b2_ = 0.0;
  std::uint64_t seed_ = 0;
};

// Scratch space for one forward/backward pass. Reusing it across calls keeps
// the inner loops allocation-free.
struct PotentialWorkspace {
  Vector diff;   // x - c_j for the current j
  Vector phi;    // n_basis
  Matrix jphi;   // n_basis x input_dim, row j = grad phi_j
  Vector act;    // hidden pre-activation
  Vector h;      // tanh(act)
  Vector dtanh;  // 1 - h^2
  Vector s;      // w2 * dtanh
  Vector g;      // W1^T s
  Vector grad;   // grad_x U (network only)

  void resize(const PotentialModel& m) {
    if (phi.size() == m.n_basis() && h.size() == m.n_hidden() && grad.size() == m.input_dim()) return;
    diff.resize(m.input_dim());
    phi.resize(m.n_basis());
    jphi.resize(m.n_basis(), m.input_dim());
    act.resize(m.n_hidden());
    h.resize(m.n_hidden());
    dtanh.resize(m.n_hidden());
    s.resize(m.n_hidden());
    g.resize(m.n_basis());
    grad.resize(m.input_dim());
  }
};

namespace detail {

inline void check_dim(const PotentialModel& m, Index n) {
  if (n != m.input_dim())
    throw InputError("potential: input dimension " + std::to_string(n) + " != model dimension " +
                     std::to_string(m.input_dim()));
}

}  // namespace detail

// Forward pass through the network (prior excluded). Fills phi, jphi, h, s
// and the network gradient; returns the network energy.
inline double evaluate_network(const PotentialModel& m, const Eigen::Ref<const Vector>& x, PotentialWorkspace& ws) {
  detail::check_dim(m, x.size());
  ws.resize(m);
  const auto& c = m.centers();
  const auto& w = m.widths();
  for (Index j = 0; j < m.n_basis(); ++j) {
    ws.diff = x - c.row(j).transpose();
    const double inv_w2 = 1.0 / (w(j) * w(j));
    const double p = std::exp(-0.5 * ws.diff.squaredNorm() * inv_w2);
    ws.phi(j) = p;
    ws.jphi.row(j) = (-p * inv_w2) * ws.diff.transpose();
  }
  ws.act.noalias() = m.hidden_weights() * ws.phi;
  ws.act += m.hidden_bias();
  ws.h = ws.act.array().tanh();
  ws.dtanh = 1.0 - ws.h.array().square();
  ws.s = m.output_weights().cwiseProduct(ws.dtanh);
  ws.g.noalias() = m.hidden_weights().transpose() * ws.s;
  ws.grad.noalias() = ws.jphi.transpose() * ws.g;
  return m.output_weights().dot(ws.h) + m.output_bias();
}

inline double energy(const PotentialModel& m, const PriorTerm& prior, const Eigen::Ref<const Vector>& x) {
  PotentialWorkspace ws;
  return evaluate_network(m, x, ws) + prior.energy(x);
}

// -grad_x (U + E_prior).
inline Vector force(const PotentialModel& m, const PriorTerm& prior, const Eigen::Ref<const Vector>& x) {
  PotentialWorkspace ws;
  evaluate_network(m, x, ws);
  Vector grad = ws.grad;
  prior.add_gradient(x, grad);
  return -grad;
}

struct ParameterGradients {
  Vector energy;  // dU/dtheta
  Matrix force;   // input_dim x n_params, dF_d/dtheta
};

// Exact derivatives of the energy and of each force component with respect
// to every trainable parameter. The prior has no trainable parameters.
inline ParameterGradients parameter_gradients(const PotentialModel& m, const PriorTerm& prior,
                                              const Eigen::Ref<const Vector>& x) {
  (void)prior;
  PotentialWorkspace ws;
  evaluate_network(m, x, ws);
  const Index nh = m.n_hidden();
  const Index nb = m.n_basis();
  const Index dim = m.input_dim();
  ParameterGradients out{Vector::Zero(m.n_params()), Matrix::Zero(dim, m.n_params())};

  // u_i = grad_x a_i = J_phi^T W1_i.
  const Matrix u = ws.jphi.transpose() * m.hidden_weights().transpose();  // dim x nh
  const auto& w2 = m.output_weights();
  for (Index i = 0; i < nh; ++i) {
    // d s_i / d a_i
    const double ds = -2.0 * w2(i) * ws.h(i) * ws.dtanh(i);
    for (Index j = 0; j < nb; ++j) {
      const Index p = i * nb + j;
      out.energy(p) = ws.s(i) * ws.phi(j);
      out.force.col(p) = -(ds * ws.phi(j) * u.col(i) + ws.s(i) * ws.jphi.row(j).transpose());
    }
    out.energy(m.offset_b1() + i) = ws.s(i);
    out.force.col(m.offset_b1() + i) = -ds * u.col(i);
    out.energy(m.offset_w2() + i) = ws.h(i);
    out.force.col(m.offset_w2() + i) = -ws.dtanh(i) * u.col(i);
  }
  out.energy(m.offset_b2()) = 1.0;
  return out;
}

struct InitOptions {
  Index n_basis = 32;
  Index n_hidden = 32;
  std::uint64_t seed = 0;
  double weight_scale = 0.1;
};

// Centers by k-means++ style D^2 sampling from the configurations, a shared
// width equal to the median nearest-center distance, and uniform weights in
// [-weight_scale, weight_scale].
inline PotentialModel initialize_potential(const RowMatrix& configs, const InitOptions& opt) {
  if (configs.rows() < 1) throw InputError("initialize_potential: no configurations");
  if (opt.n_basis < 1 || opt.n_hidden < 1) throw InputError("initialize_potential: sizes must be >= 1");
  std::mt19937_64 rng(opt.seed);
  const Index n = configs.rows();
  const Index dim = configs.cols();
  Matrix centers(opt.n_basis, dim);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  centers.row(0) = configs.row(pick(rng));
  Vector d2 = (configs.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (Index k = 1; k < opt.n_basis; ++k) {
    const double total = d2.sum();
    Index chosen = pick(rng);
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      const double target = u(rng);
      double acc = 0.0;
      chosen = n - 1;
      for (Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc >= target && d2(i) > 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(k) = configs.row(chosen);
    d2 = d2.cwiseMin((configs.rowwise() - centers.row(k)).rowwise().squaredNorm());
  }
  std::vector<double> nearest;
  for (Index k = 0; k < opt.n_basis; ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (Index l = 0; l < opt.n_basis; ++l)
      if (l != k) best = std::min(best, (centers.row(k) - centers.row(l)).norm());
    if (std::isfinite(best) && best > 0.0) nearest.push_back(best);
  }
  double width = 1.0;
  if (!nearest.empty()) {
    std::nth_element(nearest.begin(), nearest.begin() + static_cast<std::ptrdiff_t>(nearest.size() / 2), nearest.end());
    width = nearest[nearest.size() / 2];
  }
  PotentialModel m(centers, Vector::Constant(opt.n_basis, width), opt.n_hidden);
  std::uniform_real_distribution<double> w(-opt.weight_scale, opt.weight_scale);
  Vector theta(m.n_params());
  for (Index p = 0; p < theta.size(); ++p) theta(p) = w(rng);
  theta(m.offset_b2()) = 0.0;
  m.set_parameters(theta);
  m.set_seed(opt.seed);
  return m;
}

// Closed-form toy landscapes used as ground truth.
struct ReferenceLandscape {
  enum class Kind { double_well_1d, double_well_2d, mueller_brown };
  Kind kind = Kind::double_well_1d;
  double a = 4.0;      // double-well barrier height, kcal/mol
  double b = 2.0;      // double_well_2d transverse stiffness
  double scale = 0.1;  // Mueller-Brown energy scale

  static ReferenceLandscape make(const std::string& name) {
    ReferenceLandscape r;
    if (name == "double_well_1d") {
      r.kind = Kind::double_well_1d;
    } else if (name == "double_well_2d") {
      r.kind = Kind::double_well_2d;
    } else if (name == "mueller_brown") {
      r.kind = Kind::mueller_brown;
    } else {
      throw InputError("unknown landscape kind '" + name + "'");
    }
    return r;
  }

  std::map<std::string, double> parameters() const {
    switch (kind) {
      case Kind::double_well_1d: return {{"a", a}};
      case Kind::double_well_2d: return {{"a", a}, {"b", b}};
      case Kind::mueller_brown: return {{"scale", scale}};
    }
    return {};
  }

  std::string name() const {
    switch (kind) {
      case Kind::double_well_1d: return "double_well_1d";
      case Kind::double_well_2d: return "double_well_2d";
      case Kind::mueller_brown: return "mueller_brown";
    }
    return "unknown";
  }

  Index dim() const { return kind == Kind::double_well_1d ? 1 : 2; }

  // Energy and gradient (not force).
  double energy_gradient(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> grad) const {
    if (x.size() != dim() || grad.size() != dim())
      throw InputError(name() + ": expected dimension " + std::to_string(dim()));
    switch (kind) {
      case Kind::double_well_1d: {
        const double q = x(0) * x(0) - 1.0;
        grad(0) = 4.0 * a * x(0) * q;
        return a * q * q;
      }
      case Kind::double_well_2d: {
        const double q = x(0) * x(0) - 1.0;
        grad(0) = 4.0 * a * x(0) * q;
        grad(1) = b * x(1);
        return a * q * q + 0.5 * b * x(1) * x(1);
      }
      case Kind::mueller_brown: {
        static constexpr double A[4] = {-200.0, -100.0, -170.0, 15.0};
        static constexpr double ax[4] = {-1.0, -1.0, -6.5, 0.7};
        static constexpr double bxy[4] = {0.0, 0.0, 11.0, 0.6};
        static constexpr double cy[4] = {-10.0, -10.0, -6.5, 0.7};
        static constexpr double x0[4] = {1.0, 0.0, -0.5, -1.0};
        static constexpr double y0[4] = {0.0, 0.5, 1.5, 1.0};
        double e = 0.0;
        grad.setZero();
        for (int k = 0; k < 4; ++k) {
          const double dx = x(0) - x0[k];
          const double dy = x(1) - y0[k];
          const double term = scale * A[k] * std::exp(ax[k] * dx * dx + bxy[k] * dx * dy + cy[k] * dy * dy);
          e += term;
          grad(0) += term * (2.0 * ax[k] * dx + bxy[k] * dy);
          grad(1) += term * (bxy[k] * dx + 2.0 * cy[k] * dy);
        }
        return e;
      }
    }
    throw InputError("unknown landscape kind");
  }
};

// Returns (energy, force).
inline std::pair<double, Vector> reference_energy_force(const ReferenceLandscape& land,
                                                        const Eigen::Ref<const Vector>& x) {
  Vector grad(land.dim());
  const double e = land.energy_gradient(x, grad);
  return {e, -grad};
}

inline nlohmann::json to_json(const PriorTerm& p) {
  nlohmann::json j;
  j["kind"] = p.kind == PriorTerm::Kind::harmonic ? "harmonic" : "none";
  j["center"] = detail::vector_to_json(p.center);
  j["stiffness"] = p.stiffness;
  return j;
}

inline PriorTerm prior_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "none") return {};
  if (kind != "harmonic") throw InputError("unknown prior kind '" + kind + "'");
  return PriorTerm::harmonic(detail::vector_from_json(j.at("center")), j.at("stiffness").get<double>());
}

inline nlohmann::json to_json(const PotentialModel& m, const PriorTerm& prior) {
  nlohmann::json j;
  j["type"] = "potential";
  j["architecture"] = {{"input_dim", m.input_dim()},
                       {"n_basis", m.n_basis()},
                       {"n_hidden", m.n_hidden()},
                       {"activation", "tanh"},
                       {"basis", "gaussian_rbf"}};
  j["seed"] = m.seed();
  j["centers"] = detail::matrix_to_json(m.centers());
  j["widths"] = detail::vector_to_json(m.widths());
  j["hidden_weights"] = detail::matrix_to_json(m.hidden_weights());
  j["hidden_bias"] = detail::vector_to_json(m.hidden_bias());
  j["output_weights"] = detail::vector_to_json(m.output_weights());
  j["output_bias"] = m.output_bias();
  j["prior"] = to_json(prior);
  return j;
}

inline std::pair<PotentialModel, PriorTerm> potential_from_json(const nlohmann::json& j) {
  try {
    const Matrix centers = detail::matrix_from_json(j.at("centers"), "centers");
    const Vector widths = detail::vector_from_json(j.at("widths"));
    const Matrix w1 = detail::matrix_from_json(j.at("hidden_weights"), "hidden_weights");
    PotentialModel m(centers, widths, w1.rows());
    if (w1.cols() != m.n_basis()) throw InputError("potential JSON: hidden_weights shape mismatch");
    Vector theta(m.n_params());
    Index at = 0;
    for (Index i = 0; i < w1.rows(); ++i)
      for (Index c = 0; c < w1.cols(); ++c) theta(at++) = w1(i, c);
    const Vector b1 = detail::vector_from_json(j.at("hidden_bias"));
    const Vector w2 = detail::vector_from_json(j.at("output_weights"));
    if (b1.size() != m.n_hidden() || w2.size() != m.n_hidden())
      throw InputError("potential JSON: bias/output shape mismatch");
    theta.segment(at, m.n_hidden()) = b1;
    theta.segment(at + m.n_hidden(), m.n_hidden()) = w2;
    theta(m.offset_b2()) = j.at("output_bias").get<double>();
    m.set_parameters(theta);
    m.set_seed(j.value("seed", std::uint64_t{0}));
    PriorTerm prior = j.contains("prior") ? prior_from_json(j["prior"]) : PriorTerm{};
    return {std::move(m), std::move(prior)};
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed potential JSON: ") + e.what());
  }
}

}  // namespace femtk
