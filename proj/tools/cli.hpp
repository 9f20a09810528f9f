#pragma once

// femtk command-line front end. Every subcommand resolves its parameters as
// defaults <- JSON config file <- flags, writes its outputs into --out and a
// manifest.json listing the resolved config and SHA-256 digests of every
// input and output file.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>
#include <openssl/evp.h>

#include "femtk/femtk.hpp"
#include "femtk/pipeline.hpp"

namespace femtk::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Kind { integer, seed, real, text, path, paths };

struct Param {
  std::string key;  // config key; the flag is --key with '_' -> '-'
  Kind kind;
  json fallback;    // null: required (or computed, see `optional`)
  std::string help;
  bool optional = false;  // null default is allowed and means "derive"
};

inline std::string flag_name(const std::string& key) {
  std::string f = key;
  for (auto& c : f)
    if (c == '_') c = '-';
  return "--" + f;
}

// Reading, hashing and recording files for one subcommand run.
class Run {
 public:
  Run(std::string command, json config, std::ostream& log) : command_(std::move(command)), cfg_(std::move(config)), log_(log) {
    out_ = cfg_.at("out").get<std::string>();
  }

  const json& config() const { return cfg_; }
  std::ostream& log() { return log_; }

  template <class T>
  T get(const std::string& key) const {
    return cfg_.at(key).get<T>();
  }
  bool has(const std::string& key) const { return cfg_.contains(key) && !cfg_.at(key).is_null(); }
  std::vector<std::string> paths(const std::string& key) const { return cfg_.at(key).get<std::vector<std::string>>(); }

  fs::path input(const std::string& p) {
    if (!fs::exists(p)) throw IoError("input file '" + p + "' does not exist");
    inputs_.push_back(p);
    return p;
  }

  fs::path output(const std::string& name) {
    fs::create_directories(out_);
    outputs_.push_back(name);
    return out_ / name;
  }

  void warn(const std::string& w) {
    warnings_.push_back(w);
    log_ << "warning: " << w << '\n';
  }

  void write_json(const std::string& name, const json& j) {
    std::ofstream os(output(name), std::ios::trunc);
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed for '" + (out_ / name).string() + "'");
  }

  void write_manifest(const std::string& config_file) {
    json m;
    m["tool"] = "femtk";
    m["command"] = command_;
    m["config"] = cfg_;
    if (!config_file.empty()) m["config_file"] = {{"path", config_file}, {"sha256", sha256_file(config_file)}};
    m["versions"] = versions();
    json ins = json::array();
    for (const auto& p : inputs_) ins.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    m["inputs"] = std::move(ins);
    json outs = json::array();
    for (const auto& p : outputs_) outs.push_back({{"path", p}, {"sha256", sha256_file(out_ / p)}});
    m["outputs"] = std::move(outs);
    m["warnings"] = warnings_;
    fs::create_directories(out_);
    std::ofstream os(out_ / "manifest.json", std::ios::trunc);
    os << m.dump(2) << '\n';
    if (!os) throw IoError("cannot write manifest in '" + out_.string() + "'");
  }

  static json versions() {
    return {{"femtk", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"compiler", __VERSION__}};
  }

  static std::string sha256_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read '" + p.string() + "' for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
    std::array<char, 1 << 16> buf{};
    while (is) {
      is.read(buf.data(), buf.size());
      if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
    std::string hex;
    char b[3];
    for (unsigned i = 0; i < len; ++i) {
      std::snprintf(b, sizeof b, "%02x", md[i]);
      hex += b;
    }
    return hex;
  }

 private:
  std::string command_;
  json cfg_;
  std::ostream& log_;
  fs::path out_;
  std::vector<fs::path> inputs_;
  std::vector<std::string> outputs_;
  std::vector<std::string> warnings_;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Param> params;
  std::function<void(Run&)> run;
};

// ---------------------------------------------------------------------------
// file helpers

inline std::string chain_name(const std::string& prefix, std::size_t i) {
  char b[32];
  std::snprintf(b, sizeof b, "_%03zu.bin", i);
  return prefix + b;
}

inline std::array<char, 4> peek_magic(const fs::path& p) {
  std::array<char, 4> m{};
  std::ifstream is(p, std::ios::binary);
  is.read(m.data(), 4);
  return m;
}

// Feature trajectory from a trajectory file (CSV or binary) or from the
// configurations of a force record, whose coordinates are named x0, x1, ...
inline FeatureTrajectory load_frames(Run& run, const std::string& path) {
  run.input(path);
  if (format_from_path(path) == FileFormat::bin && peek_magic(path) == kMagicForces) {
    auto rec = load_force_record(path);
    return FeatureTrajectory(std::move(rec.configs), rec.dt, numbered_names("x", rec.n_dof()), path);
  }
  return load_trajectory(path);
}

inline std::vector<FeatureTrajectory> load_all(Run& run, const std::string& key) {
  std::vector<FeatureTrajectory> out;
  for (const auto& p : run.paths(key)) out.push_back(load_frames(run, p));
  if (out.empty()) throw InputError("no files given for --" + key);
  return out;
}

inline TicaModel load_tica(Run& run, const std::string& path) {
  std::ifstream is(run.input(path));
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw InputError(path + ": " + e.what());
  }
  return tica_from_json(j);
}

// Coordinates for targets / landscape / msm: either already-projected
// trajectories, or features projected with --tica.
inline std::vector<RowMatrix> coordinates(Run& run, Index components) {
  const auto trajs = load_all(run, "input");
  std::vector<RowMatrix> out;
  if (run.has("tica") && !run.get<std::string>("tica").empty()) {
    const auto model = load_tica(run, run.get<std::string>("tica"));
    for (const auto& t : trajs) out.push_back(project(model, t, std::min(components, model.n_components())));
  } else {
    for (const auto& t : trajs) {
      if (t.n_features() < components)
        throw InputError(t.source_id() + ": has " + std::to_string(t.n_features()) + " columns, need " +
                         std::to_string(components));
      out.push_back(t.frames().leftCols(components));
    }
  }
  return out;
}

inline RowMatrix vstack(const std::vector<RowMatrix>& parts) {
  Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  RowMatrix out(rows, parts.empty() ? 0 : parts.front().cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

inline void save_chains(Run& run, const std::string& prefix, const std::vector<Chain>& chains, double frame_dt) {
  for (std::size_t c = 0; c < chains.size(); ++c)
    save_force_record(ForceRecord{chains[c].positions, chains[c].forces, frame_dt}, run.output(chain_name(prefix, c)));
}

inline Vector parse_point(const std::string& s, Index dim) {
  Vector v(dim);
  Index i = 0;
  for (auto tok : detail::split(s, ',')) {
    const auto d = detail::parse_double(tok);
    if (!d || i >= dim) throw InputError("start: expected " + std::to_string(dim) + " comma-separated numbers, got '" + s + "'");
    v(i++) = *d;
  }
  if (i != dim) throw InputError("start: expected " + std::to_string(dim) + " comma-separated numbers, got '" + s + "'");
  return v;
}

// ---------------------------------------------------------------------------
// subcommands

inline void cmd_featurize(Run& run) {
  const auto kind = run.get<std::string>("featurizer");
  if (kind != "pairwise" && kind != "identity")
    throw InputError("featurizer must be 'pairwise' or 'identity', got '" + kind + "'");
  const auto inputs = run.paths("input");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto t = load_frames(run, inputs[i]);
    FeatureTrajectory f = kind == "pairwise" ? pairwise_distance_features(t.frames(), t.dt(), inputs[i])
                                             : FeatureTrajectory(t.frames(), t.dt(), t.feature_names(), inputs[i]);
    save_trajectory(f, run.output(chain_name("features", i)));
  }
}

inline void cmd_tica(Run& run) {
  const auto trajs = load_all(run, "input");
  const auto cov = estimate_covariances(trajs, run.get<Index>("lag"));
  const double ridge = run.get<double>("ridge") < 0.0 ? default_ridge(cov) : run.get<double>("ridge");
  TicaModel m = fit_tica(cov, run.get<Index>("components"), ridge);
  m.dt = trajs.front().dt();
  for (const auto& w : m.warnings) run.warn(w);
  run.write_json("tica.json", to_json(m));
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    FeatureTrajectory y(project(m, trajs[i], m.n_components()), trajs[i].dt(), numbered_names("tic", m.n_components()),
                        trajs[i].source_id());
    save_trajectory(y, run.output(chain_name("projection", i)));
  }
  const auto ev = check_explained_variance(m, std::min<Index>(2, m.n_components()));
  run.log() << "explained variance of first " << ev.k << " components: " << ev.cumulative
            << (ev.passed ? "" : " (below 0.70)") << '\n';
}

inline void cmd_targets(Run& run) {
  const RowMatrix y = vstack(coordinates(run, run.get<Index>("components")));
  MarginalParams mp;
  mp.kind = density_kind_from_string(run.get<std::string>("density"));
  mp.n_bins = run.get<Index>("bins");
  if (run.get<double>("bandwidth") > 0.0) mp.bandwidth = run.get<double>("bandwidth");
  auto t = boltzmann_invert(fit_marginals(y, mp), y, run.get<double>("temperature"));
  if (!run.get<std::string>("prior").empty()) t = energy_correction(std::move(t), load_energy_record(run.input(run.get<std::string>("prior"))));
  save_targets(t, run.output("targets.bin"));
}

inline void cmd_train(Run& run) {
  std::vector<RowMatrix> configs, forces;
  double frame_dt = 1.0;
  for (const auto& p : run.paths("input")) {
    auto rec = load_force_record(run.input(p));
    frame_dt = rec.dt;
    configs.push_back(std::move(rec.configs));
    forces.push_back(std::move(rec.forces));
  }
  if (configs.empty()) throw InputError("no files given for --input");
  TrainingSet set{vstack(configs), vstack(forces), {}};
  const auto targets = load_targets(run.input(run.get<std::string>("targets")), run.get<double>("temperature"));
  if (targets.n_frames() != set.size())
    throw InputError(run.get<std::string>("targets") + " has " + std::to_string(targets.n_frames()) +
                     " targets but the force records hold " + std::to_string(set.size()) + " frames");
  set.g_targets = targets.g_total;

  const Vector mean = set.configs.colwise().mean().transpose();
  double k = run.get<double>("prior_stiffness");
  if (k < 0.0)
    k = thermal_energy(run.get<double>("temperature")) /
        ((set.configs.rowwise() - mean.transpose()).squaredNorm() / static_cast<double>(set.configs.size()));
  const PriorTerm prior = k > 0.0 ? PriorTerm::harmonic(mean, k) : PriorTerm{};

  LossConfig loss;
  loss.lambda_energy = run.get<double>("lambda_energy");
  loss.lambda_force = run.get<double>("lambda_force");
  loss.max_epochs = run.get<Index>("epochs");
  loss.batch_size = run.get<Index>("batch_size");
  loss.learning_rate = run.get<double>("learning_rate");
  loss.seed = run.get<std::uint64_t>("seed");
  InitOptions init;
  init.n_basis = run.get<Index>("n_basis");
  init.n_hidden = run.get<Index>("n_hidden");
  init.seed = loss.seed;
  auto [model, report] = train(initialize_potential(set.configs, init), prior, set, loss);
  run.write_json("model.json", to_json(model, prior));
  run.write_json("train_report.json", to_json(report));
  save_report_csv(report, run.output("train_report.csv"));
  (void)frame_dt;
}

inline void cmd_sample(Run& run) {
  const auto system = run.get<std::string>("system");
  const auto model_path = run.get<std::string>("model");
  if (system.empty() == model_path.empty()) throw InputError("sample: give exactly one of --system or --model");
  LangevinConfig lc;
  lc.dt = run.get<double>("dt");
  lc.gamma = run.get<double>("gamma");
  lc.temperature = run.get<double>("temperature");
  lc.n_steps = run.get<Index>("steps");
  lc.stride = run.get<Index>("stride");
  lc.seed = run.get<std::uint64_t>("seed");
  lc.threads = static_cast<unsigned>(std::max<Index>(1, run.get<Index>("threads")));
  const Index chains = run.get<Index>("chains");
  if (chains < 1) throw InputError("sample: chains must be >= 1");
  const auto start = run.get<std::string>("start");
  SampleResult res;
  if (!system.empty()) {
    const auto land = ReferenceLandscape::make(system);
    lc.initial_positions = start.empty() ? detail::landscape_starts(land, chains)
                                         : std::vector<Vector>(static_cast<std::size_t>(chains), parse_point(start, land.dim()));
    res = simulate(land, lc);
  } else {
    std::ifstream is(run.input(model_path));
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw InputError(model_path + ": " + e.what());
    }
    const auto [model, prior] = potential_from_json(j);
    Vector x0 = prior.kind == PriorTerm::Kind::harmonic ? prior.center : Vector(model.centers().colwise().mean().transpose());
    if (!start.empty()) x0 = parse_point(start, model.input_dim());
    lc.initial_positions.assign(static_cast<std::size_t>(chains), x0);
    res = simulate(model, prior, lc);
  }
  for (const auto& w : res.warnings) run.warn(w);
  save_chains(run, "chain", res.chains, lc.dt * static_cast<double>(lc.stride));
}

inline void cmd_evaluate(Run& run) {
  const auto truth = load_all(run, "truth");
  const auto model = load_all(run, "model");
  const auto tpaths = run.paths("truth");
  const auto mpaths = run.paths("model");
  for (std::size_t i = 1; i < truth.size(); ++i)
    if (truth[i].feature_names() != truth[0].feature_names())
      throw InputError("feature names differ between '" + tpaths[0] + "' and '" + tpaths[i] + "'");
  for (std::size_t i = 0; i < model.size(); ++i)
    if (model[i].feature_names() != truth[0].feature_names())
      throw InputError("feature names differ between truth file '" + tpaths[0] + "' and model file '" + mpaths[i] + "'");
  const auto tica_path = run.get<std::string>("tica");
  const auto tica = load_tica(run, tica_path);
  if (tica.feature_names != truth[0].feature_names())
    throw InputError("feature names differ between TICA model '" + tica_path + "' and truth file '" + tpaths[0] + "'");
  if (tica.n_components() < 2) throw InputError(tica_path + ": KL evaluation needs at least 2 TICA components");
  const auto bins = run.get<Index>("bins");
  const auto r = kl_divergence_2d(project(tica, truth, 2), project(tica, model, 2), bins, bins, run.get<double>("epsilon"));
  json j = to_json(r);
  const auto ev = check_explained_variance(tica);
  j["explained_variance"] = {{"k", ev.k}, {"cumulative", ev.cumulative}, {"threshold", ev.threshold}, {"passed", ev.passed}};
  j["basin_trapping"] = r.kl_nats >= std::log(2.0) - 0.1;
  run.write_json("kl_report.json", j);
  save_grid_csv(r.truth_density, run.output("truth_density.csv"));
  save_grid_csv(r.model_density, run.output("model_density.csv"));
  run.log() << "KL(truth || model) = " << r.kl_nats << " nats\n";
}

inline void cmd_landscape(Run& run) {
  const RowMatrix y = vstack(coordinates(run, 2));
  const auto values_path = run.get<std::string>("values");
  Table t = read_table(run.input(values_path), kMagicEnergy);
  const auto column = run.get<std::string>("column");
  const Index c = t.column(column);
  if (c < 0) throw InputError(values_path + ": no '" + column + "' column");
  if (t.values.rows() != y.rows())
    throw InputError(values_path + " has " + std::to_string(t.values.rows()) + " rows but the inputs hold " +
                     std::to_string(y.rows()) + " frames");
  const auto bins = run.get<Index>("bins");
  save_grid_csv(mean_energy_grid(y, Vector(t.values.col(c)), bins, bins), run.output("landscape.csv"));
}

inline void cmd_msm(Run& run) {
  const auto ys = coordinates(run, run.get<Index>("components"));
  MsmOptions opt;
  opt.n_states = run.get<Index>("n_states");
  opt.lag_frames = run.get<Index>("lag");
  opt.temperature = run.get<double>("temperature");
  opt.seed = run.get<std::uint64_t>("seed");
  Clustering cl;
  const auto m = build_msm(ys, opt, &cl);
  json j = to_json(m);
  j["implied_timescales_frames"] = detail::vector_to_json(implied_timescales(m));
  run.write_json("msm.json", j);
  if (!m.dropped_states.empty()) {
    run.warn(std::to_string(m.dropped_states.size()) + " states outside the largest connected set; per-frame targets not written");
    return;
  }
  FreeEnergyTargets t;
  t.temperature = opt.temperature;
  t.g_total = frame_free_energies(m, cl.assignments);
  t.g_per_component.resize(t.g_total.size(), 0);
  save_targets(t, run.output("msm_targets.bin"));
}

inline void cmd_pipeline(Run& run) {
  PipelineConfig c;
  c.system = run.get<std::string>("system");
  c.temperature = run.get<double>("temperature");
  c.seed = run.get<std::uint64_t>("seed");
  c.chains = run.get<Index>("chains");
  c.steps = run.get<Index>("steps");
  c.stride = run.get<Index>("stride");
  c.dt = run.get<double>("dt");
  c.gamma = run.get<double>("gamma");
  c.lag = run.get<Index>("lag");
  c.components = run.get<Index>("components");
  c.density = density_kind_from_string(run.get<std::string>("density"));
  c.bins = run.get<Index>("bins");
  c.n_basis = run.get<Index>("n_basis");
  c.n_hidden = run.get<Index>("n_hidden");
  c.prior_stiffness = run.get<double>("prior_stiffness");
  c.lambda_energy = run.get<double>("lambda_energy");
  c.lambda_force = run.get<double>("lambda_force");
  c.epochs = run.get<Index>("epochs");
  c.batch_size = run.get<Index>("batch_size");
  c.learning_rate = run.get<double>("learning_rate");
  c.train_frames = run.get<Index>("train_frames");
  c.kl_bins = run.get<Index>("kl_bins");
  c.epsilon = run.get<double>("epsilon");
  const auto r = run_pipeline(c);
  for (const auto& w : r.warnings) run.warn(w);
  const double frame_dt = c.dt * static_cast<double>(c.stride);
  save_chains(run, "truth", r.truth, frame_dt);
  run.write_json("tica.json", to_json(r.tica));
  save_targets(r.targets, run.output("targets.bin"), frame_dt);
  run.write_json("model.json", to_json(r.model, r.prior));
  save_report_csv(r.report, run.output("train_report.csv"));
  save_chains(run, "model", r.model_samples, frame_dt);
  json kl = to_json(r.kl);
  kl["basin_trapping"] = r.kl.kl_nats >= std::log(2.0) - 0.1;
  kl["lambda_energy"] = c.lambda_energy;
  run.write_json("kl_report.json", kl);
  save_grid_csv(r.kl.truth_density, run.output("truth_density.csv"));
  save_grid_csv(r.kl.model_density, run.output("model_density.csv"));
  save_grid_csv(mean_energy_grid(r.truth_projection.leftCols(2), r.targets.g_total), run.output("landscape_truth.csv"));
  run.log() << "KL(truth || model) = " << r.kl.kl_nats << " nats at lambda_energy = " << c.lambda_energy << '\n';
}

// ---------------------------------------------------------------------------
// registry

inline std::vector<Param> global_params() {
  return {{"seed", Kind::seed, 0, "random seed"},
          {"temperature", Kind::real, 300.0, "temperature in K"},
          {"out", Kind::text, "femtk_out", "output directory"}};
}

inline const std::vector<Command>& commands() {
  static const std::vector<Command> cmds = [] {
    const PipelineConfig pc;
    const LossConfig lc;
    std::vector<Command> c;
    c.push_back({"featurize",
                 "Pairwise-distance (or identity) features from configuration files",
                 {{"input", Kind::paths, nullptr, "configuration trajectories or force records"},
                  {"featurizer", Kind::text, "pairwise", "pairwise | identity"}},
                 cmd_featurize});
    c.push_back({"tica",
                 "Fit TICA on feature trajectories and project them",
                 {{"input", Kind::paths, nullptr, "feature trajectories"},
                  {"lag", Kind::integer, 10, "lag in frames"},
                  {"components", Kind::integer, 2, "retained components"},
                  {"ridge", Kind::real, -1.0, "absolute ridge on C0 (< 0: 1e-6 * trace / n)"}},
                 cmd_tica});
    c.push_back({"targets",
                 "Per-frame free-energy targets by Boltzmann inversion of TICA marginals",
                 {{"input", Kind::paths, nullptr, "projected trajectories, or features with --tica"},
                  {"tica", Kind::path, "", "TICA model used to project --input"},
                  {"components", Kind::integer, 2, "number of TICs"},
                  {"density", Kind::text, "histogram", "histogram | kde"},
                  {"bins", Kind::integer, 100, "histogram bins per component"},
                  {"bandwidth", Kind::real, 0.0, "KDE bandwidth (0: Scott's rule)"},
                  {"prior", Kind::path, "", "energy record with per-frame prior energies"}},
                 cmd_targets});
    c.push_back({"train",
                 "Train the potential with the mixed force/energy loss",
                 {{"input", Kind::paths, nullptr, "force records (configurations and target forces)"},
                  {"targets", Kind::path, nullptr, "free-energy targets, one per frame"},
                  {"lambda_energy", Kind::real, lc.lambda_energy, "energy loss weight"},
                  {"lambda_force", Kind::real, nullptr, "force loss weight (default 1 - lambda_energy)", true},
                  {"epochs", Kind::integer, pc.epochs, "maximum epochs"},
                  {"batch_size", Kind::integer, pc.batch_size, "mini-batch size"},
                  {"learning_rate", Kind::real, pc.learning_rate, "Adam learning rate"},
                  {"n_basis", Kind::integer, pc.n_basis, "radial basis functions"},
                  {"n_hidden", Kind::integer, pc.n_hidden, "hidden tanh units"},
                  {"prior_stiffness", Kind::real, -1.0, "harmonic prior stiffness (< 0: kT / variance, 0: none)"}},
                 cmd_train});
    c.push_back({"sample",
                 "Overdamped Langevin sampling of a reference landscape or a trained model",
                 {{"system", Kind::text, "", "double_well_1d | double_well_2d | mueller_brown"},
                  {"model", Kind::path, "", "model.json from train"},
                  {"steps", Kind::integer, 100000, "integration steps per chain"},
                  {"dt", Kind::real, 1e-3, "time step"},
                  {"gamma", Kind::real, 1.0, "friction"},
                  {"stride", Kind::integer, 100, "steps between recorded frames"},
                  {"chains", Kind::integer, 4, "independent chains"},
                  {"start", Kind::text, "", "comma-separated start point for every chain"},
                  {"threads", Kind::integer, 1, "worker threads"}},
                 cmd_sample});
    c.push_back({"evaluate",
                 "KL(truth || model) on the first two TICs of the truth TICA model",
                 {{"truth", Kind::paths, nullptr, "ground-truth trajectories"},
                  {"model", Kind::paths, nullptr, "model trajectories"},
                  {"tica", Kind::path, nullptr, "TICA model fitted on the truth"},
                  {"bins", Kind::integer, kDefaultKlBins, "bins per axis"},
                  {"epsilon", Kind::real, kDefaultKlEpsilon, "pseudo-count per bin"}},
                 cmd_evaluate});
    c.push_back({"landscape",
                 "Mean per-bin value over the first two coordinates (CSV grid)",
                 {{"input", Kind::paths, nullptr, "projected trajectories, or features with --tica"},
                  {"tica", Kind::path, "", "TICA model used to project --input"},
                  {"values", Kind::path, nullptr, "targets or energy record, one row per frame"},
                  {"column", Kind::text, "g_total", "column of --values to average"},
                  {"bins", Kind::integer, kDefaultGridBins, "bins per axis"}},
                 cmd_landscape});
    c.push_back({"msm",
                 "Markov state model in TICA space and per-state free energies",
                 {{"input", Kind::paths, nullptr, "projected trajectories, or features with --tica"},
                  {"tica", Kind::path, "", "TICA model used to project --input"},
                  {"components", Kind::integer, 2, "number of TICs to cluster"},
                  {"n_states", Kind::integer, 50, "k-means states"},
                  {"lag", Kind::integer, 10, "lag in frames"}},
                 cmd_msm});
    c.push_back({"pipeline",
                 "Sample truth, TICA, targets, train, sample model, evaluate",
                 {{"system", Kind::text, pc.system, "reference landscape"},
                  {"chains", Kind::integer, pc.chains, "chains for truth and model sampling"},
                  {"steps", Kind::integer, pc.steps, "integration steps per chain"},
                  {"stride", Kind::integer, pc.stride, "steps between recorded frames"},
                  {"dt", Kind::real, pc.dt, "time step"},
                  {"gamma", Kind::real, pc.gamma, "friction"},
                  {"lag", Kind::integer, pc.lag, "TICA lag in frames"},
                  {"components", Kind::integer, pc.components, "TICA components"},
                  {"density", Kind::text, to_string(pc.density), "histogram | kde"},
                  {"bins", Kind::integer, pc.bins, "target histogram bins per component"},
                  {"n_basis", Kind::integer, pc.n_basis, "radial basis functions"},
                  {"n_hidden", Kind::integer, pc.n_hidden, "hidden tanh units"},
                  {"prior_stiffness", Kind::real, pc.prior_stiffness, "harmonic prior stiffness (< 0: kT / variance)"},
                  {"lambda_energy", Kind::real, pc.lambda_energy, "energy loss weight"},
                  {"lambda_force", Kind::real, nullptr, "force loss weight (default 1 - lambda_energy)", true},
                  {"epochs", Kind::integer, pc.epochs, "maximum epochs"},
                  {"batch_size", Kind::integer, pc.batch_size, "mini-batch size"},
                  {"learning_rate", Kind::real, pc.learning_rate, "Adam learning rate"},
                  {"train_frames", Kind::integer, pc.train_frames, "training frames (evenly strided subset)"},
                  {"kl_bins", Kind::integer, pc.kl_bins, "KL bins per axis"},
                  {"epsilon", Kind::real, pc.epsilon, "KL pseudo-count per bin"}},
                 cmd_pipeline});
    for (auto& cmd : c)
      for (auto& g : global_params()) cmd.params.push_back(g);
    return c;
  }();
  return cmds;
}

inline const Command& find_command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return c;
  throw InputError("unknown subcommand '" + name + "'");
}

// ---------------------------------------------------------------------------
// parsing

inline json parse_value(const Param& p, const std::string& s) {
  const std::string where = "invalid value '" + s + "' for " + flag_name(p.key);
  try {
    std::size_t used = 0;
    switch (p.kind) {
      case Kind::integer: {
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw InputError(where);
        return v;
      }
      case Kind::seed: {
        if (!s.empty() && s[0] == '-') throw InputError(where);
        const unsigned long long v = std::stoull(s, &used);
        if (used != s.size()) throw InputError(where);
        return v;
      }
      case Kind::real: {
        const auto v = detail::parse_double(s);
        if (!v || !std::isfinite(*v)) throw InputError(where);
        return *v;
      }
      default:
        return s;
    }
  } catch (const std::logic_error&) {
    throw InputError(where);
  }
}

inline void check_type(const Param& p, const json& v, const std::string& file) {
  const std::string where = file + ": key '" + p.key + "' ";
  bool ok = false;
  switch (p.kind) {
    case Kind::integer: ok = v.is_number_integer(); break;
    case Kind::seed: ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); break;
    case Kind::real: ok = v.is_number(); break;
    case Kind::text:
    case Kind::path: ok = v.is_string(); break;
    case Kind::paths:
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); });
      break;
  }
  if (!ok) throw InputError(where + "has the wrong type");
}

struct Parsed {
  const Command* command = nullptr;
  json config;
  std::string config_file;
  bool help = false;
};

inline json read_config_file(const Command& cmd, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw InputError(path + ": malformed JSON: " + e.what());
  }
  if (!j.is_object()) throw InputError(path + ": config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto p = std::find_if(cmd.params.begin(), cmd.params.end(), [&](const Param& q) { return q.key == it.key(); });
    if (p == cmd.params.end()) throw InputError(path + ": unknown key '" + it.key() + "' for " + cmd.name);
    check_type(*p, it.value(), path);
  }
  return j;
}

inline std::string default_text(const Param& p) {
  if (p.fallback.is_null()) return p.optional ? "derived" : "required";
  if (p.fallback.is_string()) return p.fallback.get<std::string>().empty() ? "\"\"" : p.fallback.get<std::string>();
  return p.fallback.dump();
}

// Resolves defaults <- config file <- flags. Help requests set `help`.
inline Parsed parse(const std::vector<std::string>& args, std::ostream& out) {
  CLI::App app{"femtk: TICA free-energy matching toolkit", "femtk"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  std::map<std::string, std::map<std::string, std::string>> scalars;
  std::map<std::string, std::map<std::string, std::vector<std::string>>> lists;
  std::map<std::string, std::string> config_paths;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : commands()) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    subs[cmd.name] = sub;
    sub->add_option("--config", config_paths[cmd.name], "JSON config; keys are flag names with '_' for '-'")
        ->type_name("PATH");
    for (const auto& p : cmd.params) {
      const std::string desc = p.help;
      CLI::Option* opt = p.kind == Kind::paths ? sub->add_option(flag_name(p.key), lists[cmd.name][p.key], desc)
                                               : sub->add_option(flag_name(p.key), scalars[cmd.name][p.key], desc);
      opt->default_str(default_text(p));
      static const std::map<Kind, std::string> types{{Kind::integer, "INT"},  {Kind::seed, "UINT"}, {Kind::real, "FLOAT"},
                                                     {Kind::text, "TEXT"},    {Kind::path, "PATH"}, {Kind::paths, "PATH ..."}};
      opt->type_name(types.at(p.kind));
    }
  }
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    Parsed ph;
    ph.help = true;
    CLI::App* target = &app;
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) target = sub;
    out << target->help();
    return ph;
  } catch (const CLI::CallForVersion&) {
    Parsed ph;
    ph.help = true;
    out << kVersion << '\n';
    return ph;
  } catch (const CLI::ParseError& e) {
    throw InputError(e.what());
  }

  Parsed r;
  for (const auto& cmd : commands())
    if (subs[cmd.name]->parsed()) r.command = &cmd;
  const Command& cmd = *r.command;
  auto* sub = subs[cmd.name];
  r.config_file = config_paths[cmd.name];
  const json file = r.config_file.empty() ? json::object() : read_config_file(cmd, r.config_file);
  r.config = json::object();
  for (const auto& p : cmd.params) {
    json v = p.fallback;
    if (file.contains(p.key)) v = file.at(p.key);
    if (sub->get_option(flag_name(p.key))->count() > 0) {
      if (p.kind == Kind::paths) {
        v = lists[cmd.name][p.key];
      } else {
        v = parse_value(p, scalars[cmd.name][p.key]);
      }
    }
    if (p.kind == Kind::real && v.is_number()) v = v.get<double>();
    if (v.is_null() && !p.optional)
      throw InputError(cmd.name + ": missing required " + flag_name(p.key) + " (or config key '" + p.key + "')");
    r.config[p.key] = v;
  }
  if (r.config.contains("lambda_force") && r.config["lambda_force"].is_null())
    r.config["lambda_force"] = 1.0 - r.config["lambda_energy"].get<double>();
  return r;
}

// Runs a full invocation; returns the process exit code.
inline int main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const auto parsed = parse(args, out);
    if (parsed.help) return 0;
    Run run(parsed.command->name, parsed.config, err);
    if (!parsed.config_file.empty()) run.input(parsed.config_file);
    parsed.command->run(run);
    run.write_manifest(parsed.config_file);
    return 0;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "numerical error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace femtk::cli
