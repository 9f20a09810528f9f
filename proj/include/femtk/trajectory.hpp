#pragma once

// Feature trajectories, per-frame force/energy records, and their on-disk
// formats.
//
// Binary container layout (all integers and floats little-endian):
//   magic[4] | version u32 | n_frames u64 | n_columns u64 | dt f64 |
//   n_frames*n_columns f64 row-major | n_columns x (u32 byte length, UTF-8 name)
// The magic is "FEMK" for feature trajectories, "FEMF" for force records and
// "FEME" for energy records / free-energy targets.
//
// CSV layout: first line "t<dt>;<name>,<name>,...", then one comma-separated
// frame per line.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "femtk/core.hpp"

namespace femtk {

class IoError : public InputError {
 public:
  using InputError::InputError;
};

enum class FileFormat { csv, bin };

// ".csv" selects CSV; everything else is the binary container.
inline FileFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".csv" ? FileFormat::csv : FileFormat::bin;
}

namespace detail {

inline void check_finite(const RowMatrix& m, const std::string& what) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(m(i, j)))
        throw InputError(what + ": non-finite value at row " + std::to_string(i + 1) + ", column " +
                         std::to_string(j + 1));
}

// Shortest representation that round-trips exactly.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& is, const std::string& what) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T)))
    throw InputError(what + ": unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

// A named-column table in the binary container. Shared by all three magics.
struct Table {
  std::array<char, 4> magic{'F', 'E', 'M', 'K'};
  double dt = 1.0;
  std::vector<std::string> names;
  RowMatrix values;

  Index column(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<Index>(i);
    return -1;
  }
};

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::array<char, 4> kMagicTrajectory{'F', 'E', 'M', 'K'};
inline constexpr std::array<char, 4> kMagicForces{'F', 'E', 'M', 'F'};
inline constexpr std::array<char, 4> kMagicEnergy{'F', 'E', 'M', 'E'};

inline void write_table(const Table& t, const std::filesystem::path& path) {
  detail::require(static_cast<Index>(t.names.size()) == t.values.cols(),
                  "column name count does not match column count");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(t.magic.data(), 4);
  detail::put_le<std::uint32_t>(os, kContainerVersion);
  detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.values.rows()));
  detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.values.cols()));
  detail::put_le<double>(os, t.dt);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  } else {
    for (Index i = 0; i < t.values.size(); ++i) detail::put_le<double>(os, t.values.data()[i]);
  }
  for (const auto& name : t.names) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  os.flush();
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline Table read_table(const std::filesystem::path& path, const std::array<char, 4>& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  const std::string what = path.string();
  Table t;
  if (!is.read(t.magic.data(), 4) || t.magic != expected_magic)
    throw InputError(what + ": format error, missing magic '" + std::string(expected_magic.data(), 4) + "'");
  const auto version = detail::get_le<std::uint32_t>(is, what);
  if (version != kContainerVersion)
    throw InputError(what + ": unsupported container version " + std::to_string(version));
  const auto rows = detail::get_le<std::uint64_t>(is, what);
  const auto cols = detail::get_le<std::uint64_t>(is, what);
  t.dt = detail::get_le<double>(is, what);
  // Guard against absurd headers before allocating.
  const auto file_size = std::filesystem::file_size(path);
  if (cols == 0 || rows > file_size / 8 || cols > file_size / 8 || rows * cols * 8 > file_size)
    throw InputError(what + ": malformed header (" + std::to_string(rows) + " x " + std::to_string(cols) + ")");
  t.values.resize(static_cast<Index>(rows), static_cast<Index>(cols));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(rows * cols * 8)))
      throw InputError(what + ": unexpected end of file in data block");
  } else {
    for (Index i = 0; i < t.values.size(); ++i) t.values.data()[i] = detail::get_le<double>(is, what);
  }
  t.names.reserve(cols);
  for (std::uint64_t c = 0; c < cols; ++c) {
    const auto len = detail::get_le<std::uint32_t>(is, what);
    if (len > file_size) throw InputError(what + ": malformed column name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw InputError(what + ": unexpected end of file in column names");
    t.names.push_back(std::move(name));
  }
  return t;
}

// Time-ordered frames of feature vectors with a fixed time step.
class FeatureTrajectory {
 public:
  FeatureTrajectory(RowMatrix frames, double dt, std::vector<std::string> feature_names, std::string source_id = {})
      : frames_(std::move(frames)), dt_(dt), names_(std::move(feature_names)), source_id_(std::move(source_id)) {
    const std::string what = source_id_.empty() ? std::string("trajectory") : source_id_;
    if (frames_.rows() < 2) throw InputError(what + ": need at least 2 frames, got " + std::to_string(frames_.rows()));
    if (frames_.cols() < 1) throw InputError(what + ": need at least 1 feature");
    if (!(std::isfinite(dt_) && dt_ > 0.0)) throw InputError(what + ": dt must be finite and positive");
    if (static_cast<Index>(names_.size()) != frames_.cols())
      throw InputError(what + ": " + std::to_string(names_.size()) + " feature names for " +
                       std::to_string(frames_.cols()) + " columns");
    std::set<std::string> seen;
    for (const auto& n : names_)
      if (!seen.insert(n).second) throw InputError(what + ": duplicate feature name '" + n + "'");
    detail::check_finite(frames_, what);
  }

  Index n_frames() const { return frames_.rows(); }
  Index n_features() const { return frames_.cols(); }
  double dt() const { return dt_; }
  const RowMatrix& frames() const { return frames_; }
  const std::vector<std::string>& feature_names() const { return names_; }
  const std::string& source_id() const { return source_id_; }

 private:
  RowMatrix frames_;
  double dt_;
  std::vector<std::string> names_;
  std::string source_id_;
};

inline std::vector<std::string> numbered_names(std::string_view prefix, Index n) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(std::string(prefix) + std::to_string(i));
  return out;
}

inline FeatureTrajectory load_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  const std::string what = path.string();
  std::string line;
  if (!std::getline(is, line)) throw InputError(what + ": malformed header (empty file)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto semi = line.find(';');
  if (line.empty() || line[0] != 't' || semi == std::string::npos)
    throw InputError(what + ": malformed header, expected 't<dt>;<names>'");
  const auto dt = detail::parse_double(std::string_view(line).substr(1, semi - 1));
  if (!dt) throw InputError(what + ": malformed header, cannot parse dt");
  std::vector<std::string> names;
  for (auto n : detail::split(std::string_view(line).substr(semi + 1), ',')) names.emplace_back(n);
  if (names.empty() || (names.size() == 1 && names[0].empty()))
    throw InputError(what + ": malformed header, no feature names");

  std::vector<double> values;
  Index rows = 0;
  const auto cols = static_cast<Index>(names.size());
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++rows;
    auto fields = detail::split(line, ',');
    if (static_cast<Index>(fields.size()) != cols)
      throw InputError(what + ": row " + std::to_string(rows) + " has " + std::to_string(fields.size()) +
                       " values, expected " + std::to_string(cols));
    for (std::size_t j = 0; j < fields.size(); ++j) {
      auto v = detail::parse_double(fields[j]);
      if (!v) throw InputError(what + ": cannot parse value at row " + std::to_string(rows) + ", column " +
                               std::to_string(j + 1));
      if (!std::isfinite(*v))
        throw InputError(what + ": non-finite value at row " + std::to_string(rows) + ", column " +
                         std::to_string(j + 1));
      values.push_back(*v);
    }
  }
  RowMatrix frames = Eigen::Map<RowMatrix>(values.data(), rows, cols);
  return FeatureTrajectory(std::move(frames), *dt, std::move(names), what);
}

inline void save_trajectory_csv(const FeatureTrajectory& traj, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << 't' << detail::format_double(traj.dt()) << ';';
  for (std::size_t j = 0; j < traj.feature_names().size(); ++j) os << (j ? "," : "") << traj.feature_names()[j];
  os << '\n';
  const auto& f = traj.frames();
  for (Index i = 0; i < f.rows(); ++i) {
    for (Index j = 0; j < f.cols(); ++j) os << (j ? "," : "") << detail::format_double(f(i, j));
    os << '\n';
  }
  os.flush();
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline FeatureTrajectory load_trajectory(const std::filesystem::path& path, FileFormat format) {
  if (format == FileFormat::csv) return load_trajectory_csv(path);
  Table t = read_table(path, kMagicTrajectory);
  return FeatureTrajectory(std::move(t.values), t.dt, std::move(t.names), path.string());
}

inline FeatureTrajectory load_trajectory(const std::filesystem::path& path) {
  return load_trajectory(path, format_from_path(path));
}

inline void save_trajectory(const FeatureTrajectory& traj, const std::filesystem::path& path, FileFormat format) {
  if (format == FileFormat::csv) return save_trajectory_csv(traj, path);
  Table t{kMagicTrajectory, traj.dt(), traj.feature_names(), traj.frames()};
  write_table(t, path);
}

inline void save_trajectory(const FeatureTrajectory& traj, const std::filesystem::path& path) {
  save_trajectory(traj, path, format_from_path(path));
}

// Coarse-grained configurations and the target mean forces on them.
struct ForceRecord {
  RowMatrix configs;
  RowMatrix forces;
  double dt = 1.0;

  Index n_frames() const { return configs.rows(); }
  Index n_dof() const { return configs.cols(); }

  void validate(std::optional<Index> expected_frames = std::nullopt) const {
    detail::require(configs.rows() == forces.rows() && configs.cols() == forces.cols(),
                    "force record: configs " + detail::shape_str(configs.rows(), configs.cols()) +
                        " and forces " + detail::shape_str(forces.rows(), forces.cols()) + " differ in shape");
    if (expected_frames && *expected_frames != configs.rows())
      throw InputError("force record has " + std::to_string(configs.rows()) + " frames, expected " +
                       std::to_string(*expected_frames));
    detail::check_finite(configs, "force record configs");
    detail::check_finite(forces, "force record forces");
  }
};

inline void save_force_record(const ForceRecord& rec, const std::filesystem::path& path) {
  rec.validate();
  Table t;
  t.magic = kMagicForces;
  t.dt = rec.dt;
  t.names = numbered_names("r", rec.n_dof());
  for (auto& n : numbered_names("f", rec.n_dof())) t.names.push_back(std::move(n));
  t.values.resize(rec.n_frames(), 2 * rec.n_dof());
  t.values.leftCols(rec.n_dof()) = rec.configs;
  t.values.rightCols(rec.n_dof()) = rec.forces;
  write_table(t, path);
}

inline ForceRecord load_force_record(const std::filesystem::path& path) {
  Table t = read_table(path, kMagicForces);
  if (t.values.cols() % 2 != 0) throw InputError(path.string() + ": force record needs an even column count");
  const Index n = t.values.cols() / 2;
  ForceRecord rec{t.values.leftCols(n), t.values.rightCols(n), t.dt};
  rec.validate();
  return rec;
}

// Per-frame prior energy and (optionally) the correction G - E_prior.
struct EnergyRecord {
  Vector prior_energy;
  std::optional<Vector> correction;

  void validate(std::optional<Index> expected_frames = std::nullopt) const {
    if (!prior_energy.allFinite()) throw InputError("energy record: non-finite prior energy");
    if (correction) {
      detail::require(correction->size() == prior_energy.size(), "energy record: correction length mismatch");
      if (!correction->allFinite()) throw InputError("energy record: non-finite correction");
    }
    if (expected_frames && *expected_frames != prior_energy.size())
      throw InputError("energy record has " + std::to_string(prior_energy.size()) + " frames, expected " +
                       std::to_string(*expected_frames));
  }
};

inline void save_energy_record(const EnergyRecord& rec, const std::filesystem::path& path, double dt = 1.0) {
  rec.validate();
  Table t;
  t.magic = kMagicEnergy;
  t.dt = dt;
  t.names = {"prior_energy"};
  t.values.resize(rec.prior_energy.size(), rec.correction ? 2 : 1);
  t.values.col(0) = rec.prior_energy;
  if (rec.correction) {
    t.names.push_back("delta_e");
    t.values.col(1) = *rec.correction;
  }
  write_table(t, path);
}

inline EnergyRecord load_energy_record(const std::filesystem::path& path) {
  Table t = read_table(path, kMagicEnergy);
  const Index prior = t.column("prior_energy");
  if (prior < 0) throw InputError(path.string() + ": no 'prior_energy' column");
  EnergyRecord rec;
  rec.prior_energy = t.values.col(prior);
  if (Index c = t.column("delta_e"); c >= 0) rec.correction = Vector(t.values.col(c));
  rec.validate();
  return rec;
}

inline std::vector<std::string> pair_names(Index sites) {
  std::vector<std::string> names;
  for (Index i = 0; i < sites; ++i)
    for (Index j = i + 1; j < sites; ++j) names.push_back("d" + std::to_string(i) + "_" + std::to_string(j));
  return names;
}

// Euclidean distances between every pair of sites (i < j, lexicographic).
// Columns of `configs` are (x, y, z) triples per site. Works for any number
// of rows, including one.
inline RowMatrix pairwise_distances(const RowMatrix& configs) {
  if (configs.cols() % 3 != 0)
    throw InputError("pairwise distances: column count " + std::to_string(configs.cols()) +
                     " is not divisible by 3");
  const Index sites = configs.cols() / 3;
  if (sites < 2) throw InputError("pairwise distances: need at least 2 sites");
  RowMatrix out(configs.rows(), sites * (sites - 1) / 2);
  for (Index t = 0; t < configs.rows(); ++t) {
    Index k = 0;
    for (Index i = 0; i < sites; ++i)
      for (Index j = i + 1; j < sites; ++j, ++k) {
        const double dx = configs(t, 3 * i) - configs(t, 3 * j);
        const double dy = configs(t, 3 * i + 1) - configs(t, 3 * j + 1);
        const double dz = configs(t, 3 * i + 2) - configs(t, 3 * j + 2);
        out(t, k) = std::sqrt(dx * dx + dy * dy + dz * dz);
      }
  }
  return out;
}

inline FeatureTrajectory pairwise_distance_features(const RowMatrix& configs, double dt = 1.0,
                                                    std::string source_id = {}) {
  RowMatrix d = pairwise_distances(configs);
  return FeatureTrajectory(std::move(d), dt, pair_names(configs.cols() / 3), std::move(source_id));
}

}  // namespace femtk
