#include "rsdyn/phase_portrait.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>

#include "rsdyn/error.hpp"
#include "rsdyn/format.hpp"
#include "rsdyn/parallel.hpp"
#include "rsdyn/rng.hpp"

namespace rsdyn {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_angle(double delta) {
  // Into (-pi, pi].
  double w = std::remainder(delta, kTwoPi);
  if (w <= -std::numbers::pi) w += kTwoPi;
  return w;
}

}  // namespace

std::vector<double> layer_gradient(std::span<const double> series) {
  const std::size_t n = series.size();
  if (n < 3) throw Error(ErrorKind::TooShort, "layer gradient needs at least 3 points, have " + std::to_string(n));
  std::vector<double> grad(n);
  grad[0] = series[1] - series[0];
  for (std::size_t i = 1; i + 1 < n; ++i) grad[i] = 0.5 * (series[i + 1] - series[i - 1]);
  grad[n - 1] = series[n - 1] - series[n - 2];
  return grad;
}

PhaseTrajectory trajectory_from_series(std::span<const double> series, std::size_t unit) {
  const auto grad = layer_gradient(series);
  PhaseTrajectory traj;
  traj.unit = unit;
  traj.points.resize(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) traj.points[i] = {series[i], grad[i]};
  return traj;
}

std::vector<double> unit_series(const RSTensor& rs, std::size_t unit, std::optional<std::size_t> sample) {
  if (unit >= rs.units()) {
    throw Error(ErrorKind::UnitOutOfRange, "unit " + std::to_string(unit) + " out of range for D=" +
                                               std::to_string(rs.units()));
  }
  std::vector<double> series(rs.sublayers(), 0.0);
  if (sample) {
    if (*sample >= rs.samples()) throw Error(ErrorKind::InsufficientSamples, "sample index out of range");
    for (std::size_t s = 0; s < rs.sublayers(); ++s) series[s] = rs.at(*sample, s, unit);
    return series;
  }
  for (std::size_t b = 0; b < rs.samples(); ++b) {
    for (std::size_t s = 0; s < rs.sublayers(); ++s) series[s] += rs.at(b, s, unit);
  }
  for (auto& v : series) v /= static_cast<double>(rs.samples());
  return series;
}

PhaseTrajectory build_trajectory(const RSTensor& rs, std::size_t unit, std::optional<std::size_t> sample) {
  return trajectory_from_series(unit_series(rs, unit, sample), unit);
}

RotationCount count_rotations(const PhaseTrajectory& traj) {
  const auto& pts = traj.points;
  if (pts.empty()) throw Error(ErrorKind::DegenerateTrajectory, "empty trajectory");

  // Centered on the first point; only differences enter the angle, so the
  // centering leaves the count unchanged but keeps magnitudes small.
  std::vector<PhasePoint> centered(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) centered[i] = {pts[i].a - pts[0].a, pts[i].g - pts[0].g};

  std::set<std::pair<double, double>> distinct;
  for (const auto& p : centered) distinct.emplace(p.a, p.g);
  if (distinct.size() < 3) {
    throw Error(ErrorKind::DegenerateTrajectory,
                "trajectory has " + std::to_string(distinct.size()) + " distinct points, need 3");
  }

  RotationCount out;
  std::vector<double> angles;
  for (std::size_t i = 0; i + 1 < centered.size(); ++i) {
    const double dx = centered[i + 1].a - centered[i].a;
    const double dy = centered[i + 1].g - centered[i].g;
    if (dx == 0.0 && dy == 0.0) {
      ++out.skipped_segments;
      continue;
    }
    angles.push_back(std::atan2(dy, dx));
  }
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < angles.size(); ++i) {
    const double delta = wrap_angle(angles[i + 1] - angles[i]);
    out.angle_changes.push_back(delta);
    total += delta;
  }
  out.rotations = total / kTwoPi;
  return out;
}

double rotations_under_permutation(std::span<const double> series, std::span<const std::size_t> perm,
                                   bool* degenerate) {
  if (perm.size() != series.size()) throw Error(ErrorKind::DimensionMismatch, "permutation length mismatch");
  std::vector<double> permuted(series.size());
  for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = series[perm[i]];
  try {
    const double r = count_rotations(trajectory_from_series(permuted)).rotations;
    if (degenerate != nullptr) *degenerate = false;
    return r;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::DegenerateTrajectory) throw;
    if (degenerate != nullptr) *degenerate = true;
    return 0.0;
  }
}

RotationStats shuffle_null_series(std::span<const double> series, std::size_t n_shuffle, std::uint64_t seed) {
  if (n_shuffle < 1) throw Error(ErrorKind::Config, "n_shuffle must be at least 1");
  const auto observed = count_rotations(trajectory_from_series(series));

  RotationStats stats;
  stats.rotations = observed.rotations;
  stats.skipped_segments = observed.skipped_segments;
  stats.null_samples.resize(n_shuffle);

  Rng rng(seed);
  std::vector<std::size_t> perm(series.size());
  for (std::size_t k = 0; k < n_shuffle; ++k) {
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    bool degenerate = false;
    stats.null_samples[k] = rotations_under_permutation(series, perm, &degenerate);
    if (degenerate) ++stats.degenerate_null;
  }

  const double n = static_cast<double>(n_shuffle);
  stats.null_mean = std::accumulate(stats.null_samples.begin(), stats.null_samples.end(), 0.0) / n;
  double ss = 0.0;
  for (const double v : stats.null_samples) ss += (v - stats.null_mean) * (v - stats.null_mean);
  stats.null_sd = n_shuffle > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  stats.z_score = stats.null_sd > 0.0 ? (stats.rotations - stats.null_mean) / stats.null_sd
                                      : std::numeric_limits<double>::quiet_NaN();
  std::size_t extreme = 0;
  for (const double v : stats.null_samples) {
    if (std::abs(v) >= std::abs(stats.rotations)) ++extreme;
  }
  stats.p_value = (1.0 + static_cast<double>(extreme)) / (n + 1.0);
  return stats;
}

RotationStats shuffle_null(const RSTensor& rs, std::size_t unit, std::size_t n_shuffle, std::uint64_t seed,
                           std::optional<std::size_t> sample) {
  const auto series = unit_series(rs, unit, sample);
  auto stats = shuffle_null_series(series, n_shuffle, mix_seed(seed, unit));
  stats.unit = unit;
  return stats;
}

std::vector<RotationStats> rotation_table(const RSTensor& rs, std::size_t n_shuffle, std::uint64_t seed) {
  std::vector<RotationStats> table(rs.units());
  parallel_for(rs.units(), [&](std::size_t u) {
    try {
      table[u] = shuffle_null(rs, u, n_shuffle, seed);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateTrajectory) throw;
      constexpr double nan = std::numeric_limits<double>::quiet_NaN();
      RotationStats s;
      s.unit = u;
      s.rotations = s.null_mean = s.null_sd = s.z_score = s.p_value = nan;
      table[u] = s;
    }
  });
  return table;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

void write_rotations_csv(const std::vector<RotationStats>& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "unit,rotations,null_mean,null_sd,z,p,skipped_segments\n";
  for (const auto& s : table) {
    out << s.unit << ',' << fmt17(s.rotations) << ',' << fmt17(s.null_mean) << ',' << fmt17(s.null_sd) << ','
        << fmt17(s.z_score) << ',' << fmt17(s.p_value) << ',' << s.skipped_segments << '\n';
  }
}

}  // namespace rsdyn
