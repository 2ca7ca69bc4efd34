#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "rsdyn/activation_store.hpp"

namespace rsdyn {

/// d/dl with unit spacing: central differences inside, one-sided at the ends.
std::vector<double> layer_gradient(std::span<const double> series);

struct PhasePoint {
  double a = 0.0;  // activation
  double g = 0.0;  // layer gradient
};

struct PhaseTrajectory {
  std::vector<PhasePoint> points;
  std::size_t unit = 0;
};

PhaseTrajectory trajectory_from_series(std::span<const double> series, std::size_t unit = 0);

/// Activation series of one unit across sublayers: the batch mean when
/// sample is empty, otherwise that sample's series.
std::vector<double> unit_series(const RSTensor& rs, std::size_t unit, std::optional<std::size_t> sample = std::nullopt);

PhaseTrajectory build_trajectory(const RSTensor& rs, std::size_t unit,
                                 std::optional<std::size_t> sample = std::nullopt);

struct RotationCount {
  double rotations = 0.0;
  std::size_t skipped_segments = 0;  // zero-length tangents
  std::vector<double> angle_changes;  // each in (-pi, pi]
};

/// Cumulative wrapped change of the tangent angle divided by 2*pi.
/// Throws DegenerateTrajectory with fewer than three distinct points.
RotationCount count_rotations(const PhaseTrajectory& traj);

struct RotationStats {
  std::size_t unit = 0;
  double rotations = 0.0;
  std::size_t skipped_segments = 0;
  std::vector<double> null_samples;
  std::size_t degenerate_null = 0;  // shuffles that produced a degenerate trajectory (recorded as 0)
  double null_mean = 0.0;
  double null_sd = 0.0;
  double z_score = 0.0;
  double p_value = 1.0;  // two-sided, (1 + #{|null| >= |obs|}) / (n + 1)
};

/// Rotation count after reordering the activation series by perm and
/// recomputing the gradient.
double rotations_under_permutation(std::span<const double> series, std::span<const std::size_t> perm,
                                   bool* degenerate = nullptr);

RotationStats shuffle_null_series(std::span<const double> series, std::size_t n_shuffle, std::uint64_t seed);

/// The unit's shuffle stream is seeded by mix_seed(seed, unit).
RotationStats shuffle_null(const RSTensor& rs, std::size_t unit, std::size_t n_shuffle, std::uint64_t seed,
                           std::optional<std::size_t> sample = std::nullopt);

/// shuffle_null for every unit in parallel. Units whose observed trajectory
/// is degenerate get NaN statistics.
std::vector<RotationStats> rotation_table(const RSTensor& rs, std::size_t n_shuffle, std::uint64_t seed);

/// Linear-interpolated quantile, q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Columns: unit, rotations, null_mean, null_sd, z, p, skipped_segments.
void write_rotations_csv(const std::vector<RotationStats>& table, const std::filesystem::path& path);

}  // namespace rsdyn
