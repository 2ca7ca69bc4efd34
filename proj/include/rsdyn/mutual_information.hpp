#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsdyn/activation_store.hpp"

namespace rsdyn {

inline constexpr std::size_t kDefaultMiGrid = 64;
inline constexpr double kMiEpsilon = 1e-10;

/// Gaussian KDE of (x, y) evaluated on a grid_size x grid_size lattice.
///
/// The kernel covariance is the sample covariance scaled by Scott's factor
/// B^(-1/6), so bandwidth_x / bandwidth_y are the per-axis kernel standard
/// deviations and kernel_correlation is the sample correlation. Each axis
/// spans [min - 3h, max + 3h] with h that axis' bandwidth.
struct KdeGrid {
  std::vector<double> xs;
  std::vector<double> ys;
  double dx = 0.0;
  double dy = 0.0;
  Eigen::MatrixXd joint;  // joint(i, j) = p(xs[i], ys[j]), unnormalized grid evaluation
  std::vector<double> marginal_x;  // sum_j joint(i, j) * dy
  std::vector<double> marginal_y;  // sum_i joint(i, j) * dx
  double bandwidth_x = 0.0;
  double bandwidth_y = 0.0;
  double kernel_correlation = 0.0;
};

KdeGrid kde_density_2d(std::span<const double> x, std::span<const double> y, std::size_t grid_size = kDefaultMiGrid);

struct MIEstimate {
  double value = 0.0;  // nats
  int unit = -1;
  int transition = -1;
  double bandwidth_x = 0.0;
  double bandwidth_y = 0.0;
  std::size_t grid_size = kDefaultMiGrid;
};

/// Grid-sum MI of the KDE after renormalizing the joint to unit mass:
/// sum p(x,y) ln((p(x,y)+eps) / ((p(x)+eps)(p(y)+eps))) dx dy, eps = 1e-10.
MIEstimate mutual_information(std::span<const double> x, std::span<const double> y,
                              std::size_t grid_size = kDefaultMiGrid);

struct MIProfile {
  Eigen::MatrixXd mi;  // D x (S-1); NaN where not computed
  Eigen::MatrixXd bandwidth_x;
  Eigen::MatrixXd bandwidth_y;
  std::vector<std::vector<std::string>> flag;  // [unit][transition]: "ok", "degenerate" or "skipped"
  std::vector<double> mean_per_transition;  // over "ok" entries; NaN if none
  std::size_t grid_size = kDefaultMiGrid;
};

MIProfile mi_layer_profile(const RSTensor& rs, const std::optional<std::vector<std::size_t>>& unit_subset,
                           std::size_t grid_size = kDefaultMiGrid);

/// Columns: unit, transition, mi_nats, bandwidth_x, bandwidth_y, flag.
void write_mi_csv(const MIProfile& profile, const std::filesystem::path& path);

}  // namespace rsdyn
