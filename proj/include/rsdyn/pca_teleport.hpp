#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rsdyn/activation_store.hpp"
#include "rsdyn/toy_transformer.hpp"

namespace rsdyn {

inline constexpr const char* kControlPrompt = "I'm sorry, Dave. I'm afraid I can't do that.";
inline constexpr std::size_t kQuiverHorizon = 12;

struct PcaModel {
  Eigen::RowVectorXd mean;  // D
  Eigen::MatrixXd components;  // D x D, columns orthonormal
  Eigen::VectorXd singular_values;  // D, descending; zero-padded when rows < D

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

/// SVD of the centered row matrix. Each component's sign is chosen so its
/// largest-magnitude entry is positive.
PcaModel fit_pca(const Eigen::MatrixXd& rows);
PcaModel fit_pca(const RSTensor& rs);

/// r_k = sigma_k^2 / sum sigma_i^2.
std::vector<double> explained_variance_ratio(const PcaModel& model);

Eigen::MatrixXd project(const PcaModel& model, const Eigen::MatrixXd& rows, std::size_t n_components);
Eigen::MatrixXd inverse_project(const PcaModel& model, const Eigen::MatrixXd& z);

struct EvCurves {
  std::vector<double> cumulative;  // D, prefix sums of r_k
  std::vector<double> per_sublayer;  // S, at n_components
  std::size_t n_components = 0;
};

EvCurves explained_variance_curves(const PcaModel& model, const RSTensor& rs, std::size_t n_components);

struct TeleportGrid {
  std::size_t n = 0;
  std::pair<double, double> range_x;
  std::pair<double, double> range_y;
  Eigen::MatrixXd points;  // n^2 x 2, point i*n + j = (x_i, y_j)
};

TeleportGrid make_grid(std::size_t n, std::pair<double, double> range_x, std::pair<double, double> range_y);

/// Per-axis [min, max] of the 2-D projections of rs, widened by 20% of the
/// span (10% on each side).
TeleportGrid default_grid(const PcaModel& model, const RSTensor& rs, std::size_t n);

enum class MseSpace { Pca2d, Full };

struct TeleportRun {
  Eigen::RowVector2d point;
  Eigen::MatrixXd trajectory;  // (S - s0) x 2, starting at the injection sublayer
  Eigen::RowVector2d quiver;
  std::size_t horizon = 0;  // sublayers spanned by the quiver
  double mse = 0.0;
};

struct TeleportResult {
  int layer = 0;
  std::size_t injection_sublayer = 0;
  MseSpace mse_space = MseSpace::Pca2d;
  Eigen::MatrixXd control;  // S x 2
  TeleportGrid grid;
  std::vector<TeleportRun> runs;  // grid order
};

/// Injects inverse_project(point) at (layer, PreAttn) for every grid point.
/// mse averages the squared distance to the control over the sublayers after
/// the injection sublayer.
TeleportResult teleport_experiment(const ToyModel& model, const PcaModel& pca, const TokenSequence& prompt, int layer,
                                   const TeleportGrid& grid, MseSpace space = MseSpace::Pca2d);

/// Default CLI injection layers: {0, 7, 15, 23, 31} of a 32-layer model
/// scaled to n_layers, duplicates removed.
std::vector<int> default_teleport_layers(int n_layers);

std::string teleport_json(const TeleportResult& result);
void write_teleport_json(const TeleportResult& result, const std::filesystem::path& path);

/// Columns: component, ratio, cumulative.
void write_ev_cumulative_csv(const PcaModel& model, const std::filesystem::path& path);
/// Columns: sublayer, layer, hook, explained_variance.
void write_ev_sublayer_csv(const EvCurves& curves, const RSTensor& rs, const std::filesystem::path& path);

}  // namespace rsdyn
