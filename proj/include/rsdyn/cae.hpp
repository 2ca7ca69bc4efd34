#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rsdyn/activation_store.hpp"
#include "rsdyn/tensor_container.hpp"

namespace rsdyn {

struct CaeConfig {
  std::size_t d_in = 64;
  std::size_t d_bottle = 2;
  std::size_t k_layers = 10;  // widths per stack, including d_in and d_bottle
  double lr = 1e-3;
  int max_epochs = 100;
  int patience = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

/// Geometric ladder d_in * r^i, r = (d_bottle/d_in)^(1/(k-1)), rounded, with
/// exact endpoints. Ties are broken by decrementing so widths strictly
/// decrease; throws InfeasibleLadder when d_in - d_bottle < k - 1.
std::vector<std::size_t> plan_dims(std::size_t d_in, std::size_t d_bottle, std::size_t k);

/// Affine map, optionally followed by layer normalization (learned gain and
/// shift, eps 1e-5) and ReLU.
struct DenseLayer {
  Eigen::MatrixXd w;  // in x out
  Eigen::RowVectorXd b;
  bool nonlinear = true;
  Eigen::RowVectorXd gain;
  Eigen::RowVectorXd shift;
};

struct CaeModel {
  std::vector<std::size_t> dims;  // encoder widths; the decoder mirrors them
  std::vector<DenseLayer> encoder;
  std::vector<DenseLayer> decoder;

  std::size_t d_in() const { return dims.front(); }
  std::size_t d_bottle() const { return dims.back(); }
};

/// Randomly initialized model on the given ladder. The last encoder layer and
/// the last decoder layer are affine only.
CaeModel make_cae(const std::vector<std::size_t>& dims, std::uint64_t seed);

Eigen::MatrixXd encode(const CaeModel& model, const Eigen::MatrixXd& vectors);
Eigen::MatrixXd decode(const CaeModel& model, const Eigen::MatrixXd& codes);
Eigen::MatrixXd reconstruct(const CaeModel& model, const Eigen::MatrixXd& vectors);

/// Mean over rows of the squared reconstruction error.
double reconstruction_loss(const CaeModel& model, const Eigen::MatrixXd& vectors);

/// Loss and its gradient; grad gets the shapes of model (nonlinear flags copied).
double cae_loss_and_grad(const CaeModel& model, const Eigen::MatrixXd& vectors, CaeModel& grad);

/// 1 - SSE / SST over all rows.
double explained_variance(const CaeModel& model, const Eigen::MatrixXd& vectors);

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = 0;  // 1-based
  double best_val_loss = 0.0;
  bool stopped_early = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> test_loss;

  std::size_t epochs() const { return train_loss.size(); }
};

/// Patience-based early stopping on a validation loss sequence.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  /// Records the loss for the next epoch; returns true if it is a new best.
  bool update(double val_loss);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_loss_ = 0.0;
};

/// Adam on the mean squared reconstruction error. Validation rows come from
/// `validation` when given, otherwise a seeded split of train_set. Returns
/// the weights of the best validation epoch.
std::pair<CaeModel, TrainHistory> train_cae(const CaeConfig& config, const Eigen::MatrixXd& train_set,
                                            const Eigen::MatrixXd& test_set,
                                            const std::optional<Eigen::MatrixXd>& validation = std::nullopt);

struct CaeTrajectoryStats {
  Eigen::MatrixXd mean_trajectory;  // S x d_bottle
  std::vector<double> distances;  // S - 1, between consecutive mean points
  std::vector<double> explained_variance;  // S, per sublayer
};

CaeTrajectoryStats trajectory_stats(const CaeModel& model, const RSTensor& rs);

/// All (sample, sublayer) vectors as rows, sample-major.
Eigen::MatrixXd flatten_rows(const RSTensor& rs);

TensorBundle to_bundle(const CaeModel& model);
CaeModel cae_from_bundle(const TensorBundle& bundle);

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);
void write_cae_trajectory_csv(const CaeTrajectoryStats& stats, const RSTensor& rs, const std::filesystem::path& path);

}  // namespace rsdyn
