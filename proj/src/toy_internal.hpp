#pragma once

#include <vector>

#include <Eigen/Dense>

#include "rsdyn/toy_transformer.hpp"

namespace rsdyn::detail {

inline constexpr double kNormEps = 1e-5;

struct NormCache {
  Eigen::MatrixXd xhat;  // x / rms, before the gain
  Eigen::VectorXd inv_rms;
};

struct LayerCache {
  Eigen::MatrixXd attn_in;
  NormCache attn_norm;
  Eigen::MatrixXd attn_normed;
  Eigen::MatrixXd q, k, v;
  std::vector<Eigen::MatrixXd> probs;  // one T x T matrix per head
  Eigen::MatrixXd heads;  // concatenated head outputs, T x D
  Eigen::MatrixXd attn_out;

  Eigen::MatrixXd mlp_in;
  NormCache mlp_norm;
  Eigen::MatrixXd mlp_normed;
  Eigen::MatrixXd pre_act;
  Eigen::MatrixXd act;
  Eigen::MatrixXd mlp_out;
};

struct ForwardCache {
  std::vector<int> tokens;
  std::vector<LayerCache> layers;
  Eigen::MatrixXd final_in;
  NormCache final_norm;
  Eigen::MatrixXd final_normed;
  Eigen::MatrixXd logits;
};

/// Single forward implementation shared by capture, injection, tracing and
/// training. Validates tokens and injection.
void forward(const ModelConfig& config, const ModelParams& params, const std::vector<int>& tokens,
             const InjectionSpec* inj, ForwardCache& cache);

/// Next-token cross-entropy, mean over the T-1 predicted positions.
double next_token_loss(const ForwardCache& cache);

/// Accumulates dLoss/dparams into grad (same shapes as params).
void backward(const ModelConfig& config, const ModelParams& params, const ForwardCache& cache, ModelParams& grad);

}  // namespace rsdyn::detail
