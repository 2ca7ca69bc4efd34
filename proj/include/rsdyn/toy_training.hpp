#pragma once

#include <cstdint>
#include <vector>

#include "rsdyn/toy_transformer.hpp"

namespace rsdyn {

struct ToyTrainConfig {
  int steps = 150;
  int batch_size = 8;
  int seq_len = 64;  // training windows are prefixes of at most this many tokens
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
};

struct ToyTrainReport {
  std::vector<double> step_loss;
};

/// Next-token cross-entropy of one sequence and, when grad is non-null, its
/// gradient (grad must have the shapes of model.params; it is overwritten).
double toy_loss_and_grad(const ToyModel& model, const TokenSequence& seq, ModelParams* grad);

/// Short Adam run on next-token prediction. Gradients are reduced over the
/// batch in sequence order, so results are independent of the worker count.
/// Parameters are rounded to f32 at the end.
ToyTrainReport train_toy_model(ToyModel& model, const std::vector<TokenSequence>& corpus,
                               const ToyTrainConfig& config);

}  // namespace rsdyn
