#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsdyn/activation_store.hpp"
#include "rsdyn/sequence_pipeline.hpp"
#include "rsdyn/tensor_container.hpp"

namespace rsdyn {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab = 257;
  int max_seq = 128;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Throws ErrorKind::Config when the configuration is unusable.
void check_config(const ModelConfig& config);

// Row vectors (gains, biases) are stored as 1 x n matrices so every
// parameter can be visited uniformly.
struct LayerParams {
  Eigen::MatrixXd attn_gain;  // 1 x D
  Eigen::MatrixXd wq, wk, wv, wo;  // D x D
  Eigen::MatrixXd mlp_gain;  // 1 x D
  Eigen::MatrixXd w1;  // D x d_mlp
  Eigen::MatrixXd b1;  // 1 x d_mlp
  Eigen::MatrixXd w2;  // d_mlp x D
  Eigen::MatrixXd b2;  // 1 x D
};

struct ModelParams {
  Eigen::MatrixXd tok_emb;  // vocab x D
  Eigen::MatrixXd pos_emb;  // max_seq x D
  std::vector<LayerParams> layers;
  Eigen::MatrixXd final_gain;  // 1 x D
  Eigen::MatrixXd unembed;  // D x vocab
};

/// Calls fn(name, tensor) for every parameter in a fixed order.
void visit_params(ModelParams& params, const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn);
void visit_params(const ModelParams& params,
                  const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn);

/// Same shapes as `like`, all zeros.
ModelParams zeros_like(const ModelParams& like);

/// Pre-norm decoder: RMS norm, multi-head causal attention, GELU MLP,
/// learned positional embeddings. Parameters are kept f32-representable so
/// checkpoints round-trip exactly.
struct ToyModel {
  ModelConfig config;
  ModelParams params;
};

ToyModel init_model(const ModelConfig& config);

struct Capture {
  RSTensor activations;  // 1 x 2L x D, last token
  std::vector<float> logits;  // last token
};

Capture forward_capture(const ToyModel& model, const TokenSequence& seq);

struct InjectionSpec {
  int layer = 0;
  HookPoint hook = HookPoint::PreAttn;
  std::vector<double> replacement;  // D values, written at the last position
};

RSTensor forward_inject(const ToyModel& model, const TokenSequence& seq, const InjectionSpec& inj);

/// Row b is forward_capture(corpus[b]); rows are computed in parallel.
RSTensor generate_dataset(const ToyModel& model, const std::vector<TokenSequence>& corpus);

/// Full-sequence residuals for instrumentation: entry s of `residual_in` is
/// the T x D residual entering block s (even s attention, odd s MLP);
/// `block_out` is what the block adds; `residual_out` the sum the model
/// carries forward.
struct ResidualTrace {
  std::vector<Eigen::MatrixXd> residual_in;
  std::vector<Eigen::MatrixXd> block_out;
  std::vector<Eigen::MatrixXd> residual_out;
  Eigen::MatrixXd logits;  // T x vocab
};

ResidualTrace forward_trace(const ToyModel& model, const TokenSequence& seq, const InjectionSpec* inj = nullptr);

TensorBundle to_bundle(const ToyModel& model);
ToyModel from_bundle(const TensorBundle& bundle);
void save_model(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_model(const std::filesystem::path& path);

/// Round every parameter to the nearest f32.
void round_to_f32(ModelParams& params);

}  // namespace rsdyn
