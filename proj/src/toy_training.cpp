#include "rsdyn/toy_training.hpp"

#include <cmath>

#include "rsdyn/error.hpp"
#include "rsdyn/parallel.hpp"
#include "rsdyn/rng.hpp"
#include "toy_internal.hpp"

namespace rsdyn {

namespace detail {

namespace {

// dx for y = xhat * gain; accumulates the gain gradient.
Eigen::MatrixXd rms_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& gain, const NormCache& cache,
                                  Eigen::MatrixXd& dgain) {
  dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  const Eigen::MatrixXd dxhat = dy * gain.row(0).asDiagonal();
  const auto d = static_cast<double>(dy.cols());
  const Eigen::VectorXd proj = (dxhat.array() * cache.xhat.array()).rowwise().sum() / d;
  return cache.inv_rms.asDiagonal() * (dxhat - proj.asDiagonal() * cache.xhat);
}

double gelu_grad(double h) {
  constexpr double c = 0.7978845608028654;
  const double inner = c * (h + 0.044715 * h * h * h);
  const double t = std::tanh(inner);
  return 0.5 * (1.0 + t) + 0.5 * h * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * h * h);
}

}  // namespace

void backward(const ModelConfig& config, const ModelParams& params, const ForwardCache& cache, ModelParams& grad) {
  const auto t_len = cache.logits.rows();
  const int d = config.d_model;
  const int head_dim = d / config.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // Softmax cross-entropy over the predicted positions.
  Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(t_len, config.vocab);
  if (t_len >= 2) {
    const double norm = 1.0 / static_cast<double>(t_len - 1);
    for (Eigen::Index pos = 0; pos + 1 < t_len; ++pos) {
      const auto row = cache.logits.row(pos);
      const double peak = row.maxCoeff();
      Eigen::RowVectorXd p = (row.array() - peak).exp().matrix();
      p /= p.sum();
      p(cache.tokens[static_cast<std::size_t>(pos + 1)]) -= 1.0;
      dlogits.row(pos) = p * norm;
    }
  }

  grad.unembed += cache.final_normed.transpose() * dlogits;
  Eigen::MatrixXd dx =
      rms_norm_backward(dlogits * params.unembed.transpose(), params.final_gain, cache.final_norm, grad.final_gain);

  for (int l = config.n_layers - 1; l >= 0; --l) {
    const auto& w = params.layers[static_cast<std::size_t>(l)];
    auto& g = grad.layers[static_cast<std::size_t>(l)];
    const auto& c = cache.layers[static_cast<std::size_t>(l)];

    // MLP branch: dx flows both through the residual and into the block.
    g.b2.row(0) += dx.colwise().sum();
    g.w2 += c.act.transpose() * dx;
    const Eigen::MatrixXd dact = dx * w.w2.transpose();
    const Eigen::MatrixXd dpre = dact.array() * c.pre_act.unaryExpr([](double h) { return gelu_grad(h); }).array();
    g.b1.row(0) += dpre.colwise().sum();
    g.w1 += c.mlp_normed.transpose() * dpre;
    dx += rms_norm_backward(dpre * w.w1.transpose(), w.mlp_gain, c.mlp_norm, g.mlp_gain);

    // Attention branch.
    g.wo += c.heads.transpose() * dx;
    const Eigen::MatrixXd dheads = dx * w.wo.transpose();
    Eigen::MatrixXd dq(t_len, d), dk(t_len, d), dv(t_len, d);
    for (int h = 0; h < config.n_heads; ++h) {
      const auto& probs = c.probs[static_cast<std::size_t>(h)];
      const auto qh = c.q.middleCols(h * head_dim, head_dim);
      const auto kh = c.k.middleCols(h * head_dim, head_dim);
      const auto vh = c.v.middleCols(h * head_dim, head_dim);
      const auto dout = dheads.middleCols(h * head_dim, head_dim);
      dv.middleCols(h * head_dim, head_dim) = probs.transpose() * dout;
      const Eigen::MatrixXd dprobs = dout * vh.transpose();
      const Eigen::VectorXd row_dot = (dprobs.array() * probs.array()).rowwise().sum();
      const Eigen::MatrixXd dscores = probs.array() * (dprobs.colwise() - row_dot).array();
      dq.middleCols(h * head_dim, head_dim) = dscores * kh * scale;
      dk.middleCols(h * head_dim, head_dim) = dscores.transpose() * qh * scale;
    }
    g.wq += c.attn_normed.transpose() * dq;
    g.wk += c.attn_normed.transpose() * dk;
    g.wv += c.attn_normed.transpose() * dv;
    const Eigen::MatrixXd dnormed = dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
    dx += rms_norm_backward(dnormed, w.attn_gain, c.attn_norm, g.attn_gain);
  }

  for (Eigen::Index pos = 0; pos < t_len; ++pos) {
    grad.tok_emb.row(cache.tokens[static_cast<std::size_t>(pos)]) += dx.row(pos);
    grad.pos_emb.row(pos) += dx.row(pos);
  }
}

}  // namespace detail

double toy_loss_and_grad(const ToyModel& model, const TokenSequence& seq, ModelParams* grad) {
  detail::ForwardCache cache;
  detail::forward(model.config, model.params, seq.tokens, nullptr, cache);
  const double loss = detail::next_token_loss(cache);
  if (grad != nullptr) {
    *grad = zeros_like(model.params);
    detail::backward(model.config, model.params, cache, *grad);
  }
  return loss;
}

ToyTrainReport train_toy_model(ToyModel& model, const std::vector<TokenSequence>& corpus,
                               const ToyTrainConfig& config) {
  if (corpus.empty()) throw Error(ErrorKind::EmptyInput, "training corpus is empty");
  if (config.steps < 0 || config.batch_size < 1 || config.seq_len < 2 || config.lr <= 0.0) {
    throw Error(ErrorKind::Config, "invalid toy training configuration");
  }
  const auto window = static_cast<std::size_t>(std::min(config.seq_len, model.config.max_seq));

  ModelParams m1 = zeros_like(model.params);
  ModelParams m2 = zeros_like(model.params);
  Rng rng(config.seed);
  ToyTrainReport report;
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int step = 1; step <= config.steps; ++step) {
    std::vector<TokenSequence> seqs(batch);
    for (auto& s : seqs) {
      const auto& src = corpus[rng.below(corpus.size())];
      s = src;
      if (s.tokens.size() > window) s.tokens.resize(window);
    }

    std::vector<ModelParams> grads(batch);
    std::vector<double> losses(batch);
    parallel_for(batch, [&](std::size_t i) { losses[i] = toy_loss_and_grad(model, seqs[i], &grads[i]); });

    ModelParams total = zeros_like(model.params);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      loss += losses[i];
      std::vector<Eigen::MatrixXd*> dst;
      visit_params(total, [&](const std::string&, Eigen::MatrixXd& m) { dst.push_back(&m); });
      std::size_t k = 0;
      visit_params(grads[i], [&](const std::string&, Eigen::MatrixXd& m) { *dst[k++] += m; });
    }
    loss /= static_cast<double>(batch);
    if (!std::isfinite(loss)) throw Error(ErrorKind::NonFiniteLoss, "toy model loss diverged at step " + std::to_string(step));
    report.step_loss.push_back(loss);

    const double bc1 = 1.0 - std::pow(config.beta1, step);
    const double bc2 = 1.0 - std::pow(config.beta2, step);
    std::vector<Eigen::MatrixXd*> gs, ms, vs;
    visit_params(total, [&](const std::string&, Eigen::MatrixXd& m) { gs.push_back(&m); });
    visit_params(m1, [&](const std::string&, Eigen::MatrixXd& m) { ms.push_back(&m); });
    visit_params(m2, [&](const std::string&, Eigen::MatrixXd& m) { vs.push_back(&m); });
    std::size_t k = 0;
    visit_params(model.params, [&](const std::string&, Eigen::MatrixXd& p) {
      const Eigen::MatrixXd g = *gs[k] / static_cast<double>(batch);
      *ms[k] = config.beta1 * *ms[k] + (1.0 - config.beta1) * g;
      *vs[k] = config.beta2 * *vs[k] + (1.0 - config.beta2) * g.cwiseProduct(g);
      p.array() -= config.lr * (ms[k]->array() / bc1) / ((vs[k]->array() / bc2).sqrt() + config.eps);
      ++k;
    });
  }
  round_to_f32(model.params);
  return report;
}

}  // namespace rsdyn
