#include "rsdyn/toy_transformer.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

#include "rsdyn/error.hpp"
#include "rsdyn/parallel.hpp"
#include "rsdyn/rng.hpp"
#include "toy_internal.hpp"

namespace rsdyn {

namespace {

constexpr double kInitStd = 0.02;

void rms_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& gain, detail::NormCache& cache,
              Eigen::MatrixXd& out) {
  const auto d = static_cast<double>(x.cols());
  cache.inv_rms = ((x.array().square().rowwise().sum() / d) + detail::kNormEps).rsqrt().matrix();
  cache.xhat = cache.inv_rms.asDiagonal() * x;
  out = cache.xhat * gain.row(0).asDiagonal();
}

double gelu(double h) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * h * (1.0 + std::tanh(c * (h + 0.044715 * h * h * h)));
}

void check_injection(const ModelConfig& config, const InjectionSpec& inj) {
  if (inj.layer < 0 || inj.layer >= config.n_layers) {
    throw Error(ErrorKind::LayerOutOfRange, "injection layer " + std::to_string(inj.layer) + " outside [0, " +
                                                std::to_string(config.n_layers) + ")");
  }
  if (inj.hook != HookPoint::PreAttn) {
    throw Error(ErrorKind::Config, "injection is only defined at the pre-attention hook");
  }
  if (inj.replacement.size() != static_cast<std::size_t>(config.d_model)) {
    throw Error(ErrorKind::DimensionMismatch, "replacement has " + std::to_string(inj.replacement.size()) +
                                                  " values, model width is " + std::to_string(config.d_model));
  }
  for (const double v : inj.replacement) {
    if (!std::isfinite(v)) throw Error(ErrorKind::InvariantViolation, "replacement vector is not finite");
  }
}

}  // namespace

void check_config(const ModelConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Config, msg); };
  if (c.n_layers < 1) fail("n_layers must be >= 1");
  if (c.d_model < 1) fail("d_model must be >= 1");
  if (c.n_heads < 1) fail("n_heads must be >= 1");
  if (c.d_model % c.n_heads != 0) {
    fail("d_model " + std::to_string(c.d_model) + " not divisible by n_heads " + std::to_string(c.n_heads));
  }
  if (c.d_mlp < 1) fail("d_mlp must be >= 1");
  if (c.vocab < 257) fail("vocab must be >= 257");
  if (c.max_seq < 1) fail("max_seq must be >= 1");
}

void visit_params(ModelParams& p, const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn) {
  fn("tok_emb", p.tok_emb);
  fn("pos_emb", p.pos_emb);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    fn(prefix + "attn_gain", layer.attn_gain);
    fn(prefix + "wq", layer.wq);
    fn(prefix + "wk", layer.wk);
    fn(prefix + "wv", layer.wv);
    fn(prefix + "wo", layer.wo);
    fn(prefix + "mlp_gain", layer.mlp_gain);
    fn(prefix + "w1", layer.w1);
    fn(prefix + "b1", layer.b1);
    fn(prefix + "w2", layer.w2);
    fn(prefix + "b2", layer.b2);
  }
  fn("final_gain", p.final_gain);
  fn("unembed", p.unembed);
}

void visit_params(const ModelParams& p,
                  const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn) {
  visit_params(const_cast<ModelParams&>(p),
               [&](const std::string& name, Eigen::MatrixXd& m) { fn(name, m); });
}

ModelParams zeros_like(const ModelParams& like) {
  ModelParams out = like;
  visit_params(out, [](const std::string&, Eigen::MatrixXd& m) { m.setZero(); });
  return out;
}

void round_to_f32(ModelParams& params) {
  visit_params(params, [](const std::string&, Eigen::MatrixXd& m) {
    m = m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  });
}

ToyModel init_model(const ModelConfig& config) {
  check_config(config);
  const int d = config.d_model;
  ToyModel model{config, {}};
  auto& p = model.params;
  p.tok_emb.resize(config.vocab, d);
  p.pos_emb.resize(config.max_seq, d);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : p.layers) {
    layer.attn_gain = Eigen::MatrixXd::Ones(1, d);
    layer.wq.resize(d, d);
    layer.wk.resize(d, d);
    layer.wv.resize(d, d);
    layer.wo.resize(d, d);
    layer.mlp_gain = Eigen::MatrixXd::Ones(1, d);
    layer.w1.resize(d, config.d_mlp);
    layer.b1 = Eigen::MatrixXd::Zero(1, config.d_mlp);
    layer.w2.resize(config.d_mlp, d);
    layer.b2 = Eigen::MatrixXd::Zero(1, d);
  }
  p.final_gain = Eigen::MatrixXd::Ones(1, d);
  p.unembed.resize(d, config.vocab);

  // Gains stay at one and biases at zero; every other tensor is N(0, 0.02).
  Rng rng(config.seed);
  visit_params(p, [&](const std::string& name, Eigen::MatrixXd& m) {
    const bool is_gain = name.ends_with("gain");
    const bool is_bias = name.ends_with(".b1") || name.ends_with(".b2");
    if (is_gain || is_bias) return;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = kInitStd * rng.normal();
    }
  });
  round_to_f32(p);
  return model;
}

namespace detail {

void forward(const ModelConfig& config, const ModelParams& params, const std::vector<int>& tokens,
             const InjectionSpec* inj, ForwardCache& cache) {
  const auto t_len = static_cast<Eigen::Index>(tokens.size());
  if (t_len == 0) throw Error(ErrorKind::EmptyInput, "empty token sequence");
  if (t_len > config.max_seq) {
    throw Error(ErrorKind::SequenceTooLong, "sequence of " + std::to_string(t_len) + " tokens exceeds max_seq " +
                                                std::to_string(config.max_seq));
  }
  for (const int t : tokens) {
    if (t < 0 || t >= config.vocab) throw Error(ErrorKind::Config, "token id " + std::to_string(t) + " outside vocab");
  }
  if (inj != nullptr) check_injection(config, *inj);

  const int d = config.d_model;
  const int n_heads = config.n_heads;
  const int head_dim = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  cache.tokens = tokens;
  cache.layers.resize(static_cast<std::size_t>(config.n_layers));

  Eigen::MatrixXd x(t_len, d);
  for (Eigen::Index pos = 0; pos < t_len; ++pos) {
    x.row(pos) = params.tok_emb.row(tokens[static_cast<std::size_t>(pos)]) + params.pos_emb.row(pos);
  }

  for (int l = 0; l < config.n_layers; ++l) {
    const auto& w = params.layers[static_cast<std::size_t>(l)];
    auto& c = cache.layers[static_cast<std::size_t>(l)];

    if (inj != nullptr && inj->layer == l) {
      x.row(t_len - 1) = Eigen::Map<const Eigen::RowVectorXd>(inj->replacement.data(), d);
    }

    c.attn_in = x;
    rms_norm(x, w.attn_gain, c.attn_norm, c.attn_normed);
    c.q = c.attn_normed * w.wq;
    c.k = c.attn_normed * w.wk;
    c.v = c.attn_normed * w.wv;
    c.heads.resize(t_len, d);
    c.probs.resize(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      const auto qh = c.q.middleCols(h * head_dim, head_dim);
      const auto kh = c.k.middleCols(h * head_dim, head_dim);
      const auto vh = c.v.middleCols(h * head_dim, head_dim);
      Eigen::MatrixXd scores = (qh * kh.transpose()) * scale;
      auto& probs = c.probs[static_cast<std::size_t>(h)];
      probs.setZero(t_len, t_len);
      for (Eigen::Index i = 0; i < t_len; ++i) {
        const double peak = scores.row(i).head(i + 1).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          probs(i, j) = std::exp(scores(i, j) - peak);
          total += probs(i, j);
        }
        probs.row(i).head(i + 1) /= total;
      }
      c.heads.middleCols(h * head_dim, head_dim) = probs * vh;
    }
    c.attn_out = c.heads * w.wo;
    x += c.attn_out;

    c.mlp_in = x;
    rms_norm(x, w.mlp_gain, c.mlp_norm, c.mlp_normed);
    c.pre_act = (c.mlp_normed * w.w1).rowwise() + w.b1.row(0);
    c.act = c.pre_act.unaryExpr([](double h) { return gelu(h); });
    c.mlp_out = (c.act * w.w2).rowwise() + w.b2.row(0);
    x += c.mlp_out;
  }

  cache.final_in = x;
  rms_norm(x, params.final_gain, cache.final_norm, cache.final_normed);
  cache.logits = cache.final_normed * params.unembed;
}

double next_token_loss(const ForwardCache& cache) {
  const auto t_len = cache.logits.rows();
  if (t_len < 2) return 0.0;
  double loss = 0.0;
  for (Eigen::Index pos = 0; pos + 1 < t_len; ++pos) {
    const auto row = cache.logits.row(pos);
    const double peak = row.maxCoeff();
    const double log_z = peak + std::log((row.array() - peak).exp().sum());
    loss += log_z - row(cache.tokens[static_cast<std::size_t>(pos + 1)]);
  }
  return loss / static_cast<double>(t_len - 1);
}

}  // namespace detail

namespace {

RSTensor capture_from_cache(const ModelConfig& config, const detail::ForwardCache& cache) {
  const auto last = cache.final_in.rows() - 1;
  const auto s = static_cast<std::size_t>(2 * config.n_layers);
  const auto d = static_cast<std::size_t>(config.d_model);
  RSTensor out(1, s, d);
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    const auto& c = cache.layers[l];
    for (std::size_t u = 0; u < d; ++u) {
      out.at(0, 2 * l, u) = static_cast<float>(c.attn_in(last, static_cast<Eigen::Index>(u)));
      out.at(0, 2 * l + 1, u) = static_cast<float>(c.mlp_in(last, static_cast<Eigen::Index>(u)));
    }
  }
  return out;
}

}  // namespace

Capture forward_capture(const ToyModel& model, const TokenSequence& seq) {
  detail::ForwardCache cache;
  detail::forward(model.config, model.params, seq.tokens, nullptr, cache);
  Capture out;
  out.activations = capture_from_cache(model.config, cache);
  const auto last = cache.logits.row(cache.logits.rows() - 1);
  out.logits.resize(static_cast<std::size_t>(last.size()));
  for (Eigen::Index i = 0; i < last.size(); ++i) out.logits[static_cast<std::size_t>(i)] = static_cast<float>(last(i));
  return out;
}

RSTensor forward_inject(const ToyModel& model, const TokenSequence& seq, const InjectionSpec& inj) {
  detail::ForwardCache cache;
  detail::forward(model.config, model.params, seq.tokens, &inj, cache);
  return capture_from_cache(model.config, cache);
}

RSTensor generate_dataset(const ToyModel& model, const std::vector<TokenSequence>& corpus) {
  if (corpus.empty()) throw Error(ErrorKind::EmptyInput, "corpus is empty");
  std::vector<RSTensor> rows(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t b) { rows[b] = forward_capture(model, corpus[b]).activations; });
  return stack_samples(rows);
}

ResidualTrace forward_trace(const ToyModel& model, const TokenSequence& seq, const InjectionSpec* inj) {
  detail::ForwardCache cache;
  detail::forward(model.config, model.params, seq.tokens, inj, cache);
  ResidualTrace trace;
  const std::size_t n_layers = cache.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& c = cache.layers[l];
    trace.residual_in.push_back(c.attn_in);
    trace.block_out.push_back(c.attn_out);
    trace.residual_out.push_back(c.mlp_in);
    trace.residual_in.push_back(c.mlp_in);
    trace.block_out.push_back(c.mlp_out);
    trace.residual_out.push_back(l + 1 < n_layers ? cache.layers[l + 1].attn_in : cache.final_in);
  }
  trace.logits = cache.logits;
  return trace;
}

TensorBundle to_bundle(const ToyModel& model) {
  const auto& c = model.config;
  nlohmann::json meta = {{"kind", "toy-transformer"}, {"n_layers", c.n_layers}, {"d_model", c.d_model},
                         {"n_heads", c.n_heads},      {"d_mlp", c.d_mlp},       {"vocab", c.vocab},
                         {"max_seq", c.max_seq},      {"seed", c.seed}};
  TensorBundle bundle;
  bundle.metadata_json = meta.dump();
  visit_params(model.params, [&](const std::string& name, const Eigen::MatrixXd& m) {
    NamedTensor t;
    t.name = name;
    t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.values.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) t.values.push_back(static_cast<float>(m(i, j)));
    }
    bundle.tensors.push_back(std::move(t));
  });
  return bundle;
}

ToyModel from_bundle(const TensorBundle& bundle) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bundle.metadata_json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("checkpoint metadata: ") + e.what());
  }
  if (meta.value("kind", "") != "toy-transformer") throw Error(ErrorKind::Format, "not a toy-transformer checkpoint");
  ModelConfig config;
  try {
    config.n_layers = meta.at("n_layers").get<int>();
    config.d_model = meta.at("d_model").get<int>();
    config.n_heads = meta.at("n_heads").get<int>();
    config.d_mlp = meta.at("d_mlp").get<int>();
    config.vocab = meta.at("vocab").get<int>();
    config.max_seq = meta.at("max_seq").get<int>();
    config.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("checkpoint config: ") + e.what());
  }
  ToyModel model = init_model(config);
  visit_params(model.params, [&](const std::string& name, Eigen::MatrixXd& m) {
    const auto& t = bundle.get(name);
    if (t.shape.size() != 2 || t.shape[0] != m.rows() || t.shape[1] != m.cols()) {
      throw Error(ErrorKind::Format, "checkpoint tensor '" + name + "' has the wrong shape");
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const float v = t.values[static_cast<std::size_t>(i * m.cols() + j)];
        if (!std::isfinite(v)) throw Error(ErrorKind::Format, "checkpoint tensor '" + name + "' is not finite");
        m(i, j) = v;
      }
    }
  });
  return model;
}

void save_model(const ToyModel& model, const std::filesystem::path& path) { write_bundle(to_bundle(model), path); }

ToyModel load_model(const std::filesystem::path& path) { return from_bundle(read_bundle(path)); }

}  // namespace rsdyn
