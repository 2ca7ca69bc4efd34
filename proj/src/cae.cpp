#include "rsdyn/cae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rsdyn/error.hpp"
#include "rsdyn/format.hpp"
#include "rsdyn/rng.hpp"

namespace rsdyn {

namespace {

constexpr double kLayerNormEps = 1e-5;

struct LayerCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd xhat;  // normalized pre-activation
  Eigen::VectorXd inv_std;
  Eigen::MatrixXd post_norm;  // before ReLU
};

Eigen::MatrixXd layer_forward(const DenseLayer& layer, const Eigen::MatrixXd& x, LayerCache* cache) {
  Eigen::MatrixXd z = (x * layer.w).rowwise() + layer.b;
  if (cache != nullptr) cache->input = x;
  if (!layer.nonlinear) return z;

  const auto width = static_cast<double>(z.cols());
  const Eigen::VectorXd mean = z.rowwise().sum() / width;
  z.colwise() -= mean;
  const Eigen::VectorXd inv_std = ((z.array().square().rowwise().sum() / width) + kLayerNormEps).rsqrt().matrix();
  Eigen::MatrixXd xhat = inv_std.asDiagonal() * z;
  Eigen::MatrixXd y = (xhat * layer.gain.asDiagonal()).rowwise() + layer.shift;
  if (cache != nullptr) {
    cache->xhat = xhat;
    cache->inv_std = inv_std;
    cache->post_norm = y;
  }
  return y.cwiseMax(0.0);
}

// Returns dL/dx; accumulates parameter gradients into g.
Eigen::MatrixXd layer_backward(const DenseLayer& layer, const LayerCache& cache, Eigen::MatrixXd dout,
                               DenseLayer& g) {
  if (layer.nonlinear) {
    dout = dout.cwiseProduct((cache.post_norm.array() > 0.0).cast<double>().matrix());
    g.gain += (dout.array() * cache.xhat.array()).colwise().sum().matrix();
    g.shift += dout.colwise().sum();
    const Eigen::MatrixXd dxhat = dout * layer.gain.asDiagonal();
    const auto width = static_cast<double>(dout.cols());
    const Eigen::VectorXd mean_d = dxhat.rowwise().sum() / width;
    const Eigen::VectorXd mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().sum() / width;
    Eigen::MatrixXd dz = dxhat;
    dz.colwise() -= mean_d;
    dz -= mean_dx.asDiagonal() * cache.xhat;
    dout = cache.inv_std.asDiagonal() * dz;
  }
  g.w += cache.input.transpose() * dout;
  g.b += dout.colwise().sum();
  return dout * layer.w.transpose();
}

DenseLayer make_layer(std::size_t in, std::size_t out, bool nonlinear, Rng& rng) {
  DenseLayer layer;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  layer.w.resize(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  for (Eigen::Index i = 0; i < layer.w.rows(); ++i) {
    for (Eigen::Index j = 0; j < layer.w.cols(); ++j) layer.w(i, j) = bound * (2.0 * rng.uniform() - 1.0);
  }
  layer.b.resize(static_cast<Eigen::Index>(out));
  for (Eigen::Index j = 0; j < layer.b.size(); ++j) layer.b(j) = bound * (2.0 * rng.uniform() - 1.0);
  layer.nonlinear = nonlinear;
  layer.gain = Eigen::RowVectorXd::Ones(static_cast<Eigen::Index>(out));
  layer.shift = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(out));
  return layer;
}

std::vector<const DenseLayer*> all_layers(const CaeModel& m) {
  std::vector<const DenseLayer*> out;
  for (const auto& l : m.encoder) out.push_back(&l);
  for (const auto& l : m.decoder) out.push_back(&l);
  return out;
}

std::vector<DenseLayer*> all_layers(CaeModel& m) {
  std::vector<DenseLayer*> out;
  for (auto& l : m.encoder) out.push_back(&l);
  for (auto& l : m.decoder) out.push_back(&l);
  return out;
}

CaeModel zeros_like(const CaeModel& m) {
  CaeModel g = m;
  for (auto* l : all_layers(g)) {
    l->w.setZero();
    l->b.setZero();
    l->gain.setZero();
    l->shift.setZero();
  }
  return g;
}

void check_width(const CaeModel& model, const Eigen::MatrixXd& x, std::size_t expected) {
  if (model.encoder.empty()) throw Error(ErrorKind::Config, "model has no layers");
  if (static_cast<std::size_t>(x.cols()) != expected) {
    throw Error(ErrorKind::DimensionMismatch, "input width " + std::to_string(x.cols()) + ", model expects " +
                                                  std::to_string(expected));
  }
}

double sse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).squaredNorm(); }

// Rows of `source` selected by `index`.
Eigen::MatrixXd gather(const Eigen::MatrixXd& source, const std::vector<std::size_t>& index, std::size_t begin,
                       std::size_t end) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(end - begin), source.cols());
  for (std::size_t i = begin; i < end; ++i) out.row(static_cast<Eigen::Index>(i - begin)) = source.row(static_cast<Eigen::Index>(index[i]));
  return out;
}

}  // namespace

std::vector<std::size_t> plan_dims(std::size_t d_in, std::size_t d_bottle, std::size_t k) {
  if (k < 2) throw Error(ErrorKind::Config, "k must be at least 2");
  if (d_bottle < 1 || d_bottle >= d_in) throw Error(ErrorKind::Config, "need 1 <= d_bottle < d_in");
  if (d_in - d_bottle < k - 1) {
    throw Error(ErrorKind::InfeasibleLadder, "cannot fit " + std::to_string(k) + " strictly decreasing widths between " +
                                                 std::to_string(d_in) + " and " + std::to_string(d_bottle));
  }
  const double r = std::pow(static_cast<double>(d_bottle) / static_cast<double>(d_in), 1.0 / static_cast<double>(k - 1));
  std::vector<std::size_t> dims(k);
  dims.front() = d_in;
  dims.back() = d_bottle;
  for (std::size_t i = 1; i + 1 < k; ++i) {
    const auto rounded = static_cast<std::size_t>(std::llround(static_cast<double>(d_in) * std::pow(r, static_cast<double>(i))));
    // Keep room for the remaining widths above d_bottle.
    dims[i] = std::max(std::min(rounded, dims[i - 1] - 1), d_bottle + (k - 1 - i));
  }
  return dims;
}

CaeModel make_cae(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw Error(ErrorKind::Config, "ladder needs at least two widths");
  Rng rng(seed);
  CaeModel model;
  model.dims = dims;
  const std::size_t n = dims.size() - 1;
  for (std::size_t i = 0; i < n; ++i) model.encoder.push_back(make_layer(dims[i], dims[i + 1], i + 1 < n, rng));
  for (std::size_t i = n; i > 0; --i) model.decoder.push_back(make_layer(dims[i], dims[i - 1], i > 1, rng));
  return model;
}

Eigen::MatrixXd encode(const CaeModel& model, const Eigen::MatrixXd& vectors) {
  check_width(model, vectors, model.d_in());
  Eigen::MatrixXd x = vectors;
  for (const auto& layer : model.encoder) x = layer_forward(layer, x, nullptr);
  return x;
}

Eigen::MatrixXd decode(const CaeModel& model, const Eigen::MatrixXd& codes) {
  check_width(model, codes, model.d_bottle());
  Eigen::MatrixXd x = codes;
  for (const auto& layer : model.decoder) x = layer_forward(layer, x, nullptr);
  return x;
}

Eigen::MatrixXd reconstruct(const CaeModel& model, const Eigen::MatrixXd& vectors) {
  return decode(model, encode(model, vectors));
}

double reconstruction_loss(const CaeModel& model, const Eigen::MatrixXd& vectors) {
  if (vectors.rows() == 0) return 0.0;
  return sse(reconstruct(model, vectors), vectors) / static_cast<double>(vectors.rows());
}

double cae_loss_and_grad(const CaeModel& model, const Eigen::MatrixXd& vectors, CaeModel& grad) {
  check_width(model, vectors, model.d_in());
  const auto layers = all_layers(model);
  std::vector<LayerCache> caches(layers.size());
  Eigen::MatrixXd x = vectors;
  for (std::size_t i = 0; i < layers.size(); ++i) x = layer_forward(*layers[i], x, &caches[i]);

  const auto n = static_cast<double>(vectors.rows());
  const double loss = sse(x, vectors) / n;

  grad = zeros_like(model);
  auto grad_layers = all_layers(grad);
  Eigen::MatrixXd dout = 2.0 * (x - vectors) / n;
  for (std::size_t i = layers.size(); i > 0; --i) {
    dout = layer_backward(*layers[i - 1], caches[i - 1], std::move(dout), *grad_layers[i - 1]);
  }
  return loss;
}

double explained_variance(const CaeModel& model, const Eigen::MatrixXd& vectors) {
  const Eigen::RowVectorXd mean = vectors.colwise().mean();
  const double sst = (vectors.rowwise() - mean).squaredNorm();
  return 1.0 - sse(reconstruct(model, vectors), vectors) / sst;
}

bool EarlyStopper::update(double val_loss) {
  ++epoch_;
  if (epoch_ == 1 || val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

std::pair<CaeModel, TrainHistory> train_cae(const CaeConfig& config, const Eigen::MatrixXd& train_set,
                                            const Eigen::MatrixXd& test_set,
                                            const std::optional<Eigen::MatrixXd>& validation) {
  if (train_set.rows() == 0) throw Error(ErrorKind::EmptyInput, "training set is empty");
  if (config.lr <= 0.0 || config.patience < 1 || config.max_epochs < 1 || config.batch_size < 1) {
    throw Error(ErrorKind::Config, "invalid CAE training configuration");
  }
  if (static_cast<std::size_t>(train_set.cols()) != config.d_in) {
    throw Error(ErrorKind::DimensionMismatch, "training vectors have width " + std::to_string(train_set.cols()) +
                                                  ", config d_in is " + std::to_string(config.d_in));
  }
  if (test_set.rows() > 0 && static_cast<std::size_t>(test_set.cols()) != config.d_in) {
    throw Error(ErrorKind::DimensionMismatch, "test vectors have the wrong width");
  }

  Rng rng(config.seed);
  CaeModel model = make_cae(plan_dims(config.d_in, config.d_bottle, config.k_layers), rng.next_u64());

  // Seeded train/validation split.
  std::vector<std::size_t> order(static_cast<std::size_t>(train_set.rows()));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  Eigen::MatrixXd train_rows;
  Eigen::MatrixXd val_rows;
  if (validation) {
    if (static_cast<std::size_t>(validation->cols()) != config.d_in) {
      throw Error(ErrorKind::DimensionMismatch, "validation vectors have the wrong width");
    }
    train_rows = gather(train_set, order, 0, order.size());
    val_rows = *validation;
  } else {
    auto n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(order.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, order.size());
    if (n_val == order.size()) {
      // Too small to split: validate on the training rows.
      train_rows = gather(train_set, order, 0, order.size());
      val_rows = train_rows;
    } else {
      val_rows = gather(train_set, order, 0, n_val);
      train_rows = gather(train_set, order, n_val, order.size());
    }
  }

  CaeModel m1 = zeros_like(model);
  CaeModel m2 = zeros_like(model);
  CaeModel grad;
  TrainHistory history;
  history.beta1 = config.beta1;
  history.beta2 = config.beta2;
  history.adam_eps = config.adam_eps;
  EarlyStopper stopper(config.patience);
  CaeModel best = model;
  long long step = 0;

  std::vector<std::size_t> batch_order(static_cast<std::size_t>(train_rows.rows()));
  std::iota(batch_order.begin(), batch_order.end(), 0);

  auto adam = [&](Eigen::Ref<Eigen::MatrixXd> p, Eigen::Ref<Eigen::MatrixXd> g, Eigen::Ref<Eigen::MatrixXd> m,
                  Eigen::Ref<Eigen::MatrixXd> v, double bc1, double bc2) {
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    p.array() -= config.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.adam_eps);
  };

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(batch_order));
    for (std::size_t start = 0; start < batch_order.size(); start += config.batch_size) {
      const std::size_t end = std::min(batch_order.size(), start + config.batch_size);
      const Eigen::MatrixXd batch = gather(train_rows, batch_order, start, end);
      const double loss = cae_loss_and_grad(model, batch, grad);
      if (!std::isfinite(loss)) {
        throw Error(ErrorKind::NonFiniteLoss, "loss became non-finite at epoch " + std::to_string(epoch) +
                                                  ", batch starting at row " + std::to_string(start));
      }
      ++step;
      const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      auto ps = all_layers(model);
      auto gs = all_layers(grad);
      auto ms = all_layers(m1);
      auto vs = all_layers(m2);
      for (std::size_t i = 0; i < ps.size(); ++i) {
        adam(ps[i]->w, gs[i]->w, ms[i]->w, vs[i]->w, bc1, bc2);
        adam(ps[i]->b, gs[i]->b, ms[i]->b, vs[i]->b, bc1, bc2);
        if (ps[i]->nonlinear) {
          adam(ps[i]->gain, gs[i]->gain, ms[i]->gain, vs[i]->gain, bc1, bc2);
          adam(ps[i]->shift, gs[i]->shift, ms[i]->shift, vs[i]->shift, bc1, bc2);
        }
      }
    }

    const double train_loss = reconstruction_loss(model, train_rows);
    const double val_loss = reconstruction_loss(model, val_rows);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss)) {
      throw Error(ErrorKind::NonFiniteLoss, "epoch " + std::to_string(epoch) + " loss is not finite");
    }
    history.train_loss.push_back(train_loss);
    history.val_loss.push_back(val_loss);
    if (stopper.update(val_loss)) best = model;
    if (stopper.should_stop()) {
      history.stopped_early = epoch < config.max_epochs;
      break;
    }
  }

  history.best_epoch = stopper.best_epoch();
  history.best_val_loss = stopper.best_loss();
  if (test_set.rows() > 0) history.test_loss = reconstruction_loss(best, test_set);
  return {std::move(best), std::move(history)};
}

Eigen::MatrixXd flatten_rows(const RSTensor& rs) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rs.samples() * rs.sublayers()), static_cast<Eigen::Index>(rs.units()));
  for (std::size_t b = 0; b < rs.samples(); ++b) {
    for (std::size_t s = 0; s < rs.sublayers(); ++s) {
      const auto row = rs.row(b, s);
      const auto r = static_cast<Eigen::Index>(b * rs.sublayers() + s);
      for (std::size_t u = 0; u < rs.units(); ++u) out(r, static_cast<Eigen::Index>(u)) = row[u];
    }
  }
  return out;
}

CaeTrajectoryStats trajectory_stats(const CaeModel& model, const RSTensor& rs) {
  if (rs.units() != model.d_in()) {
    throw Error(ErrorKind::DimensionMismatch, "tensor width " + std::to_string(rs.units()) + ", model expects " +
                                                  std::to_string(model.d_in()));
  }
  const std::size_t s_count = rs.sublayers();
  const std::size_t n = rs.samples();
  const Eigen::MatrixXd rows = flatten_rows(rs);
  const Eigen::MatrixXd codes = encode(model, rows);
  const Eigen::MatrixXd recon = decode(model, codes);

  CaeTrajectoryStats out;
  out.mean_trajectory = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(s_count), codes.cols());
  std::vector<double> residual(s_count, 0.0), total(s_count, 0.0);
  Eigen::MatrixXd sub_mean = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(s_count), rows.cols());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t s = 0; s < s_count; ++s) {
      const auto r = static_cast<Eigen::Index>(b * s_count + s);
      out.mean_trajectory.row(static_cast<Eigen::Index>(s)) += codes.row(r);
      sub_mean.row(static_cast<Eigen::Index>(s)) += rows.row(r);
    }
  }
  out.mean_trajectory /= static_cast<double>(n);
  sub_mean /= static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t s = 0; s < s_count; ++s) {
      const auto r = static_cast<Eigen::Index>(b * s_count + s);
      residual[s] += (rows.row(r) - recon.row(r)).squaredNorm();
      total[s] += (rows.row(r) - sub_mean.row(static_cast<Eigen::Index>(s))).squaredNorm();
    }
  }
  for (std::size_t s = 0; s + 1 < s_count; ++s) {
    out.distances.push_back((out.mean_trajectory.row(static_cast<Eigen::Index>(s + 1)) -
                             out.mean_trajectory.row(static_cast<Eigen::Index>(s)))
                                .norm());
  }
  for (std::size_t s = 0; s < s_count; ++s) {
    out.explained_variance.push_back(total[s] > 0.0 ? 1.0 - residual[s] / total[s]
                                                    : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

namespace {

NamedTensor pack(const std::string& name, const Eigen::MatrixXd& m) {
  NamedTensor t;
  t.name = name;
  t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.values.push_back(static_cast<float>(m(i, j)));
  }
  return t;
}

Eigen::MatrixXd unpack(const NamedTensor& t, Eigen::Index rows, Eigen::Index cols) {
  if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
    throw Error(ErrorKind::Format, "checkpoint tensor '" + t.name + "' has the wrong shape");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = t.values[static_cast<std::size_t>(i * cols + j)];
  }
  return m;
}

}  // namespace

TensorBundle to_bundle(const CaeModel& model) {
  TensorBundle bundle;
  bundle.metadata_json = nlohmann::json{{"kind", "cae"}, {"dims", model.dims}}.dump();
  auto add = [&](const std::string& prefix, const std::vector<DenseLayer>& stack) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i) + ".";
      const auto& l = stack[i];
      bundle.tensors.push_back(pack(p + "w", l.w));
      bundle.tensors.push_back(pack(p + "b", l.b));
      if (l.nonlinear) {
        bundle.tensors.push_back(pack(p + "gain", l.gain));
        bundle.tensors.push_back(pack(p + "shift", l.shift));
      }
    }
  };
  add("encoder", model.encoder);
  add("decoder", model.decoder);
  return bundle;
}

CaeModel cae_from_bundle(const TensorBundle& bundle) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bundle.metadata_json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("checkpoint metadata: ") + e.what());
  }
  if (meta.value("kind", "") != "cae" || !meta.contains("dims")) throw Error(ErrorKind::Format, "not a CAE checkpoint");
  CaeModel model = make_cae(meta["dims"].get<std::vector<std::size_t>>(), 0);
  auto load = [&](const std::string& prefix, std::vector<DenseLayer>& stack) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i) + ".";
      auto& l = stack[i];
      l.w = unpack(bundle.get(p + "w"), l.w.rows(), l.w.cols());
      l.b = unpack(bundle.get(p + "b"), 1, l.b.size()).row(0);
      if (l.nonlinear) {
        l.gain = unpack(bundle.get(p + "gain"), 1, l.gain.size()).row(0);
        l.shift = unpack(bundle.get(p + "shift"), 1, l.shift.size()).row(0);
      }
    }
  };
  load("encoder", model.encoder);
  load("decoder", model.decoder);
  return model;
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < history.epochs(); ++e) {
    out << e + 1 << ',' << fmt17(history.train_loss[e]) << ',' << fmt17(history.val_loss[e]) << '\n';
  }
}

void write_cae_trajectory_csv(const CaeTrajectoryStats& stats, const RSTensor& rs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "sublayer,layer,hook";
  for (Eigen::Index c = 0; c < stats.mean_trajectory.cols(); ++c) out << ",code" << c;
  out << ",distance_to_next,explained_variance\n";
  for (Eigen::Index s = 0; s < stats.mean_trajectory.rows(); ++s) {
    const auto& label = rs.labels()[static_cast<std::size_t>(s)];
    out << s << ',' << label.layer << ',' << to_string(label.hook);
    for (Eigen::Index c = 0; c < stats.mean_trajectory.cols(); ++c) out << ',' << fmt17(stats.mean_trajectory(s, c));
    const auto si = static_cast<std::size_t>(s);
    out << ',' << (si < stats.distances.size() ? fmt17(stats.distances[si]) : std::string("")) << ','
        << fmt17(stats.explained_variance[si]) << '\n';
  }
}

}  // namespace rsdyn
