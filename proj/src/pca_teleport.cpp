#include "rsdyn/pca_teleport.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "rsdyn/error.hpp"
#include "rsdyn/format.hpp"
#include "rsdyn/parallel.hpp"

namespace rsdyn {

namespace {

Eigen::MatrixXd tensor_rows(const RSTensor& rs) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rs.samples() * rs.sublayers()), static_cast<Eigen::Index>(rs.units()));
  for (std::size_t b = 0; b < rs.samples(); ++b) {
    for (std::size_t s = 0; s < rs.sublayers(); ++s) {
      const auto row = rs.row(b, s);
      for (std::size_t u = 0; u < rs.units(); ++u) {
        out(static_cast<Eigen::Index>(b * rs.sublayers() + s), static_cast<Eigen::Index>(u)) = row[u];
      }
    }
  }
  return out;
}

Eigen::MatrixXd sample_rows(const RSTensor& rs, std::size_t b) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rs.sublayers()), static_cast<Eigen::Index>(rs.units()));
  for (std::size_t s = 0; s < rs.sublayers(); ++s) {
    const auto row = rs.row(b, s);
    for (std::size_t u = 0; u < rs.units(); ++u) out(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(u)) = row[u];
  }
  return out;
}

void check_width(const PcaModel& model, Eigen::Index cols) {
  if (static_cast<std::size_t>(cols) != model.dim()) {
    throw Error(ErrorKind::DimensionMismatch,
                "rows have width " + std::to_string(cols) + ", PCA dimension is " + std::to_string(model.dim()));
  }
}

void check_components(const PcaModel& model, std::size_t n) {
  if (n < 1 || n > model.dim()) {
    throw Error(ErrorKind::DimensionMismatch,
                "n_components " + std::to_string(n) + " not in [1, " + std::to_string(model.dim()) + "]");
  }
}

std::string json_row(double a, double b) { return "[" + fmt17(a) + "," + fmt17(b) + "]"; }

std::string json_rows(const Eigen::MatrixXd& m) {
  std::string out = "[";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (i > 0) out += ",";
    out += json_row(m(i, 0), m(i, 1));
  }
  return out + "]";
}

}  // namespace

PcaModel fit_pca(const Eigen::MatrixXd& rows) {
  if (rows.rows() < 2) throw Error(ErrorKind::DegenerateData, "PCA needs at least 2 rows");
  if (rows.cols() < 1) throw Error(ErrorKind::DegenerateData, "PCA needs at least 1 column");
  if (!rows.allFinite()) throw Error(ErrorKind::DegenerateData, "non-finite values in PCA input");

  PcaModel model;
  model.mean = rows.colwise().mean();
  const Eigen::MatrixXd centered = rows.rowwise() - model.mean;
  if (centered.cwiseAbs().maxCoeff() == 0.0) throw Error(ErrorKind::DegenerateData, "all rows are identical");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeFullV);
  const Eigen::Index d = rows.cols();
  model.components = svd.matrixV();
  model.singular_values = Eigen::VectorXd::Zero(d);
  model.singular_values.head(svd.singularValues().size()) = svd.singularValues();

  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::Index arg = 0;
    model.components.col(k).cwiseAbs().maxCoeff(&arg);
    if (model.components(arg, k) < 0.0) model.components.col(k) *= -1.0;
  }
  return model;
}

PcaModel fit_pca(const RSTensor& rs) { return fit_pca(tensor_rows(rs)); }

std::vector<double> explained_variance_ratio(const PcaModel& model) {
  const double total = model.singular_values.squaredNorm();
  std::vector<double> out(model.dim());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double s = model.singular_values(static_cast<Eigen::Index>(k));
    out[k] = s * s / total;
  }
  return out;
}

Eigen::MatrixXd project(const PcaModel& model, const Eigen::MatrixXd& rows, std::size_t n_components) {
  check_width(model, rows.cols());
  check_components(model, n_components);
  return (rows.rowwise() - model.mean) * model.components.leftCols(static_cast<Eigen::Index>(n_components));
}

Eigen::MatrixXd inverse_project(const PcaModel& model, const Eigen::MatrixXd& z) {
  check_components(model, static_cast<std::size_t>(z.cols()));
  Eigen::MatrixXd x = z * model.components.leftCols(z.cols()).transpose();
  return x.rowwise() + model.mean;
}

EvCurves explained_variance_curves(const PcaModel& model, const RSTensor& rs, std::size_t n_components) {
  check_width(model, static_cast<Eigen::Index>(rs.units()));
  check_components(model, n_components);
  EvCurves out;
  out.n_components = n_components;
  double running = 0.0;
  for (const double r : explained_variance_ratio(model)) {
    running += r;
    out.cumulative.push_back(running);
  }

  const Eigen::MatrixXd rows = tensor_rows(rs);
  const Eigen::MatrixXd centered = rows.rowwise() - model.mean;
  const Eigen::MatrixXd recon = inverse_project(model, project(model, rows, n_components)).rowwise() - model.mean;
  std::vector<double> residual(rs.sublayers(), 0.0), total(rs.sublayers(), 0.0);
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const auto s = static_cast<std::size_t>(r) % rs.sublayers();
    residual[s] += (centered.row(r) - recon.row(r)).squaredNorm();
    total[s] += centered.row(r).squaredNorm();
  }
  for (std::size_t s = 0; s < rs.sublayers(); ++s) {
    out.per_sublayer.push_back(total[s] > 0.0 ? 1.0 - residual[s] / total[s]
                                              : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

TeleportGrid make_grid(std::size_t n, std::pair<double, double> range_x, std::pair<double, double> range_y) {
  if (n < 2) throw Error(ErrorKind::BadRange, "grid needs at least 2 points per axis");
  for (const auto& [lo, hi] : {range_x, range_y}) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi)) {
      throw Error(ErrorKind::BadRange, "range [" + fmt17(lo) + ", " + fmt17(hi) + "] is empty or not finite");
    }
  }
  auto axis = [n](std::pair<double, double> r) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = r.first + (r.second - r.first) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    v.back() = r.second;
    return v;
  };
  const auto xs = axis(range_x);
  const auto ys = axis(range_y);
  TeleportGrid grid;
  grid.n = n;
  grid.range_x = range_x;
  grid.range_y = range_y;
  grid.points.resize(static_cast<Eigen::Index>(n * n), 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      grid.points(static_cast<Eigen::Index>(i * n + j), 0) = xs[i];
      grid.points(static_cast<Eigen::Index>(i * n + j), 1) = ys[j];
    }
  }
  return grid;
}

TeleportGrid default_grid(const PcaModel& model, const RSTensor& rs, std::size_t n) {
  const Eigen::MatrixXd z = project(model, tensor_rows(rs), std::min<std::size_t>(2, model.dim()));
  if (z.cols() < 2) throw Error(ErrorKind::BadRange, "need at least 2 components for a teleport grid");
  auto widen = [](double lo, double hi) {
    const double pad = 0.1 * (hi - lo);
    return std::pair{lo - pad, hi + pad};
  };
  return make_grid(n, widen(z.col(0).minCoeff(), z.col(0).maxCoeff()), widen(z.col(1).minCoeff(), z.col(1).maxCoeff()));
}

TeleportResult teleport_experiment(const ToyModel& model, const PcaModel& pca, const TokenSequence& prompt, int layer,
                                   const TeleportGrid& grid, MseSpace space) {
  if (layer < 0 || layer >= model.config.n_layers) {
    throw Error(ErrorKind::LayerOutOfRange,
                "layer " + std::to_string(layer) + " not in [0, " + std::to_string(model.config.n_layers) + ")");
  }
  if (pca.dim() != static_cast<std::size_t>(model.config.d_model)) {
    throw Error(ErrorKind::DimensionMismatch, "PCA dimension " + std::to_string(pca.dim()) + " differs from model width " +
                                                  std::to_string(model.config.d_model));
  }
  if (grid.points.cols() != 2) throw Error(ErrorKind::DimensionMismatch, "grid points must be 2-D");

  const RSTensor control_rs = forward_capture(model, prompt).activations;
  const Eigen::MatrixXd control_full = sample_rows(control_rs, 0);
  const std::size_t s_count = control_rs.sublayers();
  const std::size_t s0 = 2 * static_cast<std::size_t>(layer);

  TeleportResult result;
  result.layer = layer;
  result.injection_sublayer = s0;
  result.mse_space = space;
  result.control = project(pca, control_full, 2);
  result.grid = grid;
  result.runs.resize(static_cast<std::size_t>(grid.points.rows()));

  const std::size_t horizon = std::min(kQuiverHorizon, s_count - 1 - s0);
  parallel_for(result.runs.size(), [&](std::size_t i) {
    TeleportRun& run = result.runs[i];
    run.point = grid.points.row(static_cast<Eigen::Index>(i));
    const Eigen::MatrixXd x = inverse_project(pca, run.point);
    InjectionSpec inj;
    inj.layer = layer;
    inj.hook = HookPoint::PreAttn;
    inj.replacement.assign(x.data(), x.data() + x.size());
    const Eigen::MatrixXd full = sample_rows(forward_inject(model, prompt, inj), 0);
    const Eigen::MatrixXd z = project(pca, full, 2);

    const auto tail = static_cast<Eigen::Index>(s_count - s0);
    run.trajectory = z.bottomRows(tail);
    run.horizon = horizon;
    run.quiver = z.row(static_cast<Eigen::Index>(s0 + horizon)) - run.point;

    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s = s0 + 1; s < s_count; ++s) {
      const auto si = static_cast<Eigen::Index>(s);
      sum += space == MseSpace::Pca2d ? (z.row(si) - result.control.row(si)).squaredNorm()
                                      : (full.row(si) - control_full.row(si)).squaredNorm();
      ++count;
    }
    run.mse = count > 0 ? sum / static_cast<double>(count) : 0.0;
  });
  return result;
}

std::vector<int> default_teleport_layers(int n_layers) {
  std::vector<int> out;
  for (const int l : {0, 7, 15, 23, 31}) {
    const int scaled = n_layers <= 1 ? 0 : static_cast<int>(std::lround(l * (n_layers - 1) / 31.0));
    if (std::find(out.begin(), out.end(), scaled) == out.end()) out.push_back(scaled);
  }
  return out;
}

std::string teleport_json(const TeleportResult& result) {
  std::ostringstream out;
  out << "{\"layer\":" << result.layer << ",\"injection_sublayer\":" << result.injection_sublayer
      << ",\"mse_space\":" << (result.mse_space == MseSpace::Pca2d ? "\"pca2d\"" : "\"full\"")
      << ",\"grid\":{\"n\":" << result.grid.n << ",\"range_x\":" << json_row(result.grid.range_x.first, result.grid.range_x.second)
      << ",\"range_y\":" << json_row(result.grid.range_y.first, result.grid.range_y.second)
      << ",\"points\":" << json_rows(result.grid.points) << "},\"control\":" << json_rows(result.control) << ",\"runs\":[";
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    const auto& run = result.runs[i];
    if (i > 0) out << ",";
    out << "{\"point\":" << json_row(run.point(0), run.point(1)) << ",\"trajectory\":" << json_rows(run.trajectory)
        << ",\"quiver\":" << json_row(run.quiver(0), run.quiver(1)) << ",\"horizon\":" << run.horizon
        << ",\"mse\":" << fmt17(run.mse) << "}";
  }
  out << "]}\n";
  return out.str();
}

void write_teleport_json(const TeleportResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << teleport_json(result);
}

void write_ev_cumulative_csv(const PcaModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "component,ratio,cumulative\n";
  double running = 0.0;
  const auto ratios = explained_variance_ratio(model);
  for (std::size_t k = 0; k < ratios.size(); ++k) {
    running += ratios[k];
    out << k + 1 << ',' << fmt17(ratios[k]) << ',' << fmt17(running) << '\n';
  }
}

void write_ev_sublayer_csv(const EvCurves& curves, const RSTensor& rs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "sublayer,layer,hook,explained_variance\n";
  for (std::size_t s = 0; s < curves.per_sublayer.size(); ++s) {
    const auto& label = rs.labels()[s];
    out << s << ',' << label.layer << ',' << to_string(label.hook) << ',' << fmt17(curves.per_sublayer[s]) << '\n';
  }
}

}  // namespace rsdyn
