#include "rsdyn/mutual_information.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "rsdyn/error.hpp"
#include "rsdyn/format.hpp"
#include "rsdyn/parallel.hpp"

namespace rsdyn {

namespace {

constexpr std::size_t kMinSamples = 10;
constexpr std::size_t kMinGrid = 16;
// Kernel contributions with squared Mahalanobis distance above this are
// below exp(-40) of the peak and are skipped.
constexpr double kCutoffQ = 80.0;
constexpr double kMaxKernelCorrelation = 1.0 - 1e-6;

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  const double step = (hi - lo) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = lo + step * static_cast<double>(i);
  out.back() = hi;
  return out;
}

}  // namespace

KdeGrid kde_density_2d(std::span<const double> x, std::span<const double> y, std::size_t grid_size) {
  const std::size_t n = x.size();
  if (n != y.size()) throw Error(ErrorKind::DimensionMismatch, "x and y lengths differ");
  if (n < kMinSamples) {
    throw Error(ErrorKind::DegenerateInput, "KDE needs at least 10 samples, have " + std::to_string(n));
  }
  if (grid_size < kMinGrid) throw Error(ErrorKind::Config, "grid_size must be at least 16");
  for (std::size_t b = 0; b < n; ++b) {
    if (!std::isfinite(x[b]) || !std::isfinite(y[b])) throw Error(ErrorKind::DegenerateInput, "non-finite sample");
  }

  const double nd = static_cast<double>(n);
  double mx = 0.0, my = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    mx += x[b];
    my += y[b];
  }
  mx /= nd;
  my /= nd;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    sxx += (x[b] - mx) * (x[b] - mx);
    syy += (y[b] - my) * (y[b] - my);
    sxy += (x[b] - mx) * (y[b] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw Error(ErrorKind::DegenerateInput, "zero variance input");

  const double scott = std::pow(nd, -1.0 / 6.0);
  KdeGrid g;
  g.bandwidth_x = scott * std::sqrt(sxx / (nd - 1.0));
  g.bandwidth_y = scott * std::sqrt(syy / (nd - 1.0));
  g.kernel_correlation = std::clamp(sxy / std::sqrt(sxx * syy), -kMaxKernelCorrelation, kMaxKernelCorrelation);

  const auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
  const auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());
  g.xs = linspace(*xmin - 3.0 * g.bandwidth_x, *xmax + 3.0 * g.bandwidth_x, grid_size);
  g.ys = linspace(*ymin - 3.0 * g.bandwidth_y, *ymax + 3.0 * g.bandwidth_y, grid_size);
  g.dx = (g.xs.back() - g.xs.front()) / static_cast<double>(grid_size - 1);
  g.dy = (g.ys.back() - g.ys.front()) / static_cast<double>(grid_size - 1);

  const double c = g.kernel_correlation;
  const double one_minus_c2 = 1.0 - c * c;
  const double norm = 1.0 / (2.0 * std::numbers::pi * g.bandwidth_x * g.bandwidth_y * std::sqrt(one_minus_c2) * nd);
  const double reach_x = std::sqrt(kCutoffQ) * g.bandwidth_x;
  const double reach_y = std::sqrt(kCutoffQ) * g.bandwidth_y;
  const auto last = static_cast<long>(grid_size) - 1;
  auto index_range = [last](double lo, double hi, double origin, double step) {
    const long a = std::max(0L, static_cast<long>(std::ceil((lo - origin) / step)));
    const long b = std::min(last, static_cast<long>(std::floor((hi - origin) / step)));
    return std::pair{a, b};
  };

  g.joint = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(grid_size), static_cast<Eigen::Index>(grid_size));
  std::vector<double> v(grid_size);
  for (std::size_t b = 0; b < n; ++b) {
    const auto [i0, i1] = index_range(x[b] - reach_x, x[b] + reach_x, g.xs.front(), g.dx);
    const auto [j0, j1] = index_range(y[b] - reach_y, y[b] + reach_y, g.ys.front(), g.dy);
    for (long j = j0; j <= j1; ++j) v[static_cast<std::size_t>(j)] = (g.ys[static_cast<std::size_t>(j)] - y[b]) / g.bandwidth_y;
    for (long i = i0; i <= i1; ++i) {
      const double u = (g.xs[static_cast<std::size_t>(i)] - x[b]) / g.bandwidth_x;
      for (long j = j0; j <= j1; ++j) {
        const double vj = v[static_cast<std::size_t>(j)];
        const double q = (u * u - 2.0 * c * u * vj + vj * vj) / one_minus_c2;
        if (q <= kCutoffQ) g.joint(i, j) += std::exp(-0.5 * q);
      }
    }
  }
  g.joint *= norm;

  g.marginal_x.assign(grid_size, 0.0);
  g.marginal_y.assign(grid_size, 0.0);
  for (std::size_t i = 0; i < grid_size; ++i) {
    for (std::size_t j = 0; j < grid_size; ++j) {
      const double p = g.joint(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      g.marginal_x[i] += p * g.dy;
      g.marginal_y[j] += p * g.dx;
    }
  }
  return g;
}

MIEstimate mutual_information(std::span<const double> x, std::span<const double> y, std::size_t grid_size) {
  const KdeGrid g = kde_density_2d(x, y, grid_size);
  const double cell = g.dx * g.dy;
  const double mass = g.joint.sum() * cell;
  if (!(mass > 0.0)) throw Error(ErrorKind::DegenerateInput, "KDE has no mass on the grid");

  const Eigen::MatrixXd p = g.joint / mass;
  const Eigen::VectorXd px = p.rowwise().sum() * g.dy;
  const Eigen::RowVectorXd py = p.colwise().sum() * g.dx;

  double mi = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      const double pij = p(i, j);
      if (pij == 0.0) continue;
      mi += pij * std::log((pij + kMiEpsilon) / ((px(i) + kMiEpsilon) * (py(j) + kMiEpsilon)));
    }
  }
  MIEstimate est;
  est.value = mi * cell;
  est.bandwidth_x = g.bandwidth_x;
  est.bandwidth_y = g.bandwidth_y;
  est.grid_size = grid_size;
  if (!std::isfinite(est.value)) throw Error(ErrorKind::DegenerateInput, "MI estimate is not finite");
  return est;
}

MIProfile mi_layer_profile(const RSTensor& rs, const std::optional<std::vector<std::size_t>>& unit_subset,
                           std::size_t grid_size) {
  if (rs.samples() < kMinSamples) {
    throw Error(ErrorKind::DegenerateInput,
                "MI profile needs at least 10 samples, have " + std::to_string(rs.samples()));
  }
  if (grid_size < kMinGrid) throw Error(ErrorKind::Config, "grid_size must be at least 16");
  const std::size_t d = rs.units();
  const std::size_t transitions = rs.sublayers() - 1;

  std::vector<std::size_t> units;
  if (unit_subset) {
    units = *unit_subset;
    for (const auto u : units) {
      if (u >= d) throw Error(ErrorKind::UnitOutOfRange, "unit " + std::to_string(u) + " out of range");
    }
  } else {
    units.resize(d);
    for (std::size_t u = 0; u < d; ++u) units[u] = u;
  }

  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  MIProfile out;
  out.grid_size = grid_size;
  const auto rows = static_cast<Eigen::Index>(d);
  const auto cols = static_cast<Eigen::Index>(transitions);
  out.mi = Eigen::MatrixXd::Constant(rows, cols, nan);
  out.bandwidth_x = Eigen::MatrixXd::Constant(rows, cols, nan);
  out.bandwidth_y = Eigen::MatrixXd::Constant(rows, cols, nan);
  out.flag.assign(d, std::vector<std::string>(transitions, "skipped"));

  parallel_for(units.size() * transitions, [&](std::size_t task) {
    const std::size_t u = units[task / transitions];
    const std::size_t s = task % transitions;
    std::vector<double> x(rs.samples()), y(rs.samples());
    for (std::size_t b = 0; b < rs.samples(); ++b) {
      x[b] = rs.at(b, s, u);
      y[b] = rs.at(b, s + 1, u);
    }
    const auto ui = static_cast<Eigen::Index>(u);
    const auto si = static_cast<Eigen::Index>(s);
    try {
      const auto est = mutual_information(x, y, grid_size);
      out.mi(ui, si) = est.value;
      out.bandwidth_x(ui, si) = est.bandwidth_x;
      out.bandwidth_y(ui, si) = est.bandwidth_y;
      out.flag[u][s] = "ok";
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateInput) throw;
      out.flag[u][s] = "degenerate";
    }
  });

  out.mean_per_transition.assign(transitions, nan);
  for (std::size_t s = 0; s < transitions; ++s) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t u = 0; u < d; ++u) {
      if (out.flag[u][s] == "ok") {
        sum += out.mi(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(s));
        ++count;
      }
    }
    if (count > 0) out.mean_per_transition[s] = sum / static_cast<double>(count);
  }
  return out;
}

void write_mi_csv(const MIProfile& profile, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "unit,transition,mi_nats,bandwidth_x,bandwidth_y,flag\n";
  for (Eigen::Index u = 0; u < profile.mi.rows(); ++u) {
    for (Eigen::Index s = 0; s < profile.mi.cols(); ++s) {
      const auto& flag = profile.flag[static_cast<std::size_t>(u)][static_cast<std::size_t>(s)];
      if (flag == "skipped") continue;
      out << u << ',' << s << ',' << fmt17(profile.mi(u, s)) << ',' << fmt17(profile.bandwidth_x(u, s)) << ','
          << fmt17(profile.bandwidth_y(u, s)) << ',' << flag << '\n';
    }
  }
}

}  // namespace rsdyn
