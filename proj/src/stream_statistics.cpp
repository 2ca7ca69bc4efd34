#include "rsdyn/stream_statistics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "rsdyn/error.hpp"
#include "rsdyn/format.hpp"
#include "rsdyn/parallel.hpp"

namespace rsdyn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_samples(const RSTensor& rs, std::size_t minimum) {
  if (rs.samples() < minimum) {
    throw Error(ErrorKind::InsufficientSamples, "need at least " + std::to_string(minimum) + " samples, have " +
                                                    std::to_string(rs.samples()));
  }
}

std::vector<double> column(const RSTensor& rs, std::size_t s, std::size_t u) {
  std::vector<double> out(rs.samples());
  for (std::size_t b = 0; b < rs.samples(); ++b) out[b] = rs.at(b, s, u);
  return out;
}

struct MeanSd {
  double mean = kNaN;
  double sd = kNaN;
};

MeanSd mean_sd(const std::vector<double>& values) {
  MeanSd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) {
    out.sd = 0.0;
    return out;
  }
  double ss = 0.0;
  for (const double v : values) ss += (v - out.mean) * (v - out.mean);
  out.sd = std::sqrt(ss / (n - 1.0));
  return out;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

std::size_t UnitCorrelationMatrix::undefined_count() const {
  return static_cast<std::size_t>((!defined.array()).count());
}

Eigen::MatrixXd mean_activations(const RSTensor& rs) {
  require_samples(rs, 1);
  const auto s_count = static_cast<Eigen::Index>(rs.sublayers());
  const auto d = static_cast<Eigen::Index>(rs.units());
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(s_count, d);
  for (std::size_t b = 0; b < rs.samples(); ++b) {
    for (Eigen::Index s = 0; s < s_count; ++s) {
      const auto row = rs.row(b, static_cast<std::size_t>(s));
      for (Eigen::Index u = 0; u < d; ++u) means(s, u) += row[static_cast<std::size_t>(u)];
    }
  }
  return means / static_cast<double>(rs.samples());
}

std::vector<std::size_t> sort_units_by_last_layer(const Eigen::MatrixXd& means) {
  std::vector<std::size_t> order(static_cast<std::size_t>(means.cols()));
  std::iota(order.begin(), order.end(), 0);
  if (means.rows() == 0) return order;
  const auto last = means.row(means.rows() - 1);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return last(static_cast<Eigen::Index>(a)) < last(static_cast<Eigen::Index>(b));
  });
  return order;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) return kNaN;
  const bool x_const = std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); });
  const bool y_const = std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); });
  if (x_const || y_const) return kNaN;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return kNaN;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

UnitCorrelationMatrix layer_pair_correlations(const RSTensor& rs) {
  require_samples(rs, 3);
  const std::size_t d = rs.units();
  const std::size_t transitions = rs.sublayers() - 1;
  UnitCorrelationMatrix out;
  out.r.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(transitions));
  out.defined.resize(out.r.rows(), out.r.cols());
  parallel_for(d, [&](std::size_t u) {
    std::vector<double> prev = column(rs, 0, u);
    for (std::size_t s = 0; s < transitions; ++s) {
      std::vector<double> next = column(rs, s + 1, u);
      const double r = pearson(prev, next);
      const auto ui = static_cast<Eigen::Index>(u);
      const auto si = static_cast<Eigen::Index>(s);
      out.r(ui, si) = r;
      out.defined(ui, si) = !std::isnan(r);
      prev = std::move(next);
    }
  });
  return out;
}

CorrelationHistogram correlation_histogram(const RSTensor& rs, HistogramMode mode, std::size_t n_bins) {
  require_samples(rs, 3);
  if (n_bins < 1) throw Error(ErrorKind::Config, "histogram needs at least one bin");
  const std::size_t d = rs.units();
  const std::size_t s_count = rs.sublayers();

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (mode == HistogramMode::Consecutive) {
    for (std::size_t s = 0; s + 1 < s_count; ++s) pairs.emplace_back(s, s + 1);
  } else {
    for (std::size_t l = 0; l < s_count; ++l) {
      for (std::size_t m = l + 1; m < s_count; ++m) pairs.emplace_back(l, m);
    }
  }

  CorrelationHistogram out;
  out.pairs_per_unit = pairs.size();
  out.counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n_bins));
  out.underflow.assign(d, 0);
  out.undefined.assign(d, 0);
  const double width = 1.0 / static_cast<double>(n_bins);

  parallel_for(d, [&](std::size_t u) {
    std::vector<std::vector<double>> columns(s_count);
    for (std::size_t s = 0; s < s_count; ++s) columns[s] = column(rs, s, u);
    const auto ui = static_cast<Eigen::Index>(u);
    for (const auto& [l, m] : pairs) {
      const double r = pearson(columns[l], columns[m]);
      if (std::isnan(r)) {
        ++out.undefined[u];
        continue;
      }
      std::size_t bin = 0;
      if (r < 0.0) {
        ++out.underflow[u];
      } else {
        bin = std::min(n_bins - 1, static_cast<std::size_t>(r / width));
      }
      out.counts(ui, static_cast<Eigen::Index>(bin)) += 1.0;
    }
  });

  out.density = out.counts / (static_cast<double>(std::max<std::size_t>(1, pairs.size())) * width);
  return out;
}

LayerSeries cosine_similarity_series(const RSTensor& rs) {
  require_samples(rs, 1);
  const std::size_t transitions = rs.sublayers() - 1;
  const std::size_t d = rs.units();
  LayerSeries out;
  out.mean.resize(transitions);
  out.sd.resize(transitions);
  out.batch_mean_value.resize(transitions);
  out.flagged.assign(transitions, 0);
  for (std::size_t s = 0; s < transitions; ++s) out.kind.push_back(rs.transition(s));

  const Eigen::MatrixXd means = mean_activations(rs);
  parallel_for(transitions, [&](std::size_t s) {
    std::vector<double> values;
    values.reserve(rs.samples());
    for (std::size_t b = 0; b < rs.samples(); ++b) {
      const auto a = rs.row(b, s);
      const auto c = rs.row(b, s + 1);
      double dot = 0.0, na = 0.0, nc = 0.0;
      for (std::size_t u = 0; u < d; ++u) {
        dot += static_cast<double>(a[u]) * c[u];
        na += static_cast<double>(a[u]) * a[u];
        nc += static_cast<double>(c[u]) * c[u];
      }
      if (na == 0.0 || nc == 0.0) {
        ++out.flagged[s];
        continue;
      }
      values.push_back(dot / (std::sqrt(na) * std::sqrt(nc)));
    }
    const auto stats = mean_sd(values);
    out.mean[s] = stats.mean;
    out.sd[s] = stats.sd;

    const auto si = static_cast<Eigen::Index>(s);
    const double na = means.row(si).norm();
    const double nc = means.row(si + 1).norm();
    out.batch_mean_value[s] = (na == 0.0 || nc == 0.0) ? kNaN : means.row(si).dot(means.row(si + 1)) / (na * nc);
  });
  return out;
}

LayerSeries velocity_series(const RSTensor& rs) {
  require_samples(rs, 1);
  const std::size_t transitions = rs.sublayers() - 1;
  const std::size_t d = rs.units();
  LayerSeries out;
  out.mean.resize(transitions);
  out.sd.resize(transitions);
  out.batch_mean_value.resize(transitions);
  out.flagged.assign(transitions, 0);
  for (std::size_t s = 0; s < transitions; ++s) out.kind.push_back(rs.transition(s));

  const Eigen::MatrixXd means = mean_activations(rs);
  parallel_for(transitions, [&](std::size_t s) {
    std::vector<double> values(rs.samples());
    for (std::size_t b = 0; b < rs.samples(); ++b) {
      const auto a = rs.row(b, s);
      const auto c = rs.row(b, s + 1);
      double ss = 0.0;
      for (std::size_t u = 0; u < d; ++u) {
        const double diff = static_cast<double>(c[u]) - static_cast<double>(a[u]);
        ss += diff * diff;
      }
      values[b] = std::sqrt(ss);
    }
    const auto stats = mean_sd(values);
    out.mean[s] = stats.mean;
    out.sd[s] = stats.sd;
    const auto si = static_cast<Eigen::Index>(s);
    out.batch_mean_value[s] = (means.row(si + 1) - means.row(si)).norm();
  });
  return out;
}

void write_means_csv(const Eigen::MatrixXd& means, const std::vector<std::size_t>& order,
                     const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "sublayer,rank,unit,mean\n";
  for (Eigen::Index s = 0; s < means.rows(); ++s) {
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      out << s << ',' << rank << ',' << order[rank] << ','
          << fmt17(means(s, static_cast<Eigen::Index>(order[rank]))) << '\n';
    }
  }
}

void write_correlations_csv(const UnitCorrelationMatrix& corr, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "unit,transition,r,defined\n";
  for (Eigen::Index u = 0; u < corr.r.rows(); ++u) {
    for (Eigen::Index s = 0; s < corr.r.cols(); ++s) {
      out << u << ',' << s << ',' << fmt17(corr.r(u, s)) << ',' << (corr.defined(u, s) ? 1 : 0) << '\n';
    }
  }
}

void write_histogram_csv(const CorrelationHistogram& hist, const std::filesystem::path& path) {
  auto out = open_csv(path);
  const auto n_bins = hist.counts.cols();
  out << "unit,bin,bin_lo,bin_hi,count,density,underflow,undefined\n";
  for (Eigen::Index u = 0; u < hist.counts.rows(); ++u) {
    for (Eigen::Index k = 0; k < n_bins; ++k) {
      out << u << ',' << k << ',' << fmt17(static_cast<double>(k) / static_cast<double>(n_bins)) << ','
          << fmt17(static_cast<double>(k + 1) / static_cast<double>(n_bins)) << ',' << fmt17(hist.counts(u, k))
          << ',' << fmt17(hist.density(u, k)) << ',' << hist.underflow[static_cast<std::size_t>(u)] << ','
          << hist.undefined[static_cast<std::size_t>(u)] << '\n';
    }
  }
}

void write_series_csv(const LayerSeries& series, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "transition_index,transition_kind,mean,sd,batch_mean_value,flagged\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    out << s << ',' << to_string(series.kind[s]) << ',' << fmt17(series.mean[s]) << ',' << fmt17(series.sd[s])
        << ',' << fmt17(series.batch_mean_value[s]) << ',' << series.flagged[s] << '\n';
  }
}

}  // namespace rsdyn
