#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "rsdyn/activation_store.hpp"

namespace rsdyn {

/// Per-transition summary: mean and sd over samples of a per-sample
/// statistic, plus the same statistic evaluated on batch-mean vectors.
struct LayerSeries {
  std::vector<double> mean;
  std::vector<double> sd;
  std::vector<double> batch_mean_value;
  std::vector<Transition> kind;
  std::vector<std::size_t> flagged;  // samples excluded per transition (e.g. zero-norm vectors)

  std::size_t size() const { return mean.size(); }
};

/// r(u, s) is the correlation of unit u between sublayers s and s+1.
/// Entries whose inputs have zero variance are undefined; their value is NaN
/// and defined(u, s) is false.
struct UnitCorrelationMatrix {
  Eigen::MatrixXd r;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> defined;

  std::size_t undefined_count() const;
};

enum class HistogramMode { Consecutive, AllPairs };

struct CorrelationHistogram {
  Eigen::MatrixXd counts;  // D x n_bins, negatives clamped into bin 0
  Eigen::MatrixXd density;  // counts / (pairs per unit * bin width)
  std::vector<std::size_t> underflow;  // negative correlations per unit
  std::vector<std::size_t> undefined;  // undefined correlations per unit
  std::size_t pairs_per_unit = 0;
};

/// S x D matrix of per-unit means over samples.
Eigen::MatrixXd mean_activations(const RSTensor& rs);

/// Ascending order of the last row; ties keep unit order.
std::vector<std::size_t> sort_units_by_last_layer(const Eigen::MatrixXd& means);

/// Pearson correlation, two-pass; returns NaN when either input is constant.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

UnitCorrelationMatrix layer_pair_correlations(const RSTensor& rs);

CorrelationHistogram correlation_histogram(const RSTensor& rs, HistogramMode mode, std::size_t n_bins);

LayerSeries cosine_similarity_series(const RSTensor& rs);
LayerSeries velocity_series(const RSTensor& rs);

// CSV exports, numbers at 17 significant digits.
void write_means_csv(const Eigen::MatrixXd& means, const std::vector<std::size_t>& order,
                     const std::filesystem::path& path);
void write_correlations_csv(const UnitCorrelationMatrix& corr, const std::filesystem::path& path);
void write_histogram_csv(const CorrelationHistogram& hist, const std::filesystem::path& path);
void write_series_csv(const LayerSeries& series, const std::filesystem::path& path);

}  // namespace rsdyn
