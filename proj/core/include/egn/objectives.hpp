#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "egn/dataset.hpp"
#include "egn/matrix.hpp"
#include "egn/tensor.hpp"

namespace egn {

// Per-gene min/max of log1p(raw) over the fitting rows.
struct NormalizationParams {
  std::vector<double> min;
  std::vector<double> max;
  double eps = 1e-8;
};

/// Fits on the listed rows (all rows when empty). Throws DataError on a
/// negative value in those rows.
NormalizationParams fit_normalization(const Matrix& raw, std::span<const std::size_t> rows = {});
/// (log1p(y) - min) / (max - min + eps). Throws DataError on negative input.
Matrix normalize_targets(const Matrix& raw, const NormalizationParams& params);
Matrix denormalize_targets(const Matrix& normalized, const NormalizationParams& params);

constexpr double kPccEps = 1e-8;

/// Mean over B*M of squared error.
Tensor mse_loss(const Tensor& pred, const Tensor& target);
/// Mean over genes of 1 - pcc_g, pcc_g = cov / sqrt((var_pred + eps)(var_target + eps))
/// across the batch. Throws ContractError when B < 2.
Tensor pcc_loss(const Tensor& pred, const Tensor& target);
Tensor loss_total(const Tensor& pred, const Tensor& target);

struct MetricReport {
  double mse = 0.0;
  double mae = 0.0;
  std::vector<double> pcc;  // NaN for excluded genes
  std::vector<std::size_t> excluded_genes;  // zero-variance targets
  double pcc_at_f = 0.0;
  double pcc_at_s = 0.0;
  double pcc_at_m = 0.0;

  std::string to_json(const std::vector<std::string>& gene_names = {}) const;
  /// One row per gene, then a summary row.
  std::string to_csv(const std::vector<std::string>& gene_names = {}) const;
};

/// Pearson correlation; 0 when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);
/// Linear-interpolation quantile of unsorted values, q in [0,1].
double quantile(std::vector<double> values, double q);

/// Throws ContractError when N < 2 or shapes differ.
MetricReport evaluate(const Matrix& predictions, const Matrix& targets);

struct FoldAssignment {
  std::size_t n_folds = 0;
  std::vector<std::vector<std::uint64_t>> patients;  // per fold
  std::vector<std::size_t> window_fold;              // per bundle window

  std::vector<std::size_t> windows_in(std::size_t fold) const;
  std::vector<std::size_t> windows_outside(std::size_t fold) const;
};

/// Round-robin over patients ordered by descending window count (ties by id).
/// Throws ConfigError when n_folds is 0 or exceeds the patient count.
FoldAssignment make_folds(const DatasetBundle& bundle, std::size_t n_folds);

}  // namespace egn
