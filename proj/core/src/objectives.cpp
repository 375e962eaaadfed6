#include "egn/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "egn/error.hpp"
#include "json.hpp"

namespace egn {

namespace {

void check_nonnegative(const Matrix& raw, std::span<const std::size_t> rows) {
  auto check_row = [&](std::size_t r) {
    for (std::size_t g = 0; g < raw.cols; ++g) {
      if (!(raw(r, g) >= 0.0)) {
        throw DataError("negative or non-finite expression " + std::to_string(raw(r, g)) + " at row " +
                        std::to_string(r) + ", gene " + std::to_string(g));
      }
    }
  };
  if (rows.empty()) {
    for (std::size_t r = 0; r < raw.rows; ++r) check_row(r);
  } else {
    for (std::size_t r : rows) check_row(r);
  }
}

std::string gene_label(const std::vector<std::string>& names, std::size_t g) {
  return g < names.size() ? names[g] : "gene" + std::to_string(g);
}

}  // namespace

NormalizationParams fit_normalization(const Matrix& raw, std::span<const std::size_t> rows) {
  if (raw.rows == 0) throw DataError("cannot fit normalization on an empty table");
  check_nonnegative(raw, rows);
  NormalizationParams p;
  p.min.assign(raw.cols, std::numeric_limits<double>::infinity());
  p.max.assign(raw.cols, -std::numeric_limits<double>::infinity());
  auto visit = [&](std::size_t r) {
    for (std::size_t g = 0; g < raw.cols; ++g) {
      const double v = std::log1p(raw(r, g));
      p.min[g] = std::min(p.min[g], v);
      p.max[g] = std::max(p.max[g], v);
    }
  };
  if (rows.empty()) {
    for (std::size_t r = 0; r < raw.rows; ++r) visit(r);
  } else {
    for (std::size_t r : rows) visit(r);
  }
  return p;
}

Matrix normalize_targets(const Matrix& raw, const NormalizationParams& params) {
  if (params.min.size() != raw.cols) {
    throw DimensionError("normalization params cover " + std::to_string(params.min.size()) + " genes, data has " +
                         std::to_string(raw.cols));
  }
  check_nonnegative(raw, {});
  Matrix out(raw.rows, raw.cols);
  for (std::size_t r = 0; r < raw.rows; ++r) {
    for (std::size_t g = 0; g < raw.cols; ++g) {
      out(r, g) = (std::log1p(raw(r, g)) - params.min[g]) / (params.max[g] - params.min[g] + params.eps);
    }
  }
  return out;
}

Matrix denormalize_targets(const Matrix& normalized, const NormalizationParams& params) {
  if (params.min.size() != normalized.cols) throw DimensionError("normalization params do not match gene count");
  Matrix out(normalized.rows, normalized.cols);
  for (std::size_t r = 0; r < normalized.rows; ++r) {
    for (std::size_t g = 0; g < normalized.cols; ++g) {
      out(r, g) = std::expm1(normalized(r, g) * (params.max[g] - params.min[g] + params.eps) + params.min[g]);
    }
  }
  return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss: shapes " + shape_string(pred.shape()) + " and " + shape_string(target.shape()) +
                         " differ");
  }
  return mean_all(square(sub(pred, target)));
}

Tensor pcc_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.rank() != 2) {
    throw DimensionError("pcc_loss expects two B x M tensors, got " + shape_string(pred.shape()) + " and " +
                         shape_string(target.shape()));
  }
  if (pred.dim(0) < 2) throw ContractError("pcc_loss needs a batch of at least 2 samples");
  const Tensor pc = sub(pred, mean(pred, 0));
  const Tensor tc = sub(target, mean(target, 0));
  const Tensor cov = mean(mul(pc, tc), 0);
  const Tensor denom = sqrt(mul(add_scalar(mean(square(pc), 0), kPccEps), add_scalar(mean(square(tc), 0), kPccEps)));
  return add_scalar(neg(mean_all(div(cov, denom))), 1.0);
}

Tensor loss_total(const Tensor& pred, const Tensor& target) { return add(mse_loss(pred, target), pcc_loss(pred, target)); }

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("pearson: lengths differ");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

MetricReport evaluate(const Matrix& predictions, const Matrix& targets) {
  if (predictions.rows != targets.rows || predictions.cols != targets.cols) {
    throw DimensionError("evaluate: prediction and target tables differ in shape");
  }
  if (targets.rows < 2) throw ContractError("evaluate needs at least 2 windows");
  const std::size_t n = targets.rows, m = targets.cols;
  MetricReport report;
  for (std::size_t i = 0; i < n * m; ++i) {
    const double d = predictions.values[i] - targets.values[i];
    report.mse += d * d;
    report.mae += std::abs(d);
  }
  report.mse /= static_cast<double>(n * m);
  report.mae /= static_cast<double>(n * m);

  std::vector<double> col_p(n), col_t(n), defined;
  for (std::size_t g = 0; g < m; ++g) {
    for (std::size_t i = 0; i < n; ++i) {
      col_p[i] = predictions(i, g);
      col_t[i] = targets(i, g);
    }
    const bool constant = std::all_of(col_t.begin(), col_t.end(), [&](double v) { return v == col_t[0]; });
    if (constant) {
      report.pcc.push_back(std::numeric_limits<double>::quiet_NaN());
      report.excluded_genes.push_back(g);
      continue;
    }
    report.pcc.push_back(pearson(col_p, col_t));
    defined.push_back(report.pcc.back());
  }
  if (defined.empty()) {
    report.pcc_at_f = report.pcc_at_s = report.pcc_at_m = std::numeric_limits<double>::quiet_NaN();
    return report;
  }
  report.pcc_at_f = quantile(defined, 0.25);
  report.pcc_at_s = quantile(defined, 0.5);
  double total = 0.0;
  for (double v : defined) total += v;
  report.pcc_at_m = total / static_cast<double>(defined.size());
  return report;
}

std::string MetricReport::to_json(const std::vector<std::string>& gene_names) const {
  nlohmann::ordered_json j;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  j["mse"] = num(mse);
  j["mae"] = num(mae);
  j["pcc_at_f"] = num(pcc_at_f);
  j["pcc_at_s"] = num(pcc_at_s);
  j["pcc_at_m"] = num(pcc_at_m);
  j["pcc"] = nlohmann::ordered_json::object();
  for (std::size_t g = 0; g < pcc.size(); ++g) j["pcc"][gene_label(gene_names, g)] = num(pcc[g]);
  j["excluded_genes"] = nlohmann::ordered_json::array();
  for (std::size_t g : excluded_genes) j["excluded_genes"].push_back(gene_label(gene_names, g));
  return j.dump(2) + "\n";
}

std::string MetricReport::to_csv(const std::vector<std::string>& gene_names) const {
  std::ostringstream os;
  os.precision(17);
  os << "row,gene,pcc,mse,mae,pcc_at_f,pcc_at_s,pcc_at_m\n";
  for (std::size_t g = 0; g < pcc.size(); ++g) {
    os << "gene," << gene_label(gene_names, g) << ',';
    if (std::isfinite(pcc[g])) os << pcc[g];
    else os << "excluded";
    os << ",,,,,\n";
  }
  os << "summary,,," << mse << ',' << mae << ',' << pcc_at_f << ',' << pcc_at_s << ',' << pcc_at_m << '\n';
  return os.str();
}

std::vector<std::size_t> FoldAssignment::windows_in(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < window_fold.size(); ++i) {
    if (window_fold[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldAssignment::windows_outside(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < window_fold.size(); ++i) {
    if (window_fold[i] != fold) out.push_back(i);
  }
  return out;
}

FoldAssignment make_folds(const DatasetBundle& bundle, std::size_t n_folds) {
  std::map<std::uint64_t, std::size_t> counts;
  for (const auto& w : bundle.windows) ++counts[w.patient_id];
  if (n_folds == 0 || n_folds > counts.size()) {
    throw ConfigError("cannot split " + std::to_string(counts.size()) + " patients into " + std::to_string(n_folds) +
                      " folds");
  }
  std::vector<std::pair<std::uint64_t, std::size_t>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  FoldAssignment f;
  f.n_folds = n_folds;
  f.patients.resize(n_folds);
  std::map<std::uint64_t, std::size_t> fold_of;
  for (std::size_t i = 0; i < order.size(); ++i) {
    f.patients[i % n_folds].push_back(order[i].first);
    fold_of[order[i].first] = i % n_folds;
  }
  for (const auto& w : bundle.windows) f.window_fold.push_back(fold_of.at(w.patient_id));
  return f;
}

}  // namespace egn
