#pragma once

// Ridge-regression probe used as an independent yardstick for learned features.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "egn/matrix.hpp"

namespace egn::testing {

// Mean over target columns of the Pearson correlation between ridge
// predictions and targets on the `test` rows, fitted on the `train` rows.
inline double ridge_probe_pcc(const Matrix& features, const Matrix& targets, const std::vector<std::size_t>& train,
                              const std::vector<std::size_t>& test, double ridge = 1e-1) {
  const std::size_t d = features.cols, m = targets.cols;
  auto design = [&](const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd x(rows.size(), d + 1);
    Eigen::MatrixXd y(rows.size(), m);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < d; ++c) x(r, c) = features(rows[r], c);
      x(r, d) = 1.0;
      for (std::size_t g = 0; g < m; ++g) y(r, g) = targets(rows[r], g);
    }
    return std::pair{x, y};
  };
  const auto [xa, ya] = design(train);
  const auto [xb, yb] = design(test);
  const Eigen::MatrixXd gram = xa.transpose() * xa + ridge * Eigen::MatrixXd::Identity(d + 1, d + 1);
  const Eigen::MatrixXd w = gram.ldlt().solve(xa.transpose() * ya);
  const Eigen::MatrixXd pred = xb * w;
  double total = 0.0;
  for (std::size_t g = 0; g < m; ++g) {
    const Eigen::ArrayXd p = pred.col(g).array() - pred.col(g).mean();
    const Eigen::ArrayXd y = yb.col(g).array() - yb.col(g).mean();
    const double denom = std::sqrt((p * p).sum() * (y * y).sum());
    total += denom > 0.0 ? (p * y).sum() / denom : 0.0;
  }
  return total / static_cast<double>(m);
}

}  // namespace egn::testing
