#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "icount/dmcount.hpp"

namespace icount::testing {

/// Exact optimal transport by exhaustive enumeration of the vertices of the
/// transport polytope: every basic solution uses n + m - 1 cells, so we try
/// each such cell subset, solve the marginal equations on it and keep the
/// cheapest nonnegative solution. Only meant for n, m <= 4.
inline double exact_ot_bruteforce(const std::vector<double>& a, const std::vector<double>& b, const CostMatrix& cost) {
  const std::size_t n = a.size(), m = b.size(), cells = n * m, basis = n + m - 1;
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(n + m));
  for (std::size_t i = 0; i < n; ++i) rhs(static_cast<Eigen::Index>(i)) = a[i];
  for (std::size_t j = 0; j < m; ++j) rhs(static_cast<Eigen::Index>(n + j)) = b[j];

  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> chosen;
  std::function<void(std::size_t)> search = [&](std::size_t start) {
    if (chosen.size() == basis) {
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n + m), static_cast<Eigen::Index>(basis));
      for (std::size_t k = 0; k < basis; ++k) {
        A(static_cast<Eigen::Index>(chosen[k] / m), static_cast<Eigen::Index>(k)) = 1.0;
        A(static_cast<Eigen::Index>(n + chosen[k] % m), static_cast<Eigen::Index>(k)) = 1.0;
      }
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
      if (qr.rank() != static_cast<Eigen::Index>(basis)) return;
      const Eigen::VectorXd x = qr.solve(rhs);
      if ((A * x - rhs).norm() > 1e-10) return;
      double c = 0.0;
      for (std::size_t k = 0; k < basis; ++k) {
        if (x(static_cast<Eigen::Index>(k)) < -1e-12) return;
        c += x(static_cast<Eigen::Index>(k)) * cost.values[chosen[k]];
      }
      best = std::min(best, c);
      return;
    }
    for (std::size_t k = start; k + (basis - chosen.size()) <= cells; ++k) {
      chosen.push_back(k);
      search(k + 1);
      chosen.pop_back();
    }
  };
  search(0);
  return best;
}

inline CostMatrix line_cost(std::size_t n) {
  CostMatrix c{n, n, std::vector<double>(n * n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      c.values[i * n + j] = d * d;
    }
  return c;
}

inline OTConfig converged(double epsilon) {
  OTConfig cfg;
  cfg.epsilon = epsilon;
  cfg.max_iterations = 20000;
  cfg.tolerance = 1e-12;
  return cfg;
}

}  // namespace icount::testing
