#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace icount {

/// Raised when a loss term is undefined for its input (zero total mass).
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Row-major 2-D grid of doubles.
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  Grid(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != r * c) throw std::invalid_argument("grid data does not match extents");
  }

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t size() const { return values.size(); }
  double total() const { return std::accumulate(values.begin(), values.end(), 0.0); }
};

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// Dot-map ground truth: entry (i,j) counts the points whose coordinates fall
/// in the stride x stride bin (i,j) of the zero-padded frame. Coordinates
/// exactly on the far edge of the padded frame land in the last bin.
inline Grid bin_points(std::span<const Point> points, std::size_t width, std::size_t height,
                       std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("bin_points: stride must be positive");
  const std::size_t cols = (width + stride - 1) / stride;
  const std::size_t rows = (height + stride - 1) / stride;
  const double w_pad = static_cast<double>(cols * stride);
  const double h_pad = static_cast<double>(rows * stride);
  Grid grid(rows, cols);
  for (const auto& p : points) {
    if (!(p.x >= 0.0) || !(p.y >= 0.0)) {
      throw std::invalid_argument("bin_points: negative coordinate (" + std::to_string(p.x) + ", " +
                                  std::to_string(p.y) + ")");
    }
    if (p.x > w_pad || p.y > h_pad) {
      throw std::invalid_argument("bin_points: point (" + std::to_string(p.x) + ", " +
                                  std::to_string(p.y) + ") outside the padded frame");
    }
    const auto s = static_cast<double>(stride);
    const std::size_t c = std::min(static_cast<std::size_t>(std::floor(p.x / s)), cols - 1);
    const std::size_t r = std::min(static_cast<std::size_t>(std::floor(p.y / s)), rows - 1);
    grid(r, c) += 1.0;
  }
  return grid;
}

struct OTConfig {
  double epsilon = 0.05;
  int max_iterations = 100;
  double tolerance = 1e-6;
  bool normalize_cost = true;

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("OT epsilon must be positive");
    if (max_iterations < 1) throw std::invalid_argument("OT iterations must be >= 1");
  }
};

/// Dense n x m cost matrix, row-major.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }

  CostMatrix transposed() const {
    CostMatrix t{cols, rows, std::vector<double>(values.size())};
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t.values[j * rows + i] = values[i * cols + j];
    return t;
  }
};

/// Squared Euclidean distance between cell centers of a rows x cols grid,
/// optionally divided by the squared grid diagonal.
inline CostMatrix grid_cost(std::size_t rows, std::size_t cols, bool normalize) {
  const std::size_t n = rows * cols;
  CostMatrix c{n, n, std::vector<double>(n * n)};
  const double diag2 = static_cast<double>((rows - 1) * (rows - 1) + (cols - 1) * (cols - 1));
  const double scale = (normalize && diag2 > 0.0) ? 1.0 / diag2 : 1.0;
  for (std::size_t a = 0; a < n; ++a) {
    const double ra = static_cast<double>(a / cols), ca = static_cast<double>(a % cols);
    for (std::size_t b = 0; b < n; ++b) {
      const double rb = static_cast<double>(b / cols), cb = static_cast<double>(b % cols);
      c.values[a * n + b] = ((ra - rb) * (ra - rb) + (ca - cb) * (ca - cb)) * scale;
    }
  }
  return c;
}

struct SinkhornResult {
  double cost = 0.0;        // <P, C>
  double dual_value = 0.0;  // <a, f> + <b, g>
  std::vector<double> f;    // potential on the source marginal
  std::vector<double> g;    // potential on the target marginal
  std::vector<double> plan; // n x m, row-major
  double marginal_error = 0.0;
  int iterations = 0;
};

namespace detail {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline std::vector<double> safe_log(std::span<const double> w) {
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] > 0.0 ? std::log(w[i]) : kNegInf;
  return out;
}

// -eps * log sum_k exp(logw_k + (pot_k - cost_k) / eps), skipping zero-weight terms.
inline double soft_min(const double* cost, std::size_t cost_step, std::span<const double> logw,
                       std::span<const double> pot, double eps) {
  double peak = kNegInf;
  const std::size_t n = logw.size();
  for (std::size_t k = 0; k < n; ++k) {
    if (logw[k] == kNegInf) continue;
    peak = std::max(peak, logw[k] + (pot[k] - cost[k * cost_step]) / eps);
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (logw[k] == kNegInf) continue;
    acc += std::exp(logw[k] + (pot[k] - cost[k * cost_step]) / eps - peak);
  }
  return -eps * (peak + std::log(acc));
}

inline void check_marginal(std::span<const double> w, const char* name) {
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("sinkhorn: ") + name + " has a negative or non-finite entry");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string("sinkhorn: ") + name + " sums to " +
                                std::to_string(total) + ", expected 1");
  }
}

}  // namespace detail

/// Log-domain Sinkhorn for the entropic problem min <P,C> + eps KL(P | a b^T).
/// Potentials are finite on zero-mass entries, so they can serve as gradients.
inline SinkhornResult sinkhorn_ot(std::span<const double> a, std::span<const double> b,
                                  const CostMatrix& cost, const OTConfig& cfg) {
  cfg.validate();
  detail::check_marginal(a, "source weights");
  detail::check_marginal(b, "target weights");
  if (cost.rows != a.size() || cost.cols != b.size()) {
    throw std::invalid_argument("sinkhorn: cost is " + std::to_string(cost.rows) + "x" +
                                std::to_string(cost.cols) + " for marginals of size " +
                                std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  for (double c : cost.values) {
    if (std::isnan(c)) throw std::invalid_argument("sinkhorn: NaN in cost matrix");
  }
  const std::size_t n = a.size(), m = b.size();
  const double eps = cfg.epsilon;
  const auto log_a = detail::safe_log(a);
  const auto log_b = detail::safe_log(b);

  SinkhornResult r;
  r.f.assign(n, 0.0);
  r.g.assign(m, 0.0);
  auto row_error = [&] {
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      if (log_a[i] != detail::kNegInf) {
        for (std::size_t j = 0; j < m; ++j) {
          if (log_b[j] == detail::kNegInf) continue;
          row += std::exp(log_a[i] + log_b[j] + (r.f[i] + r.g[j] - cost(i, j)) / eps);
        }
      }
      err += std::abs(row - a[i]);
    }
    return err;
  };

  for (int it = 1; it <= cfg.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      r.f[i] = detail::soft_min(cost.values.data() + i * m, 1, log_b, r.g, eps);
    }
    for (std::size_t j = 0; j < m; ++j) {
      r.g[j] = detail::soft_min(cost.values.data() + j, m, log_a, r.f, eps);
    }
    r.iterations = it;
    r.marginal_error = row_error();
    if (r.marginal_error <= cfg.tolerance) break;
  }

  r.plan.assign(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (log_a[i] == detail::kNegInf) continue;
    for (std::size_t j = 0; j < m; ++j) {
      if (log_b[j] == detail::kNegInf) continue;
      const double p = std::exp(log_a[i] + log_b[j] + (r.f[i] + r.g[j] - cost(i, j)) / eps);
      r.plan[i * m + j] = p;
      r.cost += p * cost(i, j);
    }
  }
  for (std::size_t i = 0; i < n; ++i) r.dual_value += a[i] > 0.0 ? a[i] * r.f[i] : 0.0;
  for (std::size_t j = 0; j < m; ++j) r.dual_value += b[j] > 0.0 ? b[j] * r.g[j] : 0.0;
  return r;
}

/// Symmetric potential of OT_eps(a, a), by averaged fixed-point iteration.
inline std::vector<double> symmetric_potential(std::span<const double> a, const CostMatrix& cost,
                                               const OTConfig& cfg) {
  const std::size_t n = a.size();
  const auto log_a = detail::safe_log(a);
  std::vector<double> f(n, 0.0), next(n);
  for (int it = 0; it < cfg.max_iterations; ++it) {
    double change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] = 0.5 * (f[i] + detail::soft_min(cost.values.data() + i * n, 1, log_a, f, cfg.epsilon));
      change = std::max(change, std::abs(next[i] - f[i]));
    }
    f.swap(next);
    if (change <= cfg.tolerance * cfg.epsilon) break;
  }
  return f;
}

struct TermWithGradient {
  double value = 0.0;
  std::vector<double> gradient;  // w.r.t. the predicted map
};

struct OTLoss : TermWithGradient {
  double transport_cost = 0.0;  // <P*, C> between the normalized maps
};

/// Counting term | ||d||_1 - ||d_hat||_1 | and its gradient w.r.t. d_hat
/// (d_hat assumed nonnegative).
inline TermWithGradient counting_loss(const Grid& target, const Grid& predicted) {
  const double diff = predicted.total() - target.total();
  TermWithGradient out;
  out.value = std::abs(diff);
  const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  out.gradient.assign(predicted.size(), s);
  return out;
}

namespace detail {

inline void require_same_grid(const Grid& a, const Grid& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument(std::string(op) + ": grids differ (" + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols) + ")");
  }
}

inline std::vector<double> normalized(const Grid& g, const char* what) {
  const double total = g.total();
  if (!(total > 0.0)) throw DegenerateInput(std::string(what) + " has zero total mass");
  std::vector<double> out(g.values);
  for (auto& v : out) v /= total;
  return out;
}

}  // namespace detail

/// Entropic OT loss between d_hat/||d_hat|| and d/||d||, measured as the
/// debiased Sinkhorn divergence OT(a,b) - OT(a,a)/2 - OT(b,b)/2 so that it is
/// zero when the maps are proportional. The gradient comes from the dual
/// potentials (f_ab - f_aa), centered and chained through the normalization.
inline OTLoss ot_loss_and_grad(const Grid& predicted, const Grid& target, const OTConfig& cfg,
                               const CostMatrix* cost_cache = nullptr) {
  detail::require_same_grid(predicted, target, "ot_loss");
  const auto a = detail::normalized(predicted, "predicted density");
  const auto b = detail::normalized(target, "ground-truth density");
  CostMatrix local;
  if (!cost_cache) local = grid_cost(predicted.rows, predicted.cols, cfg.normalize_cost);
  const CostMatrix& cost = cost_cache ? *cost_cache : local;

  const auto ab = sinkhorn_ot(a, b, cost, cfg);
  const auto f_aa = symmetric_potential(a, cost, cfg);
  const auto f_bb = symmetric_potential(b, cost, cfg);

  double self_a = 0.0, self_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > 0.0) self_a += a[i] * f_aa[i];
    if (b[i] > 0.0) self_b += b[i] * f_bb[i];
  }

  OTLoss out;
  out.value = ab.dual_value - self_a - self_b;
  out.transport_cost = ab.cost;

  std::vector<double> grad_a(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) grad_a[i] = ab.f[i] - f_aa[i];
  const double mean = std::accumulate(grad_a.begin(), grad_a.end(), 0.0) / static_cast<double>(grad_a.size());
  double weighted = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    grad_a[i] -= mean;
    weighted += grad_a[i] * a[i];
  }
  const double mass = predicted.total();
  out.gradient.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.gradient[i] = (grad_a[i] - weighted) / mass;
  return out;
}

/// Total variation 1/2 || d/||d|| - d_hat/||d_hat|| ||_1 and its gradient
/// w.r.t. d_hat (sign subgradient 0 at ties).
inline TermWithGradient tv_loss(const Grid& target, const Grid& predicted) {
  detail::require_same_grid(target, predicted, "tv_loss");
  const auto p = detail::normalized(target, "ground-truth density");
  const auto q = detail::normalized(predicted, "predicted density");
  TermWithGradient out;
  std::vector<double> sign(q.size());
  double weighted = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double diff = q[k] - p[k];
    out.value += 0.5 * std::abs(diff);
    sign[k] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    weighted += sign[k] * q[k];
  }
  const double mass = predicted.total();
  out.gradient.resize(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) out.gradient[k] = 0.5 * (sign[k] - weighted) / mass;
  return out;
}

struct LossBreakdown {
  double counting = 0.0;
  double ot = 0.0;
  double tv = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double total = 0.0;
  bool ot_skipped = false;
};

struct DMCountResult {
  LossBreakdown breakdown;
  std::vector<double> gradient;  // d total / d d_hat
};

/// counting + lambda1 * OT + lambda2 * TV. Degenerate inputs propagate as
/// DegenerateInput unless the terms have zero weight.
inline DMCountResult dmcount_total(const Grid& target, const Grid& predicted, double lambda1,
                                   double lambda2, const OTConfig& cfg,
                                   const CostMatrix* cost_cache = nullptr) {
  detail::require_same_grid(target, predicted, "dmcount_total");
  DMCountResult r;
  r.breakdown.lambda1 = lambda1;
  r.breakdown.lambda2 = lambda2;
  auto count = counting_loss(target, predicted);
  r.breakdown.counting = count.value;
  r.gradient = std::move(count.gradient);
  if (lambda1 != 0.0) {
    const auto ot = ot_loss_and_grad(predicted, target, cfg, cost_cache);
    r.breakdown.ot = ot.value;
    for (std::size_t k = 0; k < r.gradient.size(); ++k) r.gradient[k] += lambda1 * ot.gradient[k];
  }
  if (lambda2 != 0.0) {
    const auto tv = tv_loss(target, predicted);
    r.breakdown.tv = tv.value;
    for (std::size_t k = 0; k < r.gradient.size(); ++k) r.gradient[k] += lambda2 * tv.gradient[k];
  }
  r.breakdown.total = r.breakdown.counting + lambda1 * r.breakdown.ot + lambda2 * r.breakdown.tv;
  return r;
}

}  // namespace icount
