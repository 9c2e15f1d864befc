#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "icount/ops.hpp"
#include "icount/random.hpp"
#include "icount/tensor.hpp"

namespace icount::testing {

using LossFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Random tensor with entries in [lo, hi], optionally kept at least `margin`
/// away from zero so that kinks of relu/abs are not straddled.
inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, double margin = 0.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) {
    do {
      v = rng.uniform(lo, hi);
    } while (std::abs(v) < margin);
  }
  return t;
}

struct GradcheckResult {
  double worst = 0.0;          // largest relative error
  std::size_t checked = 0;     // coordinates with |analytic| >= 1e-8
  std::size_t within = 0;      // of those, how many meet `tolerance`
  double fraction() const { return checked ? static_cast<double>(within) / static_cast<double>(checked) : 1.0; }
};

/// Compares backprop gradients with central finite differences over every
/// element of every input.
inline GradcheckResult gradcheck_detail(std::vector<Tensor<double>> inputs, const LossFn& loss_fn, double h = 1e-6,
                                        double tolerance = 1e-3) {
  GradcheckResult r;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  backward(loss_fn(inputs));
  for (auto& in : inputs) {
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    for (std::size_t k = 0; k < in.numel(); ++k) {
      const double saved = in.data()[k];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard no_grad;
        in.data()[k] = saved + h;
        plus = loss_fn(inputs).item();
        in.data()[k] = saved - h;
        minus = loss_fn(inputs).item();
      }
      in.data()[k] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), 1e-6});
      const double rel = std::abs(analytic[k] - numeric) / denom;
      r.worst = std::max(r.worst, rel);
      if (std::abs(analytic[k]) >= 1e-8) {
        ++r.checked;
        if (rel <= tolerance) ++r.within;
      }
    }
  }
  return r;
}

inline double gradcheck(std::vector<Tensor<double>> inputs, const LossFn& loss_fn, double h = 1e-6) {
  return gradcheck_detail(std::move(inputs), loss_fn, h).worst;
}

/// sum(w * x) with a fixed random w: turns any tensor into a scalar probe
/// whose gradient exercises every output element.
inline Tensor<double> probe(const Tensor<double>& x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, random_tensor(rng, x.shape(), 0.5, 1.5)));
}

}  // namespace icount::testing
