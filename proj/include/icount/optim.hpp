#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "icount/tensor.hpp"

namespace icount {

struct AdamOptions {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

template <typename T>
struct NamedParameter {
  std::string path;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

/// Adam with bias correction. Weight decay is added to the gradient as an
/// L2 term (decay * theta) before the moment updates.
template <typename T>
class Adam {
 public:
  explicit Adam(ParameterList<T> params, AdamOptions options = {})
      : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      if (p.tensor.frozen()) throw GraphError("optimizer given frozen parameter " + p.path);
      first_.emplace_back(p.tensor.numel(), T(0));
      second_.emplace_back(p.tensor.numel(), T(0));
    }
  }

  void step() {
    for (const auto& p : params_) {
      if (p.tensor.frozen()) throw GraphError("optimizer step on frozen parameter " + p.path);
      if (!p.tensor.has_grad()) throw GraphError("parameter " + p.path + " has no gradient");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const T lr = static_cast<T>(options_.learning_rate);
    const T b1 = static_cast<T>(options_.beta1);
    const T b2 = static_cast<T>(options_.beta2);
    const T eps = static_cast<T>(options_.epsilon);
    const T decay = static_cast<T>(options_.weight_decay);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T> theta = params_[k].tensor;
      auto values = theta.data();
      auto grads = theta.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T g = grads[i] + decay * values[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const T m_hat = m[i] / static_cast<T>(bc1);
        const T v_hat = v[i] / static_cast<T>(bc2);
        values[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::uint64_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  const ParameterList<T>& parameters() const { return params_; }

 private:
  ParameterList<T> params_;
  AdamOptions options_;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
  std::uint64_t steps_ = 0;
};

}  // namespace icount
