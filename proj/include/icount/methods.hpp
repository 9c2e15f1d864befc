#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "icount/data.hpp"
#include "icount/dmcount.hpp"
#include "icount/network.hpp"
#include "icount/ops.hpp"
#include "icount/optim.hpp"
#include "icount/random.hpp"

namespace icount {

struct MethodConfig {
  MethodKind kind = MethodKind::DMD;
  double lambda = 10.0;
  bool squared_l2 = true;
  // Previous importances are multiplied by this before new ones are added.
  double importance_decay = 1.0;
};

struct LossConfig {
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  OTConfig ot;
};

struct TrainSchedule {
  std::size_t epochs = 50;
  std::size_t batch_size = 10;
  AdamOptions optimizer{};
  std::uint64_t seed = 1;
  std::size_t crop = 48;
  double flip_probability = 0.5;
  double head_output_bias = 0.0;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
    if (crop == 0) throw std::invalid_argument("crop size must be positive");
  }
};

/// What a regularizer needs beyond ModelState during task t.
template <typename T>
struct RegularizerState {
  std::vector<CounterHead<T>> lwf_targets;  // frozen h_{t-1}^tau
};

/// One optimizer step's record.
struct StepLog {
  std::size_t task = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double counting = 0.0;
  double ot = 0.0;
  double tv = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::size_t ot_skipped = 0;
};

struct TrainingLog {
  std::vector<StepLog> steps;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Batching

template <typename T>
Tensor<T> make_image_batch(std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("empty batch");
  const std::size_t h = samples[0].image.height, w = samples[0].image.width;
  Tensor<T> x(Shape{samples.size(), 3, h, w});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& img = samples[i].image;
    if (img.height != h || img.width != w) throw ShapeError("batch images differ in size");
    std::transform(img.pixels.begin(), img.pixels.end(), x.data().begin() + static_cast<long>(i * 3 * h * w),
                   [](double v) { return static_cast<T>(v); });
  }
  return x;
}

template <typename T>
Grid density_grid(const Tensor<T>& density, std::size_t index) {
  const std::size_t h = density.dim(2), w = density.dim(3);
  Grid g(h, w);
  const T* src = density.data().data() + index * h * w;
  for (std::size_t k = 0; k < h * w; ++k) g.values[k] = static_cast<double>(src[k]);
  return g;
}

// ---------------------------------------------------------------------------
// Functional regularizers. Each returns the batch sum and is 0 at t = 1.

namespace detail {

template <typename T>
Tensor<T> distance(const Tensor<T>& a, const Tensor<T>& b, bool squared) {
  const auto diff = sub(a, b);
  return squared ? sq_l2_norm(diff) : l2_norm(diff);
}

template <typename T>
Tensor<T> zero_scalar() {
  return Tensor<T>::scalar(T(0));
}

template <typename T>
std::span<const Adaptor<T>> adaptor_span(const ModelState<T>& s, std::size_t first, std::size_t last) {
  // adaptors phi_first..phi_last (1-based, inclusive); empty when first > last
  if (first > last) return {};
  return std::span<const Adaptor<T>>(s.adaptors.data() + (first - 1), last - first + 1);
}

}  // namespace detail

/// sum_tau || h_t^tau(f_t(x)) - h_{t-1}^tau(f_{t-1}(x)) ||
template <typename T>
Tensor<T> reg_lwf(const Tensor<T>& current_features, const Tensor<T>& previous_features,
                  const ModelState<T>& s, const RegularizerState<T>& reg, bool squared = true) {
  const std::size_t prior = reg.lwf_targets.size();
  if (prior == 0) return detail::zero_scalar<T>();
  if (s.lwf_heads.size() < prior) throw TrainingError("LwF head copies missing");
  Tensor<T> total = detail::zero_scalar<T>();
  for (std::size_t tau = 1; tau <= prior; ++tau) {
    Tensor<T> target;
    {
      NoGradGuard no_grad;
      target = reg.lwf_targets[tau - 1].forward(previous_features);
    }
    total = add(total, detail::distance(s.lwf_heads[tau - 1].forward(current_features), target, squared));
  }
  return total;
}

/// (t-1) * || f_t(x) - f_{t-1}(x) ||, one copy of the term per previous task.
template <typename T>
Tensor<T> reg_fd(const Tensor<T>& current_features, const Tensor<T>& previous_features, std::size_t t,
                 bool squared = true) {
  if (t < 2) return detail::zero_scalar<T>();
  auto term = detail::distance(current_features, previous_features, squared);
  return t == 2 ? term : scalar_mul(term, static_cast<T>(t - 1));
}

/// sum_tau || h^tau(f_t(x)) - h^tau(f_{t-1}(x)) || with frozen heads.
template <typename T>
Tensor<T> reg_dmd_no_adapt(const Tensor<T>& current_features, const Tensor<T>& previous_features,
                           const ModelState<T>& s, std::size_t t, bool squared = true) {
  if (t < 2) return detail::zero_scalar<T>();
  Tensor<T> total = detail::zero_scalar<T>();
  for (std::size_t tau = 1; tau < t; ++tau) {
    const auto& head = s.heads.at(tau - 1);
    Tensor<T> target;
    {
      NoGradGuard no_grad;
      target = head.forward(previous_features);
    }
    total = add(total, detail::distance(head.forward(current_features), target, squared));
  }
  return total;
}

/// sum_tau || h^tau(phi_tau..phi_{t-1}(f_t(x))) - h^tau(phi_tau..phi_{t-2}(f_{t-1}(x))) ||
template <typename T>
Tensor<T> reg_dmd(const Tensor<T>& current_features, const Tensor<T>& previous_features,
                  const ModelState<T>& s, std::size_t t, bool squared = true) {
  if (t < 2) return detail::zero_scalar<T>();
  if (s.adaptors.size() < t - 1) throw TrainingError("DMD needs adaptors phi_1..phi_{t-1}");
  Tensor<T> total = detail::zero_scalar<T>();
  for (std::size_t tau = 1; tau < t; ++tau) {
    const auto& head = s.heads.at(tau - 1);
    Tensor<T> target;
    {
      NoGradGuard no_grad;
      target = head.forward(adapt_chain(previous_features, detail::adaptor_span(s, tau, t - 2)));
    }
    const auto adapted = adapt_chain(current_features, detail::adaptor_span(s, tau, t - 1));
    total = add(total, detail::distance(head.forward(adapted), target, squared));
  }
  return total;
}

/// 1/2 sum_i Omega_i (theta_i - theta*_i)^2 over the extractor parameters.
template <typename T>
Tensor<T> reg_weight(const ModelState<T>& s) {
  if (s.importance.empty()) throw TrainingError("weight regularizer has no importances/anchors");
  Tensor<T> total = detail::zero_scalar<T>();
  for (const auto& p : s.current.parameters("f_t")) {
    auto it = s.importance.find(p.path);
    if (it == s.importance.end()) throw TrainingError("missing anchor for " + p.path);
    std::vector<T> omega(it->second.omega.begin(), it->second.omega.end());
    std::vector<T> anchor(it->second.anchor.begin(), it->second.anchor.end());
    const Tensor<T> omega_t(p.tensor.shape(), std::move(omega));
    const Tensor<T> anchor_t(p.tensor.shape(), std::move(anchor));
    const auto diff = sub(p.tensor, anchor_t);
    total = add(total, sum(mul(omega_t, mul(diff, diff))));
  }
  return scalar_mul(total, T(0.5));
}

/// Regularizer of `kind` for task t on one batch (0 for FT and at t = 1).
template <typename T>
Tensor<T> regularizer(MethodKind kind, const Tensor<T>& current_features, const Tensor<T>& previous_features,
                      const ModelState<T>& s, const RegularizerState<T>& reg, std::size_t t, bool squared) {
  if (t < 2) return detail::zero_scalar<T>();
  switch (kind) {
    case MethodKind::FT: return detail::zero_scalar<T>();
    case MethodKind::LWF: return reg_lwf(current_features, previous_features, s, reg, squared);
    case MethodKind::FD: return reg_fd(current_features, previous_features, t, squared);
    case MethodKind::DMD_NO_ADAPT: return reg_dmd_no_adapt(current_features, previous_features, s, t, squared);
    case MethodKind::DMD: return reg_dmd(current_features, previous_features, s, t, squared);
    case MethodKind::EWC:
    case MethodKind::MAS: return reg_weight(s);
  }
  return detail::zero_scalar<T>();
}

// ---------------------------------------------------------------------------
// Importance estimation

/// Mean over samples of transform(d loss_i / d theta) for each parameter.
template <typename T>
std::vector<std::vector<double>> gradient_importance(const ParameterList<T>& params, std::size_t samples,
                                                     const std::function<Tensor<T>(std::size_t)>& loss_of,
                                                     const std::function<double(double)>& transform) {
  if (samples == 0) throw TrainingError("importance estimation on an empty dataset");
  std::vector<std::vector<double>> omega;
  for (const auto& p : params) omega.emplace_back(p.tensor.numel(), 0.0);
  for (std::size_t i = 0; i < samples; ++i) {
    for (auto p : params) p.tensor.zero_grad();
    const auto loss = loss_of(i);
    if (loss.requires_grad()) backward(loss);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto g = params[k].tensor.grad();
      for (std::size_t j = 0; j < g.size(); ++j) omega[k][j] += transform(static_cast<double>(g[j]));
    }
  }
  for (auto p : params) p.tensor.zero_grad();
  for (auto& row : omega)
    for (auto& v : row) v /= static_cast<double>(samples);
  return omega;
}

namespace detail {

template <typename T>
void merge_importance(ModelState<T>& s, const ParameterList<T>& params,
                      const std::vector<std::vector<double>>& omega, double decay) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& entry = s.importance[params[k].path];
    if (entry.omega.size() != omega[k].size()) entry.omega.assign(omega[k].size(), 0.0);
    for (std::size_t j = 0; j < omega[k].size(); ++j) entry.omega[j] = decay * entry.omega[j] + omega[k][j];
    entry.anchor.assign(params[k].tensor.data().begin(), params[k].tensor.data().end());
  }
}

template <typename T>
Tensor<T> training_loss(const Tensor<T>& density, std::span<const Grid> targets, const LossConfig& loss,
                        StepLog* log);

}  // namespace detail

/// EWC: Omega += mean_i (d L_train(x_i) / d theta)^2 for the current task head.
template <typename T>
void accumulate_ewc(ModelState<T>& s, std::span<const Sample> samples, const LossConfig& loss, double decay = 1.0) {
  if (samples.empty()) throw TrainingError("EWC importance on an empty dataset");
  const auto params = s.current.parameters("f_t");
  const auto& head = s.heads.back();
  const std::size_t stride = s.network.stride;
  auto omega = gradient_importance<T>(
      params, samples.size(),
      [&](std::size_t i) {
        const auto x = make_image_batch<T>(samples.subspan(i, 1));
        const auto density = head.forward(s.current.forward(x));
        const Grid gt = bin_points(samples[i].points, samples[i].image.width, samples[i].image.height, stride);
        return detail::training_loss<T>(density, std::span<const Grid>(&gt, 1), loss, nullptr);
      },
      [](double g) { return g * g; });
  detail::merge_importance(s, params, omega, decay);
}

/// MAS: Omega += mean_i | d ||d_hat(x_i)||_2^2 / d theta |.
template <typename T>
void accumulate_mas(ModelState<T>& s, std::span<const Sample> samples, double decay = 1.0) {
  if (samples.empty()) throw TrainingError("MAS importance on an empty dataset");
  const auto params = s.current.parameters("f_t");
  const auto& head = s.heads.back();
  auto omega = gradient_importance<T>(
      params, samples.size(),
      [&](std::size_t i) {
        const auto x = make_image_batch<T>(samples.subspan(i, 1));
        return sq_l2_norm(head.forward(s.current.forward(x)));
      },
      [](double g) { return std::abs(g); });
  detail::merge_importance(s, params, omega, decay);
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

inline const CostMatrix& cached_cost(std::size_t rows, std::size_t cols, bool normalize) {
  thread_local std::map<std::tuple<std::size_t, std::size_t, bool>, CostMatrix> cache;
  auto key = std::make_tuple(rows, cols, normalize);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, grid_cost(rows, cols, normalize)).first;
  return it->second;
}

/// Batch-mean DM-Count loss as a graph node on `density`. Samples whose OT/TV
/// terms are undefined (zero mass) keep only the counting term.
template <typename T>
Tensor<T> training_loss(const Tensor<T>& density, std::span<const Grid> targets, const LossConfig& loss,
                        StepLog* log) {
  const std::size_t batch = density.dim(0);
  const std::size_t plane = density.dim(2) * density.dim(3);
  const auto& cost = cached_cost(density.dim(2), density.dim(3), loss.ot.normalize_cost);
  std::vector<T> grad(density.numel(), T(0));
  double value = 0.0, counting = 0.0, ot = 0.0, tv = 0.0;
  std::size_t skipped = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const Grid predicted = density_grid(density, b);
    DMCountResult r;
    try {
      r = dmcount_total(targets[b], predicted, loss.lambda1, loss.lambda2, loss.ot, &cost);
    } catch (const DegenerateInput&) {
      r = dmcount_total(targets[b], predicted, 0.0, 0.0, loss.ot, &cost);
      ++skipped;
    }
    value += r.breakdown.total;
    counting += r.breakdown.counting;
    ot += r.breakdown.ot;
    tv += r.breakdown.tv;
    for (std::size_t k = 0; k < plane; ++k) grad[b * plane + k] = static_cast<T>(r.gradient[k] / static_cast<double>(batch));
  }
  const double inv = 1.0 / static_cast<double>(batch);
  if (log) {
    log->counting = counting * inv;
    log->ot = ot * inv;
    log->tv = tv * inv;
    log->ot_skipped = skipped;
  }
  return scalar_with_gradient(density, static_cast<T>(value * inv), std::move(grad));
}

template <typename T>
void make_trainable(const ParameterList<T>& params) {
  for (auto p : params) p.tensor.set_requires_grad(true);
}

template <typename T>
void stop_tracking(const ParameterList<T>& params) {
  for (auto p : params) {
    if (!p.tensor.frozen()) p.tensor.set_requires_grad(false);
  }
}

}  // namespace detail

/// Trains task t (1-based) in place on `state`. At the end the new head is
/// frozen, the extractor snapshotted, and EWC/MAS importances accumulated.
template <typename T>
TrainingLog train_task(std::size_t t, const TaskDataset& dataset, const MethodConfig& method,
                       const TrainSchedule& schedule, const LossConfig& loss, ModelState<T>& state,
                       const std::function<void(const StepLog&)>& on_step = {}) {
  schedule.validate();
  if (t != state.completed_tasks() + 1) {
    throw TrainingError("task " + std::to_string(t) + " out of order: " + std::to_string(state.completed_tasks()) +
                        " tasks completed");
  }
  if (dataset.train.empty()) throw TrainingError("task " + std::to_string(t) + " has an empty training split");
  if (method.kind != state.method) throw TrainingError("method differs from the model state's method");
  verify_frozen_heads(state);

  const std::size_t d = state.network.feature_channels();
  Rng init_rng(derive_seed(schedule.seed, 0x1417, t));
  CounterHead<T> head(d, state.network.head_channels);
  head.init(init_rng, static_cast<T>(schedule.head_output_bias));
  state.heads.push_back(std::move(head));
  if (uses_adaptors(method.kind) && t >= 2) state.adaptors.emplace_back(d, state.network.adaptor_bias);

  RegularizerState<T> reg;
  if (method.kind == MethodKind::LWF && t >= 2) {
    for (const auto& h : state.lwf_heads) {
      reg.lwf_targets.push_back(h.clone());
      reg.lwf_targets.back().freeze();
    }
  }
  if (t >= 2 && !state.previous) throw TrainingError("missing stored previous extractor");

  detail::make_trainable(state.current.parameters("f_t"));
  ParameterList<T> params = state.current.parameters("f_t");
  for (auto& p : state.heads.back().parameters("head/" + std::to_string(t))) params.push_back(p);
  if (uses_adaptors(method.kind) && t >= 2) {
    for (auto& p : state.adaptors.back().parameters("adaptor/" + std::to_string(t - 1))) params.push_back(p);
  }
  if (method.kind == MethodKind::LWF) {
    for (std::size_t tau = 1; tau <= state.lwf_heads.size(); ++tau) {
      auto ps = state.lwf_heads[tau - 1].parameters("lwf_head/" + std::to_string(tau));
      detail::make_trainable(ps);
      params.insert(params.end(), ps.begin(), ps.end());
    }
  }
  Adam<T> optimizer(params, schedule.optimizer);

  const auto& train = dataset.train;
  std::vector<std::size_t> order(train.size());
  TrainingLog log;
  std::size_t step = 0;
  const T lambda = static_cast<T>(method.lambda);
  for (std::size_t epoch = 1; epoch <= schedule.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(schedule.seed, t * 100003 + epoch, 0x5eed));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (std::size_t begin = 0; begin < order.size(); begin += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), begin + schedule.batch_size);
      std::vector<Sample> batch;
      std::vector<Grid> targets;
      for (std::size_t k = begin; k < end; ++k) {
        Rng aug_rng(derive_seed(schedule.seed, t * 100003 + epoch, 0xA000000 + order[k]));
        const auto& src = train[order[k]];
        const std::size_t cw = std::min(schedule.crop, src.image.width);
        const std::size_t ch = std::min(schedule.crop, src.image.height);
        batch.push_back(augment(src, cw, ch, schedule.flip_probability, aug_rng));
        targets.push_back(bin_points(batch.back().points, cw, ch, state.network.stride));
      }
      const auto x = make_image_batch<T>(batch);

      StepLog entry;
      entry.task = t;
      entry.epoch = epoch;
      entry.step = ++step;
      const auto features = state.current.forward(x);
      const auto density = state.heads.back().forward(features);
      const auto train_loss = detail::training_loss<T>(density, targets, loss, &entry);

      Tensor<T> reg_value = detail::zero_scalar<T>();
      if (method.kind != MethodKind::FT && t >= 2) {
        Tensor<T> previous_features;
        if (method.kind != MethodKind::EWC && method.kind != MethodKind::MAS) {
          NoGradGuard no_grad;
          previous_features = state.previous->forward(x);
        }
        reg_value = scalar_mul(
            regularizer(method.kind, features, previous_features, state, reg, t, method.squared_l2),
            static_cast<T>(1.0 / static_cast<double>(batch.size())));
        if (method.kind == MethodKind::EWC || method.kind == MethodKind::MAS) {
          // weight penalties are per step, not per sample
          reg_value = scalar_mul(reg_value, static_cast<T>(batch.size()));
        }
      }
      const auto total = add(train_loss, scalar_mul(reg_value, lambda));
      entry.reg = static_cast<double>(reg_value.item());
      entry.total = static_cast<double>(total.item());
      if (!std::isfinite(entry.total)) {
        throw TrainingError("non-finite loss at task " + std::to_string(t) + " step " + std::to_string(step));
      }
      backward(total);
      optimizer.step();
      optimizer.zero_grad();
      log.steps.push_back(entry);
      if (on_step) on_step(entry);
    }
  }

  freeze_head(state, t);
  if (uses_adaptors(method.kind) && t >= 2) state.adaptors.back().freeze();
  if (method.kind == MethodKind::LWF) {
    for (auto& h : state.lwf_heads) detail::stop_tracking(h.parameters("h"));
    CounterHead<T> copy = state.heads.back().clone();
    detail::stop_tracking(copy.parameters("h"));
    state.lwf_heads.push_back(std::move(copy));
  }
  detail::stop_tracking(state.current.parameters("f_t"));
  snapshot_extractor(state);
  state.tasks.push_back(dataset.class_name);
  if (method.kind == MethodKind::EWC) {
    detail::make_trainable(state.current.parameters("f_t"));
    accumulate_ewc<T>(state, dataset.train, loss, method.importance_decay);
    detail::stop_tracking(state.current.parameters("f_t"));
  } else if (method.kind == MethodKind::MAS) {
    detail::make_trainable(state.current.parameters("f_t"));
    accumulate_mas<T>(state, dataset.train, method.importance_decay);
    detail::stop_tracking(state.current.parameters("f_t"));
  }
  verify_frozen_heads(state);
  return log;
}

}  // namespace icount
