#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "icount/ops.hpp"
#include "icount/optim.hpp"
#include "icount/random.hpp"
#include "icount/tensor.hpp"

namespace icount {

enum class MethodKind { FT, LWF, FD, EWC, MAS, DMD_NO_ADAPT, DMD };

inline std::string to_string(MethodKind kind) {
  switch (kind) {
    case MethodKind::FT: return "FT";
    case MethodKind::LWF: return "LWF";
    case MethodKind::FD: return "FD";
    case MethodKind::EWC: return "EWC";
    case MethodKind::MAS: return "MAS";
    case MethodKind::DMD_NO_ADAPT: return "DMD_NO_ADAPT";
    case MethodKind::DMD: return "DMD";
  }
  return "?";
}

inline MethodKind parse_method(const std::string& name) {
  for (auto kind : {MethodKind::FT, MethodKind::LWF, MethodKind::FD, MethodKind::EWC,
                    MethodKind::MAS, MethodKind::DMD_NO_ADAPT, MethodKind::DMD}) {
    if (to_string(kind) == name) return kind;
  }
  throw std::invalid_argument("unknown method '" + name +
                              "' (expected FT, LWF, FD, EWC, MAS, DMD_NO_ADAPT or DMD)");
}

inline bool uses_adaptors(MethodKind kind) { return kind == MethodKind::DMD; }

/// Channel layout of the extractor and counter heads.
struct NetworkConfig {
  std::size_t stride = 8;
  std::vector<std::size_t> extractor_channels{32, 32, 64, 64};
  std::vector<std::size_t> head_channels{256, 128};
  bool adaptor_bias = true;

  std::size_t feature_channels() const { return extractor_channels.back(); }
  std::size_t downsamplings() const {
    std::size_t n = 0;
    for (std::size_t s = stride; s > 1; s >>= 1) ++n;
    return n;
  }

  void validate() const {
    if (stride == 0 || (stride & (stride - 1)) != 0) {
      throw std::invalid_argument("network stride must be a power of two, got " +
                                  std::to_string(stride));
    }
    if (extractor_channels.empty()) throw std::invalid_argument("extractor needs at least one block");
    if (downsamplings() > extractor_channels.size()) {
      throw std::invalid_argument("stride " + std::to_string(stride) + " needs at least " +
                                  std::to_string(downsamplings()) + " extractor blocks");
    }
    for (auto c : extractor_channels) {
      if (c == 0) throw std::invalid_argument("extractor channel widths must be positive");
    }
    for (auto c : head_channels) {
      if (c == 0) throw std::invalid_argument("head channel widths must be positive");
    }
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// Moves 3x3 layers between the extractor tail and the head front so the
/// head has `depth` hidden layers while the total layer count stays fixed.
inline NetworkConfig with_head_depth(NetworkConfig cfg, std::size_t depth) {
  while (cfg.head_channels.size() < depth) {
    if (cfg.extractor_channels.size() <= std::max<std::size_t>(1, cfg.downsamplings())) {
      throw std::invalid_argument("extractor too shallow to move a block into the head");
    }
    cfg.head_channels.insert(cfg.head_channels.begin(), cfg.extractor_channels.back());
    cfg.extractor_channels.pop_back();
  }
  while (cfg.head_channels.size() > depth) {
    cfg.extractor_channels.push_back(cfg.head_channels.front());
    cfg.head_channels.erase(cfg.head_channels.begin());
  }
  return cfg;
}

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, bool with_bias)
      : kernel_(Shape{out, in, k, k}, T(0), true), stride_(stride), pad_(k / 2) {
    if (with_bias) bias_ = Tensor<T>(Shape{out}, T(0), true);
  }

  /// He-uniform kernel, zero bias.
  void init_he(Rng& rng) {
    const double fan_in = static_cast<double>(kernel_.dim(1) * kernel_.dim(2) * kernel_.dim(3));
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& w : kernel_.data()) w = static_cast<T>(rng.uniform(-bound, bound));
    if (bias_) std::fill(bias_->data().begin(), bias_->data().end(), T(0));
  }

  /// 1x1 identity over channels (requires in == out).
  void init_identity() {
    const std::size_t c = kernel_.dim(0);
    if (kernel_.dim(1) != c || kernel_.dim(2) != 1) {
      throw ShapeError("identity init needs a square 1x1 kernel, got " + shape_str(kernel_.shape()));
    }
    std::fill(kernel_.data().begin(), kernel_.data().end(), T(0));
    for (std::size_t i = 0; i < c; ++i) kernel_.data()[i * c + i] = T(1);
    if (bias_) std::fill(bias_->data().begin(), bias_->data().end(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, kernel_, bias_, stride_, pad_); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + "/kernel", kernel_});
    if (bias_) out.push_back({prefix + "/bias", *bias_});
  }

  Conv2dLayer clone() const {
    Conv2dLayer copy;
    copy.kernel_ = kernel_.clone();
    if (bias_) copy.bias_ = bias_->clone();
    copy.stride_ = stride_;
    copy.pad_ = pad_;
    return copy;
  }

  void freeze() {
    kernel_.freeze();
    if (bias_) bias_->freeze();
  }

  Tensor<T>& kernel() { return kernel_; }
  const Tensor<T>& kernel() const { return kernel_; }
  std::optional<Tensor<T>>& bias() { return bias_; }
  const std::optional<Tensor<T>>& bias() const { return bias_; }
  std::size_t in_channels() const { return kernel_.dim(1); }
  std::size_t out_channels() const { return kernel_.dim(0); }

 private:
  Tensor<T> kernel_;
  std::optional<Tensor<T>> bias_;
  std::size_t stride_ = 1;
  std::size_t pad_ = 0;
};

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

template <typename T>
std::uint64_t checksum(const ParameterList<T>& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& p : params) {
    h = fnv1a(h, p.path.data(), p.path.size());
    h = fnv1a(h, p.tensor.data().data(), p.tensor.numel() * sizeof(T));
  }
  return h;
}

template <typename T>
void freeze_all(const ParameterList<T>& params) {
  for (auto p : params) p.tensor.freeze();
}

}  // namespace detail

/// Shared trunk f: 3x3 conv + relu blocks; the last log2(stride) blocks
/// downsample by 2.
template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  explicit FeatureExtractor(const NetworkConfig& cfg) : stride_(cfg.stride) {
    cfg.validate();
    const std::size_t n = cfg.extractor_channels.size();
    const std::size_t first_down = n - cfg.downsamplings();
    std::size_t in = 3;
    for (std::size_t i = 0; i < n; ++i) {
      blocks_.emplace_back(in, cfg.extractor_channels[i], 3, i >= first_down ? 2 : 1, true);
      in = cfg.extractor_channels[i];
    }
  }

  void init(Rng& rng) {
    for (auto& b : blocks_) b.init_he(rng);
  }

  /// Input [N,3,H,W]; zero-pads right/bottom to a multiple of the stride.
  Tensor<T> forward(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != 3) {
      throw ShapeError("feature extractor expects [N,3,H,W] images, got " +
                       shape_str(image.shape()));
    }
    Tensor<T> x = pad_to_stride(image);
    for (const auto& b : blocks_) x = relu(b.forward(x));
    return x;
  }

  Tensor<T> pad_to_stride(const Tensor<T>& image) const {
    const std::size_t h = image.dim(2), w = image.dim(3);
    const std::size_t ph = (h + stride_ - 1) / stride_ * stride_;
    const std::size_t pw = (w + stride_ - 1) / stride_ * stride_;
    if (ph == h && pw == w) return image;
    const std::size_t n = image.dim(0), c = image.dim(1);
    Tensor<T> out(Shape{n, c, ph, pw});
    for (std::size_t p = 0; p < n * c; ++p) {
      for (std::size_t y = 0; y < h; ++y) {
        const T* src = image.data().data() + (p * h + y) * w;
        std::copy(src, src + w, out.data().data() + (p * ph + y) * pw);
      }
    }
    return out;
  }

  ParameterList<T> parameters(const std::string& prefix) const {
    ParameterList<T> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect(prefix + "/block" + std::to_string(i + 1) + "/conv", out);
    }
    return out;
  }

  FeatureExtractor clone() const {
    FeatureExtractor copy;
    copy.stride_ = stride_;
    for (const auto& b : blocks_) copy.blocks_.push_back(b.clone());
    return copy;
  }

  void freeze() { detail::freeze_all(parameters("f")); }

  std::size_t stride() const { return stride_; }
  std::size_t out_channels() const { return blocks_.back().out_channels(); }
  std::vector<Conv2dLayer<T>>& blocks() { return blocks_; }
  const std::vector<Conv2dLayer<T>>& blocks() const { return blocks_; }

 private:
  std::vector<Conv2dLayer<T>> blocks_;
  std::size_t stride_ = 8;
};

/// Per-task counter head h: 3x3 conv + relu hidden layers, then a 1x1 conv
/// to one channel followed by relu so density is nonnegative.
template <typename T>
class CounterHead {
 public:
  CounterHead() = default;
  CounterHead(std::size_t feature_channels, const std::vector<std::size_t>& widths) {
    std::size_t in = feature_channels;
    for (auto w : widths) {
      hidden_.emplace_back(in, w, 3, 1, true);
      in = w;
    }
    final_ = Conv2dLayer<T>(in, 1, 1, 1, true);
  }

  void init(Rng& rng, T output_bias = T(0)) {
    for (auto& l : hidden_) l.init_he(rng);
    final_.init_he(rng);
    if (final_.bias()) final_.bias()->data()[0] = output_bias;
  }

  Tensor<T> forward(const Tensor<T>& features) const {
    const std::size_t expected = hidden_.empty() ? final_.in_channels() : hidden_.front().in_channels();
    if (features.rank() != 4 || features.dim(1) != expected) {
      throw ShapeError("counter head expects " + std::to_string(expected) +
                       "-channel features, got " + shape_str(features.shape()));
    }
    Tensor<T> x = features;
    for (const auto& l : hidden_) x = relu(l.forward(x));
    return relu(final_.forward(x));
  }

  ParameterList<T> parameters(const std::string& prefix) const {
    ParameterList<T> out;
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
      hidden_[i].collect(prefix + "/hidden" + std::to_string(i + 1), out);
    }
    final_.collect(prefix + "/final", out);
    return out;
  }

  CounterHead clone() const {
    CounterHead copy;
    for (const auto& l : hidden_) copy.hidden_.push_back(l.clone());
    copy.final_ = final_.clone();
    return copy;
  }

  /// Idempotent.
  void freeze() {
    if (frozen_) return;
    detail::freeze_all(parameters("h"));
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }

  std::uint64_t checksum() const { return detail::checksum(parameters("h")); }

  std::vector<Conv2dLayer<T>>& hidden() { return hidden_; }
  Conv2dLayer<T>& final_layer() { return final_; }

 private:
  std::vector<Conv2dLayer<T>> hidden_;
  Conv2dLayer<T> final_;
  bool frozen_ = false;
};

/// Cross-task adaptor: 1x1 conv d -> d, identity-initialized.
template <typename T>
class Adaptor {
 public:
  Adaptor() = default;
  Adaptor(std::size_t channels, bool with_bias) : conv_(channels, channels, 1, 1, with_bias) {
    conv_.init_identity();
  }

  Tensor<T> forward(const Tensor<T>& features) const {
    if (features.rank() != 4 || features.dim(1) != conv_.in_channels()) {
      throw ShapeError("adaptor expects " + std::to_string(conv_.in_channels()) +
                       "-channel features, got " + shape_str(features.shape()));
    }
    return conv_.forward(features);
  }

  ParameterList<T> parameters(const std::string& prefix) const {
    ParameterList<T> out;
    conv_.collect(prefix, out);
    return out;
  }

  Adaptor clone() const {
    Adaptor copy;
    copy.conv_ = conv_.clone();
    return copy;
  }

  void freeze() {
    if (frozen_) return;
    conv_.freeze();
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }

  Conv2dLayer<T>& conv() { return conv_; }
  const Conv2dLayer<T>& conv() const { return conv_; }

 private:
  Conv2dLayer<T> conv_;
  bool frozen_ = false;
};

/// Weight-importance entry for EWC/MAS: importance and anchor per parameter.
struct ImportanceEntry {
  std::vector<double> omega;
  std::vector<double> anchor;
};

/// Continual-learning state after some prefix of the task sequence.
template <typename T>
struct ModelState {
  NetworkConfig network;
  MethodKind method = MethodKind::FT;
  FeatureExtractor<T> current;
  std::optional<FeatureExtractor<T>> previous;
  std::vector<CounterHead<T>> heads;          // h^1..h^t, index tau-1
  std::vector<std::uint64_t> head_checksums;  // recorded at freeze time
  std::vector<CounterHead<T>> lwf_heads;      // live copies h_t^tau under LWF
  std::vector<Adaptor<T>> adaptors;           // phi_1..phi_{t-1}, index tau-1
  std::vector<std::string> tasks;             // completed task classes
  std::map<std::string, ImportanceEntry> importance;

  std::size_t completed_tasks() const { return tasks.size(); }
  std::size_t stored_extractors() const { return 1 + (previous ? 1 : 0); }

  static ModelState create(const NetworkConfig& cfg, MethodKind method, Rng& rng) {
    ModelState s;
    s.network = cfg;
    s.method = method;
    s.current = FeatureExtractor<T>(cfg);
    s.current.init(rng);
    return s;
  }

  /// Head used at inference for task tau (1-based).
  const CounterHead<T>& inference_head(std::size_t tau) const {
    if (method == MethodKind::LWF && tau <= lwf_heads.size()) return lwf_heads[tau - 1];
    return heads.at(tau - 1);
  }
};

template <typename T>
Tensor<T> extract_features(const Tensor<T>& image, const FeatureExtractor<T>& f) {
  return f.forward(image);
}

template <typename T>
Tensor<T> predict_density(const Tensor<T>& features, const CounterHead<T>& h) {
  return h.forward(features);
}

/// Predicted count: the sum over the density grid.
template <typename T>
Tensor<T> count(const Tensor<T>& density) {
  return sum(density);
}

/// Per-image counts of a [N,1,h,w] density batch.
template <typename T>
std::vector<double> counts_per_image(const Tensor<T>& density) {
  const std::size_t n = density.dim(0);
  const std::size_t per = density.numel() / n;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < per; ++k) acc += static_cast<double>(density.data()[i * per + k]);
    out[i] = acc;
  }
  return out;
}

/// Applies the adaptors newest-first: phi_{t-1}, then phi_{t-2}, ..., ending
/// with the first element of `chain`.
template <typename T>
Tensor<T> adapt_chain(const Tensor<T>& features, std::span<const Adaptor<T>> chain) {
  Tensor<T> x = features;
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) x = it->forward(x);
  return x;
}

template <typename T>
struct Inference {
  Tensor<T> density;
  std::vector<double> counts;
};

/// Task-aware inference for task tau (1-based) on the current model.
template <typename T>
Inference<T> infer_task(const Tensor<T>& image, std::size_t tau, const ModelState<T>& state) {
  if (tau == 0 || tau > state.heads.size()) {
    throw std::out_of_range("unknown task index " + std::to_string(tau) + " (have " +
                            std::to_string(state.heads.size()) + " heads)");
  }
  NoGradGuard no_grad;
  Tensor<T> features = extract_features(image, state.current);
  if (uses_adaptors(state.method) && tau <= state.adaptors.size()) {
    std::span<const Adaptor<T>> chain(state.adaptors.data() + (tau - 1),
                                      state.adaptors.size() - (tau - 1));
    features = adapt_chain(features, chain);
  }
  Inference<T> out;
  out.density = predict_density(features, state.inference_head(tau));
  out.counts = counts_per_image(out.density);
  return out;
}

/// Marks head tau immutable and records its checksum.
template <typename T>
void freeze_head(ModelState<T>& state, std::size_t tau) {
  auto& head = state.heads.at(tau - 1);
  if (head.frozen()) return;
  head.freeze();
  if (state.head_checksums.size() < tau) state.head_checksums.resize(tau, 0);
  state.head_checksums[tau - 1] = head.checksum();
}

/// Stores a frozen deep copy of the current extractor, discarding any older one.
template <typename T>
void snapshot_extractor(ModelState<T>& state) {
  state.previous = state.current.clone();
  state.previous->freeze();
}

/// Throws if any frozen head no longer matches its recorded checksum.
template <typename T>
void verify_frozen_heads(const ModelState<T>& state) {
  for (std::size_t i = 0; i < state.head_checksums.size(); ++i) {
    if (state.heads.at(i).checksum() != state.head_checksums[i]) {
      throw std::logic_error("frozen head " + std::to_string(i + 1) + " was modified");
    }
  }
}

}  // namespace icount
