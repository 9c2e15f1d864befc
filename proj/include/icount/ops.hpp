#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "icount/tensor.hpp"

namespace icount {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t out_plane() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// cols is [in_ch*kh*kw, out_h*out_w] for one image.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace detail

/// 2-D cross-correlation over NCHW input with an [out, in, kh, kw] kernel.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const std::optional<Tensor<T>>& bias, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
  if (kernel.rank() != 4) {
    throw ShapeError("conv2d: kernel must be [out,in,kh,kw], got " + shape_str(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_ch = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_ch = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.in_ch) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels, input " + shape_str(input.shape()) + " has " +
                     std::to_string(g.in_ch));
  }
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_ch)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(g.out_ch) + " output channels");
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  const std::size_t patch = g.patch();
  const std::size_t plane = g.out_plane();
  const std::size_t in_image = g.in_ch * g.height * g.width;
  const std::size_t out_image = g.out_ch * plane;

  const bool track = detail::any_requires_grad<T>({&input, &kernel, bias ? &*bias : nullptr});
  Tensor<T> out(Shape{g.batch, g.out_ch, g.out_h, g.out_w});

  // Patch matrices are kept for the kernel gradient when tracking.
  std::vector<T> all_cols;
  std::vector<T> scratch;
  if (!g.pointwise()) {
    if (track && kernel.requires_grad()) {
      all_cols.resize(g.batch * patch * plane);
    } else {
      scratch.resize(patch * plane);
    }
  }

  detail::ConstMapMat<T> K(kernel.data().data(), g.out_ch, patch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* src = input.data().data() + n * in_image;
    const T* cols = src;
    if (!g.pointwise()) {
      T* dst = all_cols.empty() ? scratch.data() : all_cols.data() + n * patch * plane;
      detail::im2col(src, g, dst);
      cols = dst;
    }
    detail::MapMat<T> Y(out.data().data() + n * out_image, g.out_ch, plane);
    Y.noalias() = K * detail::ConstMapMat<T>(cols, patch, plane);
    if (bias) {
      for (std::size_t o = 0; o < g.out_ch; ++o) Y.row(o).array() += bias->data()[o];
    }
  }

  if (track) {
    std::vector<Tensor<T>> inputs{input, kernel};
    if (bias) inputs.push_back(*bias);
    auto saved_cols = std::make_shared<std::vector<T>>(std::move(all_cols));
    Tensor<T> in_ref = input, k_ref = kernel;
    std::optional<Tensor<T>> b_ref = bias;
    detail::record(out, std::move(inputs), [=](std::span<const T> gout) {
      T* g_in = detail::grad_slot(in_ref);
      T* g_k = detail::grad_slot(k_ref);
      T* g_b = b_ref ? detail::grad_slot(*b_ref) : nullptr;
      detail::ConstMapMat<T> Kc(k_ref.data().data(), g.out_ch, patch);
      std::vector<T> dcols(g.pointwise() ? 0 : patch * plane);
      for (std::size_t n = 0; n < g.batch; ++n) {
        detail::ConstMapMat<T> G(gout.data() + n * out_image, g.out_ch, plane);
        if (g_k) {
          const T* cols = g.pointwise() ? in_ref.data().data() + n * in_image
                                        : saved_cols->data() + n * patch * plane;
          detail::MapMat<T>(g_k, g.out_ch, patch).noalias() +=
              G * detail::ConstMapMat<T>(cols, patch, plane).transpose();
        }
        if (g_b) {
          // plain loop: a vectorized sum would depend on buffer alignment
          for (std::size_t o = 0; o < g.out_ch; ++o) {
            const T* row = gout.data() + n * out_image + o * plane;
            T acc = T(0);
            for (std::size_t k = 0; k < plane; ++k) acc += row[k];
            g_b[o] += acc;
          }
        }
        if (g_in) {
          if (g.pointwise()) {
            detail::MapMat<T>(g_in + n * in_image, patch, plane).noalias() += Kc.transpose() * G;
          } else {
            detail::MapMat<T>(dcols.data(), patch, plane).noalias() = Kc.transpose() * G;
            detail::col2im_add(dcols.data(), g, g_in + n * in_image);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::nullopt_t, std::size_t stride,
                 std::size_t padding) {
  return conv2d(input, kernel, std::optional<Tensor<T>>{}, stride, padding);
}

namespace detail {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fwd(src[i]);
  if (any_requires_grad<T>({&x})) {
    Tensor<T> xr = x;
    record(out, {x}, [xr, deriv](std::span<const T> g) {
      T* gx = grad_slot(xr);
      auto xv = xr.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i]);
    });
  }
  return out;
}

}  // namespace detail

/// relu'(0) is taken as 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

/// d|x|/dx at 0 is taken as 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::abs(v); },
      [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T factor) {
  return detail::unary_op(
      x, [factor](T v) { return factor * v; }, [factor](T) { return factor; });
}

namespace detail {

// Binary ops require equal shapes, except a scalar operand which broadcasts.
template <typename T>
struct BinaryLayout {
  Shape shape;
  bool a_scalar = false;
  bool b_scalar = false;
};

template <typename T>
BinaryLayout<T> binary_layout(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), false, false};
  if (a.numel() == 1 && a.rank() == 0) return {b.shape(), true, false};
  if (b.numel() == 1 && b.rank() == 0) return {a.shape(), false, true};
  require_same_shape(a, b, op);
  return {};
}

template <typename T, typename Fwd, typename Back>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Back back) {
  const auto layout = binary_layout(a, b, name);
  Tensor<T> out(layout.shape);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = fwd(av[layout.a_scalar ? 0 : i], bv[layout.b_scalar ? 0 : i]);
  }
  if (any_requires_grad<T>({&a, &b})) {
    Tensor<T> ar = a, br = b;
    record(out, {a, b}, [ar, br, layout, back](std::span<const T> g) {
      T* ga = grad_slot(ar);
      T* gb = grad_slot(br);
      auto av = ar.data();
      auto bv = br.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = layout.a_scalar ? 0 : i;
        const std::size_t ib = layout.b_scalar ? 0 : i;
        const auto [da, db] = back(av[ia], bv[ib]);
        if (ga) ga[ia] += g[i] * da;
        if (gb) gb[ib] += g[i] * db;
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T) { return std::pair<T, T>{T(1), T(1)}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T) { return std::pair<T, T>{T(1), T(-1)}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y) { return std::pair<T, T>{y, x}; });
}

namespace detail {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> reduce_op(const Tensor<T>& x, Fwd term, Deriv deriv) {
  T acc = T(0);
  for (T v : x.data()) acc += term(v);
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (any_requires_grad<T>({&x})) {
    Tensor<T> xr = x;
    record(out, {x}, [xr, deriv](std::span<const T> g) {
      T* gx = grad_slot(xr);
      auto xv = xr.data();
      for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[0] * deriv(xv[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return detail::reduce_op(x, [](T v) { return v; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> l1_norm(const Tensor<T>& x) {
  return detail::reduce_op(
      x, [](T v) { return std::abs(v); },
      [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> sq_l2_norm(const Tensor<T>& x) {
  return detail::reduce_op(x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

/// Unsquared Euclidean norm; the gradient at the origin is taken as zero.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v * v;
  const T norm = std::sqrt(acc);
  Tensor<T> out = Tensor<T>::scalar(norm);
  if (detail::any_requires_grad<T>({&x})) {
    Tensor<T> xr = x;
    detail::record(out, {x}, [xr, norm](std::span<const T> g) {
      if (norm == T(0)) return;
      T* gx = detail::grad_slot(xr);
      auto xv = xr.data();
      for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[0] * xv[i] / norm;
    });
  }
  return out;
}

/// Scalar node with an externally computed value and gradient with respect
/// to `x`. Used for loss terms whose gradients come from an analytic route
/// (e.g. Sinkhorn dual potentials).
template <typename T>
Tensor<T> scalar_with_gradient(const Tensor<T>& x, T value, std::vector<T> gradient) {
  if (gradient.size() != x.numel()) {
    throw ShapeError("scalar_with_gradient: gradient length " + std::to_string(gradient.size()) +
                     " does not match " + shape_str(x.shape()));
  }
  Tensor<T> out = Tensor<T>::scalar(value);
  if (detail::any_requires_grad<T>({&x})) {
    Tensor<T> xr = x;
    detail::record(out, {x}, [xr, grad = std::move(gradient)](std::span<const T> g) {
      T* gx = detail::grad_slot(xr);
      for (std::size_t i = 0; i < grad.size(); ++i) gx[i] += g[0] * grad[i];
    });
  }
  return out;
}

/// Shares no storage; gradient flows back through the reshape.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  if (detail::any_requires_grad<T>({&x})) {
    Tensor<T> xr = x;
    detail::record(out, {x}, [xr](std::span<const T> g) {
      T* gx = detail::grad_slot(xr);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

}  // namespace icount
