#ifndef MSAT_KERNELS_HPP
#define MSAT_KERNELS_HPP

#include "msat/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace msat {

// Convolution geometry. Output extent per axis is
// floor((in + 2*pad - ((k-1)*dilation + 1)) / stride) + 1.
struct Conv2dSpec {
  Index in_channels = 1;
  Index out_channels = 1;
  std::array<Index, 2> kernel{3, 3};
  std::array<Index, 2> stride{1, 1};
  std::array<Index, 2> padding{0, 0};
  std::array<Index, 2> dilation{1, 1};

  static Conv2dSpec square(Index in, Index out, Index k, Index pad = 0, Index dil = 1,
                           Index str = 1) {
    return Conv2dSpec{in, out, {k, k}, {str, str}, {pad, pad}, {dil, dil}};
  }

  Index effective_extent(int axis) const { return (kernel[axis] - 1) * dilation[axis] + 1; }

  Index output_extent(Index in, int axis) const {
    const Index padded = in + 2 * padding[axis];
    const Index eff = effective_extent(axis);
    if (eff > padded) {
      throw ShapeError("conv2d: effective kernel extent " + std::to_string(eff) + " exceeds padded " +
                       (axis == 0 ? std::string("height ") : std::string("width ")) +
                       std::to_string(padded));
    }
    return (padded - eff) / stride[axis] + 1;
  }

  bool is_pointwise() const {
    return kernel[0] == 1 && kernel[1] == 1 && stride[0] == 1 && stride[1] == 1 &&
           padding[0] == 0 && padding[1] == 0;
  }
};

namespace detail {

template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMajorMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix<Scalar>>;

// Unfolds one C x H x W sample into a (C*kh*kw) x (Ho*Wo) patch matrix.
template <typename Scalar>
void im2col(const Scalar* src, Index channels, Index height, Index width, const Conv2dSpec& spec,
            Index out_h, Index out_w, Scalar* col) {
  const auto [kh, kw] = spec.kernel;
  const auto [sh, sw] = spec.stride;
  const auto [ph, pw] = spec.padding;
  const auto [dh, dw] = spec.dilation;
  for (Index c = 0; c < channels; ++c) {
    const Scalar* plane = src + c * height * width;
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * sh - ph + ki * dh;
          Scalar* row = col + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + out_w, Scalar(0));
            continue;
          }
          const Scalar* line = plane + iy * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * sw - pw + kj * dw;
            row[ox] = (ix >= 0 && ix < width) ? line[ix] : Scalar(0);
          }
        }
        col += out_h * out_w;
      }
    }
  }
}

// Adjoint of im2col: scatters a patch matrix back onto a C x H x W sample.
template <typename Scalar>
void col2im_add(const Scalar* col, Index channels, Index height, Index width,
                const Conv2dSpec& spec, Index out_h, Index out_w, Scalar* dst) {
  const auto [kh, kw] = spec.kernel;
  const auto [sh, sw] = spec.stride;
  const auto [ph, pw] = spec.padding;
  const auto [dh, dw] = spec.dilation;
  for (Index c = 0; c < channels; ++c) {
    Scalar* plane = dst + c * height * width;
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * sh - ph + ki * dh;
          const Scalar* row = col + oy * out_w;
          if (iy < 0 || iy >= height) continue;
          Scalar* line = plane + iy * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * sw - pw + kj * dw;
            if (ix >= 0 && ix < width) line[ix] += row[ox];
          }
        }
        col += out_h * out_w;
      }
    }
  }
}

inline void check_conv_shapes(const Shape& input, const Shape& weight, const Shape& bias,
                              const Conv2dSpec& spec) {
  if (input.size() != 4) throw ShapeError("conv2d: input must be NxCxHxW, got " + to_string(input));
  if (weight.size() != 4) {
    throw ShapeError("conv2d: weight must be CoutxCinxKhxKw, got " + to_string(weight));
  }
  if (input[1] != spec.in_channels) {
    throw ShapeError("conv2d: input channel dimension is " + std::to_string(input[1]) +
                     " but spec expects in_channels=" + std::to_string(spec.in_channels));
  }
  if (weight[0] != spec.out_channels) {
    throw ShapeError("conv2d: weight dimension 0 (out_channels) is " + std::to_string(weight[0]) +
                     ", expected " + std::to_string(spec.out_channels));
  }
  if (weight[1] != spec.in_channels) {
    throw ShapeError("conv2d: weight dimension 1 (in_channels) is " + std::to_string(weight[1]) +
                     ", expected " + std::to_string(spec.in_channels));
  }
  if (weight[2] != spec.kernel[0] || weight[3] != spec.kernel[1]) {
    throw ShapeError("conv2d: weight kernel dimensions " + to_string(weight) +
                     " do not match spec kernel " + std::to_string(spec.kernel[0]) + "x" +
                     std::to_string(spec.kernel[1]));
  }
  if (bias.size() != 1 || bias[0] != spec.out_channels) {
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(spec.out_channels) +
                     "], got " + to_string(bias));
  }
  for (int a = 0; a < 2; ++a) {
    if (spec.stride[a] < 1 || spec.dilation[a] < 1 || spec.padding[a] < 0 || spec.kernel[a] < 1) {
      throw ShapeError("conv2d: kernel/stride/dilation must be >= 1 and padding >= 0");
    }
  }
}

}  // namespace detail

/// Dilated 2-D cross-correlation with zero padding (patch-matrix lowering + GEMM).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, const Conv2dSpec& spec) {
  detail::check_conv_shapes(input.shape(), weight.shape(), bias.shape(), spec);
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index oh = spec.output_extent(h, 0), ow = spec.output_extent(w, 1);
  const Index cout = spec.out_channels;
  const Index k = cin * spec.kernel[0] * spec.kernel[1];
  const Index p = oh * ow;

  Tensor<Scalar> out({n, cout, oh, ow});
  detail::ConstMatrixMap<Scalar> wmat(weight.raw(), cout, k);
  detail::RowMajorMatrix<Scalar> col;
  if (!spec.is_pointwise()) col.resize(k, p);
  for (Index b = 0; b < n; ++b) {
    const Scalar* src = input.raw() + b * cin * h * w;
    detail::MatrixMap<Scalar> dst(out.raw() + b * cout * p, cout, p);
    if (spec.is_pointwise()) {
      dst.noalias() = wmat * detail::ConstMatrixMap<Scalar>(src, k, p);
    } else {
      detail::im2col(src, cin, h, w, spec, oh, ow, col.data());
      dst.noalias() = wmat * col;
    }
    dst.colwise() += bias.data();
  }
  return out;
}

/// Accumulates conv2d gradients into whichever of the three targets are non-null.
template <typename Scalar>
void conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                     const Tensor<Scalar>& grad_out, const Conv2dSpec& spec,
                     Tensor<Scalar>* grad_input, Tensor<Scalar>* grad_weight,
                     Tensor<Scalar>* grad_bias) {
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index oh = grad_out.dim(2), ow = grad_out.dim(3);
  const Index cout = spec.out_channels;
  const Index k = cin * spec.kernel[0] * spec.kernel[1];
  const Index p = oh * ow;
  const bool pointwise = spec.is_pointwise();

  detail::ConstMatrixMap<Scalar> wmat(weight.raw(), cout, k);
  detail::RowMajorMatrix<Scalar> col;
  detail::RowMajorMatrix<Scalar> grad_col;
  if (!pointwise) {
    if (grad_weight) col.resize(k, p);
    if (grad_input) grad_col.resize(k, p);
  }
  for (Index b = 0; b < n; ++b) {
    detail::ConstMatrixMap<Scalar> g(grad_out.raw() + b * cout * p, cout, p);
    const Scalar* src = input.raw() + b * cin * h * w;
    if (grad_bias) grad_bias->data() += g.rowwise().sum();
    if (grad_weight) {
      detail::MatrixMap<Scalar> gw(grad_weight->raw(), cout, k);
      if (pointwise) {
        gw.noalias() += g * detail::ConstMatrixMap<Scalar>(src, k, p).transpose();
      } else {
        detail::im2col(src, cin, h, w, spec, oh, ow, col.data());
        gw.noalias() += g * col.transpose();
      }
    }
    if (grad_input) {
      Scalar* gi = grad_input->raw() + b * cin * h * w;
      if (pointwise) {
        detail::MatrixMap<Scalar>(gi, k, p).noalias() += wmat.transpose() * g;
      } else {
        grad_col.noalias() = wmat.transpose() * g;
        detail::col2im_add(grad_col.data(), cin, h, w, spec, oh, ow, gi);
      }
    }
  }
}

namespace detail {

// Interpolation taps along one axis: out[i] = (1-frac[i])*in[lo[i]] + frac[i]*in[hi[i]].
template <typename Scalar>
struct LinearTaps {
  std::vector<Index> lo, hi;
  std::vector<Scalar> frac;
};

template <typename Scalar>
LinearTaps<Scalar> linear_taps(Index in, Index out, bool align_corners) {
  LinearTaps<Scalar> taps;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.frac.resize(out);
  for (Index i = 0; i < out; ++i) {
    double src;
    if (align_corners) {
      src = out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) /
                                 static_cast<double>(out - 1);
    } else {
      src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) -
            0.5;
      src = std::max(src, 0.0);
    }
    Index lo = std::min(static_cast<Index>(std::floor(src)), in - 1);
    taps.lo[i] = lo;
    taps.hi[i] = std::min(lo + 1, in - 1);
    taps.frac[i] = static_cast<Scalar>(src - static_cast<double>(lo));
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of the two spatial axes. align_corners=false uses half-pixel
/// centers with the source coordinate clamped at 0.
template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& input, Index out_h, Index out_w,
                               bool align_corners = false) {
  require_rank4(input, "bilinear_resize input");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h == h && out_w == w) return input;

  const auto ty = detail::linear_taps<Scalar>(h, out_h, align_corners);
  const auto tx = detail::linear_taps<Scalar>(w, out_w, align_corners);
  Tensor<Scalar> out({n, c, out_h, out_w});
  for (Index plane = 0; plane < n * c; ++plane) {
    const Scalar* src = input.raw() + plane * h * w;
    Scalar* dst = out.raw() + plane * out_h * out_w;
    for (Index y = 0; y < out_h; ++y) {
      const Scalar* r0 = src + ty.lo[y] * w;
      const Scalar* r1 = src + ty.hi[y] * w;
      const Scalar fy = ty.frac[y];
      for (Index x = 0; x < out_w; ++x) {
        const Scalar fx = tx.frac[x];
        const Scalar top = (Scalar(1) - fx) * r0[tx.lo[x]] + fx * r0[tx.hi[x]];
        const Scalar bot = (Scalar(1) - fx) * r1[tx.lo[x]] + fx * r1[tx.hi[x]];
        dst[y * out_w + x] = (Scalar(1) - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

template <typename Scalar>
void bilinear_resize_backward(const Tensor<Scalar>& grad_out, bool align_corners,
                              Tensor<Scalar>& grad_input) {
  const Index n = grad_input.dim(0), c = grad_input.dim(1);
  const Index h = grad_input.dim(2), w = grad_input.dim(3);
  const Index out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  if (out_h == h && out_w == w) {
    grad_input.data() += grad_out.data();
    return;
  }
  const auto ty = detail::linear_taps<Scalar>(h, out_h, align_corners);
  const auto tx = detail::linear_taps<Scalar>(w, out_w, align_corners);
  for (Index plane = 0; plane < n * c; ++plane) {
    const Scalar* g = grad_out.raw() + plane * out_h * out_w;
    Scalar* dst = grad_input.raw() + plane * h * w;
    for (Index y = 0; y < out_h; ++y) {
      Scalar* r0 = dst + ty.lo[y] * w;
      Scalar* r1 = dst + ty.hi[y] * w;
      const Scalar fy = ty.frac[y];
      for (Index x = 0; x < out_w; ++x) {
        const Scalar fx = tx.frac[x];
        const Scalar v = g[y * out_w + x];
        const Scalar top = (Scalar(1) - fy) * v;
        const Scalar bot = fy * v;
        r0[tx.lo[x]] += (Scalar(1) - fx) * top;
        r0[tx.hi[x]] += fx * top;
        r1[tx.lo[x]] += (Scalar(1) - fx) * bot;
        r1[tx.hi[x]] += fx * bot;
      }
    }
  }
}

template <typename Scalar>
struct MaxPoolResult {
  Tensor<Scalar> output;
  std::vector<Index> argmax;  // flat input offset per output element
};

namespace detail {
inline void check_pool(const Shape& s, Index window, Index stride, const char* name) {
  if (s.size() != 4) throw ShapeError(std::string(name) + ": input must be NxCxHxW");
  if (window < 1 || stride < 1) throw ShapeError(std::string(name) + ": window/stride must be >= 1");
  if (window > s[2] || window > s[3]) {
    throw ShapeError(std::string(name) + ": window " + std::to_string(window) +
                     " exceeds input extent " + to_string(s));
  }
}
}  // namespace detail

/// Max pooling without padding. Ties resolve to the first element in row-major order.
template <typename Scalar>
MaxPoolResult<Scalar> maxpool2d(const Tensor<Scalar>& input, Index window, Index stride) {
  detail::check_pool(input.shape(), window, stride, "maxpool2d");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  MaxPoolResult<Scalar> r{Tensor<Scalar>({n, c, oh, ow}), {}};
  r.argmax.resize(static_cast<std::size_t>(n * c * oh * ow));
  Index o = 0;
  for (Index plane = 0; plane < n * c; ++plane) {
    const Index base = plane * h * w;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Index best = base + oy * stride * w + ox * stride;
        Scalar best_v = input[best];
        for (Index ky = 0; ky < window; ++ky) {
          for (Index kx = 0; kx < window; ++kx) {
            const Index idx = base + (oy * stride + ky) * w + ox * stride + kx;
            if (input[idx] > best_v) {
              best_v = input[idx];
              best = idx;
            }
          }
        }
        r.output[o] = best_v;
        r.argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return r;
}

template <typename Scalar>
void maxpool2d_backward(const Tensor<Scalar>& grad_out, std::span<const Index> argmax,
                        Tensor<Scalar>& grad_input) {
  for (Index o = 0; o < grad_out.size(); ++o) {
    grad_input[argmax[static_cast<std::size_t>(o)]] += grad_out[o];
  }
}

template <typename Scalar>
Tensor<Scalar> avgpool2d(const Tensor<Scalar>& input, Index window, Index stride) {
  detail::check_pool(input.shape(), window, stride, "avgpool2d");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(window * window);
  Tensor<Scalar> out({n, c, oh, ow});
  Index o = 0;
  for (Index plane = 0; plane < n * c; ++plane) {
    const Scalar* src = input.raw() + plane * h * w;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Scalar acc = 0;
        for (Index ky = 0; ky < window; ++ky) {
          for (Index kx = 0; kx < window; ++kx) acc += src[(oy * stride + ky) * w + ox * stride + kx];
        }
        out[o] = acc * inv;
      }
    }
  }
  return out;
}

template <typename Scalar>
void avgpool2d_backward(const Tensor<Scalar>& grad_out, Index window, Index stride,
                        Tensor<Scalar>& grad_input) {
  const Index h = grad_input.dim(2), w = grad_input.dim(3);
  const Index oh = grad_out.dim(2), ow = grad_out.dim(3);
  const Index planes = grad_input.dim(0) * grad_input.dim(1);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(window * window);
  for (Index plane = 0; plane < planes; ++plane) {
    Scalar* dst = grad_input.raw() + plane * h * w;
    const Scalar* g = grad_out.raw() + plane * oh * ow;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        const Scalar v = g[oy * ow + ox] * inv;
        for (Index ky = 0; ky < window; ++ky) {
          for (Index kx = 0; kx < window; ++kx) dst[(oy * stride + ky) * w + ox * stride + kx] += v;
        }
      }
    }
  }
}

/// Per-pixel softmax over the channel axis, stabilized by the channel maximum.
template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& input) {
  require_rank4(input, "softmax_channels input");
  const Index n = input.dim(0), k = input.dim(1), hw = input.dim(2) * input.dim(3);
  Tensor<Scalar> out(input.shape());
  for (Index b = 0; b < n; ++b) {
    detail::ConstMatrixMap<Scalar> x(input.raw() + b * k * hw, k, hw);
    detail::MatrixMap<Scalar> y(out.raw() + b * k * hw, k, hw);
    const auto mx = x.colwise().maxCoeff().eval();
    y = (x.rowwise() - mx).array().exp().matrix();
    const auto sum = y.colwise().sum().eval();
    y.array().rowwise() /= sum.array();
  }
  return out;
}

/// Vector-Jacobian product of softmax_channels given its output.
template <typename Scalar>
void softmax_channels_backward(const Tensor<Scalar>& output, const Tensor<Scalar>& grad_out,
                               Tensor<Scalar>& grad_input) {
  const Index n = output.dim(0), k = output.dim(1), hw = output.dim(2) * output.dim(3);
  for (Index b = 0; b < n; ++b) {
    detail::ConstMatrixMap<Scalar> y(output.raw() + b * k * hw, k, hw);
    detail::ConstMatrixMap<Scalar> g(grad_out.raw() + b * k * hw, k, hw);
    detail::MatrixMap<Scalar> gi(grad_input.raw() + b * k * hw, k, hw);
    const auto dot = (y.array() * g.array()).colwise().sum().eval();
    gi.array() += y.array() * (g.array().rowwise() - dot);
  }
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& t) {
  return Tensor<Scalar>(t.shape(), ((-t.data().array()).exp() + Scalar(1)).inverse().matrix());
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& t) {
  return Tensor<Scalar>(t.shape(), t.data().cwiseMax(Scalar(0)));
}

namespace detail {
template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> elementwise_mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "elementwise_mul");
  return Tensor<Scalar>(a.shape(), a.data().cwiseProduct(b.data()));
}

template <typename Scalar>
Tensor<Scalar> elementwise_add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "elementwise_add");
  return Tensor<Scalar>(a.shape(), a.data() + b.data());
}

template <typename Scalar>
Tensor<Scalar> scalar_scale(const Tensor<Scalar>& t, Scalar s) {
  return Tensor<Scalar>(t.shape(), t.data() * s);
}

/// Concatenates NxCixHxW tensors along the channel axis, preserving order.
template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  const Tensor<Scalar>& first = *parts.front();
  require_rank4(first, "concat_channels input");
  const Index n = first.dim(0), h = first.dim(2), w = first.dim(3);
  Index total_c = 0;
  for (const auto* p : parts) {
    require_rank4(*p, "concat_channels input");
    if (p->dim(0) != n || p->dim(2) != h || p->dim(3) != w) {
      throw ShapeError("concat_channels: N/H/W mismatch, " + to_string(first.shape()) + " vs " +
                       to_string(p->shape()));
    }
    total_c += p->dim(1);
  }
  Tensor<Scalar> out({n, total_c, h, w});
  const Index hw = h * w;
  for (Index b = 0; b < n; ++b) {
    Scalar* dst = out.raw() + b * total_c * hw;
    for (const auto* p : parts) {
      const Index len = p->dim(1) * hw;
      std::copy_n(p->raw() + b * len, len, dst);
      dst += len;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& parts) {
  std::vector<const Tensor<Scalar>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  return concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(ptrs));
}

/// Channels [begin, begin+count) of an NxCxHxW tensor.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& t, Index begin, Index count) {
  require_rank4(t, "slice_channels input");
  if (begin < 0 || count < 1 || begin + count > t.dim(1)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside channel count " +
                     std::to_string(t.dim(1)));
  }
  const Index n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  Tensor<Scalar> out({n, count, t.dim(2), t.dim(3)});
  for (Index b = 0; b < n; ++b) {
    std::copy_n(t.raw() + (b * c + begin) * hw, count * hw, out.raw() + b * count * hw);
  }
  return out;
}

}  // namespace msat

#endif  // MSAT_KERNELS_HPP
