#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "blackfed/graph.hpp"
#include "blackfed/tensor.hpp"

namespace blackfed {

struct Conv2dGeometry {
  std::size_t batch, in_channels, in_h, in_w;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t pixels() const { return out_h * out_w; }
};

/// Validates conv2d operands and derives the output extents.
inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernel, const Shape& bias,
                                      std::size_t stride, std::size_t padding) {
  if (input.size() != 4) throw Error(ErrorCode::invalid_shape, "conv2d input must be rank 4, got " + shape_string(input));
  if (kernel.size() != 4) throw Error(ErrorCode::invalid_shape, "conv2d kernel must be rank 4, got " + shape_string(kernel));
  if (stride == 0) throw Error(ErrorCode::invalid_shape, "conv2d stride must be >= 1");
  if (kernel[1] != input[1]) {
    throw Error(ErrorCode::invalid_shape, "conv2d channel dimension: input has " + std::to_string(input[1]) +
                                              ", kernel expects " + std::to_string(kernel[1]));
  }
  if (bias.size() != 1 || bias[0] != kernel[0]) {
    throw Error(ErrorCode::invalid_shape,
                "conv2d bias dimension: expected [" + std::to_string(kernel[0]) + "], got " + shape_string(bias));
  }
  const std::size_t ph = input[2] + 2 * padding, pw = input[3] + 2 * padding;
  if (kernel[2] > ph) throw Error(ErrorCode::invalid_shape, "conv2d height: kernel exceeds padded input");
  if (kernel[3] > pw) throw Error(ErrorCode::invalid_shape, "conv2d width: kernel exceeds padded input");
  Conv2dGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], stride, padding, 0, 0};
  g.out_h = (ph - kernel[2]) / stride + 1;
  g.out_w = (pw - kernel[3]) / stride + 1;
  return g;
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Unfolds one image into a (patch x pixels) column matrix, zero padded.
template <typename T>
void im2col(const T* image, const Conv2dGeometry& g, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.pixels();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          T* out = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - pad;
            out[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im_add(const T* col, const Conv2dGeometry& g, T* image) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.pixels();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* dst = image + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          const T* in = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - pad;
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.in_w)) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

/// Per-axis interpolation taps for align-corners bilinear resampling.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline Taps bilinear_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = out == 1 ? 0.0 : static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace detail

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding) {
  Graph<T>& graph = *input.graph;
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  const Tensor<T>& b = bias.value();
  const Conv2dGeometry g = conv2d_geometry(x.shape(), k.shape(), b.shape(), stride, padding);

  Tensor<T> y({g.batch, g.out_channels, g.out_h, g.out_w});
  std::vector<T> col(g.patch() * g.pixels());
  detail::ConstMatrixMap<T> K(k.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.patch()));
  detail::ConstMatrixMap<T> C(col.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
  const std::size_t in_stride = g.in_channels * g.in_h * g.in_w;
  const std::size_t out_stride = g.out_channels * g.pixels();
  for (std::size_t n = 0; n < g.batch; ++n) {
    detail::im2col(x.data() + n * in_stride, g, col.data());
    detail::MatrixMap<T> Y(y.data() + n * out_stride, static_cast<Eigen::Index>(g.out_channels),
                           static_cast<Eigen::Index>(g.pixels()));
    Y.noalias() = K * C;
    for (std::size_t co = 0; co < g.out_channels; ++co) Y.row(static_cast<Eigen::Index>(co)).array() += b[co];
  }
  require_finite(y, "conv2d");

  const bool needs = graph.requires_grad(input) || graph.requires_grad(kernel) || graph.requires_grad(bias);
  const std::size_t xi = input.id, ki = kernel.id, bi = bias.id;
  return graph.record(std::move(y), needs, [g, xi, ki, bi, in_stride, out_stride](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad_of(self);
    const Tensor<T>& x = gr.value(xi);
    const Tensor<T>& k = gr.value(ki);
    const bool need_x = gr.requires_grad(xi), need_k = gr.requires_grad(ki), need_b = gr.requires_grad(bi);
    std::vector<T> col(g.patch() * g.pixels());
    std::vector<T> dcol(need_x ? col.size() : 0);
    detail::ConstMatrixMap<T> K(k.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.patch()));
    for (std::size_t n = 0; n < g.batch; ++n) {
      detail::ConstMatrixMap<T> DY(dy.data() + n * out_stride, static_cast<Eigen::Index>(g.out_channels),
                                   static_cast<Eigen::Index>(g.pixels()));
      if (need_k) {
        detail::im2col(x.data() + n * in_stride, g, col.data());
        detail::ConstMatrixMap<T> C(col.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
        detail::MatrixMap<T> DK(gr.grad_slot(ki).data(), static_cast<Eigen::Index>(g.out_channels),
                                static_cast<Eigen::Index>(g.patch()));
        DK.noalias() += DY * C.transpose();
      }
      if (need_b) {
        Tensor<T>& db = gr.grad_slot(bi);
        // Plain loop: Eigen's vectorized sum() peels by address, which makes
        // the summation order (and the result) allocation-dependent.
        const T* row = dy.data() + n * out_stride;
        for (std::size_t co = 0; co < g.out_channels; ++co, row += g.pixels()) {
          T acc = 0;
          for (std::size_t p = 0; p < g.pixels(); ++p) acc += row[p];
          db[co] += acc;
        }
      }
      if (need_x) {
        detail::MatrixMap<T> DC(dcol.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
        DC.noalias() = K.transpose() * DY;
        detail::col2im_add(dcol.data(), g, gr.grad_slot(xi).data() + n * in_stride);
      }
    }
  });
}

template <typename T>
Var<T> relu(Var<T> input) {
  Graph<T>& graph = *input.graph;
  Tensor<T> y = input.value();
  for (T& v : y.values()) v = v > T(0) ? v : T(0);
  const std::size_t xi = input.id;
  return graph.record(std::move(y), graph.requires_grad(input), [xi](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad_of(self);
    const Tensor<T>& x = gr.value(xi);
    Tensor<T>& dx = gr.grad_slot(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += x[i] > T(0) ? dy[i] : T(0);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& graph = *a.graph;
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::invalid_shape, "add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> y = a.value();
  detail::accumulate(y, b.value());
  const std::size_t ai = a.id, bi = b.id;
  const bool needs = graph.requires_grad(a) || graph.requires_grad(b);
  return graph.record(std::move(y), needs, [ai, bi](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad_of(self);
    if (gr.requires_grad(ai)) detail::accumulate(gr.grad_slot(ai), dy);
    if (gr.requires_grad(bi)) detail::accumulate(gr.grad_slot(bi), dy);
  });
}

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& graph = *a.graph;
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::invalid_shape, "mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  const std::size_t ai = a.id, bi = b.id;
  const bool needs = graph.requires_grad(a) || graph.requires_grad(b);
  return graph.record(std::move(y), needs, [ai, bi](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad_of(self);
    const Tensor<T>& av = gr.value(ai);
    const Tensor<T>& bv = gr.value(bi);
    if (gr.requires_grad(ai)) {
      Tensor<T>& da = gr.grad_slot(ai);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * bv[i];
    }
    if (gr.requires_grad(bi)) {
      Tensor<T>& db = gr.grad_slot(bi);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> input, T factor) {
  Graph<T>& graph = *input.graph;
  Tensor<T> y = input.value();
  for (T& v : y.values()) v *= factor;
  const std::size_t xi = input.id;
  return graph.record(std::move(y), graph.requires_grad(input), [xi, factor](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad_of(self);
    Tensor<T>& dx = gr.grad_slot(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * factor;
  });
}

/// Sum of all elements as a rank-0 tensor.
template <typename T>
Var<T> sum(Var<T> input) {
  Graph<T>& graph = *input.graph;
  double total = 0.0;
  for (T v : input.value().values()) total += static_cast<double>(v);
  const std::size_t xi = input.id;
  return graph.record(Tensor<T>(Shape{}, static_cast<T>(total)), graph.requires_grad(input),
                      [xi](Graph<T>& gr, std::size_t self) {
                        const T dy = gr.grad_of(self)[0];
                        for (T& v : gr.grad_slot(xi).values()) v += dy;
                      });
}

/// Align-corners bilinear resampling of (B,C,H,W) to integer multiples of H,W.
template <typename T>
Var<T> bilinear_upsample(Var<T> input, std::size_t out_h, std::size_t out_w) {
  Graph<T>& graph = *input.graph;
  const Shape& s = input.shape();
  if (s.size() != 4) throw Error(ErrorCode::invalid_shape, "bilinear_upsample needs rank 4, got " + shape_string(s));
  if (out_h == 0 || out_w == 0) throw Error(ErrorCode::invalid_shape, "bilinear_upsample target extents must be positive");
  if (out_h % s[2] != 0 || out_w % s[3] != 0) {
    throw Error(ErrorCode::invalid_shape, "bilinear_upsample target " + std::to_string(out_h) + "x" +
                                              std::to_string(out_w) + " is not a multiple of " + shape_string(s));
  }
  const std::size_t planes = s[0] * s[1], ih = s[2], iw = s[3];
  const detail::Taps rows = detail::bilinear_taps(ih, out_h);
  const detail::Taps cols = detail::bilinear_taps(iw, out_w);
  const Tensor<T>& x = input.value();
  Tensor<T> y({s[0], s[1], out_h, out_w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * ih * iw;
    T* dst = y.data() + p * out_h * out_w;
    for (std::size_t oh = 0; oh < out_h; ++oh) {
      const T fy = static_cast<T>(rows.frac[oh]);
      const T* r0 = src + rows.lo[oh] * iw;
      const T* r1 = src + rows.hi[oh] * iw;
      for (std::size_t ow = 0; ow < out_w; ++ow) {
        const T fx = static_cast<T>(cols.frac[ow]);
        const std::size_t c0 = cols.lo[ow], c1 = cols.hi[ow];
        const T top = r0[c0] + fx * (r0[c1] - r0[c0]);
        const T bot = r1[c0] + fx * (r1[c1] - r1[c0]);
        dst[oh * out_w + ow] = top + fy * (bot - top);
      }
    }
  }
  const std::size_t xi = input.id;
  return graph.record(std::move(y), graph.requires_grad(input),
                      [xi, planes, ih, iw, out_h, out_w, rows, cols](Graph<T>& gr, std::size_t self) {
                        const Tensor<T>& dy = gr.grad_of(self);
                        Tensor<T>& dx = gr.grad_slot(xi);
                        for (std::size_t p = 0; p < planes; ++p) {
                          const T* g = dy.data() + p * out_h * out_w;
                          T* d = dx.data() + p * ih * iw;
                          for (std::size_t oh = 0; oh < out_h; ++oh) {
                            const T fy = static_cast<T>(rows.frac[oh]);
                            T* r0 = d + rows.lo[oh] * iw;
                            T* r1 = d + rows.hi[oh] * iw;
                            for (std::size_t ow = 0; ow < out_w; ++ow) {
                              const T fx = static_cast<T>(cols.frac[ow]);
                              const T v = g[oh * out_w + ow];
                              const std::size_t c0 = cols.lo[ow], c1 = cols.hi[ow];
                              const T top = v * (T(1) - fy), bot = v * fy;
                              r0[c0] += top * (T(1) - fx);
                              r0[c1] += top * fx;
                              r1[c0] += bot * (T(1) - fx);
                              r1[c1] += bot * fx;
                            }
                          }
                        }
                      });
}

template <typename T>
Var<T> bilinear_upsample(Var<T> input, std::size_t factor) {
  if (input.shape().size() != 4) throw Error(ErrorCode::invalid_shape, "bilinear_upsample needs rank 4");
  return bilinear_upsample(input, input.shape()[2] * factor, input.shape()[3] * factor);
}

/// Softmax across axis 1 of a (B,C,H,W) tensor.
template <typename T>
Var<T> softmax_over_channels(Var<T> input) {
  Graph<T>& graph = *input.graph;
  const Shape& s = input.shape();
  if (s.size() != 4) throw Error(ErrorCode::invalid_shape, "softmax_over_channels needs rank 4, got " + shape_string(s));
  const std::size_t B = s[0], C = s[1], P = s[2] * s[3];
  const Tensor<T>& x = input.value();
  Tensor<T> y(s);
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = n * C * P + p;
      T m = x[base];
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, x[base + c * P]);
      T z = T(0);
      for (std::size_t c = 0; c < C; ++c) z += (y[base + c * P] = std::exp(x[base + c * P] - m));
      for (std::size_t c = 0; c < C; ++c) y[base + c * P] /= z;
    }
  }
  require_finite(y, "softmax_over_channels");
  const std::size_t xi = input.id;
  return graph.record(std::move(y), graph.requires_grad(input), [xi, B, C, P](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& dy = gr.grad_of(self);
    const Tensor<T>& y = gr.value(self);
    Tensor<T>& dx = gr.grad_slot(xi);
    for (std::size_t n = 0; n < B; ++n) {
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t base = n * C * P + p;
        T dot = T(0);
        for (std::size_t c = 0; c < C; ++c) dot += dy[base + c * P] * y[base + c * P];
        for (std::size_t c = 0; c < C; ++c) dx[base + c * P] += y[base + c * P] * (dy[base + c * P] - dot);
      }
    }
  });
}

/// Mean over all B*H*W pixels of -log softmax(logits)[target].
template <typename T>
Var<T> pixelwise_cross_entropy(Var<T> logits, const Labels& target) {
  Graph<T>& graph = *logits.graph;
  const Shape& s = logits.shape();
  if (s.size() != 4) throw Error(ErrorCode::invalid_shape, "cross-entropy logits need rank 4, got " + shape_string(s));
  if (target.rank() != 3 || target.dim(0) != s[0] || target.dim(1) != s[2] || target.dim(2) != s[3]) {
    throw Error(ErrorCode::invalid_shape,
                "cross-entropy target " + shape_string(target.shape()) + " does not match logits " + shape_string(s));
  }
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3], P = H * W;
  const Tensor<T>& x = logits.value();
  Tensor<T> prob(s);
  double total = 0.0;
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t t = target[n * P + p];
      if (t >= C) {
        throw Error(ErrorCode::invalid_label, "class index " + std::to_string(t) + " at (b=" + std::to_string(n) +
                                                  ", y=" + std::to_string(p / W) + ", x=" + std::to_string(p % W) +
                                                  ") is outside [0, " + std::to_string(C) + ")");
      }
      const std::size_t base = n * C * P + p;
      T m = x[base];
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, x[base + c * P]);
      T z = T(0);
      for (std::size_t c = 0; c < C; ++c) z += (prob[base + c * P] = std::exp(x[base + c * P] - m));
      for (std::size_t c = 0; c < C; ++c) prob[base + c * P] /= z;
      total += static_cast<double>(std::log(z) + m - x[base + t * P]);
    }
  }
  const double count = static_cast<double>(B * P);
  Tensor<T> loss(Shape{}, static_cast<T>(total / count));
  require_finite(loss, "pixelwise_cross_entropy");
  const std::size_t xi = logits.id;
  return graph.record(std::move(loss), graph.requires_grad(logits),
                      [xi, prob = std::move(prob), target, B, C, P, count](Graph<T>& gr, std::size_t self) {
                        const T scale = gr.grad_of(self)[0] / static_cast<T>(count);
                        Tensor<T>& dx = gr.grad_slot(xi);
                        for (std::size_t n = 0; n < B; ++n) {
                          for (std::size_t p = 0; p < P; ++p) {
                            const std::size_t base = n * C * P + p;
                            const std::size_t t = target[n * P + p];
                            for (std::size_t c = 0; c < C; ++c) {
                              const T onehot = c == t ? T(1) : T(0);
                              dx[base + c * P] += scale * (prob[base + c * P] - onehot);
                            }
                          }
                        }
                      });
}

/// Per-pixel argmax over channels of (B,C,H,W) logits.
template <typename T>
Labels argmax_channels(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw Error(ErrorCode::invalid_shape, "argmax_channels needs rank 4");
  const std::size_t B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3), P = H * W;
  Labels out({B, H, W});
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = n * C * P + p;
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c) {
        if (logits[base + c * P] > logits[base + best * P]) best = c;
      }
      out[n * P + p] = static_cast<std::uint16_t>(best);
    }
  }
  return out;
}

}  // namespace blackfed
