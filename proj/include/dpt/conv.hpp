#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

// Cross-correlation convention throughout (no kernel flip). Single image,
// channel-major CHW layout.
//
//   conv2d          x[Ci,H,W] * w[Co,Ci,k,k] -> y[Co,H',W']
//   conv_transpose  x[Cx,H,W] * w[Cx,Cy,k,k] -> y[Cy,H',W']
//
// The transpose weight layout puts the *input* channels first, which makes
// conv_transpose2d(y, w) the exact adjoint of conv2d(x, w) for a shared w.

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t conv_transpose_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                             std::size_t pad, std::size_t out_pad) {
  return (in - 1) * stride + k + out_pad - 2 * pad;
}

namespace detail {

// Range of `o` with 0 <= o*stride + off < limit, clamped to [0, extent).
struct LoopRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

inline LoopRange valid_range(std::ptrdiff_t off, std::size_t stride, std::size_t limit,
                             std::size_t extent) {
  LoopRange r;
  std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi_edge = static_cast<std::ptrdiff_t>(limit) - 1 - off;
  if (hi_edge < 0) return r;  // empty
  std::ptrdiff_t hi = hi_edge / s + 1;
  lo = std::max<std::ptrdiff_t>(lo, 0);
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(extent));
  if (lo >= hi) return r;
  r.lo = static_cast<std::size_t>(lo);
  r.hi = static_cast<std::size_t>(hi);
  return r;
}

// Per-channel grain that keeps small convolutions single-threaded.
inline std::size_t conv_grain(std::size_t channels, double work_total) {
  return work_total < 200000.0 ? channels : 1;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  check_shape(x.rank() == 3, "conv2d: input must be CxHxW, got " + shape_str(x.shape()));
  check_shape(w.rank() == 4, "conv2d: weight must be CoxCixkxk, got " + shape_str(w.shape()));
  check_shape(stride >= 1, "conv2d: stride must be >= 1");
  std::size_t ci = x.extent(0), h = x.extent(1), wd = x.extent(2);
  std::size_t co = w.extent(0), k = w.extent(2);
  check_shape(w.extent(1) == ci, "conv2d: weight expects " + std::to_string(w.extent(1)) +
                                     " input channels, image has " + std::to_string(ci));
  check_shape(w.extent(2) == w.extent(3), "conv2d: kernel must be square");
  check_shape(h + 2 * pad >= k && wd + 2 * pad >= k,
              "conv2d: kernel larger than padded input");
  check_shape(bias.numel() == 0 || bias.numel() == co,
              "conv2d: bias length must equal output channels");
  std::size_t oh = conv_out_extent(h, k, stride, pad);
  std::size_t ow = conv_out_extent(wd, k, stride, pad);

  std::vector<T> out(co * oh * ow, T(0));
  const T* xd = x.data();
  const T* wdt = w.data();
  double work = static_cast<double>(co) * ci * k * k * oh * ow;
  parallel_for(co, detail::conv_grain(co, work), [&](std::size_t c0, std::size_t c1) {
    for (std::size_t oc = c0; oc < c1; ++oc) {
      T* plane = out.data() + oc * oh * ow;
      if (bias.numel() != 0) std::fill(plane, plane + oh * ow, bias.at(oc));
      for (std::size_t ic = 0; ic < ci; ++ic) {
        const T* xplane = xd + ic * h * wd;
        const T* wk = wdt + (oc * ci + ic) * k * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) -
                                  static_cast<std::ptrdiff_t>(pad);
          auto ry = detail::valid_range(oy_off, stride, h, oh);
          for (std::size_t kx = 0; kx < k; ++kx) {
            T wv = wk[ky * k + kx];
            if (wv == T(0)) continue;
            std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) -
                                    static_cast<std::ptrdiff_t>(pad);
            auto rx = detail::valid_range(ox_off, stride, wd, ow);
            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
              const T* xrow = xplane + (oy * stride + oy_off) * wd + ox_off;
              T* orow = plane + oy * ow;
              if (stride == 1) {
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * xrow[ox];
              } else {
                for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                  orow[ox] += wv * xrow[ox * stride];
              }
            }
          }
        }
      }
    }
  });

  auto px = x.shared_values();
  auto pw = w.shared_values();
  int nx = x.node(), nw = w.node(), nb = bias.node();
  bool tx = x.tracked(), tw = w.tracked(), tb = bias.tracked() && bias.numel() != 0;
  return detail::finish_op<T>(
      "conv2d", Shape{co, oh, ow}, std::move(out), {&x, &w, &bias},
      [=](const std::vector<T>& g, GradTape<T>& tape) {
        if (tb) {
          auto& db = tape.grad_buffer(nb);
          for (std::size_t oc = 0; oc < co; ++oc) {
            T acc = T(0);
            const T* plane = g.data() + oc * oh * ow;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += plane[i];
            db[oc] += acc;
          }
        }
        if (tw) {
          auto& dw = tape.grad_buffer(nw);
          for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t ic = 0; ic < ci; ++ic)
              for (std::size_t ky = 0; ky < k; ++ky) {
                std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                auto ry = detail::valid_range(oy_off, stride, h, oh);
                for (std::size_t kx = 0; kx < k; ++kx) {
                  std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                  auto rx = detail::valid_range(ox_off, stride, wd, ow);
                  T acc = T(0);
                  for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                    const T* grow = g.data() + (oc * oh + oy) * ow;
                    const T* xrow = px->data() + (ic * h + oy * stride + oy_off) * wd + ox_off;
                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                      acc += grow[ox] * xrow[ox * stride];
                  }
                  dw[((oc * ci + ic) * k + ky) * k + kx] += acc;
                }
              }
        }
        if (tx) {
          auto& dx = tape.grad_buffer(nx);
          for (std::size_t ic = 0; ic < ci; ++ic)
            for (std::size_t oc = 0; oc < co; ++oc) {
              const T* wk = pw->data() + (oc * ci + ic) * k * k;
              for (std::size_t ky = 0; ky < k; ++ky) {
                std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                auto ry = detail::valid_range(oy_off, stride, h, oh);
                for (std::size_t kx = 0; kx < k; ++kx) {
                  T wv = wk[ky * k + kx];
                  if (wv == T(0)) continue;
                  std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                  auto rx = detail::valid_range(ox_off, stride, wd, ow);
                  for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                    const T* grow = g.data() + (oc * oh + oy) * ow;
                    T* dxrow = dx.data() + (ic * h + oy * stride + oy_off) * wd + ox_off;
                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                      dxrow[ox * stride] += wv * grow[ox];
                  }
                }
              }
            }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           std::size_t stride, std::size_t pad, std::size_t out_pad) {
  check_shape(x.rank() == 3, "conv_transpose2d: input must be CxHxW");
  check_shape(w.rank() == 4, "conv_transpose2d: weight must be CinxCoutxkxk");
  check_shape(stride >= 1, "conv_transpose2d: stride must be >= 1");
  check_shape(out_pad < stride, "conv_transpose2d: output_padding must be < stride");
  std::size_t cx = x.extent(0), h = x.extent(1), wd = x.extent(2);
  std::size_t cy = w.extent(1), k = w.extent(2);
  check_shape(w.extent(0) == cx, "conv_transpose2d: weight expects " +
                                     std::to_string(w.extent(0)) + " input channels, image has " +
                                     std::to_string(cx));
  check_shape(w.extent(2) == w.extent(3), "conv_transpose2d: kernel must be square");
  check_shape(bias.numel() == 0 || bias.numel() == cy,
              "conv_transpose2d: bias length must equal output channels");
  std::size_t oh = conv_transpose_out_extent(h, k, stride, pad, out_pad);
  std::size_t ow = conv_transpose_out_extent(wd, k, stride, pad, out_pad);
  check_shape(oh > 0 && ow > 0, "conv_transpose2d: empty output");

  std::vector<T> out(cy * oh * ow, T(0));
  const T* xd = x.data();
  const T* wdt = w.data();
  double work = static_cast<double>(cx) * cy * k * k * h * wd;
  parallel_for(cy, detail::conv_grain(cy, work), [&](std::size_t c0, std::size_t c1) {
    for (std::size_t oc = c0; oc < c1; ++oc) {
      T* plane = out.data() + oc * oh * ow;
      if (bias.numel() != 0) std::fill(plane, plane + oh * ow, bias.at(oc));
      for (std::size_t ic = 0; ic < cx; ++ic) {
        const T* xplane = xd + ic * h * wd;
        const T* wk = wdt + (ic * cy + oc) * k * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) -
                                  static_cast<std::ptrdiff_t>(pad);
          auto ry = detail::valid_range(oy_off, stride, oh, h);
          for (std::size_t kx = 0; kx < k; ++kx) {
            T wv = wk[ky * k + kx];
            if (wv == T(0)) continue;
            std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) -
                                    static_cast<std::ptrdiff_t>(pad);
            auto rx = detail::valid_range(ox_off, stride, ow, wd);
            for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
              const T* xrow = xplane + iy * wd;
              T* orow = plane + (iy * stride + oy_off) * ow + ox_off;
              for (std::size_t ix = rx.lo; ix < rx.hi; ++ix)
                orow[ix * stride] += wv * xrow[ix];
            }
          }
        }
      }
    }
  });

  auto px = x.shared_values();
  auto pw = w.shared_values();
  int nx = x.node(), nw = w.node(), nb = bias.node();
  bool tx = x.tracked(), tw = w.tracked(), tb = bias.tracked() && bias.numel() != 0;
  return detail::finish_op<T>(
      "conv_transpose2d", Shape{cy, oh, ow}, std::move(out), {&x, &w, &bias},
      [=](const std::vector<T>& g, GradTape<T>& tape) {
        if (tb) {
          auto& db = tape.grad_buffer(nb);
          for (std::size_t oc = 0; oc < cy; ++oc) {
            T acc = T(0);
            const T* plane = g.data() + oc * oh * ow;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += plane[i];
            db[oc] += acc;
          }
        }
        if (tw) {
          auto& dw = tape.grad_buffer(nw);
          for (std::size_t ic = 0; ic < cx; ++ic)
            for (std::size_t oc = 0; oc < cy; ++oc)
              for (std::size_t ky = 0; ky < k; ++ky) {
                std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                auto ry = detail::valid_range(oy_off, stride, oh, h);
                for (std::size_t kx = 0; kx < k; ++kx) {
                  std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                  auto rx = detail::valid_range(ox_off, stride, ow, wd);
                  T acc = T(0);
                  for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
                    const T* xrow = px->data() + (ic * h + iy) * wd;
                    const T* grow = g.data() + (oc * oh + iy * stride + oy_off) * ow + ox_off;
                    for (std::size_t ix = rx.lo; ix < rx.hi; ++ix)
                      acc += xrow[ix] * grow[ix * stride];
                  }
                  dw[((ic * cy + oc) * k + ky) * k + kx] += acc;
                }
              }
        }
        if (tx) {
          // Gather: the adjoint of the forward scatter.
          auto& dx = tape.grad_buffer(nx);
          for (std::size_t ic = 0; ic < cx; ++ic)
            for (std::size_t oc = 0; oc < cy; ++oc) {
              const T* wk = pw->data() + (ic * cy + oc) * k * k;
              for (std::size_t ky = 0; ky < k; ++ky) {
                std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                auto ry = detail::valid_range(oy_off, stride, oh, h);
                for (std::size_t kx = 0; kx < k; ++kx) {
                  T wv = wk[ky * k + kx];
                  if (wv == T(0)) continue;
                  std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                  auto rx = detail::valid_range(ox_off, stride, ow, wd);
                  for (std::size_t iy = ry.lo; iy < ry.hi; ++iy) {
                    T* dxrow = dx.data() + (ic * h + iy) * wd;
                    const T* grow = g.data() + (oc * oh + iy * stride + oy_off) * ow + ox_off;
                    for (std::size_t ix = rx.lo; ix < rx.hi; ++ix)
                      dxrow[ix] += wv * grow[ix * stride];
                  }
                }
              }
            }
        }
      });
}

// Align-corners bilinear resize; resizing to the input size is the exact
// identity (sample positions land on integer coordinates).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  check_shape(x.rank() == 3, "bilinear_resize: input must be CxHxW");
  check_shape(out_h >= 1 && out_w >= 1, "bilinear_resize: zero-sized target");
  std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  double sy = out_h > 1 ? static_cast<double>(h - 1) / static_cast<double>(out_h - 1) : 0.0;
  double sx = out_w > 1 ? static_cast<double>(w - 1) / static_cast<double>(out_w - 1) : 0.0;

  struct Tap {
    std::size_t i0, i1;
    T w1;  // weight of the i1 sample; i0 gets (1 - w1)
  };
  std::vector<Tap> ys(out_h), xs(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    double f = oy * sy;
    std::size_t i0 = std::min(static_cast<std::size_t>(f), h - 1);
    std::size_t i1 = std::min(i0 + 1, h - 1);
    ys[oy] = {i0, i1, static_cast<T>(f - static_cast<double>(i0))};
  }
  for (std::size_t ox = 0; ox < out_w; ++ox) {
    double f = ox * sx;
    std::size_t i0 = std::min(static_cast<std::size_t>(f), w - 1);
    std::size_t i1 = std::min(i0 + 1, w - 1);
    xs[ox] = {i0, i1, static_cast<T>(f - static_cast<double>(i0))};
  }

  // Zero-weight taps take the sample directly, which keeps same-size resize
  // bit-exact.
  std::vector<T> out(c * out_h * out_w);
  const T* xd = x.data();
  parallel_for(c, detail::conv_grain(c, static_cast<double>(c) * out_h * out_w * 4),
               [&](std::size_t cc0, std::size_t cc1) {
    for (std::size_t ch = cc0; ch < cc1; ++ch) {
      const T* plane = xd + ch * h * w;
      T* oplane = out.data() + ch * out_h * out_w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const Tap& ty = ys[oy];
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const Tap& tx = xs[ox];
          T v00 = plane[ty.i0 * w + tx.i0];
          T top = tx.w1 == T(0) ? v00
                                : v00 * (T(1) - tx.w1) + plane[ty.i0 * w + tx.i1] * tx.w1;
          T val = top;
          if (ty.w1 != T(0)) {
            T v10 = plane[ty.i1 * w + tx.i0];
            T bot = tx.w1 == T(0)
                        ? v10
                        : v10 * (T(1) - tx.w1) + plane[ty.i1 * w + tx.i1] * tx.w1;
            val = top * (T(1) - ty.w1) + bot * ty.w1;
          }
          oplane[oy * out_w + ox] = val;
        }
      }
    }
  });

  int nx = x.node();
  return detail::finish_op<T>(
      "bilinear_resize", Shape{c, out_h, out_w}, std::move(out), {&x},
      [nx, c, h, w, out_h, out_w, ys, xs](const std::vector<T>& g, GradTape<T>& tape) {
        auto& dx = tape.grad_buffer(nx);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* dplane = dx.data() + ch * h * w;
          const T* gplane = g.data() + ch * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& ty = ys[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto& tx = xs[ox];
              T gv = gplane[oy * out_w + ox];
              dplane[ty.i0 * w + tx.i0] += gv * (T(1) - ty.w1) * (T(1) - tx.w1);
              if (tx.w1 != T(0)) dplane[ty.i0 * w + tx.i1] += gv * (T(1) - ty.w1) * tx.w1;
              if (ty.w1 != T(0)) {
                dplane[ty.i1 * w + tx.i0] += gv * ty.w1 * (T(1) - tx.w1);
                if (tx.w1 != T(0)) dplane[ty.i1 * w + tx.i1] += gv * ty.w1 * tx.w1;
              }
            }
          }
        }
      });
}

}  // namespace dpt
