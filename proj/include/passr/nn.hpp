#pragma once

// Layers of the super-resolution network. Feature maps are H x W x C
// (channel-last); kernels are kh x kw x Cin x Cout.

#include <cmath>
#include <cstddef>
#include <vector>

#include "passr/autodiff.hpp"
#include "passr/rng.hpp"

namespace passr {

inline constexpr double kLeakySlope = 0.1;

template <typename T>
struct Conv2dParams {
  Var<T> kernel;
  Var<T> bias;
  std::size_t dilation = 1;
};

template <typename T>
struct ResidualBlockParams {
  Conv2dParams<T> first;
  Conv2dParams<T> second;
};

// Output extent along one axis is always the input extent: stride 1 with
// symmetric zero padding of (k - 1) / 2 * dilation.
inline std::size_t receptive_field(std::size_t kernel, std::size_t dilation) {
  return (kernel - 1) * dilation + 1;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
  const Shape& xs = x.shape();
  const Shape& ks = p.kernel.shape();
  if (xs.size() != 3) throw ShapeError("conv2d input must be H x W x C, got " + to_string(xs));
  if (ks.size() != 4) throw ShapeError("conv2d kernel must be kh x kw x Cin x Cout");
  if (p.dilation == 0) throw ShapeError("conv2d dilation must be positive");
  if (ks[0] % 2 == 0 || ks[1] % 2 == 0) throw ShapeError("conv2d kernel extents must be odd");
  if (ks[2] != xs[2]) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(xs) + ", kernel " +
                     to_string(ks));
  }
  if (p.bias.shape() != Shape{ks[3]}) throw ShapeError("conv2d bias must have Cout entries");

  const std::size_t h = xs[0], w = xs[1], cin = xs[2];
  const std::size_t kh = ks[0], kw = ks[1], cout = ks[3];
  const std::size_t d = p.dilation;
  const long pad_y = static_cast<long>((kh / 2) * d);
  const long pad_x = static_cast<long>((kw / 2) * d);

  // Calls fn(out_pixel, in_pixel, tap) for every in-bounds kernel tap.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(y) + static_cast<long>(ky * d) - pad_y;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t xo = 0; xo < w; ++xo) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(xo) + static_cast<long>(kx * d) - pad_x;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            fn(y * w + xo, static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix),
               ky * kw + kx);
          }
        }
      }
    }
  };

  Tensor<T> out({h, w, cout});
  {
    const T* in = x.value().raw();
    const T* k = p.kernel.value().raw();
    const T* b = p.bias.value().raw();
    T* o = out.raw();
    for (std::size_t px = 0; px < h * w; ++px) {
      for (std::size_t co = 0; co < cout; ++co) o[px * cout + co] = b[co];
    }
    for_each_tap([&](std::size_t op, std::size_t ip, std::size_t tap) {
      T* orow = o + op * cout;
      const T* irow = in + ip * cin;
      const T* ktap = k + tap * cin * cout;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T v = irow[ci];
        const T* kr = ktap + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) orow[co] += v * kr[co];
      }
    });
  }

  return x.tape().record(
      "conv2d", std::move(out), {x, p.kernel, p.bias},
      [x, kernel = p.kernel, h, w, cin, cout, kh, kw, for_each_tap](const Tensor<T>& g,
                                                                    GradSink<T>& sink) {
        const T* gp = g.raw();
        if (sink.wants(0)) {
          // Kernel transposed per tap to Cout x Cin so the inner loop is contiguous.
          const T* k = kernel.value().raw();
          std::vector<T> kt(kh * kw * cin * cout);
          for (std::size_t tap = 0; tap < kh * kw; ++tap) {
            for (std::size_t ci = 0; ci < cin; ++ci) {
              for (std::size_t co = 0; co < cout; ++co) {
                kt[(tap * cout + co) * cin + ci] = k[(tap * cin + ci) * cout + co];
              }
            }
          }
          T* gx = sink.slot(0).raw();
          for_each_tap([&](std::size_t op, std::size_t ip, std::size_t tap) {
            const T* grow = gp + op * cout;
            T* gxrow = gx + ip * cin;
            const T* ktap = kt.data() + tap * cout * cin;
            for (std::size_t co = 0; co < cout; ++co) {
              const T gv = grow[co];
              const T* kr = ktap + co * cin;
              for (std::size_t ci = 0; ci < cin; ++ci) gxrow[ci] += gv * kr[ci];
            }
          });
        }
        if (sink.wants(1)) {
          const T* in = x.value().raw();
          T* gk = sink.slot(1).raw();
          for_each_tap([&](std::size_t op, std::size_t ip, std::size_t tap) {
            const T* grow = gp + op * cout;
            const T* irow = in + ip * cin;
            T* gktap = gk + tap * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T v = irow[ci];
              T* gkr = gktap + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) gkr[co] += v * grow[co];
            }
          });
        }
        if (sink.wants(2)) {
          T* gb = sink.slot(2).raw();
          for (std::size_t px = 0; px < h * w; ++px) {
            for (std::size_t co = 0; co < cout; ++co) gb[co] += gp[px * cout + co];
          }
        }
      });
}

// x + conv(lrelu(conv(x))); no activation after the sum.
template <typename T>
Var<T> residual_block(const Var<T>& x, const ResidualBlockParams<T>& p) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || p.first.kernel.shape()[2] != xs[2] ||
      p.second.kernel.shape()[3] != xs[2]) {
    throw ShapeError("residual block channel mismatch for input " + to_string(xs));
  }
  Var<T> y = leaky_relu(conv2d(x, p.first), static_cast<T>(kLeakySlope));
  return add(x, conv2d(y, p.second));
}

// Depth-to-space. For input H x W x (C s^2) the output is sH x sW x C with
//   out[y s + dy, x s + dx, c] = in[y, x, c s^2 + dy s + dx].
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t s) {
  const Shape& xs = x.shape();
  if (s == 0) throw ShapeError("pixel_shuffle scale must be positive");
  if (xs.size() != 3 || xs[2] % (s * s) != 0) {
    throw ShapeError("pixel_shuffle channels must be divisible by s^2, got " + to_string(xs));
  }
  const std::size_t h = xs[0], w = xs[1], c = xs[2] / (s * s);
  const std::size_t ow = w * s;
  auto src_index = [=](std::size_t oy, std::size_t ox, std::size_t ch) {
    const std::size_t y = oy / s, dy = oy % s, xx = ox / s, dx = ox % s;
    return (y * w + xx) * (c * s * s) + ch * s * s + dy * s + dx;
  };
  Tensor<T> out({h * s, ow, c});
  const T* in = x.value().raw();
  for (std::size_t oy = 0; oy < h * s; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        out[(oy * ow + ox) * c + ch] = in[src_index(oy, ox, ch)];
      }
    }
  }
  return x.tape().record("pixel_shuffle", std::move(out), {x},
                         [=](const Tensor<T>& g, GradSink<T>& sink) {
                           T* gx = sink.slot(0).raw();
                           for (std::size_t oy = 0; oy < h * s; ++oy) {
                             for (std::size_t ox = 0; ox < ow; ++ox) {
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 gx[src_index(oy, ox, ch)] += g[(oy * ow + ox) * c + ch];
                               }
                             }
                           }
                         });
}

// 1x1 expansion C -> C s^2 followed by depth-to-space.
template <typename T>
Var<T> pixel_shuffle_upsample(const Var<T>& x, const Conv2dParams<T>& expand, std::size_t s) {
  if (s != 2 && s != 4) throw std::invalid_argument("upscale factor must be 2 or 4");
  const Shape& ks = expand.kernel.shape();
  if (ks.size() != 4 || ks[0] != 1 || ks[1] != 1 || ks[3] != ks[2] * s * s) {
    throw ShapeError("sub-pixel expansion must be a 1x1 conv C -> C*s^2");
  }
  return pixel_shuffle(conv2d(x, expand), s);
}

// U(-b, b) with b = 1 / sqrt(fan_in), fan_in = kh * kw * Cin (the common
// framework default for conv layers). Biases start at zero. The stricter
// variance-preserving bound makes the unnormalized residual stack blow up.
template <typename T>
Tensor<T> init_conv_kernel(Rng& rng, std::size_t kh, std::size_t kw, std::size_t cin,
                           std::size_t cout) {
  const double fan_in = static_cast<double>(kh * kw * cin);
  const double bound = 1.0 / std::sqrt(fan_in);
  Tensor<T> k({kh, kw, cin, cout});
  for (auto& v : k.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return k;
}

}  // namespace passr
