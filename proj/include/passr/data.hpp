#pragma once

// Stereo training data: bicubic degradation, a synthetic stereo generator with
// exact disparity and visibility, patch extraction, and augmentation.
//
// Images are H x W x 3 tensors in [0, 1]. Disparities are stored at LR scale.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "passr/pam.hpp"
#include "passr/rng.hpp"
#include "passr/tensor.hpp"

namespace passr {

// ---------------------------------------------------------------------------
// Cubic convolution resampling

inline double cubic_kernel(double x, double a = -0.5) {
  const double ax = std::abs(x);
  if (ax <= 1.0) return ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0;
  if (ax < 2.0) return ((a * ax - 5.0 * a) * ax + 8.0 * a) * ax - 4.0 * a;
  return 0.0;
}

namespace detail {

struct ResampleTap {
  std::size_t index;
  double weight;
};

// Per-output taps along one axis. Output sample u sits at input coordinate
// (u + 0.5) / scale - 0.5. When shrinking, the kernel is stretched by 1/scale
// (antialiasing). Indices are clamped to the edge; weights are normalized.
inline std::vector<std::vector<ResampleTap>> resample_taps(std::size_t in_len,
                                                           std::size_t out_len, double scale) {
  const double kscale = std::min(scale, 1.0);
  const double half_width = 2.0 / kscale;
  std::vector<std::vector<ResampleTap>> taps(out_len);
  for (std::size_t u = 0; u < out_len; ++u) {
    const double x = (static_cast<double>(u) + 0.5) / scale - 0.5;
    const long first = static_cast<long>(std::floor(x - half_width));
    const long last = static_cast<long>(std::ceil(x + half_width));
    double total = 0.0;
    for (long k = first; k <= last; ++k) {
      const double wgt = kscale * cubic_kernel((x - static_cast<double>(k)) * kscale);
      if (wgt == 0.0) continue;
      const long clamped = std::clamp(k, 0L, static_cast<long>(in_len) - 1);
      taps[u].push_back({static_cast<std::size_t>(clamped), wgt});
      total += wgt;
    }
    for (auto& t : taps[u]) t.weight /= total;
  }
  return taps;
}

}  // namespace detail

// Separable bicubic resize (a = -0.5). `factor` must be one of 1/4, 1/2, 1,
// 2, 4; output extents are round(extent * factor).
template <typename T>
Tensor<T> bicubic_resize(const Tensor<T>& img, double factor) {
  if (!(factor == 0.25 || factor == 0.5 || factor == 1.0 || factor == 2.0 || factor == 4.0)) {
    throw std::invalid_argument("bicubic_resize factor must be 1/4, 1/2, 1, 2 or 4");
  }
  if (img.rank() != 3) throw ShapeError("bicubic_resize expects H x W x C");
  const std::size_t h = img.extent(0), w = img.extent(1), c = img.extent(2);
  const auto oh = static_cast<std::size_t>(std::llround(static_cast<double>(h) * factor));
  const auto ow = static_cast<std::size_t>(std::llround(static_cast<double>(w) * factor));
  if (oh == 0 || ow == 0) throw ShapeError("bicubic_resize output would be empty");
  if (factor == 1.0) return img;

  const auto tx = detail::resample_taps(w, ow, factor);
  const auto ty = detail::resample_taps(h, oh, factor);
  std::vector<double> mid(h * ow * c, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      for (const auto& t : tx[x]) {
        const T* src = img.raw() + (y * w + t.index) * c;
        double* dst = mid.data() + (y * ow + x) * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += t.weight * static_cast<double>(src[ch]);
      }
    }
  }
  Tensor<T> out({oh, ow, c});
  std::vector<double> acc(c);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (const auto& t : ty[y]) {
        const double* src = mid.data() + (t.index * ow + x) * c;
        for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += t.weight * src[ch];
      }
      for (std::size_t ch = 0; ch < c; ++ch) out(y, x, ch) = static_cast<T>(acc[ch]);
    }
  }
  return out;
}

template <typename T>
Tensor<T> bicubic_downsample(const Tensor<T>& img, std::size_t s) {
  return bicubic_resize(img, 1.0 / static_cast<double>(s));
}

// LR image from an HR one: bicubic downsampling, then clamping the kernel's
// overshoot back into [0, 1].
template <typename T>
Tensor<T> degrade(const Tensor<T>& hr, std::size_t s) {
  Tensor<T> lr = bicubic_downsample(hr, s);
  for (auto& v : lr.data()) v = std::clamp(v, T{0}, T{1});
  return lr;
}

template <typename T>
Tensor<T> bicubic_upsample(const Tensor<T>& img, std::size_t s) {
  return bicubic_resize(img, static_cast<double>(s));
}

// ---------------------------------------------------------------------------
// Stereo samples

template <typename T>
struct StereoSample {
  Tensor<T> left_hr, right_hr;  // sH x sW x 3
  Tensor<T> left_lr, right_lr;  // H x W x 3
  std::size_t scale = 1;
  std::optional<DisparityMap<T>> left_disparity;   // LR scale, left view
  std::optional<DisparityMap<T>> right_disparity;  // LR scale, right view
};

template <typename T>
Tensor<T> crop(const Tensor<T>& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > img.extent(0) || x0 + w > img.extent(1)) throw ShapeError("crop window out of range");
  Shape shape = img.shape();
  shape[0] = h;
  shape[1] = w;
  const std::size_t c = img.rank() == 3 ? img.extent(2) : 1;
  Tensor<T> out(shape);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(img.raw() + ((y0 + y) * img.extent(1) + x0) * c, w * c, out.raw() + y * w * c);
  }
  return out;
}

// Mirror along rows (vertical) or columns (horizontal); works for rank 2 and 3.
template <typename T>
Tensor<T> flip(const Tensor<T>& img, bool horizontal) {
  const std::size_t h = img.extent(0), w = img.extent(1);
  const std::size_t c = img.rank() == 3 ? img.extent(2) : 1;
  Tensor<T> out(img.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = horizontal ? y : h - 1 - y;
      const std::size_t sx = horizontal ? w - 1 - x : x;
      std::copy_n(img.raw() + (sy * w + sx) * c, c, out.raw() + (y * w + x) * c);
    }
  }
  return out;
}

// Whether the (possibly fractional) source column of a disparity lies inside
// [0, width): both neighbouring integer columns must exist.
inline bool source_in_range(double src, std::size_t width) {
  return std::floor(src) >= 0.0 && std::ceil(src) <= static_cast<double>(width) - 1.0;
}

// ---------------------------------------------------------------------------
// Synthetic stereo generator

struct DisparityProfile {
  enum class Kind { kConstant, kBlock, kGradient };
  Kind kind = Kind::kConstant;
  double background = 0.0;  // constant disparity, or block background
  double foreground = 0.0;  // block disparity
  std::size_t block_begin = 0, block_end = 0;  // left-view LR columns of the block
  double gradient_left = 0.0, gradient_right = 0.0;  // disparity at columns 0 and W-1

  static DisparityProfile constant(double d) {
    DisparityProfile p;
    p.background = d;
    return p;
  }
  // A nearer rectangle spanning all rows at left-view columns [begin, end).
  static DisparityProfile block(double bg, double fg, std::size_t begin, std::size_t end) {
    DisparityProfile p;
    p.kind = Kind::kBlock;
    p.background = bg;
    p.foreground = fg;
    p.block_begin = begin;
    p.block_end = end;
    return p;
  }
  static DisparityProfile gradient(double left, double right) {
    DisparityProfile p;
    p.kind = Kind::kGradient;
    p.gradient_left = left;
    p.gradient_right = right;
    return p;
  }

  double max_disparity() const {
    switch (kind) {
      case Kind::kConstant: return background;
      case Kind::kBlock: return std::max(background, foreground);
      case Kind::kGradient: return std::max(gradient_left, gradient_right);
    }
    return 0.0;
  }
};

struct SynthOptions {
  double texture_sigma = 0.6;   // Gaussian blur of the noise, in LR pixels
  double texture_std = 0.2;     // target standard deviation before clamping
  double chroma = 0.35;         // per-channel noise relative to the shared component
};

namespace detail {

inline std::vector<double> gaussian_taps(double sigma) {
  const long radius = std::max(1L, static_cast<long>(std::ceil(3.0 * sigma)));
  std::vector<double> w(2 * radius + 1);
  double total = 0.0;
  for (long k = -radius; k <= radius; ++k) {
    w[k + radius] = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
    total += w[k + radius];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Separable Gaussian blur of a single-channel h x w field with clamped edges.
inline std::vector<double> blur(const std::vector<double>& src, std::size_t h, std::size_t w,
                                const std::vector<double>& taps) {
  const long r = static_cast<long>(taps.size() / 2);
  std::vector<double> tmp(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long k = -r; k <= r; ++k) {
        const long xx = std::clamp(static_cast<long>(x) + k, 0L, static_cast<long>(w) - 1);
        acc += taps[k + r] * src[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long k = -r; k <= r; ++k) {
        const long yy = std::clamp(static_cast<long>(y) + k, 0L, static_cast<long>(h) - 1);
        acc += taps[k + r] * tmp[yy * w + x];
      }
      out[y * w + x] = acc;
    }
  return out;
}

// Band-limited colour noise: uniform noise blurred by a Gaussian, scaled to
// the target standard deviation around 0.5, then clamped to [0, 1].
template <typename T>
Tensor<T> texture(Rng& rng, std::size_t h, std::size_t w, double sigma, const SynthOptions& opt) {
  const auto taps = gaussian_taps(sigma);
  double sum_sq = 0.0;
  for (double t : taps) sum_sq += t * t;
  // Variance of blurred iid U(-1, 1) noise is (1/3) (sum w^2)^2 in 2-D.
  const double noise_std = std::sqrt(sum_sq * sum_sq / 3.0);
  auto field = [&] {
    std::vector<double> f(h * w);
    for (auto& v : f) v = rng.uniform(-1.0, 1.0);
    return blur(f, h, w, taps);
  };
  const auto shared = field();
  const double norm = opt.texture_std / (noise_std * std::sqrt(1.0 + opt.chroma * opt.chroma));
  Tensor<T> img({h, w, 3});
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const auto own = field();
    for (std::size_t n = 0; n < h * w; ++n) {
      const double v = 0.5 + norm * (shared[n] + opt.chroma * own[n]);
      img[n * 3 + ch] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

// Linear interpolation along x of an H x W x 3 canvas.
template <typename T>
void sample_row(const Tensor<T>& canvas, std::size_t y, double x, T* out) {
  const std::size_t w = canvas.extent(1);
  const double fx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(fx));
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double t = fx - static_cast<double>(x0);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double a = canvas(y, x0, ch), b = canvas(y, x1, ch);
    out[ch] = static_cast<T>(t == 0.0 ? a : a + t * (b - a));
  }
}

}  // namespace detail

// Left-view layer index (0 background, 1 foreground) at LR column j.
inline int left_layer(const DisparityProfile& p, double j) {
  return p.kind == DisparityProfile::Kind::kBlock && j >= static_cast<double>(p.block_begin) &&
                 j < static_cast<double>(p.block_end)
             ? 1
             : 0;
}

// Right-view layer at LR column x: the block appears shifted left by its disparity.
inline int right_layer(const DisparityProfile& p, double x) {
  if (p.kind != DisparityProfile::Kind::kBlock) return 0;
  const double b = static_cast<double>(p.block_begin) - p.foreground;
  const double e = static_cast<double>(p.block_end) - p.foreground;
  return x >= b && x < e ? 1 : 0;
}

// Left-view disparity at continuous LR column u.
inline double left_disparity_at(const DisparityProfile& p, double u, std::size_t width) {
  switch (p.kind) {
    case DisparityProfile::Kind::kConstant: return p.background;
    case DisparityProfile::Kind::kBlock: return left_layer(p, u) ? p.foreground : p.background;
    case DisparityProfile::Kind::kGradient: {
      const double g = (p.gradient_right - p.gradient_left) / static_cast<double>(width - 1);
      return p.gradient_left + g * u;
    }
  }
  return 0.0;
}

// Right-view disparity at continuous LR column x.
inline double right_disparity_at(const DisparityProfile& p, double x, std::size_t width) {
  switch (p.kind) {
    case DisparityProfile::Kind::kConstant: return p.background;
    case DisparityProfile::Kind::kBlock: return right_layer(p, x) ? p.foreground : p.background;
    case DisparityProfile::Kind::kGradient: {
      // Solve u - d(u) = x for the linear left-view profile.
      const double g = (p.gradient_right - p.gradient_left) / static_cast<double>(width - 1);
      const double u = (x + p.gradient_left) / (1.0 - g);
      return u - x;
    }
  }
  return 0.0;
}

// Generates an H x W (LR) stereo pair at upscale factor s. The right view is
// the reference rendering of the scene; the left view samples it through the
// disparity field. Pixels hidden in the other view, or outside it, are
// flagged invisible and show texture that has no counterpart.
//
// When every disparity is an integer at LR scale, LR views are rendered layer
// by layer from bicubic-downsampled textures, so visible LR pixels match the
// opposite view exactly. Otherwise the LR views are the degraded HR
// renderings.
template <typename T>
StereoSample<T> synth_stereo(std::uint64_t seed, std::size_t h, std::size_t w,
                             const DisparityProfile& profile, std::size_t s,
                             const SynthOptions& opt = {}) {
  using Kind = DisparityProfile::Kind;
  if (h == 0 || w < 2 || s == 0) throw std::invalid_argument("synth_stereo: degenerate extents");
  const double dmax = profile.max_disparity();
  if (profile.background < 0 || profile.foreground < 0 || profile.gradient_left < 0 ||
      profile.gradient_right < 0) {
    throw std::invalid_argument("synth_stereo: disparities must be nonnegative");
  }
  if (dmax >= static_cast<double>(w)) throw std::invalid_argument("synth_stereo: disparity exceeds width");
  if (profile.kind == Kind::kBlock) {
    if (profile.block_begin >= profile.block_end || profile.block_end > w) {
      throw std::invalid_argument("synth_stereo: invalid block columns");
    }
    if (std::floor(profile.background) != profile.background ||
        std::floor(profile.foreground) != profile.foreground) {
      throw std::invalid_argument("synth_stereo: block disparities must be integers");
    }
  }
  if (profile.kind == Kind::kGradient &&
      std::abs(profile.gradient_right - profile.gradient_left) >= static_cast<double>(w - 1)) {
    throw std::invalid_argument("synth_stereo: disparity gradient too steep");
  }
  auto integral = [](double d) { return std::floor(d) == d; };
  auto hr_integral = [&](double d) { return integral(d * static_cast<double>(s)); };
  if (profile.kind != Kind::kGradient &&
      !(hr_integral(profile.background) && hr_integral(profile.foreground))) {
    throw std::invalid_argument("synth_stereo: disparity times scale must be an integer");
  }
  const bool lr_integral = profile.kind != Kind::kGradient && integral(profile.background) &&
                           integral(profile.foreground);

  // Canvas geometry. LR margin covers the downsampling kernel; the texture
  // also extends left far enough for the largest disparity.
  const std::size_t margin = 4;
  const std::size_t dpad = static_cast<std::size_t>(std::ceil(dmax)) + 2;
  const std::size_t ch_lr = h + 2 * margin, cw_lr = w + 2 * margin + dpad;
  const std::size_t ch_hr = ch_lr * s, cw_hr = cw_lr * s;
  const double sd = static_cast<double>(s);

  Rng rng(seed);
  const double sigma_hr = opt.texture_sigma * sd;
  std::vector<Tensor<T>> tex_hr{detail::texture<T>(rng, ch_hr, cw_hr, sigma_hr, opt)};
  if (profile.kind == Kind::kBlock) tex_hr.push_back(detail::texture<T>(rng, ch_hr, cw_hr, sigma_hr, opt));

  // Texture column of right-view HR column x (x may be negative inside the margin).
  const double tex_offset_hr = static_cast<double>((margin + dpad) * s);
  const std::size_t eh_hr = (h + 2 * margin) * s, ew_hr = (w + 2 * margin) * s;

  auto render_hr = [&](bool left_view) {
    Tensor<T> img({eh_hr, ew_hr, 3});
    for (std::size_t y = 0; y < eh_hr; ++y) {
      for (std::size_t xe = 0; xe < ew_hr; ++xe) {
        const double x = static_cast<double>(xe) - static_cast<double>(margin * s);
        const double u = (x + 0.5) / sd - 0.5;  // LR coordinate of this HR column
        double src;
        int layer;
        if (left_view) {
          layer = left_layer(profile, std::floor(x / sd));
          const double d = profile.kind == Kind::kGradient ? left_disparity_at(profile, u, w)
                                                           : (layer ? profile.foreground : profile.background);
          src = x - d * sd;
        } else {
          layer = right_layer(profile, std::floor(x / sd));
          src = x;
        }
        detail::sample_row(tex_hr[layer], y, src + tex_offset_hr, img.raw() + (y * ew_hr + xe) * 3);
      }
    }
    return img;
  };

  StereoSample<T> out;
  out.scale = s;
  const Tensor<T> left_ext = render_hr(true);
  const Tensor<T> right_ext = render_hr(false);
  out.left_hr = crop(left_ext, margin * s, margin * s, h * s, w * s);
  out.right_hr = crop(right_ext, margin * s, margin * s, h * s, w * s);

  if (lr_integral) {
    std::vector<Tensor<T>> tex_lr;
    for (const auto& t : tex_hr) tex_lr.push_back(degrade(t, s));
    const auto tex_offset_lr = static_cast<long>(margin + dpad);
    auto render_lr = [&](bool left_view) {
      Tensor<T> img({h, w, 3});
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double xd = static_cast<double>(x);
          const int layer = left_view ? left_layer(profile, xd) : right_layer(profile, xd);
          const long d = left_view ? static_cast<long>(layer ? profile.foreground : profile.background) : 0;
          const long tx = static_cast<long>(x) - d + tex_offset_lr;
          std::copy_n(tex_lr[layer].raw() + ((y + margin) * cw_lr + static_cast<std::size_t>(tx)) * 3, 3,
                      img.raw() + (y * w + x) * 3);
        }
      }
      return img;
    };
    out.left_lr = render_lr(true);
    out.right_lr = render_lr(false);
  } else {
    out.left_lr = crop(degrade(left_ext, s), margin, margin, h, w);
    out.right_lr = crop(degrade(right_ext, s), margin, margin, h, w);
  }

  // Ground truth at LR scale.
  DisparityMap<T> dl{Tensor<T>({h, w}), Tensor<T>({h, w})};
  DisparityMap<T> dr{Tensor<T>({h, w}), Tensor<T>({h, w})};
  for (std::size_t x = 0; x < w; ++x) {
    const double xd = static_cast<double>(x);
    const double d_left = left_disparity_at(profile, xd, w);
    const double d_right = right_disparity_at(profile, xd, w);
    const double src_l = xd - d_left;
    const double src_r = xd + d_right;
    bool vis_l = source_in_range(src_l, w);
    bool vis_r = source_in_range(src_r, w);
    if (profile.kind == Kind::kBlock) {
      vis_l = vis_l && right_layer(profile, src_l) == left_layer(profile, xd);
      vis_r = vis_r && left_layer(profile, src_r) == right_layer(profile, xd);
    }
    for (std::size_t y = 0; y < h; ++y) {
      dl.values(y, x) = static_cast<T>(d_left);
      dr.values(y, x) = static_cast<T>(d_right);
      (*dl.visible)(y, x) = vis_l ? T{1} : T{0};
      (*dr.visible)(y, x) = vis_r ? T{1} : T{0};
    }
  }
  out.left_disparity = std::move(dl);
  out.right_disparity = std::move(dr);
  return out;
}

// Scanline visibility of a left-view disparity map against a right-view one:
// left pixel j sees right column j - d when that column exists and maps back
// to j. Used to re-derive occlusion flags independently of the generator.
template <typename T>
Tensor<T> derive_visibility(const Tensor<T>& own, const Tensor<T>& other, bool own_is_left) {
  const std::size_t h = own.extent(0), w = own.extent(1);
  Tensor<T> vis({h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double d = own(y, x);
      const double src = own_is_left ? static_cast<double>(x) - d : static_cast<double>(x) + d;
      if (!source_in_range(src, w) || std::floor(src) != src) {
        vis(y, x) = source_in_range(src, w) ? T{1} : T{0};
        continue;
      }
      const auto k = static_cast<std::size_t>(src);
      const double back = own_is_left ? static_cast<double>(k) + other(y, k)
                                      : static_cast<double>(k) - other(y, k);
      vis(y, x) = back == static_cast<double>(x) ? T{1} : T{0};
    }
  }
  return vis;
}

// ---------------------------------------------------------------------------
// Patches and augmentation

struct PatchSpec {
  std::size_t height = 30;  // LR
  std::size_t width = 90;   // LR
  std::size_t stride = 20;  // LR
};

namespace detail {

template <typename T>
DisparityMap<T> crop_disparity(const DisparityMap<T>& d, std::size_t y0, std::size_t x0,
                               std::size_t h, std::size_t w, bool left_view) {
  DisparityMap<T> out{crop(d.values, y0, x0, h, w), Tensor<T>({h, w}, T{1})};
  if (d.visible) out.visible = crop(*d.visible, y0, x0, h, w);
  // Correspondences that leave the window become invisible.
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double disp = out.values(y, x);
      const double src = left_view ? static_cast<double>(x) - disp : static_cast<double>(x) + disp;
      if (!source_in_range(src, w)) (*out.visible)(y, x) = T{0};
    }
  }
  return out;
}

}  // namespace detail

// Aligned windows: identical LR windows in both views, s-scaled HR windows.
template <typename T>
std::vector<StereoSample<T>> extract_patches(const StereoSample<T>& sample, const PatchSpec& spec) {
  const std::size_t h = sample.left_lr.extent(0), w = sample.left_lr.extent(1), s = sample.scale;
  if (spec.stride == 0) throw std::invalid_argument("patch stride must be positive");
  if (h < spec.height || w < spec.width) {
    throw std::invalid_argument("image smaller than patch");
  }
  std::vector<StereoSample<T>> out;
  for (std::size_t y = 0; y + spec.height <= h; y += spec.stride) {
    for (std::size_t x = 0; x + spec.width <= w; x += spec.stride) {
      StereoSample<T> p;
      p.scale = s;
      p.left_lr = crop(sample.left_lr, y, x, spec.height, spec.width);
      p.right_lr = crop(sample.right_lr, y, x, spec.height, spec.width);
      p.left_hr = crop(sample.left_hr, y * s, x * s, spec.height * s, spec.width * s);
      p.right_hr = crop(sample.right_hr, y * s, x * s, spec.height * s, spec.width * s);
      if (sample.left_disparity) {
        p.left_disparity = detail::crop_disparity(*sample.left_disparity, y, x, spec.height, spec.width, true);
      }
      if (sample.right_disparity) {
        p.right_disparity = detail::crop_disparity(*sample.right_disparity, y, x, spec.height, spec.width, false);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <typename T>
DisparityMap<T> flip_disparity(const DisparityMap<T>& d, bool horizontal) {
  DisparityMap<T> out{flip(d.values, horizontal), std::nullopt};
  if (d.visible) out.visible = flip(*d.visible, horizontal);
  return out;
}

template <typename T>
StereoSample<T> flip_vertical(const StereoSample<T>& in) {
  StereoSample<T> out = in;
  out.left_hr = flip(in.left_hr, false);
  out.right_hr = flip(in.right_hr, false);
  out.left_lr = flip(in.left_lr, false);
  out.right_lr = flip(in.right_lr, false);
  if (in.left_disparity) out.left_disparity = flip_disparity(*in.left_disparity, false);
  if (in.right_disparity) out.right_disparity = flip_disparity(*in.right_disparity, false);
  return out;
}

// A mirrored left image is geometrically a right image, so the views swap
// roles; disparities stay nonnegative.
template <typename T>
StereoSample<T> flip_horizontal_swap(const StereoSample<T>& in) {
  StereoSample<T> out;
  out.scale = in.scale;
  out.left_hr = flip(in.right_hr, true);
  out.right_hr = flip(in.left_hr, true);
  out.left_lr = flip(in.right_lr, true);
  out.right_lr = flip(in.left_lr, true);
  if (in.right_disparity) out.left_disparity = flip_disparity(*in.right_disparity, true);
  if (in.left_disparity) out.right_disparity = flip_disparity(*in.left_disparity, true);
  return out;
}

// Random vertical flip and random horizontal flip-and-swap. Never rotates.
template <typename T>
StereoSample<T> augment(const StereoSample<T>& in, std::uint64_t seed) {
  Rng rng(seed);
  const bool vflip = rng.coin();
  const bool hflip = rng.coin();
  StereoSample<T> out = vflip ? flip_vertical(in) : in;
  return hflip ? flip_horizontal_swap(out) : out;
}

}  // namespace passr
