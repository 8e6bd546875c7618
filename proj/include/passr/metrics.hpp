#pragma once

// PSNR and SSIM on [0, 1] images with a border crop on every side.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "passr/tensor.hpp"

namespace passr {

struct EvalConfig {
  std::size_t border = 0;       // pixels dropped on each side; callers default it to the scale
  bool quantized = false;       // round both images to 8-bit levels before scoring
  double peak = 1.0;            // dynamic range R
  double psnr_cap = 99.0;       // reported for identical images
  std::size_t ssim_window = 11;
  double ssim_sigma = 1.5;
};

inline EvalConfig eval_config_for_scale(std::size_t scale) {
  EvalConfig c;
  c.border = scale;
  return c;
}

namespace detail {

inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline void check_pair(const Tensor<float>& a, const Tensor<float>& b, const EvalConfig& cfg) {
  if (a.shape() != b.shape()) {
    throw ShapeError("metric inputs differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.rank() != 3 || a.extent(2) != 3) throw ShapeError("metrics expect H x W x 3 images");
  if (2 * cfg.border >= a.extent(0) || 2 * cfg.border >= a.extent(1)) {
    throw std::invalid_argument("border crop leaves no pixels");
  }
}

// Cropped luma plane (0.299 R + 0.587 G + 0.114 B) in double.
inline std::vector<double> luma(const Tensor<float>& img, const EvalConfig& cfg, std::size_t& h, std::size_t& w) {
  h = img.extent(0) - 2 * cfg.border;
  w = img.extent(1) - 2 * cfg.border;
  std::vector<double> y(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double rgb[3];
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = img(i + cfg.border, j + cfg.border, c);
        rgb[c] = cfg.quantized ? quantize8(v) : v;
      }
      y[i * w + j] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    }
  }
  return y;
}

}  // namespace detail

inline double mse(const Tensor<float>& a, const Tensor<float>& b, const EvalConfig& cfg) {
  detail::check_pair(a, b, cfg);
  const std::size_t h = a.extent(0), w = a.extent(1), bd = cfg.border;
  double acc = 0.0;
  for (std::size_t i = bd; i < h - bd; ++i) {
    for (std::size_t j = bd; j < w - bd; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        double x = a(i, j, c), y = b(i, j, c);
        if (cfg.quantized) x = detail::quantize8(x), y = detail::quantize8(y);
        acc += (x - y) * (x - y);
      }
    }
  }
  return acc / static_cast<double>((h - 2 * bd) * (w - 2 * bd) * 3);
}

// 10 log10(R^2 / MSE) over all three channels; `psnr_cap` when MSE is zero.
inline double psnr(const Tensor<float>& a, const Tensor<float>& b, const EvalConfig& cfg) {
  const double m = mse(a, b, cfg);
  if (m == 0.0) return cfg.psnr_cap;
  return std::min(cfg.psnr_cap, 10.0 * std::log10(cfg.peak * cfg.peak / m));
}

// Mean SSIM over every fully-inside Gaussian window of the luma plane.
inline double ssim(const Tensor<float>& a, const Tensor<float>& b, const EvalConfig& cfg) {
  detail::check_pair(a, b, cfg);
  std::size_t h = 0, w = 0;
  const auto x = detail::luma(a, cfg, h, w);
  const auto y = detail::luma(b, cfg, h, w);
  const std::size_t win = cfg.ssim_window;
  if (win == 0 || win % 2 == 0) throw std::invalid_argument("SSIM window must be odd");
  if (h < win || w < win) throw std::invalid_argument("image smaller than the SSIM window");

  std::vector<double> g(win);
  double gsum = 0.0;
  const double r = static_cast<double>(win / 2);
  for (std::size_t k = 0; k < win; ++k) {
    const double d = static_cast<double>(k) - r;
    g[k] = std::exp(-d * d / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma));
    gsum += g[k];
  }
  for (auto& v : g) v /= gsum;

  // Separable filtering of x, y, x^2, y^2, xy restricted to valid positions.
  const std::size_t oh = h - win + 1, ow = w - win + 1;
  auto filter = [&](auto&& f) {
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < win; ++k) acc += g[k] * f(i * w + j + k);
        tmp[i * ow + j] = acc;
      }
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < win; ++k) acc += g[k] * tmp[(i + k) * ow + j];
        out[i * ow + j] = acc;
      }
    return out;
  };
  const auto mx = filter([&](std::size_t n) { return x[n]; });
  const auto my = filter([&](std::size_t n) { return y[n]; });
  const auto sxx = filter([&](std::size_t n) { return x[n] * x[n]; });
  const auto syy = filter([&](std::size_t n) { return y[n] * y[n]; });
  const auto sxy = filter([&](std::size_t n) { return x[n] * y[n]; });

  const double c1 = (0.01 * cfg.peak) * (0.01 * cfg.peak);
  const double c2 = (0.03 * cfg.peak) * (0.03 * cfg.peak);
  double total = 0.0;
  for (std::size_t n = 0; n < oh * ow; ++n) {
    const double vx = sxx[n] - mx[n] * mx[n];
    const double vy = syy[n] - my[n] * my[n];
    const double cxy = sxy[n] - mx[n] * my[n];
    total += ((2 * mx[n] * my[n] + c1) * (2 * cxy + c2)) /
             ((mx[n] * mx[n] + my[n] * my[n] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(oh * ow);
}

}  // namespace passr
