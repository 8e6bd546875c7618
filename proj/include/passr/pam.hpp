#pragma once

// Parallax attention along epipolar lines (image rows).
//
// An attention map M has shape H x W x W. M(i, j, k) is the weight of source
// column k in the target position (i, j); rows never mix. For the
// right-to-left map the target is the left view and the source the right
// view, so warping is out(i, j, :) = sum_k M(i, j, k) X(i, k, :).

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <utility>

#include "passr/autodiff.hpp"
#include "passr/nn.hpp"

namespace passr {

enum class Direction { kRightToLeft, kLeftToRight, kCycle };

inline const char* to_string(Direction d) {
  switch (d) {
    case Direction::kRightToLeft: return "right_to_left";
    case Direction::kLeftToRight: return "left_to_right";
    case Direction::kCycle: return "cycle";
  }
  return "?";
}

template <typename T>
struct AttentionMap {
  Var<T> values;  // H x W x W
  Direction direction = Direction::kRightToLeft;
};

// Binary H x W mask in the target view's coordinates.
template <typename T>
struct ValidMask {
  Tensor<T> values;
  Direction direction = Direction::kLeftToRight;
};

// Horizontal disparities in pixels. For a left-view map, left pixel (i, j)
// matches right pixel (i, j - d); for a right-view map, right pixel (i, j)
// matches left pixel (i, j + d). `visible` (1 = has a correspondence) is
// optional; absent means every in-range pixel is visible.
template <typename T>
struct DisparityMap {
  Tensor<T> values;
  std::optional<Tensor<T>> visible;
};

inline constexpr double kValidThreshold = 0.1;

template <typename T>
struct PamParams {
  std::optional<ResidualBlockParams<T>> transition;  // absent: ablated
  Conv2dParams<T> query;   // 1x1 on A0 -> Q
  Conv2dParams<T> key;     // 1x1 on B0 -> S
  Conv2dParams<T> value;   // 1x1 on raw B -> R
  Conv2dParams<T> fusion;  // 1x1, 2C + 1 -> C
};

namespace detail {

inline void require_attention_shape(const Shape& s, const char* what) {
  if (s.size() != 3 || s[1] != s[2]) {
    throw ShapeError(std::string(what) + ": attention map must be H x W x W, got " +
                     to_string(s));
  }
}

// softmax(conv_q(target) (x) conv_k(source)^T) over source columns.
template <typename T>
Var<T> directional_attention(const Var<T>& target0, const Var<T>& source0,
                             const PamParams<T>& p) {
  Var<T> q = conv2d(target0, p.query);                    // H x W x C
  Var<T> s = transpose_last2(conv2d(source0, p.key));     // H x C x W
  return softmax_lastdim(matmul_batched(q, s));           // H x W x W
}

}  // namespace detail

// Returns (M_{B->A}, M_{A->B}). With A the left and B the right features these
// are the right-to-left and left-to-right maps. Both directions share weights.
template <typename T>
std::pair<AttentionMap<T>, AttentionMap<T>> compute_attention_pair(const Var<T>& a,
                                                                   const Var<T>& b,
                                                                   const PamParams<T>& p) {
  if (a.shape() != b.shape() || a.shape().size() != 3) {
    throw ShapeError("attention inputs must share an H x W x C shape: " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
  Var<T> a0 = p.transition ? residual_block(a, *p.transition) : a;
  Var<T> b0 = p.transition ? residual_block(b, *p.transition) : b;
  return {AttentionMap<T>{detail::directional_attention(a0, b0, p), Direction::kRightToLeft},
          AttentionMap<T>{detail::directional_attention(b0, a0, p), Direction::kLeftToRight}};
}

template <typename T>
Var<T> apply_attention(const AttentionMap<T>& m, const Var<T>& x) {
  detail::require_attention_shape(m.values.shape(), "apply_attention");
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[0] != m.values.shape()[0] || xs[1] != m.values.shape()[2]) {
    throw ShapeError("apply_attention: map " + to_string(m.values.shape()) +
                     " does not fit features " + to_string(xs));
  }
  return matmul_batched(m.values, x);
}

// first (x) second, e.g. compose(M_r->l, M_l->r) = M_{l->r->l}.
template <typename T>
AttentionMap<T> compose(const AttentionMap<T>& first, const AttentionMap<T>& second) {
  detail::require_attention_shape(first.values.shape(), "compose");
  detail::require_attention_shape(second.values.shape(), "compose");
  if (first.values.shape() != second.values.shape()) {
    throw ShapeError("compose: map shapes differ");
  }
  return {matmul_batched(first.values, second.values), Direction::kCycle};
}

// V(i, j) = 1 iff sum_k M(i, k, j) > tau: the total weight source column j
// contributes over all targets. The mask lives in the source view, which is
// the "from" view of the map (left for M_{left->right}).
template <typename T>
ValidMask<T> valid_mask(const Tensor<T>& m, Direction direction, double tau = kValidThreshold) {
  detail::require_attention_shape(m.shape(), "valid_mask");
  const std::size_t h = m.extent(0), w = m.extent(1);
  Tensor<T> mass({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t k = 0; k < w; ++k) {
      const T* row = m.raw() + (i * w + k) * w;
      for (std::size_t j = 0; j < w; ++j) mass(i, j) += row[j];
    }
  }
  Tensor<T> v({h, w});
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = mass[n] > tau ? T{1} : T{0};
  return {std::move(v), direction};
}

template <typename T>
ValidMask<T> valid_mask(const AttentionMap<T>& m, double tau = kValidThreshold) {
  return valid_mask(m.values.value(), m.direction, tau);
}

namespace detail {

// 3x3 erosion (take_max = false) or dilation; out-of-image neighbours are ignored.
template <typename T>
Tensor<T> morph3x3(const Tensor<T>& v, bool take_max) {
  const long h = static_cast<long>(v.extent(0)), w = static_cast<long>(v.extent(1));
  Tensor<T> out(v.shape());
  for (long i = 0; i < h; ++i) {
    for (long j = 0; j < w; ++j) {
      T acc = v(i, j);
      for (long di = -1; di <= 1; ++di) {
        for (long dj = -1; dj <= 1; ++dj) {
          const long y = i + di, x = j + dj;
          if (y < 0 || x < 0 || y >= h || x >= w) continue;
          acc = take_max ? std::max(acc, v(y, x)) : std::min(acc, v(y, x));
        }
      }
      out(i, j) = acc;
    }
  }
  return out;
}

}  // namespace detail

// Opening then closing with a 3x3 square: removes isolated pixels, fills holes.
template <typename T>
ValidMask<T> morph_cleanup(const ValidMask<T>& v) {
  if (v.values.rank() != 2) throw ShapeError("morph_cleanup expects an H x W mask");
  Tensor<T> opened = detail::morph3x3(detail::morph3x3(v.values, false), true);
  Tensor<T> closed = detail::morph3x3(detail::morph3x3(opened, true), false);
  return {std::move(closed), v.direction};
}

// Concatenate [A | O | V] along channels (C + C + 1) and mix with a 1x1 conv.
template <typename T>
Var<T> fuse(const Var<T>& a, const Var<T>& o, const ValidMask<T>& v, const Conv2dParams<T>& conv) {
  const Shape& as = a.shape();
  if (as.size() != 3 || o.shape() != as || v.values.shape() != Shape{as[0], as[1]}) {
    throw ShapeError("fuse: spatial extents disagree");
  }
  Var<T> mask = a.tape().constant(v.values.reshaped({as[0], as[1], 1}));
  return conv2d(concat_lastdim<T>({a, o, mask}), conv);
}

template <typename T>
struct PamOutput {
  Var<T> fused;
  AttentionMap<T> right_to_left;
  AttentionMap<T> left_to_right;
  ValidMask<T> valid_left;   // V_{left->right}, used for fusion
  ValidMask<T> valid_right;  // V_{right->left}
};

// Full module for the left view: attention both ways, O = M_{r->l} (x) R with
// R from the raw right features, cleaned masks, fusion.
template <typename T>
PamOutput<T> parallax_attention(const Var<T>& left, const Var<T>& right, const PamParams<T>& p,
                                double tau = kValidThreshold) {
  auto [r2l, l2r] = compute_attention_pair(left, right, p);
  Var<T> r = conv2d(right, p.value);
  Var<T> o = apply_attention(r2l, r);
  ValidMask<T> v_left = morph_cleanup(valid_mask(l2r, tau));
  ValidMask<T> v_right = morph_cleanup(valid_mask(r2l, tau));
  Var<T> fused = fuse(left, o, v_left, p.fusion);
  return {fused, r2l, l2r, std::move(v_left), std::move(v_right)};
}

// One-hot attention rows from disparities. For right-to-left maps `d` is the
// left view's disparity (source column j - d); for left-to-right maps it is
// the right view's disparity (source column j + d). Fractional disparities
// split mass linearly between the two neighbouring columns. Rows whose source
// falls outside the image, or that are flagged invisible, are all zero.
template <typename T>
Tensor<T> gt_attention_from_disparity(const DisparityMap<T>& d, Direction direction) {
  if (direction == Direction::kCycle) throw std::invalid_argument("gt attention needs a view direction");
  if (d.values.rank() != 2) throw ShapeError("disparity map must be H x W");
  if (d.visible && d.visible->shape() != d.values.shape()) {
    throw ShapeError("visibility flags must match the disparity map");
  }
  const std::size_t h = d.values.extent(0), w = d.values.extent(1);
  Tensor<T> m({h, w, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double disp = static_cast<double>(d.values(i, j));
      if (!std::isfinite(disp) || disp < 0.0) {
        throw std::out_of_range("disparity must be finite and nonnegative");
      }
      if (d.visible && (*d.visible)(i, j) == T{0}) continue;
      const double src = direction == Direction::kRightToLeft ? static_cast<double>(j) - disp
                                                              : static_cast<double>(j) + disp;
      const double lo = std::floor(src);
      const double frac = src - lo;
      const double hi = frac > 0.0 ? lo + 1.0 : lo;
      if (lo < 0.0 || hi > static_cast<double>(w - 1)) continue;
      m(i, j, static_cast<std::size_t>(lo)) += static_cast<T>(1.0 - frac);
      if (frac > 0.0) m(i, j, static_cast<std::size_t>(hi)) += static_cast<T>(frac);
    }
  }
  return m;
}

// Diagnostic disparity from attention expectation: d = j - E[k] for
// right-to-left maps, E[k] - j for left-to-right maps.
template <typename T>
DisparityMap<T> expected_disparity(const Tensor<T>& m, Direction direction) {
  detail::require_attention_shape(m.shape(), "expected_disparity");
  if (direction == Direction::kCycle) throw std::invalid_argument("cycle maps carry no disparity");
  const std::size_t h = m.extent(0), w = m.extent(1);
  Tensor<T> d({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double ek = 0.0;
      for (std::size_t k = 0; k < w; ++k) ek += static_cast<double>(k) * m(i, j, k);
      const double jj = static_cast<double>(j);
      d(i, j) = static_cast<T>(direction == Direction::kRightToLeft ? jj - ek : ek - jj);
    }
  }
  return {std::move(d), std::nullopt};
}

}  // namespace passr
