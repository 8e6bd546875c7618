#pragma once

// Training objective: SR reconstruction plus three correspondence terms on
// the attention maps. Every sum is normalized to a mean (by element or by
// valid-pixel count) so the weight lambda does not depend on patch size.

#include <array>
#include <optional>
#include <utility>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "passr/autodiff.hpp"
#include "passr/pam.hpp"

namespace passr {

struct LossWeights {
  double lambda = 0.005;
  bool photometric = true;
  bool smooth = true;
  bool cycle = true;
};

struct LossReport {
  double sr = 0, photometric = 0, smooth = 0, cycle = 0, total = 0;
  bool no_valid_pixels = false;  // photometric/cycle masks were all zero
};

// The four loss subsets compared in the loss ablation, in order:
// SR; SR + photometric; SR + photometric + smooth; all four.
inline std::array<LossWeights, 4> loss_ablation_rows(double lambda = 0.005) {
  return {LossWeights{lambda, false, false, false}, LossWeights{lambda, true, false, false},
          LossWeights{lambda, true, true, false}, LossWeights{lambda, true, true, true}};
}

inline std::string describe(const LossWeights& w) {
  std::string s = "sr";
  if (w.photometric) s += "+photometric";
  if (w.smooth) s += "+smooth";
  if (w.cycle) s += "+cycle";
  return s;
}

template <typename T>
Var<T> sr_loss(const Var<T>& sr, const Var<T>& hr) {
  if (sr.shape() != hr.shape()) {
    throw ShapeError("sr_loss: " + to_string(sr.shape()) + " vs " + to_string(hr.shape()));
  }
  return mean(square(sr - hr));
}

template <typename T>
struct MaskedLoss {
  Var<T> value;
  bool empty = false;  // no valid pixel in any direction
};

namespace detail {

template <typename T>
std::size_t count_ones(const Tensor<T>& mask) {
  std::size_t n = 0;
  for (T v : mask.data()) n += v != T{0};
  return n;
}

// sum over valid pixels of sum_c |diff| / (valid * C); zero when nothing is valid.
template <typename T>
Var<T> masked_mean_abs(const Var<T>& diff, const Tensor<T>& mask, std::size_t channels) {
  Tape<T>& tape = diff.tape();
  const std::size_t valid = count_ones(mask);
  if (valid == 0) return tape.constant(Tensor<T>::scalar(T{0}));
  const Shape& s = diff.shape();
  Var<T> m = tape.constant(mask.reshaped({s[0], s[1], 1}));
  return scale(sum(mul(abs(diff), m)), static_cast<T>(1.0 / static_cast<double>(valid * channels)));
}

template <typename T>
void require_mask(const ValidMask<T>& v, const Shape& map, const char* what) {
  if (v.values.shape() != Shape{map[0], map[1]}) {
    throw ShapeError(std::string(what) + ": mask " + to_string(v.values.shape()) + " does not fit map " +
                     to_string(map));
  }
}

}  // namespace detail

// Left pixels in V_{l->r} compare against the right image warped by M_{r->l};
// right pixels in V_{r->l} against the left image warped by M_{l->r}.
template <typename T>
MaskedLoss<T> photometric_loss(const Var<T>& left_lr, const Var<T>& right_lr, const AttentionMap<T>& r2l,
                               const AttentionMap<T>& l2r, const ValidMask<T>& v_l2r,
                               const ValidMask<T>& v_r2l) {
  detail::require_mask(v_l2r, r2l.values.shape(), "photometric_loss");
  detail::require_mask(v_r2l, l2r.values.shape(), "photometric_loss");
  const std::size_t c = left_lr.shape().at(2);
  Var<T> left_term = detail::masked_mean_abs(left_lr - apply_attention(r2l, right_lr), v_l2r.values, c);
  Var<T> right_term = detail::masked_mean_abs(right_lr - apply_attention(l2r, left_lr), v_r2l.values, c);
  const bool empty = detail::count_ones(v_l2r.values) == 0 && detail::count_ones(v_r2l.values) == 0;
  return {left_term + right_term, empty};
}

// Per map: mean |M(i,j,k) - M(i+1,j,k)| + mean |M(i,j,k) - M(i,j+1,k+1)|,
// each over its in-range index set; summed over both maps.
template <typename T>
Var<T> smoothness_loss(const AttentionMap<T>& l2r, const AttentionMap<T>& r2l) {
  auto one_map = [](const Var<T>& m) {
    detail::require_attention_shape(m.shape(), "smoothness_loss");
    const std::size_t h = m.shape()[0], w = m.shape()[1];
    Var<T> total = m.tape().constant(Tensor<T>::scalar(T{0}));
    if (h > 1) {
      Var<T> d = slice(m, {0, 0, 0}, {h - 1, w, w}) - slice(m, {1, 0, 0}, {h - 1, w, w});
      total = total + mean(abs(d));
    }
    if (w > 1) {
      Var<T> d = slice(m, {0, 0, 0}, {h, w - 1, w - 1}) - slice(m, {0, 1, 1}, {h, w - 1, w - 1});
      total = total + mean(abs(d));
    }
    return total;
  };
  return one_map(l2r.values) + one_map(r2l.values);
}

// sum over valid p of ||C(p, .) - I(p, .)||_1 / valid, for both cycle maps:
// C_left = M_{r->l} (x) M_{l->r} with V_{l->r}, C_right = M_{l->r} (x) M_{r->l} with V_{r->l}.
template <typename T>
MaskedLoss<T> cycle_loss(const AttentionMap<T>& l2r, const AttentionMap<T>& r2l, const ValidMask<T>& v_l2r,
                         const ValidMask<T>& v_r2l) {
  const Shape& s = l2r.values.shape();
  detail::require_attention_shape(s, "cycle_loss");
  detail::require_mask(v_l2r, s, "cycle_loss");
  detail::require_mask(v_r2l, s, "cycle_loss");
  Tape<T>& tape = l2r.values.tape();
  Tensor<T> eye(s);
  for (std::size_t i = 0; i < s[0]; ++i)
    for (std::size_t j = 0; j < s[1]; ++j) eye(i, j, j) = T{1};
  Var<T> id = tape.constant(eye);
  Var<T> left = detail::masked_mean_abs(compose(r2l, l2r).values - id, v_l2r.values, 1);
  Var<T> right = detail::masked_mean_abs(compose(l2r, r2l).values - id, v_r2l.values, 1);
  const bool empty = detail::count_ones(v_l2r.values) == 0 && detail::count_ones(v_r2l.values) == 0;
  return {left + right, empty};
}

template <typename T>
struct LossTerms {
  Var<T> sr;
  std::optional<MaskedLoss<T>> photometric;
  std::optional<Var<T>> smooth;
  std::optional<MaskedLoss<T>> cycle;
};

// total = sr + lambda * (enabled terms). Disabled terms are not evaluated by
// callers and are reported as zero.
template <typename T>
std::pair<Var<T>, LossReport> total_loss(const LossTerms<T>& terms, const LossWeights& w) {
  if (!(w.lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
  LossReport r;
  r.sr = terms.sr.value().item();
  Var<T> aux = terms.sr.tape().constant(Tensor<T>::scalar(T{0}));
  bool any = false;
  if (w.photometric && terms.photometric) {
    aux = aux + terms.photometric->value;
    r.photometric = terms.photometric->value.value().item();
    r.no_valid_pixels = r.no_valid_pixels || terms.photometric->empty;
    any = true;
  }
  if (w.smooth && terms.smooth) {
    aux = aux + *terms.smooth;
    r.smooth = terms.smooth->value().item();
    any = true;
  }
  if (w.cycle && terms.cycle) {
    aux = aux + terms.cycle->value;
    r.cycle = terms.cycle->value.value().item();
    r.no_valid_pixels = r.no_valid_pixels || terms.cycle->empty;
    any = true;
  }
  Var<T> total = any && w.lambda != 0.0 ? terms.sr + scale(aux, static_cast<T>(w.lambda)) : terms.sr;
  r.total = total.value().item();
  return {total, r};
}

}  // namespace passr
