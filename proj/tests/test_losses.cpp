#include <gtest/gtest.h>

#include <cmath>

#include "passr/data.hpp"
#include "passr/gradcheck.hpp"
#include "passr/losses.hpp"
#include "test_util.hpp"

using namespace passr;
using passr::testing::random_tensor;

namespace {

Tensor<double> identity_stack(std::size_t h, std::size_t w) {
  Tensor<double> m({h, w, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) m(i, j, j) = 1.0;
  return m;
}

// Rows of independent random distributions.
Tensor<double> random_stochastic(Rng& rng, std::size_t h, std::size_t w) {
  Tensor<double> m({h, w, w});
  for (std::size_t r = 0; r < h * w; ++r) {
    double total = 0;
    for (std::size_t k = 0; k < w; ++k) total += (m[r * w + k] = rng.uniform(0.01, 1.0));
    for (std::size_t k = 0; k < w; ++k) m[r * w + k] /= total;
  }
  return m;
}

Tensor<double> random_mask(Rng& rng, std::size_t h, std::size_t w) {
  Tensor<double> v({h, w});
  for (auto& x : v.data()) x = rng.uniform() < 0.7 ? 1.0 : 0.0;
  return v;
}

// Scalar-loop oracles.

double warp_oracle(const Tensor<double>& m, const Tensor<double>& x, std::size_t i, std::size_t j,
                   std::size_t c) {
  double acc = 0;
  for (std::size_t k = 0; k < m.extent(2); ++k) acc += m(i, j, k) * x(i, k, c);
  return acc;
}

double photometric_oracle(const Tensor<double>& l, const Tensor<double>& r, const Tensor<double>& r2l,
                          const Tensor<double>& l2r, const Tensor<double>& vl, const Tensor<double>& vr) {
  auto direction = [](const Tensor<double>& own, const Tensor<double>& other, const Tensor<double>& m,
                      const Tensor<double>& v) {
    double acc = 0, n = 0;
    for (std::size_t i = 0; i < own.extent(0); ++i)
      for (std::size_t j = 0; j < own.extent(1); ++j) {
        if (v(i, j) == 0) continue;
        n += 1;
        for (std::size_t c = 0; c < own.extent(2); ++c)
          acc += std::abs(own(i, j, c) - warp_oracle(m, other, i, j, c));
      }
    return n == 0 ? 0.0 : acc / (n * own.extent(2));
  };
  return direction(l, r, r2l, vl) + direction(r, l, l2r, vr);
}

double smooth_oracle(const Tensor<double>& m) {
  const std::size_t h = m.extent(0), w = m.extent(1);
  double vert = 0, diag = 0;
  for (std::size_t i = 0; i + 1 < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < w; ++k) vert += std::abs(m(i, j, k) - m(i + 1, j, k));
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j + 1 < w; ++j)
      for (std::size_t k = 0; k + 1 < w; ++k) diag += std::abs(m(i, j, k) - m(i, j + 1, k + 1));
  double out = 0;
  if (h > 1) out += vert / static_cast<double>((h - 1) * w * w);
  if (w > 1) out += diag / static_cast<double>(h * (w - 1) * (w - 1));
  return out;
}

double cycle_oracle(const Tensor<double>& first, const Tensor<double>& second, const Tensor<double>& v) {
  const std::size_t h = first.extent(0), w = first.extent(1);
  double acc = 0, n = 0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (v(i, j) == 0) continue;
      n += 1;
      for (std::size_t k = 0; k < w; ++k) {
        double c = 0;
        for (std::size_t t = 0; t < w; ++t) c += first(i, j, t) * second(i, t, k);
        acc += std::abs(c - (j == k ? 1.0 : 0.0));
      }
    }
  return n == 0 ? 0.0 : acc / n;
}

struct Fixture {
  Tape<double> tape;
  AttentionMap<double> map(const Tensor<double>& m, Direction d) { return {tape.constant(m), d}; }
};

}  // namespace

TEST(SrLoss, Examples) {
  Rng rng(1);
  Tape<double> tape;
  auto a = random_tensor<double>(rng, {4, 6, 3}, 0, 1);
  EXPECT_EQ(sr_loss(tape.constant(a), tape.constant(a)).value().item(), 0.0);
  Tensor<double> b = a;
  for (auto& x : b.data()) x += 0.5;
  EXPECT_NEAR(sr_loss(tape.constant(a), tape.constant(b)).value().item(), 0.25, 1e-12);
  auto c = random_tensor<double>(rng, {4, 6, 3}, 0, 1);
  double oracle = 0;
  for (std::size_t n = 0; n < a.size(); ++n) oracle += (a[n] - c[n]) * (a[n] - c[n]);
  EXPECT_NEAR(sr_loss(tape.constant(a), tape.constant(c)).value().item(), oracle / a.size(), 1e-12);
  EXPECT_THROW(sr_loss(tape.constant(a), tape.constant(Tensor<double>({4, 5, 3}))), ShapeError);
}

TEST(PhotometricLoss, PerfectFixturesAreZero) {
  Fixture f;
  // Occlusion-free: zero disparity GT maps.
  auto s = synth_stereo<double>(3, 8, 20, DisparityProfile::constant(0), 2);
  auto r2l = f.map(gt_attention_from_disparity(*s.left_disparity, Direction::kRightToLeft), Direction::kRightToLeft);
  auto l2r = f.map(gt_attention_from_disparity(*s.right_disparity, Direction::kLeftToRight), Direction::kLeftToRight);
  ValidMask<double> ones{Tensor<double>({8, 20}, 1.0)};
  auto l = f.tape.constant(s.left_lr), r = f.tape.constant(s.right_lr);
  EXPECT_EQ(photometric_loss(l, r, r2l, l2r, ones, ones).value.value().item(), 0.0);

  // Shifted pair, GT maps and the generator's masks.
  auto s3 = synth_stereo<double>(4, 8, 20, DisparityProfile::constant(3), 2);
  auto r2l3 = f.map(gt_attention_from_disparity(*s3.left_disparity, Direction::kRightToLeft), Direction::kRightToLeft);
  auto l2r3 = f.map(gt_attention_from_disparity(*s3.right_disparity, Direction::kLeftToRight), Direction::kLeftToRight);
  ValidMask<double> vl{*s3.left_disparity->visible}, vr{*s3.right_disparity->visible};
  EXPECT_EQ(photometric_loss(f.tape.constant(s3.left_lr), f.tape.constant(s3.right_lr), r2l3, l2r3, vl, vr)
                .value.value().item(),
            0.0);

  // All-zero masks: empty sum, flagged.
  ValidMask<double> zeros{Tensor<double>({8, 20})};
  auto empty = photometric_loss(l, r, r2l, l2r, zeros, zeros);
  EXPECT_EQ(empty.value.value().item(), 0.0);
  EXPECT_TRUE(empty.empty);

  // Uniform maps over a constant-colour pair.
  Tensor<double> flat({8, 20, 3});
  for (std::size_t n = 0; n < flat.size(); ++n) flat[n] = 0.1 * static_cast<double>(n % 3 + 1);
  auto uni = f.map(Tensor<double>({8, 20, 20}, 1.0 / 20), Direction::kRightToLeft);
  EXPECT_NEAR(photometric_loss(f.tape.constant(flat), f.tape.constant(flat), uni, uni, ones, ones)
                  .value.value().item(),
              0.0, 1e-15);
}

TEST(PhotometricLoss, MatchesOracleAndIgnoresMaskedPixels) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(mix_seed(seed, 2));
    Fixture f;
    auto l = random_tensor<double>(rng, {3, 7, 3}, 0, 1), r = random_tensor<double>(rng, {3, 7, 3}, 0, 1);
    auto m1 = random_stochastic(rng, 3, 7), m2 = random_stochastic(rng, 3, 7);
    auto vl = random_mask(rng, 3, 7), vr = random_mask(rng, 3, 7);
    auto value = [&](const Tensor<double>& left) {
      return photometric_loss(f.tape.constant(left), f.tape.constant(r), f.map(m1, Direction::kRightToLeft),
                              f.map(m2, Direction::kLeftToRight), ValidMask<double>{vl}, ValidMask<double>{vr})
          .value.value()
          .item();
    };
    const double got = value(l);
    EXPECT_NEAR(got, photometric_oracle(l, r, m1, m2, vl, vr), 1e-12);
    EXPECT_GE(got, 0.0);
    // A masked-out left pixel that also receives zero weight in the right
    // view's warp can change freely.
    bool tested = false;
    for (std::size_t n = 0; n < 3 * 7 && !tested; ++n) {
      const std::size_t i = n / 7, j = n % 7;
      if (vl(i, j) != 0) continue;
      for (std::size_t k = 0; k < 7; ++k) m2(i, k, j) = 0;
      const double before = value(l);
      auto l2 = l;
      for (std::size_t c = 0; c < 3; ++c) l2(i, j, c) += 10.0;
      EXPECT_NEAR(value(l2), before, 1e-12);
      tested = true;
    }
  }
}

TEST(SmoothnessLoss, Fixtures) {
  Fixture f;
  auto id = f.map(identity_stack(4, 6), Direction::kLeftToRight);
  EXPECT_EQ(smoothness_loss(id, id).value().item(), 0.0);
  // Pure shift structure: M(i, j, k) = 1 iff k = j + 2, constant in i.
  Tensor<double> shift({3, 6, 6});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j + 2 < 6; ++j) shift(i, j, j + 2) = 1.0;
  auto s = f.map(shift, Direction::kLeftToRight);
  EXPECT_EQ(smoothness_loss(s, s).value().item(), 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_stochastic(rng, 3, 5), b = random_stochastic(rng, 3, 5);
    EXPECT_NEAR(smoothness_loss(f.map(a, Direction::kLeftToRight), f.map(b, Direction::kRightToLeft)).value().item(),
                smooth_oracle(a) + smooth_oracle(b), 1e-12);
  }
}

TEST(CycleLoss, Fixtures) {
  Fixture f;
  ValidMask<double> ones{Tensor<double>({3, 6}, 1.0)};
  auto id = f.map(identity_stack(3, 6), Direction::kLeftToRight);
  EXPECT_EQ(cycle_loss(id, id, ones, ones).value.value().item(), 0.0);

  auto s = synth_stereo<double>(5, 6, 24, DisparityProfile::constant(4), 2);
  auto r2l = f.map(gt_attention_from_disparity(*s.left_disparity, Direction::kRightToLeft), Direction::kRightToLeft);
  auto l2r = f.map(gt_attention_from_disparity(*s.right_disparity, Direction::kLeftToRight), Direction::kLeftToRight);
  ValidMask<double> vl{*s.left_disparity->visible}, vr{*s.right_disparity->visible};
  EXPECT_EQ(cycle_loss(l2r, r2l, vl, vr).value.value().item(), 0.0);

  // Uniform rows: each direction contributes 2 (W - 1) / W.
  const double w = 6;
  auto uni = f.map(Tensor<double>({3, 6, 6}, 1.0 / w), Direction::kLeftToRight);
  EXPECT_NEAR(cycle_loss(uni, uni, ones, ones).value.value().item(), 2 * (2 * (w - 1) / w), 1e-12);

  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_stochastic(rng, 3, 6), b = random_stochastic(rng, 3, 6);
    auto va = random_mask(rng, 3, 6), vb = random_mask(rng, 3, 6);
    EXPECT_NEAR(cycle_loss(f.map(a, Direction::kLeftToRight), f.map(b, Direction::kRightToLeft),
                           ValidMask<double>{va}, ValidMask<double>{vb})
                    .value.value()
                    .item(),
                cycle_oracle(b, a, va) + cycle_oracle(a, b, vb), 1e-12);
  }
}

TEST(TotalLoss, Weighting) {
  Fixture f;
  auto one = [&] { return f.tape.constant(Tensor<double>::scalar(1.0)); };
  LossTerms<double> terms{one(), MaskedLoss<double>{one()}, one(), MaskedLoss<double>{one()}};
  auto [total, report] = total_loss(terms, LossWeights{});
  EXPECT_NEAR(total.value().item(), 1.015, 1e-15);
  EXPECT_NEAR(report.total, 1.015, 1e-15);
  EXPECT_EQ(total_loss(terms, LossWeights{0.0}).second.total, 1.0);
  EXPECT_THROW(total_loss(terms, LossWeights{-1.0}), std::invalid_argument);

  const auto rows = loss_ablation_rows();
  const double expect[4] = {1.0, 1.005, 1.01, 1.015};
  const char* names[4] = {"sr", "sr+photometric", "sr+photometric+smooth", "sr+photometric+smooth+cycle"};
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(total_loss(terms, rows[k]).second.total, expect[k], 1e-15);
    EXPECT_EQ(describe(rows[k]), names[k]);
  }
}

TEST(Losses, GradientCheck) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(mix_seed(seed, 5));
    const std::size_t h = 3, w = 5;
    auto vl = random_mask(rng, h, w), vr = random_mask(rng, h, w);
    // Maps enter as softmax of free logits so the check covers map inputs.
    std::vector<Tensor<double>> xs{random_tensor<double>(rng, {h, w, 3}, 0, 1),
                                   random_tensor<double>(rng, {h, w, 3}, 0, 1),
                                   random_tensor<double>(rng, {h, w, w}, -2, 2),
                                   random_tensor<double>(rng, {h, w, w}, -2, 2),
                                   random_tensor<double>(rng, {2 * h, 2 * w, 3}, 0, 1),
                                   random_tensor<double>(rng, {2 * h, 2 * w, 3}, 0, 1)};
    auto r = finite_diff_check(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          AttentionMap<double> r2l{softmax_lastdim(v[2]), Direction::kRightToLeft};
          AttentionMap<double> l2r{softmax_lastdim(v[3]), Direction::kLeftToRight};
          ValidMask<double> ml{vl}, mr{vr};
          LossTerms<double> terms{sr_loss(v[4], v[5]), photometric_loss(v[0], v[1], r2l, l2r, ml, mr),
                                  smoothness_loss(l2r, r2l), cycle_loss(l2r, r2l, ml, mr)};
          return total_loss(terms, LossWeights{0.5}).first;
        },
        xs);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " input " << r.input;
  }
}
