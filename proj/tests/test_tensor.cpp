#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "passr/autodiff.hpp"
#include "passr/gradcheck.hpp"
#include "passr/rng.hpp"
#include "passr/tensor.hpp"
#include "test_util.hpp"

using namespace passr;
using passr::testing::random_tensor;

TEST(Tensor, ConstructionChecksBufferLength) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t(1, 2), 1.5f);
  EXPECT_EQ(Tensor<double>::scalar(4.0).item(), 4.0);
}

TEST(Elementwise, AddExample) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2}, {1.f, 2.f}));
  auto b = tape.constant(Tensor<float>({2}, {3.f, 4.f}));
  EXPECT_EQ(add(a, b).value(), Tensor<float>({2}, {4.f, 6.f}));
}

TEST(Elementwise, MulByZeroAnnihilates) {
  Tape<double> tape;
  Rng rng(3);
  auto x = tape.constant(random_tensor<double>(rng, {3, 4}));
  auto zero = tape.constant(Tensor<double>::scalar(0.0));
  auto y = mul(x, zero);
  EXPECT_EQ(y.shape(), (Shape{3, 4}));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, NonFiniteResultIsAnError) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({1}, {1e308}));
  EXPECT_THROW(mul(a, a), NumericError);
}

TEST(Elementwise, IncompatibleShapesThrow) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({2}));
  EXPECT_THROW(add(a, b), ShapeError);
}

namespace {

std::vector<Shape> small_shapes() {
  std::vector<Shape> shapes{{}};
  for (std::size_t rank = 1; rank <= 3; ++rank) {
    std::vector<std::size_t> idx(rank, 1);
    while (true) {
      shapes.push_back(idx);
      std::size_t d = rank;
      while (d-- > 0) {
        if (++idx[d] <= 4) break;
        idx[d] = 1;
      }
      if (d == static_cast<std::size_t>(-1)) break;
    }
  }
  return shapes;
}

// Brute-force broadcast: walk every output multi-index and project it.
bool oracle_broadcast_add(const Tensor<double>& a, const Tensor<double>& b, Tensor<double>& out) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t rank = std::max(sa.size(), sb.size());
  Shape so(rank);
  auto ext = [rank](const Shape& s, std::size_t i) {
    return i + s.size() < rank ? std::size_t{1} : s[i + s.size() - rank];
  };
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = ext(sa, i), eb = ext(sb, i);
    if (ea != eb && ea != 1 && eb != 1) return false;
    so[i] = std::max(ea, eb);
  }
  out = Tensor<double>(so);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::vector<std::size_t> idx(rank);
    std::size_t rem = flat;
    for (std::size_t i = rank; i-- > 0;) {
      idx[i] = rem % so[i];
      rem /= so[i];
    }
    std::size_t fa = 0, fb = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      if (i + sa.size() >= rank) fa = fa * ext(sa, i) + (ext(sa, i) == 1 ? 0 : idx[i]);
      if (i + sb.size() >= rank) fb = fb * ext(sb, i) + (ext(sb, i) == 1 ? 0 : idx[i]);
    }
    out[flat] = a[fa] + b[fb];
  }
  return true;
}

}  // namespace

TEST(Elementwise, BroadcastExample) {
  Tape<double> tape;
  Rng rng(1);
  auto a = tape.constant(random_tensor<double>(rng, {2, 3}));
  auto b = tape.constant(random_tensor<double>(rng, {3}));
  auto c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_EQ(c.value()(i, j), a.value()(i, j) + b.value()(j));
}

TEST(Elementwise, BroadcastMatchesBruteForceOnAllSmallShapes) {
  const auto shapes = small_shapes();
  Rng rng(11);
  std::size_t checked = 0;
  for (const Shape& sa : shapes) {
    for (const Shape& sb : shapes) {
      Tape<double> tape;
      auto a = tape.constant(random_tensor<double>(rng, sa));
      auto b = tape.constant(random_tensor<double>(rng, sb));
      Tensor<double> expected;
      if (oracle_broadcast_add(a.value(), b.value(), expected)) {
        auto c = add(a, b);
        ASSERT_EQ(c.value(), expected) << to_string(sa) << " + " << to_string(sb);
        ++checked;
      } else {
        ASSERT_THROW(add(a, b), ShapeError) << to_string(sa) << " + " << to_string(sb);
      }
    }
  }
  EXPECT_GT(checked, 1000u);
}

TEST(MatmulBatched, ShapeContract) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({4, 5, 8}));
  auto b = tape.constant(Tensor<float>({4, 8, 5}));
  EXPECT_EQ(matmul_batched(a, b).shape(), (Shape{4, 5, 5}));
  auto bad = tape.constant(Tensor<float>({4, 7, 5}));
  EXPECT_THROW(matmul_batched(a, bad), ShapeError);
  auto bad_batch = tape.constant(Tensor<float>({3, 8, 5}));
  EXPECT_THROW(matmul_batched(a, bad_batch), ShapeError);
}

TEST(MatmulBatched, IdentityIsNeutral) {
  Tape<double> tape;
  Rng rng(2);
  auto a = tape.constant(random_tensor<double>(rng, {3, 4, 5}));
  Tensor<double> eye({3, 5, 5});
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t i = 0; i < 5; ++i) eye(z, i, i) = 1.0;
  EXPECT_EQ(matmul_batched(a, tape.constant(eye)).value(), a.value());
}

TEST(MatmulBatched, MatchesTripleLoop) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tape<double> tape;
    auto a = tape.constant(random_tensor<double>(rng, {2, 2, 2}));
    auto b = tape.constant(random_tensor<double>(rng, {2, 2, 2}));
    auto c = matmul_batched(a, b);
    for (std::size_t z = 0; z < 2; ++z)
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
          double acc = 0;
          for (std::size_t k = 0; k < 2; ++k) acc += a.value()(z, i, k) * b.value()(z, k, j);
          EXPECT_NEAR(c.value()(z, i, j), acc, 1e-15);
        }
  }
}

TEST(Softmax, Examples) {
  Tape<float> tape;
  auto y = softmax_lastdim(tape.constant(Tensor<float>({2}, {0.f, 0.f})));
  EXPECT_FLOAT_EQ(y.value()[0], 0.5f);
  EXPECT_FLOAT_EQ(y.value()[1], 0.5f);
  auto z = softmax_lastdim(tape.constant(Tensor<float>({2}, {1000.f, 0.f})));
  EXPECT_NEAR(z.value()[0], 1.0f, 1e-6);
  EXPECT_NEAR(z.value()[1], 0.0f, 1e-6);
}

TEST(Softmax, MatchesHighPrecisionFormula) {
  Rng rng(7);
  Tape<double> tape;
  auto x = tape.constant(random_tensor<double>(rng, {7}, -3.0, 3.0));
  auto y = softmax_lastdim(x);
  long double total = 0;
  for (double v : x.value().data()) total += std::exp(static_cast<long double>(v));
  for (std::size_t j = 0; j < 7; ++j) {
    const long double expect = std::exp(static_cast<long double>(x.value()[j])) / total;
    EXPECT_NEAR(y.value()[j], static_cast<double>(expect), 1e-15);
  }
}

TEST(Softmax, RowsSumToOneAndArePermutationEquivariant) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<float> tape;
    auto x = random_tensor<float>(rng, {3, 4, 9}, -5.0, 5.0);
    auto y = softmax_lastdim(tape.constant(x)).value();
    for (std::size_t r = 0; r < 12; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_GE(y[r * 9 + j], 0.0f);
        s += y[r * 9 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::rotate(perm.begin(), perm.begin() + 1 + trial % 8, perm.end());
    std::swap(perm[0], perm[4]);
    Tensor<float> xp(x.shape());
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t j = 0; j < 9; ++j) xp[r * 9 + j] = x[r * 9 + perm[j]];
    auto yp = softmax_lastdim(tape.constant(xp)).value();
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t j = 0; j < 9; ++j) EXPECT_FLOAT_EQ(yp[r * 9 + j], y[r * 9 + perm[j]]);
  }
}

TEST(Softmax, RejectsNonFiniteInput) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({2}, {NAN, 0.f}));
  EXPECT_THROW(softmax_lastdim(x), NumericError);
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  Rng rng(1);
  auto x = tape.variable(random_tensor<double>(rng, {2, 3}));
  tape.backward(sum(x));
  const auto g = tape.grad(x);
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquareDerivative) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({1}, {3.0}));
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(tape.grad(x)[0], 6.0);
}

TEST(Backward, RootMustBeScalar) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, {1.0, 2.0}));
  EXPECT_THROW(tape.backward(square(x)), ShapeError);
}

TEST(Backward, FanOutAccumulates) {
  Rng rng(4);
  const auto x0 = random_tensor<double>(rng, {5});
  auto grad_of = [&](auto&& build) {
    Tape<double> tape;
    auto x = tape.variable(x0);
    tape.backward(build(x));
    return tape.grad(x);
  };
  auto f = [](const Var<double>& x) { return sum(square(x)); };
  auto g = [](const Var<double>& x) { return sum(leaky_relu(scale(x, 3.0))); };
  const auto gf = grad_of(f);
  const auto gg = grad_of(g);
  const auto gfg = grad_of([&](const Var<double>& x) { return add(f(x), g(x)); });
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(gfg[k], gf[k] + gg[k], 1e-14);
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(12);
  auto r = finite_diff_check(
      [](Tape<double>&, const Var<double>& x) { return scale(sum(square(x)), 0.5); },
      random_tensor<double>(rng, {6}));
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, SoftmaxSumOfSquares) {
  Rng rng(13);
  auto r = finite_diff_check(
      [](Tape<double>&, const Var<double>& x) { return sum(square(softmax_lastdim(x))); },
      random_tensor<double>(rng, {3, 5}));
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, LeakyReluAwayFromKink) {
  Rng rng(14);
  auto x = random_tensor<double>(rng, {20});
  for (auto& v : x.data()) {
    if (std::abs(v) < 10 * 1e-4) v = v < 0 ? -0.5 : 0.5;
  }
  auto r = finite_diff_check(
      [](Tape<double>&, const Var<double>& v) { return sum(square(leaky_relu(v))); }, x);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, DetectsNonDeterminism) {
  int calls = 0;
  auto f = [&calls](Tape<double>&, const Var<double>& x) {
    return scale(sum(x), static_cast<double>(++calls));
  };
  EXPECT_THROW(finite_diff_check(f, Tensor<double>({2}, {1.0, 2.0})), NumericError);
}

// x^3 with a backward that is 1% off: every estimate disagrees, so refinement
// must not hide it.
TEST(GradCheck, DetectsWrongBackward) {
  auto cube_wrong = [](Tape<double>& tape, const Var<double>& x) {
    Tensor<double> y(x.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::pow(x.value()[i], 3);
    Var<double> out = tape.record("cube_wrong", y, {x}, [x](const Tensor<double>& g, GradSink<double>& sink) {
      Tensor<double>& gx = sink.slot(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 3.03 * x.value()[i] * x.value()[i];
    });
    return sum(out);
  };
  Rng rng(15);
  auto r = finite_diff_check(cube_wrong, random_tensor<double>(rng, {6}, 0.5, 1.5));
  EXPECT_GT(r.max_rel_error, 5e-3);
  EXPECT_EQ(r.coords_refined, 6u);
}

// A probe closer to a kink than the smallest step still resolves through the
// one-sided differences.
TEST(GradCheck, KinkInsideSmallestStep) {
  Tensor<double> x({3}, {2e-8, -3e-8, 0.7});
  auto r = finite_diff_check(
      [](Tape<double>&, const Var<double>& v) { return sum(leaky_relu(v)); }, x);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coords_refined, 2u);
}

TEST(LeakyRelu, SubgradientAtZeroIsNegativeBranch) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({1}, {0.0}));
  tape.backward(sum(leaky_relu(x)));
  EXPECT_EQ(tape.grad(x)[0], 0.1);
}

// Every differentiable tensor-core op on ten seeded inputs.
TEST(GradCheck, AllCoreOpsTenSeeds) {
  using Fn = MultiTensorFn;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    Fn f;
  };
  const std::vector<Case> cases{
      {"add_broadcast", {{2, 3}, {3}},
       [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(square(add(v[0], v[1]))); }},
      {"sub_broadcast", {{2, 1, 3}, {4, 1}},
       [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(square(sub(v[0], v[1]))); }},
      {"mul_broadcast", {{3, 2}, {2}},
       [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(square(mul(v[0], v[1]))); }},
      {"affine", {{4}},
       [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(square(affine(v[0], 1.7, -0.3))); }},
      {"abs", {{6}},
       [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(mul(abs(v[0]), v[0])); }},
      {"mean", {{2, 3}},
       [](Tape<double>&, const std::vector<Var<double>>& v) { return mean(square(v[0])); }},
      {"matmul_batched", {{2, 3, 4}, {2, 4, 5}},
       [](Tape<double>&, const std::vector<Var<double>>& v) {
         return sum(square(matmul_batched(v[0], v[1])));
       }},
      {"softmax_lastdim", {{2, 3, 4}},
       [](Tape<double>& t, const std::vector<Var<double>>& v) {
         Rng r(99);
         auto w = t.constant(random_tensor<double>(r, {2, 3, 4}));
         return sum(mul(softmax_lastdim(v[0]), w));
       }},
      {"transpose_last2", {{2, 3, 4}},
       [](Tape<double>& t, const std::vector<Var<double>>& v) {
         Rng r(98);
         auto w = t.constant(random_tensor<double>(r, {2, 4, 3}));
         return sum(mul(transpose_last2(v[0]), w));
       }},
      {"slice", {{3, 4, 2}},
       [](Tape<double>&, const std::vector<Var<double>>& v) {
         return sum(square(slice(v[0], {1, 0, 1}, {2, 3, 1})));
       }},
      {"concat_lastdim", {{2, 2}, {2, 3}},
       [](Tape<double>& t, const std::vector<Var<double>>& v) {
         Rng r(97);
         auto w = t.constant(random_tensor<double>(r, {2, 5}));
         return sum(mul(concat_lastdim<double>({v[0], v[1]}), w));
       }},
      {"reshape", {{2, 6}},
       [](Tape<double>& t, const std::vector<Var<double>>& v) {
         Rng r(96);
         auto w = t.constant(random_tensor<double>(r, {3, 4}));
         return sum(mul(reshape(v[0], {3, 4}), w));
       }},
  };
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(mix_seed(seed, 17));
      std::vector<Tensor<double>> xs;
      for (const auto& s : c.shapes) {
        auto t = random_tensor<double>(rng, s);
        for (auto& v : t.data())
          if (std::abs(v) < 1e-2) v += 0.1;  // keep abs() away from its kink
        xs.push_back(t);
      }
      auto r = finite_diff_check(c.f, xs);
      EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(Slice, RejectsOutOfRange) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({3, 3}));
  EXPECT_THROW(slice(x, {2, 0}, {2, 3}), ShapeError);
}

TEST(Concat, RejectsLeadingMismatch) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 2}));
  auto b = tape.constant(Tensor<float>({3, 2}));
  EXPECT_THROW(concat_lastdim<float>({a, b}), ShapeError);
}
