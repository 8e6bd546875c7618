#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "passr/autodiff.hpp"
#include "passr/rng.hpp"

namespace passr {

struct GradCheckOptions {
  double step = 1e-4;
  // Coordinates sampled per input tensor; 0 checks every coordinate.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // Denominator floor for the relative error: max(floor, relative_floor * G)
  // with G the largest analytic gradient magnitude over all inputs. Gradients
  // that are exactly zero analytically still pick up roundoff numerically,
  // and that roundoff grows with the size of the function.
  double floor = 1e-6;
  double relative_floor = 1e-5;
  // A coordinate whose error exceeds refine_above is re-probed with the step
  // divided by 10, up to `refinements` times, adding one-sided differences,
  // and the best estimate is kept. This separates genuine gradient bugs
  // (every estimate off, independent of step) from probes that straddle a
  // leaky-ReLU kink or a mask threshold.
  double refine_above = 1e-5;
  std::size_t refinements = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t input = 0;
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_refined = 0;  // coordinates that needed a smaller step
  double floor = 0.0;              // denominator floor actually used
};

// Scalar-valued function of several tensors, built on the given tape.
using MultiTensorFn =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

namespace detail {

inline double evaluate(const MultiTensorFn& f, const std::vector<Tensor<double>>& xs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : xs) vars.push_back(tape.constant(x));
  return f(tape, vars).value().item();
}

}  // namespace detail

// Compares the tape gradient against central differences coordinate-wise.
// Relative error uses the denominator max(|analytic|, |numeric|, floor), see
// GradCheckOptions.
inline GradCheckResult finite_diff_check(const MultiTensorFn& f,
                                         const std::vector<Tensor<double>>& xs,
                                         const GradCheckOptions& opt = {}) {
  const double base = detail::evaluate(f, xs);
  if (detail::evaluate(f, xs) != base) {
    throw NumericError("function under gradient check is not deterministic");
  }

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    Var<double> root = f(tape, vars);
    tape.backward(root);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  double gmax = 0.0;
  for (const auto& g : analytic)
    for (double v : g.data()) gmax = std::max(gmax, std::abs(v));
  const double floor = std::max(opt.floor, opt.relative_floor * gmax);

  GradCheckResult result;
  result.floor = floor;
  Rng rng(opt.seed);
  std::vector<Tensor<double>> probe = xs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t n = xs[i].size();
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_input == 0 || opt.max_coords_per_input >= n) {
      for (std::size_t c = 0; c < n; ++c) coords.push_back(c);
    } else {
      for (std::size_t c = 0; c < opt.max_coords_per_input; ++c) coords.push_back(rng.below(n));
    }
    for (std::size_t c : coords) {
      const double orig = xs[i][c];
      const double a = analytic[i][c];
      double numeric = 0.0, err = 0.0, step = opt.step;
      for (std::size_t attempt = 0; attempt <= opt.refinements; ++attempt, step /= 10.0) {
        probe[i][c] = orig + step;
        const double up = detail::evaluate(f, probe);
        probe[i][c] = orig - step;
        const double down = detail::evaluate(f, probe);
        probe[i][c] = orig;
        std::vector<double> estimates{(up - down) / (2.0 * step)};
        if (attempt > 0) {
          // A kink closer than the step spoils the central difference; the
          // one-sided difference away from it is still an O(step) estimate.
          estimates.push_back((up - base) / step);
          estimates.push_back((base - down) / step);
        }
        for (double n : estimates) {
          const double e = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
          if ((attempt == 0 && n == estimates[0]) || e < err) {
            err = e;
            numeric = n;
          }
        }
        if (err <= opt.refine_above) break;
        if (attempt == 0 && opt.refinements > 0) ++result.coords_refined;
      }
      ++result.coords_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.input = i;
        result.coord = c;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

inline GradCheckResult finite_diff_check(
    const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
    const Tensor<double>& x, const GradCheckOptions& opt = {}) {
  return finite_diff_check(
      [&f](Tape<double>& tape, const std::vector<Var<double>>& v) { return f(tape, v[0]); },
      std::vector<Tensor<double>>{x}, opt);
}

}  // namespace passr
