#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "regfactor/tape.hpp"

namespace regfactor {

// Builds a scalar on a fresh tape. The function must read `x` through
// tape.parameter(x) for the analytic gradient to reach it.
using ScalarFn = std::function<Var(Tape&)>;
using ScalarFnOf = std::function<Var(Tape&, const Var& x)>;

/// Compares reverse-mode gradients of `f` w.r.t. `x` against central differences
/// (f(x+eps e) - f(x-eps e)) / 2eps. Returns the largest relative error over the
/// checked coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
/// An empty `coords` checks every element. `x` is restored bitwise afterwards,
/// and so is its gradient buffer.
double finite_diff_check(const ScalarFn& f, Tensor& x, double eps = 1e-6, std::span<const size_t> coords = {});

double finite_diff_check(const ScalarFnOf& f, Tensor& x, double eps = 1e-6, std::span<const size_t> coords = {});

}  // namespace regfactor
