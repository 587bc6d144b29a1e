#pragma once

#include <functional>

#include "maskft/autodiff.hpp"

namespace maskft::ad {

/// Scalar-valued function built on a fresh tape from one input leaf.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate.
/// Only forward evaluations of `f` are used.
Tensor central_difference(const ScalarFn& f, const Tensor& x, double h);

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|).
/// Throws std::domain_error when f(x) is not finite and std::invalid_argument
/// when h <= 0.
double finite_difference_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

/// Reverse-mode gradient of f at x.
Tensor analytic_gradient(const ScalarFn& f, const Tensor& x);

}  // namespace maskft::ad
