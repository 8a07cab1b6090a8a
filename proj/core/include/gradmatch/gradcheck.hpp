#pragma once

// Finite-difference checks of autodiff gradients. The reference side only
// evaluates forward values, so it does not share code paths with the backward
// rules it verifies.

#include <functional>
#include <span>
#include <vector>

#include "gradmatch/autodiff.hpp"

namespace gradmatch::ad {

// ||a - b|| / max(||a||, ||b||, floor). Falls back to an absolute error when
// both gradients are (near) zero.
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

using ScalarFn = std::function<Var(std::span<const Var>)>;

// Largest relative error between grad(f) and central differences over all
// inputs.
double check_gradient(const ScalarFn& f, std::span<const Tensor> inputs, double h = 1e-5);

// Second-order check: the gradient of <grad f(x), v> w.r.t. x (a Hessian-vector
// product computed by differentiating a create_graph gradient) against central
// differences of <grad f(x), v>.
double check_second_order(const ScalarFn& f, const Tensor& x, const Tensor& v, double h = 1e-5);

}  // namespace gradmatch::ad
