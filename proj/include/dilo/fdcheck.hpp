#pragma once

#include <functional>

#include "dilo/tensor.hpp"

namespace dilo {

/// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
/// The reference oracle every analytic gradient in this repository is
/// validated against.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h);

/// Hessian-vector product (gradf(x+hv) - gradf(x-hv)) / 2h.
Tensor hvp_finite_difference(const std::function<Tensor(const Tensor&)>& gradf,
                             const Tensor& x, const Tensor& v, double h);

double rel_l2_error(const Tensor& got, const Tensor& want);

}  // namespace dilo
