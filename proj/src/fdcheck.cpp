#include "dilo/fdcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dilo {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h) {
    if (!(h > 0.0)) throw std::runtime_error("finite_difference_gradient: h must be > 0");
    const std::size_t n = x.numel();
    std::vector<double> grad(n);
    Tensor probe = x.detached();
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = x.at(i);
        probe.mut()[i] = xi + h;
        const double fp = f(probe);
        probe.mut()[i] = xi - h;
        const double fm = f(probe);
        probe.mut()[i] = xi;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error(
                "finite_difference_gradient: non-finite evaluation at coordinate " +
                std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from_vec(std::move(grad), x.shape);
}

Tensor hvp_finite_difference(const std::function<Tensor(const Tensor&)>& gradf,
                             const Tensor& x, const Tensor& v, double h) {
    if (!x.same_shape(v))
        throw std::runtime_error("hvp_finite_difference: shape mismatch " + x.shape_str() +
                                 " vs " + v.shape_str());
    if (!(h > 0.0)) throw std::runtime_error("hvp_finite_difference: h must be > 0");
    const std::size_t n = x.numel();
    Tensor plus = x.detached();
    Tensor minus = x.detached();
    for (std::size_t i = 0; i < n; ++i) {
        plus.mut()[i] = x.at(i) + h * v.at(i);
        minus.mut()[i] = x.at(i) - h * v.at(i);
    }
    const Tensor gp = gradf(plus);
    const Tensor gm = gradf(minus);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = (gp.at(i) - gm.at(i)) / (2.0 * h);
    return Tensor::from_vec(std::move(out), x.shape);
}

double rel_l2_error(const Tensor& got, const Tensor& want) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < want.numel(); ++i) {
        const double d = got.at(i) - want.at(i);
        num += d * d;
        den += want.at(i) * want.at(i);
    }
    if (den == 0.0) return std::sqrt(num);
    return std::sqrt(num / den);
}

}  // namespace dilo
