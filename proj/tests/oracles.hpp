#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they validate.

#include <cmath>
#include <vector>

#include "dilo/rng.hpp"
#include "dilo/tensor.hpp"

namespace oracles {

// Naive triple-loop matrix product.
inline dilo::Tensor naive_matmul(const dilo::Tensor& a, const dilo::Tensor& b) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a.at(i * k + p) * b.at(p * n + j);
            out[i * n + j] = s;
        }
    return dilo::Tensor::from_vec(std::move(out), {m, n});
}

// Cyclic Jacobi eigensolver for small symmetric matrices; returns eigenvalues.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n,
                                              std::size_t sweeps = 64) {
    for (std::size_t s = 0; s < sweeps; ++s) {
        double off = 0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-28) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t =
                    (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1.0 / std::sqrt(t * t + 1), sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
    return ev;
}

inline dilo::Tensor random_tensor(dilo::Rng& rng, std::vector<std::size_t> shape) {
    return rng.normal_tensor(std::move(shape));
}

inline double dot(const dilo::Tensor& a, const dilo::Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i) * b.at(i);
    return s;
}

}  // namespace oracles
