#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dilo/tensor.hpp"

namespace dilo {

/// FNV-1a, used to derive per-component seeds so independent random streams
/// never alias.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
    return seed ^ fnv1a(tag);
}

/// mt19937_64 with explicit uniform/normal mappings; std::*_distribution is
/// implementation-defined, these are not.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double uniform() {  // [0, 1)
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_index(std::uint64_t n) {  // [0, n)
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    double normal() {  // Box-Muller, one draw per call
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    std::vector<double> normal_vec(std::size_t n) {
        std::vector<double> v(n);
        for (double& x : v) x = normal();
        return v;
    }

    Tensor normal_tensor(std::vector<std::size_t> shape) {
        const std::size_t n = numel_of(shape);
        return Tensor::from_vec(normal_vec(n), std::move(shape));
    }

  private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace dilo
