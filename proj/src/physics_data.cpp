#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dilo/physics.hpp"

namespace dilo {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double population_std(const std::vector<double>& y) {
    double mean = 0;
    for (double x : y) mean += x;
    mean /= static_cast<double>(y.size());
    double var = 0;
    for (double x : y) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(y.size()));
}

Rng sample_rng(std::uint64_t seed, const char* tag, std::size_t index) {
    return Rng(derive_seed(seed, std::string(tag) + ":" + std::to_string(index)));
}

}  // namespace

std::vector<double> inject_noise(const std::vector<double>& y, double gamma, Rng& rng) {
    if (gamma < 0.0) throw std::runtime_error("inject_noise: gamma must be >= 0");
    std::vector<double> out(y);
    if (gamma == 0.0) return out;
    const double level = gamma * population_std(y);
    for (double& x : out) x += level * rng.normal();
    return out;
}

Observation inject_noise(const Observation& y, double gamma, Rng& rng) {
    Observation out = y;
    out.v = inject_noise(y.v, gamma, rng);
    out.noise_gamma = gamma;
    return out;
}

std::vector<std::vector<double>> gen_eit_blobs(std::size_t count, std::uint64_t seed,
                                               std::size_t n, double lo, double hi) {
    if (count < 1) throw std::runtime_error("gen_eit_blobs: count must be >= 1");
    std::vector<std::vector<double>> fields;
    fields.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        Rng rng = sample_rng(seed, "eit-blobs", s);
        std::vector<double> f(n * n, 0.2);
        const std::size_t bumps = 1 + rng.uniform_index(3);
        for (std::size_t b = 0; b < bumps; ++b) {
            const double cx = rng.uniform(0.15, 0.85);
            const double cy = rng.uniform(0.15, 0.85);
            const double width = rng.uniform(0.06, 0.22);
            const double amp = rng.uniform(-0.25, 0.85);
            for (std::size_t iy = 0; iy < n; ++iy)
                for (std::size_t ix = 0; ix < n; ++ix) {
                    const double x = (static_cast<double>(ix) + 0.5) / static_cast<double>(n);
                    const double y = (static_cast<double>(iy) + 0.5) / static_cast<double>(n);
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    f[iy * n + ix] += amp * std::exp(-d2 / (2.0 * width * width));
                }
        }
        for (double& v : f) v = std::clamp(v, lo, hi);
        fields.push_back(std::move(f));
    }
    return fields;
}

std::vector<std::vector<double>> gen_ns_grf(std::size_t count, std::uint64_t seed,
                                            std::size_t n, double alpha, double tau) {
    if (count < 1) throw std::runtime_error("gen_ns_grf: count must be >= 1");
    // half-spectrum mode list (kx > 0, or kx == 0 and ky >= 0)
    struct Mode {
        double kx, ky, c;
    };
    std::vector<Mode> modes;
    const int half = static_cast<int>(n) / 2;
    double csum = 0;
    for (int kx = 0; kx <= half; ++kx)
        for (int ky = -half + 1; ky <= half; ++ky) {
            if (kx == 0 && ky < 0) continue;
            const double kk = static_cast<double>(kx * kx + ky * ky);
            const double c = std::pow(kk + tau * tau, -alpha / 2.0);
            modes.push_back({static_cast<double>(kx), static_cast<double>(ky), c});
            csum += c * c * (kx == 0 && ky == 0 ? 1.0 : 1.0);
        }
    const double norm = 1.0 / std::sqrt(csum);

    std::vector<std::vector<double>> fields;
    fields.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        Rng rng = sample_rng(seed, "ns-grf", s);
        std::vector<double> f(n * n, 0.0);
        for (const Mode& m : modes) {
            const double a = rng.normal() * m.c * norm;
            const double b = rng.normal() * m.c * norm;
            for (std::size_t iy = 0; iy < n; ++iy) {
                const double y = kTwoPi * static_cast<double>(iy) / static_cast<double>(n);
                for (std::size_t ix = 0; ix < n; ++ix) {
                    const double x = kTwoPi * static_cast<double>(ix) / static_cast<double>(n);
                    const double phase = m.kx * x + m.ky * y;
                    f[iy * n + ix] += a * std::cos(phase) + b * std::sin(phase);
                }
            }
        }
        fields.push_back(std::move(f));
    }
    return fields;
}

PairedEitDataset gen_eit_paired(std::size_t count, std::uint64_t seed, std::size_t n,
                                std::size_t m_patterns, double lo, double hi,
                                const EitSolverSettings& settings) {
    PairedEitDataset ds;
    ds.n = n;
    ds.m_patterns = m_patterns;
    ds.fields = gen_eit_blobs(count, seed, n, lo, hi);
    const CurrentPatternSet ps = make_trig_patterns(n, m_patterns);
    ds.boundary = ps.cells.size();
    ds.observations.reserve(count);
    for (const auto& f : ds.fields) {
        ConductivityField cf{n, f, lo, hi};
        ds.observations.push_back(eit_solve(cf, ps, settings).obs.v);
    }
    return ds;
}

}  // namespace dilo
