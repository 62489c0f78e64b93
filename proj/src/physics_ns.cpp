#include <fftw3.h>

#include <cmath>
#include <complex>
#include <memory>
#include <stdexcept>
#include <string>

#include "dilo/physics.hpp"

namespace dilo {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Complex-to-complex FFTW workspace for one grid size.
struct Spectral {
    std::size_t n;
    fftw_complex* buf;
    fftw_plan fwd, bwd;

    explicit Spectral(std::size_t n_) : n(n_) {
        buf = fftw_alloc_complex(n * n);
        const int ni = static_cast<int>(n);
        fwd = fftw_plan_dft_2d(ni, ni, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
        bwd = fftw_plan_dft_2d(ni, ni, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    ~Spectral() {
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(bwd);
        fftw_free(buf);
    }
    Spectral(const Spectral&) = delete;
    Spectral& operator=(const Spectral&) = delete;

    // forward: real grid -> spectral coefficients (unnormalized)
    std::vector<std::complex<double>> to_spectral(const std::vector<double>& real) {
        for (std::size_t i = 0; i < n * n; ++i) {
            buf[i][0] = real[i];
            buf[i][1] = 0.0;
        }
        fftw_execute(fwd);
        std::vector<std::complex<double>> out(n * n);
        for (std::size_t i = 0; i < n * n; ++i) out[i] = {buf[i][0], buf[i][1]};
        return out;
    }
    // backward with 1/n^2 normalization, returning the real part
    std::vector<double> to_real(const std::vector<std::complex<double>>& spec) {
        for (std::size_t i = 0; i < n * n; ++i) {
            buf[i][0] = spec[i].real();
            buf[i][1] = spec[i].imag();
        }
        fftw_execute(bwd);
        const double norm = 1.0 / static_cast<double>(n * n);
        std::vector<double> out(n * n);
        for (std::size_t i = 0; i < n * n; ++i) out[i] = buf[i][0] * norm;
        return out;
    }
};

// Integer wavenumber of DFT index i on an n-grid, wrapped to [-n/2, n/2).
double wavenumber(std::size_t i, std::size_t n) {
    return i <= n / 2 ? static_cast<double>(i)
                      : static_cast<double>(i) - static_cast<double>(n);
}

}  // namespace

std::vector<double> ns_forward(const std::vector<double>& w0, const NsConfig& cfg, double T,
                               double dt) {
    const std::size_t n = cfg.n, n2 = n * n;
    if (w0.size() != n2) fail("ns_forward: field length does not match grid");
    if (!(dt > 0.0) || !(T >= 0.0)) fail("ns_forward: need dt > 0 and T >= 0");
    const std::size_t steps = static_cast<std::size_t>(std::llround(T / dt));
    if (std::fabs(static_cast<double>(steps) * dt - T) > 1e-9 * std::max(T, 1.0))
        fail("ns_forward: T must be an integer multiple of dt");

    Spectral sp(n);
    std::vector<double> kx(n), ky(n);
    for (std::size_t i = 0; i < n; ++i) kx[i] = ky[i] = wavenumber(i, n);

    // 2/3-rule dealias mask for the advection products
    const double kmax = std::floor(static_cast<double>(n) / 3.0);
    std::vector<double> dealias(n2);
    std::vector<double> k2(n2);
    for (std::size_t iy = 0; iy < n; ++iy)
        for (std::size_t ix = 0; ix < n; ++ix) {
            const std::size_t i = iy * n + ix;
            k2[i] = kx[ix] * kx[ix] + ky[iy] * ky[iy];
            dealias[i] =
                (std::fabs(kx[ix]) <= kmax && std::fabs(ky[iy]) <= kmax) ? 1.0 : 0.0;
        }

    // forcing spectrum; the k = 0 mode is zeroed so the mean is untouched
    std::vector<double> f_real(n2);
    for (std::size_t iy = 0; iy < n; ++iy) {
        const double y = kTwoPi * static_cast<double>(iy) / static_cast<double>(n);
        const double fy = cfg.forcing_amplitude *
                          std::cos(static_cast<double>(cfg.forcing_k) * y);
        for (std::size_t ix = 0; ix < n; ++ix) f_real[iy * n + ix] = fy;
    }
    std::vector<std::complex<double>> f_hat = sp.to_spectral(f_real);
    f_hat[0] = {0.0, 0.0};

    std::vector<std::complex<double>> w_hat = sp.to_spectral(w0);
    const double h = kTwoPi / static_cast<double>(n);

    auto nonlinear = [&](const std::vector<std::complex<double>>& wh,
                         std::size_t step) -> std::vector<std::complex<double>> {
        std::vector<std::complex<double>> nl(n2, {0.0, 0.0});
        if (cfg.advection) {
            // streamfunction psi = -Lap^{-1} w, velocity (psi_y, -psi_x)
            std::vector<std::complex<double>> psi(n2), uh(n2), vh(n2);
            for (std::size_t iy = 0; iy < n; ++iy)
                for (std::size_t ix = 0; ix < n; ++ix) {
                    const std::size_t i = iy * n + ix;
                    psi[i] = k2[i] == 0.0 ? std::complex<double>{0.0, 0.0} : wh[i] / k2[i];
                    uh[i] = std::complex<double>(0.0, ky[iy]) * psi[i];
                    vh[i] = std::complex<double>(0.0, -kx[ix]) * psi[i];
                }
            const std::vector<double> u = sp.to_real(uh);
            const std::vector<double> v = sp.to_real(vh);
            const std::vector<double> w = sp.to_real(wh);
            double umax = 0.0;
            for (std::size_t i = 0; i < n2; ++i)
                umax = std::max(umax, std::max(std::fabs(u[i]), std::fabs(v[i])));
            if (dt * umax / h > cfg.cfl_limit)
                fail("ns_forward: CFL violation at step " + std::to_string(step) +
                     " (dt*|u|/h = " + std::to_string(dt * umax / h) + ")");
            std::vector<double> uw(n2), vw(n2);
            for (std::size_t i = 0; i < n2; ++i) {
                uw[i] = u[i] * w[i];
                vw[i] = v[i] * w[i];
            }
            const std::vector<std::complex<double>> uw_h = sp.to_spectral(uw);
            const std::vector<std::complex<double>> vw_h = sp.to_spectral(vw);
            for (std::size_t iy = 0; iy < n; ++iy)
                for (std::size_t ix = 0; ix < n; ++ix) {
                    const std::size_t i = iy * n + ix;
                    // divergence form: -(d/dx (u w) + d/dy (v w))
                    nl[i] = -dealias[i] * (std::complex<double>(0.0, kx[ix]) * uw_h[i] +
                                           std::complex<double>(0.0, ky[iy]) * vw_h[i]);
                }
        }
        for (std::size_t i = 0; i < n2; ++i) nl[i] += f_hat[i];
        return nl;
    };

    std::vector<std::complex<double>> nl_prev;
    for (std::size_t step = 0; step < steps; ++step) {
        const std::vector<std::complex<double>> nl = nonlinear(w_hat, step);
        for (std::size_t i = 0; i < n2; ++i) {
            const double a = cfg.nu * k2[i] * dt;
            std::complex<double> adv =
                step == 0 || !cfg.advection ? nl[i] : 1.5 * nl[i] - 0.5 * nl_prev[i];
            w_hat[i] = ((1.0 - 0.5 * a) * w_hat[i] + dt * adv) / (1.0 + 0.5 * a);
            if (!std::isfinite(w_hat[i].real()) || !std::isfinite(w_hat[i].imag()))
                fail("ns_forward: non-finite state at step " + std::to_string(step));
        }
        nl_prev = nl;
    }
    return sp.to_real(w_hat);
}

}  // namespace dilo
