#include <cmath>
#include <stdexcept>
#include <string>

#include "dilo/grid.hpp"
#include "dilo/physics.hpp"

namespace dilo {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Interior faces of the n x n cell grid.
struct FaceList {
    std::vector<std::size_t> a, b;  // adjacent cell ids
};

FaceList build_faces(std::size_t n) {
    FaceList f;
    f.a.reserve(2 * n * (n - 1));
    f.b.reserve(2 * n * (n - 1));
    for (std::size_t iy = 0; iy < n; ++iy)
        for (std::size_t ix = 0; ix + 1 < n; ++ix) {
            f.a.push_back(iy * n + ix);
            f.b.push_back(iy * n + ix + 1);
        }
    for (std::size_t iy = 0; iy + 1 < n; ++iy)
        for (std::size_t ix = 0; ix < n; ++ix) {
            f.a.push_back(iy * n + ix);
            f.b.push_back((iy + 1) * n + ix);
        }
    return f;
}

double harm(double a, double b) { return 2.0 * a * b / (a + b); }
double harm_da(double a, double b) { return 2.0 * b * b / ((a + b) * (a + b)); }
double harm_db(double a, double b) { return 2.0 * a * a / ((a + b) * (a + b)); }
double harm_daa(double a, double b) { return -4.0 * b * b / ((a + b) * (a + b) * (a + b)); }
double harm_dab(double a, double b) { return 4.0 * a * b / ((a + b) * (a + b) * (a + b)); }
double harm_dbb(double a, double b) { return -4.0 * a * a / ((a + b) * (a + b) * (a + b)); }

std::vector<double> face_weights(const ConductivityField& s, const FaceList& f) {
    std::vector<double> w(f.a.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = harm(s.sigma[f.a[i]], s.sigma[f.b[i]]);
    return w;
}

void apply_operator(const FaceList& f, const std::vector<double>& w,
                    const std::vector<double>& u, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double flux = w[i] * (u[f.a[i]] - u[f.b[i]]);
        out[f.a[i]] += flux;
        out[f.b[i]] -= flux;
    }
}

void remove_mean(std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double& x : v) x -= m;
}

double norm2(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Jacobi-preconditioned CG on the mean-zero subspace of the singular
// Neumann operator. Preconditioned directions are projected back to the
// subspace so the iterates never drift along the constant null vector.
std::vector<double> cg_neumann(const FaceList& f, const std::vector<double>& w,
                               std::vector<double> rhs, const EitSolverSettings& st,
                               const char* what) {
    const std::size_t n = rhs.size();
    std::vector<double> diag(n, 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
        diag[f.a[i]] += w[i];
        diag[f.b[i]] += w[i];
    }
    remove_mean(rhs);
    const double bnorm = norm2(rhs);
    std::vector<double> x(n, 0.0);
    if (bnorm == 0.0) return x;
    std::vector<double> r = rhs, z(n), p(n), ap(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
    remove_mean(z);
    p = z;
    double rz = dot(r, z);
    for (std::size_t it = 0; it < st.cg_max_iter; ++it) {
        apply_operator(f, w, p, ap);
        const double pap = dot(p, ap);
        if (pap <= 0.0) fail(std::string(what) + ": CG breakdown (operator not positive)");
        const double alpha = rz / pap;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if (norm2(r) <= st.cg_tol * bnorm) {
            remove_mean(x);
            return x;
        }
        for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
        remove_mean(z);
        const double rz_new = dot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    }
    fail(std::string(what) + ": CG did not converge in " + std::to_string(st.cg_max_iter) +
         " iterations, residual " + std::to_string(norm2(r) / bnorm));
}

void check_field(const ConductivityField& s) {
    if (s.sigma.size() != s.n * s.n) fail("eit: sigma length does not match grid");
    for (double v : s.sigma)
        if (!(v > 0.0)) fail("eit: conductivity must be strictly positive");
}

void check_patterns(const ConductivityField& s, const CurrentPatternSet& ps) {
    if (ps.n != s.n) fail("eit: pattern grid does not match field grid");
    for (const auto& g : ps.patterns) {
        if (g.size() != ps.cells.size()) fail("eit: pattern length does not match boundary");
        double total = 0, l1 = 0;
        for (double x : g) {
            total += x;
            l1 += std::fabs(x);
        }
        if (std::fabs(total) > 1e-12 * std::max(l1, 1e-300))
            fail("eit: pattern violates zero-sum compatibility, |sum| = " +
                 std::to_string(std::fabs(total)));
    }
}

// Scatter of a boundary cotangent through the grounded restriction:
// rhs = R^T (xi - mean(xi)).
std::vector<double> scatter_boundary(const CurrentPatternSet& ps, const double* xi,
                                     std::size_t cells_total) {
    std::vector<double> v(xi, xi + ps.cells.size());
    remove_mean(v);
    std::vector<double> rhs(cells_total, 0.0);
    for (std::size_t b = 0; b < ps.cells.size(); ++b) rhs[ps.cells[b]] = v[b];
    return rhs;
}

}  // namespace

CurrentPatternSet make_trig_patterns(std::size_t n, std::size_t m_patterns) {
    if (m_patterns < 2 || m_patterns % 2 != 0)
        fail("make_trig_patterns: pattern count must be even and >= 2");
    CurrentPatternSet ps;
    ps.n = n;
    ps.cells = boundary_cells_ccw(n);
    const std::size_t B = ps.cells.size();
    if (m_patterns >= B) fail("make_trig_patterns: too many patterns for this boundary");
    const double edge = 4.0 / static_cast<double>(B);
    const double two_pi = 6.283185307179586476925286766559;
    for (std::size_t k = 1; k <= m_patterns / 2; ++k) {
        std::vector<double> c(B), s(B);
        for (std::size_t j = 0; j < B; ++j) {
            const double theta = two_pi * static_cast<double>(k * j) / static_cast<double>(B);
            c[j] = std::cos(theta) * edge;
            s[j] = std::sin(theta) * edge;
        }
        ps.patterns.push_back(std::move(c));
        ps.patterns.push_back(std::move(s));
    }
    ps.id = "trig:" + std::to_string(n) + ":" + std::to_string(m_patterns);
    return ps;
}

EitSolution eit_solve(const ConductivityField& sigma, const CurrentPatternSet& patterns,
                      const EitSolverSettings& settings) {
    check_field(sigma);
    check_patterns(sigma, patterns);
    const std::size_t n = sigma.n, n2 = n * n;
    const FaceList faces = build_faces(n);
    const std::vector<double> w = face_weights(sigma, faces);

    EitSolution sol;
    sol.obs.patterns = patterns.patterns.size();
    sol.obs.boundary = patterns.cells.size();
    sol.obs.pattern_id = patterns.id;
    sol.obs.v.resize(sol.obs.patterns * sol.obs.boundary);
    for (std::size_t k = 0; k < patterns.patterns.size(); ++k) {
        std::vector<double> rhs(n2, 0.0);
        for (std::size_t b = 0; b < patterns.cells.size(); ++b)
            rhs[patterns.cells[b]] = patterns.patterns[k][b];
        std::vector<double> u = cg_neumann(faces, w, std::move(rhs), settings, "eit_solve");
        std::vector<double> vk(patterns.cells.size());
        for (std::size_t b = 0; b < patterns.cells.size(); ++b) vk[b] = u[patterns.cells[b]];
        remove_mean(vk);
        for (std::size_t b = 0; b < vk.size(); ++b)
            sol.obs.v[k * sol.obs.boundary + b] = vk[b];
        sol.potentials.push_back(std::move(u));
    }
    return sol;
}

std::vector<double> eit_vjp(const ConductivityField& sigma, const CurrentPatternSet& patterns,
                            const std::vector<double>& cotangent,
                            const EitSolverSettings& settings) {
    check_field(sigma);
    check_patterns(sigma, patterns);
    const std::size_t n = sigma.n, n2 = n * n;
    const std::size_t B = patterns.cells.size();
    if (cotangent.size() != patterns.patterns.size() * B)
        fail("eit_vjp: cotangent length does not match observation shape");
    const FaceList faces = build_faces(n);
    const std::vector<double> w = face_weights(sigma, faces);

    std::vector<double> grad(n2, 0.0);
    for (std::size_t k = 0; k < patterns.patterns.size(); ++k) {
        std::vector<double> rhs(n2, 0.0);
        for (std::size_t b = 0; b < B; ++b) rhs[patterns.cells[b]] = patterns.patterns[k][b];
        const std::vector<double> u = cg_neumann(faces, w, std::move(rhs), settings, "eit_vjp");
        const std::vector<double> adj_rhs =
            scatter_boundary(patterns, cotangent.data() + k * B, n2);
        const std::vector<double> wk = cg_neumann(faces, w, adj_rhs, settings, "eit_vjp");
        for (std::size_t i = 0; i < faces.a.size(); ++i) {
            const std::size_t a = faces.a[i], b = faces.b[i];
            const double kf = (u[a] - u[b]) * (wk[a] - wk[b]);
            grad[a] -= kf * harm_da(sigma.sigma[a], sigma.sigma[b]);
            grad[b] -= kf * harm_db(sigma.sigma[a], sigma.sigma[b]);
        }
    }
    return grad;
}

EitGradient eit_adjoint_gradient(const ConductivityField& sigma,
                                 const CurrentPatternSet& patterns, const Observation& v_obs,
                                 const EitSolverSettings& settings) {
    const EitSolution sol = eit_solve(sigma, patterns, settings);
    const std::size_t M = sol.obs.patterns, B = sol.obs.boundary;
    if (v_obs.patterns != M || v_obs.boundary != B)
        fail("eit_adjoint_gradient: observation shape mismatch");
    // residuals are grounded per pattern, so constants added to V_obs vanish
    std::vector<double> resid(M * B);
    double misfit = 0.0;
    for (std::size_t k = 0; k < M; ++k) {
        std::vector<double> r(B);
        for (std::size_t b = 0; b < B; ++b) r[b] = sol.obs.at(k, b) - v_obs.at(k, b);
        remove_mean(r);
        for (std::size_t b = 0; b < B; ++b) {
            resid[k * B + b] = r[b];
            misfit += 0.5 * r[b] * r[b];
        }
    }
    EitGradient out;
    out.misfit = misfit;
    out.grad = eit_vjp(sigma, patterns, resid, settings);
    return out;
}

std::vector<double> eit_hvp(const ConductivityField& sigma, const CurrentPatternSet& patterns,
                            const Observation& v_obs, const std::vector<double>& dsigma,
                            const EitSolverSettings& settings) {
    check_field(sigma);
    check_patterns(sigma, patterns);
    const std::size_t n = sigma.n, n2 = n * n;
    if (dsigma.size() != n2) fail("eit_hvp: perturbation length does not match grid");
    const std::size_t B = patterns.cells.size();
    if (v_obs.patterns != patterns.patterns.size() || v_obs.boundary != B)
        fail("eit_hvp: observation shape mismatch");

    const FaceList faces = build_faces(n);
    const std::size_t nf = faces.a.size();
    const std::vector<double> w = face_weights(sigma, faces);

    // tangent face weights d(harm)/d(sigma) . dsigma
    std::vector<double> dw(nf);
    for (std::size_t i = 0; i < nf; ++i) {
        const std::size_t a = faces.a[i], b = faces.b[i];
        dw[i] = harm_da(sigma.sigma[a], sigma.sigma[b]) * dsigma[a] +
                harm_db(sigma.sigma[a], sigma.sigma[b]) * dsigma[b];
    }

    std::vector<double> hvp(n2, 0.0);
    for (std::size_t k = 0; k < patterns.patterns.size(); ++k) {
        std::vector<double> rhs(n2, 0.0);
        for (std::size_t b = 0; b < B; ++b) rhs[patterns.cells[b]] = patterns.patterns[k][b];
        const std::vector<double> u = cg_neumann(faces, w, std::move(rhs), settings, "eit_hvp");

        std::vector<double> r(B);
        for (std::size_t b = 0; b < B; ++b) {
            double vb = u[patterns.cells[b]];
            r[b] = vb;
        }
        remove_mean(r);
        for (std::size_t b = 0; b < B; ++b) r[b] -= v_obs.at(k, b);
        remove_mean(r);
        const std::vector<double> adj_rhs = scatter_boundary(patterns, r.data(), n2);
        const std::vector<double> wk = cg_neumann(faces, w, adj_rhs, settings, "eit_hvp");

        // tangent state: A uhat = -dA u
        std::vector<double> t_rhs(n2, 0.0);
        apply_operator(faces, dw, u, t_rhs);
        for (double& x : t_rhs) x = -x;
        const std::vector<double> uhat = cg_neumann(faces, w, t_rhs, settings, "eit_hvp");

        // second-order adjoint: A what = R^T Q (R uhat) - dA w
        std::vector<double> uhat_b(B);
        for (std::size_t b = 0; b < B; ++b) uhat_b[b] = uhat[patterns.cells[b]];
        std::vector<double> a_rhs = scatter_boundary(patterns, uhat_b.data(), n2);
        std::vector<double> daw(n2, 0.0);
        apply_operator(faces, dw, wk, daw);
        for (std::size_t i = 0; i < n2; ++i) a_rhs[i] -= daw[i];
        const std::vector<double> what = cg_neumann(faces, w, a_rhs, settings, "eit_hvp");

        for (std::size_t i = 0; i < nf; ++i) {
            const std::size_t a = faces.a[i], b = faces.b[i];
            const double sa = sigma.sigma[a], sb = sigma.sigma[b];
            const double kf = (u[a] - u[b]) * (wk[a] - wk[b]);
            const double dkf = (uhat[a] - uhat[b]) * (wk[a] - wk[b]) +
                               (u[a] - u[b]) * (what[a] - what[b]);
            hvp[a] -= dkf * harm_da(sa, sb) +
                      kf * (harm_daa(sa, sb) * dsigma[a] + harm_dab(sa, sb) * dsigma[b]);
            hvp[b] -= dkf * harm_db(sa, sb) +
                      kf * (harm_dab(sa, sb) * dsigma[a] + harm_dbb(sa, sb) * dsigma[b]);
        }
    }
    return hvp;
}

std::vector<double> harmonic_extension(const std::vector<double>& boundary_values,
                                       std::size_t n, const EitSolverSettings& settings) {
    const std::vector<std::size_t> cells = boundary_cells_ccw(n);
    if (boundary_values.size() != cells.size())
        fail("harmonic_extension: expected " + std::to_string(cells.size()) +
             " boundary values, got " + std::to_string(boundary_values.size()));
    for (double v : boundary_values)
        if (!std::isfinite(v)) fail("harmonic_extension: non-finite boundary value");

    const std::size_t n2 = n * n;
    std::vector<double> field(n2, 0.0);
    for (std::size_t b = 0; b < cells.size(); ++b) field[cells[b]] = boundary_values[b];
    if (n <= 2) return field;  // no interior cells

    // 5-point Dirichlet Laplace on the (n-2)^2 interior cells via CG
    const std::size_t m = n - 2;
    auto interior_id = [&](std::size_t iy, std::size_t ix) { return (iy - 1) * m + (ix - 1); };
    auto is_interior = [&](std::size_t iy, std::size_t ix) {
        return iy >= 1 && iy <= n - 2 && ix >= 1 && ix <= n - 2;
    };
    std::vector<double> rhs(m * m, 0.0);
    for (std::size_t iy = 1; iy <= n - 2; ++iy)
        for (std::size_t ix = 1; ix <= n - 2; ++ix) {
            double acc = 0;
            const std::size_t nb[4][2] = {{iy - 1, ix}, {iy + 1, ix}, {iy, ix - 1}, {iy, ix + 1}};
            for (auto& q : nb)
                if (!is_interior(q[0], q[1])) acc += field[q[0] * n + q[1]];
            rhs[interior_id(iy, ix)] = acc;
        }
    auto apply_lap = [&](const std::vector<double>& x, std::vector<double>& out) {
        for (std::size_t iy = 1; iy <= n - 2; ++iy)
            for (std::size_t ix = 1; ix <= n - 2; ++ix) {
                double v = 4.0 * x[interior_id(iy, ix)];
                const std::size_t nb[4][2] = {
                    {iy - 1, ix}, {iy + 1, ix}, {iy, ix - 1}, {iy, ix + 1}};
                for (auto& q : nb)
                    if (is_interior(q[0], q[1])) v -= x[interior_id(q[0], q[1])];
                out[interior_id(iy, ix)] = v;
            }
    };
    std::vector<double> x(m * m, 0.0), r = rhs, p = rhs, ap(m * m);
    const double bnorm = norm2(rhs);
    if (bnorm > 0.0) {
        double rr = dot(r, r);
        bool converged = false;
        for (std::size_t it = 0; it < settings.cg_max_iter; ++it) {
            apply_lap(p, ap);
            const double alpha = rr / dot(p, ap);
            for (std::size_t i = 0; i < x.size(); ++i) {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            const double rr_new = dot(r, r);
            if (std::sqrt(rr_new) <= settings.cg_tol * bnorm) {
                converged = true;
                break;
            }
            const double beta = rr_new / rr;
            rr = rr_new;
            for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
        }
        if (!converged) fail("harmonic_extension: CG did not converge");
    }
    for (std::size_t iy = 1; iy <= n - 2; ++iy)
        for (std::size_t ix = 1; ix <= n - 2; ++ix)
            field[iy * n + ix] = x[interior_id(iy, ix)];
    return field;
}

}  // namespace dilo
