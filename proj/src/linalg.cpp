#include "tide/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tide {

double spectral_norm(const Tensor& w, int iters, double tol) {
    if (w.ndim() != 2) throw ShapeError("spectral_norm: need a 2-D tensor");
    const int64_t m = w.dim(0), n = w.dim(1);
    const double* a = w.data();
    std::vector<double> v(static_cast<size_t>(n)), u(static_cast<size_t>(m));
    for (int64_t i = 0; i < n; ++i) {
        v[static_cast<size_t>(i)] = 1.0 + 1e-3 * static_cast<double>(i);
    }
    double nv = 0.0;
    for (double x : v) nv += x * x;
    nv = std::sqrt(nv);
    for (double& x : v) x /= nv;

    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        // u = W v
        for (int64_t i = 0; i < m; ++i) {
            double s = 0.0;
            const double* row = a + i * n;
            for (int64_t j = 0; j < n; ++j) s += row[j] * v[static_cast<size_t>(j)];
            u[static_cast<size_t>(i)] = s;
        }
        double nu = 0.0;
        for (double x : u) nu += x * x;
        nu = std::sqrt(nu);
        if (nu == 0.0) return 0.0;
        // v = W^T u, renormalized
        for (int64_t j = 0; j < n; ++j) v[static_cast<size_t>(j)] = 0.0;
        for (int64_t i = 0; i < m; ++i) {
            const double* row = a + i * n;
            const double ui = u[static_cast<size_t>(i)];
            for (int64_t j = 0; j < n; ++j) v[static_cast<size_t>(j)] += row[j] * ui;
        }
        double nv2 = 0.0;
        for (double x : v) nv2 += x * x;
        nv2 = std::sqrt(nv2);
        if (nv2 == 0.0) return nu;
        for (double& x : v) x /= nv2;
        const double est = nv2 / nu;  // ||W^T u|| / ||u|| converges to sigma_max
        if (it > 0 && std::abs(est - sigma) <= tol * std::max(1.0, est)) {
            sigma = est;
            break;
        }
        sigma = est;
    }
    return sigma;
}

SvdResult jacobi_svd(const Tensor& a, double tol, int max_sweeps) {
    if (a.ndim() != 2) throw ShapeError("jacobi_svd: need a 2-D tensor");
    const int64_t m = a.dim(0), n = a.dim(1);
    // Column-major working copy so rotations touch contiguous memory.
    std::vector<double> w(static_cast<size_t>(m * n));
    const double* src = a.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) w[static_cast<size_t>(j * m + i)] = src[i * n + j];
    }
    std::vector<double> vr(static_cast<size_t>(n * n), 0.0);  // column-major rotation product
    for (int64_t j = 0; j < n; ++j) vr[static_cast<size_t>(j * n + j)] = 1.0;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n - 1; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                double* cp = w.data() + p * m;
                double* cq = w.data() + q * m;
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (int64_t i = 0; i < m; ++i) {
                    app += cp[i] * cp[i];
                    aqq += cq[i] * cq[i];
                    apq += cp[i] * cq[i];
                }
                if (app == 0.0 || aqq == 0.0) continue;
                const double corr = std::abs(apq) / std::sqrt(app * aqq);
                off = std::max(off, corr);
                if (corr <= tol) continue;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (int64_t i = 0; i < m; ++i) {
                    const double x = cp[i], y = cq[i];
                    cp[i] = cs * x - sn * y;
                    cq[i] = sn * x + cs * y;
                }
                double* vp = vr.data() + p * n;
                double* vq = vr.data() + q * n;
                for (int64_t i = 0; i < n; ++i) {
                    const double x = vp[i], y = vq[i];
                    vp[i] = cs * x - sn * y;
                    vq[i] = sn * x + cs * y;
                }
            }
        }
        if (off <= tol) break;
    }

    std::vector<double> sigma(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        double s = 0.0;
        const double* cj = w.data() + j * m;
        for (int64_t i = 0; i < m; ++i) s += cj[i] * cj[i];
        sigma[static_cast<size_t>(j)] = std::sqrt(s);
    }
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)];
    });

    SvdResult out;
    out.u = Tensor({static_cast<int>(m), static_cast<int>(n)});
    out.v = Tensor({static_cast<int>(n), static_cast<int>(n)});
    out.sigma.resize(static_cast<size_t>(n));
    double* pu = out.u.data();
    double* pv = out.v.data();
    for (int64_t jj = 0; jj < n; ++jj) {
        const int64_t j = order[static_cast<size_t>(jj)];
        const double s = sigma[static_cast<size_t>(j)];
        out.sigma[static_cast<size_t>(jj)] = s;
        const double inv = s > 0.0 ? 1.0 / s : 0.0;
        const double* cj = w.data() + j * m;
        for (int64_t i = 0; i < m; ++i) pu[i * n + jj] = cj[i] * inv;
        const double* vj = vr.data() + j * n;
        for (int64_t i = 0; i < n; ++i) pv[i * n + jj] = vj[i];
    }
    return out;
}

}  // namespace tide
