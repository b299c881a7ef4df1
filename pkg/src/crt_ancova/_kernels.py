"""Compiled inner loops for the profiled likelihood and its Nelder-Mead search.

Falls back to plain Python when numba is unavailable (same results, slower).
Inputs are the per-size collapsed moments built in :mod:`crt_ancova.mmfit`.
"""

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def chol_solve(A, b, out):
    """Solve A x = b for SPD A via Cholesky; writes x to ``out``.

    Returns log det(A), or nan when A is not numerically positive definite.
    """
    k = A.shape[0]
    L = np.zeros((k, k))
    logdet = 0.0
    for j in range(k):
        s = A[j, j]
        for q in range(j):
            s -= L[j, q] * L[j, q]
        if not s > 0.0:
            return np.nan
        L[j, j] = math.sqrt(s)
        logdet += 2.0 * math.log(L[j, j])
        for i in range(j + 1, k):
            s = A[i, j]
            for q in range(j):
                s -= L[i, q] * L[j, q]
            L[i, j] = s / L[j, j]
    z = np.zeros(k)
    for i in range(k):
        s = b[i]
        for q in range(i):
            s -= L[i, q] * z[q]
        z[i] = s / L[i, i]
    for i in range(k - 1, -1, -1):
        s = z[i]
        for q in range(i + 1, k):
            s -= L[q, i] * out[q]
        out[i] = s / L[i, i]
    return logdet


@njit(cache=True)
def profile_objective(n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, sigma2, tau2, reml, beta):
    """Profiled (restricted) log-likelihood; GLS coefficients are written to ``beta``."""
    k = QQ.shape[0]
    G = gs.shape[0]
    A = QQ.copy()
    b = QY.copy()
    yvy = YY
    logdet = 0.0
    ls2 = math.log(sigma2)
    for g in range(G):
        w = tau2 / (sigma2 + gs[g] * tau2)
        for i in range(k):
            b[i] -= w * gSt[g, i]
            for j in range(k):
                A[i, j] -= w * gSS[g, i, j]
        yvy -= w * gtt[g]
        logdet += gc[g] * ((gs[g] - 1.0) * ls2 + math.log(sigma2 + gs[g] * tau2))
    ldA = chol_solve(A, b, beta)
    if math.isnan(ldA):
        return -np.inf
    bb = 0.0
    for i in range(k):
        bb += b[i] * beta[i]
    quad = (yvy - bb) / sigma2
    ll = -0.5 * (logdet + quad) - 0.5 * n_total * LOG_2PI
    if reml:
        ll -= 0.5 * (ldA - k * ls2)
    return ll


@njit(cache=True)
def _neg_scaled(x, n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml, beta):
    sigma2 = math.exp(x[0])
    tau2 = sigma2 * math.exp(x[1])
    ll = profile_objective(n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, sigma2, tau2, reml, beta)
    return -ll / n_total


@njit(cache=True)
def nelder_mead_fit(x0, step, lo, hi, xatol, fatol, max_iter,
                    n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml):
    """Box-clipped Nelder-Mead on the scaled negative objective over (log sigma2, logit rho).

    Coefficients: reflection 1, expansion 2, contraction 1/2, shrink 1/2.
    Stops when the simplex diameter (max coordinate difference between any two
    vertices) is below ``xatol`` and the vertex value spread below ``fatol``.
    Returns (x_best, f_best, n_iter, converged).
    """
    d = x0.shape[0]
    beta = np.zeros(QQ.shape[0])
    sim = np.empty((d + 1, d))
    fv = np.empty(d + 1)
    for j in range(d):
        sim[0, j] = min(max(x0[j], lo[j]), hi[j])
    for v in range(1, d + 1):
        for j in range(d):
            sim[v, j] = sim[0, j]
        t = sim[0, v - 1] + step[v - 1]
        if t > hi[v - 1]:
            t = sim[0, v - 1] - step[v - 1]
        sim[v, v - 1] = min(max(t, lo[v - 1]), hi[v - 1])
    for v in range(d + 1):
        fv[v] = _neg_scaled(sim[v], n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml, beta)

    cen = np.empty(d)
    xr = np.empty(d)
    xe = np.empty(d)
    xc = np.empty(d)
    for it in range(1, max_iter + 1):
        order = np.argsort(fv)
        sim = sim[order].copy()
        fv = fv[order].copy()
        diam = 0.0
        for a in range(d + 1):
            for c in range(a + 1, d + 1):
                for j in range(d):
                    diam = max(diam, abs(sim[a, j] - sim[c, j]))
        if diam < xatol and fv[d] - fv[0] < fatol:
            return sim[0].copy(), fv[0], it - 1, True

        for j in range(d):
            s = 0.0
            for v in range(d):
                s += sim[v, j]
            cen[j] = s / d
        for j in range(d):
            xr[j] = min(max(2.0 * cen[j] - sim[d, j], lo[j]), hi[j])
        fr = _neg_scaled(xr, n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml, beta)
        if fr < fv[0]:
            for j in range(d):
                xe[j] = min(max(cen[j] + 2.0 * (cen[j] - sim[d, j]), lo[j]), hi[j])
            fe = _neg_scaled(xe, n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml, beta)
            if fe < fr:
                sim[d] = xe
                fv[d] = fe
            else:
                sim[d] = xr
                fv[d] = fr
            continue
        if fr < fv[d - 1]:
            sim[d] = xr
            fv[d] = fr
            continue
        if fr < fv[d]:
            for j in range(d):
                xc[j] = cen[j] + 0.5 * (xr[j] - cen[j])
            fc = _neg_scaled(xc, n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml, beta)
            if fc <= fr:
                sim[d] = xc
                fv[d] = fc
                continue
        else:
            for j in range(d):
                xc[j] = cen[j] + 0.5 * (sim[d, j] - cen[j])
            fc = _neg_scaled(xc, n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml, beta)
            if fc < fv[d]:
                sim[d] = xc
                fv[d] = fc
                continue
        for v in range(1, d + 1):
            for j in range(d):
                sim[v, j] = sim[0, j] + 0.5 * (sim[v, j] - sim[0, j])
            fv[v] = _neg_scaled(sim[v], n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, reml, beta)

    best = np.argmin(fv)
    return sim[best].copy(), fv[best], max_iter, False


@njit(cache=True)
def profile_score(n_total, QQ, QY, YY, gs, gc, gSS, gSt, gtt, sigma2, tau2, reml, grad):
    """Gradient of the profiled (restricted) log-likelihood in (sigma2, tau2).

    Writes the two partial derivatives to ``grad``; returns False when the
    weighted Gram matrix is not positive definite.
    """
    k = QQ.shape[0]
    G = gs.shape[0]
    A = QQ.copy()
    b = QY.copy()
    for g in range(G):
        w = tau2 / (sigma2 + gs[g] * tau2)
        for i in range(k):
            b[i] -= w * gSt[g, i]
            for j in range(k):
                A[i, j] -= w * gSS[g, i, j]
    beta = np.zeros(k)
    if math.isnan(chol_solve(A, b, beta)):
        return False
    rss = YY
    for i in range(k):
        rss -= 2.0 * beta[i] * QY[i]
        for j in range(k):
            rss += beta[i] * QQ[i, j] * beta[j]
    g_s = rss / (sigma2 * sigma2)
    g_t = 0.0
    D_s = QQ / (sigma2 * sigma2)  # sum_i Q_i' V_i^2 Q_i
    D_t = np.zeros((k, k))  # sum_i Q_i' V_i 1 1' V_i Q_i
    for g in range(G):
        n = gs[g]
        lam = 1.0 / (sigma2 + n * tau2)
        w = tau2 * lam
        r2 = gtt[g]
        for i in range(k):
            r2 -= 2.0 * beta[i] * gSt[g, i]
            for j in range(k):
                r2 += beta[i] * gSS[g, i, j] * beta[j]
        c = n * w * w - 2.0 * w
        g_s += (-gc[g] * n * (1.0 - w) / sigma2) + c * r2 / (sigma2 * sigma2)
        g_t += -gc[g] * n * lam + lam * lam * r2
        if reml:
            for i in range(k):
                for j in range(k):
                    D_s[i, j] += c * gSS[g, i, j] / (sigma2 * sigma2)
                    D_t[i, j] += lam * lam * gSS[g, i, j]
    grad[0] = 0.5 * g_s
    grad[1] = 0.5 * g_t
    if reml:
        # G = A / sigma2; tr(G^{-1} D) = sigma2 * tr(A^{-1} D)
        col = np.zeros(k)
        e = np.zeros(k)
        tr_s = 0.0
        tr_t = 0.0
        for j in range(k):
            for i in range(k):
                e[i] = D_s[i, j]
            chol_solve(A, e, col)
            tr_s += col[j]
            for i in range(k):
                e[i] = D_t[i, j]
            chol_solve(A, e, col)
            tr_t += col[j]
        grad[0] += 0.5 * sigma2 * tr_s
        grad[1] += 0.5 * sigma2 * tr_t
    return True
