"""Compiled inner loops.

Everything here works on plain float64 arrays in block layout: ``eta`` is
``(J, d)`` and ``lam`` is ``(J, d, d)``. The public API in :mod:`dpsep.expfam`
and :mod:`dpsep.mog` calls these same functions, so a single code path backs
both the library surface and the engines (needed for bitwise-reproducible
trajectories).
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
# clip() leaves inputs within c * (1 + CLIP_RTOL) untouched; keeps clip idempotent
CLIP_RTOL = 1e-14


@njit(cache=True)
def chol(a):
    """Lower Cholesky factor. Returns (L, ok)."""
    n = a.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def chol_logdet(L):
    s = 0.0
    for i in range(L.shape[0]):
        s += math.log(L[i, i])
    return 2.0 * s


@njit(cache=True)
def chol_solve(L, b):
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, n):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]
    return x


@njit(cache=True)
def chol_inverse(L):
    n = L.shape[0]
    out = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[:] = 0.0
        e[j] = 1.0
        out[:, j] = chol_solve(L, e)
    return symmetrize(out)


@njit(cache=True)
def symmetrize(a):
    n = a.shape[0]
    out = np.empty((n, n))
    for i in range(n):
        out[i, i] = a[i, i]
        for j in range(i + 1, n):
            v = (a[i, j] + a[j, i]) / 2.0
            out[i, j] = v
            out[j, i] = v
    return out


@njit(cache=True)
def blocks_pd(lam):
    for j in range(lam.shape[0]):
        _, ok = chol(lam[j])
        if not ok:
            return False
    return True


@njit(cache=True)
def to_moments_block(eta, lam):
    """Natural -> (mean, cov) per block. ok=False if any block is not PD."""
    J, d = eta.shape
    mean = np.empty((J, d))
    cov = np.empty((J, d, d))
    for j in range(J):
        L, ok = chol(lam[j])
        if not ok:
            return mean, cov, False
        cov[j] = chol_inverse(L)
        mean[j] = chol_solve(L, eta[j])
    return mean, cov, True


@njit(cache=True)
def to_natural_block(mean, cov):
    J, d = mean.shape
    eta = np.empty((J, d))
    lam = np.empty((J, d, d))
    for j in range(J):
        L, ok = chol(cov[j])
        if not ok:
            return eta, lam, False
        lam[j] = chol_inverse(L)
        eta[j] = lam[j] @ mean[j]
    return eta, lam, True


@njit(cache=True)
def tilted_block(cav_eta, cav_lam, x, logw, s2):
    """Moment-match cavity x sum_j w_j N(x; mu_j, s2 I) onto factorized Gaussians.

    Returns (ok, log_z, resp, mean, cov). The cluster label is summed out, so
    each block's tilted marginal is a two-part mixture of the untouched
    cavity block and its conjugate update, weighted by the responsibility.
    """
    J, d = cav_eta.shape
    resp = np.zeros(J)
    mean = np.zeros((J, d))
    cov = np.zeros((J, d, d))
    m_cav = np.empty((J, d))
    v_cav = np.empty((J, d, d))
    m_post = np.empty((J, d))
    v_post = np.empty((J, d, d))
    loglik = np.empty(J)
    inv_s2 = 1.0 / s2
    for j in range(J):
        L, ok = chol(cav_lam[j])
        if not ok:
            return False, 0.0, resp, mean, cov
        v = chol_inverse(L)
        m = chol_solve(L, cav_eta[j])
        m_cav[j] = m
        v_cav[j] = v
        # predictive N(x; m, V + s2 I)
        S = v.copy()
        for i in range(d):
            S[i, i] += s2
        Ls, ok = chol(S)
        if not ok:
            return False, 0.0, resp, mean, cov
        diff = x - m
        sol = chol_solve(Ls, diff)
        quad = 0.0
        for i in range(d):
            quad += diff[i] * sol[i]
        loglik[j] = logw[j] - 0.5 * (d * LOG_2PI + chol_logdet(Ls) + quad)
        # conjugate update in precision form
        P = cav_lam[j].copy()
        for i in range(d):
            P[i, i] += inv_s2
        Lp, ok = chol(P)
        if not ok:
            return False, 0.0, resp, mean, cov
        v_post[j] = chol_inverse(Lp)
        m_post[j] = chol_solve(Lp, cav_eta[j] + x * inv_s2)

    top = loglik.max()
    tot = 0.0
    for j in range(J):
        resp[j] = math.exp(loglik[j] - top)
        tot += resp[j]
    for j in range(J):
        resp[j] /= tot
    log_z = top + math.log(tot)

    for j in range(J):
        r = resp[j]
        dm = m_post[j] - m_cav[j]
        mean[j] = r * m_post[j] + (1.0 - r) * m_cav[j]
        c = r * v_post[j] + (1.0 - r) * v_cav[j] + (r * (1.0 - r)) * np.outer(dm, dm)
        cov[j] = symmetrize(c)
    return True, log_z, resp, mean, cov


@njit(cache=True)
def flat_norm(eta, lam):
    s = 0.0
    for v in eta.ravel():
        s += v * v
    for v in lam.ravel():
        s += v * v
    return math.sqrt(s)


@njit(cache=True)
def vec_norm(a):
    s = 0.0
    for v in a.ravel():
        s += v * v
    return math.sqrt(s)


@njit(cache=True)
def clip_block(eta, lam, c, per_block):
    """Norm clipping; returns new arrays (inputs returned as-is when inactive)."""
    if per_block:
        ne = vec_norm(eta)
        nl = vec_norm(lam)
        if ne > c * (1.0 + CLIP_RTOL):
            eta = eta / (ne / c)
        if nl > c * (1.0 + CLIP_RTOL):
            lam = lam / (nl / c)
        return eta, lam
    n = flat_norm(eta, lam)
    if n > c * (1.0 + CLIP_RTOL):
        f = n / c
        return eta / f, lam / f
    return eta, lam


@njit(cache=True)
def add_noise_block(eta, lam, z, scale):
    """eta += scale*z[:, :d]; lam += symmetric noise from z[:, d:] (upper tri, row-major)."""
    J, d = eta.shape
    out_eta = eta.copy()
    out_lam = lam.copy()
    for j in range(J):
        for i in range(d):
            out_eta[j, i] += scale * z[j, i]
        k = d
        for a in range(d):
            for b in range(a, d):
                e = scale * z[j, k]
                out_lam[j, a, b] += e
                if b != a:
                    out_lam[j, b, a] += e
                k += 1
    return out_eta, out_lam


@njit(cache=True)
def psd_shift(a, rho, force):
    """Shift spectrum so lambda_min == rho, unless already >= rho and not forced."""
    w = np.linalg.eigvalsh(a)
    lo = w[0]
    if lo >= rho and not force:
        return a, False
    out = a.copy()
    shift = -lo + rho
    for i in range(a.shape[0]):
        out[i, i] += shift
    return out, True


@njit(cache=True)
def sep_proposal(x, post_eta, post_lam, f_eta, f_lam, prior_eta, prior_lam,
                 logw, s2, w_site, w_f, clip_c, per_block):
    """Pre-noise natural parameters w_site*f_n + w_f*f + prior for one datapoint.

    f_n (the intermediate factor) is clipped when clip_c > 0. Returns
    (ok, eta, lam); ok is False when the cavity or matched moments are not PD.
    """
    cav_eta = post_eta - f_eta
    cav_lam = post_lam - f_lam
    ok, _, _, mean, cov = tilted_block(cav_eta, cav_lam, x, logw, s2)
    if not ok:
        return False, cav_eta, cav_lam
    m_eta, m_lam, ok = to_natural_block(mean, cov)
    if not ok:
        return False, cav_eta, cav_lam
    s_eta = m_eta - cav_eta
    s_lam = m_lam - cav_lam
    if clip_c > 0.0:
        s_eta, s_lam = clip_block(s_eta, s_lam, clip_c, per_block)
    new_eta = w_site * s_eta + w_f * f_eta + prior_eta
    new_lam = w_site * s_lam + w_f * f_lam + prior_lam
    return True, new_eta, new_lam


@njit(cache=True)
def sep_pass(order, X, post_eta, post_lam, f_eta, f_lam, prior_eta, prior_lam,
             logw, s2, n_total, gamma, clip_c, per_block, noise, noise_scale, rho):
    """One pass of the SEP family over ``order``; arrays updated in place.

    clip_c <= 0 disables clipping; noise_scale == 0 disables the Gaussian
    mechanism (and with it the PSD repair). Returns (failures, repairs).
    """
    failures = 0
    repairs = 0
    N = float(n_total)
    w_site = gamma / N
    w_f = N - gamma / N
    for t in range(order.shape[0]):
        n = order[t]
        ok, new_eta, new_lam = sep_proposal(X[n], post_eta, post_lam, f_eta, f_lam, prior_eta, prior_lam,
                                            logw, s2, w_site, w_f, clip_c, per_block)
        if not ok:
            failures += 1
            continue
        if noise_scale > 0.0:
            new_eta, new_lam = add_noise_block(new_eta, new_lam, noise[t], noise_scale)
            for j in range(new_lam.shape[0]):
                fixed, did = psd_shift(new_lam[j], rho, False)
                if did:
                    new_lam[j] = fixed
                    repairs += 1
        nf_eta = (new_eta - prior_eta) / N
        nf_lam = (new_lam - prior_lam) / N
        if clip_c > 0.0:
            nf_eta, nf_lam = clip_block(nf_eta, nf_lam, clip_c, per_block)
        np_eta = N * nf_eta + prior_eta
        np_lam = N * nf_lam + prior_lam
        if not blocks_pd(np_lam):
            failures += 1
            continue
        f_eta[:] = nf_eta
        f_lam[:] = nf_lam
        post_eta[:] = np_eta
        post_lam[:] = np_lam
    return failures, repairs


@njit(cache=True)
def ep_pass(order, X, post_eta, post_lam, site_eta, site_lam, logw, s2, damping):
    """One EP pass; per-site factors stored in site_eta (N, J, d), site_lam (N, J, d, d)."""
    failures = 0
    for t in range(order.shape[0]):
        n = order[t]
        cav_eta = post_eta - site_eta[n]
        cav_lam = post_lam - site_lam[n]
        ok, _, _, mean, cov = tilted_block(cav_eta, cav_lam, X[n], logw, s2)
        if not ok:
            failures += 1
            continue
        m_eta, m_lam, ok = to_natural_block(mean, cov)
        if not ok:
            failures += 1
            continue
        s_eta = m_eta - cav_eta
        s_lam = m_lam - cav_lam
        if damping < 1.0:
            s_eta = (1.0 - damping) * site_eta[n] + damping * s_eta
            s_lam = (1.0 - damping) * site_lam[n] + damping * s_lam
        np_eta = cav_eta + s_eta
        np_lam = cav_lam + s_lam
        if not blocks_pd(np_lam):
            failures += 1
            continue
        site_eta[n] = s_eta
        site_lam[n] = s_lam
        post_eta[:] = np_eta
        post_lam[:] = np_lam
    return failures
