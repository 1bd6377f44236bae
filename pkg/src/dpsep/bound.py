"""Single-step KL bound between a SEP posterior and its privatized counterpart.

The private posterior is built from q = (eta_q, lam_q) as

    eta_p = eta_q + e,          e ~ N(0, sigma1^2 I)
    lam_p = lam_q + E + A,      E symmetric, upper triangle iid N(0, sigma2^2)

with A a spectral shift that keeps lam_p positive definite. ``theorem_bound``
evaluates the closed-form upper bound on E[KL(q || p)], ``mc_expected_kl`` is
its Monte-Carlo oracle, and ``clipped_sep_kl`` gives KL(q || clip(q)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .expfam import GaussianNat, is_pd
from .errors import NotPositiveDefinite

DEFAULT_M_MULT = 3.0


def matrix_variance_stat(d: int, sigma2: float) -> float:
    """Spectral norm of sum_k sigma2^2 B_k B_k^T over the symmetric basis; equals sigma2^2 d."""
    if d < 1:
        raise ValueError("d must be positive")
    return float(sigma2) ** 2 * d


def default_m_tail(d: int, sigma2: float, m_mult: float = DEFAULT_M_MULT) -> float:
    # log d vanishes at d=1, which would make M=0; floor it at 1
    v = matrix_variance_stat(d, sigma2)
    return m_mult * math.sqrt(2.0 * v * max(math.log(d), 1.0))


@dataclass(frozen=True)
class BoundInputs:
    q: GaussianNat
    sigma1: float
    sigma2: float
    rho: float
    m_tail: Optional[float] = None

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("noise scales must be nonnegative")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.m_tail is not None and self.m_tail < 0:
            raise ValueError("m_tail must be nonnegative")

    def tail(self) -> float:
        if self.m_tail is not None:
            return float(self.m_tail)
        return default_m_tail(self.q.dim, self.sigma2)


class BoundResult(NamedTuple):
    bound: float
    confidence: float
    applicable: bool
    reason: str
    m_tail: float


def _check_proper(q: GaussianNat) -> None:
    if not is_pd(q.lam):
        raise NotPositiveDefinite("q precision is not positive definite")


def theorem_bound(inp: BoundInputs) -> BoundResult:
    """Upper bound on E_e E_E KL(q || p), valid with probability ``confidence``.

    Returns ``applicable=False`` (bound NaN) outside the validity window.
    """
    q = inp.q
    _check_proper(q)
    d = q.dim
    m = inp.tail()
    v = matrix_variance_stat(d, inp.sigma2)
    conf = 1.0 if v == 0 else 1.0 - d * math.exp(-m * m / (2.0 * v))

    lam_i, U = np.linalg.eigh(q.lam)
    lmin = lam_i[0]
    rho = inp.rho

    def nope(reason):
        return BoundResult(math.nan, conf, False, reason, m)

    if inp.sigma2 == 0 and abs(rho - lmin) > 1e-12 * max(1.0, abs(lmin)):
        return nope("no precision noise: the A=0 convention requires rho == lambda_min(lam_q)")
    if inp.sigma2 > 0 and not m > 0:
        return nope("tail parameter M must be positive")
    h = 1.0 + (-2.0 * m - lmin + rho) / lam_i
    H = 1.0 + (2.0 * m - lmin + rho) / lam_i
    if np.any(h <= 0):
        return nope(f"h_i <= 0 (min h = {h.min():.4g}); M too large for the spectrum of lam_q")

    s = math.sqrt(2.0 * v * math.log(d)) if d > 1 else 0.0
    k = (h + H - 1.0 + (lmin + s - rho) / lam_i) / (h * H)
    shift = -lmin + s + rho

    eta_rot = U.T @ q.eta
    b = eta_rot / np.sqrt(lam_i)
    a = U @ (eta_rot / lam_i)
    quad = float(np.sum(eta_rot ** 2 / lam_i))

    terms = (
        shift * float(np.sum(1.0 / lam_i)),
        inp.sigma1 ** 2 / lmin * float(np.sum(k)),
        float(np.sum(b ** 2 * k)),
        -quad,
        float(a @ a) * shift,
        float(np.sum(np.log(k))),
    )
    return BoundResult(0.5 * math.fsum(terms), conf, True, "", m)


class MCResult(NamedTuple):
    estimate: float
    stderr: float
    psd_repair_rate: float


def _sym_noise(rng, n, d, sigma2):
    z = rng.standard_normal((n, d, d)) * sigma2
    upper = np.triu(z)
    return upper + np.transpose(np.triu(z, 1), (0, 2, 1))


def mc_expected_kl(q: GaussianNat, sigma1: float, sigma2: float, rho: float,
                   samples: int = 100_000, seed: int = 0, batch: int = 20_000) -> MCResult:
    """Monte-Carlo estimate of E[KL(q || p)] over the privatization noise.

    lam_q + E is shifted to lambda_min = rho only for draws where it is not
    positive definite.
    """
    if samples < 100:
        raise ValueError("samples must be >= 100")
    _check_proper(q)
    if sigma1 == 0 and sigma2 == 0:
        return MCResult(0.0, 0.0, 0.0)
    d = q.dim
    rng = np.random.default_rng(seed)
    lam_q, eta_q = q.lam, q.eta
    cov_q = np.linalg.inv(lam_q)
    mu_q = cov_q @ eta_q
    logdet_q = np.linalg.slogdet(lam_q)[1]
    vals = np.empty(samples)
    repairs = 0
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        e = rng.standard_normal((n, d)) * sigma1
        E = _sym_noise(rng, n, d, sigma2)
        lam_p = lam_q[None] + E
        w, V = np.linalg.eigh(lam_p)
        bad = w[:, 0] <= 0
        repairs += int(bad.sum())
        w = np.where(bad[:, None], w + (-w[:, :1] + rho), w)
        eta_p = eta_q[None] + e
        # lam_p = V diag(w) V^T
        rot = np.einsum("nji,nj->ni", V, eta_p)
        mu_p = np.einsum("nij,nj->ni", V, rot / w)
        diff = mu_p - mu_q[None]
        rot_d = np.einsum("nji,nj->ni", V, diff)
        quad = np.sum(w * rot_d ** 2, axis=1)
        tr = np.einsum("nij,nj,nkj,ki->n", V, w, V, cov_q)
        vals[done:done + n] = 0.5 * (tr + quad - d + logdet_q - np.sum(np.log(w), axis=1))
        done += n
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(samples))
    return MCResult(est, se, repairs / samples)


def tail_event_rate(d: int, sigma2: float, m_tail: float, samples: int = 10_000, seed: int = 0) -> float:
    """Fraction of noise draws with lambda_max(E) <= M."""
    rng = np.random.default_rng(seed)
    E = _sym_noise(rng, samples, d, sigma2)
    return float(np.mean(np.linalg.eigvalsh(E)[:, -1] <= m_tail))


def clipped_sep_kl(q: GaussianNat, c: float) -> float:
    """KL(q || p) where p scales eta_q by 1/max(1, |eta_q|/C) and lam_q by 1/max(1, |lam_q|_F/C)."""
    if not c > 0:
        raise ValueError("c must be positive")
    _check_proper(q)
    d = q.dim
    s_lam = max(1.0, float(np.linalg.norm(q.lam)) / c)
    s_eta = max(1.0, float(np.linalg.norm(q.eta)) / c)
    if s_lam == 1.0 and s_eta == 1.0:
        return 0.0
    b = s_lam / s_eta - 1.0
    quad = float(q.eta @ np.linalg.solve(q.lam, q.eta))
    return 0.5 * (d / s_lam + b * b * quad / s_lam - d + d * math.log(s_lam))
