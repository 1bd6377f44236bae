"""Gaussian algebra in natural parameters.

A Gaussian N(mu, Sigma) is carried as ``(eta, lam) = (Sigma^-1 mu, Sigma^-1)``.
Factor products and quotients are sums and differences of these, which is
what every engine in the package relies on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from .errors import DimensionMismatch, NotPositiveDefinite

__all__ = [
    "GaussianNat",
    "GaussianMoments",
    "ClipMode",
    "ClipPolicy",
    "to_moments",
    "to_natural",
    "clip",
    "combine",
    "psd_project",
    "kl_gaussian",
    "is_pd",
]


def _sym(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def is_pd(a: np.ndarray) -> bool:
    """Cholesky-based positive definiteness test."""
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(frozen=True, eq=False)
class GaussianNat:
    """Natural parameters of a d-dimensional Gaussian (possibly improper).

    ``lam`` is symmetrized on construction. Pass ``proper=True`` to require
    (and record) positive definiteness.
    """

    eta: np.ndarray
    lam: np.ndarray
    proper: bool = False

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float).reshape(-1)
        lam = np.array(self.lam, dtype=float).reshape(eta.size, eta.size)
        lam = _sym(lam)
        eta.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "lam", lam)
        if self.proper and not is_pd(lam):
            raise NotPositiveDefinite("precision matrix is not positive definite")

    @property
    def dim(self) -> int:
        return self.eta.size

    def is_proper(self) -> bool:
        return is_pd(self.lam)

    def flat(self) -> np.ndarray:
        """eta followed by the full row-major precision matrix."""
        return np.concatenate([self.eta, self.lam.ravel()])

    def scale(self, w: float) -> "GaussianNat":
        return GaussianNat(w * self.eta, w * self.lam)

    def __add__(self, other: "GaussianNat") -> "GaussianNat":
        return combine([(1.0, self), (1.0, other)])

    def __sub__(self, other: "GaussianNat") -> "GaussianNat":
        return combine([(1.0, self), (-1.0, other)])

    def equals(self, other: "GaussianNat") -> bool:
        return np.array_equal(self.eta, other.eta) and np.array_equal(self.lam, other.lam)

    def to_json(self) -> dict:
        return {"eta": self.eta.tolist(), "lambda": self.lam.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "GaussianNat":
        lam = np.asarray(obj["lambda"], dtype=float)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise DimensionMismatch("lambda must be a square matrix")
        if not np.allclose(lam, lam.T, rtol=1e-12, atol=1e-12):
            raise ValueError("lambda is not symmetric")
        if len(obj["eta"]) != lam.shape[0]:
            raise DimensionMismatch("eta and lambda sizes differ")
        return cls(obj["eta"], lam)


@dataclass(frozen=True, eq=False)
class GaussianMoments:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        sigma = _sym(np.array(self.sigma, dtype=float).reshape(mu.size, mu.size))
        if not is_pd(sigma):
            raise NotPositiveDefinite("covariance is not positive definite")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


def to_moments(g: GaussianNat) -> GaussianMoments:
    mean, cov, ok = K.to_moments_block(g.eta[None, :].copy(), g.lam[None].copy())
    if not ok:
        raise NotPositiveDefinite("precision matrix is not positive definite")
    return GaussianMoments(mean[0], cov[0])


def to_natural(m: GaussianMoments) -> GaussianNat:
    eta, lam, ok = K.to_natural_block(m.mu[None, :].copy(), m.sigma[None].copy())
    if not ok:
        raise NotPositiveDefinite("covariance is not positive definite")
    return GaussianNat(eta[0], lam[0], proper=True)


class ClipMode(str, enum.Enum):
    JOINT = "joint"
    PER_BLOCK = "per_block"


@dataclass(frozen=True)
class ClipPolicy:
    """Norm bound ``c`` on natural parameters.

    JOINT bounds ||(eta, vec(lam))||_2; PER_BLOCK bounds ||eta||_2 and
    ||lam||_F separately.
    """

    c: float
    mode: ClipMode = ClipMode.JOINT

    def __post_init__(self):
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError(f"clip norm must be positive and finite, got {self.c}")
        object.__setattr__(self, "mode", ClipMode(self.mode))

    @property
    def per_block(self) -> bool:
        return self.mode is ClipMode.PER_BLOCK

    def to_json(self) -> dict:
        return {"c": self.c, "mode": self.mode.value}

    @classmethod
    def from_json(cls, obj) -> "ClipPolicy":
        if isinstance(obj, (int, float)):
            return cls(float(obj))
        return cls(float(obj["c"]), obj.get("mode", "joint"))


def clip(g: GaussianNat, policy: ClipPolicy) -> GaussianNat:
    eta, lam = K.clip_block(g.eta[None].copy(), g.lam[None].copy(), policy.c, policy.per_block)
    if np.array_equal(eta[0], g.eta) and np.array_equal(lam[0], g.lam):
        return g
    return GaussianNat(eta[0], lam[0])


def combine(terms: Iterable[tuple[float, GaussianNat]]) -> GaussianNat:
    """Weighted sum of natural parameters (product of powered factors)."""
    terms = list(terms)
    if not terms:
        raise ValueError("combine needs at least one term")
    d = terms[0][1].dim
    eta = np.zeros(d)
    lam = np.zeros((d, d))
    for w, g in terms:
        if g.dim != d:
            raise DimensionMismatch(f"dimension {g.dim} != {d}")
        eta = eta + w * g.eta
        lam = lam + w * g.lam
    return GaussianNat(eta, lam)


def psd_project(lam: np.ndarray, rho: float = 1e-6, force: bool = False) -> np.ndarray:
    """Shift the spectrum of ``lam`` so that its smallest eigenvalue is ``rho``.

    Matrices already satisfying lambda_min >= rho come back unchanged unless
    ``force`` is set, in which case the shift (which may be negative) is
    always applied.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    lam = _sym(np.asarray(lam, dtype=float))
    out, _ = K.psd_shift(lam, float(rho), bool(force))
    return out


def _chol_or_raise(a, what):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(f"{what} is not positive definite") from None


def kl_gaussian(q: GaussianNat, p: GaussianNat) -> float:
    """KL(q || p) evaluated directly in natural parameters."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"dimension {q.dim} != {p.dim}")
    d = q.dim
    Lq = _chol_or_raise(q.lam, "q precision")
    Lp = _chol_or_raise(p.lam, "p precision")
    inv_q = np.linalg.inv(q.lam)
    mu_q = np.linalg.solve(q.lam, q.eta)
    mu_p = np.linalg.solve(p.lam, p.eta)
    diff = mu_p - mu_q
    logdet_q = 2.0 * np.log(np.diag(Lq)).sum()
    logdet_p = 2.0 * np.log(np.diag(Lp)).sum()
    val = 0.5 * (np.trace(p.lam @ inv_q) + diff @ p.lam @ diff - d + logdet_q - logdet_p)
    return float(val)


def block_arrays(components: Sequence[GaussianNat]) -> tuple[np.ndarray, np.ndarray]:
    eta = np.stack([c.eta for c in components])
    lam = np.stack([c.lam for c in components])
    return eta, lam
