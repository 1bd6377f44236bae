"""Sensitivity, the Gaussian mechanism on natural parameters, and RDP accounting.

The accountant uses the general upper bound of Wang, Balle & Kasiviswanathan
(2019) for mechanisms run on a random subset drawn without replacement,
specialised to the Gaussian mechanism whose RDP curve is alpha / (2 sigma^2).
Every step of a run is treated as an independent q-subsampled invocation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _kernels as K
from .errors import CalibrationOutOfRange, UnsupportedOrder
from .expfam import GaussianNat

MAX_ORDER = 1e6
SIGMA_BRACKET = (1e-2, 1e4)

DEFAULT_ORDERS: tuple[float, ...] = (
    (1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)
    + tuple(float(a) for a in range(5, 65))
    + (128.0, 256.0, 512.0)
)


def sensitivity(gamma: float, c: float, n: int) -> float:
    """L2 sensitivity 2*gamma*C/N of the damped posterior update."""
    return 2.0 * gamma * c / n


def noise_width(d: int) -> int:
    """Standard normals consumed per Gaussian block: eta plus upper triangle of lam."""
    return d + d * (d + 1) // 2


def privatize(theta: GaussianNat, delta_sens: float, sigma: float, rng: np.random.Generator) -> GaussianNat:
    """Gaussian mechanism on (eta, lam) with per-entry std sigma * delta_sens.

    The precision noise is a symmetric matrix whose upper triangle (with
    diagonal) is iid and mirrored below. The result may be improper.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return theta
    d = theta.dim
    z = rng.standard_normal((1, noise_width(d)))
    eta, lam = K.add_noise_block(theta.eta[None].copy(), theta.lam[None].copy(), z, sigma * delta_sens)
    return GaussianNat(eta[0], lam[0])


def _check_order(alpha: float) -> None:
    if not (math.isfinite(alpha) and 1.0 < alpha <= MAX_ORDER):
        raise UnsupportedOrder(f"order {alpha} outside (1, {MAX_ORDER:g}]")


def _log_expm1(x: float) -> float:
    if x > 50:
        return x + math.log1p(-math.exp(-x))
    return math.log(math.expm1(x))


def _rdp_integer(sigma: float, q: float, a: int) -> float:
    eps = lambda j: j / (2.0 * sigma * sigma)  # noqa: E731
    full = eps(a)
    log_q = math.log(q)
    e2 = eps(2)
    second = min(math.log(4.0) + _log_expm1(e2), math.log(2.0) + e2)
    logs = [0.0, 2 * log_q + math.log(a * (a - 1) / 2.0) + second]
    if a >= 3:
        j = np.arange(3, a + 1, dtype=float)
        log_binom = gammaln(a + 1) - gammaln(j + 1) - gammaln(a - j + 1)
        tail = math.log(2.0) + j * log_q + log_binom + (j - 1) * j / (2.0 * sigma * sigma)
        logs.extend(tail.tolist())
    bound = float(logsumexp(logs)) / (a - 1)
    # subsampling never hurts
    return min(bound, full)


def rdp_subsampled_gaussian(sigma: float, q: float, alpha: float) -> float:
    """Upper bound on the order-alpha RDP of the q-subsampled Gaussian mechanism."""
    _check_order(alpha)
    if not (sigma > 0):
        raise ValueError("sigma must be positive")
    if not (0.0 < q <= 1.0):
        raise ValueError("sampling rate must lie in (0, 1]")
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        return _rdp_integer(sigma, q, int(alpha))
    # (alpha - 1) * eps(alpha) is convex in alpha: interpolate between integers
    lo, hi = math.floor(alpha), math.ceil(alpha)
    k_lo = 0.0 if lo == 1 else (lo - 1) * _rdp_integer(sigma, q, lo)
    k_hi = (hi - 1) * _rdp_integer(sigma, q, hi)
    k = k_lo + (alpha - lo) * (k_hi - k_lo)
    return min(k / (alpha - 1), alpha / (2.0 * sigma * sigma))


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values differ in length")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValueError("orders must be strictly increasing")
        if any(v < 0 for v in self.values):
            raise ValueError("RDP values must be nonnegative")

    def compose(self, times: int) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(times * v for v in self.values))

    def to_epsilon(self, delta: float) -> tuple[float, float]:
        """(epsilon, best order) via eps = min_a [rdp(a) + log(1/delta)/(a-1)]."""
        best = (math.inf, self.orders[0])
        for a, v in zip(self.orders, self.values):
            e = v + math.log(1.0 / delta) / (a - 1.0)
            if e < best[0]:
                best = (e, a)
        return best


def rdp_curve(sigma: float, q: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    orders = tuple(sorted(float(a) for a in orders))
    one = RdpCurve(orders, tuple(rdp_subsampled_gaussian(sigma, q, a) for a in orders))
    return one.compose(steps)


def epsilon_of(sigma: float, q: float, steps: int, delta: float,
               orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if steps < 1:
        raise ValueError("steps must be positive")
    return rdp_curve(sigma, q, steps, orders).to_epsilon(delta)[0]


def calibrate_sigma(epsilon: float, delta: float, q: float, steps: int,
                    orders: Sequence[float] = DEFAULT_ORDERS, rtol: float = 1e-3) -> float:
    """Smallest noise multiplier (up to ``rtol``) whose epsilon_of is <= epsilon."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    lo, hi = SIGMA_BRACKET
    if epsilon_of(hi, q, steps, delta, orders) > epsilon:
        raise CalibrationOutOfRange(
            f"epsilon={epsilon} unreachable with sigma <= {hi:g} (q={q}, steps={steps})")
    if epsilon_of(lo, q, steps, delta, orders) <= epsilon:
        return lo
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if epsilon_of(mid, q, steps, delta, orders) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class PrivacySpec:
    """Privacy budget and mechanism settings for one DP-SEP run.

    Either ``epsilon`` or ``sigma`` may be left as None and filled by
    :meth:`resolve`.
    """

    delta: float
    epsilon: Optional[float] = None
    sigma: Optional[float] = None
    sampling_rate: Optional[float] = None
    steps: Optional[int] = None
    clip_c: float = 1.0
    damping: float = 1.0
    orders: tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self):
        if self.epsilon is None and self.sigma is None:
            raise ValueError("one of epsilon or sigma is required")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not self.clip_c > 0:
            raise ValueError("clip_c must be positive")

    def resolve(self, n: int, epochs: int) -> "PrivacySpec":
        """Bind to a run of ``epochs`` passes over ``n`` points and fill the missing side."""
        q = 1.0 / n
        steps = epochs * n
        spec = replace(self, sampling_rate=q, steps=steps)
        if spec.sigma is None:
            spec = replace(spec, sigma=calibrate_sigma(spec.epsilon, spec.delta, q, steps, spec.orders))
        elif spec.epsilon is None:
            eps = math.inf if spec.sigma == 0 else epsilon_of(spec.sigma, q, steps, spec.delta, spec.orders)
            spec = replace(spec, epsilon=eps)
        return spec

    def achieved_epsilon(self) -> float:
        if self.sigma is None or self.sampling_rate is None or self.steps is None:
            raise ValueError("privacy spec is not resolved")
        if self.sigma == 0:
            return math.inf
        return epsilon_of(self.sigma, self.sampling_rate, self.steps, self.delta, self.orders)

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon, "delta": self.delta, "sigma": self.sigma,
            "sampling_rate": self.sampling_rate, "steps": self.steps,
            "clip_c": self.clip_c, "damping": self.damping,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrivacySpec":
        keys = ("epsilon", "delta", "sigma", "sampling_rate", "steps", "clip_c", "damping")
        kw = {k: obj[k] for k in keys if obj.get(k) is not None}
        if "orders" in obj:
            kw["orders"] = tuple(float(a) for a in obj["orders"])
        return cls(**kw)
