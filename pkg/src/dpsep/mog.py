"""Mixture-of-Gaussians clustering model with known noise and weights.

Only the component means are inferred. The approximate posterior over means
is factorized across components; cluster labels are summed out analytically
inside :func:`tilted_moments`.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans
from scipy.optimize import linear_sum_assignment

from . import _kernels as K
from .errors import DimensionMismatch, NotPositiveDefinite
from .expfam import GaussianMoments, GaussianNat, block_arrays


@dataclass(frozen=True)
class MoGModel:
    j: int = 4
    d: int = 4
    noise_sd: float = 0.5
    weights: Optional[tuple[float, ...]] = None
    prior_mean: Optional[tuple[float, ...]] = None
    prior_var: float = 1.0

    def __post_init__(self):
        if self.j < 1 or self.d < 1:
            raise ValueError("j and d must be positive")
        if not self.noise_sd > 0 or not self.prior_var > 0:
            raise ValueError("noise_sd and prior_var must be positive")
        w = (1.0 / self.j,) * self.j if self.weights is None else tuple(float(x) for x in self.weights)
        if len(w) != self.j or min(w) <= 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("weights must be a positive simplex vector of length j")
        m = (0.0,) * self.d if self.prior_mean is None else tuple(float(x) for x in self.prior_mean)
        if len(m) != self.d:
            raise DimensionMismatch("prior_mean must have length d")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "prior_mean", m)

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(np.asarray(self.weights))

    def prior_natural(self) -> tuple[np.ndarray, np.ndarray]:
        """Block natural parameters of the prior over all component means."""
        lam = np.broadcast_to(np.eye(self.d) / self.prior_var, (self.j, self.d, self.d)).copy()
        eta = np.broadcast_to(np.asarray(self.prior_mean) / self.prior_var, (self.j, self.d)).copy()
        return eta, lam

    def to_json(self) -> dict:
        return {"j": self.j, "d": self.d, "noise_sd": self.noise_sd, "weights": list(self.weights),
                "prior_mean": list(self.prior_mean), "prior_var": self.prior_var}

    @classmethod
    def from_json(cls, obj: dict) -> "MoGModel":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.items()})


@dataclass(frozen=True, eq=False)
class PosteriorMoments:
    """Per-component means (J, d) and covariances (J, d, d)."""

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covs, dtype=float)
        if means.ndim != 2 or covs.shape != means.shape + (means.shape[1],):
            raise DimensionMismatch(f"bad shapes {means.shape} / {covs.shape}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def j(self) -> int:
        return self.means.shape[0]

    def component(self, k: int) -> GaussianMoments:
        return GaussianMoments(self.means[k], self.covs[k])

    def to_json(self) -> dict:
        return {"means": self.means.tolist(), "covs": self.covs.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "PosteriorMoments":
        return cls(np.asarray(obj["means"]), np.asarray(obj["covs"]))


@dataclass(frozen=True, eq=False)
class MeansPosterior:
    """Factorized Gaussian posterior over the J component means, natural form."""

    eta: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float)
        lam = np.array(self.lam, dtype=float)
        if eta.ndim != 2 or lam.shape != eta.shape + (eta.shape[1],):
            raise DimensionMismatch(f"bad shapes {eta.shape} / {lam.shape}")
        lam = (lam + np.swapaxes(lam, 1, 2)) / 2.0
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_components(cls, comps: Sequence[GaussianNat]) -> "MeansPosterior":
        return cls(*block_arrays(comps))

    @property
    def components(self) -> list[GaussianNat]:
        return [GaussianNat(e, l) for e, l in zip(self.eta, self.lam)]

    def is_proper(self) -> bool:
        return bool(K.blocks_pd(np.ascontiguousarray(self.lam)))

    def to_moments(self) -> PosteriorMoments:
        mean, cov, ok = K.to_moments_block(np.ascontiguousarray(self.eta), np.ascontiguousarray(self.lam))
        if not ok:
            raise NotPositiveDefinite("posterior block is not positive definite")
        return PosteriorMoments(mean, cov)

    def to_json(self) -> dict:
        return {"components": [c.to_json() for c in self.components]}


@dataclass(frozen=True, eq=False)
class Dataset:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    true_means: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be an N x d matrix with N >= 1")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.true_means is not None:
            object.__setattr__(self, "true_means", np.asarray(self.true_means, dtype=float))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def write_csv(self, path) -> None:
        path = Path(path)
        cols = [f"x{i}" for i in range(self.d)] + (["label"] if self.labels is not None else [])
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i, row in enumerate(self.points):
                vals = [repr(float(v)) for v in row]
                if self.labels is not None:
                    vals.append(str(int(self.labels[i])))
                w.writerow(vals)
        if self.true_means is not None:
            side = path.with_suffix(".means.json")
            side.write_text(json.dumps({"true_means": self.true_means.tolist()}, indent=2))

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        feat = [i for i, h in enumerate(header) if h != "label"]
        points = np.array([[float(r[i]) for i in feat] for r in body])
        labels = None
        if "label" in header:
            k = header.index("label")
            labels = np.array([int(r[k]) for r in body])
        side = path.with_suffix(".means.json")
        true_means = np.asarray(json.loads(side.read_text())["true_means"]) if side.exists() else None
        return cls(points, labels, true_means)


def generate_synthetic(model: MoGModel, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    means = np.asarray(model.prior_mean) + math.sqrt(model.prior_var) * rng.standard_normal((model.j, model.d))
    labels = rng.choice(model.j, size=n, p=np.asarray(model.weights))
    points = means[labels] + model.noise_sd * rng.standard_normal((n, model.d))
    return Dataset(points, labels, means)


class Tilted(NamedTuple):
    log_z: float
    responsibilities: np.ndarray
    matched: PosteriorMoments


def tilted_moments(cavity: MeansPosterior, x, model: MoGModel) -> Tilted:
    """Moments of cavity(mu) * sum_j w_j N(x; mu_j, noise_sd^2 I), projected per component."""
    x = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1))
    if x.size != cavity.eta.shape[1]:
        raise DimensionMismatch("point dimension does not match posterior")
    ok, log_z, resp, mean, cov = K.tilted_block(
        np.ascontiguousarray(cavity.eta), np.ascontiguousarray(cavity.lam), x,
        model.log_weights, model.noise_sd ** 2)
    if not ok:
        raise NotPositiveDefinite("cavity is not positive definite")
    return Tilted(log_z, resp, PosteriorMoments(mean, cov))


def site_update(cavity_j: GaussianNat, matched_j: GaussianMoments) -> GaussianNat:
    """New site factor proj[tilted] / cavity, i.e. natural(matched) - cavity."""
    eta, lam, ok = K.to_natural_block(matched_j.mu[None].copy(), matched_j.sigma[None].copy())
    if not ok:
        raise NotPositiveDefinite("matched covariance is not positive definite")
    return GaussianNat(eta[0] - cavity_j.eta, lam[0] - cavity_j.lam)


def predictive_logpdf(posterior: PosteriorMoments, points: np.ndarray, model: MoGModel) -> np.ndarray:
    """log w_j + log N(x_i; m_j, V_j + s^2 I) as an (N, J) array."""
    pts = np.atleast_2d(points)
    out = np.empty((pts.shape[0], posterior.j))
    d = pts.shape[1]
    for j in range(posterior.j):
        S = posterior.covs[j] + model.noise_sd ** 2 * np.eye(d)
        L = np.linalg.cholesky(S)
        z = np.linalg.solve(L, (pts - posterior.means[j]).T)
        out[:, j] = (model.log_weights[j] - 0.5 * (d * K.LOG_2PI + 2 * np.log(np.diag(L)).sum())
                     - 0.5 * (z * z).sum(axis=0))
    return out


def assign_labels(posterior, data, model: MoGModel) -> np.ndarray:
    """MAP cluster per point under the posterior predictive; ties go to the lower index."""
    if isinstance(posterior, MeansPosterior):
        posterior = posterior.to_moments()
    pts = data.points if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    # np.argmax returns the first maximum
    return np.argmax(predictive_logpdf(posterior, pts, model), axis=1)


def gibbs_ground_truth(data: Dataset, model: MoGModel, sweeps: int = 5000, burn_in: int = 1000,
                       seed: int = 0, return_samples: bool = False):
    """Blocked Gibbs over (labels | means) and (means | labels).

    Means are initialised from k-means centres. Returns the empirical mean
    and covariance of each component's post-burn-in draws.
    """
    if sweeps <= burn_in:
        raise ValueError("sweeps must exceed burn_in")
    rng = np.random.default_rng(seed)
    X = data.points
    n, d = X.shape
    J = model.j
    s2 = model.noise_sd ** 2
    m0 = np.asarray(model.prior_mean)
    logw = model.log_weights

    if J == 1:
        mu = X.mean(axis=0, keepdims=True)
    else:
        mu, _ = kmeans(X, J, iter=10, rng=rng)
        if mu.shape[0] < J:
            mu = np.vstack([mu, X[rng.choice(n, J - mu.shape[0], replace=False)]])
    kept = np.empty((sweeps - burn_in, J, d))
    for it in range(sweeps):
        # labels | means
        if J == 1:
            z = np.zeros(n, dtype=np.int64)
        else:
            dist = ((X[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
            logp = logw[None, :] - 0.5 * dist / s2
            logp -= logp.max(axis=1, keepdims=True)
            p = np.exp(logp)
            cdf = np.cumsum(p, axis=1)
            u = rng.random(n) * cdf[:, -1]
            z = (u[:, None] > cdf).sum(axis=1)
        # means | labels, conjugate
        counts = np.bincount(z, minlength=J)
        sums = np.zeros((J, d))
        np.add.at(sums, z, X)
        prec = 1.0 / model.prior_var + counts / s2
        post_mean = (m0[None, :] / model.prior_var + sums / s2) / prec[:, None]
        mu = post_mean + rng.standard_normal((J, d)) / np.sqrt(prec)[:, None]
        if it >= burn_in:
            kept[it - burn_in] = mu
    means = kept.mean(axis=0)
    covs = np.stack([np.cov(kept[:, j, :], rowvar=False).reshape(d, d) for j in range(J)])
    result = PosteriorMoments(means, covs)
    if return_samples:
        return result, kept
    return result


def match_components(est_means: np.ndarray, true_means: np.ndarray) -> np.ndarray:
    """Permutation p minimising sum_k ||est[p[k]] - true[k]||."""
    J = true_means.shape[0]
    cost = np.linalg.norm(true_means[:, None, :] - est_means[None, :, :], axis=2)
    if J <= 6:
        best, best_cost = None, math.inf
        for perm in itertools.permutations(range(J)):
            c = cost[np.arange(J), perm].sum()
            if c < best_cost:
                best, best_cost = perm, c
        return np.asarray(best)
    _, cols = linear_sum_assignment(cost)
    return cols


class FNorms(NamedTuple):
    mean_f: float
    cov_f: float
    avg_f: float


def f_norm(estimate: PosteriorMoments, truth: PosteriorMoments) -> FNorms:
    """L2 distance of flattened means and covariances after aligning components."""
    if estimate.means.shape != truth.means.shape:
        raise DimensionMismatch(f"{estimate.means.shape} vs {truth.means.shape}")
    perm = match_components(estimate.means, truth.means)
    mean_f = float(np.linalg.norm((estimate.means[perm] - truth.means).ravel()))
    cov_f = float(np.linalg.norm((estimate.covs[perm] - truth.covs).ravel()))
    return FNorms(mean_f, cov_f, (mean_f + cov_f) / 2.0)
