"""EP, SEP (optionally clipped) and DP-SEP training loops for the mixture model.

All SEP-family variants run through one compiled step so that switching
clipping or noise off reproduces the plain SEP trajectory bit for bit. The
posterior update is

    theta_new = (gamma/N) theta_fn + (N - gamma/N) theta_f + theta_0
    theta_f   = (theta_new - theta_0) / N

so the identity theta = N theta_f + theta_0 holds after every step.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import CalibrationMissing, ConfigError, DegenerateUpdate
from .expfam import ClipPolicy
from .mog import Dataset, FNorms, MeansPosterior, MoGModel, PosteriorMoments
from .privacy import PrivacySpec, noise_width, sensitivity

log = logging.getLogger(__name__)

DEFAULT_RHO = 1e-6


class Method(str, enum.Enum):
    EP = "EP"
    SEP = "SEP"
    CLIPPED_SEP = "ClippedSEP"
    DPSEP = "DPSEP"


@dataclass(frozen=True)
class EngineConfig:
    method: Method
    iterations: int = 100
    damping: float = 1.0
    clip: Optional[ClipPolicy] = None
    privacy: Optional[PrivacySpec] = None
    seed: int = 0
    trace_every: int = 0
    rho: float = DEFAULT_RHO
    # EP only: fraction of the new site blended in (1.0 = undamped)
    ep_damping: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        self.validate()

    def validate(self, n: Optional[int] = None) -> None:
        problems = {}
        m = self.method
        if self.iterations < 1:
            problems["iterations"] = "must be >= 1"
        if not self.damping > 0:
            problems["damping"] = "must be positive"
        if n is not None and self.damping / n > 1:
            problems["damping"] = f"damping/N = {self.damping / n:g} exceeds 1"
        if not self.rho > 0:
            problems["rho"] = "must be positive"
        if not 0 < self.ep_damping <= 1:
            problems["ep_damping"] = "must lie in (0, 1]"
        if self.trace_every < 0:
            problems["trace_every"] = "must be >= 0"
        if m is Method.DPSEP and (self.clip is None or self.privacy is None):
            problems["method"] = "DPSEP requires both clip and privacy"
        if m is Method.CLIPPED_SEP and self.clip is None:
            problems["clip"] = "ClippedSEP requires a clip policy"
        if m in (Method.EP, Method.SEP) and self.privacy is not None:
            problems["privacy"] = f"{m.value} does not take a privacy spec"
        if problems:
            raise ConfigError(problems)

    def to_json(self) -> dict:
        return {
            "method": self.method.value, "iterations": self.iterations, "damping": self.damping,
            "clip": None if self.clip is None else self.clip.to_json(),
            "privacy": None if self.privacy is None else self.privacy.to_json(),
            "seed": self.seed, "trace_every": self.trace_every, "rho": self.rho,
            "ep_damping": self.ep_damping,
        }


@dataclass
class EngineState:
    """Mutable working arrays of a run, in block layout."""

    post_eta: np.ndarray
    post_lam: np.ndarray
    f_eta: np.ndarray
    f_lam: np.ndarray
    prior_eta: np.ndarray
    prior_lam: np.ndarray
    site_eta: Optional[np.ndarray] = None
    site_lam: Optional[np.ndarray] = None
    iteration: int = 0

    @property
    def posterior(self) -> MeansPosterior:
        return MeansPosterior(self.post_eta, self.post_lam)


@dataclass
class RunReport:
    method: str
    seed: int
    posterior: Optional[PosteriorMoments]
    natural: Optional[MeansPosterior] = None
    f_norms: Optional[FNorms] = None
    achieved_privacy: Optional[tuple[float, float]] = None
    sigma: Optional[float] = None
    failures: int = 0
    repairs: int = 0
    steps: int = 0
    aborted: bool = False
    error: Optional[str] = None
    wall_ms: int = 0
    trace: list = field(default_factory=list)
    config: Optional[dict] = None
    name: Optional[str] = None

    def to_json(self, include_wall: bool = True) -> dict:
        out = {
            "name": self.name or self.method,
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "posterior": None if self.posterior is None else self.posterior.to_json(),
            "f_norms": None if self.f_norms is None else self.f_norms._asdict(),
            "achieved_privacy": (None if self.achieved_privacy is None
                                 else {"epsilon": self.achieved_privacy[0], "delta": self.achieved_privacy[1]}),
            "sigma": self.sigma,
            "failures": self.failures,
            "repairs": self.repairs,
            "steps": self.steps,
            "aborted": self.aborted,
            "error": self.error,
            "trace": [{"iteration": it, **pm.to_json()} for it, pm in self.trace],
        }
        if include_wall:
            out["wall_ms"] = self.wall_ms
        return out


def _streams(seed: int):
    init, order, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(order), np.random.default_rng(noise))


def init_state(data: Dataset, model: MoGModel, clip: Optional[ClipPolicy], rng: np.random.Generator,
               per_site: bool = False) -> EngineState:
    """Prior (clipped when a policy is given) plus a symmetry-breaking global factor.

    The factor carries no precision; its eta places the initial posterior means
    at a draw from the prior, which is independent of the data.
    """
    n = data.n
    prior_eta, prior_lam = model.prior_natural()
    if clip is not None:
        prior_eta, prior_lam = K.clip_block(prior_eta, prior_lam, clip.c, clip.per_block)
        prior_eta, prior_lam = prior_eta.copy(), prior_lam.copy()
    start = (np.asarray(model.prior_mean)
             + math.sqrt(model.prior_var) * rng.standard_normal((model.j, model.d)))
    f_eta = (np.einsum("jab,jb->ja", prior_lam, start) - prior_eta) / n
    f_lam = np.zeros_like(prior_lam)
    if clip is not None:
        f_eta, f_lam = K.clip_block(f_eta, f_lam, clip.c, clip.per_block)
        f_eta, f_lam = f_eta.copy(), f_lam.copy()
    state = EngineState(
        post_eta=n * f_eta + prior_eta, post_lam=n * f_lam + prior_lam,
        f_eta=f_eta, f_lam=f_lam, prior_eta=prior_eta, prior_lam=prior_lam)
    if per_site:
        state.site_eta = np.broadcast_to(f_eta, (n,) + f_eta.shape).copy()
        state.site_lam = np.broadcast_to(f_lam, (n,) + f_lam.shape).copy()
    return state


def proposal(state: EngineState, x, model: MoGModel, n: int, gamma: float,
             clip: Optional[ClipPolicy] = None) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """The pre-noise (eta, lam) an SEP-family step would release for datapoint ``x``.

    Neighbouring datasets differ only in ``x``, so this is the quantity whose
    sensitivity the Gaussian mechanism is calibrated to. None if the step fails.
    """
    ok, eta, lam = K.sep_proposal(
        np.ascontiguousarray(np.asarray(x, dtype=float)), state.post_eta, state.post_lam,
        state.f_eta, state.f_lam, state.prior_eta, state.prior_lam, model.log_weights,
        model.noise_sd ** 2, gamma / n, n - gamma / n,
        -1.0 if clip is None else float(clip.c), False if clip is None else clip.per_block)
    return (eta, lam) if ok else None


def _check_data(data: Dataset, model: MoGModel) -> None:
    if data.d != model.d:
        raise ConfigError({"data": f"points have dimension {data.d}, model expects {model.d}"})


def _finish(report: RunReport, state: EngineState, t0: float) -> RunReport:
    post = state.posterior
    report.natural = post
    report.posterior = post.to_moments() if post.is_proper() else None
    report.wall_ms = int(round((time.perf_counter() - t0) * 1000))
    return report


def _pass_failed(fails: int, n: int, t: int, report: RunReport) -> bool:
    if fails:
        log.warning("%s pass %d: skipped %d of %d updates", report.method, t + 1, fails, n)
    if fails > n / 2:
        report.aborted = True
        err = DegenerateUpdate(f"pass {t + 1}: {fails}/{n} updates failed")
        report.error = f"{type(err).__name__}: {err}"
        return True
    return False


def ep_run(data: Dataset, model: MoGModel, cfg: EngineConfig, on_pass=None) -> RunReport:
    """Expectation propagation with one stored site per datapoint."""
    if cfg.method is not Method.EP:
        raise ConfigError({"method": "ep_run needs method EP"})
    _check_data(data, model)
    t0 = time.perf_counter()
    init_rng, order_rng, _ = _streams(cfg.seed)
    state = init_state(data, model, None, init_rng, per_site=True)
    report = RunReport(method=cfg.method.value, seed=cfg.seed, posterior=None, config=cfg.to_json())
    n = data.n
    s2 = model.noise_sd ** 2
    for t in range(cfg.iterations):
        order = order_rng.permutation(n)
        fails = K.ep_pass(order, data.points, state.post_eta, state.post_lam,
                          state.site_eta, state.site_lam, model.log_weights, s2, cfg.ep_damping)
        report.failures += fails
        report.steps += n
        state.iteration = t + 1
        if on_pass is not None:
            on_pass(state)
        if cfg.trace_every and (t + 1) % cfg.trace_every == 0:
            report.trace.append((t + 1, state.posterior.to_moments()))
        if _pass_failed(fails, n, t, report):
            break
    return _finish(report, state, t0)


def _sep_family(data: Dataset, model: MoGModel, cfg: EngineConfig, clip: Optional[ClipPolicy],
                sigma: float, on_pass=None) -> tuple[RunReport, EngineState]:
    _check_data(data, model)
    cfg.validate(data.n)
    t0 = time.perf_counter()
    init_rng, order_rng, noise_rng = _streams(cfg.seed)
    state = init_state(data, model, clip, init_rng)
    report = RunReport(method=cfg.method.value, seed=cfg.seed, posterior=None, config=cfg.to_json())
    n = data.n
    s2 = model.noise_sd ** 2
    clip_c = -1.0 if clip is None else clip.c
    per_block = False if clip is None else clip.per_block
    scale = 0.0
    if sigma > 0:
        scale = sigma * sensitivity(cfg.damping, clip.c, n)
    width = noise_width(model.d)
    empty = np.zeros((0, model.j, width))
    for t in range(cfg.iterations):
        order = order_rng.permutation(n)
        noise = noise_rng.standard_normal((n, model.j, width)) if scale > 0 else empty
        fails, reps = K.sep_pass(order, data.points, state.post_eta, state.post_lam,
                                 state.f_eta, state.f_lam, state.prior_eta, state.prior_lam,
                                 model.log_weights, s2, n, float(cfg.damping), float(clip_c), per_block,
                                 noise, float(scale), float(cfg.rho))
        report.failures += fails
        report.repairs += reps
        report.steps += n
        state.iteration = t + 1
        if on_pass is not None:
            on_pass(state)
        if cfg.trace_every and (t + 1) % cfg.trace_every == 0:
            report.trace.append((t + 1, state.posterior.to_moments()))
        if _pass_failed(fails, n, t, report):
            break
    return _finish(report, state, t0), state


def sep_run(data: Dataset, model: MoGModel, cfg: EngineConfig, on_pass=None) -> RunReport:
    """Stochastic EP; clips the intermediate and global factors when method is ClippedSEP."""
    if cfg.method not in (Method.SEP, Method.CLIPPED_SEP):
        raise ConfigError({"method": "sep_run needs method SEP or ClippedSEP"})
    clip = cfg.clip if cfg.method is Method.CLIPPED_SEP else None
    report, _ = _sep_family(data, model, cfg, clip, 0.0, on_pass)
    return report


def dpsep_run(data: Dataset, model: MoGModel, cfg: EngineConfig, on_pass=None) -> RunReport:
    """Differentially private SEP: clip, damped update, Gaussian mechanism, PSD repair, clip."""
    if cfg.method is not Method.DPSEP:
        raise ConfigError({"method": "dpsep_run needs method DPSEP"})
    spec = cfg.privacy
    if spec is None or spec.sigma is None:
        raise CalibrationMissing("privacy spec has no noise multiplier; call PrivacySpec.resolve first")
    n = data.n
    if spec.sampling_rate is None or spec.steps is None:
        spec = spec.resolve(n, cfg.iterations)
    problems = {}
    if abs(spec.sampling_rate * n - 1.0) > 1e-12:
        problems["privacy.sampling_rate"] = f"sampling_rate*N = {spec.sampling_rate * n:g}, expected 1"
    if spec.steps != cfg.iterations * n:
        problems["privacy.steps"] = f"steps = {spec.steps}, expected T*N = {cfg.iterations * n}"
    if problems:
        raise ConfigError(problems)
    report, _ = _sep_family(data, model, cfg, cfg.clip, float(spec.sigma), on_pass)
    report.sigma = float(spec.sigma)
    report.achieved_privacy = (spec.achieved_epsilon(), spec.delta)
    return report


def run_engine(data: Dataset, model: MoGModel, cfg: EngineConfig, on_pass=None) -> RunReport:
    if cfg.method is Method.EP:
        return ep_run(data, model, cfg, on_pass)
    if cfg.method is Method.DPSEP:
        return dpsep_run(data, model, cfg, on_pass)
    return sep_run(data, model, cfg, on_pass)
