import math
from dataclasses import replace

import numpy as np
import pytest

from dpsep import _kernels as K
from dpsep.engines import (EngineConfig, Method, RunReport, _pass_failed, _streams, dpsep_run, ep_run,
                           init_state, proposal, run_engine, sep_run)
from dpsep.errors import CalibrationMissing, ConfigError
from dpsep.expfam import ClipPolicy
from dpsep.mog import Dataset, MeansPosterior, MoGModel, generate_synthetic, tilted_moments
from dpsep.privacy import PrivacySpec, noise_width, sensitivity

from oracles import brute_force_sensitivity, conjugate_update


@pytest.fixture(scope="module")
def small():
    model = MoGModel(j=3, d=2)
    return model, generate_synthetic(model, 60, 11)


def trajectory(data, model, cfg):
    snaps = []
    run_engine(data, model, cfg, on_pass=lambda s: snaps.append((s.post_eta.copy(), s.post_lam.copy())))
    return snaps


def same_trajectory(a, b):
    return len(a) == len(b) and all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1])
                                    for x, y in zip(a, b))


def test_config_validation():
    with pytest.raises(ConfigError) as e:
        EngineConfig(Method.DPSEP, clip=ClipPolicy(1.0))
    assert "method" in e.value.problems
    with pytest.raises(ConfigError):
        EngineConfig(Method.CLIPPED_SEP)
    with pytest.raises(ConfigError):
        EngineConfig(Method.SEP, privacy=PrivacySpec(1e-5, epsilon=1.0))
    with pytest.raises(ConfigError):
        EngineConfig(Method.EP, iterations=0)
    cfg = EngineConfig(Method.SEP, damping=50.0)
    with pytest.raises(ConfigError):
        cfg.validate(n=10)
    assert EngineConfig("ClippedSEP", clip=ClipPolicy(2.0)).method is Method.CLIPPED_SEP


def test_wrong_engine_rejected(small):
    model, data = small
    with pytest.raises(ConfigError):
        ep_run(data, model, EngineConfig(Method.SEP))
    with pytest.raises(ConfigError):
        sep_run(data, model, EngineConfig(Method.EP))
    with pytest.raises(ConfigError):
        run_engine(Dataset(np.zeros((5, 3))), model, EngineConfig(Method.SEP))


def test_calibration_missing(small):
    model, data = small
    cfg = EngineConfig(Method.DPSEP, clip=ClipPolicy(1.0), privacy=PrivacySpec(1e-5, epsilon=1.0))
    with pytest.raises(CalibrationMissing):
        dpsep_run(data, model, cfg)


def test_ep_conjugate_one_pass():
    model = MoGModel(j=1, d=2, noise_sd=0.5, prior_var=2.0)
    data = generate_synthetic(model, 40, 2)
    rep = ep_run(data, model, EngineConfig(Method.EP, iterations=1, seed=5))
    prec = 1 / 2.0 + 40 / 0.25
    want_mean = (data.points.sum(axis=0) / 0.25) / prec
    np.testing.assert_allclose(rep.posterior.means[0], want_mean, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(rep.posterior.covs[0], np.eye(2) / prec, rtol=1e-6)


def test_ep_single_point_is_one_projection():
    model = MoGModel(j=2, d=2)
    data = generate_synthetic(model, 1, 3)
    rep = ep_run(data, model, EngineConfig(Method.EP, iterations=1, seed=1))
    eta0, lam0 = model.prior_natural()
    want = tilted_moments(MeansPosterior(eta0, lam0), data.points[0], model).matched
    np.testing.assert_allclose(rep.posterior.means, want.means, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(rep.posterior.covs, want.covs, rtol=1e-10)


def test_sep_single_point_matches_ep():
    model = MoGModel(j=2, d=2)
    data = generate_synthetic(model, 1, 4)
    ep = ep_run(data, model, EngineConfig(Method.EP, iterations=1, seed=9))
    sep = sep_run(data, model, EngineConfig(Method.SEP, iterations=1, seed=9))
    np.testing.assert_allclose(sep.natural.eta, ep.natural.eta, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(sep.natural.lam, ep.natural.lam, rtol=1e-12, atol=1e-12)


def test_inactive_clip_is_bitwise_sep(small):
    model, data = small
    base = trajectory(data, model, EngineConfig(Method.SEP, iterations=5, seed=3))
    clipped = trajectory(data, model, EngineConfig(Method.CLIPPED_SEP, iterations=5, seed=3,
                                                   clip=ClipPolicy(1e9)))
    assert same_trajectory(base, clipped)


def test_zero_noise_dpsep_is_bitwise_sep(small):
    model, data = small
    base = trajectory(data, model, EngineConfig(Method.SEP, iterations=5, seed=3))
    spec = PrivacySpec(1e-5, sigma=0.0).resolve(data.n, 5)
    dp = EngineConfig(Method.DPSEP, iterations=5, seed=3, clip=ClipPolicy(1e9), privacy=spec)
    assert same_trajectory(base, trajectory(data, model, dp))
    rep = dpsep_run(data, model, dp)
    assert rep.achieved_privacy[0] == math.inf


def test_determinism(small):
    model, data = small
    spec = PrivacySpec(1e-5, epsilon=5.0).resolve(data.n, 4)
    for cfg in (EngineConfig(Method.EP, iterations=4, seed=8, trace_every=2),
                EngineConfig(Method.SEP, iterations=4, seed=8),
                EngineConfig(Method.DPSEP, iterations=4, seed=8, clip=ClipPolicy(1.0), privacy=spec)):
        a = run_engine(data, model, cfg).to_json(include_wall=False)
        b = run_engine(data, model, cfg).to_json(include_wall=False)
        assert a == b
    assert len(run_engine(data, model, EngineConfig(Method.EP, iterations=4, trace_every=2)).trace) == 2


def step_by_step(data, model, cfg, sigma):
    """Drive the compiled step one datapoint at a time, yielding the state after each inclusion."""
    init_rng, order_rng, noise_rng = _streams(cfg.seed)
    state = init_state(data, model, cfg.clip, init_rng)
    n = data.n
    scale = sigma * sensitivity(cfg.damping, cfg.clip.c, n) if sigma > 0 else 0.0
    for _ in range(cfg.iterations):
        order = order_rng.permutation(n)
        noise = noise_rng.standard_normal((n, model.j, noise_width(model.d)))
        for t in range(n):
            K.sep_pass(order[t:t + 1], data.points, state.post_eta, state.post_lam, state.f_eta, state.f_lam,
                       state.prior_eta, state.prior_lam, model.log_weights, model.noise_sd ** 2, n,
                       float(cfg.damping), float(cfg.clip.c), cfg.clip.per_block, noise[t:t + 1], scale,
                       cfg.rho)
            yield state


@pytest.mark.parametrize("sigma", [0.0, 0.5, 3.0])
def test_global_factor_identity_and_psd_floor(sigma):
    model = MoGModel(j=2, d=2)
    data = generate_synthetic(model, 30, 6)
    cfg = EngineConfig(Method.CLIPPED_SEP, iterations=6, seed=2, clip=ClipPolicy(1.0))
    for st in step_by_step(data, model, cfg, sigma):
        recon_eta = data.n * st.f_eta + st.prior_eta
        recon_lam = data.n * st.f_lam + st.prior_lam
        scale = max(1.0, np.abs(st.post_lam).max(), np.abs(st.post_eta).max())
        assert np.abs(recon_eta - st.post_eta).max() <= 1e-8 * scale
        assert np.abs(recon_lam - st.post_lam).max() <= 1e-8 * scale
        assert min(np.linalg.eigvalsh(b)[0] for b in st.post_lam) >= cfg.rho - 1e-8
        assert np.linalg.norm(np.concatenate([st.f_eta.ravel(), st.f_lam.ravel()])) <= 1.0 + 1e-12


def test_ep_sum_identity(small):
    model, data = small
    cfg = EngineConfig(Method.EP, iterations=3, seed=4)
    checks = []

    def check(st):
        eta = st.prior_eta + st.site_eta.sum(axis=0)
        lam = st.prior_lam + st.site_lam.sum(axis=0)
        scale = max(1.0, np.abs(st.post_lam).max())
        checks.append(max(np.abs(eta - st.post_eta).max(), np.abs(lam - st.post_lam).max()) / scale)

    ep_run(data, model, cfg, on_pass=check)
    assert max(checks) <= 1e-8


def test_privacy_ledger(small):
    model, data = small
    spec = PrivacySpec(1e-5, epsilon=2.0).resolve(data.n, 3)
    cfg = EngineConfig(Method.DPSEP, iterations=3, seed=1, clip=ClipPolicy(1.0), privacy=spec)
    rep = dpsep_run(data, model, cfg)
    assert rep.steps == 3 * data.n == spec.steps
    assert rep.achieved_privacy[0] <= 2.0 and rep.achieved_privacy[1] == 1e-5
    bad = replace(cfg, privacy=replace(spec, steps=7))
    with pytest.raises(ConfigError):
        dpsep_run(data, model, bad)


def test_unresolved_steps_are_filled(small):
    model, data = small
    cfg = EngineConfig(Method.DPSEP, iterations=2, clip=ClipPolicy(1.0), privacy=PrivacySpec(1e-5, sigma=2.0))
    rep = dpsep_run(data, model, cfg)
    assert rep.sigma == 2.0 and rep.steps == 2 * data.n


def test_proposal_sensitivity(small):
    model, _ = small
    rng = np.random.default_rng(0)
    data = generate_synthetic(model, 5, 1)
    gamma, clip = 0.7, ClipPolicy(0.8)
    state = init_state(data, model, clip, rng)
    pool = 3 * rng.standard_normal((20, model.d))
    worst = brute_force_sensitivity(lambda s, x: proposal(s, x, model, data.n, gamma, clip),
                                    state, pool, data.points)
    assert 0 < worst <= sensitivity(gamma, clip.c, data.n) + 1e-9


def test_pass_failure_threshold():
    rep = RunReport(method="SEP", seed=0, posterior=None)
    assert not _pass_failed(5, 10, 0, rep) and not rep.aborted
    assert _pass_failed(6, 10, 0, rep) and rep.aborted
    assert rep.error.startswith("DegenerateUpdate")


def test_report_json_shape(small):
    model, data = small
    rep = run_engine(data, model, EngineConfig(Method.SEP, iterations=2, trace_every=1))
    obj = rep.to_json()
    assert {"method", "seed", "config", "posterior", "trace", "failures", "wall_ms"} <= set(obj)
    assert len(obj["trace"]) == 2 and obj["trace"][0]["iteration"] == 1
    assert "wall_ms" not in rep.to_json(include_wall=False)
