import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from dpsep.errors import CalibrationOutOfRange, UnsupportedOrder
from dpsep.expfam import GaussianNat
from dpsep.privacy import (DEFAULT_ORDERS, PrivacySpec, RdpCurve, calibrate_sigma, epsilon_of,
                           noise_width, privatize, rdp_subsampled_gaussian, sensitivity)

sigmas = st.floats(0.3, 20.0)
rates = st.floats(1e-4, 1.0)
orders = st.sampled_from([1.5, 2.0, 3.0, 4.5, 8.0, 32.0, 128.0])


def test_sensitivity_examples():
    assert sensitivity(1, 1, 1000) == 0.002
    assert sensitivity(1, 1, 1) == 2.0
    assert sensitivity(0.5, 10, 100) == pytest.approx(0.1, rel=1e-15)


def test_noise_width():
    assert [noise_width(d) for d in (1, 2, 4)] == [2, 5, 14]


def test_privatize_zero_noise_identity(rng):
    g = GaussianNat(rng.standard_normal(3), np.eye(3))
    assert privatize(g, 0.1, 0.0, rng) is g


def test_privatize_deterministic_and_symmetric():
    g = GaussianNat([0.0, 1.0, 2.0], np.eye(3))
    a = privatize(g, 0.5, 2.0, np.random.default_rng(7))
    b = privatize(g, 0.5, 2.0, np.random.default_rng(7))
    assert a.equals(b)
    assert np.array_equal(a.lam, a.lam.T)
    assert not a.equals(g)


def test_privatize_noise_variance():
    rng = np.random.default_rng(3)
    g = GaussianNat([0.0, 0.0], np.zeros((2, 2)))
    sigma, delta = 1.5, 0.2
    draws = np.array([np.concatenate([o.eta, o.lam[np.triu_indices(2)]])
                      for o in (privatize(g, delta, sigma, rng) for _ in range(100_000))])
    var = draws.var(axis=0)
    np.testing.assert_allclose(var, (sigma * delta) ** 2, rtol=0.05)
    # off-diagonal entries are mirrored, not independent
    lam_draws = [privatize(g, delta, sigma, rng).lam for _ in range(100)]
    assert all(m[0, 1] == m[1, 0] for m in lam_draws)


def test_rdp_full_batch_examples():
    assert rdp_subsampled_gaussian(1.0, 1.0, 2.0) == 1.0
    assert rdp_subsampled_gaussian(2.0, 1.0, 8.0) == 1.0
    v = rdp_subsampled_gaussian(1.0, 0.001, 2.0)
    assert 0.0 <= v <= 1.0


def test_rdp_order_two_closed_form():
    # at alpha=2 only the j=2 term of the binomial expansion survives
    for sigma, q in [(1.0, 1e-3), (0.5, 0.01), (4.0, 0.2), (2.0, 0.5)]:
        e2 = 1.0 / sigma ** 2
        want = math.log1p(q * q * min(4 * math.expm1(e2), 2 * math.exp(e2)))
        want = min(want, 2.0 / (2 * sigma ** 2))
        assert rdp_subsampled_gaussian(sigma, q, 2.0) == pytest.approx(want, rel=1e-12)


def test_rdp_order_three_closed_form():
    sigma, q = 1.3, 0.05
    e2 = 1.0 / sigma ** 2
    second = q * q * 3 * min(4 * math.expm1(e2), 2 * math.exp(e2))
    third = 2 * q ** 3 * math.exp(3.0 / sigma ** 2)
    want = min(math.log(1 + second + third) / 2, 3 / (2 * sigma ** 2))
    assert rdp_subsampled_gaussian(sigma, q, 3.0) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("alpha", [1.0, 0.5, 2e6, math.inf, math.nan])
def test_unsupported_orders(alpha):
    with pytest.raises(UnsupportedOrder):
        rdp_subsampled_gaussian(1.0, 0.1, alpha)


@given(sigmas, sigmas, rates, orders)
def test_rdp_nonincreasing_in_sigma(s1, s2, q, a):
    lo, hi = sorted((s1, s2))
    assert rdp_subsampled_gaussian(hi, q, a) <= rdp_subsampled_gaussian(lo, q, a) * (1 + 1e-12)


@given(sigmas, rates, rates, orders)
def test_rdp_nondecreasing_in_q(s, q1, q2, a):
    lo, hi = sorted((q1, q2))
    assert rdp_subsampled_gaussian(s, lo, a) <= rdp_subsampled_gaussian(s, hi, a) * (1 + 1e-12)


@given(sigmas, rates, orders, orders)
def test_rdp_nondecreasing_in_alpha(s, q, a1, a2):
    lo, hi = sorted((a1, a2))
    assert rdp_subsampled_gaussian(s, q, lo) <= rdp_subsampled_gaussian(s, q, hi) * (1 + 1e-12)


@given(sigmas, rates, orders)
def test_rdp_below_unsubsampled(s, q, a):
    assert 0.0 <= rdp_subsampled_gaussian(s, q, a) <= a / (2 * s * s) * (1 + 1e-12)


def test_epsilon_examples():
    assert epsilon_of(10.0, 1.0, 1, 1e-5) <= 0.7
    assert epsilon_of(1.0, 0.01, 200, 1e-5) > epsilon_of(1.0, 0.01, 100, 1e-5)
    assert epsilon_of(1e6, 1.0, 1, 1e-5, orders=DEFAULT_ORDERS + (1e4, 1e5)) < 1e-3


def test_epsilon_single_gaussian_oracle():
    # one unsubsampled Gaussian: eps = min_a a/(2 s^2) + log(1/delta)/(a-1) on the grid
    s, delta = 10.0, 1e-5
    want = min(a / (2 * s * s) + math.log(1 / delta) / (a - 1) for a in DEFAULT_ORDERS)
    assert epsilon_of(s, 1.0, 1, delta) == pytest.approx(want, rel=1e-12)


@given(sigmas, sigmas, rates, st.integers(1, 10_000))
def test_epsilon_monotone_sigma(s1, s2, q, steps):
    lo, hi = sorted((s1, s2))
    assert epsilon_of(hi, q, steps, 1e-5) <= epsilon_of(lo, q, steps, 1e-5) * (1 + 1e-12)


@given(sigmas, rates, st.integers(1, 10_000), st.integers(1, 10_000))
def test_epsilon_monotone_steps(s, q, t1, t2):
    lo, hi = sorted((t1, t2))
    assert epsilon_of(s, q, lo, 1e-5) <= epsilon_of(s, q, hi, 1e-5) * (1 + 1e-12)


def test_rdp_curve_validation():
    with pytest.raises(ValueError):
        RdpCurve((2.0, 1.5), (0.1, 0.2))
    with pytest.raises(ValueError):
        RdpCurve((1.5, 2.0), (0.1,))
    with pytest.raises(ValueError):
        RdpCurve((1.5, 2.0), (0.1, -0.2))


def test_calibration_classical_bracket():
    sigma = calibrate_sigma(1.0, 1e-5, 1.0, 1)
    classical = math.sqrt(2 * math.log(1.25 / 1e-5))
    assert 3.0 <= sigma <= 6.0
    assert 0.5 * classical <= sigma <= 1.5 * classical


def test_calibration_full_scale():
    s1 = calibrate_sigma(1.0, 1e-5, 0.001, 100_000)
    s50 = calibrate_sigma(50.0, 1e-5, 0.001, 100_000)
    assert epsilon_of(s1, 0.001, 100_000, 1e-5) <= 1.0
    assert s50 < s1


@given(st.floats(0.1, 20.0), st.sampled_from([1e-3, 1e-5, 1e-7]), st.floats(1e-3, 1.0),
       st.integers(1, 2000))
def test_calibration_self_consistent(eps, delta, q, steps):
    try:
        s = calibrate_sigma(eps, delta, q, steps)
    except CalibrationOutOfRange:
        assume(False)
    assert epsilon_of(s, q, steps, delta) <= eps
    if s > 1e-2:
        # the tolerance step below the answer must miss the target
        assert epsilon_of(s / (1 + 2e-3), q, steps, delta) > eps


def test_calibration_out_of_range():
    with pytest.raises(CalibrationOutOfRange):
        calibrate_sigma(1e-6, 1e-5, 1.0, 10 ** 6)


def test_privacy_spec_resolve_and_json():
    spec = PrivacySpec(delta=1e-5, epsilon=2.0).resolve(100, 10)
    assert spec.sampling_rate == 0.01 and spec.steps == 1000
    assert spec.sigma is not None and spec.achieved_epsilon() <= 2.0
    back = PrivacySpec.from_json(spec.to_json())
    assert back == spec
    other = PrivacySpec(delta=1e-5, sigma=spec.sigma).resolve(100, 10)
    assert other.epsilon == pytest.approx(spec.achieved_epsilon())
    with pytest.raises(ValueError):
        PrivacySpec(delta=1e-5)
    with pytest.raises(ValueError):
        PrivacySpec(delta=1.5, epsilon=1.0)
