import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from appsel_pfl.accountant import (
    ORDERS, CalibrationError, MechanismSpec, PrivacyBudget, PrivacyLedger, RdpCurve,
    calibrate_sigma, compose, epsilon_for, rdp_curve, rdp_step, to_epsilon,
)

mpmath.mp.dps = 60


def rdp_oracle(q, sigma, a):
    """The binomial sum evaluated in 60-digit arithmetic."""
    q, s = mpmath.mpf(q), mpmath.mpf(sigma)
    total = mpmath.mpf(0)
    for k in range(a + 1):
        total += (mpmath.binomial(a, k) * (1 - q) ** (a - k) * q ** k
                  * mpmath.exp(mpmath.mpf(k * (k - 1)) / (2 * s * s)))
    return mpmath.log(total) / (a - 1)


def test_full_batch_is_plain_gaussian():
    for sigma in (0.5, 1.0, 1.17, 4.0):
        for a in ORDERS:
            assert abs(rdp_step(1.0, sigma, a) - a / (2 * sigma ** 2)) <= 1e-12 * max(1, a / (2 * sigma ** 2))


@pytest.mark.parametrize("q,sigma", [(0.0125, 1.1673), (0.00125, 0.79), (0.1, 2.0), (0.5, 3.0),
                                     (0.01, 0.6)])
def test_matches_arbitrary_precision_sum(q, sigma):
    for a in (2, 3, 5, 8, 13, 21, 32, 48, 64):
        want = float(rdp_oracle(q, sigma, a))
        got = rdp_step(q, sigma, a)
        assert abs(got - want) <= 1e-9 * abs(want), (a, got, want)


def test_zero_sampling_costs_nothing():
    assert rdp_step(0.0, 1.0, 8) == 0.0


def test_order_validation():
    with pytest.raises(ValueError):
        rdp_step(0.1, 1.0, 1)
    with pytest.raises(ValueError):
        rdp_step(0.1, 1.0, 2.5)


def test_composition_is_linear():
    c = rdp_curve(0.02, 1.3)
    assert np.array_equal(compose(c, 7).values, 7 * c.values)
    assert np.array_equal(compose(c, 0).values, np.zeros(len(ORDERS)))
    assert np.allclose((c + c).values, compose(c, 2).values, rtol=1e-15)


def test_conversion_picks_best_order():
    curve = RdpCurve((2, 3), np.array([1.0, 0.5]))
    eps, order = to_epsilon(curve, 1e-2)
    assert order == 3 and eps == pytest.approx(0.5 + math.log(100) / 2)


def test_calibration_hits_the_budget():
    budget = PrivacyBudget(2.0, 1e-6)
    sigma = calibrate_sigma(budget, 0.0125, 500)
    eps, _ = epsilon_for(MechanismSpec(sigma, 0.0125, 500), 1e-6)
    assert 1.9 <= eps <= 2.0
    assert epsilon_for(MechanismSpec(sigma / 2, 0.0125, 500), 1e-6)[0] > 2.0
    # the returned sigma is within the tolerance of the boundary
    assert epsilon_for(MechanismSpec(sigma * (1 - 2e-4), 0.0125, 500), 1e-6)[0] > 2.0


def test_unreachable_budget_raises():
    with pytest.raises(CalibrationError):
        calibrate_sigma(PrivacyBudget(1e-9, 1e-12), 1.0, 10 ** 6)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 0.5), st.floats(0.6, 5.0), st.floats(1.05, 3.0))
def test_monotone_in_sigma_and_q(q, sigma, factor):
    for a in (2, 10, 40):
        assert rdp_step(q, sigma * factor, a) <= rdp_step(q, sigma, a) * (1 + 1e-12)
        assert rdp_step(min(1.0, q * factor), sigma, a) >= rdp_step(q, sigma, a) * (1 - 1e-12)


@settings(max_examples=15, deadline=None)
@given(st.floats(1e-3, 0.2), st.integers(1, 2000))
def test_ledger_matches_batch_accounting(q, steps):
    spec = MechanismSpec(1.2, q, steps)
    ledger = PrivacyLedger(spec, 1e-6)
    assert ledger.epsilon() == 0.0
    ledger.record(steps)
    assert ledger.epsilon() == epsilon_for(spec, 1e-6)[0]


def test_budget_and_spec_validation():
    with pytest.raises(ValueError):
        PrivacyBudget(0.0, 1e-6)
    with pytest.raises(ValueError):
        PrivacyBudget(1.0, 1.0)
    with pytest.raises(ValueError):
        MechanismSpec(0.0, 0.1)
    with pytest.raises(ValueError):
        MechanismSpec(1.0, 1.5)


def test_tiny_sigma_stays_finite_in_log_space():
    curve = rdp_curve(0.5, 0.05)
    assert np.all(np.isfinite(curve.values))
    eps, order = to_epsilon(curve, 1e-6)
    assert math.isfinite(eps) and order == 2


def test_overflowed_orders_are_skipped():
    curve = RdpCurve((2, 3), np.array([np.inf, 1.0]))
    assert to_epsilon(curve, 1e-3)[1] == 3
    with pytest.raises(OverflowError):
        to_epsilon(RdpCurve((2,), np.array([np.inf])), 1e-3)
