"""Moments accounting for the Poisson-subsampled Gaussian mechanism.

Per-step Rényi DP at integer orders uses the binomial expansion

    eps(alpha) = log( sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 sigma^2)) ) / (alpha-1)

which composes additively over steps and converts to (epsilon, delta) via
``eps(alpha) + log(1/delta) / (alpha-1)`` minimized over the order grid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)
SIGMA_MAX = 1e6


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float = 2.0
    delta: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class MechanismSpec:
    sigma: float
    q: float
    iterations: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[int, ...]
    values: np.ndarray

    def __add__(self, other: RdpCurve) -> RdpCurve:
        if self.orders != other.orders:
            raise ValueError("cannot add curves over different orders")
        return RdpCurve(self.orders, self.values + other.values)


def rdp_step(q: float, sigma: float, order: int) -> float:
    """Per-step RDP of the subsampled Gaussian at integer ``order``.

    The sum is rewritten as 1 + sum_{k>=2} C(a,k)(1-q)^(a-k) q^k expm1(k(k-1)/2s^2)
    so that tiny values keep full relative precision.
    """
    a = int(order)
    if a != order or a < 2:
        raise ValueError(f"order must be an integer >= 2, got {order}")
    if q == 0:
        return 0.0
    k = np.arange(2, a + 1, dtype=np.float64)
    x = k * (k - 1) / (2.0 * sigma * sigma)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_expm1 = np.where(x > 30.0, x + np.log1p(-np.exp(-x)), np.log(np.expm1(x)))
        lbinom = np.array([math.lgamma(a + 1) - math.lgamma(j + 1) - math.lgamma(a - j + 1)
                           for j in range(2, a + 1)])
        rest = a - k
        log_keep = np.where(rest > 0, rest * math.log1p(-q) if q < 1 else -np.inf, 0.0)
        terms = lbinom + log_keep + k * math.log(q) + log_expm1
    terms = terms[~np.isneginf(terms)]
    if terms.size == 0:
        return 0.0
    top = terms.max()
    if not np.isfinite(top):
        raise OverflowError(f"RDP sum overflows at order {a} (q={q}, sigma={sigma})")
    log_excess = top + math.log(np.exp(terms - top).sum())
    value = float(np.logaddexp(0.0, log_excess)) / (a - 1)
    if not math.isfinite(value):
        raise OverflowError(f"RDP value is not finite at order {a}")
    return value


def rdp_curve(q: float, sigma: float, orders: tuple[int, ...] = ORDERS) -> RdpCurve:
    """Per-step curve; orders that overflow become +inf and are skipped by to_epsilon."""
    values = []
    for a in orders:
        try:
            values.append(rdp_step(q, sigma, a))
        except OverflowError as exc:
            log.warning("dropping order %d: %s", a, exc)
            values.append(math.inf)
    return RdpCurve(tuple(orders), np.array(values))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return RdpCurve(curve.orders, np.zeros_like(curve.values))
    return RdpCurve(curve.orders, curve.values * steps)


def to_epsilon(curve: RdpCurve, delta: float) -> tuple[float, int]:
    """Smallest ``value + log(1/delta)/(order-1)`` over the grid, and its order."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    orders = np.array(curve.orders, dtype=np.float64)
    eps = curve.values + math.log(1.0 / delta) / (orders - 1.0)
    eps = np.where(np.isfinite(eps), eps, np.inf)
    i = int(np.argmin(eps))
    if not np.isfinite(eps[i]):
        raise OverflowError("every order overflowed")
    return float(eps[i]), int(curve.orders[i])


def epsilon_for(spec: MechanismSpec, delta: float, steps: int | None = None) -> tuple[float, int]:
    steps = spec.iterations if steps is None else steps
    return to_epsilon(compose(rdp_curve(spec.q, spec.sigma), steps), delta)


def calibrate_sigma(budget: PrivacyBudget, q: float, steps: int, rtol: float = 1e-4) -> float:
    """Smallest noise multiplier (to relative tolerance ``rtol``) meeting the budget."""
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    if steps < 1:
        raise ValueError("need at least one step to calibrate")

    def ok(sigma: float) -> bool:
        return to_epsilon(compose(rdp_curve(q, sigma), steps), budget.delta)[0] <= budget.epsilon

    hi = 1.0
    while not ok(hi):
        hi *= 2.0
        if hi > SIGMA_MAX:
            raise CalibrationError(
                f"epsilon={budget.epsilon} unreachable with sigma <= {SIGMA_MAX:g}")
    lo = hi / 2.0
    while ok(lo):
        hi, lo = lo, lo / 2.0
        if lo < 1e-6:
            return hi
    while hi / lo > 1.0 + rtol:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


class PrivacyLedger:
    """Running account of a training run's privacy spend."""

    def __init__(self, spec: MechanismSpec, delta: float):
        self.spec = spec
        self.delta = delta
        self._curve = rdp_curve(spec.q, spec.sigma)
        self.iterations = 0

    def record(self, steps: int = 1) -> None:
        self.iterations += steps

    def epsilon(self) -> float:
        if self.iterations == 0:
            return 0.0
        return to_epsilon(compose(self._curve, self.iterations), self.delta)[0]
