"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

One federated round releases the noised mean of clipped client updates,
with each client sampled independently with probability ``q``. Per round the
mechanism is a subsampled Gaussian with noise multiplier ``c`` (noise std
over sensitivity); rounds compose additively in RDP, and the composed curve
is converted to an (epsilon, delta) guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)
DEFAULT_DELTA = 1e-3
C_BRACKET = (1e-2, 1e3)
C_TOLERANCE = 1e-3


class CalibrationError(ValueError):
    def __init__(self, message: str, achievable_eps: float | None = None):
        self.achievable_eps = achievable_eps
        super().__init__(message)


@dataclass(frozen=True)
class RdpCurve:
    orders: np.ndarray
    rdp: np.ndarray

    def __post_init__(self) -> None:
        orders = np.asarray(self.orders, dtype=float)
        rdp = np.asarray(self.rdp, dtype=float)
        if orders.ndim != 1 or orders.shape != rdp.shape or len(orders) == 0:
            raise ValueError("an RDP curve needs matching, non-empty order and value arrays")
        if np.any(orders <= 1) or np.any(np.diff(orders) <= 0):
            raise ValueError("orders must be > 1 and strictly increasing")
        if np.any(rdp < 0) or np.any(np.isnan(rdp)):
            raise ValueError("RDP values must be non-negative")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "rdp", rdp)

    def __len__(self) -> int:
        return len(self.orders)

    def items(self) -> list[tuple[float, float]]:
        return list(zip(self.orders.tolist(), self.rdp.tolist()))


def gaussian_rdp(c: float, alpha: float) -> float:
    """RDP of the Gaussian mechanism with unit sensitivity and noise multiplier ``c``."""
    if c <= 0:
        raise ValueError(f"noise multiplier must be > 0, got {c}")
    if alpha <= 1:
        raise ValueError(f"RDP order must be > 1, got {alpha}")
    return alpha / (2.0 * c * c)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def subsampled_gaussian_rdp(q: float, c: float, alpha: int) -> float:
    """Binomial-expansion RDP bound at integer order ``alpha``.

    ``log(sum_j C(a,j) (1-q)^(a-j) q^j exp(j(j-1)/(2c^2))) / (a-1)``, summed
    in log space.
    """
    if isinstance(alpha, float) and alpha.is_integer():
        alpha = int(alpha)
    if not isinstance(alpha, (int, np.integer)) or isinstance(alpha, bool) or alpha < 2:
        raise ValueError(f"order must be an integer >= 2, got {alpha!r}")
    if not 0 <= q <= 1:
        raise ValueError(f"sampling probability must be in [0, 1], got {q}")
    if c <= 0:
        raise ValueError(f"noise multiplier must be > 0, got {c}")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if q == 1:
        # only the j = alpha term survives
        return alpha / (2.0 * c * c)
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    log_a = -math.inf
    for j in range(alpha + 1):
        log_binom = math.lgamma(alpha + 1) - math.lgamma(j + 1) - math.lgamma(alpha - j + 1)
        term = log_binom + j * log_q + (alpha - j) * log_1mq + j * (j - 1) / (2.0 * c * c)
        log_a = _log_add(log_a, term)
    # log_a >= 0 mathematically; rounding can leave a tiny negative
    return max(log_a, 0.0) / (alpha - 1)


def subsampled_curve(q: float, c: float, orders: Iterable[int] = DEFAULT_ORDERS) -> RdpCurve:
    orders = list(orders)
    return RdpCurve(np.array(orders, dtype=float), np.array([subsampled_gaussian_rdp(q, c, a) for a in orders]))


def compose(curve: RdpCurve, T: int) -> RdpCurve:
    """RDP of ``T`` sequential runs of the mechanism."""
    if T < 1:
        raise ValueError(f"number of compositions must be >= 1, got {T}")
    return RdpCurve(curve.orders, curve.rdp * T)


def rdp_to_eps(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Best (epsilon, order) over the curve for failure probability ``delta``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if len(curve) == 0:
        raise ValueError("empty RDP curve")
    eps = curve.rdp + math.log(1.0 / delta) / (curve.orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), float(curve.orders[best])


def epsilon_for(c: float, delta: float, q: float, T: int, orders: Sequence[int] = DEFAULT_ORDERS) -> tuple[float, float]:
    """(epsilon, optimal order) after ``T`` rounds at noise multiplier ``c``."""
    return rdp_to_eps(compose(subsampled_curve(q, c, orders), T), delta)


def calibrate_noise_multiplier(
    eps_target: float,
    delta: float,
    q: float,
    T: int,
    orders: Sequence[int] = DEFAULT_ORDERS,
    bracket: tuple[float, float] = C_BRACKET,
    tol: float = C_TOLERANCE,
) -> float:
    """Smallest noise multiplier (to within ``tol``) whose T-round epsilon is <= ``eps_target``.

    Bisection on the bracket; epsilon decreases monotonically in ``c``.
    """
    if not (eps_target > 0 and math.isfinite(eps_target)):
        raise ValueError(f"target epsilon must be positive and finite, got {eps_target}")
    if not 0 < q <= 1:
        raise ValueError(f"sampling probability must be in (0, 1], got {q}")
    if T < 1:
        raise ValueError(f"rounds must be >= 1, got {T}")
    lo, hi = bracket

    def eps_at(c: float) -> float:
        return epsilon_for(c, delta, q, T, orders)[0]

    best_eps = eps_at(hi)
    if best_eps > eps_target:
        raise CalibrationError(
            f"epsilon {eps_target} unreachable: noise multiplier {hi:g} still gives epsilon {best_eps:.6g}",
            achievable_eps=best_eps,
        )
    if eps_at(lo) <= eps_target:
        return lo
    # invariant: eps(lo) > target >= eps(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= eps_target:
            hi = mid
        else:
            lo = mid
    return hi


def noise_std(S: float, c: float, m: float) -> float:
    """Per-coordinate noise std on the mean update: sensitivity S/m times the multiplier."""
    return S * c / m
