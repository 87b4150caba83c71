"""Closed-form throughput, stability and delay of slotted ALOHA with
two-user collision resolution.

A lone transmission succeeds with probability ``P0``; a two-user collision
yields both packets with probability ``P1`` and exactly one with ``P2``.
Per tagged user the pair outcome is worth ``P' = P1 + P2/2`` packets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_positive_int, check_probability

ROOT_TOL = 1e-12
ROOT_MAX_ITER = 200


class RootFindingError(RuntimeError):
    """Safeguarded Newton did not reach the residual tolerance."""


@dataclass(frozen=True)
class LinkProbs:
    P0: float
    P1: float = 0.0
    P2: float = 0.0

    def __post_init__(self):
        for name in ("P0", "P1", "P2"):
            check_probability(getattr(self, name), name)
        if self.P1 + self.P2 > 1 + 1e-12:
            raise ValueError("P1 + P2 must not exceed 1")

    @property
    def P_prime(self) -> float:
        return self.P1 + self.P2 / 2

    @property
    def degenerate(self) -> bool:
        return self.P0 == 0 and self.P_prime == 0


@dataclass(frozen=True)
class NetworkParams:
    J: int
    p: float
    r: float

    def __post_init__(self):
        check_positive_int(self.J, "J", minimum=2)
        check_probability(self.p, "p", open_low=True, open_high=True)
        check_probability(self.r, "r")


@dataclass(frozen=True)
class StabilityProfile:
    """Stability of one queue at arrival rate ``r`` and contention ``p``.

    ``p_min``/``p_max`` are the roots of ``f(z) = r`` and are None when
    ``r >= f_max``.  ``p_max`` is 1 when ``f`` stays above ``r`` up to
    ``z = 1`` (possible only for ``J = 2``).
    """

    J: int
    r: float
    p: float
    f_max: float
    p_star: float
    p_min: float | None
    p_max: float | None
    stable: bool
    q: float


def _check(J, probs):
    check_positive_int(J, "J", minimum=2)
    if not isinstance(probs, LinkProbs):
        raise TypeError("probs must be a LinkProbs")


def throughput_finite(J: int, p, probs: LinkProbs):
    """Expected successes per slot with ``J`` saturated users."""
    _check(J, probs)
    p = np.asarray(p, dtype=float)
    u = 1.0 - p
    c = probs.P0 * J * p * u ** (J - 1) + probs.P_prime * J * (J - 1) * p**2 * u ** (J - 2)
    return float(c) if c.ndim == 0 else c


def optimal_contention(J: int, probs: LinkProbs, return_clamped: bool = False):
    """Maximiser of :func:`throughput_finite` over ``p``.

    With ``return_clamped`` the result is ``(p_star, clamped)`` where
    ``clamped`` says the stationary point sits at or beyond 1.
    """
    _check(J, probs)
    if probs.degenerate:
        raise ValueError("P0 = P' = 0: throughput is identically zero")
    P0, Pp = probs.P0, probs.P_prime
    a = (P0 - 2 * Pp) * (J - 1)
    b = Pp * (J - 1) * (J - 2)
    root = math.sqrt(a * a + 4 * P0 * b)
    if a >= 0:
        p = 2 * P0 / (2 * P0 + a + root)
    else:
        # same root, rationalised; stays finite for P0 -> 0
        p = (root - a) / (root - a + 2 * b)
    clamped = p >= 1.0
    p = min(p, 1.0)
    return (p, clamped) if return_clamped else p


def asymptotic_throughput(probs: LinkProbs) -> float:
    """Limit of the optimised throughput as ``J`` grows."""
    if not isinstance(probs, LinkProbs):
        raise TypeError("probs must be a LinkProbs")
    if probs.degenerate:
        raise ValueError("P0 = P' = 0: throughput is identically zero")
    P0, Pp = probs.P0, probs.P_prime
    if P0 == 0:
        return 4 * Pp * math.exp(-2)
    root = math.sqrt(P0 * P0 + 4 * Pp * Pp)
    D = P0 + P0 * P0 / (root + 2 * Pp)  # P0 - 2P' + root without cancellation
    return 2 * P0 * P0 / D * (1 + 2 * Pp / D) * math.exp(-2 * P0 / D)


def success_prob(q, p, J: int, probs: LinkProbs):
    """Success probability per slot of an active queue.

    Every other queue is active with probability ``q`` and then transmits
    with probability ``p``.  The pair term counts one *transmitting* partner,
    which carries the factor ``q``; this keeps ``q * s(q) = f(q p)``.
    """
    _check(J, probs)
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    u = 1.0 - q * p
    s = probs.P0 * p * u ** (J - 1) + probs.P_prime * (J - 1) * q * p**2 * u ** (J - 2)
    return float(s) if s.ndim == 0 else s


def saturated_success(z, J: int, probs: LinkProbs):
    """``f(z)``: success probability when every queue is always active."""
    return success_prob(1.0, z, J, probs)


def _saturated_slope(z: float, J: int, probs: LinkProbs) -> float:
    u = 1.0 - z
    d = probs.P0 * (u ** (J - 1) - (J - 1) * z * u ** (J - 2))
    pair = 2 * z * u ** (J - 2)
    if J > 2:
        pair -= (J - 2) * z * z * u ** (J - 3)
    return d + probs.P_prime * (J - 1) * pair


def _bracketed_newton(g, dg, lo: float, hi: float) -> float:
    """Root of ``g`` on ``[lo, hi]`` where ``g`` changes sign; bisection-safeguarded."""
    glo, ghi = g(lo), g(hi)
    if abs(glo) <= ROOT_TOL:
        return lo
    if abs(ghi) <= ROOT_TOL:
        return hi
    if glo * ghi > 0:
        raise RootFindingError("root is not bracketed")
    x = 0.5 * (lo + hi)
    for _ in range(ROOT_MAX_ITER):
        gx = g(x)
        if abs(gx) <= ROOT_TOL:
            return x
        if (gx < 0) == (glo < 0):
            lo, glo = x, gx
        else:
            hi = x
        slope = dg(x)
        step = x - gx / slope if slope != 0 else np.nan
        x = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15:
            if abs(g(x)) <= 1e3 * ROOT_TOL:
                return x
            break
    raise RootFindingError(f"no convergence within {ROOT_MAX_ITER} iterations")


def stability_profile(J: int, r: float, p: float, probs: LinkProbs) -> StabilityProfile:
    _check(J, probs)
    r = check_probability(r, "r")
    p = check_probability(p, "p")
    p_star = optimal_contention(J, probs)
    f_max = saturated_success(p_star, J, probs)
    if r >= f_max:
        return StabilityProfile(J, r, p, f_max, p_star, None, None, False, 1.0)

    def g(z):
        return saturated_success(z, J, probs) - r

    def dg(z):
        return _saturated_slope(z, J, probs)

    p_min = _bracketed_newton(g, dg, 0.0, p_star) if r > 0 else 0.0
    if g(1.0) > 0:
        p_max = 1.0
    else:
        p_max = _bracketed_newton(g, dg, p_star, 1.0)
    stable = p_min <= p <= p_max and p > 0
    q = min(p_min / p, 1.0) if stable else 1.0
    return StabilityProfile(J, r, p, f_max, p_star, p_min, p_max, stable, q)


def active_probability(profile: StabilityProfile, p: float | None = None) -> float:
    """Probability a queue holds a packet, at the profile's ``p`` or another one."""
    if p is None or p == profile.p:
        return profile.q
    if profile.p_min is None or not profile.p_min <= p <= profile.p_max or p <= 0:
        return 1.0
    return min(profile.p_min / p, 1.0)


def approx_throughput(J: int, r: float, p: float, probs: LinkProbs) -> float:
    """Network throughput of ``J`` decoupled queues."""
    prof = stability_profile(J, r, p, probs)
    if prof.stable:
        return J * r
    return J * saturated_success(p, J, probs)


def total_delay(J: int, r: float, p: float, probs: LinkProbs) -> float:
    """Mean queueing plus service delay in slots; ``inf`` off the stable branch."""
    prof = stability_profile(J, r, p, probs)
    if not prof.stable:
        return math.inf
    s = success_prob(prof.q, p, J, probs)
    if s <= r:
        return math.inf
    return 1.0 / (s * (1.0 - r * (1.0 - s) / (s * (1.0 - r))))


def service_delay(J: int, r: float, p: float, probs: LinkProbs) -> float:
    """Mean slots from reaching the queue head to successful delivery."""
    prof = stability_profile(J, r, p, probs)
    if prof.stable:
        if r == 0:
            raise ValueError("service delay is undefined without traffic")
        return prof.q / r
    f = saturated_success(p, J, probs)
    return math.inf if f == 0 else 1.0 / f
