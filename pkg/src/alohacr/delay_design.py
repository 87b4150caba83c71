"""Probability that a two-user collision is not resolvable, as a function of
the intentional-delay spread.

Each user adds an intentional delay uniform on ``[0, T]``, so the intentional
difference ``alpha`` has a triangular density on ``[-T, T]``.  The natural
difference ``delta`` is symmetric.  A collision is lost when ``alpha + delta``
falls within ``Delta/2`` of a multiple of the symbol interval ``Ts``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from ._validation import check_positive_int

QUAD_TOL = 1e-9
TAIL_TOL = 1e-9
# stands in for T = 0 (no intentional delay)
T_EPS = 1e-9


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class NaturalDelay:
    """Symmetric density of the natural delay difference.

    ``family`` is ``"dirac"``, ``"gaussian"`` (``scale`` = standard deviation)
    or ``"uniform"`` (``scale`` = full width of the support).
    """

    family: str = "dirac"
    scale: float = 0.0

    def __post_init__(self):
        if self.family not in ("dirac", "gaussian", "uniform"):
            raise ValueError(f"unknown natural-delay family {self.family!r}")
        if self.family == "dirac":
            if self.scale != 0:
                raise ValueError("a dirac density takes no scale")
        elif not self.scale > 0:
            raise ValueError(f"{self.family} needs a positive scale")

    @classmethod
    def dirac(cls):
        return cls("dirac", 0.0)

    @classmethod
    def gaussian(cls, sigma: float):
        return cls("gaussian", float(sigma))

    @classmethod
    def uniform(cls, width: float):
        return cls("uniform", float(width))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "gaussian":
            z = x / self.scale
            return np.exp(-0.5 * z * z) / (self.scale * math.sqrt(2 * math.pi))
        if self.family == "uniform":
            return np.where(np.abs(x) <= self.scale / 2, 1.0 / self.scale, 0.0)
        raise ValueError("a dirac density has no pointwise value")

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "gaussian":
            return special.ndtr(x / self.scale)
        if self.family == "uniform":
            return np.clip(x / self.scale + 0.5, 0.0, 1.0)
        return np.where(x >= 0, 1.0, 0.0)

    def tail(self, a: float) -> float:
        """``P(|delta| > a)``."""
        a = max(a, 0.0)
        if self.family == "gaussian":
            return float(2 * special.ndtr(-a / self.scale))
        if self.family == "uniform":
            return max(0.0, 1.0 - 2 * a / self.scale)
        return 0.0

    def breakpoints(self) -> tuple[float, ...]:
        if self.family == "uniform":
            return (-self.scale / 2, self.scale / 2)
        return (0.0,) if self.family == "dirac" else ()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "dirac":
            return np.zeros(n)
        if self.family == "gaussian":
            return rng.normal(0.0, self.scale, n)
        return rng.uniform(-self.scale / 2, self.scale / 2, n)


@dataclass(frozen=True)
class DelayModel:
    T: float
    Ts: float
    Delta: float
    f_delta: NaturalDelay = NaturalDelay()
    n_range: int = 3
    quadrature_points: int = 200  # subinterval cap for adaptive quadrature

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive (use a tiny T for no intentional delay)")
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        if not 0 < self.Delta < self.Ts:
            raise ValueError("Delta must lie in (0, Ts)")
        check_positive_int(self.n_range, "n_range", minimum=0)
        check_positive_int(self.quadrature_points, "quadrature_points")

    def with_T(self, T: float) -> "DelayModel":
        return DelayModel(T, self.Ts, self.Delta, self.f_delta, self.n_range, self.quadrature_points)

    def with_Delta(self, Delta: float) -> "DelayModel":
        return DelayModel(self.T, self.Ts, Delta, self.f_delta, self.n_range, self.quadrature_points)


def triangular_density(T: float):
    """Density of the difference of two independent uniforms on ``[0, T]``."""
    if not T > 0:
        raise ValueError("T must be positive")

    def f(x):
        x = np.abs(np.asarray(x, dtype=float))
        out = np.where(x <= T, 1.0 / T - x / T**2, 0.0)
        return float(out) if out.ndim == 0 else out

    return f


def _quad(fun, a, b, points, limit):
    pts = sorted({p for p in points if a < p < b})
    val, err = integrate.quad(
        fun, a, b, points=pts or None, epsabs=QUAD_TOL, epsrel=0.0, limit=limit
    )
    if not err <= 10 * QUAD_TOL:
        raise QuadratureError(f"quadrature error estimate {err:.2e} exceeds tolerance")
    return val


def relative_delay_density(model: DelayModel):
    """Density of ``alpha + delta``: the triangular density convolved with ``f_delta``."""
    f_alpha = triangular_density(model.T)
    nd = model.f_delta
    if nd.family == "dirac":
        return f_alpha

    def f(x):
        def integrand(v):
            return f_alpha(v) * nd.pdf(x - v)

        lo, hi = -model.T, model.T
        if nd.family == "gaussian":
            # the integrand is negligible more than 12 sigma from v = x
            lo, hi = max(lo, x - 12 * nd.scale), min(hi, x + 12 * nd.scale)
        if hi <= lo:
            return 0.0
        pts = [0.0, x] + [x - b for b in nd.breakpoints()]
        return _quad(integrand, lo, hi, pts, model.quadrature_points)

    return np.vectorize(f, otypes=[float])


def _effective_range(model: DelayModel) -> int:
    """Window count so that mass beyond the last window is below ``TAIL_TOL``."""
    n = model.n_range
    while model.f_delta.tail((n + 0.5) * model.Ts - model.T) > TAIL_TOL:
        n += 1
    return n


def nonresolvable_probability(model: DelayModel) -> float:
    """``P_c``: mass of ``alpha + delta`` within ``Delta/2`` of any ``n Ts``.

    Integrates the triangular density against the window probability of
    ``delta``, which is the convolution integral with the order swapped.
    """
    T, Ts, h = model.T, model.Ts, model.Delta / 2
    nd = model.f_delta
    N = _effective_range(model)
    f_alpha = triangular_density(T)
    total = 0.0
    for n in range(-N, N + 1):
        a, b = n * Ts - h, n * Ts + h
        if nd.family == "dirac":
            lo, hi = max(a, -T), min(b, T)
            if hi > lo:
                total += _quad(f_alpha, lo, hi, [0.0], model.quadrature_points)
            continue
        # skip windows the support cannot reach
        gap = max(a - T, -T - b)
        if gap > 0 and nd.tail(gap) < 1e-16:
            continue

        def integrand(v, a=a, b=b):
            return f_alpha(v) * (nd.cdf(b - v) - nd.cdf(a - v))

        pts = [0.0] + [a - c for c in nd.breakpoints()] + [b - c for c in nd.breakpoints()]
        total += _quad(integrand, -T, T, pts, model.quadrature_points)
    return min(max(total, 0.0), 1.0)


def monte_carlo_probability(
    model: DelayModel, n_draws: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Sampling estimate of ``P_c`` and its standard error."""
    n_draws = check_positive_int(n_draws, "n_draws")
    alpha = rng.uniform(0, model.T, n_draws) - rng.uniform(0, model.T, n_draws)
    x = alpha + model.f_delta.sample(rng, n_draws)
    d = x - model.Ts * np.round(x / model.Ts)
    hit = np.abs(d) < model.Delta / 2
    p = float(hit.mean())
    return p, math.sqrt(max(p * (1 - p), 1e-300) / n_draws)


@dataclass(eq=False)
class SpreadScan:
    T: np.ndarray
    P_c: np.ndarray
    Ts: float
    slope_at_Ts: float  # centered finite difference of P_c at T = Ts
    curvature_at_Ts: float
    P_c_at_Ts: float

    @property
    def local_min_at_Ts(self) -> bool:
        """Ts beats its grid neighbours and the finite-difference slope vanishes."""
        below = self.T[self.T < self.Ts * (1 - 1e-9)]
        above = self.T[self.T > self.Ts * (1 + 1e-9)]
        if not len(below) or not len(above):
            return False
        left = self.P_c[self.T == below.max()][0]
        right = self.P_c[self.T == above.min()][0]
        flat = abs(self.slope_at_Ts) < 1e-3 * self.P_c_at_Ts / self.Ts
        return bool(self.P_c_at_Ts < left and self.P_c_at_Ts < right and flat)


def scan_spread(model: DelayModel, T_grid, fd_step: float = 1e-3) -> SpreadScan:
    """Evaluate ``P_c`` over ``T_grid`` and probe the neighbourhood of ``T = Ts``.

    ``fd_step`` is relative to ``Ts``.
    """
    T_grid = np.asarray(T_grid, dtype=float)
    if not (T_grid.min() < model.Ts < T_grid.max()):
        raise ValueError("T_grid must straddle Ts")
    Pc = np.array([nonresolvable_probability(model.with_T(T)) for T in T_grid])
    h = fd_step * model.Ts
    p0 = nonresolvable_probability(model.with_T(model.Ts))
    pp = nonresolvable_probability(model.with_T(model.Ts + h))
    pm = nonresolvable_probability(model.with_T(model.Ts - h))
    return SpreadScan(
        T=T_grid,
        P_c=Pc,
        Ts=model.Ts,
        slope_at_Ts=(pp - pm) / (2 * h),
        curvature_at_Ts=(pp - 2 * p0 + pm) / h**2,
        P_c_at_Ts=p0,
    )
