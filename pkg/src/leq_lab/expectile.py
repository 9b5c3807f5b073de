"""Asymmetric least-squares (expectile) machinery.

Conventions
-----------
- The asymmetric weight is W^tau(u) = |tau - 1(u > 0)|, i.e. weight
  (1 - tau) on the side where the estimate exceeds the sample and tau on
  the other side. Ties u = 0 take the indicator literally (weight tau).
- The tau-expectile of a scalar distribution X is the unique minimizer of
  E[W^tau(y - x) * (y - x)^2], equivalently the root of the monotone
  first-order condition
      g(y) = (1 - tau) * E[(y - X) 1(X <= y)] + tau * E[(y - X) 1(X > y)].
- The filtered mean E[W^tau(y_hat > X) * X] / E[W^tau(y_hat > X)] is the
  one-step refinement of an estimate y_hat; its fixed point is the
  tau-expectile.

All solvers work to absolute tolerance 1e-10. Closed forms are used for
uniform and two-point distributions; normal and empirical distributions
use bisection on g, bracketed by the support (empirical) or mu +/- 10
sigma (normal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ExpectileError",
    "InputValidationError",
    "SolverError",
    "ExpectileParam",
    "ScalarDistribution",
    "expectile_weight",
    "expectile_loss",
    "expectile_of",
    "filtered_mean_estimate",
]

SOLVER_TOL = 1e-10
_WEIGHT_TOL = 1e-12
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ExpectileError(Exception):
    """Base class for errors raised by this module."""


class InputValidationError(ExpectileError, ValueError):
    """An argument violates a documented precondition."""


class SolverError(ExpectileError, RuntimeError):
    """The numeric expectile solver failed to converge."""


def _std_normal_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(z))


def _std_normal_cdf(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0:
        return 0.5 * (1.0 + math.erf(float(z) / _SQRT2))
    flat = np.array([math.erf(v / _SQRT2) for v in z.ravel()])
    return 0.5 * (1.0 + flat.reshape(z.shape))


@dataclass(frozen=True)
class ExpectileParam:
    """Asymmetry level tau in (0, 1]; tau <= 0.5 is the "lower" regime."""

    tau: float

    def __post_init__(self) -> None:
        tau = float(self.tau)
        if not math.isfinite(tau) or not (0.0 < tau <= 1.0):
            raise InputValidationError(f"tau must lie in (0, 1], got {self.tau!r}")
        object.__setattr__(self, "tau", tau)

    @property
    def is_lower(self) -> bool:
        return self.tau <= 0.5


def _tau_value(tau: ExpectileParam | float) -> float:
    if isinstance(tau, ExpectileParam):
        return tau.tau
    return ExpectileParam(float(tau)).tau


@dataclass(frozen=True)
class ScalarDistribution:
    """Tagged scalar distribution: empirical, normal, uniform or two_point.

    Use the classmethod constructors; they validate parameters and freeze
    arrays. Unused fields stay None.
    """

    kind: str
    samples: np.ndarray | None = None
    weights: np.ndarray | None = None
    mu: float | None = None
    sigma: float | None = None
    lo: float | None = None
    hi: float | None = None
    x0: float | None = None
    x1: float | None = None
    p: float | None = None

    @classmethod
    def empirical(cls, samples, weights=None) -> "ScalarDistribution":
        xs = np.asarray(samples, dtype=np.float64).reshape(-1)
        if xs.size == 0:
            raise InputValidationError("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(xs)):
            raise InputValidationError("empirical samples must be finite")
        if weights is None:
            ws = np.full(xs.size, 1.0 / xs.size)
        else:
            ws = np.asarray(weights, dtype=np.float64).reshape(-1)
            if ws.shape != xs.shape:
                raise InputValidationError("weights must match samples in length")
            if not np.all(np.isfinite(ws)) or np.any(ws < 0.0):
                raise InputValidationError("weights must be finite and nonnegative")
            if abs(float(ws.sum()) - 1.0) > _WEIGHT_TOL:
                raise InputValidationError(
                    f"weights must sum to 1 within {_WEIGHT_TOL:g}, got {ws.sum()!r}"
                )
        xs.setflags(write=False)
        ws.setflags(write=False)
        return cls(kind="empirical", samples=xs, weights=ws)

    @classmethod
    def normal(cls, mu: float, sigma: float) -> "ScalarDistribution":
        mu, sigma = float(mu), float(sigma)
        if not (math.isfinite(mu) and math.isfinite(sigma) and sigma > 0.0):
            raise InputValidationError(f"normal needs finite mu and sigma > 0, got ({mu}, {sigma})")
        return cls(kind="normal", mu=mu, sigma=sigma)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "ScalarDistribution":
        lo, hi = float(lo), float(hi)
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise InputValidationError(f"uniform needs lo < hi, got ({lo}, {hi})")
        return cls(kind="uniform", lo=lo, hi=hi)

    @classmethod
    def two_point(cls, x0: float, x1: float, p: float) -> "ScalarDistribution":
        x0, x1, p = float(x0), float(x1), float(p)
        if not (math.isfinite(x0) and math.isfinite(x1)):
            raise InputValidationError("two_point atoms must be finite")
        if not (0.0 < p < 1.0):
            raise InputValidationError(f"two_point needs p in (0, 1), got {p}")
        return cls(kind="two_point", x0=x0, x1=x1, p=p)

    def mean(self) -> float:
        if self.kind == "empirical":
            return float(np.dot(self.weights, self.samples))
        if self.kind == "normal":
            return self.mu
        if self.kind == "uniform":
            return 0.5 * (self.lo + self.hi)
        return self.p * self.x0 + (1.0 - self.p) * self.x1

    def cdf(self, x: float) -> float:
        """p(X <= x)."""
        if self.kind == "empirical":
            return float(self.weights[self.samples <= x].sum())
        if self.kind == "normal":
            return float(_std_normal_cdf((x - self.mu) / self.sigma))
        if self.kind == "uniform":
            return float(np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0))
        if x < self.x0:
            return 0.0
        if x < self.x1:
            return self.p
        return 1.0

    def bracket(self) -> tuple[float, float]:
        """Interval guaranteed to contain every expectile."""
        if self.kind == "empirical":
            return float(self.samples.min()), float(self.samples.max())
        if self.kind == "normal":
            return self.mu - 10.0 * self.sigma, self.mu + 10.0 * self.sigma
        if self.kind == "uniform":
            return self.lo, self.hi
        return min(self.x0, self.x1), max(self.x0, self.x1)


def expectile_weight(u, tau: ExpectileParam | float):
    """|tau - 1(u > 0)|; accepts scalars or arrays."""
    t = _tau_value(tau)
    return np.abs(t - (np.asarray(u, dtype=np.float64) > 0.0))


def expectile_loss(u, tau: ExpectileParam | float):
    """Asymmetric squared loss |tau - 1(u > 0)| * u^2."""
    u_arr = np.asarray(u, dtype=np.float64)
    return expectile_weight(u_arr, tau) * np.square(u_arr)


def _foc(dist: ScalarDistribution, y: float, tau: float) -> float:
    """First-order condition g(y); strictly increasing in y."""
    if dist.kind == "empirical":
        d = y - dist.samples
        below = d >= 0.0  # x <= y
        g = (1.0 - tau) * float(np.dot(dist.weights[below], d[below]))
        g += tau * float(np.dot(dist.weights[~below], d[~below]))
        return g
    if dist.kind == "normal":
        z = (y - dist.mu) / dist.sigma
        pdf = float(_std_normal_pdf(z))
        cdf = float(_std_normal_cdf(z))
        # E[(y - X) 1(X <= y)] = sigma * (z * Phi(z) + phi(z)), and similarly above.
        lower = dist.sigma * (z * cdf + pdf)
        upper = dist.sigma * (z * (1.0 - cdf) - pdf)
        return (1.0 - tau) * lower + tau * upper
    raise InputValidationError(f"no first-order condition for kind {dist.kind!r}")


def _bisect_expectile(dist: ScalarDistribution, tau: float) -> float:
    lo, hi = dist.bracket()
    if lo == hi:
        return lo
    g_lo, g_hi = _foc(dist, lo, tau), _foc(dist, hi, tau)
    if not (math.isfinite(g_lo) and math.isfinite(g_hi)) or g_lo > 0.0 or g_hi < 0.0:
        raise SolverError(f"first-order condition not bracketed on [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _foc(dist, mid, tau) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= SOLVER_TOL:
            return 0.5 * (lo + hi)
    raise SolverError(f"expectile bisection did not converge below {SOLVER_TOL:g}")


def expectile_of(dist: ScalarDistribution, tau: ExpectileParam | float) -> float:
    """The tau-expectile of dist, tau in (0, 1).

    tau = 1 is rejected: the asymmetric loss flattens above the essential
    supremum and the minimizer is no longer unique.
    """
    t = _tau_value(tau)
    if t >= 1.0:
        raise InputValidationError("expectile_of requires tau < 1 for a unique minimizer")
    if dist.kind == "uniform":
        # Solve (1 - tau) y^2 = tau (1 - y)^2 on the unit interval, then rescale.
        root = math.sqrt(t) / (math.sqrt(t) + math.sqrt(1.0 - t))
        return dist.lo + (dist.hi - dist.lo) * root
    if dist.kind == "two_point":
        a, b = (dist.x0, dist.x1) if dist.x0 <= dist.x1 else (dist.x1, dist.x0)
        wa = (dist.p if dist.x0 <= dist.x1 else 1.0 - dist.p)
        wb = 1.0 - wa
        num = (1.0 - t) * wa * a + t * wb * b
        den = (1.0 - t) * wa + t * wb
        return num / den
    return _bisect_expectile(dist, t)


def filtered_mean_estimate(
    dist: ScalarDistribution, y_hat: float, tau: ExpectileParam | float
) -> float:
    """E[W^tau(y_hat > X) * X] / E[W^tau(y_hat > X)].

    Requires tau < 1 so the denominator is bounded below by min(tau, 1 - tau).
    """
    t = _tau_value(tau)
    if t >= 1.0:
        raise InputValidationError("filtered_mean_estimate requires tau < 1")
    y_hat = float(y_hat)
    if not math.isfinite(y_hat):
        raise InputValidationError("y_hat must be finite")
    if dist.kind == "empirical":
        w = np.where(dist.samples < y_hat, 1.0 - t, t) * dist.weights
        return float(np.dot(w, dist.samples) / w.sum())
    if dist.kind == "two_point":
        w0 = (1.0 - t if dist.x0 < y_hat else t) * dist.p
        w1 = (1.0 - t if dist.x1 < y_hat else t) * (1.0 - dist.p)
        return (w0 * dist.x0 + w1 * dist.x1) / (w0 + w1)
    if dist.kind == "normal":
        z = (y_hat - dist.mu) / dist.sigma
        num = -(1.0 - 2.0 * t) * float(_std_normal_pdf(z))
        den = t + (1.0 - 2.0 * t) * float(_std_normal_cdf(z))
        return dist.mu + dist.sigma * num / den
    # uniform: truncated interval means on the unit scale, then rescale.
    u = min(max((y_hat - dist.lo) / (dist.hi - dist.lo), 0.0), 1.0)
    num = 0.5 * ((1.0 - t) * u * u + t * (1.0 - u * u))
    den = (1.0 - t) * u + t * (1.0 - u)
    return dist.lo + (dist.hi - dist.lo) * num / den
