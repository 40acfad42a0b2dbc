"""Distortion functions and the distortion riskmetric (DRM) functional.

A DRM of a random variable X with CDF F is

    rho_h(X) = int_{-inf}^0 [h(1 - F(x)) - h(1)] dx + int_0^inf h(1 - F(x)) dx

For a finitely supported distribution, F is a step function, so the
integral is a finite sum over the constant segments between atoms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DistortionFunction",
    "EmpiricalDistribution",
    "catalog_lookup",
    "parse_distortion",
    "drm_value",
    "drm_value_exact",
    "segment_integral",
    "CATALOG",
]

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DistortionFunction:
    """A distortion function h with its first three derivatives.

    ``bounds`` holds (sup|h'|, sup|h''|, sup|h'''|) over [0, 1]; entries are
    ``inf`` when the derivative is unbounded.
    """

    name: str
    params: tuple
    h: ArrayFn = field(repr=False)
    h1: ArrayFn = field(repr=False)
    h2: ArrayFn = field(repr=False)
    h3: ArrayFn = field(repr=False)
    h1_plus0: float
    h2_plus0: float
    bounds: tuple[float, float, float]
    monotone: bool = True

    @property
    def smooth_enough_for_newton(self) -> bool:
        return all(math.isfinite(b) for b in self.bounds)

    @property
    def h_at_one(self) -> float:
        return float(self.h(np.array(1.0)))

    @property
    def spec_string(self) -> str:
        if not self.params:
            return self.name
        return self.name + ":" + ",".join(repr(float(p)) for p in self.params)

    def __call__(self, t):
        return self.h(np.asarray(t, dtype=float))


def _const(c: float) -> ArrayFn:
    return lambda t: np.full(np.shape(t), c, dtype=float)


def _identity() -> DistortionFunction:
    return DistortionFunction(
        "identity", (), lambda t: np.asarray(t, dtype=float), _const(1.0), _const(0.0), _const(0.0),
        h1_plus0=1.0, h2_plus0=0.0, bounds=(1.0, 0.0, 0.0),
    )


def _gini_deviation() -> DistortionFunction:
    return DistortionFunction(
        "gini_deviation", (),
        lambda t: t - t * t,
        lambda t: 1.0 - 2.0 * t,
        _const(-2.0),
        _const(0.0),
        h1_plus0=1.0, h2_plus0=-2.0, bounds=(1.0, 2.0, 0.0), monotone=False,
    )


def _dual_power(alpha: float) -> DistortionFunction:
    if not alpha >= 1.0:
        raise ValueError(f"dual_power requires alpha >= 1, got {alpha}")
    a = float(alpha)

    def h1(t):
        return a * (1.0 - t) ** (a - 1.0)

    def h2(t):
        if a == 1.0:
            return np.zeros(np.shape(t))
        return -a * (a - 1.0) * (1.0 - t) ** (a - 2.0)

    def h3(t):
        if a in (1.0, 2.0):
            return np.zeros(np.shape(t))
        return a * (a - 1.0) * (a - 2.0) * (1.0 - t) ** (a - 3.0)

    # (1 - t)^k with k < 0 blows up at t = 1
    m1 = a
    m2 = a * (a - 1.0) if (a == 1.0 or a >= 2.0) else math.inf
    m3 = a * (a - 1.0) * abs(a - 2.0) if (a in (1.0, 2.0) or a >= 3.0) else math.inf
    return DistortionFunction(
        "dual_power", (a,), lambda t: 1.0 - (1.0 - t) ** a, h1, h2, h3,
        h1_plus0=a, h2_plus0=-a * (a - 1.0), bounds=(m1, m2, m3),
    )


def _exponential(alpha: float) -> DistortionFunction:
    if not alpha > 0.0:
        raise ValueError(f"exponential requires alpha > 0, got {alpha}")
    a = float(alpha)
    return DistortionFunction(
        "exponential", (a,),
        lambda t: 1.0 - np.exp(-a * t),
        lambda t: a * np.exp(-a * t),
        lambda t: -a * a * np.exp(-a * t),
        lambda t: a ** 3 * np.exp(-a * t),
        h1_plus0=a, h2_plus0=-a * a, bounds=(a, a * a, a ** 3),
    )


def _proportional_hazard(alpha: float) -> DistortionFunction:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"proportional_hazard requires 0 < alpha <= 1, got {alpha}")
    a = float(alpha)
    if a == 1.0:
        inner = _identity()
        return DistortionFunction(
            "proportional_hazard", (a,), inner.h, inner.h1, inner.h2, inner.h3,
            h1_plus0=1.0, h2_plus0=0.0, bounds=(1.0, 0.0, 0.0),
        )
    with np.errstate(divide="ignore"):
        return DistortionFunction(
            "proportional_hazard", (a,),
            lambda t: np.asarray(t, dtype=float) ** a,
            lambda t: a * np.asarray(t, dtype=float) ** (a - 1.0),
            lambda t: a * (a - 1.0) * np.asarray(t, dtype=float) ** (a - 2.0),
            lambda t: a * (a - 1.0) * (a - 2.0) * np.asarray(t, dtype=float) ** (a - 3.0),
            h1_plus0=math.inf, h2_plus0=-math.inf, bounds=(math.inf, math.inf, math.inf),
        )


def _cvar(alpha: float) -> DistortionFunction:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"cvar requires 0 < alpha < 1, got {alpha}")
    a = float(alpha)
    slope = 1.0 / (1.0 - a)
    # kink at t = 1 - alpha: h'' is a point mass there, so Newton is off the table
    return DistortionFunction(
        "cvar", (a,),
        lambda t: np.minimum(np.asarray(t, dtype=float) * slope, 1.0),
        lambda t: np.where(np.asarray(t) < 1.0 - a, slope, 0.0),
        _const(0.0),
        _const(0.0),
        h1_plus0=slope, h2_plus0=0.0, bounds=(slope, math.inf, math.inf),
    )


def _rdeu() -> DistortionFunction:
    # h(t) = exp(-sqrt(-ln t)); with s = sqrt(-ln t):
    #   h'  = h / (2 s t)
    #   h'' = h' q,           q  = (1 + 1/s) / (2 s t) - 1/t
    #   h'''= h'' q + h' q'
    def _s(t):
        t = np.asarray(t, dtype=float)
        return np.sqrt(-np.log(t))

    def h(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(t > 0.0, np.exp(-_s(np.where(t > 0, t, 1.0))), 0.0)

    def h1(t):
        t = np.asarray(t, dtype=float)
        s = _s(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.exp(-s) / (2.0 * s * t)

    def _q(t, s):
        return (1.0 + 1.0 / s) / (2.0 * s * t) - 1.0 / t

    def _dq(t, s):
        a = -(s - 1.0 / (2.0 * s)) / (2.0 * s * s * t * t)
        b = -(s * s - 1.0) / (2.0 * s ** 4 * t * t)
        return a + b + 1.0 / (t * t)

    def h2(t):
        t = np.asarray(t, dtype=float)
        s = _s(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return h1(t) * _q(t, s)

    def h3(t):
        t = np.asarray(t, dtype=float)
        s = _s(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = _q(t, s)
            return h1(t) * (q * q + _dq(t, s))

    return DistortionFunction(
        "rdeu", (), h, h1, h2, h3,
        h1_plus0=math.inf, h2_plus0=math.inf, bounds=(math.inf, math.inf, math.inf),
    )


CATALOG: dict[str, tuple[Callable[..., DistortionFunction], int]] = {
    "identity": (_identity, 0),
    "mean": (_identity, 0),
    "gini_deviation": (_gini_deviation, 0),
    "gini": (_gini_deviation, 0),
    "dual_power": (_dual_power, 1),
    "exponential": (_exponential, 1),
    "proportional_hazard": (_proportional_hazard, 1),
    "pht": (_proportional_hazard, 1),
    "cvar": (_cvar, 1),
    "rdeu": (_rdeu, 0),
}


def catalog_lookup(name: str, params: Sequence[float] = ()) -> DistortionFunction:
    """Build a catalog distortion by name.

    >>> catalog_lookup("dual_power", [2.0]).h1_plus0
    2.0
    """
    try:
        factory, n_params = CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown distortion {name!r}; known: {sorted(CATALOG)}") from None
    params = tuple(float(p) for p in params)
    if len(params) != n_params:
        raise ValueError(f"distortion {name!r} takes {n_params} parameter(s), got {len(params)}")
    return factory(*params)


def parse_distortion(spec: str | DistortionFunction) -> DistortionFunction:
    """Parse ``name[:p1,p2]`` strings such as ``"dual_power:2.0"``."""
    if isinstance(spec, DistortionFunction):
        return spec
    name, _, rest = spec.strip().partition(":")
    params = [float(p) for p in rest.split(",") if p.strip()] if rest else []
    return catalog_lookup(name.strip(), params)


def segment_integral(breaks: np.ndarray, upper: np.ndarray, g: DistortionFunction, bound: float) -> float:
    """Integrate h(1 - F) - h(1) 1{x < 0} over [-bound, bound].

    ``breaks`` are the sorted jump points of F, ``upper[k]`` is F on
    [breaks[k], breaks[k + 1]) (the last segment runs up to ``bound``).
    F is 0 on [-bound, breaks[0]).
    """
    edges = np.concatenate([[-bound], breaks, [bound]])
    lengths = np.diff(edges)
    levels = np.concatenate([[0.0], upper])
    # the negative half-line always has length `bound`, so the h(1) correction is a constant
    return float(np.dot(g(1.0 - levels), lengths) - g.h_at_one * bound)


@dataclass(frozen=True)
class EmpiricalDistribution:
    """EDF of a sample, with the support bound M_r used as integration limit."""

    samples: np.ndarray
    support_bound: float

    def __init__(self, samples, support_bound: float | None = None):
        x = np.sort(np.asarray(samples, dtype=float).ravel(), kind="stable")
        if x.size == 0:
            raise ValueError("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        bound = float(np.max(np.abs(x))) if support_bound is None else float(support_bound)
        if not math.isfinite(bound):
            raise ValueError("support bound must be finite")
        if np.max(np.abs(x)) > bound * (1 + 1e-12) + 1e-12:
            raise ValueError(f"samples exceed the support bound {bound}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "support_bound", bound)

    @property
    def m(self) -> int:
        return self.samples.size

    def cdf(self, x):
        """Right-continuous EDF G(x) = #{R_i <= x} / m."""
        return np.searchsorted(self.samples, x, side="right") / self.m


def drm_value(dist: EmpiricalDistribution, g: DistortionFunction) -> float:
    """DRM of the empirical distribution, exact over EDF segments."""
    x = dist.samples
    m = x.size
    # collapse ties so each break carries its cumulative level
    breaks, counts = np.unique(x, return_counts=True)
    levels = np.cumsum(counts) / m
    return segment_integral(breaks, levels, g, dist.support_bound)


def drm_value_exact(atoms: Sequence[tuple[float, float]], g: DistortionFunction, bound: float) -> float:
    """DRM of a finitely supported distribution given as (value, probability) pairs."""
    arr = np.asarray(atoms, dtype=float).reshape(-1, 2)
    values, probs = arr[:, 0], arr[:, 1]
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("atom probabilities must be non-negative and sum to 1")
    if np.any(np.abs(values) > bound * (1 + 1e-12) + 1e-12):
        raise ValueError(f"atom values exceed the support bound {bound}")
    order = np.argsort(values, kind="stable")
    values, probs = values[order], probs[order]
    breaks, inverse = np.unique(values, return_inverse=True)
    mass = np.bincount(inverse, weights=probs, minlength=breaks.size)
    levels = np.minimum(np.cumsum(mass), 1.0)
    levels[-1] = 1.0
    return segment_integral(breaks, levels, g, float(bound))
