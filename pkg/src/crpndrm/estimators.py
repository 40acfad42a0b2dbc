"""Sample-based DRM gradient and Hessian estimators.

All estimators work on a :class:`SortedBatch`: the batch returns sorted
ascending, with per-trajectory score gradients ``g_i`` and score Hessians
``A_i`` permuted to match.  With ``S_i = g_1 + ... + g_i`` and the EDF
plug-ins

    grad G(x)   = (1/n) sum_i 1{R_i <= x} g_i
    hess G(x)   = (1/n) sum_i 1{R_i <= x} (A_i + g_i g_i^T)

the DRM gradient -int h'(1-G) grad G dx and Hessian
int h''(1-G) grad G grad G^T dx - int h'(1-G) hess G dx collapse to
weighted sums over order statistics, with weights given by the
:class:`CoefficientTable`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .distortion import DistortionFunction, segment_integral
from .policies import BatchScores

__all__ = [
    "SortedBatch",
    "CoefficientTable",
    "DrmDerivatives",
    "TheoryConstants",
    "sort_batch",
    "build_coefficients",
    "drm_value_batch",
    "drm_gradient_full",
    "drm_gradient_vr",
    "drm_hessian_full",
    "drm_hessian_vr",
    "drm_hvp",
    "gradient_by_segments",
    "hessian_by_segments",
    "estimate_derivatives",
    "mse_constants",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 512


@dataclass(frozen=True)
class SortedBatch:
    """Order-statistics view of a batch.

    ``upper`` is the upper integration limit M used by the boundary
    coefficient; ``None`` means the batch maximum (boundary terms vanish).
    """

    returns: np.ndarray
    grads: np.ndarray
    hess: object
    upper: float | None = None
    order: np.ndarray | None = None
    episode_returns: np.ndarray | None = None

    def __post_init__(self):
        if self.returns.ndim != 1 or self.returns.size < 1:
            raise ValueError("returns must be a non-empty vector")
        if np.any(np.diff(self.returns) < 0):
            raise ValueError("returns must be sorted ascending")
        if self.grads.shape[0] != self.returns.size or len(self.hess) != self.returns.size:
            raise ValueError("score arrays are not aligned with the returns")
        if self.upper is not None and self.upper < self.returns[-1] - 1e-9 * max(1.0, abs(self.returns[-1])):
            raise ValueError("upper integration limit is below the largest return")

    @property
    def n(self) -> int:
        return self.returns.size

    @property
    def dim(self) -> int:
        return self.grads.shape[1]

    @property
    def m_eff(self) -> float:
        return float(self.returns[-1]) if self.upper is None else float(self.upper)

    @property
    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.grads, axis=0)


def sort_batch(returns, scores: BatchScores, upper: float | None = None, episode_returns=None) -> SortedBatch:
    """Sort by return with a stable tie order (trajectory index)."""
    returns = np.asarray(returns, dtype=float)
    order = np.argsort(returns, kind="stable")
    ep = None if episode_returns is None else np.asarray(episode_returns)[order]
    return SortedBatch(returns[order], scores.grads[order], scores.hess.take(order),
                       upper=upper, order=order, episode_returns=ep)


@dataclass(frozen=True)
class CoefficientTable:
    """c'_i, c''_i, their suffix sums psi'_i and psi''_i, and w_i = R_(i) h'(1 - i/n)."""

    c1: np.ndarray
    c2: np.ndarray
    psi1: np.ndarray
    psi2: np.ndarray
    w: np.ndarray


def _suffix_sum(x: np.ndarray) -> np.ndarray:
    return np.cumsum(x[::-1])[::-1]


def _levels(n: int) -> np.ndarray:
    return 1.0 - np.arange(1, n + 1) / n


def _check_smooth(g: DistortionFunction, order: int) -> None:
    bounds = g.bounds[:order]
    if not all(math.isfinite(b) for b in bounds):
        raise ValueError(f"distortion {g.name!r} lacks bounded derivatives needed for this estimator")


def build_coefficients(batch: SortedBatch, g: DistortionFunction) -> CoefficientTable:
    R = batch.returns
    n = R.size
    gaps = np.append(np.diff(R), batch.m_eff - R[-1])
    t = _levels(n)
    d1 = np.append(g.h1(t[:-1]), g.h1_plus0) if n > 1 else np.array([g.h1_plus0])
    d2 = np.append(g.h2(t[:-1]), g.h2_plus0) if n > 1 else np.array([g.h2_plus0])
    c1 = gaps * d1
    c2 = gaps * d2
    w = R * np.asarray(g.h1(t), dtype=float)
    return CoefficientTable(c1, c2, _suffix_sum(c1), _suffix_sum(c2) / n, w)


def drm_value_batch(batch: SortedBatch, g: DistortionFunction) -> float:
    R = batch.returns
    bound = max(float(np.max(np.abs(R))), abs(batch.m_eff))
    breaks, counts = np.unique(R, return_counts=True)
    return segment_integral(breaks, np.cumsum(counts) / R.size, g, bound)


def drm_gradient_full(batch: SortedBatch, g: DistortionFunction, coef: CoefficientTable | None = None) -> np.ndarray:
    """-(1/n) sum_i psi'_i g_(i), the exact EDF plug-in gradient."""
    _check_smooth(g, 1)
    coef = coef or build_coefficients(batch, g)
    return -(coef.psi1 @ batch.grads) / batch.n


def drm_gradient_vr(batch: SortedBatch, g: DistortionFunction, coef: CoefficientTable | None = None) -> np.ndarray:
    """(1/n) sum_i R_(i) h'(1 - i/n) g_(i).  For h(t) = t this is REINFORCE."""
    _check_smooth(g, 1)
    coef = coef or build_coefficients(batch, g)
    return (coef.w @ batch.grads) / batch.n


def _symmetrize(H: np.ndarray) -> np.ndarray:
    return 0.5 * (H + H.T)


def drm_hessian_full(batch: SortedBatch, g: DistortionFunction, coef: CoefficientTable | None = None) -> np.ndarray:
    _check_smooth(g, 3)
    coef = coef or build_coefficients(batch, g)
    n = batch.n
    G = batch.grads
    S = batch.partial_sums
    first = (S.T * coef.c2) @ S / n ** 2
    second = (batch.hess.weighted_dense(coef.psi1) + (G.T * coef.psi1) @ G) / n
    return _symmetrize(first - second)


def drm_hessian_vr(batch: SortedBatch, g: DistortionFunction, coef: CoefficientTable | None = None) -> np.ndarray:
    _check_smooth(g, 3)
    coef = coef or build_coefficients(batch, g)
    G = batch.grads
    H = ((G.T * (coef.psi2 + coef.w)) @ G + batch.hess.weighted_dense(coef.w)) / batch.n
    return _symmetrize(H)


def drm_hvp(batch: SortedBatch, g: DistortionFunction, v, coef: CoefficientTable | None = None) -> np.ndarray:
    """Variance-reduced Hessian times ``v`` in O(n d) without forming the matrix.

    The outer-product part is a stacked-score product G^T diag(psi'' + w) G v;
    the score-Hessian part is sum_i w_i A_i v.
    """
    _check_smooth(g, 3)
    coef = coef or build_coefficients(batch, g)
    v = np.asarray(v, dtype=float)
    G = batch.grads
    return (G.T @ ((coef.psi2 + coef.w) * (G @ v)) + batch.hess.weighted_matvec(coef.w, v)) / batch.n


def _segments(*batches: SortedBatch):
    """Left edges and lengths of the EDF segments between all breakpoints and M."""
    upper = max(b.m_eff for b in batches)
    pts = np.unique(np.concatenate([b.returns for b in batches] + [[upper]]))
    return pts[:-1], np.diff(pts)


def gradient_by_segments(batch: SortedBatch, g: DistortionFunction) -> np.ndarray:
    """Integrate -h'(1 - G) grad G over each EDF segment directly (reference form)."""
    lefts, lengths = _segments(batch)
    out = np.zeros(batch.dim)
    for x, L in zip(lefts, lengths):
        mask = batch.returns <= x
        G = mask.mean()
        slope = g.h1(1.0 - G) if G < 1.0 else g.h1_plus0
        out -= slope * L * batch.grads[mask].sum(axis=0) / batch.n
    return out


def hessian_by_segments(grad_batch: SortedBatch, g: DistortionFunction,
                        hess_batch: SortedBatch | None = None) -> np.ndarray:
    """Integrate the Hessian integrand segment by segment (reference form).

    ``grad_batch`` supplies G and grad G; ``hess_batch`` (default: the same
    batch) supplies hess G.  Segments are cut at the breakpoints of both.
    """
    hb = grad_batch if hess_batch is None else hess_batch
    lefts, lengths = _segments(grad_batch, hb)
    d = grad_batch.dim
    out = np.zeros((d, d))
    for x, L in zip(lefts, lengths):
        mask_m = grad_batch.returns <= x
        mask_b = hb.returns <= x
        G = mask_m.mean()
        top = G >= 1.0
        d1 = g.h1_plus0 if top else g.h1(1.0 - G)
        d2 = g.h2_plus0 if top else g.h2(1.0 - G)
        dG = grad_batch.grads[mask_m].sum(axis=0) / grad_batch.n
        Gb = hb.grads[mask_b]
        d2G = (hb.hess.weighted_dense(mask_b.astype(float)) + Gb.T @ Gb) / hb.n
        out += L * (d2 * np.outer(dG, dG) - d1 * d2G)
    return _symmetrize(out)


@dataclass
class DrmDerivatives:
    value: float
    grad: np.ndarray
    hvp: Callable[[np.ndarray], np.ndarray]
    hess: np.ndarray | None = None
    coefficients: CoefficientTable | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.grad.size


def estimate_derivatives(batch: SortedBatch, g: DistortionFunction, mode: str = "vr",
                         hess_batch: SortedBatch | None = None, dense: bool | None = None) -> DrmDerivatives:
    """Value, gradient and Hessian operator from one batch (or separate m/b batches).

    ``mode`` is ``"vr"`` (variance-reduced, the optimizer default) or
    ``"full"``.  ``dense`` defaults to materializing the Hessian when
    d <= DENSE_LIMIT.
    """
    if mode not in ("vr", "full"):
        raise ValueError(f"unknown estimator mode {mode!r}")
    _check_smooth(g, 3)
    coef = build_coefficients(batch, g)
    value = drm_value_batch(batch, g)
    grad = drm_gradient_vr(batch, g, coef) if mode == "vr" else drm_gradient_full(batch, g, coef)
    dense = batch.dim <= DENSE_LIMIT if dense is None else dense
    hb = batch if hess_batch is None else hess_batch
    hcoef = coef if hess_batch is None else build_coefficients(hb, g)

    if mode == "vr":
        H = drm_hessian_vr(hb, g, hcoef) if dense else None
        return DrmDerivatives(value, grad, lambda v: drm_hvp(hb, g, v, hcoef), H, coef)
    if hess_batch is None:
        H = drm_hessian_full(batch, g, coef)
    else:
        H = hessian_by_segments(batch, g, hess_batch)
    return DrmDerivatives(value, grad, lambda v: H @ np.asarray(v, dtype=float), H, coef)


@dataclass(frozen=True)
class TheoryConstants:
    """Smoothness and estimator-MSE constants for given problem bounds."""

    G_H: float
    L_H: float
    kappa1: float
    kappa2: float
    kappa3: float
    t1: float
    t2: float
    C_d: float
    nu: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def mse_constants(bounds, h_bounds, M_r: float, T: int, d: int) -> TheoryConstants:
    """Closed-form constants from policy bounds (M_d, M_h, L_2) and distortion bounds.

    ``h_bounds`` is (M_h', M_h'', M_h''').  With nu = T M_h + T^2 M_d^2:

        G_H = 2 M_r T (M_h M_h' + T M_d^2 (M_h' + M_h''))
        L_H = xi_1 + xi_2
        kappa_1 = 32 M_r^2 T^2 M_d^2 (e^2 M_h'^2 + M_h''^2)
    """
    M_d, M_h, L2 = (float(x) for x in bounds)
    M1, M2, M3 = (float(x) for x in h_bounds)
    M_r, T, d = float(M_r), float(T), int(d)
    vals = (M_d, M_h, L2, M1, M2, M3, M_r, T)
    if not all(math.isfinite(x) and x >= 0 for x in vals) or d < 1:
        raise ValueError("all bounds must be finite and non-negative, and d >= 1")
    e2 = math.e ** 2
    nu = T * M_h + T ** 2 * M_d ** 2
    G_H = 2 * M_r * T * (M_h * M1 + T * M_d ** 2 * (M1 + M2))
    xi1 = 2 * M_r * (2 * M2 * T * M_d * nu + T ** 3 * M_d ** 3 * M3)
    xi2 = 2 * M_r * (M2 * T * M_d * nu + M1 * (T * L2 + 2 * T * M_d * M_h))
    C_d = 4 * (1 + 2 * math.log(2 * d))
    t1 = 32 * M_r ** 2 * M1 ** 2 * C_d * nu ** 2
    t2 = 1920 * M_r ** 2 * M1 ** 4 * d ** 2 * nu ** 4
    kappa1 = 32 * M_r ** 2 * T ** 2 * M_d ** 2 * (e2 * M1 ** 2 + M2 ** 2)
    kappa2 = 64 * M_r ** 2 * (3 * e2 * M2 ** 2 * T ** 4 * M_d ** 4 + 2 * T ** 4 * M_d ** 4 * M3 ** 2 + M2 ** 2 * nu ** 2)
    kappa3 = 4096 * M_r ** 2 * (T ** 8 * M_d ** 8 * (9 * e2 * M2 ** 4 + 8 * M3 ** 4) + M2 ** 4 * nu ** 4)
    return TheoryConstants(G_H, xi1 + xi2, kappa1, kappa2, kappa3, t1, t2, C_d, nu)
