import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from crpndrm.distortion import EmpiricalDistribution, catalog_lookup, drm_value
from crpndrm.envs import random_chain_mdp, rollout_batch
from crpndrm.estimators import (
    SortedBatch,
    build_coefficients,
    drm_gradient_full,
    drm_gradient_vr,
    drm_hessian_full,
    drm_hessian_vr,
    drm_hvp,
    drm_value_batch,
    estimate_derivatives,
    gradient_by_segments,
    hessian_by_segments,
    mse_constants,
    sort_batch,
)
from crpndrm.policies import BatchScores, DenseScoreHessians, TabularBoltzmann

SMOOTH = [catalog_lookup("identity"), catalog_lookup("gini_deviation"),
          catalog_lookup("dual_power", [2.0]), catalog_lookup("exponential", [1.0])]


def make_batch(R, d=3, seed=0, upper=None):
    rng = np.random.default_rng(seed)
    R = np.asarray(R, dtype=float)
    n = R.size
    A = rng.normal(size=(n, d, d))
    scores = BatchScores(np.zeros(n), rng.normal(size=(n, d)), DenseScoreHessians(A + A.transpose(0, 2, 1)))
    return sort_batch(R, scores, upper=upper)


def test_sorting_is_stable_and_aligned():
    b = make_batch([2.0, 1.0, 2.0, 0.0])
    assert_allclose(b.returns, [0, 1, 2, 2])
    assert list(b.order) == [3, 1, 0, 2]
    with pytest.raises(ValueError):
        SortedBatch(np.array([2.0, 1.0]), np.zeros((2, 1)), DenseScoreHessians(np.zeros((2, 1, 1))))
    with pytest.raises(ValueError):
        make_batch([1.0, 3.0], upper=2.0)


def test_coefficient_example():
    g = catalog_lookup("identity")
    b = make_batch([1.0, 2.0, 4.0], upper=5.0)
    c = build_coefficients(b, g)
    assert_allclose(c.c1, [1, 2, 1])
    assert_allclose(c.psi1, [4, 3, 1])  # M - R_(i) for the identity
    assert_allclose(c.w, [1, 2, 4])
    assert_allclose(c.c2, 0)


def test_identity_gradient_forms():
    g = catalog_lookup("identity")
    b = make_batch([1.0, 2.0, 4.0], upper=6.0)
    # VR is plain REINFORCE; full carries the baseline M
    assert_allclose(drm_gradient_vr(b, g), (b.returns @ b.grads) / 3)
    assert_allclose(drm_gradient_full(b, g), ((b.returns - 6.0) @ b.grads) / 3)


def test_value_matches_empirical_drm():
    rng = np.random.default_rng(0)
    for g in SMOOTH:
        R = rng.normal(size=9)
        assert drm_value_batch(make_batch(R), g) == pytest.approx(drm_value(EmpiricalDistribution(R), g))


def test_segment_reference_forms():
    rng = np.random.default_rng(1)
    for k in range(12):
        R = rng.integers(-3, 4, size=int(rng.integers(2, 12)))
        b = make_batch(R, seed=k, upper=None if k % 2 else float(R.max() + 1.5))
        g = SMOOTH[k % len(SMOOTH)]
        assert_allclose(drm_gradient_full(b, g), gradient_by_segments(b, g), atol=1e-10)
        assert_allclose(drm_hessian_full(b, g), hessian_by_segments(b, g), atol=1e-10)


def test_hvp_matches_dense_hessian():
    rng = np.random.default_rng(2)
    env = random_chain_mdp(rng, 3, 2, 3)
    pol = TabularBoltzmann(3, 2)
    theta = rng.normal(size=pol.dim)
    tb = rollout_batch(env, pol, theta, 40, rng)
    b = sort_batch(tb.returns, pol.batch_scores(theta, tb))
    for g in SMOOTH:
        v = rng.normal(size=pol.dim)
        assert_allclose(drm_hvp(b, g, v), drm_hessian_vr(b, g) @ v, rtol=1e-10, atol=1e-12)


def test_single_trajectory_batch():
    b = make_batch([3.0])
    for g in SMOOTH:
        assert np.all(np.isfinite(drm_gradient_vr(b, g)))
        assert np.all(np.isfinite(drm_hessian_full(b, g)))
    # with M equal to the only return, the full identity gradient is zero
    assert_allclose(drm_gradient_full(b, SMOOTH[0]), 0.0)


def test_rejects_nonsmooth_distortions():
    b = make_batch([1.0, 2.0])
    with pytest.raises(ValueError):
        drm_hessian_vr(b, catalog_lookup("cvar", [0.5]))
    with pytest.raises(ValueError):
        drm_gradient_vr(b, catalog_lookup("proportional_hazard", [0.5]))
    with pytest.raises(ValueError):
        estimate_derivatives(b, SMOOTH[0], mode="exact")


def test_estimate_derivatives_modes_and_separate_hessian_batch():
    b = make_batch([0.0, 1.0, 1.0, 3.0], seed=3)
    hb = make_batch([0.5, 2.0, 2.5], seed=4)
    g = SMOOTH[1]
    vr = estimate_derivatives(b, g, "vr", hess_batch=hb)
    assert_allclose(vr.hess, drm_hessian_vr(hb, g))
    assert_allclose(vr.grad, drm_gradient_vr(b, g))
    full = estimate_derivatives(b, g, "full", hess_batch=hb)
    assert_allclose(full.hess, hessian_by_segments(b, g, hb))
    v = np.ones(3)
    assert_allclose(full.hvp(v), full.hess @ v)
    lazy = estimate_derivatives(b, g, "vr", dense=False)
    assert lazy.hess is None and lazy.dim == 3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=2, max_size=15), st.integers(0, 3))
def test_hessians_are_symmetric(R, gi):
    g = SMOOTH[gi]
    b = make_batch(R, seed=len(R))
    for H in (drm_hessian_full(b, g), drm_hessian_vr(b, g)):
        assert_allclose(H, H.T, atol=1e-12)


def test_theory_constants_scale():
    c1 = mse_constants((2.0, 1.0, 2.0), (1.0, 2.0, 0.0), M_r=1.0, T=2, d=4)
    c2 = mse_constants((2.0, 1.0, 2.0), (1.0, 2.0, 0.0), M_r=2.0, T=2, d=4)
    for k, v in c1.as_dict().items():
        assert np.isfinite(v) and v >= 0, k
    assert c2.G_H > c1.G_H and c2.kappa1 > c1.kappa1
