import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from crpndrm.distortion import catalog_lookup
from crpndrm.envs import cliff_walk_env, random_chain_mdp, saddle_mdp_env
from crpndrm.estimators import drm_gradient_full, drm_gradient_vr, drm_hessian_full
from crpndrm.oracle import (
    batch_expectation,
    direct_drm,
    enumerate_distribution,
    estimator_bias_check,
    exact_drm,
    exact_drm_grad_hess,
    finite_difference_gradient,
    relative_error,
    write_report,
)
from crpndrm.policies import TabularBoltzmann, stage_policy


@pytest.fixture
def case():
    rng = np.random.default_rng(7)
    env = random_chain_mdp(rng, 3, 2, 3)
    policy = TabularBoltzmann(3, 2)
    return env, policy, rng.normal(size=policy.dim)


def test_distribution_is_normalized(case):
    dist = enumerate_distribution(*case)
    assert dist.probs.sum() == pytest.approx(1.0)
    assert dist.cdf[-1] == 1.0
    assert np.all(np.diff(dist.values) > 0)
    assert_allclose(dist.grad_mass.sum(axis=0), 0.0, atol=1e-12)
    assert json.dumps(dist.to_json())


def test_identity_drm_is_expected_return(case):
    dist = enumerate_distribution(*case)
    g = catalog_lookup("identity")
    assert exact_drm(dist, g) == pytest.approx(dist.probs @ dist.values)


@pytest.mark.parametrize("name,params", [("identity", ()), ("gini_deviation", ()), ("dual_power", (2.0,)),
                                         ("exponential", (1.0,))])
def test_exact_gradient_matches_finite_differences(case, name, params):
    env, policy, theta = case
    g = catalog_lookup(name, params)
    _, grad, hess = exact_drm_grad_hess(enumerate_distribution(env, policy, theta), g)
    fd = finite_difference_gradient(lambda t: direct_drm(env, policy, t, g), theta)
    assert relative_error(grad, fd) < 1e-6
    fdh = np.stack([finite_difference_gradient(
        lambda t, i=i: exact_drm_grad_hess(enumerate_distribution(env, policy, t), g)[1][i], theta)
        for i in range(theta.size)])
    assert relative_error(hess, fdh) < 1e-5


def test_saddle_value_and_gradient_at_origin():
    env = saddle_mdp_env()
    pol = stage_policy()
    dist = enumerate_distribution(env, pol, np.zeros(4))
    rho, grad, hess = exact_drm_grad_hess(dist, catalog_lookup("identity"))
    assert rho == pytest.approx(0.5)
    assert_allclose(grad, 0.0, atol=1e-12)
    w = np.linalg.eigvalsh(hess)
    assert w[0] < 0 < w[-1]


def test_identity_estimators_unbiased_with_fixed_upper_limit(case):
    dist = enumerate_distribution(*case)
    g = catalog_lookup("identity")
    _, grad, _ = exact_drm_grad_hess(dist, g)
    for est in (drm_gradient_vr, drm_gradient_full):
        assert_allclose(batch_expectation(dist, est, g, 2, dist.bound), grad, atol=1e-12)


def test_full_gradient_bias_vanishes_with_batch_size():
    rng = np.random.default_rng(11)
    env = random_chain_mdp(rng, 2, 2, 2)
    pol = TabularBoltzmann(2, 2)
    dist = enumerate_distribution(env, pol, rng.normal(size=4))
    g = catalog_lookup("gini_deviation")
    _, grad, _ = exact_drm_grad_hess(dist, g)
    b2 = np.abs(batch_expectation(dist, drm_gradient_full, g, 2, dist.bound) - grad).max()
    b4 = np.abs(batch_expectation(dist, drm_gradient_full, g, 4, dist.bound) - grad).max()
    assert b4 < b2


def test_bias_check_returns_mse(case):
    dist = enumerate_distribution(*case)
    g = catalog_lookup("gini_deviation")
    mean, mse, exact = estimator_bias_check(dist, g, "hessian_full", 50, 20, 0, upper=dist.bound)
    assert mean.shape == exact.shape and mse > 0


def test_oracle_refuses_large_or_rough_inputs(case):
    env, policy, theta = case
    with pytest.raises(TypeError):
        enumerate_distribution(cliff_walk_env(), TabularBoltzmann(48, 4), np.zeros(192))
    with pytest.raises(ValueError):
        exact_drm_grad_hess(enumerate_distribution(env, policy, theta), catalog_lookup("cvar", [0.5]))
    dist = enumerate_distribution(env, policy, theta)
    with pytest.raises(ValueError):
        batch_expectation(dist, drm_hessian_full, catalog_lookup("identity"), n=8)


def test_report_writer(tmp_path, case):
    dist = enumerate_distribution(*case)
    write_report(tmp_path / "r.json", {"grad": exact_drm_grad_hess(dist, catalog_lookup("identity"))[1]})
    assert len(json.loads((tmp_path / "r.json").read_text())["grad"]) == 6
