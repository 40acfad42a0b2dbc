import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from crpndrm.distortion import (
    CATALOG,
    EmpiricalDistribution,
    catalog_lookup,
    drm_value,
    drm_value_exact,
    parse_distortion,
)

ALL = [
    ("identity", ()),
    ("gini_deviation", ()),
    ("dual_power", (2.0,)),
    ("dual_power", (3.5,)),
    ("exponential", (1.0,)),
    ("proportional_hazard", (0.5,)),
    ("proportional_hazard", (1.0,)),
    ("cvar", (0.5,)),
    ("rdeu", ()),
]


@pytest.mark.parametrize("name,params", ALL)
def test_h_vanishes_at_zero(name, params):
    assert catalog_lookup(name, params).h(np.array(0.0)) == 0.0


@pytest.mark.parametrize("name,params", [a for a in ALL if a[0] not in ("cvar",)])
def test_derivatives_match_finite_differences(name, params):
    g = catalog_lookup(name, params)
    t = np.linspace(0.1, 0.9, 17)
    s = 1e-5
    for f, df in ((g.h, g.h1), (g.h1, g.h2), (g.h2, g.h3)):
        fd = (f(t + s) - f(t - s)) / (2 * s)
        assert_allclose(df(t), fd, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("name,params", [a for a in ALL if a[0] != "gini_deviation"])
def test_monotone_entries_are_nondecreasing(name, params):
    g = catalog_lookup(name, params)
    assert g.monotone
    assert np.all(np.diff(g.h(np.linspace(0, 1, 501))) >= -1e-12)


def test_catalog_examples():
    gini = catalog_lookup("gini_deviation")
    assert gini.h1(0.5) == 0.0
    assert gini.h2(0.3) == -2.0
    ident = catalog_lookup("identity")
    assert ident(0.7) == pytest.approx(0.7)
    dp = catalog_lookup("dual_power", [2])
    assert dp.h1(np.array(0.0)) == pytest.approx(2.0)
    assert dp.h2(np.array(0.4)) == pytest.approx(-2.0)
    assert dp.h3(np.array(0.4)) == pytest.approx(0.0)


def test_newton_smoothness_flags():
    assert catalog_lookup("identity").smooth_enough_for_newton
    assert catalog_lookup("gini_deviation").smooth_enough_for_newton
    assert catalog_lookup("exponential", [2]).smooth_enough_for_newton
    assert not catalog_lookup("cvar", [0.5]).smooth_enough_for_newton
    assert not catalog_lookup("proportional_hazard", [0.5]).smooth_enough_for_newton
    assert catalog_lookup("proportional_hazard", [1.0]).smooth_enough_for_newton
    assert not catalog_lookup("rdeu").smooth_enough_for_newton


@pytest.mark.parametrize("name,params", [("nope", ()), ("dual_power", (0.5,)), ("cvar", (1.0,)),
                                         ("exponential", (0.0,)), ("proportional_hazard", (1.5,)),
                                         ("identity", (1.0,))])
def test_catalog_rejects_bad_input(name, params):
    with pytest.raises(ValueError):
        catalog_lookup(name, params)


def test_parse_distortion_strings():
    assert parse_distortion("gini_deviation").name == "gini_deviation"
    g = parse_distortion("dual_power:2.0")
    assert g.name == "dual_power" and g.params == (2.0,)
    assert parse_distortion(g) is g
    assert "identity" in CATALOG


def test_drm_value_examples():
    assert drm_value(EmpiricalDistribution([1, 2, 3], 3), catalog_lookup("identity")) == pytest.approx(2.0)
    assert drm_value(EmpiricalDistribution([1.5] * 4, 2), catalog_lookup("gini_deviation")) == pytest.approx(0.0)
    assert drm_value(EmpiricalDistribution([1, 2, 3, 4], 4), catalog_lookup("cvar", [0.5])) == pytest.approx(3.5)


def test_drm_value_exact_examples():
    for g in (catalog_lookup("identity"), catalog_lookup("gini_deviation")):
        assert drm_value_exact([(0.0, 1.0)], g, 1.0) == 0.0
    assert drm_value_exact([(-1, 0.5), (1, 0.5)], catalog_lookup("identity"), 1.0) == pytest.approx(0.0)
    assert drm_value_exact([(-1, 0.5), (1, 0.5)], catalog_lookup("gini_deviation"), 1.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        drm_value_exact([(0.0, 0.7)], catalog_lookup("identity"), 1.0)
    with pytest.raises(ValueError):
        drm_value_exact([(3.0, 1.0)], catalog_lookup("identity"), 1.0)


def _grid_integral(samples, g, bound, n=400_001):
    x = np.linspace(-bound, bound, n)
    G = np.searchsorted(np.sort(samples), x, side="right") / len(samples)
    y = g.h(1 - G) - g.h_at_one * (x < 0)
    return np.trapezoid(y, x) if hasattr(np, "trapezoid") else np.trapz(y, x)


@pytest.mark.parametrize("name,params", [("identity", ()), ("gini_deviation", ()), ("dual_power", (2.0,)),
                                         ("cvar", (0.25,)), ("exponential", (1.0,))])
def test_segment_sum_matches_grid_integration(name, params):
    g = catalog_lookup(name, params)
    rng = np.random.default_rng(0)
    s = rng.normal(size=7)
    bound = 4.0
    assert abs(drm_value(EmpiricalDistribution(s, bound), g) - _grid_integral(s, g, bound)) <= 1e-4 * bound


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_identity_is_sample_mean(xs):
    assert drm_value(EmpiricalDistribution(xs), catalog_lookup("identity")) == pytest.approx(np.mean(xs), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=20), st.floats(-10, 10))
def test_translation_for_normalized_monotone_h(xs, c):
    for g in (catalog_lookup("identity"), catalog_lookup("dual_power", [2.0]), catalog_lookup("exponential", [1.0])):
        bound = 40.0
        a = drm_value(EmpiricalDistribution(xs, bound), g)
        b = drm_value(EmpiricalDistribution(np.asarray(xs) + c, bound + abs(c)), g)
        assert b == pytest.approx(a + c * g.h_at_one, abs=1e-9)


def test_edf_endpoints():
    d = EmpiricalDistribution([3.0, 1.0, 2.0], 5)
    assert_allclose(d.samples, [1, 2, 3])
    assert d.cdf(3.0) == 1.0
    assert d.cdf(0.999) == 0.0
    assert d.cdf(1.0) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        EmpiricalDistribution([10.0], 5)
    with pytest.raises(ValueError):
        EmpiricalDistribution([])


def test_rdeu_near_endpoints_is_finite():
    g = catalog_lookup("rdeu")
    t = np.array([1e-9, 0.5, 1 - 1e-9, 1.0])
    assert np.all(np.isfinite(g.h(t)))
    assert g.h(np.array(1.0)) == pytest.approx(1.0)
    assert math.isinf(g.bounds[0])
