"""Property-based checks of the invariants the estimators and operators must satisfy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskavi.approx import PolynomialValueFn
from riskavi.bounds import stationary_distribution
from riskavi.engine import exact_bellman
from riskavi.mdp import random_tabular
from riskavi.risk import (
    RiskSpec,
    cvar_empirical,
    empirical_risk,
    mean_deviation_empirical,
    mean_semideviation_empirical,
    oce_empirical,
    theta_bound,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
samples = st.lists(finite, min_size=1, max_size=40).map(np.array)
alpha = st.floats(0.0, 0.99)
open_alpha = st.floats(0.01, 0.99)

SPECS = [
    RiskSpec.cvar(0.3),
    RiskSpec.cvar(0.9),
    RiskSpec.oce(0.4, 2.5),
    RiskSpec.mean_deviation(0.5, 1.0),
    RiskSpec.mean_deviation(0.3, 2.0),
    RiskSpec.mean_semideviation(0.7, 1.0),
    RiskSpec.mean_semideviation(0.4, 3.0),
]


def _close(a, b, scale):
    return abs(a - b) <= 1e-9 * max(1.0, scale)


class TestCoherenceLikeProperties:
    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.label)
    @given(x=samples, c=finite)
    def test_translation_equivariance(self, spec, x, c):
        scale = float(np.max(np.abs(x))) + abs(c)
        assert _close(empirical_risk(x + c, spec), empirical_risk(x, spec) + c, scale)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.label)
    @given(x=samples, lam=st.floats(0.0, 50.0))
    def test_positive_homogeneity(self, spec, x, lam):
        scale = lam * (float(np.max(np.abs(x))) + 1.0)
        assert _close(empirical_risk(lam * x, spec), lam * empirical_risk(x, spec), scale)

    @given(x=samples, shift=st.lists(st.floats(0.0, 100.0), min_size=40, max_size=40), a=alpha)
    def test_cvar_monotone(self, x, shift, a):
        y = x + np.array(shift[: x.size])
        assert cvar_empirical(y, a) >= cvar_empirical(x, a) - 1e-9 * (1 + np.max(np.abs(y)))

    @given(x=samples, shift=st.lists(st.floats(0.0, 100.0), min_size=40, max_size=40),
           b1=st.floats(0.0, 0.99), b2=st.floats(1.01, 10.0))
    def test_oce_monotone(self, x, shift, b1, b2):
        y = x + np.array(shift[: x.size])
        assert oce_empirical(y, b1, b2) >= oce_empirical(x, b1, b2) - 1e-9 * (1 + np.max(np.abs(y)))

    @given(x=samples, a=open_alpha)
    def test_oce_reduces_to_cvar(self, x, a):
        scale = float(np.max(np.abs(x))) + 1.0
        assert abs(oce_empirical(x, 0.0, 1.0 / (1.0 - a)) - cvar_empirical(x, a)) <= 1e-12 * scale * 10

    @given(x=samples, a=alpha)
    def test_cvar_between_mean_and_max(self, x, a):
        v = cvar_empirical(x, a)
        tol = 1e-9 * (1 + np.max(np.abs(x)))
        assert x.mean() - tol <= v <= x.max() + tol

    @given(x=samples, b=st.floats(0.0, 1.0), p=st.floats(1.0, 4.0))
    def test_deviation_at_least_mean(self, x, b, p):
        tol = 1e-9 * (1 + np.max(np.abs(x)))
        assert mean_deviation_empirical(x, b, p) >= x.mean() - tol
        assert mean_semideviation_empirical(x, b, p) >= x.mean() - tol


class TestOperators:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), spec=st.sampled_from(SPECS[:3]),
           data=st.data())
    def test_bellman_contraction(self, seed, spec, data):
        rng = np.random.default_rng(seed)
        mdp = random_tabular(4, 2, 0.7, rng, support=3)
        vec = st.lists(st.floats(0.0, 50.0), min_size=4, max_size=4).map(np.array)
        J1, J2 = data.draw(vec), data.draw(vec)
        lhs = np.max(np.abs(exact_bellman(mdp, spec, J1) - exact_bellman(mdp, spec, J2)))
        assert lhs <= mdp.gamma * np.max(np.abs(J1 - J2)) + 1e-9

    @given(coeffs=st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=6),
           xs=st.lists(st.floats(0.0, 30.0), min_size=1, max_size=20))
    def test_clipped_range(self, coeffs, xs):
        fn = PolynomialValueFn(np.array(coeffs), 0.0, 300.0, 0.0, 30.0)
        out = fn.evaluate(np.array(xs))
        assert np.all((out >= 0.0) & (out <= 300.0))


class TestStationary:
    @given(p=st.floats(0.01, 0.99), k=st.integers(2, 40))
    def test_balance(self, p, k):
        mu = stationary_distribution(p, k)
        assert mu.sum() == pytest.approx(1.0, abs=1e-12)
        P = np.zeros((k, k))
        for i in range(k):
            P[i, max(i - 1, 0)] += p
            P[i, k - 1] += 1.0 - p
        assert np.max(np.abs(mu @ P - mu)) <= 1e-12


class TestThetaMonotone:
    @given(eps=st.floats(0.01, 10.0), m=st.integers(2, 10**6), spec=st.sampled_from(SPECS))
    def test_decreasing_in_m_and_eps(self, eps, m, spec):
        t = theta_bound(spec, eps, m, 10.0)
        assert theta_bound(spec, eps, 2 * m, 10.0) <= t
        assert theta_bound(spec, 2 * eps, m, 10.0) <= t
        assert t >= 0.0
