import json

import numpy as np
import pytest

from riskavi.approx import PiecewiseConstantValueFn, build_eps_net, zero_piecewise, zero_polynomial
from riskavi.engine import (
    AviConfig,
    AviRun,
    GreedyPolicy,
    PiecewiseConstantFit,
    PolynomialFit,
    TabularPolicy,
    ThresholdPolicy,
    avi_iterate,
    bellman_target,
    decision_boundary,
    evaluate_policy_risk,
    exact_bellman,
    exact_policy_evaluation,
    exact_scores,
    exact_value_iteration,
    greedy_action,
    greedy_table,
    initial_value_fn,
    rollout_expected_cost,
    run_avi,
    stream,
)
from riskavi.exceptions import ParameterError
from riskavi.mdp import KEEP, REPAIR, MaintenanceModel, MaintParams, State, TabularModel, tabular_from_spec
from riskavi.risk import RiskSpec

ALL_KINDS = [
    RiskSpec.expectation(),
    RiskSpec.cvar(0.5),
    RiskSpec.oce(0.2, 3.0),
    RiskSpec.mean_deviation(0.3, 1.0),
    RiskSpec.mean_semideviation(0.3, 2.0),
]


def deterministic_chain():
    """0 -> 1 -> 2 -> 2 under action 0; action 1 stays put at higher cost."""
    return tabular_from_spec(
        {
            "n_states": 3,
            "n_actions": 2,
            "gamma": 0.6,
            "costs": [[1.0, 2.0], [3.0, 4.0], [0.5, 5.0]],
            "transitions": [
                [[[1, 1.0]], [[0, 1.0]]],
                [[[2, 1.0]], [[1, 1.0]]],
                [[[2, 1.0]], [[2, 1.0]]],
            ],
        }
    )


def piecewise_from_vector(J):
    net = build_eps_net(float(len(J)), 1.0)
    return PiecewiseConstantValueFn(net, np.asarray(J, float), 0.0, 1e9)


def plain_value_iteration(tab, tol=1e-13):
    """Independent expected-cost value iteration on the dense transition array."""
    P, c = tab.transition_matrix(), tab.costs
    J = np.zeros(tab.n_states)
    while True:
        new = (c + tab.gamma * P @ J).min(axis=1)
        if np.max(np.abs(new - J)) < tol:
            return new
        J = new


class TestAviConfig:
    def test_validation(self):
        with pytest.raises(ParameterError):
            AviConfig(RiskSpec.expectation(), n=0)
        with pytest.raises(ParameterError):
            AviConfig(RiskSpec.expectation(), state_dist="gaussian")
        with pytest.raises(ParameterError):
            AviConfig(RiskSpec.expectation(), fit=PolynomialFit(degree=-1))
        with pytest.raises(ParameterError):
            AviConfig.from_dict({"risk": {"kind": "expectation"}, "fit": {"kind": "spline"}})
        with pytest.raises(ParameterError):
            AviConfig.from_dict({"n": 3})

    def test_round_trip(self):
        cfg = AviConfig(RiskSpec.cvar(0.4), n=7, m=9, K=3, fit=PiecewiseConstantFit(0.5), seed=2**63)
        assert AviConfig.from_dict(cfg.to_dict()) == cfg


class TestBellmanTarget:
    def test_zero_value_gives_min_cost(self, rng):
        model = MaintenanceModel()
        J = zero_polynomial(4, model.j_max, 0.0, 30.0)
        for risk in ALL_KINDS:
            for s in (0.0, 5.0, 10.0, 29.0):
                assert bellman_target(model, risk, J, State(s), 7, rng) == min(4 * s, 30.0)
            assert bellman_target(model, risk, J, State(30.0, True), 7, rng) == 120.0

    def test_deterministic_transitions_are_exact(self, rng):
        tab = deterministic_chain()
        model = TabularModel(tab)
        J = np.array([3.0, 1.5, 7.0])
        exact = exact_bellman(tab, RiskSpec.cvar(0.7), J)
        for s in range(3):
            got = bellman_target(model, RiskSpec.cvar(0.7), piecewise_from_vector(J), model.state_of(s), 5, rng)
            assert abs(got - exact[s]) <= 1e-12

    def test_statistical_accuracy(self, tabular5):
        model = TabularModel(tabular5)
        risk = RiskSpec.cvar(0.5)
        J = np.array([2.0, 0.0, 1.0, 3.0, 0.5])
        exact = exact_bellman(tabular5, risk, J)
        hits = 0
        for seed in range(100):
            got = bellman_target(model, risk, piecewise_from_vector(J), model.state_of(2), 10**5, stream(seed, 99))
            hits += abs(got - exact[2]) <= 0.05
        assert hits >= 95

    def test_output_range(self, rng):
        model = MaintenanceModel()
        J = zero_polynomial(0, model.j_max, 0.0, 30.0)
        J.coeffs[0] = 1e6  # clipped to j_max
        for s in rng.uniform(0, 30, 20):
            t = bellman_target(model, RiskSpec.cvar(0.9), J, State(float(s)), 50, rng)
            assert 0.0 <= t <= model.c_max + model.gamma * model.j_max


class TestGreedy:
    def test_myopic_choices(self, rng):
        model = MaintenanceModel()
        J = zero_polynomial(4, model.j_max, 0.0, 30.0)
        risk = RiskSpec.expectation()
        assert greedy_action(model, risk, J, State(10.0), 100, rng) == REPAIR
        assert greedy_action(model, risk, J, State(5.0), 100, rng) == KEEP
        assert greedy_action(model, risk, J, State(30.0, True), 100, rng) == 0

    def test_greedy_policy_is_deterministic(self):
        model = MaintenanceModel()
        J = zero_polynomial(4, model.j_max, 0.0, 30.0)
        pol = GreedyPolicy(model, RiskSpec.cvar(0.5), J, m_eval=50, seed=3)
        a = pol.actions(np.array([1.0, 9.0, 1.0]), np.zeros(3, bool))
        np.testing.assert_array_equal(a, [KEEP, REPAIR, KEEP])
        assert pol.action(State(9.0)) == REPAIR

    def test_greedy_table_matches_exact(self, tabular5):
        J, pi = exact_value_iteration(tabular5, RiskSpec.expectation())
        Q = exact_scores(tabular5, RiskSpec.expectation(), J)
        clear = np.abs(Q[:, 0] - Q[:, 1]) > 0.05
        got = greedy_table(TabularModel(tabular5), RiskSpec.expectation(), piecewise_from_vector(J), 10**5, seed=1)
        np.testing.assert_array_equal(got.table[clear], pi.table[clear])


class TestDecisionBoundary:
    def test_keep_everywhere(self):
        model = MaintenanceModel(MaintParams(repair_cost=200.0))
        J = zero_polynomial(4, model.j_max, 0.0, 30.0)
        assert decision_boundary(model, RiskSpec.expectation(), J, 0.5, 20) == 30.0

    def test_myopic_boundary(self):
        # With J = 0 keep wins iff 4s <= 30.
        model = MaintenanceModel()
        J = zero_polynomial(4, model.j_max, 0.0, 30.0)
        assert decision_boundary(model, RiskSpec.cvar(0.5), J, 0.1, 20) == pytest.approx(7.5)

    def test_always_repair(self):
        model = MaintenanceModel(MaintParams(repair_cost=1e-3))
        J = zero_polynomial(4, model.j_max, 0.0, 30.0)
        J.coeffs[0] = 100.0
        J.bad_value = 300.0
        assert decision_boundary(model, RiskSpec.expectation(), J, 1.0, 20) is None


class TestRunAvi:
    def test_k_zero(self):
        model = MaintenanceModel()
        run = run_avi(model, AviConfig(RiskSpec.expectation(), K=0))
        assert len(run.iterates) == 1 and run.diagnostics == []
        assert run.final.to_dict() == initial_value_fn(model, run.config).to_dict()

    def test_determinism_and_threads(self):
        model = MaintenanceModel()
        cfg = AviConfig(RiskSpec.cvar(0.3), n=40, m=30, K=3, seed=11)
        a = run_avi(model, cfg)
        b = run_avi(model, cfg)
        c = run_avi(model, AviConfig(RiskSpec.cvar(0.3), n=40, m=30, K=3, seed=11, threads=4))
        for x, y, z in zip(a.iterates, b.iterates, c.iterates):
            np.testing.assert_array_equal(x.coeffs, y.coeffs)
            np.testing.assert_array_equal(x.coeffs, z.coeffs)
        assert json.dumps(a.to_dict()) == json.dumps(c.to_dict())
        d = run_avi(model, AviConfig(RiskSpec.cvar(0.3), n=40, m=30, K=3, seed=12))
        assert not np.array_equal(a.final.coeffs, d.final.coeffs)

    def test_iterates_within_range(self, rng):
        model = MaintenanceModel()
        run = run_avi(model, AviConfig(RiskSpec.cvar(0.8), n=30, m=20, K=6, seed=5))
        v, b = model.sample_states(1000, rng, 0.1)
        for fn in run.iterates:
            out = fn(v, b)
            assert out.min() >= 0.0 and out.max() <= model.j_max

    def test_benchmark_config_completes(self):
        run = run_avi(MaintenanceModel(), AviConfig(RiskSpec.expectation()))
        assert len(run.iterates) == 31
        assert all(np.isfinite(d.fit_residual) for d in run.diagnostics)
        assert run.final.bad_value == pytest.approx(300.0, rel=0.05)

    def test_one_piecewise_iterate_matches_exact(self, tabular5):
        model = TabularModel(tabular5)
        risk = RiskSpec.cvar(0.5)
        J0 = np.array([0.5, 1.0, 0.2, 0.8, 0.0])
        cfg = AviConfig(risk, m=10**5, K=1, fit=PiecewiseConstantFit(1.0), seed=4)
        start = PiecewiseConstantValueFn(build_eps_net(5.0, 1.0), J0, 0.0, model.j_max)
        J1 = avi_iterate(model, cfg, start, 0)
        exact = exact_bellman(tabular5, risk, J0)
        assert np.max(np.abs(J1.values - exact)) <= 0.05

    def test_serialization_round_trip(self):
        run = run_avi(MaintenanceModel(), AviConfig(RiskSpec.cvar(0.2), n=20, m=10, K=2))
        back = AviRun.from_dict(json.loads(json.dumps(run.to_dict())))
        assert back.to_dict() == run.to_dict()
        assert "wall_time" not in json.dumps(run.to_dict())


class TestPolicyEvaluation:
    def test_matches_exact_fixed_policy(self, tabular5):
        model = TabularModel(tabular5)
        risk = RiskSpec.cvar(0.5)
        pi = TabularPolicy(np.array([0, 1, 1, 0, 1]))
        exact = exact_policy_evaluation(tabular5, risk, pi)
        cfg = AviConfig(risk, m=20_000, K=40, fit=PiecewiseConstantFit(1.0), seed=2)
        fn = evaluate_policy_risk(model, risk, pi, cfg)
        assert np.max(np.abs(fn.values - exact)) <= 0.05
        J_star, _ = exact_value_iteration(tabular5, risk)
        assert np.all(fn.values >= J_star - 0.05)

    def test_expectation_matches_rollout(self, tabular5):
        model = TabularModel(tabular5)
        pi = TabularPolicy(np.array([1, 0, 1, 0, 0]))
        risk = RiskSpec.expectation()
        cfg = AviConfig(risk, m=50_000, K=40, fit=PiecewiseConstantFit(1.0), seed=8)
        value = evaluate_policy_risk(model, risk, pi, cfg)(np.array([0.5]))[0]
        mean, se = rollout_expected_cost(model, pi, State(0.5), 20_000, rng=stream(8, 77))
        assert abs(value - mean) <= 2 * se

    def test_forced_threshold_on_maintenance(self):
        model = MaintenanceModel()
        cfg = AviConfig(RiskSpec.expectation(), K=30, seed=1)
        fn = evaluate_policy_risk(model, RiskSpec.cvar(0.9), ThresholdPolicy(None), cfg)
        # Always repairing costs 30 per step with certainty.
        assert fn(np.array([0.0]))[0] == pytest.approx(75.0, abs=0.01)


class TestRollout:
    def test_always_repair_geometric(self, rng):
        model = MaintenanceModel(q_override=0.0)
        mean, se = rollout_expected_cost(model, ThresholdPolicy(None), State(0.0), 5000, rng=rng)
        assert mean == pytest.approx(75.0, abs=1e-3)
        assert se == pytest.approx(0.0, abs=1e-9)

    def test_single_deterministic_run(self, rng):
        tab = deterministic_chain()
        mean, se = rollout_expected_cost(TabularModel(tab), TabularPolicy(np.zeros(3, int)), State(0.5), 1, 40, rng)
        expected = 1.0 + 0.6 * 3.0 + sum(0.6**t * 0.5 for t in range(2, 40))
        assert mean == pytest.approx(expected, rel=1e-12)
        assert se == 0.0

    def test_standard_error_scaling(self):
        model = MaintenanceModel()
        pol = ThresholdPolicy(3.0)
        _, se1 = rollout_expected_cost(model, pol, State(0.0), 4000, rng=stream(1, 5))
        _, se2 = rollout_expected_cost(model, pol, State(0.0), 8000, rng=stream(2, 5))
        assert se1 / se2 == pytest.approx(np.sqrt(2), rel=0.15)

    def test_validation(self, rng):
        with pytest.raises(ParameterError):
            rollout_expected_cost(MaintenanceModel(), ThresholdPolicy(None), State(0.0), 0, rng=rng)


class TestExact:
    def test_self_loop_all_kinds(self):
        tab = tabular_from_spec(
            {"n_states": 1, "n_actions": 1, "gamma": 0.5, "costs": [[1.0]], "transitions": [[[[0, 1.0]]]]}
        )
        for risk in ALL_KINDS:
            J, _ = exact_value_iteration(tab, risk)
            assert J[0] == pytest.approx(2.0, abs=1e-9)

    def test_two_state_absorbing(self):
        tab = tabular_from_spec(
            {
                "n_states": 2,
                "n_actions": 1,
                "gamma": 0.9,
                "costs": [[1.0], [0.0]],
                "transitions": [[[[1, 1.0]]], [[[1, 1.0]]]],
            }
        )
        J, _ = exact_value_iteration(tab, RiskSpec.cvar(0.3))
        np.testing.assert_allclose(J, [1.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("risk", ALL_KINDS)
    def test_fixed_point_residual(self, tabular5, risk):
        tol = 1e-10
        J, _ = exact_value_iteration(tabular5, risk, tol)
        assert np.max(np.abs(exact_bellman(tabular5, risk, J) - J)) <= tol

    def test_expectation_matches_plain_iteration(self, rng):
        from riskavi.mdp import random_tabular

        for _ in range(5):
            tab = random_tabular(6, 3, 0.8, rng)
            J, _ = exact_value_iteration(tab, RiskSpec.expectation(), 1e-12)
            np.testing.assert_allclose(J, plain_value_iteration(tab), atol=1e-9)

    def test_greedy_invariant_under_shift(self, tabular5):
        risk = RiskSpec.cvar(0.6)
        J = np.array([1.0, 2.0, 0.0, 4.0, 3.0])
        Q = exact_scores(tabular5, risk, J)
        Q_shift = exact_scores(tabular5, risk, J + 5.0)
        np.testing.assert_allclose(Q_shift - Q, tabular5.gamma * 5.0, atol=1e-12)
        np.testing.assert_array_equal(Q.argmin(axis=1), Q_shift.argmin(axis=1))

    def test_monotone(self, tabular5, rng):
        for risk in (RiskSpec.cvar(0.4), RiskSpec.oce(0.1, 2.0), RiskSpec.expectation()):
            for _ in range(50):
                J1 = rng.uniform(0, 3, 5)
                J2 = J1 + rng.uniform(0, 1, 5)
                assert np.all(exact_bellman(tabular5, risk, J1) <= exact_bellman(tabular5, risk, J2) + 1e-12)

    def test_equal_inputs(self, tabular5):
        J = np.arange(5.0)
        np.testing.assert_array_equal(exact_bellman(tabular5, RiskSpec.cvar(0.5), J),
                                      exact_bellman(tabular5, RiskSpec.cvar(0.5), J.copy()))

    def test_policy_value_dominates_optimum(self, tabular5):
        risk = RiskSpec.oce(0.0, 2.0)
        J_star, pi_star = exact_value_iteration(tabular5, risk)
        np.testing.assert_allclose(exact_policy_evaluation(tabular5, risk, pi_star), J_star, atol=1e-9)
        other = TabularPolicy(1 - pi_star.table)
        assert np.all(exact_policy_evaluation(tabular5, risk, other) >= J_star - 1e-9)


def test_zero_piecewise_initial(tabular5):
    model = TabularModel(tabular5)
    fn = initial_value_fn(model, AviConfig(RiskSpec.expectation(), fit=PiecewiseConstantFit(1.0)))
    assert fn.to_dict() == zero_piecewise(build_eps_net(5.0, 1.0), model.j_max).to_dict()
