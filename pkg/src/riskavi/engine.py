"""Simulation-based approximate value iteration and its exact tabular counterpart.

Randomness is drawn from independent streams keyed by
``(seed, purpose, iteration, state index, action)``; a run therefore
produces identical numbers whether targets are computed serially or on a
thread pool.
"""

from __future__ import annotations

import logging
import math
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence, Union

import numpy as np

from riskavi.approx import (
    ValueFn,
    build_eps_net,
    fit_piecewise_constant,
    fit_polynomial,
    value_fn_from_dict,
    zero_piecewise,
    zero_polynomial,
)
from riskavi.exceptions import ConvergenceError, ParameterError
from riskavi.mdp import MdpModel, State, TabularMdp, TabularModel, horizon_for
from riskavi.risk import DiscreteDist, RiskSpec, empirical_risk, risk_exact_discrete

log = logging.getLogger(__name__)

# Stream purposes; the first element of every stream key.
_TARGETS, _STATES, _GREEDY, _POLICY, _EVAL, ROLLOUT_STREAM = range(6)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` under the master ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class PolynomialFit:
    degree: int = 4
    p_fit: float = 2.0


@dataclass(frozen=True)
class PiecewiseConstantFit:
    epsilon: float = 1.0


FitSpec = Union[PolynomialFit, PiecewiseConstantFit]


@dataclass(frozen=True)
class AviConfig:
    risk: RiskSpec
    n: int = 100
    m: int = 100
    K: int = 30
    fit: FitSpec = field(default_factory=PolynomialFit)
    state_dist: str = "uniform_mix"
    bad_prob: float = 0.05
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1 or self.K < 0:
            raise ParameterError(f"need n, m >= 1 and K >= 0, got n={self.n} m={self.m} K={self.K}")
        if self.state_dist not in ("uniform_mix", "uniform"):
            raise ParameterError(f"state_dist: unknown distribution {self.state_dist!r}")
        if not 0.0 <= self.bad_prob < 1.0:
            raise ParameterError(f"bad_prob must lie in [0, 1), got {self.bad_prob}")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")
        if isinstance(self.fit, PolynomialFit):
            if self.fit.degree < 0 or self.fit.p_fit < 1.0:
                raise ParameterError("fit: need degree >= 0 and p_fit >= 1")
        elif not self.fit.epsilon > 0.0:
            raise ParameterError("fit.epsilon must be > 0")

    def to_dict(self) -> dict[str, Any]:
        if isinstance(self.fit, PolynomialFit):
            fit = {"kind": "polynomial", "degree": self.fit.degree, "p_fit": self.fit.p_fit}
        else:
            fit = {"kind": "piecewise_constant", "epsilon": self.fit.epsilon}
        return {
            "risk": self.risk.to_dict(),
            "n": self.n,
            "m": self.m,
            "K": self.K,
            "fit": fit,
            "state_dist": self.state_dist,
            "bad_prob": self.bad_prob,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AviConfig:
        data = dict(data)
        data.pop("threads", None)
        fit = dict(data.pop("fit", {"kind": "polynomial"}))
        kind = fit.pop("kind", "polynomial")
        if kind == "polynomial":
            fit_spec: FitSpec = PolynomialFit(int(fit.get("degree", 4)), float(fit.get("p_fit", 2.0)))
        elif kind == "piecewise_constant":
            fit_spec = PiecewiseConstantFit(float(fit.get("epsilon", 1.0)))
        else:
            raise ParameterError(f"fit.kind: unknown family {kind!r}")
        if "risk" not in data:
            raise ParameterError("risk is required")
        risk = RiskSpec.from_dict(data.pop("risk"))
        unknown = set(data) - {"n", "m", "K", "state_dist", "bad_prob", "seed"}
        if unknown:
            raise ParameterError(f"unknown solver fields: {sorted(unknown)}")
        return cls(
            risk=risk,
            n=int(data.get("n", 100)),
            m=int(data.get("m", 100)),
            K=int(data.get("K", 30)),
            fit=fit_spec,
            state_dist=str(data.get("state_dist", "uniform_mix")),
            bad_prob=float(data.get("bad_prob", 0.05)),
            seed=int(data.get("seed", 0)),
        )


class Policy(ABC):
    @abstractmethod
    def actions(self, values: np.ndarray, bad: np.ndarray) -> np.ndarray:
        """Action index for each state in the batch."""

    def action(self, state: State) -> int:
        return int(self.actions(np.array([state.value]), np.array([state.is_bad]))[0])


@dataclass
class ThresholdPolicy(Policy):
    """``below_action`` when s <= boundary, else ``above_action``.

    A boundary of None means ``above_action`` everywhere. The bad state gets
    ``below_action``; in the maintenance model both actions coincide there.
    """

    boundary: float | None
    below_action: int = 0
    above_action: int = 1

    def actions(self, values, bad):
        values = np.asarray(values, dtype=float)
        if self.boundary is None:
            out = np.full(values.shape, self.above_action)
        else:
            out = np.where(values <= self.boundary, self.below_action, self.above_action)
        return np.where(np.asarray(bad, dtype=bool), self.below_action, out)


@dataclass
class TabularPolicy(Policy):
    """One action per tabular state; continuous values index by floor."""

    table: np.ndarray

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=int)

    def actions(self, values, bad):
        idx = np.clip(np.floor(np.asarray(values, dtype=float)).astype(int), 0, self.table.size - 1)
        return self.table[idx]


@dataclass
class GreedyPolicy(Policy):
    """Greedy w.r.t. a value function, re-estimating the risk at each query.

    Each distinct state owns a stream keyed by its bit pattern, so repeated
    queries at the same state return the same action.
    """

    model: MdpModel
    risk: RiskSpec
    value_fn: ValueFn
    m_eval: int = 10_000
    seed: int = 0

    def actions(self, values, bad):
        values = np.asarray(values, dtype=float)
        bad = np.broadcast_to(np.asarray(bad, dtype=bool), values.shape)
        out = np.empty(values.shape, dtype=int)
        for pos, (v, b) in enumerate(zip(values.ravel(), bad.ravel())):
            bits = int(np.float64(v).view(np.uint64))
            rngs = [stream(self.seed, _POLICY, bits, int(b), a) for a in range(self.model.n_actions)]
            out.flat[pos] = greedy_action(self.model, self.risk, self.value_fn, State(v, bool(b)), self.m_eval, rngs)
        return out


@dataclass
class IterationDiag:
    k: int
    fit_residual: float
    n_points: int
    wall_time: float = 0.0


@dataclass
class AviRun:
    """Iterates J_0..J_K and per-iteration diagnostics.

    Wall times are kept in memory but left out of the serialized form so that
    equal seeds give byte-identical documents.
    """

    iterates: list[ValueFn]
    diagnostics: list[IterationDiag]
    config: AviConfig | None = None

    @property
    def final(self) -> ValueFn:
        return self.iterates[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": None if self.config is None else self.config.to_dict(),
            "iterates": [fn.to_dict() for fn in self.iterates],
            "diagnostics": [
                {"k": d.k, "fit_residual": d.fit_residual, "n_points": d.n_points}
                for d in self.diagnostics
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AviRun:
        config = None if data.get("config") is None else AviConfig.from_dict(data["config"])
        return cls(
            [value_fn_from_dict(d) for d in data["iterates"]],
            [IterationDiag(int(d["k"]), float(d["fit_residual"]), int(d["n_points"])) for d in data["diagnostics"]],
            config,
        )


RngArg = Union[np.random.Generator, Sequence[np.random.Generator]]


def _per_action(rng: RngArg, n_actions: int) -> Sequence[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return [rng] * n_actions
    if len(rng) != n_actions:
        raise ParameterError(f"need one generator per action ({n_actions}), got {len(rng)}")
    return rng


def action_scores(
    model: MdpModel,
    risk: RiskSpec,
    J: ValueFn,
    state: State,
    m: int,
    rng: RngArg,
    actions: Sequence[int] | None = None,
) -> np.ndarray:
    """c(s, a) + gamma * rho_hat_m(J(Y)) for each requested action (all by default)."""
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    rngs = _per_action(rng, model.n_actions)
    actions = range(model.n_actions) if actions is None else actions
    scores = np.empty(len(actions))
    for pos, a in enumerate(actions):
        nv, nb = model.sample_next_many(state, a, m, rngs[a])
        cont = empirical_risk(J.evaluate(nv, nb), risk)
        scores[pos] = model.cost(state, a) + model.gamma * cont
    return scores


def bellman_target(
    model: MdpModel, risk: RiskSpec, J: ValueFn, state: State, m: int, rng: RngArg
) -> float:
    """Empirical risk-aware Bellman update at one state."""
    return float(action_scores(model, risk, J, state, m, rng).min())


def greedy_action(
    model: MdpModel, risk: RiskSpec, J: ValueFn, state: State, m_eval: int, rng: RngArg
) -> int:
    """Argmin action of the empirical Bellman scores; ties go to the lowest index."""
    return int(np.argmin(action_scores(model, risk, J, state, m_eval, rng)))


def initial_value_fn(model: MdpModel, config: AviConfig) -> ValueFn:
    if isinstance(config.fit, PolynomialFit):
        return zero_polynomial(config.fit.degree, model.j_max, model.low, model.high)
    net = build_eps_net(model.high, config.fit.epsilon, model.low)
    return zero_piecewise(net, model.j_max)


def _sample_points(model: MdpModel, config: AviConfig, k: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(config.fit, PiecewiseConstantFit):
        net = build_eps_net(model.high, config.fit.epsilon, model.low)
        values = net.representatives
        bad = np.zeros(values.size, bool)
        if model.has_bad_state:
            values = np.append(values, model.high)
            bad = np.append(bad, True)
        return values, bad
    bad_prob = config.bad_prob if config.state_dist == "uniform_mix" else 0.0
    return model.sample_states(config.n, stream(config.seed, _STATES, k), bad_prob)


def _iterate(
    model: MdpModel,
    config: AviConfig,
    J: ValueFn,
    k: int,
    policy: Policy | None = None,
    purpose: int = _TARGETS,
) -> tuple[ValueFn, np.ndarray, np.ndarray, np.ndarray]:
    values, bad = _sample_points(model, config, k)
    forced = None if policy is None else policy.actions(values, bad)

    def target(i: int) -> float:
        rngs = [stream(config.seed, purpose, k, i, a) for a in range(model.n_actions)]
        state = State(float(values[i]), bool(bad[i]))
        if forced is None:
            return float(action_scores(model, config.risk, J, state, config.m, rngs).min())
        return float(action_scores(model, config.risk, J, state, config.m, rngs, [int(forced[i])])[0])

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            targets = np.array(list(pool.map(target, range(values.size))))
    else:
        targets = np.array([target(i) for i in range(values.size)])

    if isinstance(config.fit, PiecewiseConstantFit):
        net = build_eps_net(model.high, config.fit.epsilon, model.low)
        bad_target = float(targets[bad].mean()) if bad.any() else 0.0
        fn: ValueFn = fit_piecewise_constant(net, targets[~bad], bad_target, j_max=model.j_max)
    else:
        fn = fit_polynomial(
            values,
            targets,
            config.fit.degree,
            bad=bad,
            p_fit=config.fit.p_fit,
            low=model.low,
            high=model.high,
            j_max=model.j_max,
            bad_default=J.bad_value,
        )
    return fn, values, bad, targets


def avi_iterate(model: MdpModel, config: AviConfig, J_k: ValueFn, k: int) -> ValueFn:
    """One sweep: sample states, estimate the Bellman update at each, fit."""
    return _iterate(model, config, J_k, k)[0]


def _run(model: MdpModel, config: AviConfig, policy: Policy | None, purpose: int) -> AviRun:
    J = initial_value_fn(model, config)
    run = AviRun([J], [], config)
    for k in range(config.K):
        start = time.perf_counter()
        J, values, bad, targets = _iterate(model, config, J, k, policy, purpose)
        resid = J.evaluate(values, bad) - targets
        diag = IterationDiag(k, float(np.sqrt(np.mean(resid**2))), int(values.size), time.perf_counter() - start)
        log.debug("iteration %d: rms residual %.6g (%.3fs)", k, diag.fit_residual, diag.wall_time)
        run.iterates.append(J)
        run.diagnostics.append(diag)
    return run


def run_avi(model: MdpModel, config: AviConfig) -> AviRun:
    """K iterations of approximate value iteration from J_0 = 0."""
    return _run(model, config, None, _TARGETS)


def evaluate_policy_run(model: MdpModel, risk: RiskSpec, policy: Policy, config: AviConfig) -> AviRun:
    return _run(model, replace(config, risk=risk), policy, _EVAL)


def evaluate_policy_risk(model: MdpModel, risk: RiskSpec, policy: Policy, config: AviConfig) -> ValueFn:
    """Approximate recursive-risk value of a fixed policy (AVI with forced actions)."""
    return evaluate_policy_run(model, risk, policy, config).final


def grid_points(high: float, grid_step: float, low: float = 0.0) -> np.ndarray:
    if not grid_step > 0.0:
        raise ParameterError(f"grid_step must be > 0, got {grid_step}")
    count = math.floor(round((high - low) / grid_step, 9)) + 1
    return np.round(low + grid_step * np.arange(count), 12)


def decision_boundary(
    model: MdpModel,
    risk: RiskSpec,
    J: ValueFn,
    grid_step: float = 0.1,
    m_eval: int = 10_000,
    seed: int = 0,
    keep_action: int = 0,
) -> float | None:
    """Largest grid state whose greedy action is ``keep_action``; None if there is none."""
    best = None
    for i, s in enumerate(grid_points(model.high, grid_step, model.low)):
        rngs = [stream(seed, _GREEDY, i, a) for a in range(model.n_actions)]
        if greedy_action(model, risk, J, State(float(s)), m_eval, rngs) == keep_action:
            best = float(s)
    return best


def greedy_table(model: TabularModel, risk: RiskSpec, J: ValueFn, m_eval: int = 10_000, seed: int = 0) -> TabularPolicy:
    """Greedy action at every state of an embedded tabular model."""
    actions = [
        greedy_action(model, risk, J, model.state_of(i), m_eval,
                      [stream(seed, _GREEDY, i, a) for a in range(model.n_actions)])
        for i in range(model.tabular.n_states)
    ]
    return TabularPolicy(np.array(actions))


def rollout_expected_cost(
    model: MdpModel,
    policy: Policy,
    s0: State,
    n_runs: int,
    horizon: int | None = None,
    rng: np.random.Generator | None = None,
    tol: float = 1e-3,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the truncated discounted cost."""
    if n_runs < 1:
        raise ParameterError(f"n_runs must be >= 1, got {n_runs}")
    rng = np.random.default_rng() if rng is None else rng
    horizon = horizon_for(model.gamma, model.j_max, tol) if horizon is None else horizon
    values = np.full(n_runs, float(s0.value))
    bad = np.full(n_runs, bool(s0.is_bad))
    total = np.zeros(n_runs)
    discount = 1.0
    for _ in range(horizon):
        actions = policy.actions(values, bad)
        total += discount * model.cost_batch(values, bad, actions)
        values, bad = model.sample_next_batch(values, bad, actions, rng)
        discount *= model.gamma
    se = float(total.std(ddof=1) / math.sqrt(n_runs)) if n_runs > 1 else 0.0
    return float(total.mean()), se


def exact_scores(tabular: TabularMdp, risk: RiskSpec, J: np.ndarray) -> np.ndarray:
    """Q[s, a] = c(s, a) + gamma * rho(J(next state)) computed exactly."""
    J = np.asarray(J, dtype=float)
    Q = np.empty((tabular.n_states, tabular.n_actions))
    for s, row in enumerate(tabular.transitions):
        for a, dist in enumerate(row):
            cont = risk_exact_discrete(DiscreteDist(J[dist.values.astype(int)], dist.probs), risk)
            Q[s, a] = tabular.costs[s, a] + tabular.gamma * cont
    return Q


def exact_bellman(tabular: TabularMdp, risk: RiskSpec, J: np.ndarray) -> np.ndarray:
    return exact_scores(tabular, risk, J).min(axis=1)


def exact_policy_bellman(
    tabular: TabularMdp, risk: RiskSpec, J: np.ndarray, actions: np.ndarray
) -> np.ndarray:
    Q = exact_scores(tabular, risk, J)
    return Q[np.arange(tabular.n_states), np.asarray(actions, dtype=int)]


def _fixed_point(step, n_states: int, gamma: float, tol: float, max_iter: int) -> np.ndarray:
    if not tol > 0.0:
        raise ParameterError(f"tol must be > 0, got {tol}")
    stop = tol * (1.0 - gamma) / (2.0 * gamma)
    J = np.zeros(n_states)
    for _ in range(max_iter):
        new = step(J)
        if np.max(np.abs(new - J)) <= stop:
            return new
        J = new
    raise ConvergenceError(f"exact value iteration did not reach tol {tol} in {max_iter} sweeps")


def exact_value_iteration(
    tabular: TabularMdp, risk: RiskSpec, tol: float = 1e-10, max_iter: int = 100_000
) -> tuple[np.ndarray, TabularPolicy]:
    """Fixed point of the exact risk-aware Bellman operator and its greedy policy."""
    J = _fixed_point(lambda v: exact_bellman(tabular, risk, v), tabular.n_states, tabular.gamma, tol, max_iter)
    policy = TabularPolicy(np.argmin(exact_scores(tabular, risk, J), axis=1))
    return J, policy


def exact_policy_evaluation(
    tabular: TabularMdp, risk: RiskSpec, policy: TabularPolicy, tol: float = 1e-10, max_iter: int = 100_000
) -> np.ndarray:
    return _fixed_point(
        lambda v: exact_policy_bellman(tabular, risk, v, policy.table),
        tabular.n_states,
        tabular.gamma,
        tol,
        max_iter,
    )
