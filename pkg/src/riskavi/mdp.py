"""MDP models: a batch sampling interface, the maintenance benchmark and tabular MDPs.

States are passed around as a pair of arrays ``(values, bad)``: ``values``
holds the position in the one-dimensional state interval and ``bad`` flags
the absorbing failure state, which is kept apart from the continuous range.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from riskavi.exceptions import InputError, ParameterError
from riskavi.risk import DiscreteDist

KEEP = 0
REPAIR = 1
ACTION_NAMES = ("K", "R")

# Redraws allowed for an out-of-range next state before clamping to s_max.
TRUNCATION_REDRAWS = 100


@dataclass(frozen=True)
class State:
    value: float
    is_bad: bool = False


MaintState = State


class MdpModel(ABC):
    """Continuous one-dimensional state, finitely many actions.

    Subclasses set ``n_actions``, ``gamma``, ``c_max``, ``low``, ``high`` and
    ``has_bad_state`` and implement the two batch methods.
    """

    n_actions: int
    gamma: float
    c_max: float
    low: float
    high: float
    has_bad_state: bool = False

    @property
    def j_max(self) -> float:
        return self.c_max / (1.0 - self.gamma)

    @abstractmethod
    def cost_batch(self, values: np.ndarray, bad: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Costs c(s, a) for aligned arrays of states and actions."""

    @abstractmethod
    def sample_next_batch(
        self,
        values: np.ndarray,
        bad: np.ndarray,
        actions: np.ndarray,
        rng: np.random.Generator,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw one next state per element of the aligned input arrays."""

    def sample_states(
        self, n: int, rng: np.random.Generator, bad_prob: float = 0.0
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw n states: the bad state with prob ``bad_prob``, else uniform on the range."""
        if n < 1:
            raise ParameterError(f"n must be >= 1, got {n}")
        bad = rng.random(n) < bad_prob if self.has_bad_state and bad_prob > 0 else np.zeros(n, bool)
        values = self.low + (self.high - self.low) * rng.random(n)
        values[bad] = self.high
        return values, bad

    def cost(self, state: State, action: int) -> float:
        return float(self.cost_batch(np.array([state.value]), np.array([state.is_bad]), np.array([action]))[0])

    def sample_next(self, state: State, action: int, rng: np.random.Generator) -> State:
        v, b = self.sample_next_batch(
            np.array([state.value]), np.array([state.is_bad]), np.array([action]), rng
        )
        return State(float(v[0]), bool(b[0]))

    def sample_next_many(
        self, state: State, action: int, m: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """m i.i.d. next states from a single (state, action) pair.

        Callers treat the result as a multiset; subclasses may return the
        draws in any order.
        """
        return self.sample_next_batch(
            np.full(m, state.value), np.full(m, state.is_bad), np.full(m, action), rng
        )

    def check_state(self, state: State) -> None:
        if state.is_bad:
            if not self.has_bad_state:
                raise InputError("this model has no bad state")
            return
        if not self.low <= state.value <= self.high:
            raise InputError(f"state {state.value} outside [{self.low}, {self.high}]")


@dataclass(frozen=True)
class MaintParams:
    gamma: float = 0.6
    beta: float = 0.5
    q: float = 0.2
    repair_cost: float = 30.0
    bad_cost: float = 120.0
    s_max: float = 30.0
    op_slope: float = 4.0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.q < 1.0:
            raise ParameterError(f"q must lie in (0, 1), got {self.q}")
        for name in ("beta", "repair_cost", "bad_cost", "s_max", "op_slope"):
            if not getattr(self, name) > 0.0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MaintParams:
        fields = set(cls.__dataclass_fields__)
        unknown = set(data) - fields
        if unknown:
            raise ParameterError(f"unknown maintenance fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class MaintenanceModel(MdpModel):
    """Equipment maintenance: keep (K, action 0) or repair (R, action 1).

    ``q_override`` replaces the breakdown probability and, unlike
    MaintParams, accepts 0 so the bad state can be made unreachable.
    """

    n_actions = 2
    has_bad_state = True

    def __init__(self, params: MaintParams | None = None, *, q_override: float | None = None):
        self.params = params or MaintParams()
        self.q = self.params.q if q_override is None else q_override
        if not 0.0 <= self.q < 1.0:
            raise ParameterError(f"q must lie in [0, 1), got {self.q}")
        self.gamma = self.params.gamma
        self.low = 0.0
        self.high = self.params.s_max
        p = self.params
        self.c_max = max(p.bad_cost, p.repair_cost, p.op_slope * p.s_max)

    def cost_batch(self, values, bad, actions):
        p = self.params
        values, bad, actions = np.broadcast_arrays(values, bad, actions)
        cost = np.where(actions == KEEP, p.op_slope * values, p.repair_cost)
        return np.where(bad, p.bad_cost, cost).astype(float)

    def _exponential(self, size: int, rng: np.random.Generator) -> np.ndarray:
        # Inverse CDF; 1 - U lies in (0, 1] so the log is finite.
        return -np.log1p(-rng.random(size)) / self.params.beta

    def sample_next_batch(self, values, bad, actions, rng):
        values, bad, actions = (np.array(a) for a in np.broadcast_arrays(values, bad, actions))
        values = values.astype(float)
        bad = bad.astype(bool)
        n = values.size
        breaks = rng.random(n) < self.q
        jump = self._exponential(n, rng)
        keep = actions == KEEP
        nxt = np.where(keep, values + jump, jump)
        new_bad = bad | (keep & breaks)
        s_max = self.params.s_max
        over = (nxt > s_max) & ~new_bad
        for _ in range(TRUNCATION_REDRAWS):
            if not over.any():
                break
            nxt[over] = self._exponential(int(over.sum()), rng)
            over &= nxt > s_max
        nxt[over] = s_max
        nxt[new_bad] = s_max
        return nxt, new_bad


def maint_cost(state: State, action: int, params: MaintParams | None = None) -> float:
    return MaintenanceModel(params).cost(state, action)


def maint_sample_next(
    state: State, action: int, params: MaintParams | None, rng: np.random.Generator
) -> State:
    return MaintenanceModel(params).sample_next(state, action, rng)


def sample_state_dist(
    params: MaintParams | None,
    n: int,
    rng: np.random.Generator,
    kind: str = "uniform_mix",
    bad_prob: float = 0.05,
) -> list[State]:
    """n states from the training distribution: uniform range mixed with the bad state."""
    if kind not in ("uniform_mix", "uniform"):
        raise ParameterError(f"unknown state distribution {kind!r}")
    model = MaintenanceModel(params)
    values, bad = model.sample_states(n, rng, bad_prob if kind == "uniform_mix" else 0.0)
    return [State(float(v), bool(b)) for v, b in zip(values, bad)]


@dataclass
class TabularMdp:
    """Finite MDP with explicit costs and per-(state, action) transition laws.

    ``transitions[s][a]`` is a DiscreteDist whose atom values are next-state
    indices.
    """

    n_states: int
    n_actions: int
    gamma: float
    costs: np.ndarray
    transitions: list[list[DiscreteDist]]

    def __post_init__(self) -> None:
        if self.n_states < 1 or self.n_actions < 1:
            raise InputError("n_states and n_actions must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        self.costs = np.asarray(self.costs, dtype=float)
        if self.costs.shape != (self.n_states, self.n_actions):
            raise InputError(f"costs must have shape ({self.n_states}, {self.n_actions})")
        if np.any(self.costs < 0.0) or not np.all(np.isfinite(self.costs)):
            raise InputError("costs must be finite and nonnegative")
        if len(self.transitions) != self.n_states or any(
            len(row) != self.n_actions for row in self.transitions
        ):
            raise InputError("transitions must be indexed [state][action]")
        for row in self.transitions:
            for dist in row:
                idx = dist.values
                if np.any(idx != np.round(idx)) or idx.min() < 0 or idx.max() >= self.n_states:
                    raise InputError("transition atoms must be valid state indices")

    @property
    def c_max(self) -> float:
        return float(self.costs.max())

    @property
    def j_max(self) -> float:
        return self.c_max / (1.0 - self.gamma)

    def transition_matrix(self) -> np.ndarray:
        """Dense P[s, a, s']."""
        P = np.zeros((self.n_states, self.n_actions, self.n_states))
        for s, row in enumerate(self.transitions):
            for a, dist in enumerate(row):
                np.add.at(P[s, a], dist.values.astype(int), dist.probs)
        return P

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "costs": self.costs.tolist(),
            "transitions": [
                [[[int(v), float(p)] for v, p in zip(d.values, d.probs)] for d in row]
                for row in self.transitions
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TabularMdp:
        return tabular_from_spec(data)

    @classmethod
    def load(cls, path: str | Path) -> TabularMdp:
        return tabular_from_spec(json.loads(Path(path).read_text(encoding="utf-8")))


def tabular_from_spec(spec: dict[str, Any]) -> TabularMdp:
    """Build and validate a TabularMdp from its JSON-shaped dictionary."""
    try:
        n_states = int(spec["n_states"])
        n_actions = int(spec["n_actions"])
        gamma = float(spec["gamma"])
        costs = np.array(spec["costs"], dtype=float)
        raw = spec["transitions"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed tabular MDP: {exc}") from None
    transitions = []
    for s, row in enumerate(raw):
        dists = []
        for a, atoms in enumerate(row):
            try:
                dists.append(DiscreteDist.from_pairs([(float(v), float(p)) for v, p in atoms]))
            except InputError as exc:
                raise InputError(f"transition ({s}, {a}): {exc}") from None
        transitions.append(dists)
    return TabularMdp(n_states, n_actions, gamma, costs, transitions)


def random_tabular(
    n_states: int,
    n_actions: int,
    gamma: float,
    rng: np.random.Generator,
    support: int | None = None,
    cost_scale: float = 1.0,
) -> TabularMdp:
    """Random instance: uniform costs, Dirichlet transitions on ``support`` next states."""
    support = n_states if support is None else min(support, n_states)
    costs = cost_scale * rng.random((n_states, n_actions))
    transitions = []
    for _ in range(n_states):
        row = []
        for _ in range(n_actions):
            nxt = np.sort(rng.choice(n_states, size=support, replace=False))
            probs = rng.dirichlet(np.ones(support))
            probs = np.maximum(probs, 1e-3)
            probs /= probs.sum()
            row.append(DiscreteDist(nxt.astype(float), probs))
        transitions.append(row)
    return TabularMdp(n_states, n_actions, gamma, costs, transitions)


class TabularModel(MdpModel):
    """A TabularMdp embedded on [0, n_states]: state i occupies the cell [i, i + 1).

    Sampled next states land on cell midpoints i + 0.5, so a piecewise-constant
    function on the unit-width net represents any tabular value vector exactly.
    """

    has_bad_state = False

    def __init__(self, tabular: TabularMdp):
        self.tabular = tabular
        self.n_actions = tabular.n_actions
        self.gamma = tabular.gamma
        self.c_max = tabular.c_max
        self.low = 0.0
        self.high = float(tabular.n_states)
        self._cdf = np.zeros((tabular.n_states, tabular.n_actions), dtype=object)
        for s, row in enumerate(tabular.transitions):
            for a, dist in enumerate(row):
                self._cdf[s, a] = (np.cumsum(dist.probs), dist.values.astype(int))

    def index(self, values: np.ndarray) -> np.ndarray:
        return np.clip(np.floor(values).astype(int), 0, self.tabular.n_states - 1)

    def cost_batch(self, values, bad, actions):
        values, actions = np.broadcast_arrays(values, actions)
        return self.tabular.costs[self.index(values), actions.astype(int)]

    def sample_next_batch(self, values, bad, actions, rng):
        values, actions = np.broadcast_arrays(values, actions)
        idx = self.index(values).ravel()
        acts = actions.astype(int).ravel()
        u = rng.random(idx.size)
        out = np.empty(idx.size)
        pairs = idx * self.n_actions + acts
        for pair in np.unique(pairs):
            sel = pairs == pair
            cdf, targets = self._cdf[pair // self.n_actions, pair % self.n_actions]
            pos = np.searchsorted(cdf, u[sel] * cdf[-1], side="right")
            out[sel] = targets[np.minimum(pos, targets.size - 1)] + 0.5
        return out.reshape(values.shape), np.zeros(values.shape, dtype=bool)

    def sample_next_many(self, state, action, m, rng):
        cdf, targets = self._cdf[int(self.index(np.array(state.value))), action]
        counts = rng.multinomial(m, np.diff(cdf, prepend=0.0) / cdf[-1])
        return np.repeat(targets + 0.5, counts), np.zeros(m, dtype=bool)

    def state_of(self, index: int) -> State:
        return State(index + 0.5)


def horizon_for(gamma: float, j_max: float, tol: float = 1e-3) -> int:
    """Smallest H with gamma^H * j_max <= tol."""
    if not (0.0 < gamma < 1.0 and tol > 0.0 and j_max > 0.0):
        raise ParameterError("need 0 < gamma < 1, tol > 0, j_max > 0")
    if j_max <= tol:
        return 1
    return max(1, math.ceil(math.log(tol / j_max) / math.log(gamma)))
