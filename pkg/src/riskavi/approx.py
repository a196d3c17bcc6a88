"""Function families for the fitting step: polynomials and piecewise constants.

Every fitted function is clipped to [0, j_max] on evaluation and carries a
separate scalar for the absorbing bad state.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

import numpy as np

from riskavi.exceptions import InputError, ParameterError
from riskavi.mdp import State

RIDGE = 1e-10
IRLS_MAX_ITER = 100
IRLS_WEIGHT_FLOOR = 1e-8
IRLS_TOL = 1e-9
REFINE_STEPS = 3


@dataclass(frozen=True)
class EpsNet:
    """Uniform partition of [low, high] into n cells with midpoint representatives."""

    low: float
    high: float
    n: int

    @property
    def width(self) -> float:
        return (self.high - self.low) / self.n

    @property
    def epsilon(self) -> float:
        """Cell diameter."""
        return self.width

    @property
    def representatives(self) -> np.ndarray:
        return self.low + self.width * (np.arange(self.n) + 0.5)

    @property
    def edges(self) -> np.ndarray:
        return self.low + self.width * np.arange(self.n + 1)

    def cell_index(self, values: np.ndarray) -> np.ndarray:
        idx = np.floor((np.asarray(values, dtype=float) - self.low) / self.width).astype(int)
        return np.clip(idx, 0, self.n - 1)


def build_eps_net(s_max: float, epsilon: float, low: float = 0.0) -> EpsNet:
    """Net of ceil((s_max - low) / epsilon) equal cells, each of diameter <= epsilon."""
    span = s_max - low
    if not epsilon > 0.0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    if not span > 0.0:
        raise ParameterError("state range must have positive length")
    if epsilon > span:
        raise ParameterError(f"epsilon {epsilon} exceeds the state range {span}")
    # Guard against 30 / 0.1 = 300.00000000000006 style round-up.
    n = math.ceil(round(span / epsilon, 9))
    return EpsNet(low, s_max, n)


class ValueFn(ABC):
    """A risk-to-go approximation on the state interval plus the bad state."""

    j_max: float
    bad_value: float

    @abstractmethod
    def _raw(self, values: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def to_dict(self) -> dict[str, Any]: ...

    def evaluate(self, values: Any, bad: Any = None) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        out = np.clip(self._raw(values), 0.0, self.j_max)
        if bad is not None:
            bad = np.broadcast_to(np.asarray(bad, dtype=bool), values.shape)
            out = np.where(bad, min(max(self.bad_value, 0.0), self.j_max), out)
        return out

    __call__ = evaluate


@dataclass
class PolynomialValueFn(ValueFn):
    """Polynomial in the normalized state (s - low) / (high - low)."""

    coeffs: np.ndarray
    bad_value: float
    j_max: float
    low: float
    high: float

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=float)

    def _raw(self, values):
        x = (values - self.low) / (self.high - self.low)
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def to_dict(self):
        return {
            "variant": "polynomial",
            "coeffs": self.coeffs.tolist(),
            "domain": [self.low, self.high],
            "bad_value": self.bad_value,
            "j_max": self.j_max,
        }


@dataclass
class PiecewiseConstantValueFn(ValueFn):
    net: EpsNet
    values: np.ndarray
    bad_value: float
    j_max: float

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.net.n,):
            raise InputError(f"need {self.net.n} cell values, got {self.values.shape}")

    def _raw(self, values):
        return self.values[self.net.cell_index(values)]

    def to_dict(self):
        return {
            "variant": "piecewise_constant",
            "net": self.net.representatives.tolist(),
            "domain": [self.net.low, self.net.high],
            "values": self.values.tolist(),
            "bad_value": self.bad_value,
            "j_max": self.j_max,
        }


def value_fn_from_dict(data: dict[str, Any]) -> ValueFn:
    try:
        variant = data["variant"]
        low, high = (float(x) for x in data["domain"])
        if variant == "polynomial":
            return PolynomialValueFn(
                np.array(data["coeffs"], dtype=float),
                float(data["bad_value"]),
                float(data["j_max"]),
                low,
                high,
            )
        if variant == "piecewise_constant":
            net = EpsNet(low, high, len(data["net"]))
            return PiecewiseConstantValueFn(
                net, np.array(data["values"], dtype=float), float(data["bad_value"]), float(data["j_max"])
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed value function: {exc}") from None
    raise InputError(f"unknown value function variant {variant!r}")


def zero_polynomial(degree: int, j_max: float, low: float, high: float) -> PolynomialValueFn:
    return PolynomialValueFn(np.zeros(degree + 1), 0.0, j_max, low, high)


def zero_piecewise(net: EpsNet, j_max: float) -> PiecewiseConstantValueFn:
    return PiecewiseConstantValueFn(net, np.zeros(net.n), 0.0, j_max)


def _vandermonde(x: np.ndarray, degree: int) -> np.ndarray:
    return np.vander(x, degree + 1, increasing=True)


def _solve_normal(X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Normal-equation solve with diagonal jitter, refined toward the unjittered solution."""
    Xw = X if w is None else X * w[:, None]
    gram = Xw.T @ X
    rhs = Xw.T @ y
    jittered = gram.copy()
    jittered[np.diag_indices_from(jittered)] += RIDGE
    coeffs = np.linalg.solve(jittered, rhs)
    for _ in range(REFINE_STEPS):
        coeffs = coeffs + np.linalg.solve(jittered, rhs - gram @ coeffs)
    return coeffs


def _irls(X: np.ndarray, y: np.ndarray, p_fit: float) -> np.ndarray:
    coeffs = _solve_normal(X, y)
    for _ in range(IRLS_MAX_ITER):
        resid = np.abs(y - X @ coeffs)
        w = np.maximum(resid, IRLS_WEIGHT_FLOOR) ** (p_fit - 2.0)
        new = _solve_normal(X, y, w)
        done = np.max(np.abs(new - coeffs)) < IRLS_TOL
        coeffs = new
        if done:
            break
    return coeffs


def fit_polynomial(
    values: Any,
    targets: Any,
    degree: int,
    *,
    bad: Any = None,
    p_fit: float = 2.0,
    low: float = 0.0,
    high: float,
    j_max: float,
    bad_default: float = 0.0,
) -> PolynomialValueFn:
    """Least-|.|^p polynomial fit on the normalized state.

    Bad-state points are excluded from the polynomial; their targets are
    averaged into ``bad_value``, which falls back to ``bad_default`` when no
    bad point is present.
    """
    values = np.asarray(values, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    if values.shape != targets.shape:
        raise InputError("values and targets must have the same length")
    if not np.all(np.isfinite(targets)):
        raise InputError("non-finite target")
    if degree < 0:
        raise ParameterError(f"degree must be >= 0, got {degree}")
    if p_fit < 1.0:
        raise ParameterError(f"p_fit must be >= 1, got {p_fit}")
    bad = np.zeros(values.size, bool) if bad is None else np.asarray(bad, dtype=bool).ravel()
    good = ~bad
    if good.sum() < degree + 1:
        raise InputError(f"{good.sum()} non-bad points cannot determine {degree + 1} coefficients")
    x = (values[good] - low) / (high - low)
    X = _vandermonde(x, degree)
    y = targets[good]
    coeffs = _solve_normal(X, y) if p_fit == 2.0 else _irls(X, y, p_fit)
    bad_value = float(targets[bad].mean()) if bad.any() else bad_default
    return PolynomialValueFn(coeffs, bad_value, j_max, low, high)


def fit_piecewise_constant(
    net: EpsNet, targets: Any, bad_target: float = 0.0, *, j_max: float
) -> PiecewiseConstantValueFn:
    targets = np.asarray(targets, dtype=float).ravel()
    if targets.size != net.n:
        raise InputError(f"need one target per representative ({net.n}), got {targets.size}")
    if not np.all(np.isfinite(targets)):
        raise InputError("non-finite target")
    return PiecewiseConstantValueFn(net, targets, float(bad_target), j_max)


def eval_value(fn: ValueFn, state: State) -> float:
    """Evaluate at one state; non-bad states must lie inside the fitted domain."""
    if state.is_bad:
        return float(fn.evaluate(np.array([0.0]), np.array([True]))[0])
    low, high = (fn.low, fn.high) if isinstance(fn, PolynomialValueFn) else (fn.net.low, fn.net.high)
    if not low <= state.value <= high:
        raise InputError(f"state {state.value} outside [{low}, {high}]")
    return float(fn.evaluate(np.array([state.value]))[0])
