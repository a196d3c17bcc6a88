"""One-step coherent risk measures.

Empirical estimators operate on a finite sample of continuation values and
exact evaluators operate on finite-support distributions. Both conventions
treat larger values as worse (costs).

The optimized certainty equivalent uses the convex cost-side utility
``u(x) = beta2 * max(x, 0) - beta1 * max(-x, 0)`` with
``0 <= beta1 < 1 < beta2``; choosing ``beta1 = 0`` and
``beta2 = 1 / (1 - alpha)`` recovers CVaR at level ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from riskavi.exceptions import InputError, ParameterError


class RiskKind(str, Enum):
    EXPECTATION = "expectation"
    MEAN_DEVIATION = "mean_deviation"
    MEAN_SEMIDEVIATION = "mean_semideviation"
    OCE = "oce"
    CVAR = "cvar"


@dataclass(frozen=True)
class RiskSpec:
    """A one-step risk measure and its parameters.

    Only the fields relevant to ``kind`` are consulted; the others keep their
    defaults. Use the classmethod constructors for readability.
    """

    kind: RiskKind = RiskKind.EXPECTATION
    alpha: float = 0.0
    b: float = 0.0
    p_order: float = 1.0
    beta1: float = 0.0
    beta2: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RiskKind(self.kind))
        if not 0.0 <= self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.b < 0.0 or not math.isfinite(self.b):
            raise ParameterError(f"b must be a finite nonnegative number, got {self.b}")
        if not (self.p_order >= 1.0 and math.isfinite(self.p_order)):
            raise ParameterError(f"p_order must be finite and >= 1, got {self.p_order}")
        if not (0.0 <= self.beta1 < 1.0 < self.beta2 and math.isfinite(self.beta2)):
            raise ParameterError(
                f"OCE slopes need 0 <= beta1 < 1 < beta2, got ({self.beta1}, {self.beta2})"
            )

    @classmethod
    def expectation(cls) -> RiskSpec:
        return cls(RiskKind.EXPECTATION)

    @classmethod
    def cvar(cls, alpha: float) -> RiskSpec:
        return cls(RiskKind.CVAR, alpha=alpha)

    @classmethod
    def oce(cls, beta1: float, beta2: float) -> RiskSpec:
        return cls(RiskKind.OCE, beta1=beta1, beta2=beta2)

    @classmethod
    def mean_deviation(cls, b: float, p_order: float = 1.0) -> RiskSpec:
        return cls(RiskKind.MEAN_DEVIATION, b=b, p_order=p_order)

    @classmethod
    def mean_semideviation(cls, b: float, p_order: float = 1.0) -> RiskSpec:
        return cls(RiskKind.MEAN_SEMIDEVIATION, b=b, p_order=p_order)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is RiskKind.CVAR:
            out["alpha"] = self.alpha
        elif self.kind is RiskKind.OCE:
            out.update(beta1=self.beta1, beta2=self.beta2)
        elif self.kind in (RiskKind.MEAN_DEVIATION, RiskKind.MEAN_SEMIDEVIATION):
            out.update(b=self.b, p_order=self.p_order)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RiskSpec:
        known = {"kind", "alpha", "b", "p_order", "beta1", "beta2"}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown risk fields: {sorted(unknown)}")
        if "kind" not in data:
            raise ParameterError("risk.kind is required")
        try:
            kind = RiskKind(data["kind"])
        except ValueError:
            raise ParameterError(f"risk.kind: unknown kind {data['kind']!r}") from None
        return cls(kind, **{k: float(v) for k, v in data.items() if k != "kind"})

    @property
    def label(self) -> str:
        if self.kind is RiskKind.CVAR:
            return f"cvar_{self.alpha:g}"
        return self.kind.value


def _as_samples(samples: Any) -> np.ndarray:
    y = np.asarray(samples, dtype=float).ravel()
    if y.size == 0:
        raise InputError("sample set is empty")
    if not np.all(np.isfinite(y)):
        raise InputError("sample set contains non-finite values")
    return y


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")


def _upper_lower_gaps(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For sorted ``y``, return sum_j (y_j - y_k)_+ and sum_j (y_k - y_j)_+ at every k."""
    m = y.size
    k = np.arange(m)
    prefix = np.cumsum(y)
    total = prefix[-1]
    # Ties contribute zero to either sum, so the sorted-position split is exact.
    above = (total - prefix) - (m - 1 - k) * y
    below = k * y - (prefix - y)
    return above, below


def cvar_empirical(samples: Any, alpha: float) -> float:
    """Empirical CVaR: min over eta of eta + mean((Y - eta)_+) / (1 - alpha).

    The objective is piecewise linear and convex with kinks at the samples, so
    it is evaluated at every sorted sample value and the first minimizer kept.
    """
    _check_alpha(alpha)
    y = np.sort(_as_samples(samples))
    above, _ = _upper_lower_gaps(y)
    objective = y + above / (y.size * (1.0 - alpha))
    return float(objective[np.argmin(objective)])


def oce_empirical(samples: Any, beta1: float, beta2: float) -> float:
    """Empirical optimized certainty equivalent by breakpoint enumeration."""
    if not (0.0 <= beta1 < 1.0 < beta2):
        raise ParameterError(f"OCE slopes need 0 <= beta1 < 1 < beta2, got ({beta1}, {beta2})")
    y = np.sort(_as_samples(samples))
    above, below = _upper_lower_gaps(y)
    objective = y + (beta2 * above - beta1 * below) / y.size
    return float(objective[np.argmin(objective)])


def _check_deviation(b: float, p_order: float) -> None:
    if b < 0.0:
        raise ParameterError(f"b must be >= 0, got {b}")
    if p_order < 1.0:
        raise ParameterError(f"p_order must be >= 1, got {p_order}")


def mean_deviation_empirical(samples: Any, b: float, p_order: float = 1.0) -> float:
    _check_deviation(b, p_order)
    y = _as_samples(samples)
    mean = y.mean()
    dev = np.mean(np.abs(y - mean) ** p_order) ** (1.0 / p_order)
    return float(mean + b * dev)


def mean_semideviation_empirical(samples: Any, b: float, p_order: float = 1.0) -> float:
    _check_deviation(b, p_order)
    y = _as_samples(samples)
    mean = y.mean()
    dev = np.mean(np.maximum(y - mean, 0.0) ** p_order) ** (1.0 / p_order)
    return float(mean + b * dev)


def empirical_risk(samples: Any, spec: RiskSpec) -> float:
    """Apply the empirical estimator selected by ``spec`` to a sample set."""
    kind = spec.kind
    if kind is RiskKind.EXPECTATION:
        return float(_as_samples(samples).mean())
    if kind is RiskKind.CVAR:
        return cvar_empirical(samples, spec.alpha)
    if kind is RiskKind.OCE:
        return oce_empirical(samples, spec.beta1, spec.beta2)
    if kind is RiskKind.MEAN_DEVIATION:
        return mean_deviation_empirical(samples, spec.b, spec.p_order)
    return mean_semideviation_empirical(samples, spec.b, spec.p_order)


@dataclass(frozen=True)
class DiscreteDist:
    """A finite-support distribution; duplicate atoms are allowed."""

    values: np.ndarray
    probs: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).ravel()
        probs = np.asarray(self.probs, dtype=float).ravel()
        if values.size == 0 or values.shape != probs.shape:
            raise InputError("a distribution needs matching, non-empty values and probabilities")
        if not np.all(np.isfinite(values)):
            raise InputError("distribution values must be finite")
        if np.any(probs <= 0.0):
            raise InputError("atom probabilities must be strictly positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise InputError(f"probabilities sum to {probs.sum():.15g}, not 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_pairs(cls, atoms: list[tuple[float, float]]) -> DiscreteDist:
        if not atoms:
            raise InputError("a distribution needs at least one atom")
        values, probs = zip(*atoms)
        return cls(np.array(values), np.array(probs))

    @classmethod
    def point_mass(cls, value: float) -> DiscreteDist:
        return cls(np.array([value]), np.array([1.0]))

    def mean(self) -> float:
        return float(self.probs @ self.values)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(self.probs)
        idx = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
        return self.values[np.minimum(idx, self.values.size - 1)]


def risk_exact_discrete(dist: DiscreteDist, spec: RiskSpec) -> float:
    """Exact risk of a finite-support distribution.

    CVaR and OCE minimize their variational objective over the atom values,
    which contain a minimizer of the piecewise-linear convex objective.
    """
    v, p = dist.values, dist.probs
    mean = float(p @ v)
    kind = spec.kind
    if kind is RiskKind.EXPECTATION:
        return mean
    if kind in (RiskKind.MEAN_DEVIATION, RiskKind.MEAN_SEMIDEVIATION):
        diff = v - mean
        gap = np.abs(diff) if kind is RiskKind.MEAN_DEVIATION else np.maximum(diff, 0.0)
        return mean + spec.b * float(p @ gap**spec.p_order) ** (1.0 / spec.p_order)
    eta = v[:, None]
    up = p @ np.maximum(v[None, :] - eta, 0.0).T
    down = p @ np.maximum(eta - v[None, :], 0.0).T
    if kind is RiskKind.CVAR:
        objective = v + up / (1.0 - spec.alpha)
    else:
        objective = v + spec.beta2 * up - spec.beta1 * down
    return float(objective.min())


def _utility_at(spec: RiskSpec, x: float) -> float:
    return spec.beta2 * max(x, 0.0) - spec.beta1 * max(-x, 0.0)


def _check_bound_args(eps: float, m: float, j_max: float) -> None:
    if not eps > 0.0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if not m >= 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    if not j_max > 0.0:
        raise ParameterError(f"j_max must be > 0, got {j_max}")


def deviation_constant(j_max: float, p_order: float) -> float:
    """The constant (1 + J_max)^p - J_max^p in the deviation concentration bound."""
    return (1.0 + j_max) ** p_order - j_max**p_order


def theta_bound(spec: RiskSpec, eps: float, m: float, j_max: float) -> float:
    """Upper bound on P(|rho - rho_hat_m| > eps), clamped to [0, 1].

    The expectation kind uses the CVaR bound at alpha = 0.
    """
    _check_bound_args(eps, m, j_max)
    kind = spec.kind
    if kind in (RiskKind.MEAN_DEVIATION, RiskKind.MEAN_SEMIDEVIATION):
        p = spec.p_order
        c = deviation_constant(j_max, p)
        x = m * eps**2 / (math.sqrt(2.0) * j_max) ** 2
        scale = math.sqrt(2.0) * spec.b * p * (1.0 + c)
        if scale > 0.0:
            y = m * eps**2 / (scale * j_max**p) ** 2
            z = m * eps**2 / (scale * j_max ** (2.0 * p - 1.0)) ** 2
        else:
            y = z = math.inf
        bound = 2.0 * (math.exp(-x) + math.exp(-y) + math.exp(-z))
    elif kind is RiskKind.OCE:
        u = _utility_at(spec, j_max)
        bound = 2.0 * (1.0 + 4.0 * spec.beta2 / eps) * math.exp(
            -m * eps**2 / (math.sqrt(2.0) * u) ** 2
        )
    else:
        alpha = spec.alpha if kind is RiskKind.CVAR else 0.0
        scaled = eps * (1.0 - alpha)
        bound = 2.0 * (1.0 + 4.0 / scaled) * math.exp(
            -m * scaled**2 / (math.sqrt(2.0) * (2.0 - alpha) * j_max) ** 2
        )
    return min(max(bound, 0.0), 1.0)


def min_samples_bound(
    spec: RiskSpec,
    eps: float,
    delta: float,
    j_max: float,
    n_states: int,
    n_actions: int,
) -> float:
    """The real-valued lower bound on m that makes one iteration eps-accurate."""
    if not (eps > 0.0 and 0.0 < delta < 1.0 and j_max > 0.0):
        raise ParameterError("need eps > 0, 0 < delta < 1 and j_max > 0")
    if n_states < 1 or n_actions < 1:
        raise ParameterError("n_states and n_actions must be >= 1")
    base = math.log(1.0 / delta) + math.log(8.0 * n_states * n_actions)
    kind = spec.kind
    if kind in (RiskKind.MEAN_DEVIATION, RiskKind.MEAN_SEMIDEVIATION):
        p = spec.p_order
        c = deviation_constant(j_max, p)
        m_prime = min(
            ((1.0 + c) * j_max**p) ** 2,
            (spec.b * p * (1.0 + c) * j_max ** (2.0 * p - 1.0)) ** 2,
            j_max**2,
        )
        return 32.0 * m_prime / eps**2 * base
    if kind is RiskKind.OCE:
        u = _utility_at(spec, j_max)
        return 32.0 * (u / eps) ** 2 * (base + math.log(1.0 + 16.0 * spec.beta2 / eps))
    alpha = spec.alpha if kind is RiskKind.CVAR else 0.0
    lead = ((2.0 - alpha) * j_max / ((1.0 - alpha) * eps)) ** 2
    return 32.0 * lead * (base + math.log(1.0 + 16.0 / (eps * (1.0 - alpha))))


def min_samples_for(
    spec: RiskSpec,
    eps: float,
    delta: float,
    j_max: float,
    n_states: int,
    n_actions: int,
) -> int:
    """Smallest integer m strictly above :func:`min_samples_bound`."""
    return math.floor(min_samples_bound(spec, eps, delta, j_max, n_states, n_actions)) + 1
