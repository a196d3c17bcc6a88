"""Sample-complexity and convergence calculators.

All logarithms are natural and every count is rounded up. Nothing here
simulates the MDP except :func:`simulate_dominating_chain`, which exists to
check the stationary law empirically.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from riskavi.exceptions import ConvergenceError, ParameterError
from riskavi.risk import RiskKind, RiskSpec, theta_bound

M_SEARCH_MAX = 2**62
FIXED_POINT_START = 1000
FIXED_POINT_MAX_ITER = 50


def _unit_open(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ParameterError(f"{name} must lie in (0, 1), got {value}")


def _positive(name: str, value: float) -> None:
    if not value > 0.0:
        raise ParameterError(f"{name} must be > 0, got {value}")


def c_mu_coefficient(risk: RiskSpec, b_bound: float = 1.0) -> float:
    """Sup-norm bound on densities in the risk envelope.

    ``b_bound`` bounds the continuation values for the mean-deviation case.
    """
    if risk.kind is RiskKind.CVAR:
        return 1.0 / (1.0 - risk.alpha)
    if risk.kind is RiskKind.MEAN_DEVIATION:
        if b_bound < 0.0:
            raise ParameterError(f"b_bound must be >= 0, got {b_bound}")
        return 1.0 + 2.0 * b_bound * risk.b
    raise ParameterError(f"no envelope coefficient available for {risk.kind.value}")


# -- dominating chain ---------------------------------------------------------


def stationary_distribution(p_good: float, k_star: int) -> np.ndarray:
    """Stationary law on states 1..k_star of the move-down-or-reset chain.

    From state i the chain moves to max(i - 1, 1) with probability
    ``p_good`` and resets to ``k_star`` otherwise. Index 0 holds state 1.
    """
    _unit_open("p_good", p_good)
    if int(k_star) != k_star or k_star < 2:
        raise ParameterError(f"k_star must be an integer >= 2, got {k_star}")
    k_star = int(k_star)
    i = np.arange(1, k_star + 1)
    mu = (1.0 - p_good) * p_good ** (k_star - i).astype(float)
    mu[0] = p_good ** (k_star - 1)
    return mu


def simulate_dominating_chain(
    p_good: float, k_star: int, steps: int, n_traj: int, rng: np.random.Generator
) -> np.ndarray:
    """Empirical marginal after ``steps`` moves, all trajectories started at k_star."""
    stationary_distribution(p_good, k_star)  # validation only
    if steps < 0 or n_traj < 1:
        raise ParameterError("need steps >= 0 and n_traj >= 1")
    state = np.full(n_traj, k_star, dtype=np.int64)
    for _ in range(steps):
        good = rng.random(n_traj) < p_good
        state = np.where(good, np.maximum(state - 1, 1), k_star)
    return np.bincount(state - 1, minlength=k_star) / n_traj


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mixing_time_bound(delta2: float, mu_min: float) -> float:
    _unit_open("delta2", delta2)
    _unit_open("mu_min", mu_min)
    return math.log(1.0 / (delta2 * mu_min))


def granularity_states(j_max: float, eps_g: float) -> int:
    """Number of error levels K* = ceil(j_max / eps_g); must be at least 2."""
    _positive("j_max", j_max)
    _positive("eps_g", eps_g)
    k_star = math.ceil(round(j_max / eps_g, 9))
    if k_star < 2:
        raise ParameterError(f"eps_g = {eps_g} gives a single error level; need eps_g < j_max")
    return k_star


def dominance_iterations(eps_g: float, delta2: float, j_max: float, p_good: float) -> int:
    k_star = granularity_states(j_max, eps_g)
    mu_min = float(stationary_distribution(p_good, k_star).min())
    return max(1, math.ceil(mixing_time_bound(delta2, mu_min)))


# -- theta inversion ----------------------------------------------------------


def invert_theta(risk: RiskSpec, eps: float, target: float, j_max: float) -> int:
    """Smallest integer m with theta_bound(risk, eps, m, j_max) <= target."""
    _positive("target", target)
    if theta_bound(risk, eps, 1, j_max) <= target:
        return 1
    hi = M_SEARCH_MAX
    if theta_bound(risk, eps, hi, j_max) > target:
        raise ParameterError(f"no m <= 2^62 reaches theta <= {target:g}")
    lo = 1  # theta(lo) > target >= theta(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if theta_bound(risk, eps, mid, j_max) <= target:
            hi = mid
        else:
            lo = mid
    return hi


# -- inputs and reports -------------------------------------------------------


@dataclass(frozen=True)
class BoundInputs:
    gamma: float = 0.6
    j_max: float = 300.0
    eps: float = 1.0
    delta: float = 0.1
    p_norm: float = 1.0
    eps_g: float = 2.0
    delta1: float = 0.05
    delta2: float = 0.025
    kappa_c: float = 4.0
    kappa_mu: float = 0.5
    C_rho_mu: float = 1.0
    inherent_bellman_error: float = 0.0
    pseudo_dim: int = 6
    n_states: int = 1
    n_actions: int = 2
    s_max: float = 30.0
    risk: RiskSpec = field(default_factory=lambda: RiskSpec.cvar(0.5))

    def __post_init__(self) -> None:
        _unit_open("gamma", self.gamma)
        for name in ("delta", "delta1", "delta2"):
            _unit_open(name, getattr(self, name))
        for name in ("j_max", "eps", "eps_g", "C_rho_mu", "s_max"):
            _positive(name, getattr(self, name))
        for name in ("kappa_c", "kappa_mu", "inherent_bellman_error"):
            if getattr(self, name) < 0.0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.p_norm < 1.0:
            raise ParameterError(f"p_norm must be >= 1, got {self.p_norm}")
        for name in ("n_states", "n_actions"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ParameterError(f"{name} must be an integer >= 1")
        if int(self.pseudo_dim) != self.pseudo_dim or self.pseudo_dim < 0:
            raise ParameterError("pseudo_dim must be an integer >= 0")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["risk"] = self.risk.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BoundInputs:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown bound inputs: {sorted(unknown)}")
        kwargs = dict(data)
        if "risk" in kwargs:
            kwargs["risk"] = RiskSpec.from_dict(kwargs["risk"])
        for name in ("pseudo_dim", "n_states", "n_actions"):
            if name in kwargs:
                value = kwargs[name]
                if not isinstance(value, (int, float)) or int(value) != value:
                    raise ParameterError(f"{name} must be an integer, got {value!r}")
                kwargs[name] = int(value)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ParameterError(str(exc)) from None


@dataclass(frozen=True)
class BoundReport:
    plan: str
    K: int
    n: int
    m: int
    epsilon_net: float | None
    failure_prob: float
    guarantee: str
    details: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("K", "n", "m"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def rows(self) -> list[tuple[str, str]]:
        rows = [("plan", self.plan), ("K", str(self.K)), ("n", str(self.n)), ("m", str(self.m))]
        if self.epsilon_net is not None:
            rows.append(("epsilon_net", f"{self.epsilon_net:.6g}"))
        rows.append(("failure_prob", f"{self.failure_prob:.6g}"))
        rows.extend((k, f"{v:.6g}") for k, v in self.details.items())
        rows.append(("guarantee", self.guarantee))
        return rows

    def table(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in self.rows())


# -- plans --------------------------------------------------------------------


def supnorm_plan(inputs: BoundInputs, K: int) -> BoundReport:
    """Net fineness, net size and per-point sample count for an eps-net run of K steps."""
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    g, J = inputs.gamma, inputs.j_max
    eps_net = inputs.eps / (2.0 * (inputs.kappa_c + g * inputs.kappa_mu * J))
    n = math.ceil(round(inputs.s_max / eps_net, 9))
    acc = inputs.eps / (2.0 * g)
    m = invert_theta(inputs.risk, acc, inputs.delta / (n * inputs.n_actions * K), J)
    per_iter = n * inputs.n_actions * theta_bound(inputs.risk, acc, m, J)
    failure = min(1.0, K * per_iter)
    residual = g**K * J
    bound = residual + inputs.eps / (1.0 - g)
    return BoundReport(
        plan="supnorm",
        K=K,
        n=n,
        m=m,
        epsilon_net=eps_net,
        failure_prob=failure,
        guarantee=(
            f"||J_K - J*||_inf <= {bound:.6g} "
            f"(= {residual:.6g} + {inputs.eps / (1.0 - g):.6g}) w.p. >= {1.0 - failure:.6g}"
        ),
        details={"contraction_residual": residual, "sup_error_bound": bound},
    )


def covering_number_bound(pseudo_dim: int, eps: float, j_max: float, n: int | None = None) -> float:
    """Pseudo-dimension bound e(D+1)(2e j_max / eps)^D; independent of the sample size n."""
    return math.exp(log_covering_number_bound(pseudo_dim, eps, j_max, n))


def log_covering_number_bound(pseudo_dim: int, eps: float, j_max: float, n: int | None = None) -> float:
    if pseudo_dim < 0:
        raise ParameterError(f"pseudo_dim must be >= 0, got {pseudo_dim}")
    _positive("eps", eps)
    _positive("j_max", j_max)
    D = pseudo_dim
    return 1.0 + math.log(D + 1) + D * math.log(2.0 * math.e * j_max / eps)


def pnorm_iterations(gamma: float, j_max: float, eta: float, p_norm: float) -> int:
    """Smallest K >= 1 with gamma^K <= [eta (1-gamma)^2 / (2 gamma j_max)]^p."""
    target = p_norm * math.log(eta * (1.0 - gamma) ** 2 / (2.0 * gamma * j_max))
    if target >= 0.0:
        return 1
    K = max(1, math.ceil(target / math.log(gamma)))
    # Guard the ceiling against rounding on either side.
    while K > 1 and (K - 1) * math.log(gamma) <= target:
        K -= 1
    while K * math.log(gamma) > target:
        K += 1
    return K


def pnorm_plan(inputs: BoundInputs) -> BoundReport:
    """K, n and m for a weighted p-norm guarantee with sampled fitting points."""
    g, J, p = inputs.gamma, inputs.j_max, inputs.p_norm
    c_root = inputs.C_rho_mu ** (1.0 / p)
    eps_fit = inputs.eps * (1.0 - g) ** 2 / (4.0 * g * c_root)
    K = pnorm_iterations(g, J, inputs.eps / 2.0, p)
    delta_iter = inputs.delta / K
    log_cover = log_covering_number_bound(inputs.pseudo_dim, (eps_fit / 4.0) ** p / 8.0, J)
    lead = 128.0 * (8.0 * J / eps_fit) ** (2.0 * p)
    n = FIXED_POINT_START
    for _ in range(FIXED_POINT_MAX_ITER):
        rhs = lead * (math.log(1.0 / delta_iter) + math.log(32.0) + log_cover)
        new = math.floor(rhs) + 1
        if new == n:
            break
        n = new
    else:
        raise ConvergenceError(
            f"sample-size fixed point did not settle in {FIXED_POINT_MAX_ITER} steps (last n = {n})"
        )
    acc = inputs.eps * (1.0 - g) ** 2 / (16.0 * g * c_root)
    m = invert_theta(inputs.risk, acc, inputs.delta / (4.0 * n * inputs.n_actions * K), J)
    bias = 2.0 * g / (1.0 - g) ** 2 * c_root * inputs.inherent_bellman_error
    return BoundReport(
        plan="pnorm",
        K=K,
        n=n,
        m=m,
        epsilon_net=None,
        failure_prob=inputs.delta,
        guarantee=(
            f"||J^pi_K - J*||_(p,rho) <= {bias + inputs.eps:.6g} "
            f"(= {bias:.6g} + {inputs.eps:.6g}) w.p. >= {1.0 - inputs.delta:.6g}"
        ),
        details={"eps_fit": eps_fit, "log_covering_number": log_cover, "bias_term": bias},
    )


def dominance_plan(inputs: BoundInputs) -> BoundReport:
    """Iteration count and per-point samples when only most iterations must be accurate.

    Each iteration is accurate with probability at least 1 - delta1 (union
    bound over the net and actions), which is the move-down probability of
    the dominating chain on ceil(j_max / eps_g) error levels.
    """
    if inputs.delta1 + 2.0 * inputs.delta2 > inputs.delta:
        raise ParameterError("need delta1 + 2 * delta2 <= delta")
    if not inputs.eps < inputs.eps_g:
        raise ParameterError("need eps < eps_g")
    g, J = inputs.gamma, inputs.j_max
    p_good = 1.0 - inputs.delta1
    k_star = granularity_states(J, inputs.eps_g)
    mu = stationary_distribution(p_good, k_star)
    K = dominance_iterations(inputs.eps_g, inputs.delta2, J, p_good)
    eps_net = inputs.eps / (2.0 * (inputs.kappa_c + g * inputs.kappa_mu * J))
    n = math.ceil(round(inputs.s_max / eps_net, 9))
    m = invert_theta(inputs.risk, inputs.eps / (2.0 * g), inputs.delta1 / (inputs.n_actions * n), J)
    return BoundReport(
        plan="dominance",
        K=K,
        n=n,
        m=m,
        epsilon_net=eps_net,
        failure_prob=inputs.delta,
        guarantee=f"P(||J_K - J*||_inf > {inputs.eps_g:.6g}) <= {inputs.delta:.6g}",
        details={"k_star": float(k_star), "mu_min": float(mu.min()), "p_good": p_good},
    )


# -- iteration/sample trade-off -----------------------------------------------


def _ratio_terms(gamma, K, eps, delta, j_max, size_const):
    gap = eps * (1.0 - gamma) - 2.0 * gamma**K * j_max * (1.0 - gamma)
    levels = math.ceil(round(j_max / eps, 9))
    # 1 - (1 - delta)^(1/K), computed without cancellation.
    tail = -math.expm1(math.log1p(-delta) / K)
    mu1 = (1.0 - delta) ** ((levels - 1) / K)
    mu2 = tail * (1.0 - delta) ** ((levels - 2) / K)
    mu_min = min(mu1, mu2)
    # Exponentials overflow long before the slack term matters; e^{-K} underflows to 0.
    slack = delta - 2.0 * math.exp(-K) / mu_min
    return gap, slack, tail, mu_min


def _ratio_valid(gamma, K, eps, delta, j_max, size_const) -> bool:
    gap, slack, tail, _ = _ratio_terms(gamma, K, eps, delta, j_max, size_const)
    return gap > 0.0 and slack > 0.0 and tail > 0.0


def sample_ratio(
    gamma: float,
    K: int,
    eps: float,
    delta: float,
    j_max: float,
    n_states: int = 1,
    n_actions: int = 1,
    C_const: float = 1.0,
) -> tuple[float, float, float]:
    """Per-iteration samples (m1, m2, m1 / m2) for the all-accurate and dominance analyses.

    Uses theta(eps, m) = C exp(-m eps^2); ``n_states * n_actions * C_const``
    enters only through one logarithm.
    """
    _unit_open("gamma", gamma)
    _unit_open("delta", delta)
    _positive("eps", eps)
    _positive("j_max", j_max)
    _positive("C_const", C_const)
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    size_const = n_states * n_actions * C_const
    if not _ratio_valid(gamma, K, eps, delta, j_max, size_const):
        k_min = next(
            k for k in range(1, 10**7) if _ratio_valid(gamma, k, eps, delta, j_max, size_const)
        )
        raise ParameterError(f"K = {K} is too small for these inputs; minimal valid K is {k_min}")
    gap, slack, tail, _ = _ratio_terms(gamma, K, eps, delta, j_max, size_const)
    m1 = 4.0 * gamma**2 / gap**2 * math.log(size_const / tail)
    m2 = 4.0 * gamma**2 / eps**2 * math.log(size_const / slack)
    return m1, m2, m1 / m2


def ratio_limit(gamma: float) -> float:
    return 1.0 / (1.0 - gamma) ** 2
