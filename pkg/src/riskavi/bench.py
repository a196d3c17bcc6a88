"""Experiment configuration and the maintenance benchmark sweep.

The sweep solves the risk-neutral problem and one CVaR problem per level,
extracts each greedy policy as a keep/repair threshold, and scores it two
ways: Monte-Carlo expected discounted cost from s0 and the approximate
recursive CVaR value at s0.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from riskavi.engine import (
    ROLLOUT_STREAM,
    AviConfig,
    ThresholdPolicy,
    decision_boundary,
    evaluate_policy_risk,
    rollout_expected_cost,
    run_avi,
    stream,
)
from riskavi.exceptions import InputError, ParameterError
from riskavi.mdp import MaintenanceModel, MaintParams, MdpModel, State, TabularModel, TabularMdp
from riskavi.risk import RiskSpec

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
ALWAYS_REPAIR = "R"
NEUTRAL = "neutral"


def model_from_config(spec: dict[str, Any] | None, base_dir: Path | None = None) -> MdpModel:
    """Build a model from ``{"type": "maintenance", "params": {...}}`` or a tabular spec.

    Tabular models come either inline (``"spec"``) or from a JSON file
    (``"path"``, resolved against ``base_dir``).
    """
    spec = {"type": "maintenance"} if spec is None else dict(spec)
    kind = spec.pop("type", "maintenance")
    if kind == "maintenance":
        unknown = set(spec) - {"params"}
        if unknown:
            raise ParameterError(f"model: unknown fields {sorted(unknown)}")
        return MaintenanceModel(MaintParams.from_dict(spec.get("params", {})))
    if kind == "tabular":
        if "spec" in spec:
            return TabularModel(TabularMdp.from_dict(spec["spec"]))
        if "path" in spec:
            path = Path(spec["path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return TabularModel(TabularMdp.load(path))
        raise ParameterError("model: tabular models need 'spec' or 'path'")
    raise ParameterError(f"model.type: unknown model {kind!r}")


@dataclass(frozen=True)
class BenchConfig:
    """Settings for the benchmark sweep; ``solver.risk`` is replaced per policy."""

    params: MaintParams = field(default_factory=MaintParams)
    solver: AviConfig = field(default_factory=lambda: AviConfig(RiskSpec.expectation()))
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    n_seeds: int = 5
    n_runs: int = 5000
    grid_step: float = 0.1
    m_eval: int = 10_000
    s0: float = 0.0
    evaluate_risk: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.alphas:
            raise ParameterError("alphas must be non-empty")
        for a in self.alphas:
            RiskSpec.cvar(a)
        if self.n_seeds < 1 or self.n_runs < 2 or self.m_eval < 1:
            raise ParameterError("need n_seeds >= 1, n_runs >= 2 and m_eval >= 1")
        if not self.grid_step > 0.0:
            raise ParameterError(f"grid_step must be > 0, got {self.grid_step}")
        if not 0.0 <= self.s0 <= self.params.s_max:
            raise ParameterError(f"s0 must lie in [0, {self.params.s_max}]")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")

    def replicate_seed(self, i: int) -> int:
        return (self.seed + i) % 2**64

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BenchConfig:
        data = dict(data)
        known = set(cls.__dataclass_fields__) | {"model"}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown benchmark fields: {sorted(unknown)}")
        model = dict(data.pop("model", {}) or {})
        if model.pop("type", "maintenance") != "maintenance":
            raise ParameterError("model.type: the benchmark runs on the maintenance model only")
        params = MaintParams.from_dict(model.get("params", {}))
        solver = dict(data.pop("solver", {}) or {})
        solver.setdefault("risk", RiskSpec.expectation().to_dict())
        kwargs: dict[str, Any] = {"params": params, "solver": AviConfig.from_dict(solver)}
        if "alphas" in data:
            kwargs["alphas"] = tuple(float(a) for a in data.pop("alphas"))
        for name in ("n_seeds", "n_runs", "m_eval", "seed"):
            if name in data:
                kwargs[name] = int(data.pop(name))
        for name in ("grid_step", "s0"):
            if name in data:
                kwargs[name] = float(data.pop(name))
        if "evaluate_risk" in data:
            kwargs["evaluate_risk"] = bool(data.pop("evaluate_risk"))
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        solver = self.solver.to_dict()
        solver.pop("risk")
        solver.pop("seed")
        return {
            "model": {"type": "maintenance", "params": self.params.to_dict()},
            "solver": solver,
            "alphas": list(self.alphas),
            "n_seeds": self.n_seeds,
            "n_runs": self.n_runs,
            "grid_step": self.grid_step,
            "m_eval": self.m_eval,
            "s0": self.s0,
            "evaluate_risk": self.evaluate_risk,
            "seed": self.seed,
        }


@dataclass
class PolicyRow:
    """Results for one (policy, replicate) pair."""

    policy: str
    alpha: float | None
    seed: int
    boundary: float | None
    mean_cost: float
    std_err: float
    wall_time: float = 0.0

    @property
    def always_repair(self) -> bool:
        return self.boundary is None


@dataclass
class RiskRow:
    """Recursive CVaR at level ``alpha`` of one policy from s0."""

    alpha: float
    seed: int
    policy: str
    value: float


@dataclass
class BenchResult:
    config: BenchConfig
    policies: list[PolicyRow]
    risk_values: list[RiskRow]

    def boundaries(self, policy: str) -> list[float | None]:
        return [r.boundary for r in self.policies if r.policy == policy]


def policy_name(alpha: float | None) -> str:
    return NEUTRAL if alpha is None else f"cvar_{alpha:g}"


def solve_policy(model: MaintenanceModel, config: BenchConfig, alpha: float | None, seed: int) -> PolicyRow:
    """Solve one problem, extract its threshold and estimate its expected cost."""
    start = time.perf_counter()
    risk = RiskSpec.expectation() if alpha is None else RiskSpec.cvar(alpha)
    solver = replace(config.solver, risk=risk, seed=seed)
    run = run_avi(model, solver)
    boundary = decision_boundary(model, risk, run.final, config.grid_step, config.m_eval, seed)
    policy = ThresholdPolicy(boundary)
    key = -1 if alpha is None else round(alpha * 1_000_000)
    rng = stream(seed, ROLLOUT_STREAM, key + 1)
    mean, se = rollout_expected_cost(model, policy, State(config.s0), config.n_runs, rng=rng)
    row = PolicyRow(policy_name(alpha), alpha, seed, boundary, mean, se, time.perf_counter() - start)
    log.info("%s seed %d: boundary %s, cost %.4f +- %.4f (%.1fs)",
             row.policy, seed, boundary, mean, se, row.wall_time)
    return row


def recursive_cvar(
    model: MaintenanceModel, config: BenchConfig, boundary: float | None, alpha: float, seed: int
) -> float:
    """Approximate recursive CVaR_alpha value at s0 of the threshold policy."""
    risk = RiskSpec.cvar(alpha)
    fn = evaluate_policy_risk(model, risk, ThresholdPolicy(boundary), replace(config.solver, seed=seed))
    return float(fn.evaluate(np.array([config.s0]))[0])


def run_benchmark(config: BenchConfig) -> BenchResult:
    model = MaintenanceModel(config.params)
    policies: list[PolicyRow] = []
    risk_values: list[RiskRow] = []
    for i in range(config.n_seeds):
        seed = config.replicate_seed(i)
        neutral = solve_policy(model, config, None, seed)
        policies.append(neutral)
        for alpha in config.alphas:
            row = solve_policy(model, config, alpha, seed)
            policies.append(row)
            if config.evaluate_risk:
                risk_values.append(
                    RiskRow(alpha, seed, NEUTRAL, recursive_cvar(model, config, neutral.boundary, alpha, seed))
                )
                risk_values.append(
                    RiskRow(alpha, seed, row.policy, recursive_cvar(model, config, row.boundary, alpha, seed))
                )
    return BenchResult(config, policies, risk_values)


# -- CSV output ---------------------------------------------------------------


def fmt(x: float | None) -> str:
    """17 significant digits; empty for None."""
    if x is None:
        return ""
    return f"{x:.17g}"


def _alpha_cell(alpha: float | None) -> str:
    return "" if alpha is None else fmt(alpha)


def table2_rows(result: BenchResult) -> list[list[str]]:
    rows = [["policy", "alpha", "seed", "boundary"]]
    for r in result.policies:
        cell = ALWAYS_REPAIR if r.always_repair else fmt(r.boundary)
        rows.append([r.policy, _alpha_cell(r.alpha), str(r.seed), cell])
    return rows


def table2_summary_rows(result: BenchResult) -> list[list[str]]:
    """Per-policy mean boundary over replicates that keep somewhere."""
    rows = [["policy", "alpha", "n_seeds", "always_repair_count", "mean_boundary"]]
    order: dict[str, float | None] = {}
    for r in result.policies:
        order.setdefault(r.policy, r.alpha)
    for name, alpha in order.items():
        bs = result.boundaries(name)
        kept = [b for b in bs if b is not None]
        mean = fmt(sum(kept) / len(kept)) if kept else ALWAYS_REPAIR
        rows.append([name, _alpha_cell(alpha), str(len(bs)), str(len(bs) - len(kept)), mean])
    return rows


def fig2_rows(result: BenchResult) -> list[list[str]]:
    rows = [["policy", "alpha", "seed", "mean_cost", "std_err"]]
    for r in result.policies:
        rows.append([r.policy, _alpha_cell(r.alpha), str(r.seed), fmt(r.mean_cost), fmt(r.std_err)])
    return rows


def fig3_rows(result: BenchResult) -> list[list[str]]:
    rows = [["alpha", "seed", "policy", "cvar_value"]]
    for r in result.risk_values:
        rows.append([fmt(r.alpha), str(r.seed), r.policy, fmt(r.value)])
    return rows


def write_csv(path: Path, rows: list[list[str]]) -> None:
    for row in rows:
        for cell in row:
            if "," in cell or "\n" in cell:
                raise InputError(f"cell {cell!r} cannot be written without quoting")
    path.write_text("".join(",".join(row) + "\n" for row in rows), encoding="utf-8", newline="\n")


def read_csv(path: Path) -> list[dict[str, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def write_benchmark(result: BenchResult, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "table2.csv": table2_rows(result),
        "table2_summary.csv": table2_summary_rows(result),
        "fig2.csv": fig2_rows(result),
    }
    if result.risk_values:
        outputs["fig3.csv"] = fig3_rows(result)
    paths = []
    for name, rows in outputs.items():
        write_csv(out_dir / name, rows)
        paths.append(out_dir / name)
    return paths


def boundary_for_ordering(boundary: float | None, grid_step: float) -> float:
    """Always-repair sorts one grid step below the smallest possible boundary."""
    return -grid_step if boundary is None else boundary


def mean_and_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se
