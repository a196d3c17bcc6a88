"""Command-line front end.

Exit codes: 0 on success, 1 when a config or input fails validation, 2 when
a file cannot be read or written. Messages go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from riskavi import bounds
from riskavi.approx import ValueFn
from riskavi.bench import (
    BenchConfig,
    fmt,
    model_from_config,
    run_benchmark,
    write_benchmark,
    write_csv,
)
from riskavi.engine import (
    ROLLOUT_STREAM,
    AviConfig,
    AviRun,
    Policy,
    TabularPolicy,
    ThresholdPolicy,
    decision_boundary,
    evaluate_policy_risk,
    greedy_table,
    rollout_expected_cost,
    run_avi,
    stream,
)
from riskavi.exceptions import RiskAviError
from riskavi.mdp import MaintenanceModel, MdpModel, State, TabularModel
from riskavi.risk import RiskSpec

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
LOG_ENV = "RISK_AVI_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
PLANS = ("supnorm", "pnorm", "dominance", "stationary", "ratio")

log = logging.getLogger("riskavi")


class ValidationFailure(Exception):
    """A config problem detected by the CLI itself."""


# -- helpers ------------------------------------------------------------------


def read_json(path: Path) -> Any:
    text = path.read_text(encoding="utf-8")  # OSError -> exit 2
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"{path}: malformed JSON ({exc})") from None


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8", newline="\n")


def _object(data: Any, what: str) -> dict[str, Any]:
    if not isinstance(data, dict):
        raise ValidationFailure(f"{what} must be a JSON object")
    return dict(data)


def _check_keys(data: dict[str, Any], allowed: set[str], what: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ValidationFailure(f"{what}: unknown fields {sorted(unknown)}")


def _solver(data: dict[str, Any], seed: int | None, threads: int | None) -> AviConfig:
    solver = dict(_object(data.get("solver", {}), "solver"))
    if "seed" in data:
        solver["seed"] = data["seed"]
    if seed is not None:
        solver["seed"] = seed
    solver.setdefault("risk", RiskSpec.expectation().to_dict())
    config = AviConfig.from_dict(solver)
    return replace(config, threads=threads) if threads else config


def default_probes(model: MdpModel) -> list[State]:
    if isinstance(model, TabularModel):
        return [model.state_of(i) for i in range(model.tabular.n_states)]
    probes = [State(float(s)) for s in np.linspace(model.low, model.high, 7)]
    if model.has_bad_state:
        probes.append(State(model.high, True))
    return probes


def _probe_label(state: State) -> str:
    return "value_at_bad" if state.is_bad else f"value_at_{fmt(state.value)}"


def _probe_value(fn: ValueFn, state: State) -> float:
    return float(fn.evaluate(np.array([state.value]), np.array([state.is_bad]))[0])


def iterates_rows(run: AviRun, probes: list[State]) -> list[list[str]]:
    rows = [["k", "fit_residual", "n_points"] + [_probe_label(s) for s in probes]]
    for k, fn in enumerate(run.iterates):
        if k == 0:
            rows.append(["0", "", "0"] + [fmt(_probe_value(fn, s)) for s in probes])
            continue
        d = run.diagnostics[k - 1]
        rows.append([str(k), fmt(d.fit_residual), str(d.n_points)] + [fmt(_probe_value(fn, s)) for s in probes])
    return rows


# -- subcommands ----------------------------------------------------------------


def cmd_solve(args: argparse.Namespace) -> int:
    data = _object(read_json(args.config), "config")
    _check_keys(data, {"model", "solver", "seed", "probe_states"}, "config")
    model = model_from_config(data.get("model"), args.config.parent)
    config = _solver(data, args.seed, args.threads)
    probes = default_probes(model)
    if "probe_states" in data:
        probes = [State(float(s)) for s in data["probe_states"]]
        for s in probes:
            model.check_state(s)
    run = run_avi(model, config)
    args.out.mkdir(parents=True, exist_ok=True)
    payload = run.to_dict()
    payload["model"] = _model_dict(model)
    write_json(args.out / "run.json", payload)
    write_csv(args.out / "iterates.csv", iterates_rows(run, probes))
    print(f"wrote {args.out / 'run.json'} and {args.out / 'iterates.csv'}")
    return EXIT_OK


def _model_dict(model: MdpModel) -> dict[str, Any]:
    if isinstance(model, MaintenanceModel):
        return {"type": "maintenance", "params": model.params.to_dict()}
    if isinstance(model, TabularModel):
        return {"type": "tabular", "spec": model.tabular.to_dict()}
    raise ValidationFailure(f"cannot serialize model {type(model).__name__}")


def _policy(spec: Any, model: MdpModel, base_dir: Path, m_eval: int, seed: int) -> Policy:
    spec = _object(spec, "policy")
    kind = spec.get("kind")
    if kind == "threshold":
        _check_keys(spec, {"kind", "boundary", "below_action", "above_action"}, "policy")
        b = spec.get("boundary")
        return ThresholdPolicy(
            None if b is None else float(b), int(spec.get("below_action", 0)), int(spec.get("above_action", 1))
        )
    if kind == "table":
        _check_keys(spec, {"kind", "actions"}, "policy")
        return TabularPolicy(np.asarray(spec["actions"], dtype=int))
    if kind == "greedy_run":
        _check_keys(spec, {"kind", "run", "grid_step"}, "policy")
        path = Path(spec["run"])
        run = AviRun.from_dict(read_json(path if path.is_absolute() else base_dir / path))
        if run.config is None:
            raise ValidationFailure("policy.run: the run document has no solver config")
        risk = run.config.risk
        if isinstance(model, TabularModel):
            return greedy_table(model, risk, run.final, m_eval, seed)
        grid = float(spec.get("grid_step", 0.1))
        return ThresholdPolicy(decision_boundary(model, risk, run.final, grid, m_eval, seed))
    raise ValidationFailure(f"policy.kind: unknown policy {kind!r}")


def cmd_evaluate(args: argparse.Namespace) -> int:
    data = _object(read_json(args.config), "config")
    _check_keys(data, {"model", "solver", "seed", "policy", "risk", "n_runs", "s0", "m_eval"}, "config")
    model = model_from_config(data.get("model"), args.config.parent)
    config = _solver(data, args.seed, args.threads)
    if "policy" not in data:
        raise ValidationFailure("policy is required")
    risk = RiskSpec.from_dict(data["risk"]) if "risk" in data else config.risk
    n_runs = int(data.get("n_runs", 5000))
    m_eval = int(data.get("m_eval", 10_000))
    s0 = State(float(data.get("s0", model.low)))
    model.check_state(s0)
    policy = _policy(data["policy"], model, args.config.parent, m_eval, config.seed)
    mean, se = rollout_expected_cost(model, policy, s0, n_runs, rng=stream(config.seed, ROLLOUT_STREAM, 0))
    fn = evaluate_policy_risk(model, risk, policy, replace(config, risk=risk))
    result = {
        "s0": s0.value,
        "n_runs": n_runs,
        "rollout_mean_cost": mean,
        "rollout_std_err": se,
        "risk": risk.to_dict(),
        "recursive_risk_value": _probe_value(fn, s0),
        "value_fn": fn.to_dict(),
    }
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(args.out / "evaluation.json", result)
    print(f"expected discounted cost {mean:.6g} +- {se:.3g}; {risk.label} value {result['recursive_risk_value']:.6g}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    data = _object(read_json(args.config), "config") if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    config = BenchConfig.from_dict(data)
    if args.threads:
        config = replace(config, solver=replace(config.solver, threads=args.threads))
    result = run_benchmark(config)
    paths = write_benchmark(result, args.out)
    write_json(args.out / "bench_config.json", config.to_dict())
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _stationary_section(sec: dict[str, Any]) -> dict[str, Any]:
    _check_keys(sec, {"p_good", "k_star", "delta2"}, "stationary")
    mu = bounds.stationary_distribution(float(sec["p_good"]), sec["k_star"])
    out: dict[str, Any] = {"p_good": float(sec["p_good"]), "k_star": int(sec["k_star"]),
                           "mu": mu.tolist(), "mu_min": float(mu.min())}
    if "delta2" in sec:
        t = bounds.mixing_time_bound(float(sec["delta2"]), float(mu.min()))
        out["delta2"] = float(sec["delta2"])
        out["mixing_time_bound"] = t
        out["K"] = max(1, int(np.ceil(t)))
    return out


def _ratio_section(sec: dict[str, Any]) -> dict[str, Any]:
    fields = {"gamma", "K", "eps", "delta", "j_max", "n_states", "n_actions", "C_const"}
    _check_keys(sec, fields, "ratio")
    try:
        kwargs = {k: (int(v) if k in ("K", "n_states", "n_actions") else float(v)) for k, v in sec.items()}
        m1, m2, ratio = bounds.sample_ratio(**kwargs)
    except TypeError as exc:
        raise ValidationFailure(f"ratio: {exc}") from None
    return {**kwargs, "m1": m1, "m2": m2, "ratio": ratio, "limit": bounds.ratio_limit(kwargs["gamma"])}


def _human(plan: str, result: dict[str, Any]) -> str:
    if plan == "stationary":
        mu = ", ".join(f"{x:.6g}" for x in result["mu"])
        lines = [f"stationary law ({mu})", f"mu_min {result['mu_min']:.6g}"]
        if "mixing_time_bound" in result:
            lines.append(f"mixing-time bound {result['mixing_time_bound']:.6g} -> K = {result['K']}")
        return "\n".join(lines)
    if plan == "ratio":
        return (f"m1 {result['m1']:.6g}  m2 {result['m2']:.6g}  ratio {result['ratio']:.6g}"
                f"  (limit {result['limit']:.6g})")
    return bounds.BoundReport(**result).table()


def cmd_bounds(args: argparse.Namespace) -> int:
    data = _object(read_json(args.config), "inputs")
    _check_keys(data, {"inputs", "K", "stationary", "ratio", "plans"}, "inputs")
    plans = args.plan or data.get("plans")
    if plans is None:
        plans = [p for p in PLANS if p in ("stationary", "ratio") and p in data]
        if "inputs" in data:
            plans = ["supnorm", "pnorm", "dominance"] + plans
    for p in plans:
        if p not in PLANS:
            raise ValidationFailure(f"plans: unknown plan {p!r}; choose from {', '.join(PLANS)}")
    if not plans:
        raise ValidationFailure("nothing to compute: give 'inputs', 'stationary' or 'ratio'")
    results: dict[str, Any] = {}
    inputs = None
    for plan in plans:
        if plan in ("supnorm", "pnorm", "dominance"):
            if inputs is None:
                inputs = bounds.BoundInputs.from_dict(_object(data.get("inputs", {}), "inputs.inputs"))
            if plan == "supnorm":
                results[plan] = bounds.supnorm_plan(inputs, int(data.get("K", 30))).to_dict()
            elif plan == "pnorm":
                results[plan] = bounds.pnorm_plan(inputs).to_dict()
            else:
                results[plan] = bounds.dominance_plan(inputs).to_dict()
        elif plan == "stationary":
            results[plan] = _stationary_section(_object(data.get("stationary"), "stationary"))
        else:
            results[plan] = _ratio_section(_object(data.get("ratio"), "ratio"))
    out: dict[str, Any] = {"plans": results}
    if inputs is not None:
        out["inputs"] = inputs.to_dict()
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(args.out / "bounds.json", out)
    for plan, result in results.items():
        print(f"[{plan}]")
        print(_human(plan, result))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskavi", description="Risk-aware approximate value iteration.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, tuple[Callable[[argparse.Namespace], int], str, bool]] = {
        "solve": (cmd_solve, "run approximate value iteration", True),
        "evaluate": (cmd_evaluate, "score a fixed policy by rollouts and recursive risk", True),
        "bench-maintenance": (cmd_bench, "run the maintenance benchmark sweep", False),
        "bounds": (cmd_bounds, "compute sample-complexity plans", True),
    }
    for name, (func, help_text, needs_config) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=needs_config, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=_u64, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=_positive_int, default=None, help="worker threads")
        if name == "bounds":
            p.add_argument("--plan", action="append", choices=PLANS, help="plan to run (repeatable)")
        p.set_defaults(func=func)
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "error").lower()
    if level not in LOG_LEVELS:
        raise ValidationFailure(f"{LOG_ENV} must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        return args.func(args)
    except (ValidationFailure, RiskAviError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid config value: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
