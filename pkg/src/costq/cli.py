"""Reproducible experiment driver: simulate, fit, evaluate, compare, serve.

Configuration is TOML; every field has a default and the fully resolved
config is echoed into the output directory so a run can be replayed from its
outputs alone. Exit codes: 0 success, 2 config error, 3 data error,
4 partial failure in a compare run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import baselines, engine
from .evaluate import EvaluationReport, evaluate as run_evaluation
from .data import CostSchedule, load_dataset_csv, save_dataset_csv
from .errors import ConfigError, CostqError, DataError
from .learners import LearnerConfig
from .simulate import (
    SCENARIOS,
    BehaviorConfig,
    ScenarioConfig,
    generate_full_dataset,
    nuisance_misspec,
    simulate_observed,
)

DEFAULT_CONFIG: dict = {
    "run": {
        "scenario": "s1",
        "settings": ["A"],
        "n": [400],
        "seeds": [1],
        "methods": ["costq", "only_complete", "one_time", "always_stop", "always_test_all"],
        "eval_n": 5000,
        "jobs": 1,
    },
    "costs": {},  # c1/c2 override; empty -> scenario defaults
    "behavior": {"floor": 0.05},
    "crossfit": {"n_folds": 5, "clip": 0.01, "nested_stage2": False},
    "learners": {
        "propensity1": {"kind": "softmax", "n_classes": 3, "feature_map": "poly2", "ridge": 1e-3},
        "propensity2": {"kind": "logistic", "feature_map": "poly2", "ridge": 1e-3},
        "core": {"kind": "logistic", "feature_map": "poly2", "ridge": 1e-3},
        "aux_contrast": {"kind": "linear", "feature_map": "poly5", "ridge": 1e-2},
        "dr_contrast": {"kind": "linear", "feature_map": "poly5", "ridge": 1e-2},
        "aux_contrast_stage1": {"kind": "linear", "feature_map": "poly2", "ridge": 1e-4},
        "dr_contrast_stage1": {"kind": "linear", "feature_map": "poly2", "ridge": 1e-4},
    },
}

METHODS = ("costq", "only_complete", "one_time", "always_stop", "always_test_all")


def _merge(default, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"expected a table at {path or '<root>'}")
    out = dict(default)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in default:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(default[key], dict) and default[key]:
            out[key] = _merge(default[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:  # carries line/column context
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    cfg = _merge(DEFAULT_CONFIG, user)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    run = cfg["run"]
    if run["scenario"] not in SCENARIOS:
        raise ConfigError(f"run.scenario must be one of {sorted(SCENARIOS)}")
    for m in run["methods"]:
        if m not in METHODS:
            raise ConfigError(f"run.methods entry {m!r} not in {METHODS}")
    for s in run["settings"]:
        if str(s).upper() not in ("A", "B", "C"):
            raise ConfigError(f"run.settings entry {s!r} must be A, B, or C")
    if any(int(n) < 1 for n in run["n"]):
        raise ConfigError("run.n entries must be positive")


def _toml_dumps(d: dict, prefix: str = "") -> str:
    lines = []
    scalars = {k: v for k, v in d.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in d.items() if isinstance(v, dict)}
    for k, v in scalars.items():
        lines.append(f"{k} = {_toml_value(v)}")
    for k, v in tables.items():
        name = f"{prefix}.{k}" if prefix else k
        lines.append("")
        lines.append(f"[{name}]")
        lines.append(_toml_dumps(v, name))
    return "\n".join(line for line in lines if line is not None)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.toml").write_text(_toml_dumps(cfg) + "\n")


def _learner_config(d: dict) -> LearnerConfig:
    try:
        return LearnerConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad learner config {d}: {exc}") from None


def _costq_config(cfg: dict, setting: str, seed: int) -> engine.CostqConfig:
    learners = cfg["learners"]
    return engine.CostqConfig(
        n_folds=int(cfg["crossfit"]["n_folds"]),
        clip=float(cfg["crossfit"]["clip"]),
        seed=seed,
        propensity1=_learner_config(learners["propensity1"]),
        propensity2=_learner_config(learners["propensity2"]),
        core=_learner_config(learners["core"]),
        aux_contrast=_learner_config(learners["aux_contrast"]),
        dr_contrast=_learner_config(learners["dr_contrast"]),
        aux_contrast_stage1=_learner_config(learners["aux_contrast_stage1"]),
        dr_contrast_stage1=_learner_config(learners["dr_contrast_stage1"]),
        nested_stage2=bool(cfg["crossfit"]["nested_stage2"]),
        misspec=nuisance_misspec(str(setting)),
    )


def _resolve_costs(cfg: dict) -> Optional[CostSchedule]:
    c = cfg["costs"]
    if not c:
        return None
    if set(c) != {"c1", "c2"}:
        raise ConfigError("costs table needs both c1 and c2")
    return CostSchedule(float(c["c1"]), float(c["c2"]))


def _scenario_costs(cfg: dict) -> CostSchedule:
    override = _resolve_costs(cfg)
    return override if override is not None else SCENARIOS[cfg["run"]["scenario"]].default_costs


def _behavior(cfg: dict) -> BehaviorConfig:
    return BehaviorConfig(floor=float(cfg["behavior"]["floor"]))


EVAL_SEED_OFFSET = 500_009  # keeps evaluation draws disjoint from training seeds


def fit_method(method: str, data, costs, config: engine.CostqConfig):
    if method == "costq":
        return engine.learn_policy(data, costs, config)
    if method == "only_complete":
        return engine.LearnResult(baselines.fit_only_complete(data, costs, config), None)
    if method == "one_time":
        return engine.LearnResult(baselines.fit_one_time(data, costs, config), None)
    if method in ("always_stop", "always_test_all"):
        return engine.LearnResult(baselines.fit_fixed(method, data, costs, config), None)
    raise ConfigError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    run = cfg["run"]
    scenario = run["scenario"]
    behavior = _behavior(cfg)
    seeds = [args.seed] if args.seed is not None else run["seeds"]
    for n in run["n"]:
        for seed in seeds:
            config = ScenarioConfig(scenario=scenario, n=int(n), seed=int(seed),
                                    behavior=behavior)
            observed, full, props = simulate_observed(config)
            stem = f"{scenario}_n{n}_seed{seed}"
            save_dataset_csv(observed, str(out_dir / f"{stem}_observed.csv"))
            save_dataset_csv(full, str(out_dir / f"{stem}_full.csv"))
            props.save_csv(str(out_dir / f"{stem}_propensities.csv"))
            print(f"wrote {stem} (n={n})")
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    data = load_dataset_csv(args.data)
    costs = _scenario_costs(cfg)
    config = _costq_config(cfg, args.setting, args.seed if args.seed is not None else 0)
    result = fit_method(args.method, data, costs, config)
    result.policy.save(args.out)
    if args.diagnostics:
        diag = result.diagnostics.to_json_dict() if result.diagnostics else {
            "method": args.method, "n": len(data)
        }
        Path(args.diagnostics).write_text(json.dumps(diag, indent=1))
    print(f"wrote policy {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    policy = engine.load_policy(args.policy)
    data = load_dataset_csv(args.data)
    report = run_evaluation(policy, data, policy.costs,
                                   method=getattr(policy, "method", ""))
    out = Path(args.out)
    out.write_text(json.dumps(report.to_json_dict(), indent=1))
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EvaluationReport.CSV_COLUMNS)
        writer.writerow(report.csv_row())
    print(f"wrote report {out}")
    return 0


def _compare_cell(payload: dict) -> tuple[list[dict], list[str]]:
    """One (setting, n, seed) cell of a comparison run: simulate, fit every
    method, evaluate on a fresh fully observed draw. Importable at top level
    so process pools can run it."""
    cfg = payload["cfg"]
    setting, n, seed = payload["setting"], payload["n"], payload["seed"]
    run = cfg["run"]
    scenario = run["scenario"]
    costs = _scenario_costs(cfg)
    rows, errors = [], []
    try:
        sim_cfg = ScenarioConfig(scenario=scenario, n=n, seed=seed, behavior=_behavior(cfg))
        train, _, _ = simulate_observed(sim_cfg)
        eval_data = generate_full_dataset(SCENARIOS[scenario], run["eval_n"],
                                          seed + EVAL_SEED_OFFSET)
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        return [], [f"setting={setting} n={n} seed={seed}: simulation failed: {exc}"]
    for method in run["methods"]:
        try:
            config = _costq_config(cfg, setting, seed)
            result = fit_method(method, train, costs, config)
            vhat = result.diagnostics.value_estimate if result.diagnostics else None
            report = run_evaluation(result.policy, eval_data, costs,
                                           value_estimate=vhat, method=method)
            rows.append({
                "setting": str(setting), "scenario": scenario, "n_train": n,
                "seed": seed, "report": report.csv_row(),
            })
        except Exception as exc:  # noqa: BLE001
            errors.append(f"setting={setting} n={n} seed={seed} method={method}: {exc}")
    return rows, errors


def _job_count(args, cfg: dict) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    env = os.environ.get("COSTQ_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"COSTQ_JOBS must be an integer, got {env!r}") from None
    return max(1, int(cfg["run"]["jobs"]))


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    run = cfg["run"]
    cells = [
        {"cfg": cfg, "setting": str(setting), "n": int(n), "seed": int(seed)}
        for setting in run["settings"]
        for n in run["n"]
        for seed in run["seeds"]
    ]
    jobs = _job_count(args, cfg)
    all_rows, all_errors = [], []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rows, errors in pool.map(_compare_cell, cells):
                all_rows.extend(rows)
                all_errors.extend(errors)
    else:
        for cell in cells:
            rows, errors = _compare_cell(cell)
            all_rows.extend(rows)
            all_errors.extend(errors)

    all_rows.sort(key=lambda r: (r["setting"], r["n_train"], r["seed"], r["report"][0]))
    out_csv = out_dir / "results.csv"
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "scenario", "n_train", "seed",
                         *EvaluationReport.CSV_COLUMNS])
        for row in all_rows:
            writer.writerow([row["setting"], row["scenario"], row["n_train"],
                             row["seed"], *row["report"]])
    for err in all_errors:
        print(f"FAILED {err}", file=sys.stderr)
    print(f"wrote {out_csv} ({len(all_rows)} rows, {len(all_errors)} failures)")
    return 4 if all_errors else 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    try:
        policy = engine.load_policy(args.policy)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load policy file {args.policy}: {exc}") from None
    app = create_app(policy)
    host, _, port = args.bind.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costq",
                                     description="cost-optimal sequential testing experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write simulated datasets")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("fit", help="fit a policy to a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--setting", default="A", choices=["A", "B", "C"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", default=None)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("evaluate", help="evaluate a policy file on a dataset")
    p.add_argument("--policy", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="run the full method comparison grid")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("serve", help="serve a policy over HTTP")
    p.add_argument("--policy", required=True)
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CostqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
