"""Command-line pipeline: gen -> train -> eval -> allocate, plus curve dumps.

Every command writes ``manifest.json`` beside its outputs. Failures print a
single ``error=<Class> message=<text>`` line on stderr and exit with a code
from ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import (
    AllocationProblem,
    BudgetInfeasible,
    allocate,
    read_scores_csv,
    write_plan_csv,
)
from .models import MODEL_NAMES, ResponseModel, dumps_document
from .simkit.evaluation import evaluate, uplift_cohorts, write_cohorts
from .simkit.world import CAMPAIGNS, LoggedDataset, SchemaError, SyntheticWorld, gen_dataset, gen_world
from .trainer import TrainConfig, TrainingDiverged, train_named

EXIT_CODES = {"Failure": 1, "MissingFile": 3, "SchemaMismatch": 4, "InfeasibleBudget": 5, "TrainingDiverged": 6}


class CliError(Exception):
    kind = "Failure"


class MissingFile(CliError):
    kind = "MissingFile"


class SchemaMismatch(CliError):
    kind = "SchemaMismatch"


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFile(f"{p} does not exist")
    return p


def _load_world(path) -> SyntheticWorld:
    try:
        return SyntheticWorld.load(_require(path))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"{path}: not a world manifest ({exc})") from None


def _load_data(path, split: str) -> LoggedDataset:
    try:
        return LoggedDataset.from_csv(_require(path), split)
    except SchemaError as exc:
        raise SchemaMismatch(str(exc)) from None
    except (ValueError, StopIteration) as exc:
        raise SchemaMismatch(f"{path}: unreadable dataset ({exc})") from None


def _load_model(path) -> ResponseModel:
    try:
        return ResponseModel.load(_require(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"{path}: not a model checkpoint ({exc})") from None


def _data_paths(data_dir) -> dict[str, Path]:
    d = Path(data_dir)
    return {"world": d / "world.json", "train": d / "train.csv", "eval": d / "eval.csv"}


def _write_manifest(out: Path, command: str, config: dict, seed, inputs, outputs, started: float) -> None:
    canonical = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": version_string(),
        "duration_s": round(time.perf_counter() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> None:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = gen_world(args.seed, uniform=args.uniform_world, two_tier=args.two_tier, campaign=args.campaign)
    paths = _data_paths(out)
    world.save(paths["world"])
    gen_dataset(world, args.users, "biased", seed=1).to_csv(paths["train"])
    gen_dataset(world, args.eval_users, "uniform", seed=2, id_offset=args.users).to_csv(paths["eval"])
    config = {k: getattr(args, k) for k in ("users", "eval_users", "campaign", "uniform_world", "two_tier")}
    _write_manifest(out, "gen", config, args.seed, [], paths.values(), started)


def _model_name(args) -> str:
    name = args.model
    if args.no_aa or args.no_st:
        if not name.startswith("coman"):
            raise CliError("--no-aa/--no-st only apply to the coman family")
        aa = name in ("coman", "coman-no-st") and not args.no_aa
        st = name in ("coman", "coman-no-aa") and not args.no_st
        name = {(True, True): "coman", (False, True): "coman-no-aa",
                (True, False): "coman-no-st", (False, False): "coman-b"}[(aa, st)]
    return name


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(_require(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"{args.config}: invalid JSON ({exc})") from None
    for key in ("seed", "epochs", "batch_size", "learning_rate", "dropout"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise SchemaMismatch(f"training config: {exc}") from None


def cmd_train(args) -> None:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _data_paths(args.data)
    world = _load_world(paths["world"])
    train_data = _load_data(paths["train"], "biased-train")
    eval_data = _load_data(paths["eval"], "unbiased-eval") if paths["eval"].exists() else None
    config = _train_config(args)
    name = _model_name(args)
    result = train_named(name, train_data, world, config, eval_data)
    ckpt, trace = out / "checkpoint.json", out / "loss_trace.csv"
    result.model.save(ckpt)
    result.write_trace(trace)
    inputs = [p for p in paths.values() if p.exists()]
    _write_manifest(out, "train", {"model": name, **config.to_dict()}, config.seed, inputs, [ckpt, trace], started)


def cmd_eval(args) -> None:
    started = time.perf_counter()
    out = Path(args.out)
    model = _load_model(args.checkpoint)
    paths = _data_paths(args.data)
    world = _load_world(paths["world"])
    data = _load_data(paths["eval"], "unbiased-eval")
    report = evaluate(model, data, world)
    outputs = report.write(out)
    cohorts = out / "cohorts.csv"
    write_cohorts(cohorts, uplift_cohorts(model, data, args.groups, direction=world.direction))
    _write_manifest(out, "eval", {"groups": args.groups}, model.seed,
                    [args.checkpoint, paths["world"], paths["eval"]], [*outputs, cohorts], started)


def _parse_grid(text: str | None, default) -> np.ndarray:
    if not text:
        return np.asarray(default, dtype=float)
    try:
        if ":" in text:
            lo, hi, n = text.split(":")
            return np.linspace(float(lo), float(hi), int(n))
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise CliError(f"cannot parse treatment grid {text!r}; use lo:hi:n or a comma list") from None


def cmd_allocate(args) -> None:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scores:
        problem = read_scores_csv(_require(args.scores), args.budget)
        inputs = [args.scores]
    else:
        if not (args.checkpoint and args.data):
            raise CliError("allocate needs --scores, or --checkpoint with --data")
        model = _load_model(args.checkpoint)
        data = _load_data(_data_paths(args.data)["eval"], "unbiased-eval")
        treatments = _parse_grid(args.treatments, np.linspace(model.features.t_min, model.features.t_max, 16))
        scores = np.clip(model.predict_curves(data, treatments), 0.0, 1.0)
        problem = AllocationProblem(treatments, scores, args.budget, data.user_id)
        inputs = [args.checkpoint, _data_paths(args.data)["eval"]]
    plan = allocate(problem, tol=args.tol)
    plan_path, summary_path = out / "plan.csv", out / "plan_summary.json"
    write_plan_csv(plan_path, plan)
    summary_path.write_text(dumps_document(plan.summary(problem.budget)))
    _write_manifest(out, "allocate", {"budget": args.budget, "tol": args.tol, "treatments": args.treatments},
                    args.seed, inputs, [plan_path, summary_path], started)


def cmd_curves(args) -> None:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint)
    source = Path(args.context) if args.context else _data_paths(args.data)["eval"]
    data = _load_data(source, "unbiased-eval")
    if args.limit:
        data = data.subset(slice(0, args.limit))
    grid = _parse_grid(args.grid, np.linspace(model.features.t_min, model.features.t_max, 16))
    curves = model.predict_curves(data, grid)
    path = out / "curves.csv"
    with open(path, "w") as fh:
        fh.write("user_id,city,period,treatment,predicted\n")
        for i in range(len(data)):
            for t, p in zip(grid, curves[i]):
                fh.write(f"{data.user_id[i]},{data.city[i]},{data.period[i]},{t:.17g},{p:.17g}\n")
    _write_manifest(out, "curves", {"grid": grid.tolist(), "limit": args.limit}, model.seed,
                    [args.checkpoint, source], [path], started)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coman", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic world with biased-train and unbiased-eval data")
    g.add_argument("--seed", type=int, default=0, help="world seed")
    g.add_argument("--users", type=int, default=100_000)
    g.add_argument("--eval-users", type=int, default=5_000)
    g.add_argument("--campaign", choices=sorted(CAMPAIGNS), default="amount")
    g.add_argument("--uniform-world", action="store_true", help="give every cell the same curve")
    g.add_argument("--two-tier", action="store_true", help="steep and flat sensitivity tiers")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a response model")
    t.add_argument("--model", choices=MODEL_NAMES, default="coman")
    t.add_argument("--no-aa", action="store_true", help="drop the adaptive activation gates")
    t.add_argument("--no-st", action="store_true", help="use a global FPM head instead of S-t attention")
    t.add_argument("--data", required=True, help="directory written by gen")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--groups", type=int, default=5, help="uplift cohorts")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("allocate", help="budget-constrained treatment assignment")
    a.add_argument("--scores", help="CSV user_id,treatment_value,response_score")
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--treatments", help="lo:hi:n or comma list (checkpoint mode)")
    a.add_argument("--budget", type=float, required=True)
    a.add_argument("--tol", type=float, default=1e-10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_allocate)

    c = sub.add_parser("curves", help="dump predicted response curves")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", help="directory written by gen (uses eval.csv)")
    c.add_argument("--context", help="dataset-format CSV of contexts")
    c.add_argument("--grid", help="lo:hi:n or comma list")
    c.add_argument("--limit", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_curves)
    return parser


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, FileNotFoundError):
        return "MissingFile"
    if isinstance(exc, SchemaError):
        return "SchemaMismatch"
    if isinstance(exc, BudgetInfeasible):
        return "InfeasibleBudget"
    if isinstance(exc, TrainingDiverged):
        return "TrainingDiverged"
    return "Failure"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "curves" and not (args.data or args.context):
        args_error = CliError("curves needs --data or --context")
        print(f"error={args_error.kind} message={json.dumps(str(args_error))}", file=sys.stderr)
        return EXIT_CODES[args_error.kind]
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        kind = _classify(exc)
        message = " ".join(str(exc).split())
        print(f"error={kind} message={json.dumps(message)}", file=sys.stderr)
        return EXIT_CODES[kind]
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
