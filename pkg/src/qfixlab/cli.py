"""Command-line entry point: ``run``, ``sweep``, ``verify`` and ``fit``.

Exit codes: 0 success, 1 refused or failed verification, 2 invalid input,
3 training divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from . import verification
from .envs import EnvError, env_from_dict
from .mixers import MixerError, MixerSpec
from .training import ConfigError, TrainConfig, TrainingDiverged, run_experiment

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3

METRIC_FIELDS = ("step", "seed", "td_loss", "anneal_loss", "eval_return_mean", "eval_return_std", "epsilon", "lambda_delta")
SUMMARY_FIELDS = ("seed", "step", "eval_return_mean", "eval_return_std", "td_loss", "anneal_loss")


@dataclass
class ExperimentConfig:
    env: dict
    mixer: MixerSpec
    train: TrainConfig
    seeds: list[int]
    output_dir: str | None = None
    eval_interval: int = 1000
    eval_episodes: int = 10


_TOP_KEYS = {"env", "mixer", "train", "seeds", "output_dir", "eval_interval", "eval_episodes", "grid"}


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config document; every problem is reported as a ``(field, message)`` pair."""
    errs: list[tuple[str, str]] = []
    if not isinstance(doc, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    for key in sorted(set(doc) - _TOP_KEYS):
        errs.append((key, "unknown field"))

    env = doc.get("env")
    if isinstance(env, str):
        path = Path(env) if base_dir is None or Path(env).is_absolute() else base_dir / env
        try:
            env = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            errs.append(("env", f"cannot read env file {path}: {exc}"))
            env = None
    if env is None and not any(f == "env" for f, _ in errs):
        errs.append(("env", "missing"))
    elif env is not None:
        try:
            env_from_dict(env)
        except (EnvError, TypeError, ValueError) as exc:
            errs.append(("env", str(exc)))

    mixer = None
    mdoc = doc.get("mixer")
    if isinstance(mdoc, str):
        mdoc = {"kind": mdoc}
    if not isinstance(mdoc, dict):
        errs.append(("mixer", "missing or not an object"))
    else:
        known = {f.name for f in fields(MixerSpec)}
        for key in sorted(set(mdoc) - known):
            errs.append((f"mixer.{key}", "unknown field"))
        if "kind" not in mdoc:
            errs.append(("mixer.kind", "missing"))
        else:
            try:
                mixer = MixerSpec(**{k: v for k, v in mdoc.items() if k in known})
            except MixerError as exc:
                field_name = "mixer.kind" if "kind" in str(exc) else "mixer.conditioning" if "conditioning" in str(exc) else "mixer"
                errs.append((field_name, str(exc)))
            except TypeError as exc:
                errs.append(("mixer", str(exc)))

    train = None
    tdoc = doc.get("train", {})
    if not isinstance(tdoc, dict):
        errs.append(("train", "must be an object"))
    else:
        known = {f.name for f in fields(TrainConfig)} - {"seed"}
        for key in sorted(set(tdoc) - known):
            errs.append((f"train.{key}", "unknown field"))
        try:
            train = TrainConfig(**{k: v for k, v in tdoc.items() if k in known})
            train.validate()
        except ConfigError as exc:
            errs.extend((f"train.{f}", m) for f, m in exc.errors)
        except TypeError as exc:
            errs.append(("train", str(exc)))

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        errs.append(("seeds", "must be a non-empty list of integers"))
    elif len(set(seeds)) != len(seeds):
        errs.append(("seeds", "must be distinct"))

    for key in ("eval_interval", "eval_episodes"):
        val = doc.get(key, 1)
        if not isinstance(val, int) or val < 1:
            errs.append((key, "must be an integer >= 1"))
    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(
        env=env,
        mixer=mixer,
        train=train,
        seeds=list(seeds),
        output_dir=doc.get("output_dir"),
        eval_interval=doc.get("eval_interval", 1000),
        eval_episodes=doc.get("eval_episodes", 10),
    )


def load_config(path: str | Path) -> tuple[dict, ExperimentConfig]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError([("--config", f"cannot read {path}: {exc}")]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([("--config", f"malformed JSON: {exc}")]) from exc
    return doc, parse_config(doc, path.parent)


# -- run ----------------------------------------------------------------------


def _run_seed(args: tuple[dict, MixerSpec, TrainConfig, int, int, int]) -> tuple[int, list[dict], dict | None]:
    env_doc, spec, train, seed, eval_interval, eval_episodes = args
    cfg = replace(train, seed=seed)
    try:
        res = run_experiment(
            lambda rng: env_from_dict(env_doc, seed=int(rng.integers(2**63))),
            spec,
            cfg,
            eval_interval=eval_interval,
            eval_episodes=eval_episodes,
        )
    except TrainingDiverged as exc:
        return seed, [], exc.dump()
    return seed, res.records, None


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def execute(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    """Run every seed, then write ``metrics.jsonl`` and ``summary.csv`` in seed order."""
    jobs = [(cfg.env, cfg.mixer, cfg.train, s, cfg.eval_interval, cfg.eval_episodes) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for _, records, _ in results:
            for rec in records:
                fh.write(json.dumps({k: rec[k] for k in METRIC_FIELDS}) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_FIELDS)
        for seed, records, _ in results:
            if records:
                last = records[-1]
                writer.writerow([_fmt(last[k]) for k in SUMMARY_FIELDS])
    diverged = [(seed, dump) for seed, _, dump in results if dump is not None]
    if diverged:
        for seed, dump in diverged:
            path = out / f"divergence_seed{seed}.json"
            path.write_text(json.dumps(dump, indent=2))
            print(f"seed {seed} diverged at step {dump['step']}; dump written to {path}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _prepare_out(out: Path, force: bool) -> bool:
    existing = [n for n in ("metrics.jsonl", "summary.csv", "report.json") if (out / n).exists()]
    if existing and not force:
        print(f"refusing to overwrite {out / existing[0]}; pass --force", file=sys.stderr)
        return False
    return True


def _print_config_errors(exc: ConfigError) -> None:
    for field_name, msg in exc.errors:
        print(f"config error: {field_name}: {msg}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        _, cfg = load_config(args.config)
    except ConfigError as exc:
        _print_config_errors(exc)
        return EXIT_INVALID
    out = Path(args.out or cfg.output_dir or "runs/latest")
    if not _prepare_out(out, args.force):
        return EXIT_FAIL
    out.mkdir(parents=True, exist_ok=True)
    return execute(cfg, out, args.workers)


def _set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if isinstance(node.get(p), str) and p == "mixer":
            node[p] = {"kind": node[p]}
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def cmd_sweep(args: argparse.Namespace) -> int:
    """Cartesian grid over dotted config keys listed under ``grid``; one run directory per point."""
    try:
        doc, _ = load_config(args.config)
        grid = doc.get("grid")
        if not isinstance(grid, dict) or not grid or not all(isinstance(v, list) and v for v in grid.values()):
            raise ConfigError([("grid", "sweep needs a non-empty object of key -> non-empty value list")])
        base_dir = Path(args.config).parent
        keys = sorted(grid)
        points = []
        for values in itertools.product(*(grid[k] for k in keys)):
            point = copy.deepcopy({k: v for k, v in doc.items() if k != "grid"})
            for k, v in zip(keys, values):
                _set_dotted(point, k, v)
            points.append((dict(zip(keys, values)), parse_config(point, base_dir)))
    except ConfigError as exc:
        _print_config_errors(exc)
        return EXIT_INVALID
    out = Path(args.out or doc.get("output_dir") or "runs/sweep")
    if not _prepare_out(out, args.force):
        return EXIT_FAIL
    code = EXIT_OK
    rows = []
    for i, (assignment, cfg) in enumerate(points):
        run_dir = out / f"run{i:03d}"
        if not _prepare_out(run_dir, args.force):
            return EXIT_FAIL
        code = max(code, execute(cfg, run_dir, args.workers))
        with open(run_dir / "summary.csv") as fh:
            for row in csv.DictReader(fh):
                rows.append({"run": run_dir.name, **{k: json.dumps(v) for k, v in assignment.items()}, **row})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["run", *keys, *SUMMARY_FIELDS])
        writer.writeheader()
        writer.writerows(rows)
    return code


# -- verify and fit -----------------------------------------------------------


def cmd_verify(args: argparse.Namespace) -> int:
    out = Path(args.out or "report.json")
    if out.exists() and not args.force:
        print(f"refusing to overwrite {out}; pass --force", file=sys.stderr)
        return EXIT_FAIL
    reports = verification.run_suite(args.suite, seed=args.seed, instances=args.instances)
    doc = {
        "suite": args.suite,
        "instances": sum(r.instances for r in reports),
        "failures": sum(r.failures for r in reports),
        "checks": [r.to_dict() for r in reports],
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2))
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        line = f"{status:4s} {r.check_name}: {r.failures}/{r.instances} failures"
        if not r.passed and r.witnesses:
            line += f"; witness {json.dumps(verification._jsonable(r.witnesses[0]))}"
        print(line)
    print(f"report written to {out}")
    return EXIT_OK if doc["failures"] == 0 else EXIT_FAIL


def cmd_fit(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.target).read_text())
        table = verification.JointValueTable.from_dict(doc)
        spec = MixerSpec(args.mixer)
    except (OSError, json.JSONDecodeError, verification.VerificationError, MixerError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        res = verification.fit_target_table(spec, table, steps=args.steps, lr=args.lr, stop_below=args.stop_below, seed=args.seed)
    except verification.NotIgmError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    report = {"mixer": args.mixer, **res.summary()}
    print(json.dumps(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfixlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_text in (
        ("run", cmd_run, "train every seed of one experiment config"),
        ("sweep", cmd_sweep, "train a grid of configs"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--workers", type=int, default=1, help="parallel seed workers")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.set_defaults(fn=fn)

    p = sub.add_parser("verify", help="run property suites and write a JSON report")
    p.add_argument("--suite", default="all", choices=[*verification.SUITES, "all"])
    p.add_argument("--out", help="report path (default: report.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, help="override the per-check instance count")
    p.add_argument("--force", action="store_true", help="overwrite an existing report")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("fit", help="fit a mixer to a joint value table with frozen utilities")
    p.add_argument("target", help='JSON {"values": nested lists, "utilities": [[...], ...]}')
    p.add_argument("--mixer", required=True, help="mixer kind")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--stop-below", type=float, default=1e-3, help="stop once the sup error is below this")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the report to this path")
    p.set_defaults(fn=cmd_fit)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
