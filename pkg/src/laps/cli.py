"""Command-line entry point: ``laps run``, ``laps bench``, ``laps plotdata``.

Settings resolve as command-line flags over the ``--config`` JSON file over
built-in defaults. The resolved settings are written to the run manifest.

Exit codes: 0 success, 1 a benchmark cell failed, 2 bad configuration or
input, 3 the adjusted step size could not be bracketed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import bench, traces
from .adaptation import BisectionError
from .diagnostics import grads_to_threshold
from .sampler import AdaptationConfig, laps_run
from .targets import available_targets, get_target

log = logging.getLogger("laps")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_BISECTION = 3

TRACE_FILE = "trace.csv"
MANIFEST_FILE = "manifest.json"
BENCH_FILE = "bench.csv"

RUN_DEFAULTS = {
    "target": None,
    "dim": None,
    "condition": None,
    "target_seed": None,
    "chains": 4096,
    "seed": 0,
    "maxiter": 1000,
    "integrator": None,
    "unadjusted_integrator": "lf",
    "equipartition": "diag",
    "alpha": 2.0,
    "C": 0.025,
    "acc_target": None,
    "fluctuation_threshold": 0.01,
    "chunk_size": 512,
    "out": "laps_out",
    "workers": None,
}

_EQUIPARTITION = {"diag": "diagonal", "full": "full_rank"}


class ConfigError(ValueError):
    pass


def _normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return {_normalize_key(k): v for k, v in raw.items()}


def resolve(flags: dict, config: dict, defaults: dict = RUN_DEFAULTS) -> dict:
    """Merge settings: non-``None`` flags win over the config file, which wins over defaults."""
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    resolved = dict(defaults)
    resolved.update(config)
    resolved.update({k: v for k, v in flags.items() if k in defaults and v is not None})
    if resolved["workers"] is None:
        resolved["workers"] = os.cpu_count() or 1
    return resolved


def target_params(settings: dict) -> dict:
    params = {}
    if settings["dim"] is not None:
        params["dim"] = int(settings["dim"])
    if settings["condition"] is not None:
        params["condition"] = float(settings["condition"])
    if settings["target_seed"] is not None:
        params["seed"] = int(settings["target_seed"])
    return params


def adaptation_config(settings: dict) -> AdaptationConfig:
    mode = settings["equipartition"]
    if mode not in _EQUIPARTITION:
        raise ConfigError(f"equipartition must be one of {sorted(_EQUIPARTITION)}, got {mode!r}")
    try:
        return AdaptationConfig(
            C=float(settings["C"]),
            alpha=float(settings["alpha"]),
            fluctuation_threshold=float(settings["fluctuation_threshold"]),
            a_targeted=None if settings["acc_target"] is None else float(settings["acc_target"]),
            maxiter=int(settings["maxiter"]),
            equipartition_mode=_EQUIPARTITION[mode],
            unadjusted_integrator=settings["unadjusted_integrator"],
            adjusted_integrator=settings["integrator"],
            chunk_size=int(settings["chunk_size"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def build_problem(settings: dict):
    name = settings["target"]
    if name is None:
        raise ConfigError("no target given (use --target or the config file)")
    params = target_params(settings)
    if "dim" in params and params["dim"] < 2:
        raise ConfigError(f"dimension must be at least 2, got {params['dim']}")
    try:
        problem = get_target(name, **params)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"target {name!r}: {exc}") from None
    if "dim" in params and problem.target.dim != params["dim"]:
        raise ConfigError(f"target {name!r} has fixed dimension {problem.target.dim}")
    return problem, params


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output path {out} is not writable: {exc}") from None
    return out


def cmd_run(args) -> int:
    config = load_config(args.config) if args.config else {}
    settings = resolve(vars(args), config)
    cfg = adaptation_config(settings)
    problem, params = build_problem(settings)
    chains, seed = int(settings["chains"]), int(settings["seed"])
    if chains < 2:
        raise ConfigError("need at least two chains")
    out = _prepare_out(settings["out"])

    ens, records = laps_run(problem.target, problem.init, chains, cfg, seed, problem.ground_truth,
                            int(settings["workers"]))
    traces.write_trace(out / TRACE_FILE, records)
    manifest = traces.build_manifest(
        settings,
        adaptation=cfg.to_dict(),
        target={"name": settings["target"], "dim": problem.target.dim, "params": params},
        seed=seed,
        trace=TRACE_FILE,
        summary={
            "iterations": len(records),
            "gradient_calls_per_chain": ens.gradient_calls_per_chain,
            "switch_iteration": ens.switch_iteration,
            "final_step_size": ens.step_size,
            "final_bmax": records[-1].b2_max,
            "grads_to_bmax_0.01": grads_to_threshold(records, 0.01, "max"),
        },
    )
    traces.write_manifest(out / MANIFEST_FILE, manifest)
    if not args.quiet:
        print(f"{len(records)} iterations, {ens.gradient_calls_per_chain} gradient calls per chain, "
              f"switch at {ens.switch_iteration}, final b2_max {records[-1].b2_max:.3g}")
        print(f"wrote {out / TRACE_FILE} and {out / MANIFEST_FILE}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.suite:
        try:
            with open(args.suite, encoding="utf-8") as f:
                cells = bench.suite_from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read suite {args.suite}: {exc}") from None
    else:
        cells = bench.default_suite(tuple(args.chains), tuple(args.seeds))
        if args.targets:
            unknown = set(args.targets) - set(available_targets())
            if unknown:
                raise ConfigError(f"unknown targets: {', '.join(sorted(unknown))}")
            cells = [c for c in cells if c.target in args.targets]
    if args.maxiter is not None:
        cells = [bench.BenchCell(c.target, c.chains, c.seed, c.params, args.maxiter) for c in cells]
    out = _prepare_out(args.out)
    workers = args.workers or os.cpu_count() or 1

    def progress(row):
        if not args.quiet:
            print(f"  {row['target']} M={row['chains']} seed={row['seed']}: {row['status']}", file=sys.stderr)

    rows = bench.run_suite(cells, args.threshold, workers=workers, progress=progress)
    traces.write_text(out / BENCH_FILE, bench.format_csv(rows))
    print(bench.format_table(rows, args.threshold), end="")
    n_failed = sum(bench.failed(r) for r in rows)
    if n_failed:
        print(f"{n_failed} of {len(rows)} cells failed", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_plotdata(args) -> int:
    try:
        rows = traces.read_trace(args.trace)
    except OSError as exc:
        raise ConfigError(f"cannot read trace: {exc}") from None
    except traces.TraceFormatError as exc:
        raise ConfigError(str(exc)) from None
    traces.write_text(args.out, traces.format_plot_rows(traces.plot_rows(rows)))
    return EXIT_OK


def _positive_float(text):
    value = float(text)
    if not value > 0 or math.isinf(value):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laps", description="Ensemble microcanonical sampler with self-tuning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="sample a target and write a trace and manifest")
    run.add_argument("--target", help=f"target name ({', '.join(available_targets())})")
    run.add_argument("--dim", type=int)
    run.add_argument("--condition", type=_positive_float, help="condition number (icg)")
    run.add_argument("--target-seed", type=int, help="seed of the random target construction (icg)")
    run.add_argument("--chains", type=int, help="ensemble size M (default 4096)")
    run.add_argument("--seed", type=int)
    run.add_argument("--maxiter", type=int)
    run.add_argument("--integrator", choices=["lf", "mn2", "mn4"], help="adjusted-phase integrator")
    run.add_argument("--unadjusted-integrator", choices=["lf", "mn2", "mn4"])
    run.add_argument("--equipartition", choices=sorted(_EQUIPARTITION))
    run.add_argument("--alpha", type=_positive_float)
    run.add_argument("--C", type=_positive_float)
    run.add_argument("--acc-target", type=_positive_float)
    run.add_argument("--fluctuation-threshold", type=_positive_float)
    run.add_argument("--chunk-size", type=int)
    run.add_argument("--out", help="output directory (default laps_out)")
    run.add_argument("--workers", type=int, help="threads (default: all cores); results do not depend on it")
    run.add_argument("--config", help="JSON file with the same keys as the flags")
    run.add_argument("-q", "--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="grads-to-threshold table over targets, chain counts and seeds")
    b.add_argument("--suite", help="JSON suite file; overrides --targets/--chains/--seeds")
    b.add_argument("--targets", nargs="+")
    b.add_argument("--chains", type=int, nargs="+", default=[256, 4096])
    b.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    b.add_argument("--threshold", type=_positive_float, default=0.01)
    b.add_argument("--maxiter", type=int)
    b.add_argument("--out", default="laps_bench")
    b.add_argument("--workers", type=int)
    b.add_argument("-q", "--quiet", action="store_true")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("plotdata", help="tidy CSV series from a trace")
    p.add_argument("trace")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"laps: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BisectionError as exc:
        print(f"laps: step-size bisection failed: {exc}", file=sys.stderr)
        return EXIT_BISECTION
    except BrokenPipeError:
        # output piped into e.g. head; silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
