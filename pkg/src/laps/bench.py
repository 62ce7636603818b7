"""Desk-scale benchmark suites measured in gradient calls per chain."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .diagnostics import grads_to_threshold
from .sampler import AdaptationConfig, laps_run
from .targets import get_target, standard_gaussian, standard_normal_init

log = logging.getLogger(__name__)

OK = "ok"
NOT_REACHED = "not_reached"
ERROR = "error"
FAILURE_MARKER = "FAIL"


@dataclass(frozen=True)
class BenchCell:
    target: str
    chains: int
    seed: int
    params: dict = field(default_factory=dict)
    maxiter: int = 500


DEFAULT_TARGETS = (
    ("banana", {}, 300),
    ("gaussian", {"dim": 50}, 300),
    ("icg", {"dim": 100, "condition": 1e5}, 1000),
)


def default_suite(chains=(256, 4096), seeds=(0, 1, 2)) -> list[BenchCell]:
    return [
        BenchCell(name, m, s, dict(params), maxiter)
        for name, params, maxiter in DEFAULT_TARGETS
        for m in chains
        for s in seeds
    ]


def suite_from_dict(spec: dict) -> list[BenchCell]:
    """Build cells from ``{"targets": [{"name", "params", "maxiter"}], "chains": [...], "seeds": [...]}``."""
    try:
        targets = spec["targets"]
        chains = spec.get("chains", [256, 4096])
        seeds = spec.get("seeds", [0, 1, 2])
        return [
            BenchCell(t["name"], int(m), int(s), dict(t.get("params", {})), int(t.get("maxiter", 500)))
            for t in targets
            for m in chains
            for s in seeds
        ]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed suite: {exc}") from None


def threshold_column(threshold: float, metric: str = "max") -> str:
    return f"grads_to_b{metric}_{threshold:g}"


def run_cell(cell: BenchCell, threshold: float = 0.01, base: Optional[AdaptationConfig] = None,
             workers: int = 1) -> dict:
    """Run one cell; failures are reported in the row, never raised."""
    row = {
        "target": cell.target,
        "dim": cell.params.get("dim", ""),
        "chains": cell.chains,
        "seed": cell.seed,
        "maxiter": cell.maxiter,
    }
    col_max, col_avg = threshold_column(threshold, "max"), threshold_column(threshold, "avg")
    try:
        problem = get_target(cell.target, **cell.params)
        cfg = replace(base or AdaptationConfig(), maxiter=cell.maxiter)
        row["dim"] = problem.target.dim
        ens, records = laps_run(problem.target, problem.init, cell.chains, cfg, cell.seed,
                                problem.ground_truth, workers)
    except Exception as exc:  # recorded as a failed cell
        log.warning("cell %s failed: %s", row, exc)
        row.update({col_max: None, col_avg: None, "final_bmax": float("nan"), "switch_iteration": None,
                    "grads_total": None, "status": f"{ERROR}: {exc}"})
        return row
    g_max = grads_to_threshold(records, threshold, "max")
    row.update({
        col_max: g_max,
        col_avg: grads_to_threshold(records, threshold, "avg"),
        "final_bmax": records[-1].b2_max,
        "switch_iteration": ens.switch_iteration,
        "grads_total": ens.gradient_calls_per_chain,
        "status": OK if g_max is not None else NOT_REACHED,
    })
    return row


def run_suite(cells: Sequence[BenchCell], threshold: float = 0.01, base: Optional[AdaptationConfig] = None,
              workers: int = 1, progress=None) -> list[dict]:
    rows = []
    for cell in cells:
        rows.append(run_cell(cell, threshold, base, workers))
        if progress is not None:
            progress(rows[-1])
    return rows


def failed(row: dict) -> bool:
    return row["status"] != OK


def _cell(value, column: str = "grads_to_") -> str:
    if value is None:
        return FAILURE_MARKER if column.startswith("grads_to_") else ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0]) if rows else []
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_cell(row[c], c) for c in cols])
    return buf.getvalue()


def format_table(rows: Sequence[dict], threshold: float = 0.01) -> str:
    """Median grads-to-threshold per (target, M) over seeds, failures marked."""
    col = threshold_column(threshold, "max")
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault((row["target"], row["dim"], row["chains"]), []).append(row)
    header = f"{'target':<10} {'d':>5} {'M':>6}  {col:>18}  {'per seed'}"
    lines = [header, "-" * len(header)]
    for (target, dim, chains), group in groups.items():
        values = [r[col] for r in group]
        reached = [v for v in values if v is not None]
        med = f"{int(np.median(reached))}" if len(reached) == len(values) else FAILURE_MARKER
        per_seed = " ".join(_cell(v) for v in values)
        lines.append(f"{target:<10} {str(dim):>5} {chains:>6}  {med:>18}  {per_seed}")
    return "\n".join(lines) + "\n"


def schedule_comparison(dim: int = 50, chains: int = 4096, seed: int = 0, budget: int = 50,
                        init_scale: float = 0.1, factors=(0.25, 1.0, 4.0), workers: int = 1) -> dict:
    """Adaptive step size against fixed step sizes on a standard Gaussian.

    All runs stay unadjusted, share the seed, the cold start
    ``N(0, init_scale^2 I)`` and the gradient budget, and adapt ``L`` the
    same way; only the step-size rule differs. The reference step size is the
    median step size of the adaptive run.

    Returns:
        ``{"eps_ref": float, "adaptive": b2_avg, "fixed": {factor: b2_avg}, "records": {...}}``
    """
    problem = standard_gaussian(dim)
    init = standard_normal_init(dim, init_scale)
    base = AdaptationConfig(maxiter=budget, adjust=False)

    def final_bias(cfg):
        ens, records = laps_run(problem.target, init, chains, cfg, seed, problem.ground_truth, workers)
        return records[-1].b2_avg, records, ens.gradient_calls_per_chain

    adaptive, adaptive_records, grads = final_bias(base)
    eps_ref = float(np.median([r.step_size for r in adaptive_records]))
    fixed, fixed_records = {}, {}
    for f in factors:
        value, records, fixed_grads = final_bias(replace(base, fixed_step_size=f * eps_ref))
        if fixed_grads != grads:
            raise RuntimeError("gradient budgets differ")
        fixed[f], fixed_records[f] = value, records
    return {"eps_ref": eps_ref, "adaptive": adaptive, "fixed": fixed, "grads_per_chain": grads,
            "records": {"adaptive": adaptive_records, **{f"fixed_{f:g}": r for f, r in fixed_records.items()}}}
