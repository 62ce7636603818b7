"""CSV traces, JSON run manifests and tidy plot data.

Trace layout (``SCHEMA_VERSION = 1``)::

    # schema_version=1
    iteration,phase,grads_per_chain,step_size,L,eevpd,eevpd_wanted,equipartition,
    max_fluctuation,acceptance,divergent_fraction,bmax,bavg

One row per iteration. Floats are written with ``repr`` (shortest string that
round-trips exactly), missing values as ``nan``. Nothing in a trace depends on
wall-clock time or on the worker count, so equal runs give equal bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import sys
from typing import Iterable, Sequence

import numpy as np
import scipy

from .diagnostics import ADJUSTED, UNADJUSTED, RunRecord

SCHEMA_VERSION = 1

TRACE_COLUMNS = (
    "iteration",
    "phase",
    "grads_per_chain",
    "step_size",
    "L",
    "eevpd",
    "eevpd_wanted",
    "equipartition",
    "max_fluctuation",
    "acceptance",
    "divergent_fraction",
    "bmax",
    "bavg",
)
_INT_COLUMNS = ("iteration", "grads_per_chain")
FLOAT_COLUMNS = tuple(c for c in TRACE_COLUMNS if c not in _INT_COLUMNS and c != "phase")

# y-series emitted by plot_rows, in output order
PLOT_SERIES = ("bmax", "bavg", "equipartition", "eevpd", "eevpd_wanted", "step_size", "L", "acceptance",
               "max_fluctuation")
PHASE_SWITCH = "phase_switch"


class TraceFormatError(ValueError):
    """Raised for a malformed trace; the message names the offending line."""


def _fmt(value: float) -> str:
    return repr(float(value))


def record_row(rec: RunRecord) -> list[str]:
    return [
        str(rec.iteration),
        rec.phase,
        str(rec.gradient_calls_per_chain),
        _fmt(rec.step_size),
        _fmt(rec.L),
        _fmt(rec.eevpd),
        _fmt(rec.eevpd_wanted),
        _fmt(rec.equipartition),
        _fmt(rec.max_fluctuation),
        _fmt(rec.acceptance),
        _fmt(rec.divergent_fraction),
        _fmt(rec.b2_max),
        _fmt(rec.b2_avg),
    ]


def format_trace(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for rec in records:
        writer.writerow(record_row(rec))
    return buf.getvalue()


def write_trace(path, records: Iterable[RunRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_trace(records))


def parse_trace(text: str, source: str = "<trace>") -> list[dict]:
    """Parse trace text into one dict per row, validating as it goes.

    Raises:
        TraceFormatError: with ``source:line`` of the first problem.
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# schema_version="):
        raise TraceFormatError(f"{source}:1: missing '# schema_version=' header")
    version = lines[0].split("=", 1)[1].strip()
    if version != str(SCHEMA_VERSION):
        raise TraceFormatError(f"{source}:1: unsupported schema version {version!r}")
    if len(lines) < 2:
        raise TraceFormatError(f"{source}:2: missing column header")
    reader = csv.reader(lines[1:])
    header = next(reader)
    if tuple(header) != TRACE_COLUMNS:
        raise TraceFormatError(f"{source}:2: expected columns {','.join(TRACE_COLUMNS)}")
    rows = []
    last_grads = -1
    for offset, fields in enumerate(reader):
        lineno = offset + 3
        if not fields:
            continue
        if len(fields) != len(TRACE_COLUMNS):
            raise TraceFormatError(f"{source}:{lineno}: expected {len(TRACE_COLUMNS)} fields, got {len(fields)}")
        row = dict(zip(TRACE_COLUMNS, fields))
        try:
            for c in _INT_COLUMNS:
                row[c] = int(row[c])
            for c in FLOAT_COLUMNS:
                row[c] = float(row[c])
        except ValueError as exc:
            raise TraceFormatError(f"{source}:{lineno}: {exc}") from None
        if row["phase"] not in (UNADJUSTED, ADJUSTED):
            raise TraceFormatError(f"{source}:{lineno}: unknown phase {row['phase']!r}")
        if row["grads_per_chain"] < last_grads:
            raise TraceFormatError(f"{source}:{lineno}: gradient counter decreased")
        last_grads = row["grads_per_chain"]
        rows.append(row)
    return rows


def read_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return parse_trace(f.read(), str(path))


def plot_rows(rows: Sequence[dict]) -> list[tuple[str, int, float]]:
    """Tidy ``(series, grads_per_chain, value)`` triples.

    Every series in :data:`PLOT_SERIES` gets one entry per trace row. If the
    trace changes phase, a final ``phase_switch`` row sits at the gradient
    counter reached when the unadjusted phase ended; its value is the index
    of the first adjusted iteration.
    """
    out = [(name, row["grads_per_chain"], row[name]) for name in PLOT_SERIES for row in rows]
    for prev, row in zip(rows, rows[1:]):
        if prev["phase"] == UNADJUSTED and row["phase"] == ADJUSTED:
            out.append((PHASE_SWITCH, prev["grads_per_chain"], float(row["iteration"])))
            break
    return out


def format_plot_rows(triples) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("series", "grads_per_chain", "value"))
    for name, grads, value in triples:
        writer.writerow((name, grads, _fmt(value)))
    return buf.getvalue()


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def versions() -> dict:
    from . import __version__

    return {
        "laps": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def build_manifest(config: dict, **extra) -> dict:
    manifest = {"schema_version": SCHEMA_VERSION, "config": config, "versions": versions()}
    manifest.update(extra)
    return _jsonable(manifest)


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
