"""Second-moment bias against ground truth, and per-iteration run records."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .adaptation import ensemble_expectation
from .targets import GroundTruth

UNADJUSTED = "unadjusted"
ADJUSTED = "adjusted"


@dataclass(frozen=True)
class BiasReport:
    b2: np.ndarray
    b2_max: float
    b2_avg: float
    gradient_calls_per_chain: int = 0
    iteration: int = 0
    phase: str = UNADJUSTED


@dataclass
class RunRecord:
    iteration: int
    phase: str
    step_size: float
    L: float
    gradient_calls_per_chain: int
    eevpd: float = float("nan")
    eevpd_wanted: float = float("nan")
    equipartition: float = float("nan")
    max_fluctuation: float = float("nan")
    acceptance: float = float("nan")
    divergent_fraction: float = 0.0
    bias: Optional[BiasReport] = None

    @property
    def b2_max(self) -> float:
        return self.bias.b2_max if self.bias is not None else float("nan")

    @property
    def b2_avg(self) -> float:
        return self.bias.b2_avg if self.bias is not None else float("nan")


def bias(x: np.ndarray, ground_truth: GroundTruth, **meta) -> BiasReport:
    """Normalized squared error of the ensemble second moments.

    ``b2[i] = (mean_m x_i^2 - E_p[x_i^2])^2 / Var_p[x_i^2]``. ``x`` must be in
    the target's original coordinates. Extra keywords (``iteration``,
    ``phase``, ``gradient_calls_per_chain``) are stored on the report.
    """
    moments = ensemble_expectation(np.asarray(x) ** 2)
    b2 = (moments - ground_truth.second_moments) ** 2 / ground_truth.second_moment_variances
    return BiasReport(b2, float(np.max(b2)), float(np.mean(b2)), **meta)


def grads_to_threshold(records: Sequence[RunRecord], threshold: float = 0.01, metric: str = "max") -> Optional[int]:
    """Gradient calls per chain after which the bias stays below ``threshold``.

    Returns the counter of the first record of the final run of records with
    the metric below threshold, provided that run reaches the end of the
    trace; ``None`` otherwise. Records without a bias report are ignored.
    """
    if metric not in ("max", "avg"):
        raise ValueError("metric must be 'max' or 'avg'")
    answer = None
    for rec in records:
        if rec.bias is None:
            continue
        value = rec.bias.b2_max if metric == "max" else rec.bias.b2_avg
        if value < threshold:
            if answer is None:
                answer = rec.gradient_calls_per_chain
        else:
            answer = None
    return answer


def series(records: Iterable[RunRecord], name: str) -> np.ndarray:
    return np.array([getattr(r, name) for r in records], dtype=np.float64)
