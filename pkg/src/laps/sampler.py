"""Two-phase ensemble sampler: adaptive unadjusted MCLMC, then tuned MAMS.

Iterations are bulk-synchronous. Inside one iteration the ensemble is cut
into fixed-size chunks of chains; each chunk is advanced with its own random
stream, addressed by ``(seed, phase, iteration, chunk)``, possibly on a
different thread. Hyperparameters are only updated after all chunks are
back, from reductions over the reassembled arrays. The chunk size is part of
the configuration and the worker count is not, which is what makes a run
bitwise reproducible for any number of workers.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import rng as rngs
from .adaptation import (
    BisectionError,
    Preconditioner,
    StepSizeBisection,
    bias_bound_F,
    decoherence_update,
    eevpd,
    ensemble_expectation,
    equipartition_diag,
    equipartition_full,
    precondition,
    step_size_update,
    FluctuationMonitor,
)
from .diagnostics import ADJUSTED, UNADJUSTED, RunRecord, bias
from .integrators import ChainState, get_scheme, initial_state
from .kernels import AdjustedKernelConfig, UnadjustedKernelConfig, mams_kernel, unadjusted_kernel
from .targets import GroundTruth, InitialDistribution, TargetDistribution

log = logging.getLogger(__name__)

__all__ = ["AdaptationConfig", "EnsembleState", "ChunkedExecutor", "bisection_tune", "laps_run", "BisectionError"]


@dataclass
class AdaptationConfig:
    C: float = 0.025
    alpha: float = 2.0
    fluctuation_threshold: float = 0.01
    window_fraction: float = 0.2
    # None: 0.7 for second-order adjusted integrators, 0.9 for fourth order
    a_targeted: Optional[float] = None
    acceptance_tolerance: float = 0.03
    maxiter: int = 1000
    equipartition_mode: str = "diagonal"
    hutchinson_probes: int = 100
    step_change_clamp: tuple[float, float] = (0.3, 3.0)
    steps_per_proposal: int = 15
    partial_refresh_factor: float = 1.25
    unadjusted_integrator: str = "lf"
    # None: mn2 for d <= 200, mn4 above
    adjusted_integrator: Optional[str] = None
    divergence_tolerance: float = 0.01
    max_doublings: int = 20
    initial_step_size: Optional[float] = None
    chunk_size: int = 512
    # False runs the unadjusted phase for all maxiter iterations
    adjust: bool = True
    # freezes the unadjusted step size (schedule comparisons)
    fixed_step_size: Optional[float] = None

    def __post_init__(self):
        self.step_change_clamp = tuple(float(v) for v in self.step_change_clamp)
        if not 0 < self.C < 1:
            raise ValueError("C must lie in (0, 1)")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.fluctuation_threshold > 0:
            raise ValueError("fluctuation threshold must be positive")
        if not 0 < self.window_fraction < 1:
            raise ValueError("window fraction must lie in (0, 1)")
        if self.a_targeted is not None and not 0 < self.a_targeted < 1:
            raise ValueError("targeted acceptance must lie in (0, 1)")
        if self.maxiter < 1:
            raise ValueError("maxiter must be positive")
        if self.equipartition_mode not in ("diagonal", "full_rank"):
            raise ValueError("equipartition_mode must be 'diagonal' or 'full_rank'")
        if self.hutchinson_probes < 1 or self.chunk_size < 1 or self.steps_per_proposal < 1:
            raise ValueError("probe count, chunk size and steps per proposal must be positive")
        lo, hi = self.step_change_clamp
        if not 0 < lo <= 1 <= hi:
            raise ValueError("step change clamp must bracket 1")
        get_scheme(self.unadjusted_integrator)
        if self.adjusted_integrator is not None:
            get_scheme(self.adjusted_integrator)

    @property
    def window(self) -> int:
        return max(2, int(round(self.window_fraction * self.maxiter)))

    def adjusted_scheme(self, d: int):
        if self.adjusted_integrator is not None:
            return get_scheme(self.adjusted_integrator)
        return get_scheme("mn4" if d > 200 else "mn2")

    def targeted_acceptance(self, d: int) -> float:
        if self.a_targeted is not None:
            return self.a_targeted
        return 0.9 if self.adjusted_scheme(d).order >= 4 else 0.7

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnsembleState:
    """The M chains plus bookkeeping.

    ``chains`` live in the current sampling coordinates; after the switch to
    adjustment that is the preconditioned space, and :meth:`positions` maps
    back. ``ensemble_reductions`` counts reductions that fed a hyperparameter
    update; it stops growing once the step size is frozen.
    """

    chains: ChainState
    seed: int
    iteration: int = 0
    gradient_calls_per_chain: int = 0
    divergent: Optional[np.ndarray] = None
    preconditioner: Optional[Preconditioner] = None
    ensemble_reductions: int = 0
    step_size: float = float("nan")
    L: float = float("nan")
    phase: str = UNADJUSTED
    switch_iteration: Optional[int] = None
    frozen: bool = False

    @property
    def num_chains(self) -> int:
        return self.chains.x.shape[0]

    def positions(self) -> np.ndarray:
        if self.preconditioner is None:
            return self.chains.x
        return self.preconditioner.to_original(self.chains.x)


def _concat(parts):
    first = parts[0]
    if isinstance(first, tuple) and hasattr(first, "_fields"):
        return type(first)(*(_concat([p[i] for p in parts]) for i in range(len(first))))
    if isinstance(first, np.ndarray):
        return np.concatenate(parts, axis=0)
    return first


class ChunkedExecutor:
    """Applies a per-chunk function over fixed chain chunks, optionally threaded."""

    def __init__(self, n_chains: int, chunk_size: int = 512, workers: int = 1):
        self.slices = [slice(i, min(i + chunk_size, n_chains)) for i in range(0, n_chains, chunk_size)]
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 and len(self.slices) > 1 else None

    def map(self, fn: Callable, state: Optional[ChainState] = None):
        """Call ``fn(chunk_index, chunk)`` per chunk and concatenate results.

        ``chunk`` is the chunk of ``state`` or, without a state, the slice.
        """
        args = [(c, s if state is None else state.take(s)) for c, s in enumerate(self.slices)]
        if self._pool is None:
            parts = [fn(c, chunk) for c, chunk in args]
        else:
            parts = list(self._pool.map(lambda a: fn(*a), args))
        return _concat(parts)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def initialize_ensemble(target: TargetDistribution, init: InitialDistribution, n_chains: int, seed: int,
                        executor: ChunkedExecutor) -> EnsembleState:
    """Draw starting positions and align each velocity with the gradient (one gradient call)."""

    def start(c, sl):
        x = init.sample(rngs.stream(seed, rngs.INIT, c), sl.stop - sl.start)
        return initial_state(x, target)

    chains = executor.map(start)
    return EnsembleState(chains=chains, seed=seed, gradient_calls_per_chain=1,
                         divergent=np.zeros(n_chains, dtype=bool))


def _equipartition(ens: EnsembleState, cfg: AdaptationConfig) -> float:
    x, g = ens.chains.x, ens.chains.grad
    if cfg.equipartition_mode == "diagonal":
        return equipartition_diag(x, g)
    probes = rngs.stream(ens.seed, rngs.PROBES, ens.iteration)
    return equipartition_full(x, g, cfg.hutchinson_probes, probes)


def _bias_report(ens, ground_truth, phase):
    if ground_truth is None:
        return None
    return bias(ens.positions(), ground_truth, gradient_calls_per_chain=ens.gradient_calls_per_chain,
                iteration=ens.iteration, phase=phase)


def run_unadjusted(ens: EnsembleState, target: TargetDistribution, cfg: AdaptationConfig,
                   executor: ChunkedExecutor, ground_truth: Optional[GroundTruth] = None,
                   callback: Optional[Callable[[RunRecord], None]] = None) -> list[RunRecord]:
    """Adaptive unadjusted phase; stops when all second-moment fluctuations settle."""
    d = target.dim
    scheme = get_scheme(cfg.unadjusted_integrator)
    monitor = FluctuationMonitor(cfg.window)
    if math.isnan(ens.step_size):
        ens.step_size = cfg.fixed_step_size or cfg.initial_step_size or 0.01 * math.sqrt(d)
    if math.isnan(ens.L):
        ens.L = decoherence_update(ens.chains.x, cfg.alpha, previous=None) or math.sqrt(d)
        ens.ensemble_reductions += 1
    records = []
    while ens.iteration < cfg.maxiter:
        t = ens.iteration
        kcfg = UnadjustedKernelConfig(ens.step_size, ens.L, scheme)
        res = executor.map(
            lambda c, s: unadjusted_kernel(s, kcfg, target, rngs.stream(ens.seed, rngs.UNADJUSTED, t, c)),
            ens.chains,
        )
        ens.chains = res.state
        ens.divergent = res.divergent
        ens.gradient_calls_per_chain += res.gradient_calls

        divergent_fraction = float(np.mean(res.divergent))
        observed = eevpd(res.energy_change, d, res.divergent)
        D = _equipartition(ens, cfg)
        wanted = bias_bound_F(cfg.C * D)
        if cfg.fixed_step_size is not None:
            next_eps = ens.step_size
        elif divergent_fraction > cfg.divergence_tolerance:
            next_eps = ens.step_size / 2.0
        else:
            next_eps = step_size_update(ens.step_size, D, observed, cfg.C, cfg.step_change_clamp)
        next_L = decoherence_update(ens.chains.x, cfg.alpha, previous=ens.L)
        fluct = monitor.update(ensemble_expectation(ens.chains.x**2))
        ens.ensemble_reductions += 4

        ens.iteration += 1
        rec = RunRecord(
            iteration=t, phase=UNADJUSTED, step_size=ens.step_size, L=ens.L,
            gradient_calls_per_chain=ens.gradient_calls_per_chain, eevpd=observed, eevpd_wanted=wanted,
            equipartition=D, max_fluctuation=fluct, divergent_fraction=divergent_fraction,
            bias=_bias_report(ens, ground_truth, UNADJUSTED),
        )
        records.append(rec)
        if callback is not None:
            callback(rec)
        ens.step_size, ens.L = next_eps, next_L
        if cfg.adjust and fluct <= cfg.fluctuation_threshold:
            break
    return records


def _adjusted_config(eps, cfg: AdaptationConfig, d: int) -> AdjustedKernelConfig:
    return AdjustedKernelConfig(
        step_size=eps,
        num_steps=cfg.steps_per_proposal,
        L_partial=cfg.partial_refresh_factor * cfg.steps_per_proposal * eps,
        a_targeted=cfg.targeted_acceptance(d),
        scheme=cfg.adjusted_scheme(d),
    )


def _mams_round(ens: EnsembleState, target, kcfg, executor):
    t = ens.iteration
    out = executor.map(
        lambda c, s: mams_kernel(s, kcfg, target, rngs.stream(ens.seed, rngs.ADJUSTED, t, c)),
        ens.chains,
    )
    ens.chains = out.state
    ens.divergent = ~np.isfinite(out.energy_change)
    ens.gradient_calls_per_chain += out.gradient_calls
    ens.iteration += 1
    return out


def switch_to_adjusted(ens: EnsembleState, target: TargetDistribution) -> TargetDistribution:
    """Precondition the ensemble in place and return the target in the new coordinates.

    The step size is carried over as the length of the same displacement in
    the rescaled space, ``eps * sqrt(mean(1 / s^2))``.
    """
    wrapped, pre = precondition(ens.chains.x, target)
    ens.ensemble_reductions += 1
    s = pre.scale
    c = ens.chains
    u = c.u / s
    ens.chains = ChainState(c.x / s, u / np.linalg.norm(u, axis=-1, keepdims=True), c.logp, c.grad * s)
    ens.preconditioner = pre
    ens.step_size = ens.step_size * float(np.sqrt(np.mean(1.0 / s**2)))
    ens.phase = ADJUSTED
    ens.switch_iteration = ens.iteration
    return wrapped


def run_adjusted(ens: EnsembleState, target: TargetDistribution, cfg: AdaptationConfig,
                 executor: ChunkedExecutor, ground_truth: Optional[GroundTruth] = None,
                 callback: Optional[Callable[[RunRecord], None]] = None) -> list[RunRecord]:
    """MAMS rounds until ``maxiter``; the step size is bisected, then frozen.

    ``target`` must already be in the chains' coordinates (see
    :func:`switch_to_adjusted`).
    """
    d = target.dim
    bisect = StepSizeBisection(ens.step_size, cfg.targeted_acceptance(d), cfg.acceptance_tolerance,
                               cfg.max_doublings)
    records = []
    while ens.iteration < cfg.maxiter:
        t = ens.iteration
        kcfg = _adjusted_config(ens.step_size, cfg, d)
        out = _mams_round(ens, target, kcfg, executor)
        acceptance = float(np.mean(out.acceptance_prob))
        rec = RunRecord(
            iteration=t, phase=ADJUSTED, step_size=ens.step_size, L=kcfg.L_partial,
            gradient_calls_per_chain=ens.gradient_calls_per_chain, acceptance=acceptance,
            divergent_fraction=float(np.mean(ens.divergent)),
            bias=_bias_report(ens, ground_truth, ADJUSTED),
        )
        records.append(rec)
        if callback is not None:
            callback(rec)
        if not ens.frozen:
            ens.ensemble_reductions += 1
            nxt = bisect.update(acceptance)
            if nxt is None:
                ens.frozen = True
            else:
                ens.step_size = nxt
    return records


def bisection_tune(ens: EnsembleState, target: TargetDistribution, cfg: AdaptationConfig,
                   executor: Optional[ChunkedExecutor] = None, max_rounds: int = 100):
    """Run MAMS rounds until the mean acceptance is within tolerance of the target.

    Every round is a genuine MAMS transition of the ensemble (and advances
    ``ens.iteration``). Returns ``(frozen_step_size, acceptance_history)``.

    Raises:
        BisectionError: no bracket within ``cfg.max_doublings`` doublings, or
            no convergence within ``max_rounds``.
    """
    d = target.dim
    own = executor is None
    executor = executor or ChunkedExecutor(ens.num_chains, cfg.chunk_size)
    bisect = StepSizeBisection(ens.step_size, cfg.targeted_acceptance(d), cfg.acceptance_tolerance,
                               cfg.max_doublings)
    history = []
    try:
        for _ in range(max_rounds):
            out = _mams_round(ens, target, _adjusted_config(ens.step_size, cfg, d), executor)
            history.append(float(np.mean(out.acceptance_prob)))
            ens.ensemble_reductions += 1
            nxt = bisect.update(history[-1])
            if nxt is None:
                ens.frozen = True
                return ens.step_size, history
            ens.step_size = nxt
    finally:
        if own:
            executor.close()
    raise BisectionError(f"acceptance did not settle within {max_rounds} rounds")


def laps_run(
    target: TargetDistribution,
    init: InitialDistribution,
    n_chains: int,
    cfg: Optional[AdaptationConfig] = None,
    seed: int = 0,
    ground_truth: Optional[GroundTruth] = None,
    workers: int = 1,
    callback: Optional[Callable[[RunRecord], None]] = None,
) -> tuple[EnsembleState, list[RunRecord]]:
    """Run the full two-phase sampler.

    Args:
        target: log-density and gradient, ``dim >= 2``.
        init: initial-position distribution.
        n_chains: ensemble size M (>= 2).
        cfg: adaptation settings; defaults to :class:`AdaptationConfig()`.
        seed: root of every random stream in the run.
        ground_truth: if given, each record carries a bias report.
        workers: threads used to advance chunks; does not change results.
        callback: called with each record as soon as it exists.

    Returns:
        The final ensemble (positions via ``state.positions()``) and one
        record per iteration.
    """
    cfg = cfg or AdaptationConfig()
    d = target.dim
    if d < 2:
        raise ValueError("the microcanonical dynamics needs d >= 2")
    if n_chains < 2:
        raise ValueError("need at least two chains")
    if init.dim != d:
        raise ValueError(f"initial distribution has dim {init.dim}, target has {d}")
    with ChunkedExecutor(n_chains, cfg.chunk_size, workers) as executor:
        ens = initialize_ensemble(target, init, n_chains, seed, executor)
        records = run_unadjusted(ens, target, cfg, executor, ground_truth, callback)
        if cfg.adjust:
            if ens.iteration >= cfg.maxiter:
                warnings.warn("unadjusted phase hit maxiter before the fluctuations settled", RuntimeWarning)
            else:
                wrapped = switch_to_adjusted(ens, target)
                records += run_adjusted(ens, wrapped, cfg, executor, ground_truth, callback)
    return ens, records
