"""Ensemble statistics that drive the hyperparameters.

All functions here reduce over the chain axis (axis 0) of arrays assembled
after every chain has been advanced, so results do not depend on how the
chains were distributed over workers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from . import rng as rngs
from .targets import TargetDistribution

log = logging.getLogger(__name__)


class BisectionError(RuntimeError):
    """No step size bracketing the targeted acceptance rate was found."""


def _finite_rows(*arrays):
    ok = np.ones(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        a = np.asarray(a)
        ok &= np.all(np.isfinite(a.reshape(a.shape[0], -1)), axis=1)
    return ok


def _drop_nonfinite(values):
    values = np.asarray(values, dtype=np.float64)
    ok = _finite_rows(values)
    if not ok.all():
        if not ok.any():
            raise ValueError("all ensemble values are non-finite")
        log.debug("excluded %d non-finite chains from an ensemble reduction", int((~ok).sum()))
        values = values[ok]
    return values


def ensemble_expectation(values) -> np.ndarray | float:
    """Mean over chains (axis 0), skipping chains with non-finite entries."""
    return np.mean(_drop_nonfinite(values), axis=0)


def ensemble_variance(values) -> np.ndarray | float:
    """Unbiased (divisor ``M - 1``) variance over chains."""
    values = _drop_nonfinite(values)
    if values.shape[0] < 2:
        return np.zeros(values.shape[1:]) if values.ndim > 1 else 0.0
    return np.var(values, axis=0, ddof=1)


def equipartition_matrix(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Dense ``V_ij = -E[(x_i - E x_i) d_j log p]``. O(d^2 M); for checks and small d."""
    ok = _finite_rows(x, grad)
    x, grad = x[ok], grad[ok]
    xc = x - x.mean(axis=0)
    return -(xc.T @ grad) / x.shape[0]


def equipartition_diag(x: np.ndarray, grad: np.ndarray) -> float:
    """Diagonal equipartition loss ``(1/d) sum_i (1 - V_ii)^2``.

    ``grad`` is the gradient the integrator already computed at ``x``.
    """
    ok = _finite_rows(x, grad)
    if not ok.any():
        raise ValueError("all chains are non-finite")
    x, grad = x[ok], grad[ok]
    xc = x - x.mean(axis=0)
    v_diag = -np.mean(xc * grad, axis=0)
    return float(np.mean((1.0 - v_diag) ** 2))


def equipartition_full(x: np.ndarray, grad: np.ndarray, probes=100, rng: Optional[np.random.Generator] = None) -> float:
    """Full-rank equipartition loss ``(1/d) ||I - V||_F^2`` by Hutchinson's trick.

    For a probe ``z`` with ``E[z z^T] = I``, ``(I - V) z = z + mean_m (x^m - xbar) (g^m . z)``,
    and the loss is the probe average of ``|(I - V) z|^2 / d``. No d x d matrix
    is formed; cost is O(d M P).

    Args:
        x, grad: ``(M, d)`` positions and gradients.
        probes: number of Rademacher probes drawn from ``rng``, or an explicit
            ``(d, P)`` probe matrix. A matrix with orthogonal rows (e.g. rows of
            a Hadamard matrix) makes the estimate exact.
        rng: generator for random probes.
    """
    ok = _finite_rows(x, grad)
    if not ok.any():
        raise ValueError("all chains are non-finite")
    x, grad = x[ok], grad[ok]
    m, d = x.shape
    if np.ndim(probes) == 0:
        if int(probes) < 1:
            raise ValueError("need at least one probe")
        if rng is None:
            rng = np.random.default_rng()
        z = rngs.rademacher(rng, (d, int(probes)))
    else:
        z = np.asarray(probes, dtype=np.float64)
    xc = x - x.mean(axis=0)
    residual = z + xc.T @ (grad @ z) / m
    return float(np.mean(np.sum(residual**2, axis=0)) / d)


def eevpd(energy_change: np.ndarray, d: int, divergent: Optional[np.ndarray] = None) -> float:
    """Energy error variance per dimension, ``Var_chains[Delta] / d``.

    Divergent or non-finite chains are excluded; if more than half of them are
    gone, returns ``inf`` so the caller cuts the step size.
    """
    energy_change = np.asarray(energy_change, dtype=np.float64)
    ok = np.isfinite(energy_change)
    if divergent is not None:
        ok &= ~np.asarray(divergent)
    if ok.sum() * 2 < energy_change.size or ok.sum() < 2:
        return math.inf
    return float(np.var(energy_change[ok], ddof=1) / d)


def bias_bound_F(D: float) -> float:
    """``F(D) = 4 D^{3/2} / (1 + D^{1/2})^2``: EEVPD matching an asymptotic bias D."""
    if D < 0:
        raise ValueError("divergence must be non-negative")
    r = math.sqrt(D)
    return 4.0 * D * r / (1.0 + r) ** 2


def bias_bound_F_inverse(y: float) -> float:
    if y < 0:
        raise ValueError("EEVPD must be non-negative")
    if y == 0:
        return 0.0
    if math.isinf(y):
        return math.inf
    hi = 1.0
    while bias_bound_F(hi) < y:
        hi *= 4.0
    return optimize.bisect(lambda D: bias_bound_F(D) - y, 0.0, hi, xtol=1e-300, rtol=1e-13, maxiter=2000)


def step_size_update(eps: float, D: float, eevpd_observed: float, C: float = 0.025, clamp=(0.3, 3.0)) -> float:
    """Next step size from the current bias estimate and observed energy error.

    The wanted EEVPD is ``F(C * D)``; EEVPD scales like ``eps^6``, hence the
    sixth root. The per-iteration change is clamped to ``clamp``; an ``inf``
    observation halves the step.
    """
    if math.isinf(eevpd_observed) or math.isnan(eevpd_observed):
        return eps / 2.0
    wanted = bias_bound_F(C * D)
    if eevpd_observed == 0.0:
        ratio = math.inf if wanted > 0 else 1.0
    else:
        ratio = (wanted / eevpd_observed) ** (1.0 / 6.0)
    return eps * min(max(ratio, clamp[0]), clamp[1])


def decoherence_update(x: np.ndarray, alpha: float = 2.0, previous: Optional[float] = None) -> Optional[float]:
    """``L = alpha * sqrt(sum_i Var[x_i])``; keeps ``previous`` for a collapsed ensemble."""
    total = float(np.sum(ensemble_variance(x)))
    if not (total > 0 and math.isfinite(total)):
        return previous
    return alpha * math.sqrt(total)


class FluctuationMonitor:
    """Relative fluctuation ``sigma / mu`` of per-coordinate ensemble means of ``x_i^2``.

    Keeps the last ``window`` mean vectors in a ring buffer (``window * d``
    floats, independent of the number of chains) and reports the sample
    standard deviation over mean across that window. Until the window is full
    the fluctuation is ``inf``.
    """

    def __init__(self, window: int):
        self.window = max(2, int(window))
        self.count = 0
        self._buffer: Optional[np.ndarray] = None

    def update(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=np.float64)
        if self._buffer is None:
            self._buffer = np.empty((self.window,) + values.shape)
        self._buffer[self.count % self.window] = values
        self.count += 1
        return self.max_fluctuation()

    def fluctuations(self) -> np.ndarray:
        if self._buffer is None:
            return np.full((), np.inf)
        if self.count < self.window:
            return np.full(self._buffer.shape[1:], np.inf)
        mu = self._buffer.mean(axis=0)
        sigma = self._buffer.std(axis=0, ddof=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.abs(sigma / mu)
        return np.where(mu == 0, np.inf, delta)

    def max_fluctuation(self) -> float:
        return float(np.max(self.fluctuations()))


@dataclass(frozen=True)
class Preconditioner:
    """Diagonal rescaling ``y = x / scale``."""

    scale: np.ndarray

    def to_preconditioned(self, x):
        return x / self.scale

    def to_original(self, y):
        return y * self.scale

    def wrap(self, target: TargetDistribution) -> TargetDistribution:
        scale = self.scale

        def value_and_grad(y):
            logp, grad = target.evaluate(y * scale)
            return logp, grad * scale

        return TargetDistribution(
            dim=target.dim,
            log_density=lambda y: target.log_density(y * scale),
            gradient=lambda y: target.gradient(y * scale) * scale,
            name=target.name,
            value_and_grad=value_and_grad,
        )


def precondition(x: np.ndarray, target: TargetDistribution, floor: float = 1e-12):
    """Build the diagonal preconditioner from the ensemble spread.

    Returns ``(wrapped_target, preconditioner)``; the caller maps chain states
    with :meth:`Preconditioner.to_preconditioned`.
    """
    scale = np.sqrt(np.asarray(ensemble_variance(x), dtype=np.float64))
    low = ~(scale > floor)
    if low.any():
        log.warning("floored %d preconditioner scales at %g", int(low.sum()), floor)
        scale = np.where(low, floor, scale)
    pre = Preconditioner(scale)
    return pre.wrap(target), pre


class StepSizeBisection:
    """Root finder for ``a(eps) = a_targeted`` with one acceptance estimate per round.

    Doubles (halves) the step while the acceptance is too high (low), then
    bisects the bracket. ``update`` returns the next step size to try, or
    ``None`` once the current one is within tolerance.
    """

    def __init__(self, eps: float, a_targeted: float, tolerance: float = 0.03, max_doublings: int = 20):
        self.eps = float(eps)
        self.a_targeted = a_targeted
        self.tolerance = tolerance
        self.max_doublings = max_doublings
        self.lo: Optional[float] = None  # acceptance above target
        self.hi: Optional[float] = None  # acceptance below target
        self.doublings = 0
        self.done = False

    def update(self, acceptance: float) -> Optional[float]:
        if self.done:
            return None
        if abs(acceptance - self.a_targeted) <= self.tolerance:
            self.done = True
            return None
        if acceptance > self.a_targeted:
            self.lo = self.eps
        else:
            self.hi = self.eps
        if self.lo is not None and self.hi is not None:
            self.eps = 0.5 * (self.lo + self.hi)
        else:
            self.doublings += 1
            if self.doublings > self.max_doublings:
                raise BisectionError(
                    f"no bracket for acceptance {self.a_targeted} after {self.max_doublings} "
                    f"doublings/halvings (last eps={self.eps:g}, acceptance={acceptance:.3f})"
                )
            self.eps = self.eps * 2.0 if self.hi is None else self.eps / 2.0
        return self.eps
