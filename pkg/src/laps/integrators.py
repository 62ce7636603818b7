"""Microcanonical splitting integrators.

States are batched: every array carries the chain axis first and the
coordinate axis last, so one call advances any number of chains. A single
chain is just a batch of shape ``(1, d)`` (or ``(d,)``; the last axis is all
that matters).

Divergences are never raised. A chain whose log-density or gradient turns
non-finite keeps its last finite sub-state for the rest of the step and is
reported through ``StepResult.divergent``; its energy change is ``+inf``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .targets import TargetDistribution


class ChainState(NamedTuple):
    x: np.ndarray
    u: np.ndarray
    logp: np.ndarray
    grad: np.ndarray

    def take(self, idx) -> "ChainState":
        return ChainState(*(a[idx] for a in self))


class StepResult(NamedTuple):
    state: ChainState
    energy_change: np.ndarray
    gradient_calls: int
    divergent: np.ndarray


@dataclass(frozen=True)
class IntegratorScheme:
    """Palindromic B/A splitting ``B(b1) A(a1) B(b2) ... A(a_{K-1}) B(bK)``.

    ``b_coeffs`` and ``a_coeffs`` are the full sequences (not only the
    independent half), so ``len(b_coeffs) == len(a_coeffs) + 1``.
    """

    name: str
    b_coeffs: tuple[float, ...]
    a_coeffs: tuple[float, ...]
    order: int

    @property
    def gradients_per_step(self) -> int:
        # the gradient at the end of a step is reused by the next step's first B
        return len(self.a_coeffs)


LEAPFROG = IntegratorScheme("lf", (0.5, 0.5), (1.0,), 2)
MN2 = IntegratorScheme(
    "mn2", (0.1931833275, 1.0 - 2 * 0.1931833275, 0.1931833275), (0.5, 0.5), 2
)
_MN4_B = (0.0839831526, 0.6822365335)
_MN4_A = (0.2539785108, -0.032302867)
MN4 = IntegratorScheme(
    "mn4",
    _MN4_B + (0.5 - sum(_MN4_B),) * 2 + _MN4_B[::-1],
    _MN4_A + (1.0 - 2.0 * sum(_MN4_A),) + _MN4_A[::-1],
    4,
)

SCHEMES = {s.name: s for s in (LEAPFROG, MN2, MN4)}


def get_scheme(name) -> IntegratorScheme:
    if isinstance(name, IntegratorScheme):
        return name
    try:
        return SCHEMES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown integrator {name!r}; choose from {sorted(SCHEMES)}") from None


def initial_state(x: np.ndarray, target: TargetDistribution, u: np.ndarray | None = None) -> ChainState:
    """Evaluate the target at ``x`` (one gradient call) and build a state.

    Without an explicit ``u`` the velocity points along the gradient; chains
    sitting at a stationary point get the first coordinate axis instead.
    """
    x = np.asarray(x, dtype=np.float64)
    logp, grad = target.evaluate(x)
    if u is None:
        norm = np.linalg.norm(grad, axis=-1, keepdims=True)
        fallback = np.zeros_like(x)
        fallback[..., 0] = 1.0
        ok = np.isfinite(norm) & (norm > 0)
        u = np.where(ok, grad / np.where(ok, norm, 1.0), fallback)
    return ChainState(x, _normalize(np.asarray(u, dtype=np.float64)), np.asarray(logp, dtype=np.float64), grad)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def position_update(state: ChainState, eps: float, target: TargetDistribution):
    """Drift ``x -> x + eps u``; returns ``(state, energy_change)``.

    The energy change is ``-log p(x') + log p(x)``; it is non-finite when the
    target blows up at ``x'``.
    """
    x = state.x + eps * state.u
    logp, grad = target.evaluate(x)
    return ChainState(x, state.u, logp, grad), state.logp - logp


def velocity_update(state: ChainState, eps: float):
    """Exact solution of the projected-gradient velocity flow at fixed ``x``.

    Uses the cached gradient in ``state``. Written with ``zeta = exp(-delta)``
    instead of cosh/sinh so large ``delta`` does not overflow; the result is
    the same rotation of ``u`` towards ``g / |g|``.
    """
    d = state.x.shape[-1]
    g = state.grad
    g_norm = np.linalg.norm(g, axis=-1, keepdims=True)
    e = g / np.where(g_norm > 0, g_norm, 1.0)
    ue = np.sum(e * state.u, axis=-1, keepdims=True)
    delta = eps * g_norm / (d - 1)
    zeta = np.exp(-delta)
    raw = e * (1.0 - zeta) * (1.0 + zeta + ue * (1.0 - zeta)) + 2.0 * zeta * state.u
    u = _normalize(raw)
    dk = (d - 1) * (delta - np.log(2.0) + np.log(1.0 + ue + (1.0 - ue) * zeta**2))
    return ChainState(state.x, u, state.logp, state.grad), dk[..., 0]


def refresh_coefficients(eps: float, L: float) -> tuple[float, float]:
    c1 = float(np.exp(-eps / L)) if L > 0 else 0.0
    return c1, float(np.sqrt(max(0.0, 1.0 - c1 * c1)))


def stochastic_update(state: ChainState, eps: float, L: float, rng: np.random.Generator) -> ChainState:
    """Partial velocity refresh ``u -> normalize(c1 u + c2 Z)``, ``c1 = exp(-eps / L)``.

    ``Z`` has i.i.d. ``N(0, 1/d)`` entries, so ``|Z| ~ 1 = |u|``. The scale
    matters: normalization happens after the sum, and this choice gives the
    noise strength ``2 / (L d)`` per unit time of the continuous dynamics.
    One ``Z`` is always drawn, even when ``c2 == 0``, so the stream position
    never depends on the step size.
    """
    if not L > 0:
        raise ValueError("L must be positive")
    c1, c2 = refresh_coefficients(eps, L)
    z = rng.standard_normal(state.u.shape) / np.sqrt(state.u.shape[-1])
    v = c1 * state.u + c2 * z
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    while np.any(norm == 0):  # pragma: no cover - probability zero
        bad = (norm == 0)[..., 0]
        v[bad] = c1 * state.u[bad] + c2 * rng.standard_normal(state.u[bad].shape) / np.sqrt(state.u.shape[-1])
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return state._replace(u=v / norm)


def _keep(bad, new: ChainState, old: ChainState) -> ChainState:
    if not np.any(bad):
        return new
    m = bad[..., None]
    return ChainState(
        np.where(m, old.x, new.x),
        np.where(m, old.u, new.u),
        np.where(bad, old.logp, new.logp),
        np.where(m, old.grad, new.grad),
    )


def _finite(state: ChainState, dE):
    return np.isfinite(dE) & np.isfinite(state.logp) & np.all(np.isfinite(state.grad), axis=-1)


def deterministic_step(state: ChainState, eps: float, scheme: IntegratorScheme, target: TargetDistribution):
    """Apply the B/A composition once; returns ``(state, energy_change, divergent)``."""
    energy = np.zeros(state.x.shape[:-1])
    divergent = ~(np.isfinite(state.logp) & np.all(np.isfinite(state.grad), axis=-1))
    n_a = len(scheme.a_coeffs)
    for k, b in enumerate(scheme.b_coeffs):
        new, dE = velocity_update(state, b * eps)
        bad = divergent | ~_finite(new, dE)
        state = _keep(bad, new, state)
        energy = energy + np.where(bad, 0.0, dE)
        divergent = bad
        if k < n_a:
            new, dE = position_update(state, scheme.a_coeffs[k] * eps, target)
            bad = divergent | ~_finite(new, dE)
            state = _keep(bad, new, state)
            energy = energy + np.where(bad, 0.0, dE)
            divergent = bad
    return state, np.where(divergent, np.inf, energy), divergent


def mclmc_step(
    state: ChainState,
    eps: float,
    L: float,
    scheme: IntegratorScheme,
    target: TargetDistribution,
    rng: np.random.Generator,
) -> StepResult:
    """Half refresh, deterministic core, half refresh.

    The two refreshes draw from ``rng`` in that order; they do not change the
    energy.
    """
    state = stochastic_update(state, eps / 2, L, rng)
    state, energy, divergent = deterministic_step(state, eps, scheme, target)
    state = stochastic_update(state, eps / 2, L, rng)
    return StepResult(state, energy, scheme.gradients_per_step, divergent)
