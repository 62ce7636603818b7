"""Unadjusted MCLMC and Metropolis-adjusted (MAMS) transition kernels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .integrators import ChainState, IntegratorScheme, StepResult, get_scheme, mclmc_step
from .targets import TargetDistribution


@dataclass(frozen=True)
class UnadjustedKernelConfig:
    step_size: float
    L: float
    scheme: IntegratorScheme = field(default_factory=lambda: get_scheme("lf"))

    def __post_init__(self):
        if not (self.step_size > 0 and self.L > 0):
            raise ValueError("step size and L must be positive")


@dataclass(frozen=True)
class AdjustedKernelConfig:
    """MAMS settings. ``L_partial`` defaults to ``1.25 * N * step_size``."""

    step_size: float
    num_steps: int = 15
    L_partial: float | None = None
    a_targeted: float = 0.7
    scheme: IntegratorScheme = field(default_factory=lambda: get_scheme("mn2"))

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.num_steps < 1:
            raise ValueError("need at least one integration step per proposal")
        if not 0 < self.a_targeted < 1:
            raise ValueError("targeted acceptance must lie in (0, 1)")
        if self.L_partial is None:
            object.__setattr__(self, "L_partial", 1.25 * self.num_steps * self.step_size)
        elif not self.L_partial > 0:
            raise ValueError("L_partial must be positive")


class ProposalOutcome(NamedTuple):
    state: ChainState
    accepted: np.ndarray
    energy_change: np.ndarray
    gradient_calls: int
    acceptance_prob: np.ndarray


def unadjusted_kernel(state: ChainState, cfg: UnadjustedKernelConfig, target: TargetDistribution, rng) -> StepResult:
    return mclmc_step(state, cfg.step_size, cfg.L, cfg.scheme, target, rng)


def mams_kernel(state: ChainState, cfg: AdjustedKernelConfig, target: TargetDistribution, rng) -> ProposalOutcome:
    """One MAMS proposal.

    Draw order from ``rng``: the full velocity refresh, then the two partial
    refreshes of each of the ``N`` steps, then one uniform per chain for the
    accept test. Divergent trajectories carry ``energy_change = +inf`` and are
    rejected. A rejected chain returns its pre-proposal state unchanged.
    """
    z = rng.standard_normal(state.u.shape)
    proposal = state._replace(u=z / np.linalg.norm(z, axis=-1, keepdims=True))
    energy = np.zeros(state.x.shape[:-1])
    divergent = np.zeros(state.x.shape[:-1], dtype=bool)
    for _ in range(cfg.num_steps):
        step = mclmc_step(proposal, cfg.step_size, cfg.L_partial, cfg.scheme, target, rng)
        proposal = step.state
        energy = energy + step.energy_change
        divergent |= step.divergent
    energy = np.where(divergent | np.isnan(energy), np.inf, energy)
    with np.errstate(over="ignore"):
        prob = np.minimum(1.0, np.exp(-energy))
    uniform = rng.random(energy.shape)
    accepted = uniform < prob
    m = accepted[..., None]
    new = ChainState(
        np.where(m, proposal.x, state.x),
        np.where(m, proposal.u, state.u),
        np.where(accepted, proposal.logp, state.logp),
        np.where(m, proposal.grad, state.grad),
    )
    return ProposalOutcome(new, accepted, energy, cfg.num_steps * cfg.scheme.gradients_per_step, prob)
