"""Ensemble microcanonical sampling with automatic hyperparameter tuning.

Many short chains run in parallel. An adaptive unadjusted phase sets the step
size from the equipartition loss and the energy error, and the momentum
decoherence scale from the ensemble spread. Once the second moments stop
moving, the ensemble is diagonally preconditioned and continues with
Metropolis-adjusted proposals whose step size is tuned by bisection.

Typical use::

    from laps import AdaptationConfig, get_target, laps_run

    problem = get_target("banana")
    ens, records = laps_run(problem.target, problem.init, 4096, AdaptationConfig(maxiter=300),
                            seed=0, ground_truth=problem.ground_truth)
    samples = ens.positions()
"""

__version__ = "0.1.0"

from .adaptation import (
    BisectionError,
    FluctuationMonitor,
    Preconditioner,
    StepSizeBisection,
    bias_bound_F,
    bias_bound_F_inverse,
    decoherence_update,
    eevpd,
    ensemble_expectation,
    ensemble_variance,
    equipartition_diag,
    equipartition_full,
    equipartition_matrix,
    precondition,
    step_size_update,
)
from .diagnostics import BiasReport, RunRecord, bias, grads_to_threshold
from .integrators import LEAPFROG, MN2, MN4, ChainState, IntegratorScheme, get_scheme, initial_state
from .kernels import AdjustedKernelConfig, UnadjustedKernelConfig, mams_kernel, unadjusted_kernel
from .sampler import AdaptationConfig, EnsembleState, bisection_tune, laps_run
from .targets import (
    GroundTruth,
    InitialDistribution,
    Problem,
    TargetDistribution,
    available_targets,
    banana_target,
    get_target,
    ill_conditioned_gaussian,
    register_target,
    standard_gaussian,
)

__all__ = [
    "AdaptationConfig",
    "AdjustedKernelConfig",
    "BiasReport",
    "BisectionError",
    "ChainState",
    "EnsembleState",
    "FluctuationMonitor",
    "GroundTruth",
    "InitialDistribution",
    "IntegratorScheme",
    "LEAPFROG",
    "MN2",
    "MN4",
    "Preconditioner",
    "Problem",
    "RunRecord",
    "StepSizeBisection",
    "TargetDistribution",
    "UnadjustedKernelConfig",
    "available_targets",
    "banana_target",
    "bias",
    "bias_bound_F",
    "bias_bound_F_inverse",
    "bisection_tune",
    "decoherence_update",
    "eevpd",
    "ensemble_expectation",
    "ensemble_variance",
    "equipartition_diag",
    "equipartition_full",
    "equipartition_matrix",
    "get_scheme",
    "get_target",
    "grads_to_threshold",
    "ill_conditioned_gaussian",
    "initial_state",
    "laps_run",
    "mams_kernel",
    "precondition",
    "register_target",
    "standard_gaussian",
    "step_size_update",
    "unadjusted_kernel",
]
