"""Target distributions: the interface, built-in benchmarks and a name registry."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import rng as rngs

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TargetDistribution:
    """Unnormalized log-density with its gradient.

    Both callables take an array of shape ``(..., dim)`` and act on the last
    axis, so a whole batch of chains is evaluated in one call. They must be
    pure functions of ``x``: the sampler calls them from several threads.
    """

    dim: int
    log_density: ArrayFn
    gradient: ArrayFn
    name: str = "custom"
    # optional fused evaluation; many targets share work between the two
    value_and_grad: Optional[Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]] = None

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dimension must be positive, got {self.dim}")

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(log p(x), grad log p(x))``."""
        if self.value_and_grad is not None:
            return self.value_and_grad(x)
        return self.log_density(x), self.gradient(x)


@dataclass(frozen=True)
class GroundTruth:
    """Reference second moments ``E_p[x_i^2]`` and their variances ``Var_p[x_i^2]``."""

    second_moments: np.ndarray
    second_moment_variances: np.ndarray
    source: str = "analytic"  # or "direct-sampling-oracle"

    def __post_init__(self):
        if self.source not in ("analytic", "direct-sampling-oracle"):
            raise ValueError(f"unknown ground-truth source {self.source!r}")
        if np.shape(self.second_moments) != np.shape(self.second_moment_variances):
            raise ValueError("moments and variances must have the same length")
        if not np.all(np.asarray(self.second_moment_variances) > 0):
            raise ValueError("second-moment variances must be strictly positive")


@dataclass(frozen=True)
class InitialDistribution:
    """Draws starting positions.

    ``sampler(rng, n)`` returns an ``(n, dim)`` array; ``sample(rng)`` with no
    count returns a single position.
    """

    dim: int
    sampler: Callable[[np.random.Generator, int], np.ndarray]

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        out = np.asarray(self.sampler(rng, 1 if n is None else n), dtype=np.float64)
        out = out.reshape(-1, self.dim)
        if not np.all(np.isfinite(out)):
            raise ValueError("initial distribution produced non-finite positions")
        return out[0] if n is None else out


class Problem(NamedTuple):
    target: TargetDistribution
    ground_truth: Optional[GroundTruth]
    init: InitialDistribution


def standard_normal_init(dim: int, scale: float = 1.0) -> InitialDistribution:
    return InitialDistribution(dim, lambda rng, n: scale * rng.standard_normal((n, dim)))


# ---------------------------------------------------------------------------
# built-in targets


BANANA_SCALE = 10.0
BANANA_CURVATURE = 0.03


def _banana_value_and_grad(x):
    x1, x2 = x[..., 0], x[..., 1]
    r = x2 - BANANA_CURVATURE * (x1**2 - BANANA_SCALE**2)
    logp = -0.5 * (x1 / BANANA_SCALE) ** 2 - 0.5 * r**2
    grad = np.empty_like(x, dtype=np.float64)
    grad[..., 0] = -x1 / BANANA_SCALE**2 + 2.0 * BANANA_CURVATURE * x1 * r
    grad[..., 1] = -r
    return logp, grad


def banana_target() -> Problem:
    """Two-dimensional banana.

    ``x1 ~ N(0, 10^2)`` and ``x2 | x1 ~ N(0.03 (x1^2 - 100), 1)``. With
    ``x1 = 10 z`` the curved coordinate is ``3 (z^2 - 1) + z'``, which gives
    ``E[x2^2] = 19`` and ``Var[x2^2] = 81*60 + 6*18 + 3 - 19^2 = 4610``.
    """
    target = TargetDistribution(
        dim=2,
        log_density=lambda x: _banana_value_and_grad(x)[0],
        gradient=lambda x: _banana_value_and_grad(x)[1],
        name="banana",
        value_and_grad=_banana_value_and_grad,
    )
    truth = GroundTruth(
        second_moments=np.array([100.0, 19.0]),
        second_moment_variances=np.array([20000.0, 4610.0]),
        source="analytic",
    )
    return Problem(target, truth, standard_normal_init(2))


def banana_exact_sample(rng: np.random.Generator, n: int) -> np.ndarray:
    """Direct sampler for the banana, used as an independent oracle."""
    z = rng.standard_normal((n, 2))
    x1 = BANANA_SCALE * z[:, 0]
    x2 = BANANA_CURVATURE * (x1**2 - BANANA_SCALE**2) + z[:, 1]
    return np.stack([x1, x2], axis=1)


@dataclass(frozen=True)
class GaussianSpec:
    """Eigen-decomposition of a zero-mean Gaussian, ``cov = Q diag(eigenvalues) Q^T``."""

    rotation: np.ndarray
    eigenvalues: np.ndarray
    covariance: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)


def _log_rescale(eigenvalues: np.ndarray, condition: float) -> np.ndarray:
    # affine map in log space: keeps the largest value, stretches the spread
    log_lam = np.log(eigenvalues)
    hi, lo = log_lam.max(), log_lam.min()
    if condition == 1.0 or hi == lo:
        return np.full_like(eigenvalues, np.exp(hi))
    scaled = hi + (log_lam - hi) * (np.log(condition) / (hi - lo))
    out = np.exp(scaled)
    # pin the extremes so the ratio is exact up to one rounding
    out[np.argmax(log_lam)] = np.exp(hi)
    out[np.argmin(log_lam)] = np.exp(hi) / condition
    return out


def random_gaussian_spec(dim: int, seed: int, condition: float, shape: float = 0.5) -> GaussianSpec:
    rng = rngs.stream(seed, rngs.TARGET, dim)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    lam = _log_rescale(rng.gamma(shape, 1.0, size=dim), float(condition))
    cov = (q * lam) @ q.T
    prec = (q / lam) @ q.T
    return GaussianSpec(q, lam, 0.5 * (cov + cov.T), 0.5 * (prec + prec.T))


def gaussian_target(covariance: np.ndarray, name: str = "gaussian") -> Problem:
    """Zero-mean Gaussian with the given covariance, analytic ground truth."""
    cov = np.asarray(covariance, dtype=np.float64)
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    return _gaussian_problem(cov, prec, name)


def _gaussian_problem(cov, prec, name):
    dim = cov.shape[0]

    def value_and_grad(x):
        px = x @ prec
        return -0.5 * np.sum(x * px, axis=-1), -px

    target = TargetDistribution(
        dim=dim,
        log_density=lambda x: value_and_grad(x)[0],
        gradient=lambda x: value_and_grad(x)[1],
        name=name,
        value_and_grad=value_and_grad,
    )
    diag = np.diag(cov).copy()
    truth = GroundTruth(diag, 2.0 * diag**2, "analytic")
    return Problem(target, truth, standard_normal_init(dim))


def ill_conditioned_gaussian(d: int, seed: int = 0, target_condition: float = 1e5) -> Problem:
    """Randomly rotated Gaussian with Gamma(0.5, 1) eigenvalues.

    The eigenvalues are stretched in log space so that their ratio equals
    ``target_condition`` exactly; the largest draw is kept as is.
    """
    if int(d) < 2:
        raise ValueError(f"ill-conditioned Gaussian needs d >= 2, got {d}")
    if not target_condition >= 1.0:
        raise ValueError("target_condition must be >= 1")
    spec = random_gaussian_spec(int(d), seed, target_condition)
    return _gaussian_problem(spec.covariance, spec.precision, "icg")


def standard_gaussian(d: int) -> Problem:
    if int(d) < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    d = int(d)

    def value_and_grad(x):
        return -0.5 * np.sum(x * x, axis=-1), -x

    target = TargetDistribution(
        dim=d,
        log_density=lambda x: value_and_grad(x)[0],
        gradient=lambda x: -np.asarray(x, dtype=np.float64),
        name="gaussian",
        value_and_grad=value_and_grad,
    )
    truth = GroundTruth(np.ones(d), np.full(d, 2.0), "analytic")
    return Problem(target, truth, standard_normal_init(d))


# ---------------------------------------------------------------------------
# registry

_REGISTRY: dict[str, Callable[..., Problem]] = {}


def register_target(name: str, factory: Callable[..., Problem], overwrite: bool = False) -> None:
    """Make ``factory`` available under ``name`` (CLI ``--target`` and :func:`get_target`).

    The factory receives the keyword parameters given to :func:`get_target`
    (``dim``, ``seed``, ``condition``; it may ignore those it does not need)
    and returns a :class:`Problem`. Ground truth may be ``None``, in which case
    bias diagnostics are skipped.
    """
    if name in _REGISTRY and not overwrite:
        raise ValueError(f"target {name!r} is already registered")
    _REGISTRY[name] = factory


def available_targets() -> list[str]:
    return sorted(_REGISTRY)


def get_target(name: str, **params) -> Problem:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown target {name!r}; known: {', '.join(available_targets())}") from None
    return factory(**params)


def _banana_factory(**_):
    return banana_target()


def _icg_factory(dim=100, seed=0, condition=1e5, **_):
    return ill_conditioned_gaussian(dim, seed, condition)


def _gaussian_factory(dim=50, **_):
    return standard_gaussian(dim)


register_target("banana", _banana_factory)
register_target("icg", _icg_factory)
register_target("gaussian", _gaussian_factory)
