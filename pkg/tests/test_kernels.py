import numpy as np
import pytest

from laps.integrators import LEAPFROG, MN2, MN4, ChainState, initial_state, mclmc_step
from laps.kernels import AdjustedKernelConfig, UnadjustedKernelConfig, mams_kernel, unadjusted_kernel
from laps.targets import TargetDistribution, banana_exact_sample, banana_target, standard_gaussian


def gaussian_state(d, n, seed=0):
    rng = np.random.default_rng(seed)
    target = standard_gaussian(d).target
    return target, initial_state(rng.standard_normal((n, d)), target, rng.standard_normal((n, d)))


def test_adjusted_config_defaults():
    cfg = AdjustedKernelConfig(0.2)
    assert cfg.num_steps == 15
    assert cfg.L_partial == pytest.approx(1.25 * 15 * 0.2)
    assert cfg.scheme is MN2
    with pytest.raises(ValueError):
        AdjustedKernelConfig(0.0)
    with pytest.raises(ValueError):
        AdjustedKernelConfig(0.1, a_targeted=1.5)
    with pytest.raises(ValueError):
        UnadjustedKernelConfig(0.1, -1.0)


@pytest.mark.parametrize("scheme", [LEAPFROG, MN2, MN4])
def test_unadjusted_kernel_gradient_calls(scheme):
    target, state = gaussian_state(3, 4)
    result = unadjusted_kernel(state, UnadjustedKernelConfig(0.1, 1.0, scheme), target, np.random.default_rng(0))
    assert result.gradient_calls == scheme.gradients_per_step


def test_unadjusted_kernel_small_step_continuity():
    target, state = gaussian_state(5, 8)
    result = unadjusted_kernel(state, UnadjustedKernelConfig(1e-9, 1.0), target, np.random.default_rng(0))
    assert np.max(np.abs(result.state.x - state.x)) < 1e-8
    assert np.max(np.abs(result.energy_change)) < 1e-7


def test_identical_streams_give_identical_outputs():
    target, state = gaussian_state(4, 1)
    twin = ChainState(*(np.concatenate([a, a]) for a in state))
    a = unadjusted_kernel(twin.take(slice(0, 1)), UnadjustedKernelConfig(0.3, 2.0), target, np.random.default_rng(9))
    b = unadjusted_kernel(twin.take(slice(1, 2)), UnadjustedKernelConfig(0.3, 2.0), target, np.random.default_rng(9))
    for x, y in zip(a.state, b.state):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("scheme", [MN2, MN4])
def test_mams_gradient_calls(scheme):
    target, state = gaussian_state(3, 5)
    out = mams_kernel(state, AdjustedKernelConfig(0.2, scheme=scheme), target, np.random.default_rng(0))
    assert out.gradient_calls == 15 * scheme.gradients_per_step


def test_mams_energy_is_sum_of_step_energies():
    target, state = gaussian_state(6, 32)
    cfg = AdjustedKernelConfig(0.4, num_steps=7)
    out = mams_kernel(state, cfg, target, np.random.default_rng(5))

    rng = np.random.default_rng(5)
    z = rng.standard_normal(state.u.shape)
    s = state._replace(u=z / np.linalg.norm(z, axis=-1, keepdims=True))
    total = np.zeros(32)
    for _ in range(cfg.num_steps):
        step = mclmc_step(s, cfg.step_size, cfg.L_partial, cfg.scheme, target, rng)
        s, total = step.state, total + step.energy_change
    np.testing.assert_array_equal(out.energy_change, total)
    accepted = rng.random(32) < np.minimum(1.0, np.exp(-total))
    np.testing.assert_array_equal(out.accepted, accepted)


def test_mams_rejection_restores_state_and_acceptance_rule():
    target, state = gaussian_state(20, 400)
    out = mams_kernel(state, AdjustedKernelConfig(3.0), target, np.random.default_rng(1))
    rejected = ~out.accepted
    assert rejected.any() and out.accepted.any()
    for new, old in zip(out.state, state):
        np.testing.assert_array_equal(new[rejected], old[rejected])
    assert np.all(out.accepted[out.energy_change <= 0])
    np.testing.assert_array_equal(out.acceptance_prob, np.minimum(1.0, np.exp(-out.energy_change)))


def test_mams_rejects_divergent_trajectories():
    def vg(x):
        logp = -0.5 * np.sum(x * x, axis=-1)
        return np.where(np.abs(x[..., 0]) > 3.0, np.nan, logp), -x

    target = TargetDistribution(2, lambda x: vg(x)[0], lambda x: vg(x)[1], value_and_grad=vg)
    state = initial_state(np.array([[2.9, 0.0]] * 50), target)
    out = mams_kernel(state, AdjustedKernelConfig(0.5), target, np.random.default_rng(0))
    blown = np.isinf(out.energy_change)
    assert blown.any()
    assert not out.accepted[blown].any()
    assert np.all(out.acceptance_prob[blown] == 0.0)


def test_mams_acceptance_decreases_with_step_size():
    rng = np.random.default_rng(0)
    target = banana_target().target
    state = initial_state(banana_exact_sample(rng, 2048), target)
    grid = np.geomspace(0.05, 5.0, 10)
    acc = [np.mean(mams_kernel(state, AdjustedKernelConfig(e), target, np.random.default_rng(1)).acceptance_prob)
           for e in grid]
    assert all(b <= a + 0.02 for a, b in zip(acc, acc[1:]))
    assert acc[0] > 0.9 and acc[-1] < 0.5


@pytest.mark.parametrize("which", ["gaussian", "banana"])
def test_mams_preserves_the_target(which):
    # start in equilibrium; time averages must stay on the ground truth
    rng = np.random.default_rng(11)
    m, rounds = 256, 200
    if which == "gaussian":
        problem = standard_gaussian(2)
        x, eps = rng.standard_normal((m, 2)), 0.6
    else:
        problem = banana_target()
        x, eps = banana_exact_sample(rng, m), 0.3
    target, truth = problem.target, problem.ground_truth
    state = initial_state(x, target)
    cfg = AdjustedKernelConfig(eps)
    per_chain = np.zeros((m, 2))
    for t in range(rounds):
        state = mams_kernel(state, cfg, target, np.random.default_rng([11, t])).state
        per_chain += state.x**2
    per_chain /= rounds
    mean = per_chain.mean(axis=0)
    stderr = per_chain.std(axis=0, ddof=1) / np.sqrt(m)
    assert np.all(np.abs(mean - truth.second_moments) < 3 * stderr)
