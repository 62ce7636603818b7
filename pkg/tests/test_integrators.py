import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from laps.integrators import (
    LEAPFROG,
    MN2,
    MN4,
    ChainState,
    deterministic_step,
    get_scheme,
    initial_state,
    mclmc_step,
    position_update,
    refresh_coefficients,
    stochastic_update,
    velocity_update,
)
from laps.targets import (
    TargetDistribution,
    banana_exact_sample,
    banana_target,
    ill_conditioned_gaussian,
    random_gaussian_spec,
    standard_gaussian,
)


def random_state(target, rng, n, scale=1.0):
    x = scale * rng.standard_normal((n, target.dim))
    u = rng.standard_normal((n, target.dim))
    return initial_state(x, target, u)


def target_draws(which, rng, n):
    """Exact draws from the banana or a 10-d ICG."""
    if which == "banana":
        return banana_target().target, banana_exact_sample(rng, n)
    spec = random_gaussian_spec(10, 0, 1e3)
    x = (rng.standard_normal((n, 10)) * np.sqrt(spec.eigenvalues)) @ spec.rotation.T
    return ill_conditioned_gaussian(10, 0, 1e3).target, x


def flip(state):
    return state._replace(u=-state.u)


@pytest.mark.parametrize("scheme", [LEAPFROG, MN2, MN4])
def test_coefficients_are_normalized_and_palindromic(scheme):
    assert sum(scheme.b_coeffs) == pytest.approx(1.0, abs=1e-15)
    assert sum(scheme.a_coeffs) == pytest.approx(1.0, abs=1e-15)
    assert scheme.b_coeffs == scheme.b_coeffs[::-1]
    assert scheme.a_coeffs == scheme.a_coeffs[::-1]
    assert len(scheme.b_coeffs) == len(scheme.a_coeffs) + 1


def test_published_coefficients():
    assert LEAPFROG.b_coeffs[0] == 0.5 and LEAPFROG.gradients_per_step == 1
    assert MN2.b_coeffs[0] == 0.1931833275 and MN2.a_coeffs[0] == 0.5 and MN2.gradients_per_step == 2
    assert MN4.b_coeffs[:2] == (0.0839831526, 0.6822365335)
    assert MN4.a_coeffs[:2] == (0.2539785108, -0.032302867)
    assert MN4.gradients_per_step == 5
    assert get_scheme("MN4") is MN4
    with pytest.raises(ValueError):
        get_scheme("rk4")


def test_position_update_examples():
    target = standard_gaussian(2).target
    state = initial_state(np.zeros(2), target, np.array([1.0, 0.0]))
    new, delta = position_update(state, 0.5, target)
    np.testing.assert_array_equal(new.x, [0.5, 0.0])
    np.testing.assert_array_equal(new.u, state.u)

    one_d = standard_gaussian(1).target
    state = initial_state(np.zeros(1), one_d, np.ones(1))
    _, delta = position_update(state, 1.0, one_d)
    assert delta == pytest.approx(0.5)
    same, delta = position_update(state, 0.0, one_d)
    np.testing.assert_array_equal(same.x, state.x)
    assert delta == 0.0


def test_velocity_update_zero_gradient_is_identity():
    u = np.array([0.6, 0.8, 0.0])
    state = ChainState(np.zeros(3), u, np.float64(0.0), np.zeros(3))
    new, delta = velocity_update(state, 0.7)
    np.testing.assert_array_equal(new.u, u)
    assert delta == 0.0


def test_velocity_update_aligned_with_gradient():
    d = 5
    g = np.array([3.0, 0.0, 4.0, 0.0, 0.0])
    state = ChainState(np.zeros(d), g / 5.0, np.float64(0.0), g)
    eps = 0.3
    new, delta = velocity_update(state, eps)
    np.testing.assert_allclose(new.u, state.u, atol=1e-15)
    assert delta == pytest.approx((d - 1) * eps * 5.0 / (d - 1), rel=1e-12)


def test_velocity_update_large_delta_is_finite():
    d = 3
    g = np.array([1e6, 0.0, 0.0])
    state = ChainState(np.zeros(d), np.array([0.0, 1.0, 0.0]), np.float64(0.0), g)
    new, delta = velocity_update(state, 10.0)
    assert np.all(np.isfinite(new.u)) and np.isfinite(delta)
    np.testing.assert_allclose(new.u, [1.0, 0.0, 0.0], atol=1e-12)


def velocity_flow_oracle(u0, g, eps):
    """RK45 at tight tolerance on du/dt = (I - u u^T) g / (d - 1), dE/dt = g . u."""
    d = u0.size

    def rhs(_, y):
        u = y[:d]
        return np.append((g - u * (u @ g)) / (d - 1), g @ u)

    sol = solve_ivp(rhs, (0.0, eps), np.append(u0, 0.0), method="RK45", rtol=1e-12, atol=1e-13)
    return sol.y[:d, -1], sol.y[d, -1]


def test_velocity_update_matches_ode_oracle(rng):
    for _ in range(20):
        d = int(rng.integers(2, 30))
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        g = rng.standard_normal(d) * rng.uniform(0.1, 10.0)
        eps = rng.uniform(0.01, 1.0) * 0.1 * (d - 1) / np.linalg.norm(g)
        new, delta = velocity_update(ChainState(np.zeros(d), u, np.float64(0.0), g), eps)
        u_ref, e_ref = velocity_flow_oracle(u, g, eps)
        np.testing.assert_allclose(new.u, u_ref, atol=1e-6)
        assert delta == pytest.approx(e_ref, abs=1e-6)


def test_refresh_coefficients():
    assert refresh_coefficients(0.0, 1.0) == (1.0, 0.0)
    c1, c2 = refresh_coefficients(math.log(2.0), 1.0)
    assert c1 == pytest.approx(0.5) and c2 == pytest.approx(math.sqrt(3) / 2)
    c1, c2 = refresh_coefficients(1.0, math.inf)
    assert (c1, c2) == (1.0, 0.0)


def test_stochastic_update_limits():
    state = ChainState(np.zeros((3, 4)), np.eye(4)[:3], np.zeros(3), np.zeros((3, 4)))
    same = stochastic_update(state, 0.0, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(same.u, state.u)

    full = stochastic_update(state, 1e6, 1.0, np.random.default_rng(0))
    z = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_allclose(full.u, z / np.linalg.norm(z, axis=1, keepdims=True), atol=1e-12)

    with pytest.raises(ValueError):
        stochastic_update(state, 0.1, 0.0, np.random.default_rng(0))


def test_stochastic_update_noise_scale():
    # Z ~ N(0, I/d): the mean squared change of u over a small step matches 2 eps / L
    d, n, eps, L = 50, 20000, 1e-3, 1.0
    u = np.tile(np.eye(d)[0], (n, 1))
    state = ChainState(np.zeros((n, d)), u, np.zeros(n), np.zeros((n, d)))
    new = stochastic_update(state, eps, L, np.random.default_rng(1))
    msd = np.mean(np.sum((new.u - u) ** 2, axis=1))
    assert msd == pytest.approx(2 * eps / L, rel=0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_unit_norm_after_mixed_updates(seed, d):
    rng = np.random.default_rng(seed)
    target = standard_gaussian(d).target
    state = random_state(target, rng, 3)
    for _ in range(20):
        eps = rng.uniform(0.01, 3.0)
        choice = rng.integers(3)
        if choice == 0:
            state, _ = velocity_update(state, eps)
        elif choice == 1:
            state = stochastic_update(state, eps, rng.uniform(0.1, 10.0), rng)
        else:
            state, _ = position_update(state, eps, target)
        assert np.max(np.abs(np.linalg.norm(state.u, axis=-1) - 1.0)) < 1e-10


@pytest.mark.parametrize("scheme", [LEAPFROG, MN2, MN4])
@pytest.mark.parametrize("which", ["banana", "icg"])
def test_deterministic_core_is_reversible(scheme, which, rng):
    target, x = target_draws(which, rng, 100)
    state = initial_state(x, target, rng.standard_normal((100, target.dim)))
    eps = 0.1
    fwd, e1, _ = deterministic_step(state, eps, scheme, target)
    back, e2, _ = deterministic_step(flip(fwd), eps, scheme, target)
    back = flip(back)
    assert np.max(np.abs(back.x - state.x)) < 1e-9
    assert np.max(np.abs(back.u - state.u)) < 1e-9
    np.testing.assert_allclose(e1 + e2, 0.0, atol=1e-9)


def test_mclmc_step_without_noise_is_reversible(rng):
    target = banana_target().target
    state = random_state(target, rng, 10)
    a = mclmc_step(state, 0.2, math.inf, MN2, target, np.random.default_rng(0))
    b = mclmc_step(flip(a.state), 0.2, math.inf, MN2, target, np.random.default_rng(1))
    np.testing.assert_allclose(flip(b.state).x, state.x, atol=1e-10)
    np.testing.assert_allclose(flip(b.state).u, state.u, atol=1e-10)


@pytest.mark.parametrize("scheme", [LEAPFROG, MN2, MN4])
def test_energy_change_recomposes(scheme, rng):
    # total = potential change + sum of kinetic terms from each velocity sub-update
    target = ill_conditioned_gaussian(8, 1, 100.0).target
    state = random_state(target, rng, 20)
    eps = 0.05
    _, energy, _ = deterministic_step(state, eps, scheme, target)
    s, kinetic = state, np.zeros(20)
    for k, b in enumerate(scheme.b_coeffs):
        s, dk = velocity_update(s, b * eps)
        kinetic += dk
        if k < len(scheme.a_coeffs):
            s, _ = position_update(s, scheme.a_coeffs[k] * eps, target)
    potential = state.logp - s.logp
    np.testing.assert_allclose(energy, potential + kinetic, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("scheme", [LEAPFROG, MN2, MN4])
def test_gradient_calls_match_scheme(scheme, rng):
    calls = []
    base = standard_gaussian(4).target

    def vg(x):
        calls.append(1)
        return base.evaluate(x)

    target = TargetDistribution(4, base.log_density, base.gradient, value_and_grad=vg)
    state = random_state(base, rng, 3)
    result = mclmc_step(state, 0.1, 1.0, scheme, target, rng)
    assert len(calls) == result.gradient_calls == scheme.gradients_per_step


def test_eevpd_order_scaling():
    target = standard_gaussian(100).target
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1024, 100))
    state = initial_state(x, target, rng.standard_normal((1024, 100)))

    def eevpd(scheme, eps):
        _, energy, _ = deterministic_step(state, eps, scheme, target)
        return np.var(energy, ddof=1) / 100

    for scheme in (LEAPFROG, MN2):
        ratio = np.log2(eevpd(scheme, 0.8) / eevpd(scheme, 0.4))
        assert 6 - 1.8 <= ratio <= 6 + 1.8
    r4 = np.log2(eevpd(MN4, 0.8) / eevpd(MN4, 0.4))
    r2 = np.log2(eevpd(MN2, 0.8) / eevpd(MN2, 0.4))
    assert r4 > r2
    assert eevpd(MN4, 0.8) < eevpd(MN2, 0.8)


def test_divergent_chain_is_frozen_and_flagged():
    def vg(x):
        logp = -0.5 * np.sum(x * x, axis=-1)
        grad = -x.copy()
        blow = x[..., 0] > 1.0
        logp = np.where(blow, np.nan, logp)
        grad[blow] = np.inf
        return logp, grad

    target = TargetDistribution(2, lambda x: vg(x)[0], lambda x: vg(x)[1], value_and_grad=vg)
    x = np.array([[0.9, 0.0], [-0.5, 0.0]])
    state = initial_state(x, target, np.array([[1.0, 0.0], [1.0, 0.0]]))
    new, energy, divergent = deterministic_step(state, 0.5, LEAPFROG, target)
    np.testing.assert_array_equal(divergent, [True, False])
    assert energy[0] == np.inf and np.isfinite(energy[1])
    assert np.all(np.isfinite(new.x)) and np.all(np.isfinite(new.grad))
