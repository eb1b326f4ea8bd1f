import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from safe_fbsde.barriers import (BarrierParams, BarrierSpec, Legacy, TypeA, TypeB, barrier_derivatives,
                                 constraint_row, failure_bound, h_typeA, h_typeB, legacy_h, obstacle_barrier,
                                 obstacle_row, pair_barrier, pair_row, row_from_barrier)
from safe_fbsde.dynamics import NoiseModel, actuation

from oracles import barrier_fd_errors, failure_bound_reference, fd_gradient, h_obstacle, h_pair, scbf_row_termwise


def spec_a(r=0.5, mu_b=0.25, **kw):
    return BarrierSpec(TypeA(0, 1, r), BarrierParams(mu_b=mu_b, **kw))


# --- values -------------------------------------------------------------------------

def test_typeA_on_boundary():
    r = 0.3
    assert h_typeA([0, 0, 0, 0], [2 * r, 0, 0, 0], spec_a(r)) == pytest.approx(0.0, abs=1e-15)


def test_typeA_coincident():
    r = 0.4
    assert h_typeA([1, 1, 0, 0], [1, 1, 2, 0], spec_a(r)) == pytest.approx(-2 * r * r)


def test_typeA_worked_example():
    h = h_typeA([0, 0, 0, 1], [2, 0, math.pi, 1], spec_a(0.5, 0.25))
    assert h == pytest.approx(0.5)


def test_typeB_examples():
    spec = BarrierSpec(TypeB(0, 0, 0.5, 0.5), BarrierParams(mu_b=0.1))
    assert h_typeB([1.0, 0, 0, 0], [0, 0], spec) == pytest.approx(0.0, abs=1e-15)
    assert h_typeB([0, 0, 0, 0], [0, 0], spec) == pytest.approx(-0.5)
    assert h_typeB([0, 0, 0, 2], [3, 0, 0.5], spec) == pytest.approx(3.4)


@pytest.mark.parametrize("hp, s, mu, expected", [(0, [0, 0, 0, 0], 0.2, 0), (1, [0, 0, 0, 1], 1, 0),
                                                 (2, [0, 0, 0, 3], 0.1, 1.1)])
def test_legacy_examples(hp, s, mu, expected):
    assert legacy_h(np.array(s, float), hp, mu) == pytest.approx(expected)


def test_spec_validation():
    with pytest.raises(ValueError):
        TypeA(1, 1, 0.2)
    with pytest.raises(ValueError):
        TypeB(0, 0, 0.0, 0.3)
    with pytest.raises(ValueError):
        BarrierParams(gamma=0.0)
    with pytest.raises(ValueError):
        BarrierParams(alpha=-1.0)
    with pytest.raises(ValueError):
        h_typeA([0] * 4, [1, 0, 0, 0], BarrierSpec(TypeB(0, 0, 0.1, 0.1)))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=8, max_size=8), st.floats(0.05, 1.0), st.floats(0.0, 1.0))
def test_values_match_reference(z, r, mu_b):
    z = np.array(z)
    assert h_typeA(z[:4], z[4:], spec_a(r, mu_b)) == pytest.approx(h_pair(z[:4], z[4:], r, mu_b), abs=1e-12)
    spec = BarrierSpec(TypeB(0, 0, r, 0.3), BarrierParams(mu_b=mu_b))
    assert h_typeB(z[:4], z[4:6], spec) == pytest.approx(h_obstacle(z[:4], z[4:6], r + 0.3, mu_b), abs=1e-12)


# --- derivatives --------------------------------------------------------------------

def test_B_is_one_on_boundary():
    bv = pair_barrier(np.array([0, 0, 0, 0.0]), np.array([0.4, 0, 0, 0.0]), 0.2, BarrierParams())
    assert bv.B == 1.0


def test_zero_gradient_gives_zero_dB():
    # legacy obstacle barrier at the obstacle centre with v = 0 has dh = 0
    bv = obstacle_barrier(np.zeros(4), np.zeros(2), 0.5, BarrierParams(), legacy=True)
    np.testing.assert_array_equal(bv.dB, 0.0)


def test_worked_example_derivatives_against_fd():
    z = np.array([0, 0, 0, 1, 2, 0, math.pi, 1], float)
    bv = pair_barrier(z[:4], z[4:], 0.5, BarrierParams(mu_b=0.25))
    f = lambda x: math.exp(-h_pair(x[:4], x[4:], 0.5, 0.25))  # noqa: E731
    g = fd_gradient(f, z, 1e-5)
    assert np.linalg.norm(bv.dB - g) <= 1e-4 * np.linalg.norm(g)
    assert bv.B == pytest.approx(math.exp(-0.5))


def test_derivatives_fd_suite_small():
    errs = barrier_fd_errors(n_states=100, seed=11)
    assert max(errs.values()) <= 1e-3, errs


def test_barrier_derivatives_dispatch():
    states = np.array([[0, 0, 0.3, 0.5], [1.0, 0.2, -1.0, 0.4]])
    obs = np.array([[0.5, 1.0]])
    a = barrier_derivatives(BarrierSpec(TypeA(0, 1, 0.2)), states)
    b = pair_barrier(states[0], states[1], 0.2, BarrierParams())
    np.testing.assert_array_equal(a.d2B, b.d2B)
    c = barrier_derivatives(BarrierSpec(TypeB(1, 0, 0.2, 0.3)), states, obs)
    d = obstacle_barrier(states[1], obs[0], 0.5, BarrierParams())
    np.testing.assert_array_equal(c.dB, d.dB)
    e = barrier_derivatives(BarrierSpec(Legacy(TypeA(0, 1, 0.2))), states)
    assert e.h == pytest.approx(0.5 * (1.04 - 0.16) - 0.2 * (0.25 + 0.16))
    with pytest.raises(ValueError):
        barrier_derivatives(BarrierSpec(TypeB(0, 0, 0.2, 0.3)), states)


def test_exponent_clamp_keeps_values_finite():
    bv = obstacle_barrier(np.zeros(4), np.zeros(2), 100.0, BarrierParams(gamma=10.0))
    assert np.isfinite(bv.B) and np.all(np.isfinite(bv.d2B))


def test_B_nonnegative_and_at_least_one_when_unsafe():
    rng = np.random.default_rng(5)
    xi = rng.uniform(-1, 1, (2000, 4))
    xj = rng.uniform(-1, 1, (2000, 4))
    bv = pair_barrier(xi, xj, 0.3, BarrierParams(gamma=2.0))
    assert np.all(bv.B >= 0)
    assert np.all(bv.B[bv.h <= 0] >= 1)


def test_torch_and_numpy_agree():
    rng = np.random.default_rng(1)
    xi, xj = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    a_np, d_np, *_ = pair_row(xi, xj, 0.2, BarrierParams(), 0.1)
    a_t, d_t, *_ = pair_row(torch.as_tensor(xi), torch.as_tensor(xj), 0.2, BarrierParams(), 0.1)
    np.testing.assert_allclose(a_t.numpy(), a_np, rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(d_t.numpy(), d_np, rtol=1e-14, atol=1e-14)


# --- constraint rows ----------------------------------------------------------------

def test_row_vanishing_terms():
    # v = 0 kills the drift term; sigma = alpha = beta = 0 leaves d = 0
    states = np.array([[0, 0, 0.2, 0.0], [1.0, 0.5, 1.0, 0.0]])
    row = constraint_row(BarrierSpec(TypeA(0, 1, 0.2)), states, NoiseModel(0.0, 0.1, 1),
                         BarrierParams(alpha=0.0, beta=0.0))
    assert row.d == pytest.approx(0.0, abs=1e-15)
    assert row.owners == (0, 1)


def test_row_a_is_directional_derivative_along_Gu():
    rng = np.random.default_rng(2)
    for _ in range(20):
        states = rng.normal(size=(2, 4))
        u = rng.normal(size=4)
        row = constraint_row(BarrierSpec(TypeA(0, 1, 0.2)), states, NoiseModel(0.1, 0.1, 1))
        bv = pair_barrier(states[0], states[1], 0.2, BarrierParams())
        Gu = np.concatenate([actuation(states[0]) @ u[:2], actuation(states[1]) @ u[2:]])
        xbar = states.reshape(-1)
        f = lambda t: float(pair_barrier(*(xbar + t * Gu).reshape(2, 4), 0.2, BarrierParams()).B)  # noqa: E731
        fd = (f(1e-6) - f(-1e-6)) / 2e-6
        assert row.a @ u == pytest.approx(fd, rel=1e-6, abs=1e-9)
        assert row.a @ u == pytest.approx(bv.dB @ Gu, rel=1e-12, abs=1e-14)


def test_typeB_row_matches_termwise_oracle():
    states = np.array([[0.0, 0.0, 0.0, 2.0]])
    obs = np.array([[3.0, 0.0]])
    params = BarrierParams(gamma=1.0, alpha=1.0, beta=0.5, mu_b=0.1)
    row = constraint_row(BarrierSpec(TypeB(0, 0, 0.5, 0.5), params), states, NoiseModel(0.1, 0.1, 1),
                         obstacles=obs)
    bv = obstacle_barrier(states[0], obs[0], 1.0, params)
    a, d = scbf_row_termwise(bv.B, bv.dB, bv.d2B, states[0], 1.0, 0.5, 0.1)
    np.testing.assert_allclose(row.a, a, rtol=1e-13)
    assert row.d == pytest.approx(d, rel=1e-13)


def test_direct_rows_match_generic_assembly():
    rng = np.random.default_rng(4)
    params = BarrierParams(gamma=1.7, alpha=0.8, beta=0.3, mu_b=0.2)
    for legacy in (False, True):
        xi, xj = rng.normal(size=(30, 4)), rng.normal(size=(30, 4))
        a, d, h, _ = pair_row(xi, xj, 0.2, params, 0.3, legacy)
        bv = pair_barrier(xi, xj, 0.2, params, legacy)
        a2, d2 = row_from_barrier(bv, np.concatenate([xi, xj], -1), params, 0.3)
        np.testing.assert_allclose(a, a2, rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(d, d2, rtol=1e-11, atol=1e-13)
        obs = rng.normal(size=(30, 2))
        a, d, *_ = obstacle_row(xi, obs, 0.5, params, 0.3, legacy)
        bv = obstacle_barrier(xi, obs, 0.5, params, legacy)
        a2, d2 = row_from_barrier(bv, xi, params, 0.3)
        np.testing.assert_allclose(a, a2, rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(d, d2, rtol=1e-11, atol=1e-13)


def test_row_is_linear_in_u():
    rng = np.random.default_rng(6)
    row = constraint_row(BarrierSpec(TypeA(0, 1, 0.2)), rng.normal(size=(2, 4)), NoiseModel())
    u1, u2 = rng.normal(size=4), rng.normal(size=4)
    lhs = lambda u: row.a @ u - row.d  # noqa: E731
    assert lhs(u1 + u2) == pytest.approx(lhs(u1) + lhs(u2) + row.d, rel=1e-14, abs=1e-14)


def test_degenerate_row_flagged():
    # legacy obstacle row at the obstacle centre with v = 0: a = 0
    spec = BarrierSpec(Legacy(TypeB(0, 0, 0.2, 0.3)))
    row = constraint_row(spec, np.zeros((1, 4)), NoiseModel(), obstacles=np.zeros((1, 2)))
    assert row.degenerate


# --- failure bound ------------------------------------------------------------------

def test_failure_bound_examples():
    assert failure_bound(0.3, BarrierParams(alpha=0.0, beta=0.0), 5.0) == pytest.approx(0.3)
    assert failure_bound(0.1, BarrierParams(alpha=0.0, beta=0.05), 2.0) == pytest.approx(0.2)
    assert failure_bound(0.0, BarrierParams(alpha=1.0, beta=1.0), 60.0) == pytest.approx(1.0)
    assert failure_bound(1.5, BarrierParams(), 1.0) == 1.0
    with pytest.raises(ValueError):
        failure_bound(-0.1, BarrierParams(), 1.0)
    with pytest.raises(ValueError):
        failure_bound(0.1, BarrierParams(), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1.2), st.floats(0, 3), st.floats(0, 3), st.floats(0.01, 10))
def test_failure_bound_matches_reference(B0, alpha, beta, T):
    got = failure_bound(B0, BarrierParams(alpha=alpha, beta=beta), T)
    assert 0.0 <= got <= 1.0
    assert got == pytest.approx(failure_bound_reference(B0, alpha, beta, T), abs=1e-12)
