import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from safe_fbsde import learner as L
from safe_fbsde.app.tasks import TaskSpec, make_task
from safe_fbsde.barriers import BarrierParams
from safe_fbsde.dynamics import NoiseModel, actuation, step_arrays
from safe_fbsde.solver import VERIFY_CONFIG
from safe_fbsde.topology import assemble_batch, neighbor_indices

from oracles import adam_reference


def tiny_task(pos, heading, targets, obstacles=(), radii=(), r=0, sigma=0.0, dt=0.1, H=1, **kw):
    pos = np.asarray(pos, dtype=float)
    start = np.zeros((len(pos), 4))
    start[:, :2] = pos
    start[:, 2] = heading
    start[:, 3] = kw.pop("v0", 0.5)
    return TaskSpec(name="swap", n_agents=len(pos), start=start, targets_final=targets,
                    obstacle_xy=np.asarray(obstacles, dtype=float).reshape(-1, 2), obstacle_radii=radii, r=r,
                    noise=NoiseModel(sigma, dt, H), init_noise=0.0, barrier=BarrierParams(gamma=5.0), **kw)


def model_for(task, seed=0, **kw):
    return L.ValueModel.create(L.observation_dim(task.n_obstacles, task.r), hidden=16, head_hidden=8, seed=seed,
                               **kw)


# --- small pieces ---------------------------------------------------------------

@pytest.mark.parametrize("dV, expected", [([0, 0, 1, 0], [2, 0]), ([0, 0, 0, 1], [0, 1]), ([1, -3, 0, 0], [0, 0])])
def test_hamiltonian_linear_term(dV, expected):
    G = actuation(np.array([0.0, 0.0, 0.7, 2.0]))
    np.testing.assert_array_equal(L.hamiltonian_linear_term(np.array(dV, float), G), expected)
    t = L.hamiltonian_linear_term(torch.tensor(dV, dtype=L.DTYPE), torch.as_tensor(G))
    np.testing.assert_array_equal(t.numpy(), expected)


def test_bsde_step_examples():
    z = np.zeros((2, 2))
    dV = np.ones((2, 4))
    assert L.bsde_step(3.0, np.zeros(2), z, dV, np.eye(2), 0.0, z, 0.1) == 3.0
    assert L.bsde_step(0.0, np.ones(2), z, dV, np.eye(2), 0.0, z, 0.1) == pytest.approx(-0.2)
    u = np.array([[1.0, 0.0], [0.0, 2.0]])
    # 0.5 (1 + 4 * 3) with R = diag(1, 3)
    assert L.bsde_step(0.0, np.zeros(2), u, dV, np.diag([1.0, 3.0]), 0.0, z, 1.0) == pytest.approx(-6.5)


def test_bsde_noise_variance():
    rng = np.random.default_rng(0)
    dV = np.array([[0.3, -1.0, 0.8, -0.5], [2.0, 0.0, -0.4, 1.1]])
    sigma, dt = 0.4, 0.05
    eps = rng.standard_normal((10_000, 2, 2))
    dVb = np.broadcast_to(dV, (10_000, 2, 4))
    inc = L.bsde_step(np.zeros(10_000), np.zeros((10_000, 2)), np.zeros((10_000, 2, 2)), dVb, np.eye(2), sigma,
                      eps, dt)
    expected = sigma ** 2 * dt * float((dV[:, 2:] ** 2).sum())
    # sample variance of 1e4 Gaussians has about 1.4 % relative spread
    assert inc.var() == pytest.approx(expected, rel=0.06)


def test_terminal_loss():
    V = torch.tensor([1.0, 3.0], dtype=L.DTYPE, requires_grad=True)
    phi = torch.zeros(2, dtype=L.DTYPE)
    loss = L.terminal_loss(V, phi)
    assert loss.item() == 5.0
    loss.backward()
    np.testing.assert_array_equal(V.grad.numpy(), [1.0, 3.0])  # 2 (V - phi) / 2
    assert float(L.terminal_loss(phi + 2.0, phi + 2.0)) == 0.0


# --- Adam ---------------------------------------------------------------------------

def test_adam_matches_reference():
    rng = np.random.default_rng(1)
    theta = rng.normal(size=5)
    grads = rng.normal(size=(30, 5))
    st = L.AdamState.zeros_like([theta], lr=0.01)
    p = [theta.copy()]
    for g in grads:
        p, st = L.adam_step(p, [g], st)
    np.testing.assert_allclose(p[0], adam_reference(theta, grads, lr=0.01), rtol=1e-13)


def test_adam_single_step_and_zero_gradient():
    g = np.array([0.5, -2.0, 1e-3])
    st = L.AdamState.zeros_like([np.zeros(3)])
    (p,), st = L.adam_step([np.zeros(3)], [g], st)
    np.testing.assert_allclose(p, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    m_before = st.m[0].copy()
    (p2,), st = L.adam_step([p], [np.zeros(3)], st)
    np.testing.assert_array_equal(p2, p - 1e-3 * (0.9 * m_before / (1 - 0.9 ** 2))
                                  / (np.sqrt(st.v[0] / (1 - 0.999 ** 2)) + 1e-8))
    assert np.all(np.abs(st.m[0]) < np.abs(m_before))


def test_adam_constant_gradient_steps_towards_lr():
    st = L.AdamState.zeros_like([np.zeros(2)], lr=0.01)
    p = [np.zeros(2)]
    for _ in range(200):
        prev = p[0].copy()
        p, st = L.adam_step(p, [np.array([3.0, -0.2])], st)
    np.testing.assert_allclose(np.abs(p[0] - prev), 0.01, rtol=1e-6)


def test_adam_skips_non_finite():
    st = L.AdamState.zeros_like([np.ones(2)])
    (p,), st = L.adam_step([np.ones(2)], [np.array([np.nan, 1.0])], st)
    np.testing.assert_array_equal(p, 1.0)
    assert st.skipped == 1 and st.step == 0


# --- model ----------------------------------------------------------------------

def test_zero_weights_zero_output():
    m = L.ValueModel.create(7, hidden=5, head_hidden=3)
    m = L.ValueModel.from_arrays({k: np.zeros_like(v) for k, v in m.arrays().items()})
    out = L.value_forward(m, np.random.default_rng(0).normal(size=(3, 7)))
    assert torch.count_nonzero(out) == 0


def test_network_jacobian_against_finite_differences():
    m = L.ValueModel.create(9, hidden=16, seed=3, last_gain=1.0)
    x = torch.as_tensor(np.random.default_rng(2).normal(size=9), dtype=L.DTYPE)
    J = torch.autograd.functional.jacobian(lambda z: L.value_forward(m, z), x).numpy()
    h = 1e-6
    fd = np.stack([(L.value_forward(m, x + h * e) - L.value_forward(m, x - h * e)).detach().numpy() / (2 * h)
                   for e in torch.eye(9, dtype=L.DTYPE)], axis=1)
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) <= 1e-4


def test_locality_exact():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(1, 5, 4))
    targets = rng.normal(size=(5, 2))
    m = L.ValueModel.create(L.observation_dim(1, 2), seed=1)
    obstacles = np.array([[0.5, 0.5]])

    def agent0(states):
        st = torch.as_tensor(states)
        nbr = neighbor_indices(states[..., :2], 2)
        return L.value_forward(m, L.build_observation(st, nbr, targets, obstacles, 0.3))[0, 0], nbr[0, 0]

    out, hood = agent0(s)
    outsider = [j for j in range(1, 5) if j not in hood]
    s2 = s.copy()
    # move an outsider further away and spin it; agent 0's neighbourhood is unchanged
    s2[0, outsider[0], :2] = s[0, 0, :2] + 50.0
    s2[0, outsider[0], 2:] = [1.3, -0.7]
    out2, hood2 = agent0(s2)
    assert list(hood2) == list(hood)
    assert torch.equal(out, out2)


# --- rollout ---------------------------------------------------------------------

def test_horizon_one_unconstrained_minimizer():
    task = tiny_task([[0.0, 0.0], [4.0, 0.0]], 0.0, [[1.0, 1.0], [5.0, 1.0]], obstacles=[[-9.0, -9.0]],
                     radii=[0.3], r=1)
    m = model_for(task, seed=2, out_scale=5.0)
    roll = L.rollout(m, task.start, task, VERIFY_CONFIG, seed=0)
    p = roll.p[0].detach().numpy()
    expected = -p @ np.linalg.inv(task.R).T
    np.testing.assert_allclose(roll.u[0].detach().numpy(), expected, rtol=1e-12, atol=1e-14)
    assert len(roll.states) == len(roll.values) == 2


def test_shared_noise_between_forward_and_backward_equations():
    task = make_task("swap", 4, noise=NoiseModel(0.3, 0.2, 4))
    m = model_for(task)
    roll = L.rollout(m, task.initial_states(3, np.random.default_rng(0)), task, seed=5)
    for t in range(4):
        eps = torch.as_tensor(roll.noise[t])
        nxt = step_arrays(roll.states[t], roll.u[t], eps, 0.3, 0.2)
        assert torch.equal(nxt, roll.states[t + 1])
        V = L.bsde_step(roll.values[t], task.running_cost(roll.states[t], t), roll.u[t], roll.dVdx[t], task.R, 0.3,
                        eps, 0.2)
        assert torch.equal(V, roll.values[t + 1])


def test_far_apart_agents_match_independent_rollouts():
    kw = dict(heading=0.3, obstacles=[[0.0, 40.0]], radii=[0.3], sigma=0.2, H=5)
    pos = np.array([[-30.0, 0.0], [30.0, 0.0]])
    tg = pos + 1.0
    both = tiny_task(pos, targets=tg, **kw)
    m = model_for(both, seed=4, out_scale=3.0)
    noise = np.random.default_rng(9).standard_normal((5, 2, 2, 2))
    joint = L.rollout(m, np.broadcast_to(both.start, (2, 2, 4)), both, VERIFY_CONFIG, noise=noise)
    for i in range(2):
        one = tiny_task(pos[i:i + 1], targets=tg[i:i + 1], **kw)
        solo = L.rollout(m, np.broadcast_to(one.start, (2, 1, 4)), one, VERIFY_CONFIG, noise=noise[:, :, i:i + 1])
        for a, b in zip(joint.states, solo.states):
            np.testing.assert_array_equal(a[:, i:i + 1].detach().numpy(), b.detach().numpy())


def _local_controls(u, nbr):
    B, N, m = u.shape
    idx = np.concatenate([np.broadcast_to(np.arange(N)[None, :, None], (B, N, 1)), nbr], axis=-1)
    return u[np.arange(B)[:, None, None], idx].reshape(B, N, -1)


def test_collision_course_rows_hold():
    task = tiny_task([[-1.0, 0.0], [1.0, 0.02]], [0.0, math.pi], [[1.5, 0.0], [-1.5, 0.0]], r=1, sigma=0.1,
                     dt=0.1, H=15, v0=1.0)
    m = model_for(task, seed=0, out_scale=20.0)
    B = 4
    roll = L.rollout(m, np.broadcast_to(task.start, (B, 2, 4)), task, replace(VERIFY_CONFIG, eps_abs=1e-7,
                                                                            eps_rel=1e-7, max_iters=20000), seed=3)
    worst = 0.0
    active = 0
    for t in range(15):
        s = roll.states[t].detach()
        nbr = roll.layers[t].nbr
        asm = assemble_batch(s, np.broadcast_to(np.arange(2), (B, 2)), nbr, None, [], task.r_agent, task.barrier,
                             0.1, task.extras)
        uloc = _local_controls(roll.u[t].detach().numpy(), nbr)
        A, d = asm.A.numpy(), asm.d.numpy()
        viol = (np.einsum("bnkj,bnj->bnk", A, uloc) - d) / np.maximum(1.0, np.linalg.norm(A, axis=-1))
        worst = max(worst, float(viol.max()))
        active += int((roll.layers[t].result.lam > 0).sum())
    assert active > 0, "the scenario should engage the pair rows"
    assert worst <= 1e-4


def test_head_only_gradient_without_costs_or_noise():
    task = tiny_task([[0.0, 0.0]], 0.0, [[1.0, 0.0]], H=3, w_p=0.0, w_v=0.0, W_p=0.0, W_v=0.0, v0=0.0)
    m = model_for(task, seed=1)
    arr = m.arrays()
    arr["W3"][:] = 0.0
    arr["b3"][:] = 0.0
    m = L.ValueModel.from_arrays(arr)
    roll = L.rollout(m, task.start, task, seed=0)
    grads = dict(zip(m.names(), L.backward(roll, m)))
    for k in m.LAYERS:
        assert torch.count_nonzero(grads[k]) == 0, k
    assert any(torch.count_nonzero(grads[k]) for k in m.HEAD)


@pytest.mark.parametrize("cost_weight", [0.0, 1.0])
def test_whole_pipeline_gradient_matches_finite_differences(cost_weight):
    task = tiny_task([[-0.7, 0.0], [0.7, 0.05]], [0.0, math.pi], [[1.0, 0.0], [-1.0, 0.0]], obstacles=[[0.0, 1.5]],
                     radii=[0.3], r=1, sigma=0.1, dt=0.1, H=3, v0=1.0)
    cfg = L.LearnerConfig(cost_weight=cost_weight)
    solver = replace(VERIFY_CONFIG, eps_abs=1e-10, eps_rel=1e-10, max_iters=50000)
    base = model_for(task, seed=7, out_scale=10.0)
    init = np.broadcast_to(task.start, (2, 2, 4))
    noise = np.random.default_rng(3).standard_normal((3, 2, 2, 2))

    def objective(arrays, model=None):
        m = model or L.ValueModel.from_arrays(arrays, base.out_scale)
        return L.rollout(m, init, task, solver, config=cfg, noise=noise)

    roll = objective(None, base)
    assert sum(int((l.result.lam > 0).sum()) for l in roll.layers) > 0
    grads = dict(zip(base.names(), L.backward(roll, base)))
    picks = [("W1", (0, 0)), ("W2", (3, 1)), ("W3", (2, 2)), ("b3", (3,)), ("W3", (5, 3))]
    h = 1e-6
    for name, idx in picks:
        arr = base.arrays()
        arr[name][idx] += h
        up = objective(arr).objective.item()
        arr[name][idx] -= 2 * h
        dn = objective(arr).objective.item()
        fd = (up - dn) / (2 * h)
        an = float(grads[name][idx])
        assert abs(an - fd) <= 1e-2 * max(abs(fd), 1e-6), (name, an, fd)


def test_sanity_convergence_unconstrained_reach():
    task = tiny_task([[0.0, 0.0]], 0.0, [[1.5, 1.0]], H=20, dt=0.1, sigma=0.0)
    cfg = L.LearnerConfig(safe=False)
    m = model_for(task, seed=0, out_scale=1.0)
    st = L.AdamState.zeros_like(m.parameters(), lr=1e-2)
    init = np.broadcast_to(task.start, (4, 1, 4))
    losses = []
    for it in range(500):
        roll = L.rollout(m, init, task, config=cfg, seed=it)
        losses.append(roll.loss.item())
        st = L.apply_adam(m, L.backward(roll, m), st)
    assert losses[-1] <= 0.1 * losses[0]


# --- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = L.ValueModel.create(8, hidden=6, head_hidden=4, seed=3, out_scale=2.0, value_scale=7.0)
    L.save_checkpoint(m, tmp_path / "a.json", meta={"iter": 3})
    back = L.load_checkpoint(tmp_path / "a.json")
    assert back.out_scale == 2.0 and back.value_scale == 7.0
    for k, v in m.arrays().items():
        assert np.array_equal(back.arrays()[k], v)
    L.save_checkpoint(back, tmp_path / "b.json", meta={"iter": 3})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_checkpoint_bad_format(tmp_path):
    m = L.ValueModel.create(4, hidden=3, head_hidden=2)
    L.save_checkpoint(m, tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="format"):
        L.load_checkpoint(tmp_path / "c.json")
    doc["format_version"] = L.CHECKPOINT_VERSION
    del doc["params"]["W2"]
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="W2"):
        L.load_checkpoint(tmp_path / "c.json")
