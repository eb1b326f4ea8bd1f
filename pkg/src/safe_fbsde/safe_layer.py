"""Torch wrapper around the decentralized QP solve.

Forward runs merged CADMM-OSQP on numpy copies of the QP data; backward
rebuilds each instance's stacked constraint matrix from the local blocks and
pulls the incoming gradient back with the hand-written KKT adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffqp
from .solver import DecentralizedProblem, SolveResult, SolverConfig, SolverState, solve_decentralized
from .topology import global_rows


@dataclass
class LayerContext:
    """Per-step inputs that are not tensors, plus what the step produced."""

    R: np.ndarray  # (m, m) control cost shared by all agents
    nbr: np.ndarray  # (B, N, r)
    config: SolverConfig
    warm: SolverState | None = None
    result: SolveResult | None = None
    degraded: int = 0
    stats: dict = field(default_factory=dict)


class SafeLayer(torch.autograd.Function):
    @staticmethod
    def forward(ctx, p, A, d, lctx: LayerContext):
        B, N, m = p.shape
        p_np = p.detach().cpu().numpy()
        A_np = A.detach().cpu().numpy()
        d_np = d.detach().cpu().numpy()
        R = np.broadcast_to(lctx.R, (B, N, m, m))
        prob = DecentralizedProblem(R, p_np, A_np, d_np, lctx.nbr)
        res = solve_decentralized(prob, lctx.config, warm=lctx.warm)
        lctx.result = res
        ctx.lctx = lctx
        ctx.np_data = (p_np, A_np, d_np, prob.idx)
        ctx.A_shape = A.shape
        return torch.as_tensor(res.u, dtype=p.dtype, device=p.device)

    @staticmethod
    def backward(ctx, grad_u):
        lctx = ctx.lctx
        res = lctx.result
        p_np, A_np, d_np, idx = ctx.np_data
        B, N, K, mt = A_np.shape
        m = p_np.shape[-1]
        L = mt // m
        g = grad_u.detach().cpu().numpy()
        Rinv = np.linalg.inv(lctx.R)
        grad_p = -np.einsum("ij,bnj->bni", Rinv, g)
        grad_A = np.zeros_like(A_np)
        grad_d = np.zeros_like(d_np)
        active = res.lam > 0
        need = active.reshape(B, -1).any(axis=1)
        if need.any():
            C_all = global_rows(A_np, idx, N, m)  # (B, N K, m N)
            R_glob = np.kron(np.eye(N), lctx.R)
            for b in np.flatnonzero(need):
                cache = diffqp.LayerCache(R_glob, C_all[b], d_np[b].reshape(-1), res.u[b].reshape(-1),
                                          res.lam[b].reshape(-1), active[b].reshape(-1))
                lg = diffqp.backprop_through_layer(cache, g[b].reshape(-1))
                lctx.degraded += int(lg.degraded)
                grad_p[b] = lg.grad_p.reshape(N, m)
                grad_d[b] = lg.grad_d.reshape(N, K)
                # local entry (i, k, block l, c) is global column m idx[i, l] + c
                gC = lg.grad_C.reshape(N, K, N, m)
                rows_i = np.arange(N)[:, None, None]
                grad_A[b] = gC[rows_i, np.arange(K)[None, :, None], idx[b][:, None, :], :].reshape(N, K, L * m)
        to = lambda x: torch.as_tensor(x, dtype=grad_u.dtype, device=grad_u.device)  # noqa: E731
        return to(grad_p), to(grad_A), to(grad_d), None


def safe_controls(p, A, d, lctx: LayerContext):
    return SafeLayer.apply(p, A, d, lctx)
