"""Neighborhoods, local SCBF constraint assembly and duplicate bookkeeping.

Every agent i optimises over ``u_tilde_i = [u_i; u_j^(i) for j in N_i]``: its
own control block first, then one copy block per neighbour in ``N_i`` order.
Local rows ``A_i u_tilde_i <= d_i`` are ordered as

1. Type-A ego-neighbour rows, one per neighbour,
2. Type-B ego-obstacle rows, one per obstacle,
3. (optional) Type-B neighbour-obstacle rows, neighbour-major,
4. (optional) Type-A neighbour-neighbour rows for each neighbour pair.

Pair rows are always evaluated with the lower global agent index first, so
the row two mutual neighbours compute for each other is bit-identical.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from math import comb
from typing import NamedTuple, Sequence

import numpy as np

from . import _xp
from .barriers import DEGENERACY_TOL, BarrierParams, obstacle_row, pair_row
from .dynamics import CONTROL_DIM, GlobalState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Neighborhood:
    ego: int
    neighbors: tuple[int, ...]
    reverse: frozenset = frozenset()

    def __post_init__(self):
        if self.ego in self.neighbors:
            raise ValueError("an agent cannot be its own neighbour")

    @property
    def columns(self) -> tuple[int, ...]:
        """Global agent index of each control block of u_tilde."""
        return (self.ego,) + tuple(self.neighbors)


@dataclass(frozen=True)
class ExtraConstraints:
    neighbor_obstacle: bool = False
    neighbor_neighbor: bool = False


class RowTag(NamedTuple):
    kind: str  # "A" or "B"
    agents: tuple[int, ...]  # global indices, ascending for Type-A
    obstacle: int = -1


@dataclass
class LocalConstraints:
    A: np.ndarray
    d: np.ndarray
    tags: list
    columns: tuple[int, ...]
    degenerate: np.ndarray = field(default=None)
    h: np.ndarray = field(default=None)
    h_pos: np.ndarray = field(default=None)

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]


@dataclass
class DuplicateMap:
    """C = M Cbar and d = M dbar with equivalence classes of identical rows."""

    M: np.ndarray
    Cbar: np.ndarray
    dbar: np.ndarray
    row_class: np.ndarray
    classes: list

    @property
    def counts(self) -> np.ndarray:
        return self.M.sum(axis=0).astype(int)


# --- neighbourhoods ----------------------------------------------------------

def neighbor_indices(positions, r: int) -> np.ndarray:
    """r nearest agents by Euclidean distance, ties to the lower index.

    ``positions`` has shape (..., N, 2); returns int array (..., N, r).
    """
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[-2]
    if r < 0 or r >= n:
        raise ValueError(f"neighbourhood size r={r} needs 0 <= r < N={n}")
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    idx = np.arange(n)
    dist[..., idx, idx] = np.inf
    order = np.argsort(dist, axis=-1, kind="stable")
    return order[..., :r]


def reverse_sets(nbr: np.ndarray) -> list[frozenset]:
    """P_i = {j : i in N_j} for an unbatched (N, r) neighbour array."""
    n = nbr.shape[0]
    rev = [set() for _ in range(n)]
    for j in range(n):
        for i in nbr[j]:
            rev[int(i)].add(j)
    return [frozenset(s) for s in rev]


def build_neighborhoods(g, r: int) -> list[Neighborhood]:
    states = g.states if isinstance(g, GlobalState) else np.asarray(g, dtype=float)
    if states.ndim != 2:
        raise ValueError("build_neighborhoods works on a single (N, 4) instance")
    nbr = neighbor_indices(states[:, :2], r)
    rev = reverse_sets(nbr)
    return [Neighborhood(i, tuple(int(j) for j in nbr[i]), rev[i]) for i in range(len(nbr))]


# --- row counts --------------------------------------------------------------

def local_row_count(r: int, n_obstacles: int, extras: ExtraConstraints = ExtraConstraints()) -> int:
    count = r + n_obstacles
    if extras.neighbor_obstacle:
        count += r * n_obstacles
    if extras.neighbor_neighbor:
        count += comb(r, 2)
    return count


def centralized_counts(N: int, n_obstacles: int) -> int:
    if N < 1:
        raise ValueError("need N >= 1")
    return comb(N, 2) + N * n_obstacles


# --- assembly ----------------------------------------------------------------

def _slot_layout(r: int, n_obstacles: int, extras: ExtraConstraints):
    """Static description of each local row: (kind, block_a, block_b_or_obstacle)."""
    slots = [("A", 0, q + 1) for q in range(r)]
    slots += [("B", 0, o) for o in range(n_obstacles)]
    if extras.neighbor_obstacle:
        slots += [("B", q + 1, o) for q in range(r) for o in range(n_obstacles)]
    if extras.neighbor_neighbor:
        slots += [("A", a + 1, b + 1) for a, b in itertools.combinations(range(r), 2)]
    return slots


def _gather(states, idx):
    """states (..., N, 4), idx (..., M, L) int -> (..., M, L, 4)."""
    if _xp.is_torch(states):
        import torch
        lead = states.shape[:-2]
        flat_idx = torch.as_tensor(idx, device=states.device)
        if len(lead) == 0:
            return states[flat_idx]
        b = torch.arange(lead[0], device=states.device).view(-1, *([1] * (flat_idx.dim() - 1)))
        return states[b, flat_idx]
    states = np.asarray(states)
    if states.ndim == 2:
        return states[idx]
    b = np.arange(states.shape[0]).reshape(-1, *([1] * (idx.ndim - 1)))
    return states[b, idx]


def _place(rows, blocks, n_blocks: int):
    """Scatter per-row 2-vectors into local columns.

    rows (..., S, 2), blocks (..., S) int -> (..., S, 2 * n_blocks)
    """
    onehot = (np.asarray(blocks)[..., None] == np.arange(n_blocks)).astype(float)
    oh = _xp.asarray_like(onehot, rows)
    placed = oh[..., :, None] * rows[..., None, :]
    return placed.reshape(*placed.shape[:-2], 2 * n_blocks)


class AssembledBatch(NamedTuple):
    A: object  # (..., M, K, m(r+1))
    d: object  # (..., M, K)
    h: object
    h_pos: object
    idx: np.ndarray  # (..., M, r+1) global agent of each block
    slots: list


def assemble_batch(states, ego, nbr, obstacles, obstacle_radii, r_agent: float,
                   params: BarrierParams, sigma: float,
                   extras: ExtraConstraints = ExtraConstraints(), legacy: bool = False) -> AssembledBatch:
    """Local SCBF rows for every ego agent in ``ego``.

    states (..., N, 4); ego (..., M) int; nbr (..., M, r) int;
    obstacles (..., N_o, 2) or None.  ``states`` may be a torch tensor, in
    which case A and d stay differentiable with respect to it.
    """
    ego = np.asarray(ego)
    nbr = np.asarray(nbr)
    r = nbr.shape[-1]
    n_obs = 0 if obstacles is None else obstacles.shape[-2]
    slots = _slot_layout(r, n_obs, extras)
    idx = np.concatenate([ego[..., None], nbr], axis=-1)
    local = _gather(states, idx)  # (..., M, r+1, 4)
    n_blocks = r + 1
    A_parts, d_parts, h_parts, hp_parts = [], [], [], []

    a_slots = [(k, s) for k, s in enumerate(slots) if s[0] == "A"]
    b_slots = [(k, s) for k, s in enumerate(slots) if s[0] == "B"]
    order = []
    if a_slots:
        la = np.array([s[1] for _, s in a_slots])
        lb = np.array([s[2] for _, s in a_slots])
        ga, gb = idx[..., la], idx[..., lb]
        swap = ga > gb
        blk_lo = np.where(swap, lb, la)
        blk_hi = np.where(swap, la, lb)
        x_lo = _gather_blocks(local, blk_lo)
        x_hi = _gather_blocks(local, blk_hi)
        a, d, h, h_pos = pair_row(x_lo, x_hi, r_agent, params, sigma, legacy)
        A_parts.append(_place(a[..., :2], blk_lo, n_blocks) + _place(a[..., 2:], blk_hi, n_blocks))
        d_parts.append(d)
        h_parts.append(h)
        hp_parts.append(h_pos)
        order += [k for k, _ in a_slots]
    if b_slots:
        lblk = np.array([s[1] for _, s in b_slots])
        oidx = np.array([s[2] for _, s in b_slots])
        x = _gather_blocks(local, np.broadcast_to(lblk, idx.shape[:-1] + lblk.shape))
        obs = obstacles[..., oidx, :]
        if obs.ndim < x.ndim:
            obs = obs[..., None, :, :] if _xp.is_torch(obs) else np.expand_dims(obs, -3)
        r_sum = _xp.asarray_like(np.asarray(obstacle_radii, dtype=float)[oidx] + r_agent, x[..., 0])
        a, d, h, h_pos = obstacle_row(x, obs, r_sum, params, sigma, legacy)
        A_parts.append(_place(a, np.broadcast_to(lblk, a.shape[:-1]), n_blocks))
        d_parts.append(d)
        h_parts.append(h)
        hp_parts.append(h_pos)
        order += [k for k, _ in b_slots]

    if not order:
        shape = idx.shape[:-1] + (0,)
        z = _xp.asarray_like(np.zeros(shape), local[..., 0, 0])
        zA = _xp.asarray_like(np.zeros(shape + (CONTROL_DIM * n_blocks,)), local[..., 0, 0])
        return AssembledBatch(zA, z, z, z, idx, slots)
    inv = np.argsort(order)
    A = _xp.concat(A_parts, axis=-2)[..., inv, :]
    d = _xp.concat(d_parts)[..., inv]
    h = _xp.concat(h_parts)[..., inv]
    h_pos = _xp.concat(hp_parts)[..., inv]
    return AssembledBatch(A, d, h, h_pos, idx, slots)


def _gather_blocks(local, blocks):
    """local (..., M, L, 4), blocks (..., M, S) -> (..., M, S, 4)."""
    blocks = np.asarray(blocks)
    if _xp.is_torch(local):
        import torch
        bidx = torch.as_tensor(np.ascontiguousarray(blocks), device=local.device)
        bidx = bidx[..., None].expand(*bidx.shape, local.shape[-1])
        return torch.gather(local, -2, bidx)
    return np.take_along_axis(local, blocks[..., None], axis=-2)


def slot_tags(slots, columns: Sequence[int]) -> list[RowTag]:
    tags = []
    for kind, a, b in slots:
        if kind == "A":
            tags.append(RowTag("A", tuple(sorted((columns[a], columns[b])))))
        else:
            tags.append(RowTag("B", (columns[a],), b))
    return tags


def assemble_local(nbhd: Neighborhood, states, obstacles=None, params: BarrierParams = BarrierParams(),
                   extras: ExtraConstraints = ExtraConstraints(), *, r_agent: float = 0.2,
                   obstacle_radii=(), sigma: float = 0.0, legacy: bool = False) -> LocalConstraints:
    """Local constraint block ``A_i u_tilde_i <= d_i`` for one agent."""
    states = np.asarray(states, dtype=float)
    obs = None if obstacles is None or len(obstacles) == 0 else np.asarray(obstacles, dtype=float)[:, :2]
    if obs is not None and len(obstacle_radii) != len(obs):
        raise ValueError("one radius per obstacle is required")
    out = assemble_batch(states, np.array([nbhd.ego]), np.array([nbhd.neighbors], dtype=int).reshape(1, -1),
                         obs, obstacle_radii, r_agent, params, sigma, extras, legacy)
    A, d = np.asarray(out.A[0]), np.asarray(out.d[0])
    degenerate = np.max(np.abs(A), axis=1, initial=0.0) < DEGENERACY_TOL
    if degenerate.any():
        log.warning("agent %d: %d degenerate SCBF rows kept", nbhd.ego, int(degenerate.sum()))
    return LocalConstraints(A, d, slot_tags(out.slots, nbhd.columns), nbhd.columns, degenerate,
                            np.asarray(out.h[0]), np.asarray(out.h_pos[0]))


# --- centralised (duplicate) problem ----------------------------------------

def selection_matrix(columns: Sequence[int], n_agents: int, m: int = CONTROL_DIM) -> np.ndarray:
    """P with u_tilde_i = P u, shape (m(r+1), m N)."""
    P = np.zeros((m * len(columns), m * n_agents))
    for blk, agent in enumerate(columns):
        if not 0 <= agent < n_agents:
            raise ValueError(f"column maps to agent {agent} outside 0..{n_agents - 1}")
        P[m * blk:m * blk + m, m * agent:m * agent + m] = np.eye(m)
    return P


def global_rows(A, idx: np.ndarray, n_agents: int, m: int = CONTROL_DIM):
    """Rewrite batched local rows in global control coordinates.

    A (..., N, K, m L), idx (..., N, L) -> C (..., N K, m N).  Works on torch
    tensors (differentiably) as well as arrays.
    """
    idx = np.asarray(idx)
    onehot = (idx[..., None] == np.arange(n_agents)).astype(float)  # (..., N, L, N)
    oh = _xp.asarray_like(onehot, A)
    Ab = A.reshape(*A.shape[:-1], idx.shape[-1], m)  # (..., N, K, L, m)
    C = _xp.einsum("...klm,...lj->...kjm", Ab, oh)
    C = C.reshape(*C.shape[:-2], n_agents * m)
    return C.reshape(*C.shape[:-3], C.shape[-3] * C.shape[-2], n_agents * m)


def duplicate_map(C: np.ndarray, d: np.ndarray) -> DuplicateMap:
    """Equivalence classes of bit-identical (row, rhs) pairs.

    Classes are numbered in order of first appearance.
    """
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    if C.shape[0] == 0:
        return DuplicateMap(np.zeros((0, 0)), C.copy(), d.copy(), np.zeros(0, int), [])
    key = np.concatenate([C, d[:, None]], axis=1)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)  # unique rows in order of first appearance
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    row_class = rank[inverse.reshape(-1)]
    reps = first[order]
    n_unique = len(reps)
    M = np.zeros((len(row_class), n_unique))
    M[np.arange(len(row_class)), row_class] = 1.0
    by_class = np.argsort(row_class, kind="stable")
    bounds = np.cumsum(np.bincount(row_class, minlength=n_unique))[:-1]
    classes = [[int(k) for k in c] for c in np.split(by_class, bounds)]
    return DuplicateMap(M, C[reps].copy(), d[reps].copy(), row_class, classes)


def assemble_duplicate(all_local: Sequence[LocalConstraints], N: int, r: int | None = None,
                       m: int = CONTROL_DIM):
    """Stack every agent's local rows in global coordinates.

    Returns ``(C, d, DuplicateMap)``; rows shared by mutual neighbours show up
    once per owner and are grouped into one class.
    """
    rows, rhs = [], []
    for lc in all_local:
        if r is not None and len(lc.columns) != r + 1:
            raise ValueError(f"agent {lc.columns[0]} has {len(lc.columns) - 1} neighbours, expected {r}")
        P = selection_matrix(lc.columns, N, m)
        if lc.A.shape[1] != P.shape[0]:
            raise ValueError("local constraint width does not match its column map")
        rows.append(lc.A @ P)
        rhs.append(lc.d)
    C = np.concatenate(rows, axis=0) if rows else np.zeros((0, m * N))
    d = np.concatenate(rhs) if rhs else np.zeros(0)
    return C, d, duplicate_map(C, d)
