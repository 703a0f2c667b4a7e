"""Clear/unclear room status via fixed-point propagation over the room graph."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class ClearanceState:
    u: np.ndarray  # 1 = unclear
    v: np.ndarray  # 1 = unoccupied by a living agent

    def __eq__(self, other):
        return isinstance(other, ClearanceState) and np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v)

    __hash__ = None

    @property
    def clear_count(self) -> int:
        return int(len(self.u) - self.u.sum())

    @property
    def all_clear(self) -> bool:
        return not self.u.any()


def _check(A, *vectors):
    A = np.asarray(A)
    m = A.shape[0]
    if A.ndim != 2 or A.shape[1] != m:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    out = []
    for vec in vectors:
        vec = np.asarray(vec)
        if vec.shape != (m,):
            raise ValueError(f"vector of shape {vec.shape} does not match {m} rooms")
        out.append(vec.astype(np.int64))
    return A.astype(np.int64), out


def propagate_unclear_counted(A, u_seed, v) -> tuple[np.ndarray, int]:
    """Like :func:`propagate_unclear` but also returns the iteration count."""
    A, (u, v) = _check(A, u_seed, v)
    step = A + np.eye(A.shape[0], dtype=np.int64)
    # occupied seeds are dropped before spreading
    u = np.minimum(u * v, 1)
    iterations = 0
    while True:
        iterations += 1
        nxt = np.minimum(step @ u * v, 1)
        if np.array_equal(nxt, u):
            return nxt, iterations
        u = nxt


def propagate_unclear(A, u_seed, v) -> np.ndarray:
    """Fixed point of ``u <- clip(((A + I) u) * v, 0, 1)``.

    The identity term keeps an unoccupied unclear room unclear even when none
    of its neighbours are. Converges in at most ``m`` iterations.
    """
    return propagate_unclear_counted(A, u_seed, v)[0]


def oracle_propagate_bfs(A, u_seed, v) -> np.ndarray:
    """Breadth-first reference for :func:`propagate_unclear`."""
    A, (u_seed, v) = _check(A, u_seed, v)
    m = A.shape[0]
    out = np.zeros(m, dtype=np.int64)
    queue = deque(i for i in range(m) if u_seed[i] and v[i])
    for i in queue:
        out[i] = 1
    while queue:
        i = queue.popleft()
        for j in range(m):
            if A[i, j] and v[j] and not out[j]:
                out[j] = 1
                queue.append(j)
    return out


def occupied_vector(world) -> np.ndarray:
    v = np.ones(world.scenario.floorplan.m, dtype=np.int64)
    for a in world.agents:
        if a.alive:
            v[a.room] = 0
    return v


def enemy_rooms(world) -> np.ndarray:
    e = np.zeros(world.scenario.floorplan.m, dtype=np.int64)
    for en in world.enemies:
        if en.alive:
            e[en.room] = 1
    return e


def recompute_clearance(world, initial: bool = False) -> ClearanceState:
    """Clearance after a step (or at episode start when ``initial``).

    A room that holds both a living agent and a living enemy is reported
    unclear but, being occupied, does not spread its status.
    """
    A = world.scenario.floorplan.adjacency
    v = occupied_vector(world)
    hostile = enemy_rooms(world)
    if initial:
        seed = np.ones_like(v)
    else:
        seed = world.clearance.u * v
    seed = np.maximum(seed, hostile)
    seed[(v == 0) & (hostile == 0)] = 0
    u = np.maximum(propagate_unclear(A, seed, v), hostile)
    return ClearanceState(u, v)
