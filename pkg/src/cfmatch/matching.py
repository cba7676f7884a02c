"""Capacitated maximum-weight bipartite matching with dual certificates.

Refugees are rows, locations are columns with integer capacities.  The
solver works on a balanced instance (total capacity equals row count) built
by :func:`pad_to_balanced`, runs successive shortest augmenting paths with
node potentials, recovers a nonnegative optimal dual and finally moves to the
lexicographically smallest co-optimal assignment.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

UNASSIGNED = -1
TOL = 1e-9
# relative slack used to decide which edges are tight (co-optimal ties)
TIGHT_RTOL = 1e-12
BRUTE_FORCE_LIMIT = 10**7


class ShapeError(ValueError):
    pass


class InstanceTooLarge(RuntimeError):
    pass


def as_weights(w) -> np.ndarray:
    arr = np.array(w, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise ShapeError(f"weights must be a 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("weights must be finite")
    if np.any(arr < 0):
        raise ValueError("weights must be nonnegative")
    return arr


def as_capacities(c, k: int | None = None) -> np.ndarray:
    arr = np.array(c, dtype=np.int64).reshape(-1)
    if np.any(arr < 0):
        raise ValueError("capacities must be nonnegative")
    if k is not None and arr.shape[0] != k:
        raise ShapeError(f"{k} locations in weights but {arr.shape[0]} capacities")
    return arr


def _check(w, c) -> tuple[np.ndarray, np.ndarray]:
    w = as_weights(w)
    return w, as_capacities(c, w.shape[1])


@dataclass(frozen=True)
class Assignment:
    """Location index per refugee (``UNASSIGNED`` = -1) and its total weight."""

    locations: tuple[int, ...]
    objective: float

    def __len__(self) -> int:
        return len(self.locations)

    def as_array(self) -> np.ndarray:
        return np.array(self.locations, dtype=np.int64)


@dataclass(frozen=True)
class DualSolution:
    u: np.ndarray
    v: np.ndarray
    objective: float


@dataclass(frozen=True)
class BalancedInstance:
    weights: np.ndarray
    capacities: np.ndarray
    n_rows: int  # original refugees occupy rows [0, n_rows)
    n_cols: int  # original locations occupy columns [0, n_cols)

    @property
    def dummy_rows(self) -> int:
        return self.weights.shape[0] - self.n_rows

    @property
    def dummy_cols(self) -> int:
        return self.weights.shape[1] - self.n_cols


@dataclass
class DualityReport:
    max_dual_infeasibility: float
    max_slackness_violation: float
    gap: float
    min_u: float
    min_v: float
    tol: float = TOL
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            self.max_dual_infeasibility <= self.tol
            and self.max_slackness_violation <= self.tol
            and self.gap <= self.tol
        )


def objective_of(w, locations) -> float:
    w = np.asarray(w, dtype=np.float64)
    return math.fsum(float(w[i, l]) for i, l in enumerate(locations) if l != UNASSIGNED)


def is_feasible(locations, c, k: int | None = None) -> bool:
    c = np.asarray(c)
    k = len(c) if k is None else k
    loads = np.zeros(len(c), dtype=np.int64)
    for l in locations:
        if l == UNASSIGNED:
            continue
        if not 0 <= l < k:
            return False
        loads[l] += 1
    return bool(np.all(loads <= c))


def pad_to_balanced(w, c) -> BalancedInstance:
    w, c = _check(w, c)
    n, k = w.shape
    total = int(c.sum())
    if n < total:
        w = np.vstack([w, np.zeros((total - n, k))])
    elif total < n:
        w = np.hstack([w, np.zeros((n, 1))])
        c = np.append(c, n - total)
    return BalancedInstance(w, c, n, k)


def _augment(w: np.ndarray, cap: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Successive shortest augmenting paths on a balanced instance.

    Rows are inserted one at a time; a Dijkstra over the columns (rows are
    only reachable through the column they currently occupy) finds the
    cheapest reassignment chain ending in a column with spare capacity.
    Returns the row->column map and the potentials ``u``, ``v`` with
    ``u_i + v_l >= w_il`` and equality on matched pairs.
    """
    m, k = w.shape
    assign = np.full(m, -1, dtype=np.int64)
    load = np.zeros(k, dtype=np.int64)
    u = np.zeros(m)
    v = np.zeros(k)
    for s in range(m):
        u[s] = np.max(w[s] - v)
        dist = u[s] + v - w[s]
        pred = np.full(k, s, dtype=np.int64)
        done = np.zeros(k, dtype=bool)
        while True:
            masked = np.where(done, np.inf, dist)
            l = int(np.argmin(masked))
            done[l] = True
            if load[l] < cap[l]:
                target = l
                break
            rows = np.flatnonzero(assign == l)
            if rows.size == 0:  # zero-capacity column
                continue
            red = dist[l] + (u[rows, None] + v[None, :] - w[rows, :])
            best = np.argmin(red, axis=0)
            cand = red[best, np.arange(k)]
            better = (~done) & (cand < dist)
            dist = np.where(better, cand, dist)
            pred = np.where(better, rows[best], pred)
        total = dist[target]
        # potential update keeps reduced costs nonnegative and the new path tight
        shift = np.where(done, total - dist, 0.0)
        shift[target] = 0.0
        v += shift
        u[s] -= total
        finalized = np.flatnonzero(shift > 0)
        if finalized.size:
            moved = np.isin(assign, finalized)
            u[moved] -= shift[assign[moved]]
        col = target
        while True:
            r = int(pred[col])
            prev = assign[r]
            assign[r] = col
            load[col] += 1
            if r == s:
                break
            load[prev] -= 1
            col = prev
    return assign, u, v


def _nonnegative_dual(w: np.ndarray, cap: np.ndarray, assign: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal dual with u, v >= 0 for a perfect matching on a balanced instance.

    With rows eliminated through ``u_i = w[i, assign_i] - v[assign_i]`` the
    remaining conditions on ``y = -v`` are difference constraints over the
    columns plus a zero node; shortest paths from the zero node solve them.
    """
    m, k = w.shape
    # arc a -> b with length L encodes y_b - y_a <= L; node k is the zero node
    length = np.full((k + 1, k + 1), np.inf)
    np.fill_diagonal(length, 0.0)
    length[k, :k] = 0.0
    for l in range(k):
        rows = np.flatnonzero(assign == l)
        if rows.size == 0:
            continue
        own = w[rows, l]
        length[l, :k] = np.minimum(length[l, :k], np.min(own[:, None] - w[rows, :], axis=0))
        length[l, k] = min(length[l, k], float(np.min(own)))
    # zero-length cycles (co-optimal swaps) may come out slightly negative in floats
    slop = TIGHT_RTOL * max(1.0, float(np.max(w)) if w.size else 1.0)
    dist = length[k].copy()
    for _ in range(k + 2):
        relaxed = np.min(dist[:, None] + length, axis=0)
        if np.all(relaxed >= dist - slop):
            break
        dist = np.minimum(dist, relaxed)
    else:
        raise RuntimeError("negative cycle in dual recovery: matching is not optimal")
    v = np.maximum(-dist[:k], 0.0)
    u = np.maximum(w[np.arange(m), assign] - v[assign], 0.0)
    return u, v


def _lexicographic(w: np.ndarray, assign: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Move to the lexicographically smallest co-optimal perfect matching.

    Row ``i`` can take a smaller tight column ``b`` iff an alternating chain of
    later rows leads from ``b`` back to its current column.
    """
    m, k = w.shape
    scale = max(1.0, float(np.max(w))) if w.size else 1.0
    tight = (u[:, None] + v[None, :] - w) <= TIGHT_RTOL * scale
    assign = assign.copy()
    for i in range(m):
        a = int(assign[i])
        options = np.flatnonzero(tight[i, :a])
        for b in options:
            path = _chain(tight, assign, i, int(b), a)
            if path is None:
                continue
            col = int(b)
            for row, nxt in path:
                assign[row] = nxt
            assign[i] = col
            break
    return assign


def _chain(tight: np.ndarray, assign: np.ndarray, i: int, start: int, goal: int):
    k = tight.shape[1]
    later = np.arange(assign.shape[0]) > i
    parent: dict[int, tuple[int, int]] = {}
    seen = {start}
    queue = deque([start])
    while queue:
        x = queue.popleft()
        rows = np.flatnonzero(later & (assign == x))
        if rows.size == 0:
            continue
        reach = tight[rows]
        for y in range(k):
            if y in seen or not reach[:, y].any():
                continue
            row = int(rows[np.argmax(reach[:, y])])
            parent[y] = (x, row)
            if y == goal:
                path = []
                node = y
                while node != start:
                    prev, r = parent[node]
                    path.append((r, node))
                    node = prev
                return path
            seen.add(y)
            queue.append(y)
    return None


def _solve_balanced(bal: BalancedInstance):
    w, cap = bal.weights, bal.capacities
    m = w.shape[0]
    if m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(w.shape[1])
    assign, _, _ = _augment(w, cap)
    u, v = _nonnegative_dual(w, cap, assign)
    assign = _lexicographic(w, assign, u, v)
    return assign, u, v


def _unpad(bal: BalancedInstance, assign: np.ndarray) -> tuple[int, ...]:
    out = []
    for l in assign[: bal.n_rows]:
        out.append(int(l) if l < bal.n_cols else UNASSIGNED)
    return tuple(out)


def solve_assignment(w, c) -> Assignment:
    """Maximum-weight assignment respecting capacities; lexicographic on ties."""
    w, c = _check(w, c)
    bal = pad_to_balanced(w, c)
    assign, _, _ = _solve_balanced(bal)
    locs = _unpad(bal, assign)
    return Assignment(locs, objective_of(w, locs))


def solve_dual(w, c) -> DualSolution:
    w, c = _check(w, c)
    bal = pad_to_balanced(w, c)
    _, u, v = _solve_balanced(bal)
    return _restrict_dual(bal, u, v, c)


def solve_padded(w, c) -> tuple[BalancedInstance, np.ndarray, np.ndarray, np.ndarray]:
    """Primal and dual on the padded instance (dummy rows/columns included)."""
    bal = pad_to_balanced(w, c)
    assign, u, v = _solve_balanced(bal)
    return bal, assign, u, v


def _restrict_dual(bal: BalancedInstance, u, v, c) -> DualSolution:
    u = np.array(u[: bal.n_rows], dtype=np.float64)
    v = np.array(v[: bal.n_cols], dtype=np.float64)
    obj = math.fsum(u) + math.fsum(c * v)
    return DualSolution(u, v, obj)


def verify_duality(a: Assignment, d: DualSolution, w, c, tol: float = TOL) -> DualityReport:
    w, c = _check(w, c)
    n, k = w.shape
    notes = []
    u, v = np.asarray(d.u, dtype=np.float64), np.asarray(d.v, dtype=np.float64)
    if u.shape != (n,) or v.shape != (k,):
        notes.append("dual vector lengths do not match the instance")
        return DualityReport(math.inf, math.inf, math.inf, math.nan, math.nan, tol, notes)
    slack = u[:, None] + v[None, :] - w
    infeas = max(0.0, float(-slack.min())) if slack.size else 0.0
    infeas = max(infeas, float(-u.min()) if n else 0.0, float(-v.min()) if k else 0.0)
    locs = list(a.locations)
    if not is_feasible(locs, c, k):
        notes.append("assignment violates capacities")
    cs = 0.0
    loads = np.zeros(k, dtype=np.int64)
    for i, l in enumerate(locs):
        if l == UNASSIGNED:
            cs = max(cs, float(u[i]))  # unassigned refugee needs u_i = 0
            continue
        loads[l] += 1
        cs = max(cs, abs(float(slack[i, l])))
    spare = loads < c
    if np.any(spare):
        cs = max(cs, float(v[spare].max()))  # location with spare room needs v_l = 0
    primal = objective_of(w, locs)
    dual = math.fsum(u) + math.fsum(c * v)
    return DualityReport(infeas, cs, abs(primal - dual), float(u.min()) if n else 0.0,
                         float(v.min()) if k else 0.0, tol, notes)


@functools.lru_cache(maxsize=64)
def _feasible_maps(n: int, k: int, caps: tuple[int, ...]) -> np.ndarray:
    # rows in lexicographic order; column value k stands for UNASSIGNED
    raw = list(itertools.product(range(k + 1), repeat=n))
    combos = np.array(raw, dtype=np.int64).reshape(len(raw), n)
    counts = np.zeros((combos.shape[0], k + 1), dtype=np.int64)
    for j in range(n):
        np.add.at(counts, (np.arange(combos.shape[0]), combos[:, j]), 1)
    ok = np.all(counts[:, :k] <= np.array(caps, dtype=np.int64), axis=1)
    out = combos[ok]
    out.setflags(write=False)
    return out


def _map_values(w: np.ndarray, c: np.ndarray, limit: int) -> tuple[np.ndarray, np.ndarray]:
    n, k = w.shape
    if (k + 1) ** n > limit:
        raise InstanceTooLarge(f"{(k + 1) ** n} candidate maps exceed the limit of {limit}")
    maps = _feasible_maps(n, k, tuple(int(x) for x in c))
    ext = np.hstack([w, np.zeros((n, 1))])
    vals = ext[np.arange(n)[None, :], maps].sum(axis=1) if n else np.zeros(len(maps))
    return maps, vals


def _as_locations(row, k: int) -> tuple[int, ...]:
    return tuple(UNASSIGNED if l == k else int(l) for l in row)


def brute_force_assignment(w, c, limit: int = BRUTE_FORCE_LIMIT) -> Assignment:
    """Exhaustive search over every capacity-feasible map (UNASSIGNED allowed).

    Among maximizers the lexicographically smallest map wins, UNASSIGNED
    ranking after every real location.
    """
    w, c = _check(w, c)
    maps, vals = _map_values(w, c, limit)
    best = int(np.argmax(vals))
    locs = _as_locations(maps[best], w.shape[1])
    return Assignment(locs, objective_of(w, locs))


def enumerate_optimal(w, c, tol: float = 0.0, limit: int = BRUTE_FORCE_LIMIT) -> list[tuple[int, ...]]:
    """All capacity-feasible maps whose objective is within ``tol`` of the best."""
    w, c = _check(w, c)
    maps, vals = _map_values(w, c, limit)
    keep = vals >= vals.max() - tol
    return [_as_locations(row, w.shape[1]) for row in maps[keep]]


def instance_to_json(w, c) -> str:
    w, c = _check(w, c)
    n, k = w.shape
    return json.dumps({"n": n, "k": k, "weights": w.reshape(-1).tolist(), "capacities": c.tolist()})


def instance_from_json(text: str) -> tuple[np.ndarray, np.ndarray]:
    obj = json.loads(text)
    n, k = int(obj["n"]), int(obj["k"])
    flat = np.array(obj["weights"], dtype=np.float64)
    if flat.size != n * k:
        raise ShapeError(f"expected {n * k} weights, got {flat.size}")
    return as_weights(flat.reshape(n, k)), as_capacities(obj["capacities"], k)
