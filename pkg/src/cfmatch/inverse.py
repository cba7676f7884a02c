"""Partial inverse matching: minimally raise predictions so that every optimal
assignment keeps employed refugees where the default policy put them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .matching import (
    UNASSIGNED,
    Assignment,
    as_capacities,
    as_weights,
    is_feasible,
    objective_of,
    solve_assignment,
    solve_padded,
)

DEFAULT_EPS = 1e-6


class InconsistentRecord(ValueError):
    pass


@dataclass(frozen=True)
class RetroRecord:
    defaults: np.ndarray
    outcomes: np.ndarray
    capacities: np.ndarray

    def __post_init__(self):
        l = np.asarray(self.defaults, dtype=np.int64).reshape(-1)
        y = np.asarray(self.outcomes, dtype=np.int64).reshape(-1)
        c = as_capacities(self.capacities)
        if l.shape != y.shape:
            raise InconsistentRecord("defaults and outcomes differ in length")
        if np.any((y != 0) & (y != 1)):
            raise InconsistentRecord("outcomes must be binary")
        if not is_feasible(l, c):
            raise InconsistentRecord("default assignment violates capacities")
        object.__setattr__(self, "defaults", l)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "capacities", c)

    @property
    def n(self) -> int:
        return self.defaults.shape[0]


@dataclass(frozen=True)
class ModifiedPredictions:
    gbreve: np.ndarray
    epsilon: float
    mask: tuple[tuple[int, int], ...]
    completion: Assignment

    def to_json(self) -> str:
        return json.dumps(
            {
                "epsilon": self.epsilon,
                "mask": [list(p) for p in self.mask],
                "gbreve": self.gbreve.reshape(-1).tolist(),
                "shape": list(self.gbreve.shape),
            }
        )

    def with_epsilon(self, eps: float) -> "ModifiedPredictions":
        """Same dual prices, different margin on the mask."""
        if not eps > 0:
            raise ValueError("eps must be positive")
        g = self.gbreve.copy()
        for i, l in self.mask:
            g[i, l] += eps - self.epsilon
        return ModifiedPredictions(g, float(eps), self.mask, self.completion)

    @classmethod
    def from_json(cls, text: str) -> "ModifiedPredictions":
        obj = json.loads(text)
        mask = tuple((int(i), int(l)) for i, l in obj["mask"])
        g = np.array(obj["gbreve"], dtype=np.float64).reshape(obj["shape"])
        locs = [UNASSIGNED] * g.shape[0]
        for i, l in mask:
            locs[i] = l
        return cls(g, float(obj["epsilon"]), mask, Assignment(tuple(locs), objective_of(g, locs)))


def employed_set(r: RetroRecord) -> np.ndarray:
    return np.flatnonzero(r.outcomes == 1)


def unemployed_set(r: RetroRecord) -> np.ndarray:
    return np.flatnonzero(r.outcomes == 0)


def reduced_capacities(r: RetroRecord) -> np.ndarray:
    kept = r.defaults[r.outcomes == 1]
    used = np.bincount(kept, minlength=len(r.capacities))[: len(r.capacities)]
    reduced = r.capacities - used
    if np.any(reduced < 0):
        raise InconsistentRecord("employed refugees exceed the capacity of their default location")
    return reduced


def _consistent(g, r: RetroRecord) -> np.ndarray:
    g = as_weights(g)
    if g.shape[0] != r.n or g.shape[1] != len(r.capacities):
        raise InconsistentRecord(f"predictions of shape {g.shape} do not fit a record with "
                                 f"{r.n} refugees and {len(r.capacities)} locations")
    if np.any(r.defaults[r.outcomes == 1] < 0):
        raise InconsistentRecord("an employed refugee has no default location")
    return g


def harmless_completion(g, r: RetroRecord) -> Assignment:
    """Pin employed refugees, place the rest optimally in the leftover capacity."""
    g = _consistent(g, r)
    free = unemployed_set(r)
    locs = np.where(r.outcomes == 1, r.defaults, UNASSIGNED)
    if free.size:
        sub = solve_assignment(g[free], reduced_capacities(r))
        locs[free] = sub.locations
    else:
        reduced_capacities(r)
    locs = tuple(int(x) for x in locs)
    return Assignment(locs, objective_of(g, locs))


def modify_probabilities(g, r: RetroRecord, eps: float = DEFAULT_EPS) -> ModifiedPredictions:
    """Raise the predictions on the harmless completion to dual prices plus ``eps``.

    The dual is solved on the balanced (padded) instance; the completion is
    extended to that instance by placing dummy refugees in leftover slots and
    sending unplaced refugees to the dummy location.  Dummy entries are
    dropped from the returned matrix.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    g = _consistent(g, r)
    completion = harmless_completion(g, r)
    _, _, u, v = solve_padded(g, r.capacities)
    gbreve = g.copy()
    mask = []
    for i, l in enumerate(completion.locations):
        if l == UNASSIGNED:
            continue
        gbreve[i, l] = u[i] + v[l] + eps
        mask.append((i, l))
    return ModifiedPredictions(gbreve, float(eps), tuple(mask), completion)


def is_harmless(a, r: RetroRecord) -> bool:
    locs = np.asarray(a.locations if isinstance(a, Assignment) else a, dtype=np.int64)
    if locs.shape != r.defaults.shape or not is_feasible(locs, r.capacities):
        return False
    employed = r.outcomes == 1
    return bool(np.all(locs[employed] == r.defaults[employed]))


def l1_change(g, gbreve) -> float:
    return math.fsum(np.abs(np.asarray(gbreve) - np.asarray(g)).reshape(-1))


def tightness_gap(g, c, mod: ModifiedPredictions, optimal: Assignment | None = None) -> float:
    """L1 edit net of the eps terms, minus the predicted utility the completion gives up."""
    g = np.asarray(g, dtype=np.float64)
    if optimal is None:
        optimal = solve_assignment(g, c)
    lost = optimal.objective - objective_of(g, mod.completion.locations)
    return l1_change(g, mod.gbreve) - len(mod.mask) * mod.epsilon - lost
