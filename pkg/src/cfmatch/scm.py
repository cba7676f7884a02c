"""Simulated resettlement process: pools with potential outcomes, the noisy
default policy, a biased classifier and counterfactual evaluation of
algorithmic policies against the realized default outcomes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .inverse import RetroRecord, modify_probabilities
from .matching import UNASSIGNED, Assignment, as_capacities, is_feasible, solve_assignment

AGE_GROUPS = ("20-24", "25-34", "35-44", "45-64", "65-100")
REGIONS = ("Africa", "Asia", "Europe", "Latin America", "Northern America", "Oceania")
EDUCATION = ("Primary or less", "Secondary", "Tertiary")
SEXES = ("Female", "Male")

HARM_TOL = 1e-12

POLICIES = ("default", "pi_p", "pi_g", "pi_gbreve", "pi_hg")


@dataclass(frozen=True)
class RefugeeProfile:
    age: str
    region: str
    education: str
    sex: str

    def __post_init__(self):
        for value, domain, name in (
            (self.age, AGE_GROUPS, "age group"),
            (self.region, REGIONS, "region"),
            (self.education, EDUCATION, "education"),
            (self.sex, SEXES, "sex"),
        ):
            if value not in domain:
                raise ValueError(f"unknown {name} {value!r}")

    def as_list(self) -> list[str]:
        return [self.age, self.region, self.education, self.sex]


@dataclass(frozen=True)
class Pool:
    profiles: tuple[RefugeeProfile, ...]
    true_p: np.ndarray
    outcomes: np.ndarray
    capacities: np.ndarray
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.true_p, dtype=np.float64)
        y = np.asarray(self.outcomes, dtype=np.int8)
        c = as_capacities(self.capacities)
        if p.ndim != 2 or p.shape != y.shape:
            raise ValueError("true probabilities and outcomes must be matching n x k matrices")
        if p.shape[1] != c.shape[0]:
            raise ValueError("capacities do not match the number of locations")
        if self.profiles and len(self.profiles) != p.shape[0]:
            raise ValueError("one profile per refugee expected")
        if np.any((p < 0) | (p > 1)):
            raise ValueError("true probabilities must lie in [0, 1]")
        if np.any((y != 0) & (y != 1)):
            raise ValueError("potential outcomes must be binary")
        object.__setattr__(self, "true_p", p)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "capacities", c)

    @property
    def n(self) -> int:
        return self.true_p.shape[0]

    @property
    def k(self) -> int:
        return self.true_p.shape[1]


@dataclass(frozen=True)
class Episode:
    """A pool together with what the default policy did and what came of it."""

    pool: Pool
    defaults: np.ndarray
    y: np.ndarray
    w: float
    pool_id: int = 0
    predictions: np.ndarray | None = None
    beta: float | None = None
    overestimated: tuple[int, ...] = ()

    def __post_init__(self):
        l = np.asarray(self.defaults, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int64)
        object.__setattr__(self, "defaults", l)
        object.__setattr__(self, "y", y)
        if not is_feasible(l, self.pool.capacities):
            raise ValueError("default assignment violates capacities")
        if not np.array_equal(y, realized_outcomes(self.pool, l)):
            raise ValueError("realized outcomes disagree with the potential outcomes")

    @property
    def record(self) -> RetroRecord:
        return RetroRecord(self.defaults, self.y, self.pool.capacities)

    def with_predictions(self, g: np.ndarray, beta: float, overestimated: Sequence[int]) -> "Episode":
        return Episode(self.pool, self.defaults, self.y, self.w, self.pool_id,
                       np.asarray(g, dtype=np.float64), beta, tuple(int(x) for x in overestimated))

    def to_json(self) -> str:
        p = self.pool
        return json.dumps(
            {
                "pool_id": self.pool_id,
                "seed": p.seed,
                "w": self.w,
                "profiles": [pr.as_list() for pr in p.profiles],
                "trueP": p.true_p.tolist(),
                "outcomes": p.outcomes.astype(int).tolist(),
                "capacities": p.capacities.tolist(),
                "l": self.defaults.tolist(),
                "y": self.y.tolist(),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        obj = json.loads(line)
        pool = Pool(
            tuple(RefugeeProfile(*pr) for pr in obj["profiles"]),
            np.array(obj["trueP"], dtype=np.float64),
            np.array(obj["outcomes"], dtype=np.int8),
            np.array(obj["capacities"], dtype=np.int64),
            int(obj["seed"]),
        )
        return cls(pool, np.array(obj["l"]), np.array(obj["y"]), float(obj["w"]), int(obj["pool_id"]))


def realized_outcomes(pool: Pool, locations) -> np.ndarray:
    locs = np.asarray(locations, dtype=np.int64)
    out = np.zeros(pool.n, dtype=np.int64)
    placed = locs != UNASSIGNED
    out[placed] = pool.outcomes[np.flatnonzero(placed), locs[placed]]
    return out


def _locations(a) -> np.ndarray:
    return np.asarray(a.locations if isinstance(a, Assignment) else a, dtype=np.int64)


def shuffle_count(w: float, n: int) -> int:
    return int(math.floor(w * n + 1e-9))


def default_policy(pool: Pool, w: float, rng: np.random.Generator, base=None) -> np.ndarray:
    """Optimal placement under the true probabilities with a fraction ``w``
    of the placements shuffled among themselves.

    ``base`` may carry a precomputed optimal placement for the pool.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError("noise level must lie in [0, 1]")
    if base is None:
        base = solve_assignment(pool.true_p, pool.capacities).as_array()
    base = np.asarray(base, dtype=np.int64)
    m = shuffle_count(w, pool.n)
    if m == 0:
        return base
    chosen = np.sort(rng.choice(pool.n, size=m, replace=False))
    out = base.copy()
    out[chosen] = base[chosen][rng.permutation(m)]
    return out


def make_episode(pool: Pool, w: float, rng: np.random.Generator, pool_id: int = 0, base=None) -> Episode:
    l = default_policy(pool, w, rng, base)
    return Episode(pool, l, realized_outcomes(pool, l), w, pool_id)


def draw_overestimated(k: int, rng: np.random.Generator) -> tuple[int, ...]:
    if k % 2:
        raise ValueError("the biased classifier needs an even number of locations")
    return tuple(int(x) for x in np.sort(rng.choice(k, size=k // 2, replace=False)))


def biased_classifier(true_p, beta: float, rng: np.random.Generator | None = None,
                      overestimated: Sequence[int] | None = None) -> np.ndarray:
    """Inflate the true probability by ``1 + beta`` on half the locations and
    deflate it by ``1 - beta`` on the rest."""
    p = np.asarray(true_p.true_p if isinstance(true_p, Pool) else true_p, dtype=np.float64)
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    k = p.shape[1]
    if k % 2:
        raise ValueError("the biased classifier needs an even number of locations")
    if overestimated is None:
        if rng is None:
            raise ValueError("pass either rng or the overestimated locations")
        overestimated = draw_overestimated(k, rng)
    factor = np.full(k, 1.0 - beta)
    factor[list(overestimated)] = 1.0 + beta
    return p * factor


def expected_cf_utility(a, e: Episode) -> float:
    """Expected counterfactual employment given the default record.

    Refugees kept at their default location keep their realized outcome; a
    moved refugee finds a job with the true probability at the new location.
    """
    locs = _locations(a)
    if locs.shape != e.defaults.shape or not is_feasible(locs, e.pool.capacities):
        raise ValueError("assignment is infeasible for this episode")
    terms = []
    for i, (new, old) in enumerate(zip(locs, e.defaults)):
        if new == old:
            terms.append(float(e.y[i]))
        elif new != UNASSIGNED:
            terms.append(float(e.pool.true_p[i, new]))
    return math.fsum(terms)


def realized_utility(a, pool: Pool) -> float:
    return float(realized_outcomes(pool, _locations(a)).sum())


def is_pool_harmed(a, e: Episode) -> bool:
    return expected_cf_utility(a, e) < float(e.y.sum()) - HARM_TOL


def mc_counterfactual_check(a, e: Episode, samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) of the counterfactual utility."""
    if samples < 1:
        raise ValueError("need at least one sample")
    locs = _locations(a)
    kept = locs == e.defaults
    moved = (~kept) & (locs != UNASSIGNED)
    base = float(e.y[kept].sum())
    p = e.pool.true_p[np.flatnonzero(moved), locs[moved]]
    if p.size == 0:
        return base, 0.0
    totals = base + (rng.random((samples, p.size)) < p).sum(axis=1)
    stderr = float(totals.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return float(totals.mean()), stderr


@dataclass
class PolicyMetrics:
    policy: str
    harm_fraction: float
    mean_cf_utility: float
    mean_realized_utility: float
    per_pool_cf: list[float] = field(default_factory=list)
    per_pool_realized: list[float] = field(default_factory=list)
    harmed: list[bool] = field(default_factory=list)


Postprocessor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def policy_assignments(e: Episode, eps: float, model: Postprocessor | None = None,
                       policies: Iterable[str] = POLICIES) -> dict[str, np.ndarray]:
    if e.predictions is None:
        raise ValueError("episode has no classifier predictions attached")
    c = e.pool.capacities
    out = {}
    for name in policies:
        if name == "default":
            out[name] = e.defaults
        elif name == "pi_p":
            out[name] = solve_assignment(e.pool.true_p, c).as_array()
        elif name == "pi_g":
            out[name] = solve_assignment(e.predictions, c).as_array()
        elif name == "pi_gbreve":
            mod = modify_probabilities(e.predictions, e.record, eps)
            out[name] = solve_assignment(mod.gbreve, c).as_array()
        elif name == "pi_hg":
            if model is None:
                raise ValueError("policy pi_hg needs a trained post-processing model")
            out[name] = solve_assignment(model(e.predictions, c), c).as_array()
        else:
            raise ValueError(f"unknown policy {name!r}")
    return out


def evaluate_policies(episodes: Sequence[Episode], eps: float, model: Postprocessor | None = None,
                      policies: Iterable[str] = POLICIES) -> dict[str, PolicyMetrics]:
    """Harm fraction and per-refugee utilities of each policy over ``episodes``.

    Every episode must already carry classifier predictions.
    """
    policies = tuple(policies)
    if "pi_hg" in policies and model is None:
        raise ValueError("policy pi_hg needs a trained post-processing model")
    metrics = {name: PolicyMetrics(name, 0.0, 0.0, 0.0) for name in policies}
    for e in episodes:
        for name, locs in policy_assignments(e, eps, model, policies).items():
            m = metrics[name]
            m.per_pool_cf.append(expected_cf_utility(locs, e) / e.pool.n)
            m.per_pool_realized.append(realized_utility(locs, e.pool) / e.pool.n)
            m.harmed.append(is_pool_harmed(locs, e))
    for m in metrics.values():
        count = len(m.harmed)
        if count:
            m.harm_fraction = sum(m.harmed) / count
            m.mean_cf_utility = math.fsum(m.per_pool_cf) / count
            m.mean_realized_utility = math.fsum(m.per_pool_realized) / count
    return metrics


def read_episodes(path) -> list[Episode]:
    with open(path) as fh:
        return [Episode.from_json(line) for line in fh if line.strip()]


def write_episodes(path, episodes: Iterable[Episode]) -> None:
    with open(path, "w") as fh:
        for e in episodes:
            fh.write(e.to_json() + "\n")
