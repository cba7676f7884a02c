"""Synthetic refugee pools: group employment means fitted to marginal
statistics, beta-distributed employment probabilities and episode files."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import stats as st
from .matching import solve_assignment
from .qp import InfeasibleQP, QPResult, solve_qp
from .scm import AGE_GROUPS, EDUCATION, REGIONS, SEXES, Pool, RefugeeProfile, make_episode, write_episodes

SHAPE = (len(AGE_GROUPS), len(REGIONS), len(EDUCATION), len(SEXES))
CELLS = int(np.prod(SHAPE))
PAPER_W_GRID = (0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
BOX_FLOOR = 1e-4


@dataclass(frozen=True)
class Rho:
    a: float = 0.5
    c: float = 0.0
    e: float = 0.1
    s: float = 0.0
    b: float = 0.6

    def __post_init__(self):
        for name in "aces":
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"rho_{name} must lie in [0, 1]")
        if not self.b >= 0.0:
            raise ValueError("rho_b must be nonnegative")


@dataclass(frozen=True)
class QPReport:
    location: str
    result: QPResult
    init_objective: float
    init_feasible: bool
    relaxed_cells: int
    clamped: tuple[str, ...]
    max_constraint_violation: float


@dataclass(frozen=True)
class GroupMeans:
    """Employment means per location and cell, shape (k, age, country, education, sex)."""

    locations: tuple[str, ...]
    mu: np.ndarray
    reports: tuple[QPReport, ...] = ()

    @property
    def k(self) -> int:
        return self.mu.shape[0]


def _weights(s: st.MarginalStats, l: int) -> list[np.ndarray]:
    pop = st.population_shares(s, l)  # (a, e, s)
    country = s["tau_c_given_l_f1"][l]
    w_age = np.einsum("c,es->ces", country, pop.sum(axis=0))
    w_country = pop
    w_edu = np.einsum("c,as->acs", country, pop.sum(axis=1))
    w_sex = np.einsum("c,ae->ace", country, pop.sum(axis=2))
    return [w_age, w_country, w_edu, w_sex]


def constraint_matrix(s: st.MarginalStats, l: int):
    """Rows of the 16 proportion-weighted constraints over the flattened cells."""
    w_age, w_country, w_edu, w_sex = _weights(s, l)
    rows, labels = [], []
    for a, name in enumerate(AGE_GROUPS):
        m = np.zeros(SHAPE)
        m[a] = w_age
        rows.append(m.reshape(-1))
        labels.append(f"age={name}")
    for c, name in enumerate(REGIONS):
        m = np.zeros(SHAPE)
        m[:, c] = w_country
        rows.append(m.reshape(-1))
        labels.append(f"country={name}")
    for e, name in enumerate(EDUCATION):
        m = np.zeros(SHAPE)
        m[:, :, e] = w_edu
        rows.append(m.reshape(-1))
        labels.append(f"education={name}")
    for g, name in enumerate(SEXES):
        m = np.zeros(SHAPE)
        m[:, :, :, g] = w_sex
        rows.append(m.reshape(-1))
        labels.append(f"sex={name}")
    return np.array(rows), labels


def cell_labels() -> list[str]:
    return [f"box({AGE_GROUPS[a]}, {REGIONS[c]}, {EDUCATION[e]}, {SEXES[g]})" for a, c, e, g in np.ndindex(*SHAPE)]


def _broadcast(marg: st.Marginals) -> list[np.ndarray]:
    return [
        np.broadcast_to(marg.age[:, None, None, None], SHAPE),
        np.broadcast_to(marg.country[None, :, None, None], SHAPE),
        np.broadcast_to(marg.education[None, None, :, None], SHAPE),
        np.broadcast_to(marg.sex[None, None, None, :], SHAPE),
    ]


def objective_weights() -> np.ndarray:
    """Per-family normalization: each family averages over the other three indices."""
    total = CELLS
    return np.array([len(AGE_GROUPS), len(REGIONS), len(EDUCATION), len(SEXES)]) / total


def qp_terms(marg: st.Marginals):
    """Diagonal quadratic and linear terms of the least-squares objective."""
    targets = _broadcast(marg)
    wts = objective_weights()
    p = np.full(CELLS, 2.0 * wts.sum())
    q = -2.0 * sum(w * t for w, t in zip(wts, targets)).reshape(-1)
    const = float(sum(w * np.sum(t**2) for w, t in zip(wts, targets)))
    return p, q, const


def qp_objective(mu, marg: st.Marginals) -> float:
    mu = np.asarray(mu).reshape(SHAPE)
    return float(sum(w * np.sum((mu - t) ** 2) for w, t in zip(objective_weights(), _broadcast(marg))))


def box_bounds(marg: st.Marginals, rho_b: float):
    """Per-cell box, relaxed where empty, intersected with (0, 1)."""
    stack = np.stack(_broadcast(marg))
    if math.isinf(rho_b):
        lo, hi = np.zeros(SHAPE), np.ones(SHAPE)
    else:
        lo = stack.max(axis=0) * (1 - rho_b)
        hi = stack.min(axis=0) * (1 + rho_b)
    empty = lo > hi
    lo, hi = np.where(empty, hi, lo), np.where(empty, lo, hi)
    lo = np.clip(lo, BOX_FLOOR, 1 - BOX_FLOOR)
    hi = np.clip(hi, BOX_FLOOR, 1 - BOX_FLOOR)
    return lo.reshape(-1), hi.reshape(-1), int(empty.sum())


def solve_mean_qp(s: st.MarginalStats, location, rho: Rho = Rho()) -> tuple[np.ndarray, QPReport]:
    """Group means for one location closest to the four marginals under the
    proportion constraints and per-cell box."""
    l = s.location_index(location)
    marg = st.compute_marginal_means(s, l)
    A, labels = constraint_matrix(s, l)
    rhos = np.repeat([rho.a, rho.c, rho.e, rho.s], [len(AGE_GROUPS), len(REGIONS), len(EDUCATION), len(SEXES)])
    target = np.concatenate([marg.age, marg.country, marg.education, marg.sex])
    box_lo, box_hi, relaxed = box_bounds(marg, rho.b)
    c_lo, c_hi = target * (1 - rhos), target * (1 + rhos)
    # a single constraint that cannot be met anywhere in the box
    reach_lo, reach_hi = A @ box_lo, A @ box_hi
    for j in range(len(labels)):
        if reach_lo[j] > c_hi[j] + 1e-12 or reach_hi[j] < c_lo[j] - 1e-12:
            raise InfeasibleQP(f"{s.locations[l]}: constraint {labels[j]} cannot be met within the box "
                               f"(reachable [{reach_lo[j]:.4g}, {reach_hi[j]:.4g}], "
                               f"required [{c_lo[j]:.4g}, {c_hi[j]:.4g}])")
    p, q, const = qp_terms(marg)
    full_a = np.vstack([A, np.eye(CELLS)])
    full_lo = np.concatenate([c_lo, box_lo])
    full_hi = np.concatenate([c_hi, box_hi])
    try:
        res = solve_qp(p, q, full_a, full_lo, full_hi, labels=labels + cell_labels())
    except InfeasibleQP as exc:
        raise InfeasibleQP(f"{s.locations[l]}: {exc}") from None
    init = np.clip(sum(w * t for w, t in zip(objective_weights(), _broadcast(marg))).reshape(-1)
                   / objective_weights().sum(), box_lo, box_hi)
    ax = full_a @ init
    init_feasible = bool(np.all(ax >= full_lo - 1e-9) and np.all(ax <= full_hi + 1e-9))
    ax = full_a @ res.x
    viol = float(np.max(np.maximum(np.maximum(full_lo - ax, ax - full_hi), 0.0)))
    report = QPReport(s.locations[l], res, qp_objective(init, marg), init_feasible, relaxed, marg.clamped, viol)
    return res.x.reshape(SHAPE), report


def fit_group_means(s: st.MarginalStats, k: int | None = None, rho: Rho = Rho()) -> GroupMeans:
    k = len(s.locations) if k is None else k
    if not 1 <= k <= len(s.locations):
        raise ValueError(f"stats cover {len(s.locations)} locations, {k} requested")
    mus, reports = [], []
    for l in range(k):
        mu, rep = solve_mean_qp(s, l, rho)
        mus.append(mu)
        reports.append(rep)
    return GroupMeans(s.locations[:k], np.array(mus), tuple(reports))


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> float:
        t = self.alpha + self.beta
        return self.alpha * self.beta / (t * t * (t + 1))


def _beta_shapes(mean, variance):
    mean = np.asarray(mean, dtype=np.float64)
    if np.any((mean <= 0) | (mean >= 1)):
        raise ValueError("beta mean must lie in (0, 1)")
    if not variance > 0:
        raise ValueError("beta variance must be positive")
    limit = mean * (1 - mean)
    var = np.minimum(variance, 0.99 * limit)
    clamped = bool(np.any(variance >= limit))
    if clamped:
        warnings.warn("variance too large for the requested mean, clamped to 0.99*mean*(1-mean)", stacklevel=3)
    common = mean * (1 - mean) / var - 1
    return mean * common, (1 - mean) * common, clamped


def beta_params(mean: float, variance: float) -> BetaParams:
    """Moment-matched beta shapes for the given mean and variance."""
    a, b, _ = _beta_shapes(mean, variance)
    return BetaParams(float(a), float(b))


def allocate_capacities(n: int, k: int, shares=None) -> np.ndarray:
    """Integer capacities summing to ``n``, proportional to ``shares`` by largest
    remainder (uniform when no shares are given)."""
    if k < 1 or n < 0:
        raise ValueError("need k >= 1 and n >= 0")
    s = np.full(k, 1.0 / k) if shares is None else np.asarray(shares, dtype=np.float64)[:k]
    if s.shape != (k,) or np.any(s < 0) or s.sum() <= 0:
        raise ValueError("allocation shares must be nonnegative with a positive total")
    quota = n * s / s.sum()
    base = np.floor(quota).astype(np.int64)
    rest = n - int(base.sum())
    order = sorted(range(k), key=lambda j: (-(quota[j] - base[j]), j))
    base[order[:rest]] += 1
    return base


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    if cdf.ndim == 1:
        return np.searchsorted(cdf, u, side="right")
    return (u[:, None] >= cdf).sum(axis=1)


def sample_profiles(s: st.MarginalStats, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw (age, country, education, sex) indices, shape (n, 4)."""
    cs = s["tau_cs"].reshape(-1)
    joint = _categorical(cs / cs.sum(), rng.random(n))
    c, g = np.divmod(joint, len(SEXES))
    a = _categorical(s["tau_a_given_c"][c], rng.random(n))
    e = _categorical(s["tau_e_given_c"][c], rng.random(n))
    return np.stack([a, c, e, g], axis=1)


def sample_pool(means: GroupMeans, s: st.MarginalStats, n: int, k: int, capacities,
                rng: np.random.Generator, sigma2: float = 1e-3, seed: int = 0) -> Pool:
    if k > means.k:
        raise ValueError(f"group means cover {means.k} locations, {k} requested")
    idx = sample_profiles(s, n, rng)
    a, c, e, g = idx.T
    mu = means.mu[:k][:, a, c, e, g].T  # (n, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        alpha, beta, _ = _beta_shapes(mu, sigma2)
    p = rng.beta(alpha, beta)
    y = (rng.random((n, k)) < p).astype(np.int8)
    profiles = tuple(RefugeeProfile(AGE_GROUPS[i], REGIONS[j], EDUCATION[m], SEXES[h]) for i, j, m, h in idx)
    return Pool(profiles, p, y, np.asarray(capacities, dtype=np.int64), seed)


@dataclass
class DataConfig:
    stats_dir: str | None = None
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    pool_size: int = 50
    locations: int = 10
    sigma2: float = 1e-3
    rho: Rho = field(default_factory=Rho)
    w_grid: tuple[float, ...] = PAPER_W_GRID
    capacity_mode: str = "allocation"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.rho, dict):
            self.rho = Rho(**self.rho)
        self.w_grid = tuple(float(w) for w in self.w_grid)
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("split sizes must be positive")
        if self.pool_size < 1 or self.locations < 1:
            raise ValueError("pool size and location count must be positive")
        if not self.w_grid or any(not 0 <= w <= 1 for w in self.w_grid):
            raise ValueError("w grid must be nonempty and within [0, 1]")
        if self.capacity_mode not in ("allocation", "uniform"):
            raise ValueError("capacity_mode must be 'allocation' or 'uniform'")

    @property
    def n_pools(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def as_dict(self) -> dict:
        d = asdict(self)
        d["w_grid"] = list(self.w_grid)
        return d


def pool_seed(seed: int, pool: int, *stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, pool, *stream])


SPLITS = ("train", "val", "test")


def split_of(cfg: DataConfig, pool: int) -> str:
    if pool < cfg.n_train:
        return "train"
    return "val" if pool < cfg.n_train + cfg.n_val else "test"


def generate_dataset(cfg: DataConfig, out_dir) -> dict:
    """Write train/val/test episode files, one episode per (pool, w)."""
    stats = st.load_marginal_tables(cfg.stats_dir)
    means = fit_group_means(stats, cfg.locations, cfg.rho)
    shares = stats.allocation if cfg.capacity_mode == "allocation" else None
    caps = allocate_capacities(cfg.pool_size, cfg.locations, shares)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes = {name: [] for name in SPLITS}
    for pid in range(cfg.n_pools):
        rng = np.random.default_rng(pool_seed(cfg.seed, pid, 0))
        pool = sample_pool(means, stats, cfg.pool_size, cfg.locations, caps, rng, cfg.sigma2,
                           seed=int(pool_seed(cfg.seed, pid, 0).generate_state(1)[0]))
        base = solve_assignment(pool.true_p, pool.capacities).as_array()
        for j, w in enumerate(cfg.w_grid):
            wrng = np.random.default_rng(pool_seed(cfg.seed, pid, 1, j))
            episodes[split_of(cfg, pid)].append(make_episode(pool, w, wrng, pid, base))
    paths = {}
    for name in SPLITS:
        paths[name] = out / f"{name}.jsonl"
        write_episodes(paths[name], episodes[name])
    return {
        "paths": {k: str(v) for k, v in paths.items()},
        "counts": {k: len(v) // len(cfg.w_grid) for k, v in episodes.items()},
        "capacities": caps.tolist(),
        "qp": [
            {"location": r.location, "kkt_residual": r.result.kkt_residual,
             "max_constraint_violation": r.max_constraint_violation, "relaxed_cells": r.relaxed_cells,
             "clamped": list(r.clamped)}
            for r in means.reports
        ],
    }
