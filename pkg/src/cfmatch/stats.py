"""Aggregate proportion tables and the marginal employment means derived from
them.

A stats directory holds one CSV per table (header names the index columns,
last column is ``value``) and a ``manifest.json`` mapping table names to file
names and listing the locations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .scm import AGE_GROUPS, EDUCATION, REGIONS, SEXES

SUM_TOL = 1e-6
CLAMP = 1e-4

DOMAINS = {
    "age": AGE_GROUPS,
    "country": REGIONS,
    "education": EDUCATION,
    "sex": SEXES,
}

# name -> (index columns, columns the table is a distribution over; None = not a distribution)
TABLES = {
    "tau_cs": (("country", "sex"), ("country", "sex")),
    "tau_a_given_c": (("country", "age"), ("age",)),
    "tau_e_given_c": (("country", "education"), ("education",)),
    "n_aes_given_l": (("location", "age", "education", "sex"), None),
    "tau_a_given_l_w1": (("location", "age"), ("age",)),
    "tau_s_given_l_w1": (("location", "sex"), ("sex",)),
    "tau_w1_given_l_f1": (("location",), None),
    "tau_c_given_l_f1": (("location", "country"), ("country",)),
    "tau_c_given_l_w1_f1": (("location", "country"), ("country",)),
    "tau_e_given_l_f1": (("location", "education"), ("education",)),
    "tau_e_given_l_w1_f1": (("location", "education"), ("education",)),
    "tau_s_given_l_f1": (("location", "sex"), ("sex",)),
}
OPTIONAL_TABLES = {"allocation": (("location",), ("location",))}


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class MarginalStats:
    locations: tuple[str, ...]
    tables: dict[str, np.ndarray]
    source: str = ""

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tables[name]

    @property
    def allocation(self) -> np.ndarray | None:
        return self.tables.get("allocation")

    def location_index(self, location) -> int:
        if isinstance(location, (int, np.integer)):
            if not 0 <= location < len(self.locations):
                raise StatsError(f"location index {location} out of range")
            return int(location)
        key = str(location).strip().lower()
        for j, name in enumerate(self.locations):
            if name.lower() == key:
                return j
        raise StatsError(f"unknown location {location!r}")


def bundled_stats_dir() -> Path:
    return Path(str(resources.files("cfmatch") / "data" / "stats"))


def _domain(column: str, locations: tuple[str, ...]):
    return locations if column == "location" else DOMAINS[column]


def _match(label: str, domain, table: str, row: int, column: str) -> int:
    key = label.strip().lower()
    for j, value in enumerate(domain):
        if value.lower() == key:
            return j
    raise StatsError(f"table {table}, row {row}: unknown {column} category {label!r}")


def _read_table(path: Path, name: str, columns, locations) -> np.ndarray:
    domains = [_domain(col, locations) for col in columns]
    out = np.full([len(d) for d in domains], np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise StatsError(f"table {name}: file {path.name} is empty") from None
        if header != [*columns, "value"]:
            raise StatsError(f"table {name}: expected header {','.join([*columns, 'value'])}, got {','.join(header)}")
        for row, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise StatsError(f"table {name}, row {row}: expected {len(header)} fields")
            idx = tuple(_match(rec[j], domains[j], name, row, col) for j, col in enumerate(columns))
            try:
                value = float(rec[-1])
            except ValueError:
                raise StatsError(f"table {name}, row {row}: value {rec[-1]!r} is not a number") from None
            if not np.isfinite(value) or value < 0:
                raise StatsError(f"table {name}, row {row}: value must be finite and nonnegative")
            if not np.isnan(out[idx]):
                raise StatsError(f"table {name}, row {row}: duplicate entry")
            out[idx] = value
    if np.isnan(out).any():
        missing = tuple(int(x) for x in np.argwhere(np.isnan(out))[0])
        labels = ", ".join(f"{c}={d[i]}" for c, d, i in zip(columns, domains, missing))
        raise StatsError(f"table {name}: missing entry for {labels}")
    return out


def _validate(name: str, arr: np.ndarray, columns, free) -> None:
    if free is None:
        if name != "n_aes_given_l" and np.any(arr > 1):
            raise StatsError(f"table {name}: proportions must lie in [0, 1]")
        return
    if np.any(arr > 1):
        raise StatsError(f"table {name}: proportions must lie in [0, 1]")
    axes = tuple(columns.index(c) for c in free)
    sums = arr.sum(axis=axes)
    bad = np.argwhere(np.abs(np.atleast_1d(sums) - 1.0) > SUM_TOL)
    if bad.size:
        fixed = [c for c in columns if c not in free]
        where = ", ".join(f"{c} index {int(i)}" for c, i in zip(fixed, bad[0])) or "whole table"
        total = float(np.atleast_1d(sums)[tuple(bad[0])])
        raise StatsError(f"table {name}: distribution over {'/'.join(free)} sums to {total:.6g} at {where}")


def load_marginal_tables(path=None) -> MarginalStats:
    """Load and validate a stats directory (the bundled one when ``path`` is None)."""
    root = Path(path) if path is not None else bundled_stats_dir()
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise StatsError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    locations = tuple(str(x) for x in manifest.get("locations", ()))
    if not locations:
        raise StatsError("manifest lists no locations")
    files = manifest.get("tables", {})
    tables = {}
    for name, (columns, free) in {**TABLES, **OPTIONAL_TABLES}.items():
        if name not in files:
            if name in TABLES:
                raise StatsError(f"missing table {name}")
            continue
        file = root / files[name]
        if not file.is_file():
            raise StatsError(f"missing table {name}: file {files[name]} not found")
        arr = _read_table(file, name, columns, locations)
        _validate(name, arr, columns, free)
        tables[name] = arr
    if np.any(tables["n_aes_given_l"].sum(axis=(1, 2, 3)) <= 0):
        raise StatsError("table n_aes_given_l: a location has no people")
    return MarginalStats(locations, tables, str(root))


@dataclass(frozen=True)
class Marginals:
    age: np.ndarray
    country: np.ndarray
    education: np.ndarray
    sex: np.ndarray
    clamped: tuple[str, ...] = field(default=())


def employment_rate(share_employed, employed_rate, share):
    """P(employed | group) from P(group | employed), P(employed) and P(group)."""
    return share_employed * employed_rate / share


def _rates(name: str, domain, share_employed, employed_rate, share, clamped: list) -> np.ndarray:
    out = np.empty(len(domain))
    for j, label in enumerate(domain):
        if share[j] <= 0:
            raise StatsError(f"marginal for {name}={label}: zero denominator")
        value = employment_rate(share_employed[j], employed_rate, share[j])
        if value < CLAMP or value > 1 - CLAMP:
            clamped.append(f"{name}={label}: {value:.6g}")
            value = min(max(value, CLAMP), 1 - CLAMP)
        out[j] = value
    return out


def population_shares(s: MarginalStats, l: int) -> np.ndarray:
    """tau(a, e, s | l) from the population counts, shape (age, education, sex)."""
    counts = s["n_aes_given_l"][l]
    return counts / counts.sum()


def compute_marginal_means(s: MarginalStats, location) -> Marginals:
    l = s.location_index(location)
    rate = s["tau_w1_given_l_f1"][l]
    clamped: list[str] = []
    age_share = population_shares(s, l).sum(axis=(1, 2))
    age = _rates("age", AGE_GROUPS, s["tau_a_given_l_w1"][l], rate, age_share, clamped)
    country = _rates("country", REGIONS, s["tau_c_given_l_w1_f1"][l], rate, s["tau_c_given_l_f1"][l], clamped)
    education = _rates("education", EDUCATION, s["tau_e_given_l_w1_f1"][l], rate, s["tau_e_given_l_f1"][l], clamped)
    sex = _rates("sex", SEXES, s["tau_s_given_l_w1"][l], rate, s["tau_s_given_l_f1"][l], clamped)
    return Marginals(age, country, education, sex, tuple(clamped))


def write_stats(root, locations, tables: dict[str, np.ndarray]) -> None:
    """Write tables in the directory schema understood by load_marginal_tables."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    locations = tuple(locations)
    files = {}
    for name, arr in tables.items():
        columns = {**TABLES, **OPTIONAL_TABLES}[name][0]
        domains = [_domain(c, locations) for c in columns]
        with open(root / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*columns, "value"])
            for idx in np.ndindex(*arr.shape):
                w.writerow([d[i] for d, i in zip(domains, idx)] + [repr(float(arr[idx]))])
        files[name] = f"{name}.csv"
    manifest = {"locations": list(locations), "tables": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
