"""Build the bundled synthetic stats directory.

The tables are derived from a latent logistic employment model so they are
mutually consistent: every proportion is computed from one joint distribution
per location rather than filled in independently.  The numbers are plausible
but invented; no real survey data is involved.

    python3 scripts/make_bundled_stats.py [--out DIR] [--seed N]
"""

import argparse
from pathlib import Path

import numpy as np

from cfmatch.scm import AGE_GROUPS, EDUCATION, REGIONS, SEXES
from cfmatch.stats import write_stats

LOCATIONS = (
    "California", "Florida", "Illinois", "Maryland", "Massachusetts",
    "New Jersey", "New York", "Pennsylvania", "Texas", "Virginia",
)
ALLOCATION = np.array([0.17, 0.10, 0.08, 0.06, 0.07, 0.06, 0.13, 0.08, 0.16, 0.09])

# refugee arrivals
REFUGEE_REGION = np.array([0.34, 0.38, 0.10, 0.14, 0.01, 0.03])
REFUGEE_MALE = np.array([0.53, 0.55, 0.49, 0.50, 0.48, 0.50])
REFUGEE_AGE = np.array([
    [0.26, 0.34, 0.20, 0.16, 0.04],
    [0.22, 0.33, 0.22, 0.18, 0.05],
    [0.15, 0.28, 0.24, 0.24, 0.09],
    [0.24, 0.36, 0.21, 0.15, 0.04],
    [0.18, 0.30, 0.24, 0.21, 0.07],
    [0.20, 0.32, 0.23, 0.19, 0.06],
])
REFUGEE_EDU = np.array([
    [0.55, 0.33, 0.12],
    [0.42, 0.36, 0.22],
    [0.20, 0.47, 0.33],
    [0.48, 0.38, 0.14],
    [0.15, 0.45, 0.40],
    [0.30, 0.45, 0.25],
])

# latent employment model (log-odds effects)
AGE_EFFECT = np.array([-0.15, 0.35, 0.40, 0.20, -0.90])
REGION_EFFECT = np.array([-0.10, 0.05, 0.10, 0.05, 0.15, 0.00])
EDU_EFFECT = np.array([-0.35, 0.0, 0.30])
SEX_EFFECT = np.array([-0.25, 0.20])


def location_tables(rng):
    k = len(LOCATIONS)
    base_age = np.array([0.09, 0.25, 0.22, 0.30, 0.14])
    base_edu = np.array([[0.30, 0.45, 0.25], [0.22, 0.40, 0.38], [0.24, 0.40, 0.36],
                         [0.25, 0.44, 0.31], [0.45, 0.40, 0.15]])
    counts = np.zeros((k, len(AGE_GROUPS), len(EDUCATION), len(SEXES)))
    origin = np.zeros((k, len(REGIONS)))
    offset = np.zeros(k)
    for l in range(k):
        age = rng.dirichlet(base_age * 200)
        edu = np.array([rng.dirichlet(row * 150) for row in base_edu])
        male = rng.uniform(0.48, 0.51)
        joint = age[:, None, None] * edu[:, :, None] * np.array([1 - male, male])[None, None, :]
        size = rng.uniform(2e6, 2e7)
        counts[l] = np.round(joint * size)
        origin[l] = rng.dirichlet(np.array([0.12, 0.30, 0.12, 0.40, 0.03, 0.03]) * 60)
        offset[l] = rng.normal(0.55, 0.08)
    return counts, origin, offset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/cfmatch/data/stats"))
    ap.add_argument("--seed", type=int, default=20240501)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    counts, origin, offset = location_tables(rng)
    k = len(LOCATIONS)
    pop = counts / counts.sum(axis=(1, 2, 3), keepdims=True)  # tau(a, e, s | l)
    logit = (AGE_EFFECT[:, None, None, None] + REGION_EFFECT[None, :, None, None]
             + EDU_EFFECT[None, None, :, None] + SEX_EFFECT[None, None, None, :])
    mu = 1 / (1 + np.exp(-(offset[:, None, None, None, None] + logit[None])))  # (l, a, c, e, s)
    # foreign-born population: origin independent of (a, e, s)
    joint = origin[:, None, :, None, None] * pop[:, :, None, :, :]
    employed = joint * mu
    rate = employed.sum(axis=(1, 2, 3, 4))

    tables = {
        "tau_cs": REFUGEE_REGION[:, None] * np.stack([1 - REFUGEE_MALE, REFUGEE_MALE], axis=1),
        "tau_a_given_c": REFUGEE_AGE / REFUGEE_AGE.sum(axis=1, keepdims=True),
        "tau_e_given_c": REFUGEE_EDU / REFUGEE_EDU.sum(axis=1, keepdims=True),
        "n_aes_given_l": counts,
        "tau_a_given_l_w1": employed.sum(axis=(2, 3, 4)) / rate[:, None],
        "tau_s_given_l_w1": employed.sum(axis=(1, 2, 3)) / rate[:, None],
        "tau_w1_given_l_f1": rate,
        "tau_c_given_l_f1": origin,
        "tau_c_given_l_w1_f1": employed.sum(axis=(1, 3, 4)) / rate[:, None],
        "tau_e_given_l_f1": joint.sum(axis=(1, 2, 4)),
        "tau_e_given_l_w1_f1": employed.sum(axis=(1, 2, 4)) / rate[:, None],
        "tau_s_given_l_f1": joint.sum(axis=(1, 2, 3)),
        "allocation": ALLOCATION / ALLOCATION.sum(),
    }
    write_stats(args.out, LOCATIONS, tables)
    print(f"wrote {len(tables)} tables for {k} locations to {args.out}")


if __name__ == "__main__":
    main()
