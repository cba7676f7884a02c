import json
import shutil
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from cfmatch import stats as stt
from cfmatch.datagen import (
    CELLS,
    SHAPE,
    DataConfig,
    GroupMeans,
    Rho,
    allocate_capacities,
    beta_params,
    box_bounds,
    constraint_matrix,
    fit_group_means,
    generate_dataset,
    objective_weights,
    qp_objective,
    sample_pool,
    sample_profiles,
    solve_mean_qp,
)
from cfmatch.qp import InfeasibleQP, solve_qp
from cfmatch.scm import read_episodes


@pytest.fixture(scope="module")
def bundled():
    return stt.load_marginal_tables()


@pytest.fixture
def stats_copy(tmp_path):
    dst = tmp_path / "stats"
    shutil.copytree(stt.bundled_stats_dir(), dst)
    return dst


def uniform_tables(locations=("A", "B"), m=0.4):
    """Every group share uniform and every employment rate equal to ``m``."""
    L = len(locations)
    t = {
        "tau_cs": np.full((6, 2), 1 / 12),
        "tau_a_given_c": np.full((6, 5), 1 / 5),
        "tau_e_given_c": np.full((6, 3), 1 / 3),
        "n_aes_given_l": np.ones((L, 5, 3, 2)),
        "tau_a_given_l_w1": np.full((L, 5), 1 / 5),
        "tau_s_given_l_w1": np.full((L, 2), 1 / 2),
        "tau_w1_given_l_f1": np.full(L, m),
        "tau_c_given_l_f1": np.full((L, 6), 1 / 6),
        "tau_c_given_l_w1_f1": np.full((L, 6), 1 / 6),
        "tau_e_given_l_f1": np.full((L, 3), 1 / 3),
        "tau_e_given_l_w1_f1": np.full((L, 3), 1 / 3),
        "tau_s_given_l_f1": np.full((L, 2), 1 / 2),
    }
    return stt.MarginalStats(tuple(locations), t)


def test_bundled_loads(bundled):
    assert set(stt.TABLES) <= set(bundled.tables)
    assert len(bundled.locations) == 10
    assert bundled.allocation is not None
    assert bundled.location_index("california") == 0


def test_sum_violation_rejected(stats_copy):
    path = stats_copy / "tau_a_given_c.csv"
    lines = path.read_text().splitlines()
    head, first = lines[0], lines[1].split(",")
    first[-1] = repr(float(first[-1]) - 0.1)
    path.write_text("\n".join([head, ",".join(first), *lines[2:]]) + "\n")
    with pytest.raises(stt.StatsError, match="tau_a_given_c.*sums to"):
        stt.load_marginal_tables(stats_copy)


def test_missing_table_named(stats_copy):
    man = json.loads((stats_copy / "manifest.json").read_text())
    del man["tables"]["tau_w1_given_l_f1"]
    (stats_copy / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(stt.StatsError, match="missing table tau_w1_given_l_f1"):
        stt.load_marginal_tables(stats_copy)


def test_unknown_category_named(stats_copy):
    path = stats_copy / "tau_e_given_c.csv"
    text = path.read_text().replace("Tertiary", "Doctorate", 1)
    path.write_text(text)
    with pytest.raises(stt.StatsError, match=r"tau_e_given_c, row \d+: unknown education"):
        stt.load_marginal_tables(stats_copy)


def test_duplicate_row_rejected(stats_copy):
    path = stats_copy / "tau_cs.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(stt.StatsError, match="duplicate"):
        stt.load_marginal_tables(stats_copy)


def test_write_roundtrip(tmp_path):
    s = uniform_tables()
    stt.write_stats(tmp_path, s.locations, s.tables)
    back = stt.load_marginal_tables(tmp_path)
    for name in stt.TABLES:
        assert np.allclose(back[name], s[name], rtol=0, atol=1e-15)


def test_marginal_arithmetic():
    assert stt.employment_rate(0.2, 0.7, 0.25) == pytest.approx(0.56, abs=1e-15)


def test_country_quotient_cancels(bundled):
    t = dict(bundled.tables)
    t["tau_c_given_l_w1_f1"] = t["tau_c_given_l_f1"].copy()
    m = stt.compute_marginal_means(stt.MarginalStats(bundled.locations, t), 3)
    assert np.allclose(m.country, bundled["tau_w1_given_l_f1"][3], atol=1e-15)


def test_equal_rates_give_equal_marginals():
    m = stt.compute_marginal_means(uniform_tables(m=0.4), "a")
    for arr in (m.age, m.country, m.education, m.sex):
        assert np.allclose(arr, 0.4, atol=1e-15)


def test_zero_denominator_named():
    s = uniform_tables()
    s.tables["tau_e_given_l_f1"][0] = [0.0, 0.5, 0.5]
    with pytest.raises(stt.StatsError, match="education=Primary or less"):
        stt.compute_marginal_means(s, 0)


def test_qp_constant_solution():
    s = uniform_tables(m=0.4)
    mu, rep = solve_mean_qp(s, 0, Rho(b=10.0))
    assert np.allclose(mu, 0.4, atol=1e-8)
    assert qp_objective(mu, stt.compute_marginal_means(s, 0)) < 1e-14


def test_qp_loose_constraints_give_weighted_average(bundled):
    marg = stt.compute_marginal_means(bundled, 2)
    mu, rep = solve_mean_qp(bundled, 2, Rho(1, 1, 1, 1, float("inf")))
    wts = objective_weights()
    avg = (wts[0] * marg.age[:, None, None, None] + wts[1] * marg.country[None, :, None, None]
           + wts[2] * marg.education[None, None, :, None] + wts[3] * marg.sex[None, None, None, :]) / wts.sum()
    assert np.allclose(mu, avg, atol=1e-7)


def test_qp_bundled_constraints(bundled):
    rho = Rho()
    for l in range(10):
        mu, rep = solve_mean_qp(bundled, l, rho)
        A, _ = constraint_matrix(bundled, l)
        marg = stt.compute_marginal_means(bundled, l)
        target = np.concatenate([marg.age, marg.country, marg.education, marg.sex])
        r = np.repeat([rho.a, rho.c, rho.e, rho.s], [5, 6, 3, 2])
        ax = A @ mu.reshape(-1)
        assert np.all(ax >= target * (1 - r) - 1e-6) and np.all(ax <= target * (1 + r) + 1e-6)
        lo, hi, _ = box_bounds(marg, rho.b)
        assert np.all(mu.reshape(-1) >= lo - 1e-6) and np.all(mu.reshape(-1) <= hi + 1e-6)
        assert rep.result.kkt_residual <= 1e-6
        if rep.init_feasible:
            assert qp_objective(mu, marg) <= rep.init_objective + 1e-12


def test_qp_infeasible_names_constraint(bundled):
    # exact marginals with a collapsed box cannot all hold at once
    tight = Rho(a=0.0, c=0.0, e=0.0, s=0.0, b=0.0)
    with pytest.raises(InfeasibleQP, match=f"{bundled.locations[0]}: constraint (box\\(|\\w+=)"):
        solve_mean_qp(bundled, 0, tight)


def test_qp_solver_small():
    # min 1/2 |x|^2 - x0 - x1  s.t. x0 + x1 <= 1
    res = solve_qp(np.ones(2), -np.ones(2), np.array([[1.0, 1.0]]), np.array([-np.inf]), np.array([1.0]))
    assert np.allclose(res.x, [0.5, 0.5], atol=1e-9)
    assert res.kkt_residual <= 1e-9
    with pytest.raises(InfeasibleQP):
        solve_qp(np.ones(1), np.zeros(1), np.array([[1.0]]), np.array([2.0]), np.array([1.0]))


def test_beta_examples():
    b = beta_params(0.5, 0.001)
    assert b.alpha == pytest.approx(124.5, abs=1e-9) and b.beta == pytest.approx(124.5, abs=1e-9)
    b = beta_params(0.5, 0.125)
    assert b.alpha == pytest.approx(0.5) and b.beta == pytest.approx(0.5)
    with pytest.warns(UserWarning):
        b = beta_params(0.5, 0.3)
    assert b.variance == pytest.approx(0.99 * 0.25, rel=1e-12)


@given(st.floats(0.01, 0.99), st.floats(1e-5, 0.2))
def test_beta_moment_matching(mean, frac):
    var = frac * mean * (1 - mean)
    b = beta_params(mean, var)
    assert abs(b.mean - mean) <= 1e-12
    assert abs(b.variance - var) <= 1e-12


def test_beta_small_variance_concentrates(rng):
    b = beta_params(0.3, 1e-8)
    assert np.all(np.abs(rng.beta(b.alpha, b.beta, 1000) - 0.3) < 1e-3)


@pytest.mark.parametrize("n,k,shares,want", [
    (50, 10, None, [5] * 10),
    (7, 3, None, [3, 2, 2]),
    (10, 3, [0.5, 0.3, 0.2], [5, 3, 2]),
    (10, 3, [1, 1, 2], [3, 2, 5]),
])
def test_capacities(n, k, shares, want):
    assert allocate_capacities(n, k, shares).tolist() == want


@given(st.integers(0, 200), st.lists(st.floats(0.01, 1), min_size=1, max_size=12))
def test_capacities_sum(n, shares):
    c = allocate_capacities(n, len(shares), shares)
    assert c.sum() == n and np.all(c >= 0)
    quota = n * np.array(shares) / np.sum(shares)
    assert np.all(np.abs(c - quota) < 1)


def test_sampler_mean_and_variance():
    s = uniform_tables(m=0.3)
    means = GroupMeans(s.locations, np.full((1, *SHAPE), 0.3))
    pool = sample_pool(means, s, 100_000, 1, [100_000], np.random.default_rng(5), sigma2=1e-3)
    p = pool.true_p[:, 0]
    se = p.std(ddof=1) / np.sqrt(p.size)
    assert abs(p.mean() - 0.3) <= 3 * se
    assert abs(p.var(ddof=1) - 1e-3) <= 1e-4
    assert abs(pool.outcomes.mean() - 0.3) < 0.01


def test_pool_shapes(bundled):
    means = fit_group_means(bundled)
    pool = sample_pool(means, bundled, 100, 10, allocate_capacities(100, 10), np.random.default_rng(0))
    assert len(pool.profiles) == 100
    assert pool.true_p.shape == (100, 10) and pool.outcomes.shape == (100, 10)
    assert np.all((pool.true_p > 0) & (pool.true_p < 1))


def test_point_mass_origin(bundled):
    t = dict(bundled.tables)
    cs = np.zeros((6, 2))
    cs[2, 1] = 1.0
    t["tau_cs"] = cs
    idx = sample_profiles(stt.MarginalStats(bundled.locations, t), 500, np.random.default_rng(1))
    assert np.all(idx[:, 1] == 2) and np.all(idx[:, 3] == 1)


def test_profile_cascade_chi_square(bundled):
    n = 100_000
    idx = sample_profiles(bundled, n, np.random.default_rng(11))
    obs = np.zeros(SHAPE)
    np.add.at(obs, tuple(idx.T), 1)
    cs, ac, ec = bundled["tau_cs"], bundled["tau_a_given_c"], bundled["tau_e_given_c"]
    expected = np.einsum("cs,ca,ce->aces", cs, ac, ec) * n
    keep = expected.reshape(-1) > 0
    res = sps.chisquare(obs.reshape(-1)[keep], expected.reshape(-1)[keep])
    assert res.pvalue > 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        DataConfig(n_train=0)
    with pytest.raises(ValueError):
        DataConfig(w_grid=(1.5,))
    with pytest.raises(ValueError):
        Rho(a=2.0)
    assert DataConfig(rho={"a": 0.2}).rho == Rho(a=0.2)


def test_generate_counts_and_determinism(tmp_path):
    cfg = DataConfig(n_train=3, n_val=2, n_test=1, pool_size=20, locations=2, w_grid=(0.0, 0.5))
    a = generate_dataset(cfg, tmp_path / "a")
    b = generate_dataset(cfg, tmp_path / "b")
    assert a["counts"] == {"train": 3, "val": 2, "test": 1}
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == (tmp_path / "b" / f"{split}.jsonl").read_bytes()
    eps = read_episodes(a["paths"]["train"])
    assert len(eps) == 6 and sum(a["capacities"]) == 20
    # w = 0 default is the optimum under the true probabilities
    assert eps[0].w == 0.0 and eps[1].w == 0.5 and eps[0].pool.k == 2
    assert all(q["max_constraint_violation"] <= 1e-6 for q in a["qp"])


def test_different_seed_differs(tmp_path):
    cfg = DataConfig(n_train=1, n_val=1, n_test=1, pool_size=10, locations=2, w_grid=(0.0,))
    generate_dataset(cfg, tmp_path / "a")
    cfg.seed = 1
    generate_dataset(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "b" / "train.jsonl").read_bytes()
