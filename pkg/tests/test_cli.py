import csv
import json

import pytest

from cfmatch import cli
from cfmatch.experiment import build_config, file_digest

TINY = {
    "data": {"n_train": 12, "n_val": 6, "n_test": 6, "pool_size": 12, "locations": 4, "w_grid": [0.0, 0.5]},
    "model": {"k": 4, "d": 8, "layers": 1},
    "train": {"epochs": 2},
    "eps_grid": [1e-3, 1e-1],
    "model_seeds": [0, 1],
}

TINY_TOML = """
eps_grid = [1e-3, 1e-1]
model_seeds = [0, 1]

[data]
n_train = 12
n_val = 6
n_test = 6
pool_size = 12
locations = 4
w_grid = [0.0, 0.5]

[model]
k = 4
d = 8
layers = 1

[train]
epochs = 2
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["all", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_outputs(run_dir):
    for name in ("manifest.json", "metrics.csv", "metrics_per_run.csv", "per_pool.csv",
                 "summary.md", "summary.csv", "scatter.csv"):
        assert (run_dir / name).is_file(), name
    rows = read_rows(run_dir / "metrics.csv")
    assert len(rows) == 5 * 2
    assert {r["policy"] for r in rows} == {"default", "pi_p", "pi_g", "pi_gbreve", "pi_hg"}
    for r in rows:
        if r["policy"] in ("pi_gbreve", "default"):
            assert float(r["harm_pct"]) == 0.0
    assert len(read_rows(run_dir / "scatter.csv")) == 6 * 2
    assert len(list((run_dir / "models").rglob("*.json"))) >= 2 * 2


def test_report_is_deterministic(run_dir, tiny_config):
    before = {n: file_digest(run_dir / n) for n in ("summary.md", "summary.csv", "scatter.csv")}
    assert cli.main(["report", "--config", str(tiny_config), "--out", str(run_dir)]) == 0
    assert before == {n: file_digest(run_dir / n) for n in before}


def test_train_rerun_keeps_checkpoints(run_dir, tiny_config):
    ckpts = sorted((run_dir / "models").rglob("*.json"))
    before = [file_digest(p) for p in ckpts]
    assert cli.main(["train", "--config", str(tiny_config), "--out", str(run_dir)]) == 0
    assert before == [file_digest(p) for p in ckpts]


def test_changed_config_is_refused(run_dir, tiny_config, capsys):
    code = cli.main(["evaluate", "--config", str(tiny_config), "--out", str(run_dir), "--eps", "0.01"])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["type"] == "ConfigMismatch"
    code = cli.main(["generate", "--config", str(tiny_config), "--out", str(run_dir), "--seed", "9"])
    assert code == 1


def test_stage_order_enforced(tmp_path, tiny_config, capsys):
    code = cli.main(["evaluate", "--config", str(tiny_config), "--out", str(tmp_path)])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "evaluate" and err["type"] == "StageError"


def test_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"nonsense": 1}))
    assert cli.main(["generate", "--config", str(path), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config" and "nonsense" in err["message"]


def test_toml_matches_json(tmp_path, tiny_config):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    args = cli.build_parser().parse_args(["generate", "--config", str(path)])
    from_toml = cli.config_from_args(args)
    args = cli.build_parser().parse_args(["generate", "--config", str(tiny_config)])
    assert from_toml.config_hash() == cli.config_from_args(args).config_hash()


def test_flags_override(tmp_path):
    args = cli.build_parser().parse_args(
        ["generate", "--pools", "5", "2", "2", "--pool-size", "30", "--locations", "4", "--rho-a", "0.3",
         "--sigma2", "0.002", "--seed", "3", "--out", str(tmp_path)])
    cfg = cli.config_from_args(args)
    d = cfg.data
    assert (d.n_train, d.n_val, d.n_test, d.pool_size, d.locations) == (5, 2, 2, 30, 4)
    assert d.rho.a == 0.3 and d.sigma2 == 0.002 and d.seed == 3 and cfg.model.k == 4


def test_presets():
    paper = build_config("paper")
    assert paper.data.n_pools == 5000 and paper.data.pool_size == 100 and paper.data.locations == 10
    assert paper.train.batch_size == 16
    desk = build_config("desk")
    assert (desk.data.n_train, desk.data.n_val, desk.data.n_test, desk.data.pool_size) == (200, 50, 50, 50)
    assert build_config("desk", {"out": "x"}).config_hash() == desk.config_hash()
    assert build_config("desk", {"seed": 1}).config_hash() != desk.config_hash()


def test_same_seed_same_metrics(run_dir, tmp_path, tiny_config):
    assert cli.main(["all", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    for name in ("metrics.csv", "metrics_per_run.csv", "per_pool.csv"):
        assert file_digest(tmp_path / name) == file_digest(run_dir / name)
