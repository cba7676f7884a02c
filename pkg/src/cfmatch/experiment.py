"""End-to-end experiment stages: generate, make-targets, train, evaluate, report.

Every stage reads and writes inside one output directory whose
``manifest.json`` records the config hash; a stage run with a different
configuration than the one that produced the directory is refused.
"""

from __future__ import annotations

import csv
import hashlib
import json
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import datagen
from .inverse import is_harmless, modify_probabilities, tightness_gap
from .matching import solve_assignment
from .model import (
    ModelConfig,
    PairSet,
    TrainConfig,
    init_model,
    load_checkpoint,
    save_checkpoint,
    select_epsilon,
    train,
    write_history,
)
from .scm import Episode, biased_classifier, draw_overestimated, evaluate_policies, read_episodes

POLICIES = ("default", "pi_p", "pi_g", "pi_gbreve", "pi_hg")
METRIC_COLUMNS = ("policy", "w", "beta", "harm_pct", "mean_cf_utility", "mean_realized_utility", "stddev_over_runs")
TIGHTNESS_TOL = 1e-9


class ConfigMismatch(RuntimeError):
    pass


class StageError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: datagen.DataConfig = field(default_factory=datagen.DataConfig)
    beta_grid: tuple[float, ...] = (0.6,)
    eps_grid: tuple[float, ...] = (1e-6, 1e-3, 1e-1)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=4))
    model_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs/desk"

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = datagen.DataConfig(**self.data)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.train, dict):
            t = dict(self.train)
            if "betas" in t:
                t["betas"] = tuple(t["betas"])
            self.train = TrainConfig(**t)
        self.beta_grid = tuple(float(b) for b in self.beta_grid)
        self.eps_grid = tuple(sorted(float(e) for e in self.eps_grid))
        self.model_seeds = tuple(int(s) for s in self.model_seeds)
        if not self.beta_grid or any(not 0 <= b < 1 for b in self.beta_grid):
            raise ValueError("beta grid must be nonempty and within [0, 1)")
        if not self.eps_grid or any(not e > 0 for e in self.eps_grid):
            raise ValueError("epsilon grid must be nonempty and positive")
        if not self.model_seeds:
            raise ValueError("need at least one model seed")
        if self.model.k != self.data.locations:
            raise ValueError("model input width must equal the number of locations")
        # the data seed follows the experiment seed
        self.data.seed = self.seed

    def as_dict(self) -> dict:
        d = asdict(self)
        d["data"] = self.data.as_dict()
        d["train"]["betas"] = list(self.train.betas)
        for key in ("beta_grid", "eps_grid", "model_seeds"):
            d[key] = list(d[key])
        return d

    def config_hash(self) -> str:
        d = self.as_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def preset(name: str) -> dict:
    desk = ExperimentConfig().as_dict()
    if name == "desk":
        return desk
    if name == "paper":
        return _merge(desk, {
            "data": {"n_train": 4000, "n_val": 500, "n_test": 500, "pool_size": 100},
            "beta_grid": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            "model": {"d": 128, "layers": 2, "heads": 1},
            "train": {"batch_size": 16},
            "out": "runs/paper",
        })
    raise ValueError(f"unknown preset {name!r}")


def build_config(preset_name: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    d = _merge(preset(preset_name), overrides or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return ExperimentConfig(**d)


# ---- manifest -------------------------------------------------------------------


def _manifest_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "manifest.json"


def _read_manifest(cfg: ExperimentConfig) -> dict:
    path = _manifest_path(cfg)
    if not path.is_file():
        raise StageError(f"{path} not found; run the generate stage first")
    manifest = json.loads(path.read_text())
    if manifest.get("config_hash") != cfg.config_hash():
        raise ConfigMismatch(f"config hash {cfg.config_hash()} does not match {manifest.get('config_hash')} "
                             f"recorded in {path}")
    return manifest


def _write_manifest(cfg: ExperimentConfig, manifest: dict) -> None:
    _manifest_path(cfg).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _check_artifact(path: Path, cfg: ExperimentConfig, recorded: str | None) -> None:
    if recorded != cfg.config_hash():
        raise ConfigMismatch(f"{path} was produced under config hash {recorded}, current is {cfg.config_hash()}")


def _tag(x: float) -> str:
    return repr(float(x))


def overestimated_locations(cfg: ExperimentConfig) -> tuple[int, ...]:
    """Bias split of the classifier, drawn once per experiment seed."""
    return draw_overestimated(cfg.data.locations, np.random.default_rng([cfg.seed, 1]))


def with_predictions(episodes, beta: float, over) -> list[Episode]:
    return [e.with_predictions(biased_classifier(e.pool.true_p, beta, overestimated=over), beta, over)
            for e in episodes]


def _episodes(cfg: ExperimentConfig, split: str) -> list[Episode]:
    path = Path(cfg.out) / "data" / f"{split}.jsonl"
    if not path.is_file():
        raise StageError(f"{path} not found; run the generate stage first")
    return read_episodes(path)


def _by_w(episodes, w: float) -> list[Episode]:
    return [e for e in episodes if e.w == w]


# ---- stages ---------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = _manifest_path(cfg)
    if path.is_file():
        old = json.loads(path.read_text())
        if old.get("config_hash") != cfg.config_hash():
            raise ConfigMismatch(f"{out} already holds a run with config hash {old.get('config_hash')}")
    info = datagen.generate_dataset(cfg.data, out / "data")
    manifest = {
        "config": cfg.as_dict() | {"out": None},
        "config_hash": cfg.config_hash(),
        "data": {"counts": info["counts"], "capacities": info["capacities"], "qp": info["qp"]},
        "overestimated": list(overestimated_locations(cfg)),
    }
    _write_manifest(cfg, manifest)
    return manifest


def _target_path(cfg, beta, w, split) -> Path:
    return Path(cfg.out) / "targets" / f"beta{_tag(beta)}" / f"w{_tag(w)}" / f"{split}.npz"


def make_pairs(episodes, beta: float, over, eps_grid) -> dict[str, np.ndarray]:
    """g and one target matrix per epsilon; every pair is re-verified."""
    g_all, targets, masks, caps = [], [], [], []
    for e in episodes:
        g = biased_classifier(e.pool.true_p, beta, overestimated=over)
        base = modify_probabilities(g, e.record, eps_grid[0])
        mask = np.full(e.pool.n, -1)
        for i, l in base.mask:
            mask[i] = l
        optimal = solve_assignment(g, e.pool.capacities)
        per_eps = []
        for eps in eps_grid:
            mod = base if eps == eps_grid[0] else base.with_epsilon(eps)
            if not is_harmless(solve_assignment(mod.gbreve, e.pool.capacities), e.record):
                raise StageError(f"pool {e.pool_id}, w={e.w}: modified predictions admit a harmful optimum")
            gap = tightness_gap(g, e.pool.capacities, mod, optimal)
            if abs(gap) > TIGHTNESS_TOL:
                raise StageError(f"pool {e.pool_id}, w={e.w}: tightness identity off by {gap:.3g}")
            per_eps.append(mod.gbreve)
        g_all.append(g)
        targets.append(per_eps)
        masks.append(mask)
        caps.append(e.pool.capacities)
    return {
        "g": np.array(g_all),
        "gbreve": np.array(targets).transpose(1, 0, 2, 3),
        "mask": np.array(masks),
        "capacities": np.array(caps),
        "epsilon": np.array(eps_grid),
        "pool_id": np.array([e.pool_id for e in episodes]),
    }


def cmd_make_targets(cfg: ExperimentConfig) -> dict:
    manifest = _read_manifest(cfg)
    over = tuple(manifest["overestimated"])
    written = 0
    for split in ("train", "val"):
        episodes = _episodes(cfg, split)
        for beta in cfg.beta_grid:
            for w in cfg.data.w_grid:
                pairs = make_pairs(_by_w(episodes, w), beta, over, cfg.eps_grid)
                path = _target_path(cfg, beta, w, split)
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "wb") as fh:
                    np.savez(fh, config_hash=np.array(cfg.config_hash()), beta=np.array(beta), w=np.array(w), **pairs)
                written += 1
    manifest["targets"] = {"files": written, "epsilon": list(cfg.eps_grid)}
    _write_manifest(cfg, manifest)
    return manifest["targets"]


def _load_pairs(cfg, beta, w, split) -> dict:
    path = _target_path(cfg, beta, w, split)
    if not path.is_file():
        raise StageError(f"{path} not found; run the make-targets stage first")
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    _check_artifact(path, cfg, str(data["config_hash"]))
    return data


def _pairset(data: dict, eps_index: int) -> PairSet:
    return PairSet(data["g"], data["gbreve"][eps_index], data["capacities"])


def _checkpoint_path(cfg, beta, w, eps, seed) -> Path:
    return Path(cfg.out) / "models" / f"beta{_tag(beta)}" / f"w{_tag(w)}" / f"eps{_tag(eps)}_seed{seed}.json"


def _train_one(cfg, beta, w, eps, seed, train_pairs, val_pairs):
    path = _checkpoint_path(cfg, beta, w, eps, seed)
    if path.is_file():
        model, meta = load_checkpoint(path)
        _check_artifact(path, cfg, meta.get("config_hash"))
        return model
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, seed, 2])
    m = init_model(cfg.model, rng, zero_head=True)
    tc = replace(cfg.train, seed=int(np.random.SeedSequence([cfg.seed, seed, 3]).generate_state(1)[0]))
    best, history, epoch, val = train(m, train_pairs, val_pairs, tc)
    save_checkpoint(path, best, epoch, val, {"config_hash": cfg.config_hash(), "beta": beta, "w": w,
                                             "epsilon": eps, "seed": seed})
    write_history(path.with_suffix(".log.csv"), history)
    return best


def harm_fraction(model, episodes, eps: float) -> float:
    return evaluate_policies(episodes, eps, model, ("pi_hg",))["pi_hg"].harm_fraction


def cmd_train(cfg: ExperimentConfig, log=None) -> dict:
    """Pick epsilon per (beta, w) with the first model seed, then train the
    remaining seeds at the chosen epsilon."""
    manifest = _read_manifest(cfg)
    over = tuple(manifest["overestimated"])
    val_episodes = _episodes(cfg, "val")
    selection = {}
    first, rest = cfg.model_seeds[0], cfg.model_seeds[1:]
    for beta in cfg.beta_grid:
        for w in cfg.data.w_grid:
            tr, va = _load_pairs(cfg, beta, w, "train"), _load_pairs(cfg, beta, w, "val")
            val_eps = with_predictions(_by_w(val_episodes, w), beta, over)
            scores = {}
            for j, eps in enumerate(cfg.eps_grid):
                model = _train_one(cfg, beta, w, eps, first, _pairset(tr, j), _pairset(va, j))
                scores[eps] = harm_fraction(model, val_eps, eps)
            chosen = select_epsilon(scores)
            j = cfg.eps_grid.index(chosen)
            for seed in rest:
                _train_one(cfg, beta, w, chosen, seed, _pairset(tr, j), _pairset(va, j))
            selection[f"{_tag(beta)}/{_tag(w)}"] = {"scores": {_tag(e): s for e, s in scores.items()},
                                                     "epsilon": chosen}
            if log:
                log(f"beta={beta} w={w} eps={chosen} val harm={scores}")
    manifest["selection"] = selection
    _write_manifest(cfg, manifest)
    return selection


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def cmd_evaluate(cfg: ExperimentConfig) -> dict:
    manifest = _read_manifest(cfg)
    if "selection" not in manifest:
        raise StageError("no trained models recorded; run the train stage first")
    over = tuple(manifest["overestimated"])
    test = _episodes(cfg, "test")
    rows, per_run, per_pool = [], [], []
    for beta in cfg.beta_grid:
        for w in cfg.data.w_grid:
            eps = manifest["selection"][f"{_tag(beta)}/{_tag(w)}"]["epsilon"]
            episodes = with_predictions(_by_w(test, w), beta, over)
            fixed = evaluate_policies(episodes, eps, None, POLICIES[:-1])
            runs = []
            for seed in cfg.model_seeds:
                path = _checkpoint_path(cfg, beta, w, eps, seed)
                if not path.is_file():
                    raise StageError(f"{path} not found; run the train stage first")
                model, meta = load_checkpoint(path)
                _check_artifact(path, cfg, meta.get("config_hash"))
                runs.append((seed, evaluate_policies(episodes, eps, model, ("pi_hg",))["pi_hg"]))
            for name, m in fixed.items():
                rows.append((name, w, beta, 100 * m.harm_fraction, m.mean_cf_utility, m.mean_realized_utility, 0.0))
                for seed in cfg.model_seeds:
                    per_run.append((name, w, beta, seed, 100 * m.harm_fraction, m.mean_cf_utility,
                                    m.mean_realized_utility))
            harms = [100 * m.harm_fraction for _, m in runs]
            rows.append(("pi_hg", w, beta, statistics.fmean(harms),
                         statistics.fmean(m.mean_cf_utility for _, m in runs),
                         statistics.fmean(m.mean_realized_utility for _, m in runs),
                         statistics.pstdev(harms) if len(harms) > 1 else 0.0))
            for seed, m in runs:
                per_run.append(("pi_hg", w, beta, seed, 100 * m.harm_fraction, m.mean_cf_utility,
                                m.mean_realized_utility))
            for idx, e in enumerate(episodes):
                rec = {"pool_id": e.pool_id, "w": w, "beta": beta, "realized_default": fixed["default"].per_pool_realized[idx]}
                for name, m in fixed.items():
                    rec[name] = m.per_pool_cf[idx]
                rec["pi_hg"] = statistics.fmean(m.per_pool_cf[idx] for _, m in runs)
                per_pool.append(rec)
    out = Path(cfg.out)
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        for r in rows:
            wr.writerow([r[0]] + [_fmt(x) for x in r[1:]])
    with open(out / "metrics_per_run.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["policy", "w", "beta", "seed", "harm_pct", "mean_cf_utility", "mean_realized_utility"])
        for r in per_run:
            wr.writerow([r[0], _fmt(r[1]), _fmt(r[2]), r[3]] + [_fmt(x) for x in r[4:]])
    with open(out / "per_pool.csv", "w", newline="") as fh:
        cols = ["pool_id", "w", "beta", "realized_default", *POLICIES]
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for rec in per_pool:
            wr.writerow([rec["pool_id"]] + [_fmt(rec[c]) for c in cols[1:]])
    (out / "metrics.meta.json").write_text(json.dumps({"config_hash": cfg.config_hash()}) + "\n")
    return {"rows": len(rows)}


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in METRIC_COLUMNS[1:]:
            r[key] = float(r[key])
    return rows


def _table(rows, beta, key, ws, digits):
    head = "| policy | " + " | ".join(f"{w:g}" for w in ws) + " |"
    sep = "|---" * (len(ws) + 1) + "|"
    lines = [head, sep]
    for policy in POLICIES:
        vals = {r["w"]: r for r in rows if r["policy"] == policy and r["beta"] == beta}
        if not vals:
            continue
        cells = []
        for w in ws:
            r = vals.get(w)
            if r is None:
                cells.append("")
            elif key == "harm_pct" and policy == "pi_hg":
                cells.append(f"{r[key]:.{digits}f} ± {r['stddev_over_runs']:.{digits}f}")
            else:
                cells.append(f"{r[key]:.{digits}f}")
        lines.append(f"| {policy} | " + " | ".join(cells) + " |")
    return lines


def cmd_report(cfg: ExperimentConfig) -> dict:
    manifest = _read_manifest(cfg)
    out = Path(cfg.out)
    meta_path = out / "metrics.meta.json"
    if not (out / "metrics.csv").is_file() or not meta_path.is_file():
        raise StageError("metrics not found; run the evaluate stage first")
    _check_artifact(meta_path, cfg, json.loads(meta_path.read_text()).get("config_hash"))
    rows = read_metrics(out / "metrics.csv")
    ws = sorted({r["w"] for r in rows})
    betas = sorted({r["beta"] for r in rows})
    lines = [f"# Results (config {manifest['config_hash']})", ""]
    for beta in betas:
        for title, key, digits in (("Pools harmed (%)", "harm_pct", 1),
                                   ("Expected counterfactual utility per refugee", "mean_cf_utility", 4),
                                   ("Realized utility per refugee", "mean_realized_utility", 4)):
            lines += [f"## {title}, beta = {beta:g}", ""] + _table(rows, beta, key, ws, digits) + [""]
    (out / "summary.md").write_text("\n".join(lines))
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        for beta in betas:
            for w in ws:
                for policy in POLICIES:
                    for r in rows:
                        if r["policy"] == policy and r["w"] == w and r["beta"] == beta:
                            wr.writerow([policy] + [_fmt(r[k]) for k in METRIC_COLUMNS[1:]])
    scatter = 0
    with open(out / "per_pool.csv", newline="") as src, open(out / "scatter.csv", "w", newline="") as dst:
        wr = csv.writer(dst, lineterminator="\n")
        wr.writerow(["pool_id", "w", "beta", "gain_gbreve_vs_g", "gain_hg_vs_g", "gain_gbreve_vs_default"])
        for rec in csv.DictReader(src):
            g = float(rec["pi_g"])
            wr.writerow([rec["pool_id"], rec["w"], rec["beta"], _fmt(float(rec["pi_gbreve"]) - g),
                         _fmt(float(rec["pi_hg"]) - g),
                         _fmt(float(rec["pi_gbreve"]) - float(rec["realized_default"]))])
            scatter += 1
    return {"summary_rows": len(ws) * len(betas) * len(POLICIES), "scatter_rows": scatter}


def run_all(cfg: ExperimentConfig, log=None) -> dict:
    out = {"generate": cmd_generate(cfg)["config_hash"]}
    out["make_targets"] = cmd_make_targets(cfg)
    out["train"] = cmd_train(cfg, log)
    out["evaluate"] = cmd_evaluate(cfg)
    out["report"] = cmd_report(cfg)
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

