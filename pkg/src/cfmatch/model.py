"""Permutation-equivariant post-processing network with hand-written reverse
mode, AdamW training and JSON checkpoints.

Shapes: a batch holds B pools of n refugees over k locations; ``g`` is
(B, n, k) and the capacity input is (B, k), normalized by the pool size.
The network predicts a residual that is added back onto ``g``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "cfmatch-model"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


class NonFiniteActivation(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class ModelConfig:
    k: int = 10
    d: int = 32
    layers: int = 2
    heads: int = 1
    ffn_mult: int = 4

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.layers < 1 or self.heads < 1 or self.ffn_mult < 1:
            raise ValueError("model dimensions must be positive")
        if self.d % self.heads:
            raise ValueError("heads must divide the hidden dimension")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    gamma: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or not self.lr > 0:
            raise ValueError("batch size, epochs and learning rate must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.gamma**epoch


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    k, d, f = cfg.k, cfg.d, cfg.ffn_mult * cfg.d
    shapes = [
        ("prob.w1", (k, d)), ("prob.b1", (d,)), ("prob.w2", (d, d)), ("prob.b2", (d,)),
        ("cap.w1", (k, d)), ("cap.b1", (d,)), ("cap.w2", (d, d)), ("cap.b2", (d,)),
    ]
    for j in range(cfg.layers):
        p = f"enc{j}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)), (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)), (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "ff.w1", (d, f)), (p + "ff.b1", (f,)), (p + "ff.w2", (f, d)), (p + "ff.b2", (d,)),
        ]
    shapes += [
        ("lnf.g", (d,)), ("lnf.b", (d,)),
        ("out.w1", (d, d)), ("out.b1", (d,)), ("out.w2", (d, k)), ("out.b2", (k,)),
    ]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed form of the parameter count for the default feed-forward width 4d."""
    k, d, n_layers = cfg.k, cfg.d, cfg.layers
    if cfg.ffn_mult != 4:
        return sum(int(np.prod(s)) for _, s in param_shapes(cfg))
    return 3 * k * d + 3 * d * d + 7 * d + k + n_layers * (12 * d * d + 13 * d)


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        expected = dict(param_shapes(cfg))
        if set(params) != set(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = {name: np.array(params[name], dtype=self.dtype) for name, _ in param_shapes(cfg)}

    def copy(self) -> "Model":
        return Model(self.cfg, self.params, self.dtype)

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, self.params, dtype)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].reshape(-1) for n, _ in param_shapes(self.cfg)]).astype(np.float64)

    @classmethod
    def from_flat(cls, cfg: ModelConfig, flat) -> "Model":
        flat = np.asarray(flat, dtype=np.float64)
        params, pos = {}, 0
        for name, shape in param_shapes(cfg):
            size = int(np.prod(shape))
            params[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return cls(cfg, params)

    def __call__(self, g, c) -> np.ndarray:
        """Post-processed predictions for a single pool, clamped at 0."""
        return predict(self, g, c)


def _is_norm(name: str) -> bool:
    return name.startswith("lnf.") or ".ln1." in name or ".ln2." in name


def init_model(cfg: ModelConfig, rng: np.random.Generator, zero_head: bool = False) -> Model:
    """Uniform fan-in initialization; layer norms start at identity.

    With ``zero_head`` the last output layer is zero, so the model returns g.
    """
    shapes = dict(param_shapes(cfg))
    params = {}
    for name, shape in param_shapes(cfg):
        if _is_norm(name):
            params[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
            continue
        head, leaf = name.rsplit(".", 1)
        weight = f"{head}.w{leaf[1:]}"
        bound = 1.0 / math.sqrt(shapes[weight][0])
        params[name] = rng.uniform(-bound, bound, size=shape)
    if zero_head:
        params["out.w2"] = np.zeros(shapes["out.w2"])
        params["out.b2"] = np.zeros(shapes["out.b2"])
    return Model(cfg, params)


# ---- forward / backward -------------------------------------------------------


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(f"non-finite activation in {where}")
    return x


def _ln_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _ln_backward(dy, gamma, cache):
    xhat, inv = cache
    red = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=red)
    dbeta = dy.sum(axis=red)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _mlp_forward(x, w1, b1, w2, b2):
    pre = x @ w1 + b1
    hid = np.maximum(pre, 0.0)
    return hid @ w2 + b2, (x, pre, hid)


def _mlp_backward(dy, w1, w2, cache):
    x, pre, hid = cache
    red = tuple(range(dy.ndim - 1))
    dw2 = np.tensordot(hid, dy, axes=(red, red))
    db2 = dy.sum(axis=red)
    dhid = (dy @ w2.T) * (pre > 0)
    dw1 = np.tensordot(x, dhid, axes=(red, red))
    db1 = dhid.sum(axis=red)
    return dhid @ w1.T, dw1, db1, dw2, db2


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attn_forward(x, p, pre, heads):
    q = x @ p[pre + "wq"] + p[pre + "bq"]
    k = x @ p[pre + "wk"] + p[pre + "bk"]
    v = x @ p[pre + "wv"] + p[pre + "bv"]
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    s = qh @ kh.transpose(0, 1, 3, 2) * scale
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = _merge(a @ vh)
    return o @ p[pre + "wo"] + p[pre + "bo"], (x, qh, kh, vh, a, o, scale)


def _attn_backward(dy, p, pre, heads, cache, grads):
    x, qh, kh, vh, a, o, scale = cache
    grads[pre + "wo"] = np.tensordot(o, dy, axes=((0, 1), (0, 1)))
    grads[pre + "bo"] = dy.sum(axis=(0, 1))
    do = _split(dy @ p[pre + "wo"].T, heads)
    da = do @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dx = np.zeros_like(x)
    for name, dh in (("q", dqh), ("k", dkh), ("v", dvh)):
        dm = _merge(dh)
        grads[pre + "w" + name] = np.tensordot(x, dm, axes=((0, 1), (0, 1)))
        grads[pre + "b" + name] = dm.sum(axis=(0, 1))
        dx += dm @ p[pre + "w" + name].T
    return dx


def _inputs(g, c, cfg: ModelConfig, dtype):
    g = np.asarray(g, dtype=dtype)
    c = np.asarray(c, dtype=dtype)
    single = g.ndim == 2
    if single:
        g, c = g[None], c[None]
    if g.ndim != 3 or g.shape[2] != cfg.k:
        raise ValueError(f"predictions must have {cfg.k} columns, got shape {g.shape}")
    if c.shape != (g.shape[0], cfg.k):
        raise ValueError(f"capacities must have shape ({g.shape[0]}, {cfg.k}), got {c.shape}")
    return g, c / dtype.type(max(g.shape[1], 1)), single


def forward(m: Model, g, c, keep_cache: bool = False):
    """Unclamped network output g + residual for a batch (B, n, k) or one pool."""
    cfg, p = m.cfg, m.params
    g, cn, single = _inputs(g, c, cfg, m.dtype)
    cache = {}
    x, cache["prob"] = _mlp_forward(g, p["prob.w1"], p["prob.b1"], p["prob.w2"], p["prob.b2"])
    cv, cache["cap"] = _mlp_forward(cn, p["cap.w1"], p["cap.b1"], p["cap.w2"], p["cap.b2"])
    x = _check(x + cv[:, None, :], "input projection")
    for j in range(cfg.layers):
        pre = f"enc{j}."
        h, cache[pre + "ln1"] = _ln_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        att, cache[pre + "attn"] = _attn_forward(h, p, pre, cfg.heads)
        x = _check(x + att, f"encoder layer {j} attention")
        h, cache[pre + "ln2"] = _ln_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff, cache[pre + "ff"] = _mlp_forward(h, p[pre + "ff.w1"], p[pre + "ff.b1"], p[pre + "ff.w2"], p[pre + "ff.b2"])
        x = _check(x + ff, f"encoder layer {j} feed-forward")
    h, cache["lnf"] = _ln_forward(x, p["lnf.g"], p["lnf.b"])
    delta, cache["out"] = _mlp_forward(h, p["out.w1"], p["out.b1"], p["out.w2"], p["out.b2"])
    out = _check(g + delta, "output projection")
    if single:
        out = out[0]
    return (out, cache) if keep_cache else out


def backward(m: Model, cache, dout) -> dict[str, np.ndarray]:
    cfg, p = m.cfg, m.params
    dout = dout if dout.ndim == 3 else dout[None]
    grads = {}
    dh, grads["out.w1"], grads["out.b1"], grads["out.w2"], grads["out.b2"] = _mlp_backward(
        dout, p["out.w1"], p["out.w2"], cache["out"])
    dx, grads["lnf.g"], grads["lnf.b"] = _ln_backward(dh, p["lnf.g"], cache["lnf"])
    for j in reversed(range(cfg.layers)):
        pre = f"enc{j}."
        dh, grads[pre + "ff.w1"], grads[pre + "ff.b1"], grads[pre + "ff.w2"], grads[pre + "ff.b2"] = _mlp_backward(
            dx, p[pre + "ff.w1"], p[pre + "ff.w2"], cache[pre + "ff"])
        d_ln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _ln_backward(dh, p[pre + "ln2.g"], cache[pre + "ln2"])
        dx = dx + d_ln
        dh = _attn_backward(dx, p, pre, cfg.heads, cache[pre + "attn"], grads)
        d_ln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _ln_backward(dh, p[pre + "ln1.g"], cache[pre + "ln1"])
        dx = dx + d_ln
    _, grads["prob.w1"], grads["prob.b1"], grads["prob.w2"], grads["prob.b2"] = _mlp_backward(
        dx, p["prob.w1"], p["prob.w2"], cache["prob"])
    dcap = dx.sum(axis=1)
    _, grads["cap.w1"], grads["cap.b1"], grads["cap.w2"], grads["cap.b2"] = _mlp_backward(
        dcap, p["cap.w1"], p["cap.w2"], cache["cap"])
    return grads


def predict(m: Model, g, c) -> np.ndarray:
    return np.maximum(forward(m, g, c), 0.0)


def loss(pred, target) -> float:
    """Sum of squared entry differences, averaged over the pools of a batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if pred.ndim == 2:
        return float(np.sum((pred - target) ** 2))
    return float(np.sum((pred - target) ** 2) / pred.shape[0])


def loss_and_gradients(m: Model, g, c, target) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and its exact gradient with respect to every parameter."""
    g = np.asarray(g, dtype=m.dtype)
    target = np.asarray(target, dtype=m.dtype)
    if g.shape[0] == 0:
        raise ValueError("empty batch")
    out, cache = forward(m, g, c, keep_cache=True)
    batch = 1 if g.ndim == 2 else g.shape[0]
    dout = (out - target) * m.dtype.type(2.0 / batch)
    return loss(out, target), backward(m, cache, dout)


def gradient_check(m: Model, g, c, target, step: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per parameter.

    Relative error is |a - f| / max(|a|, |f|, floor); run on a float64 model.
    """
    m = m.astype(np.float64)
    _, grads = loss_and_gradients(m, g, c, target)
    out = {}
    for name, value in m.params.items():
        worst = 0.0
        for idx in np.ndindex(*value.shape):
            keep = value[idx]
            value[idx] = keep + step
            up = loss(forward(m, g, c), target)
            value[idx] = keep - step
            down = loss(forward(m, g, c), target)
            value[idx] = keep
            fd = (up - down) / (2 * step)
            a = float(grads[name][idx])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
        out[name] = worst
    return out


# ---- training -----------------------------------------------------------------


@dataclass
class PairSet:
    """Training pairs with shared pool size: g, target (P, n, k) and capacities (P, k)."""

    g: np.ndarray
    target: np.ndarray
    capacities: np.ndarray
    dtype: str = "float64"

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=self.dtype)
        self.target = np.asarray(self.target, dtype=self.dtype)
        self.capacities = np.asarray(self.capacities, dtype=self.dtype)
        if self.g.shape != self.target.shape or self.g.ndim != 3:
            raise ValueError("g and targets must share a (pools, n, k) shape")
        if self.capacities.shape != (self.g.shape[0], self.g.shape[2]):
            raise ValueError("capacities must be (pools, k)")

    def __len__(self):
        return self.g.shape[0]


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], tc: TrainConfig):
        self.tc = tc
        # moments in float64 so the update does not depend on the parameter dtype
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        b1, b2 = self.tc.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name in params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            p = params[name].astype(np.float64)
            p *= 1 - lr * self.tc.weight_decay
            p -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.tc.adam_eps)
            params[name][...] = p


def evaluate_loss(m: Model, data: PairSet, batch_size: int = 64) -> float:
    total = []
    for lo in range(0, len(data), batch_size):
        sl = slice(lo, lo + batch_size)
        out = forward(m, data.g[sl], data.capacities[sl])
        total.append(float(np.sum((out - data.target[sl]) ** 2)))
    return math.fsum(total) / len(data)


def train(m: Model, train_set: PairSet, val_set: PairSet, tc: TrainConfig):
    """AdamW with exponential decay; returns the best-validation snapshot and
    the per-epoch history."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    rng = np.random.default_rng(tc.seed)
    model = m.astype(tc.dtype)
    train_set = PairSet(train_set.g, train_set.target, train_set.capacities, tc.dtype)
    val_set = PairSet(val_set.g, val_set.target, val_set.capacities, tc.dtype)
    opt = AdamW(model.params, tc)
    initial = evaluate_loss(model, val_set)
    best, best_loss, best_epoch = model.copy(), initial, -1
    history, strikes = [], 0
    for epoch in range(tc.epochs):
        lr = tc.learning_rate(epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for lo in range(0, len(order), tc.batch_size):
            idx = np.sort(order[lo:lo + tc.batch_size])
            value, grads = loss_and_gradients(model, train_set.g[idx], train_set.capacities[idx], train_set.target[idx])
            opt.step(model.params, grads, lr)
            losses.append(value * len(idx))
        val = evaluate_loss(model, val_set)
        history.append({"epoch": epoch, "train_loss": math.fsum(losses) / len(order), "val_loss": val, "lr": lr})
        if val < best_loss:
            best, best_loss, best_epoch = model.copy(), val, epoch
        strikes = strikes + 1 if val > 10 * initial else 0
        if strikes >= 3:
            raise TrainingDiverged(f"validation loss above 10x its initial value for 3 epochs (epoch {epoch})", history)
    return best.astype(np.float64), history, best_epoch, best_loss


def select_epsilon(scores: dict[float, float]) -> float:
    """Grid value with the lowest validation harm fraction, ties to the smaller value."""
    if not scores:
        raise ValueError("epsilon grid is empty")
    return min(scores, key=lambda e: (scores[e], e))


# ---- persistence --------------------------------------------------------------


def save_checkpoint(path, m: Model, epoch: int, val_loss: float, extra: dict | None = None) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(m.cfg),
        "epoch": epoch,
        "val_loss": val_loss,
        "params": [float(x) for x in m.flat()],
    }
    if extra:
        obj.update(extra)
    Path(path).write_text(json.dumps(obj, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple[Model, dict]:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} model checkpoint")
    cfg = ModelConfig(**obj["config"])
    return Model.from_flat(cfg, obj["params"]), obj


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
