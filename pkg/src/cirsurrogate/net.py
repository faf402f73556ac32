"""Numpy MLP surrogate: forward/backward passes, Adam training, ensembles, bundles."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import ShapeCodec
from .core import ChannelParams, TimeGrid, validate_params
from .dataset import DesignBox
from .features import FeatureStandardizer, feature_vector
from .solver import CirWaveform

log = logging.getLogger(__name__)

HIDDEN = (192, 192, 96)
N_IN = 16
LN_EPS = 1e-5
_MAGIC = b"CIRMODEL"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, member: int = 0):
        super().__init__(f"validation loss became NaN at epoch {epoch} (member {member})")
        self.epoch = epoch
        self.member = member


class OutOfDomainWarning(UserWarning):
    pass


def expected_param_count(m: int, n_in: int = N_IN, hidden=HIDDEN, n_ln: int = 2) -> int:
    sizes = (n_in, *hidden, m)
    affine = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    return affine + sum(2 * h for h in hidden[:n_ln])


class Mlp:
    """Affine layers with LayerNorm after the first ``n_ln`` hidden affines,
    ReLU on every hidden layer and inverted dropout after the first."""

    def __init__(self, m: int, n_in: int = N_IN, hidden=HIDDEN, n_ln: int = 2, dropout: float = 0.1):
        self.sizes = (n_in, *hidden, m)
        self.n_ln = min(n_ln, len(hidden))
        self.dropout = dropout
        self.params: dict[str, np.ndarray] = {}
        for l, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"W{l}"] = np.zeros((a, b))
            self.params[f"b{l}"] = np.zeros(b)
            if l < self.n_ln:
                self.params[f"g{l}"] = np.ones(b)
                self.params[f"be{l}"] = np.zeros(b)

    @property
    def m(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def weight_names(self):
        return [f"W{l}" for l in range(self.n_layers)]

    def init(self, rng: np.random.Generator, first_bias: float = 3.0):
        """Uniform fan-in init; first-layer biases spread over +-first_bias."""
        for l, a in enumerate(self.sizes[:-1]):
            s = 1.0 / np.sqrt(a)
            W = self.params[f"W{l}"]
            b = self.params[f"b{l}"]
            W[...] = rng.uniform(-s, s, W.shape)
            bs = first_bias if l == 0 else s
            b[...] = rng.uniform(-bs, bs, b.shape)
        return self

    def copy(self) -> "Mlp":
        out = Mlp.__new__(Mlp)
        out.sizes, out.n_ln, out.dropout = self.sizes, self.n_ln, self.dropout
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def forward(self, X, training: bool = False, rng: np.random.Generator | None = None, cache=None):
        h = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise ValueError("non-finite network input")
        P = self.params
        L = self.n_layers
        for l in range(L):
            z = h @ P[f"W{l}"] + P[f"b{l}"]
            if l == L - 1:
                if cache is not None:
                    cache.append((h, None, None, None))
                return z
            ln = None
            if l < self.n_ln:
                mu = z.mean(axis=-1, keepdims=True)
                inv = 1.0 / np.sqrt(z.var(axis=-1, keepdims=True) + LN_EPS)
                xh = (z - mu) * inv
                ln = (xh, inv)
                z = xh * P[f"g{l}"] + P[f"be{l}"]
            a = np.maximum(z, 0.0)
            mask = None
            if l == 0 and training and self.dropout > 0:
                if rng is None:
                    raise ValueError("training forward pass needs an rng for dropout")
                mask = (rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
                a = a * mask
            if cache is not None:
                cache.append((h, ln, z, mask))
            h = a
        return h

    def backward(self, cache, d_out) -> dict[str, np.ndarray]:
        P = self.params
        grads = {}
        d = d_out
        for l in range(self.n_layers - 1, -1, -1):
            h, ln, z, mask = cache[l]
            if l < self.n_layers - 1:
                if mask is not None:
                    d = d * mask
                d = d * (z > 0)
                if ln is not None:
                    xh, inv = ln
                    grads[f"g{l}"] = (d * xh).sum(axis=0)
                    grads[f"be{l}"] = d.sum(axis=0)
                    dxh = d * P[f"g{l}"]
                    n = dxh.shape[-1]
                    d = inv / n * (n * dxh - dxh.sum(-1, keepdims=True)
                                   - xh * (dxh * xh).sum(-1, keepdims=True))
            grads[f"W{l}"] = h.T @ d
            grads[f"b{l}"] = d.sum(axis=0)
            if l > 0:
                d = d @ P[f"W{l}"].T
        return grads

    def penalty(self) -> float:
        return float(sum(np.sum(self.params[w] ** 2) for w in self.weight_names()))

    def loss(self, X, Y, lam: float, training: bool = False, rng=None, grad: bool = False):
        """Batch-mean squared residual norm plus ``lam`` times the affine-weight norm."""
        cache = [] if grad else None
        out = self.forward(X, training, rng, cache)
        r = out - Y
        B = len(Y)
        value = float(np.sum(r * r) / B) + lam * self.penalty()
        if not grad:
            return value
        grads = self.backward(cache, 2.0 * r / B)
        for w in self.weight_names():
            grads[w] = grads[w] + 2.0 * lam * self.params[w]
        return value, grads


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 400
    lam: float = 1e-5
    patience: int = 40
    E: int = 5
    seed: int = 0
    first_bias: float = 3.0
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("lr", "batch_size", "epochs", "patience", "E"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.lam < 0 or not 0 <= self.dropout < 1:
            raise ValueError("TrainConfig needs lam >= 0 and 0 <= dropout < 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(data or {}) - known
        if bad:
            raise ValueError(f"unknown train settings {sorted(bad)}")
        return cls(**(data or {}))


def train_member(X, Y, Xv, Yv, cfg: TrainConfig, member: int = 0, hidden=HIDDEN):
    """Train one network; returns (best snapshot, history dict)."""
    rng = np.random.default_rng([cfg.seed, member])
    net = Mlp(Y.shape[1], X.shape[1], hidden, dropout=cfg.dropout).init(rng, cfg.first_bias)
    opt = Adam(net.params, cfg.lr)
    n = len(X)
    best, best_loss, best_epoch = net.copy(), np.inf, -1
    hist = {"train": [], "val": []}
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            value, grads = net.loss(X[b], Y[b], cfg.lam, training=True, rng=rng, grad=True)
            opt.step(net.params, grads)
            total += value * len(b)
        v = net.loss(Xv, Yv, 0.0)
        if np.isnan(v):
            raise TrainingDiverged(epoch, member)
        hist["train"].append(total / n)
        hist["val"].append(v)
        if v < best_loss:
            best, best_loss, best_epoch = net.copy(), v, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    hist["best_epoch"] = best_epoch
    hist["best_val"] = float(best_loss)
    return best, hist


@dataclass
class Ensemble:
    members: list

    @property
    def E(self) -> int:
        return len(self.members)

    @property
    def m(self) -> int:
        return self.members[0].m

    def predict(self, Xz) -> np.ndarray:
        out = self.members[0].forward(Xz)
        for net in self.members[1:]:
            out = out + net.forward(Xz)
        return out / self.E


def train(X, Y, Xv, Yv, cfg: TrainConfig | None = None, hidden=HIDDEN):
    """Train ``cfg.E`` independently seeded members; returns (Ensemble, histories)."""
    cfg = cfg or TrainConfig()
    members, hists = [], []
    for k in range(cfg.E):
        net, hist = train_member(np.asarray(X), np.asarray(Y), np.asarray(Xv), np.asarray(Yv), cfg, k, hidden)
        log.info("member %d: best val %.4g at epoch %d", k, hist["best_val"], hist["best_epoch"])
        members.append(net)
        hists.append(hist)
    return Ensemble(members), hists


@dataclass
class SurrogateModel:
    ensemble: Ensemble
    standardizer: FeatureStandardizer
    codec: ShapeCodec
    box: DesignBox
    grid: TimeGrid
    config: TrainConfig = field(default_factory=TrainConfig)
    meta: dict = field(default_factory=dict)

    def predict_target(self, p: ChannelParams) -> np.ndarray:
        x = self.standardizer.transform(feature_vector(p))
        return self.ensemble.predict(x[None, :])[0]

    def to_bytes(self) -> bytes:
        net0 = self.ensemble.members[0]
        names = list(net0.params)
        codec_bytes = self.codec.to_bytes()
        head = {
            "architecture": {"sizes": list(net0.sizes), "n_ln": net0.n_ln, "dropout": net0.dropout,
                             "ln_eps": LN_EPS, "blocks": names},
            "m": net0.m,
            "K": self.codec.K,
            "E": self.ensemble.E,
            "training_config": self.config.to_dict(),
            "optimizer": {"name": "adam", "b1": 0.9, "b2": 0.999, "eps": 1e-8},
            "metrics": self.meta.get("metrics", {}),
            "box": self.box.to_dict(),
            "grid": self.grid.to_dict(),
            "standardizer": self.standardizer.to_dict(),
            "standardizer_hash": self.standardizer.content_hash(),
            "codec_hash": self.codec.content_hash(),
            "codec_nbytes": len(codec_bytes),
            "meta": {k: v for k, v in self.meta.items() if k != "metrics"},
        }
        hb = json.dumps(head, sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes()
                        for net in self.ensemble.members for k in names)
        return _MAGIC + struct.pack("<I", len(hb)) + hb + body + codec_bytes

    @classmethod
    def from_bytes(cls, data: bytes) -> "SurrogateModel":
        if data[:8] != _MAGIC:
            raise ValueError("not a model bundle")
        (n,) = struct.unpack("<I", data[8:12])
        head = json.loads(data[12 : 12 + n])
        arch = head["architecture"]
        sizes = arch["sizes"]
        codec_bytes = data[len(data) - head["codec_nbytes"]:]
        codec = ShapeCodec.from_bytes(codec_bytes)
        if codec.content_hash() != head["codec_hash"]:
            raise ValueError("embedded codec does not match its recorded hash")
        std = FeatureStandardizer.from_dict(head["standardizer"])
        if std.content_hash() != head["standardizer_hash"]:
            raise ValueError("embedded standardizer does not match its recorded hash")
        body = np.frombuffer(data[12 + n : len(data) - head["codec_nbytes"]], dtype="<f8")
        pos = 0
        members = []
        for _ in range(head["E"]):
            net = Mlp(sizes[-1], sizes[0], tuple(sizes[1:-1]), arch["n_ln"], arch["dropout"])
            for k in arch["blocks"]:
                size = net.params[k].size
                net.params[k] = body[pos : pos + size].reshape(net.params[k].shape).astype(np.float64)
                pos += size
            members.append(net)
        if pos != body.size:
            raise ValueError("model bundle parameter block has the wrong size")
        meta = dict(head.get("meta", {}))
        meta["metrics"] = head.get("metrics", {})
        return cls(Ensemble(members), std, codec, DesignBox.from_dict(head["box"]),
                   TimeGrid.from_dict(head["grid"]), TrainConfig.from_dict(head["training_config"]), meta)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def predict_cir(model: SurrogateModel, p: ChannelParams, grid: TimeGrid | None = None) -> CirWaveform:
    """Features -> ensemble mean -> codec decode. Warns (and records) if ``p`` is outside the box."""
    grid = grid or model.grid
    validate_params(p)
    outside = model.box.outside(p)
    meta = {"out_of_domain": outside}
    if outside:
        warnings.warn(f"parameters outside the training box: {', '.join(outside)}", OutOfDomainWarning, stacklevel=2)
    h = model.codec.decode(model.predict_target(p), grid.t)
    if not np.all(np.isfinite(h)) or np.any(h < 0):
        raise FloatingPointError("decoded CIR is not finite and nonnegative")
    return CirWaveform(p, grid, h, meta)
