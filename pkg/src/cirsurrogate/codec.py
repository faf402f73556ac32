"""Time-warp factorization and weighted-PCA shape codec.

A CIR ``h(t)`` is split into peak amplitude ``A``, peak time ``t_p``, rms
width ``w`` and a unit shape ``y_n(tau)`` with ``tau = (t - t_p)/w`` sampled on
a fixed tau-grid. Shapes are compressed with PCA under the inner product

    <f, g>_w = sum_l w(tau_l) f(tau_l) g(tau_l) / N_tau

where ``w`` is a Gaussian window rescaled to sum to ``N_tau``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

LOSS_WEIGHTS_TAIL = (4.0, 5.0, 3.0)
_MAGIC = b"CIRCODEC"


class DegenerateWaveformError(ValueError):
    pass


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class TauGrid:
    N_tau: int = 1201
    tau_min: float = -4.0
    tau_max: float = 8.0

    def __post_init__(self):
        if self.N_tau < 3 or not self.tau_max > self.tau_min:
            raise ValueError("tau grid needs N_tau >= 3 and tau_max > tau_min")

    @property
    def tau(self) -> np.ndarray:
        return np.linspace(self.tau_min, self.tau_max, self.N_tau)


@dataclass(frozen=True)
class WarpTriplet:
    A: float
    t_p: float
    w: float


def factorize(h, t, tau_grid: TauGrid | None = None):
    """Return ``(WarpTriplet, y_n, truncated)`` for one waveform.

    ``truncated`` is the fraction of ``sum(h)`` lying at times whose tau falls
    outside the grid span.
    """
    tau_grid = tau_grid or TauGrid()
    h = np.asarray(h, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise DegenerateWaveformError("waveform contains non-finite values")
    total = h.sum()
    if not np.any(h > 0) or total <= 0:
        raise DegenerateWaveformError("waveform has no positive samples")
    i = int(np.argmax(h))  # first maximum
    A = float(h[i])
    t_p = float(t[i])
    w = float(np.sqrt(np.sum(h * (t - t_p) ** 2) / total))
    if not w > 0:
        raise DegenerateWaveformError("waveform has zero rms width")
    tau = tau_grid.tau
    y_n = np.interp(t_p + w * tau, t, h / A, left=0.0, right=0.0)
    tau_t = (t - t_p) / w
    outside = (tau_t < tau_grid.tau_min) | (tau_t > tau_grid.tau_max)
    truncated = float(h[outside].sum() / total)
    return WarpTriplet(A, t_p, w), y_n, truncated


def reconstruct(triplet: WarpTriplet, y_n, t, tau_grid: TauGrid | None = None) -> np.ndarray:
    """``A * y_n((t - t_p)/w)`` by linear interpolation, zero off the grid."""
    tau_grid = tau_grid or TauGrid()
    tau_t = (np.asarray(t) - triplet.t_p) / triplet.w
    return triplet.A * np.interp(tau_t, tau_grid.tau, y_n, left=0.0, right=0.0)


def gaussian_weights(tau, sigma_w: float) -> np.ndarray:
    w = np.exp(-((np.asarray(tau) / sigma_w) ** 2))
    if not np.all(w > 0):
        raise CodecError(f"sigma_w={sigma_w} underflows the weight window on this tau grid")
    return w * (len(w) / w.sum())


@dataclass(frozen=True)
class ShapeBasis:
    weights: np.ndarray
    mu: np.ndarray
    basis: np.ndarray  # K x N_tau
    explained: np.ndarray  # cumulative weighted-variance fraction per component

    @property
    def K(self) -> int:
        return self.basis.shape[0]

    def project(self, shapes) -> np.ndarray:
        n_tau = len(self.weights)
        return ((np.atleast_2d(shapes) - self.mu) * self.weights) @ self.basis.T / n_tau

    def expand(self, coefs) -> np.ndarray:
        return self.mu + np.atleast_2d(coefs) @ self.basis


def fit_shape_basis(shapes, weights, variance_target: float = 0.995, K_max: int | None = None) -> ShapeBasis:
    """Weighted PCA via SVD of residuals scaled by ``sqrt(weights/N_tau)``."""
    Y = np.asarray(shapes, dtype=np.float64)
    n, n_tau = Y.shape
    if n < 2:
        raise CodecError("need at least two shapes to fit a basis")
    weights = np.asarray(weights, dtype=np.float64)
    scale = np.sqrt(weights / n_tau)
    mu = Y.mean(axis=0)
    R = (Y - mu) * scale
    _, S, Vt = np.linalg.svd(R, full_matrices=False)
    var = S**2
    total = var.sum()
    if total > 0:
        cum = np.cumsum(var) / total
        K = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    else:
        cum = np.ones_like(var)
        K = 1
    K = max(K, 1)
    limit = min(n - 1, n_tau) if K_max is None else K_max
    if K > n_tau:
        raise CodecError(f"K={K} exceeds the tau-grid length {n_tau}")
    if K > limit or K > Vt.shape[0]:
        raise CodecError(f"{n} shapes cannot support K={K} components")
    basis = Vt[:K] / scale
    return ShapeBasis(weights, mu, basis, cum[:K])


@dataclass(frozen=True)
class ShapeCodec:
    tau_grid: TauGrid
    sigma_w: float
    shape: ShapeBasis
    mu_Y: np.ndarray
    sigma_Y: np.ndarray
    train_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.shape.K

    @property
    def m(self) -> int:
        return self.K + 3

    @property
    def W_loss(self) -> np.ndarray:
        return np.concatenate([np.ones(self.K), LOSS_WEIGHTS_TAIL])

    @property
    def captured_variance(self) -> float:
        return float(self.shape.explained[-1])

    # target space ------------------------------------------------------------

    def raw_target(self, h, t) -> np.ndarray:
        trip, y_n, _ = factorize(h, t, self.tau_grid)
        c = self.shape.project(y_n)[0]
        return np.concatenate([c, [np.log(trip.A), trip.t_p, np.log(trip.w)]])

    def standardize(self, raw) -> np.ndarray:
        return (np.asarray(raw) - self.mu_Y) / self.sigma_Y * self.W_loss

    def unstandardize(self, target) -> np.ndarray:
        return np.asarray(target) / self.W_loss * self.sigma_Y + self.mu_Y

    def encode(self, h, t) -> np.ndarray:
        return self.standardize(self.raw_target(h, t))

    def decode(self, target, t) -> np.ndarray:
        target = np.asarray(target, dtype=np.float64)
        if target.shape != (self.m,) or not np.all(np.isfinite(target)):
            raise CodecError(f"decode needs a finite target of length {self.m}")
        raw = self.unstandardize(target)
        y_n = self.shape.expand(raw[: self.K])[0]
        trip = WarpTriplet(float(np.exp(raw[self.K])), float(raw[self.K + 1]), float(np.exp(raw[self.K + 2])))
        h = reconstruct(trip, y_n, t, self.tau_grid)
        return np.maximum(h, 0.0)

    # serialization -------------------------------------------------------------

    def header(self) -> dict:
        return {
            "N_tau": self.tau_grid.N_tau,
            "tau_min": self.tau_grid.tau_min,
            "tau_max": self.tau_grid.tau_max,
            "sigma_w": self.sigma_w,
            "K": self.K,
            "mu_Y": [float(v) for v in self.mu_Y],
            "sigma_Y": [float(v) for v in self.sigma_Y],
            "W_loss": [float(v) for v in self.W_loss],
            "explained": [float(v) for v in self.shape.explained],
            "train_hash": self.train_hash,
            **self.extra,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        blocks = [self.shape.weights, self.shape.mu, self.shape.basis.ravel()]
        body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
        return _MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ShapeCodec":
        if data[:8] != _MAGIC:
            raise CodecError("not a codec bundle")
        (n,) = struct.unpack("<I", data[8:12])
        head = json.loads(data[12 : 12 + n])
        arr = np.frombuffer(data[12 + n :], dtype="<f8").astype(np.float64)
        N, K = head["N_tau"], head["K"]
        if arr.size != 2 * N + K * N:
            raise CodecError("codec bundle body has the wrong size")
        weights, mu, basis = arr[:N], arr[N : 2 * N], arr[2 * N :].reshape(K, N)
        known = {"N_tau", "tau_min", "tau_max", "sigma_w", "K", "mu_Y", "sigma_Y", "W_loss",
                 "explained", "train_hash"}
        return cls(
            TauGrid(N, head["tau_min"], head["tau_max"]),
            head["sigma_w"],
            ShapeBasis(weights, mu, basis, np.array(head["explained"])),
            np.array(head["mu_Y"]),
            np.array(head["sigma_Y"]),
            head.get("train_hash", ""),
            {k: v for k, v in head.items() if k not in known},
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ShapeCodec":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def fit_codec(waveforms, t, sigma_w: float = 2.0, variance_target: float = 0.995,
              tau_grid: TauGrid | None = None, train_hash: str = "") -> ShapeCodec:
    """Fit shape basis and target statistics on training waveforms (rows of ``waveforms``)."""
    tau_grid = tau_grid or TauGrid()
    H = np.asarray(waveforms, dtype=np.float64)
    trips, shapes, trunc = [], [], []
    for h in H:
        tr, y_n, frac = factorize(h, t, tau_grid)
        trips.append(tr)
        shapes.append(y_n)
        trunc.append(frac)
    shapes = np.array(shapes)
    weights = gaussian_weights(tau_grid.tau, sigma_w)
    sb = fit_shape_basis(shapes, weights, variance_target)
    coefs = sb.project(shapes)
    raw = np.column_stack([
        coefs,
        np.log([tr.A for tr in trips]),
        [tr.t_p for tr in trips],
        np.log([tr.w for tr in trips]),
    ])
    mu_Y = raw.mean(axis=0)
    sigma_Y = raw.std(axis=0)
    sigma_Y = np.where(sigma_Y > 0, sigma_Y, 1.0)
    extra = {"max_truncation": float(max(trunc)), "n_train": int(len(H))}
    return ShapeCodec(tau_grid, float(sigma_w), sb, mu_Y, sigma_Y, train_hash, extra)
