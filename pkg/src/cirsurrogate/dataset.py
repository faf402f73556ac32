"""Design-box sampling, parallel CIR generation, and the on-disk waveform store."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PARAM_NAMES, ChannelParams, FixedGeometry, TimeGrid, validate_params
from .solver import Mesh, solve_cir

log = logging.getLogger(__name__)

FORMAT_TAG = b"CIRW"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
ALL_FILE = "all.bin"
MANIFEST = "manifest.json"
BUDGET_LOG = "budget.csv"

OK, ZERO, FAILED = "ok", "zero", "failed"


class DatasetError(RuntimeError):
    pass


class GenerationError(DatasetError):
    pass


@dataclass(frozen=True)
class Range:
    low: float
    high: float
    scale: str = "uniform"

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"range needs low < high, got [{self.low}, {self.high}]")
        if self.scale not in ("uniform", "log-uniform"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.scale == "log-uniform" and self.low <= 0:
            raise ValueError("log-uniform range needs low > 0")

    def draw(self, u):
        if self.scale == "uniform":
            return self.low + (self.high - self.low) * u
        a, b = math.log(self.low), math.log(self.high)
        return np.exp(a + (b - a) * u)

    @property
    def mean(self) -> float:
        if self.scale == "uniform":
            return 0.5 * (self.low + self.high)
        return (self.high - self.low) / math.log(self.high / self.low)

    @property
    def std(self) -> float:
        if self.scale == "uniform":
            return (self.high - self.low) / math.sqrt(12.0)
        second = (self.high**2 - self.low**2) / (2.0 * math.log(self.high / self.low))
        return math.sqrt(second - self.mean**2)

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high


_DEFAULT_RANGES = {
    "D": Range(5e-10, 2e-9, "log-uniform"),
    "v_bar": Range(1e-3, 3e-3),
    "kappa": Range(0.0, 1.0),
    "k_f": Range(1e-6, 5e-6, "log-uniform"),
    "k_r": Range(5e-2, 5e-1, "log-uniform"),
    "B_tot": Range(1e15, 1e16, "log-uniform"),
    "z_rx": Range(150e-6, 300e-6),
    "ell_z": Range(10e-6, 40e-6),
}


@dataclass(frozen=True)
class DesignBox:
    ranges: dict = field(default_factory=lambda: dict(_DEFAULT_RANGES))

    def __post_init__(self):
        if set(self.ranges) != set(PARAM_NAMES):
            raise ValueError(f"design box needs exactly {PARAM_NAMES}")

    def __getitem__(self, name) -> Range:
        return self.ranges[name]

    def outside(self, p: ChannelParams) -> list[str]:
        return [n for n in PARAM_NAMES if not self.ranges[n].contains(getattr(p, n))]

    def to_dict(self) -> dict:
        return {n: {"low": r.low, "high": r.high, "scale": r.scale}
                for n, r in ((n, self.ranges[n]) for n in PARAM_NAMES)}

    @classmethod
    def from_dict(cls, data: dict) -> "DesignBox":
        ranges = dict(_DEFAULT_RANGES)
        for n, r in (data or {}).items():
            if n not in ranges:
                raise ValueError(f"unknown parameter {n!r} in design box")
            ranges[n] = Range(float(r["low"]), float(r["high"]), r.get("scale", "uniform"))
        return cls(ranges)


def sample_params(box: DesignBox, n: int, seed: int) -> list[ChannelParams]:
    """i.i.d. draws from ``box``; the last draw gets kappa = 0."""
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    U = rng.random((n, len(PARAM_NAMES)))
    cols = [box[name].draw(U[:, k]) for k, name in enumerate(PARAM_NAMES)]
    X = np.column_stack(cols)
    X[-1, PARAM_NAMES.index("kappa")] = 0.0
    return [ChannelParams.from_array(row) for row in X]


# hashing ---------------------------------------------------------------------


def rounded(a) -> np.ndarray:
    """Round to ~1e-10 relative precision (33 mantissa bits) so hashes survive last-bit noise."""
    a = np.asarray(a, dtype=np.float64)
    m, e = np.frexp(a)
    return np.ldexp(np.round(m * 2.0**33) / 2.0**33, e)


def array_hash(a) -> str:
    r = np.ascontiguousarray(rounded(a), dtype="<f8")
    h = hashlib.sha256(str(r.shape).encode())
    h.update(np.nan_to_num(r, nan=-1.0).tobytes())
    h.update(np.isnan(r).tobytes())
    return h.hexdigest()


def json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def index_hash(idx) -> str:
    return hashlib.sha256(np.asarray(idx, dtype="<i8").tobytes()).hexdigest()


# waveform store --------------------------------------------------------------


def write_store(path, params, H):
    params = np.asarray(params, dtype=np.float64).reshape(-1, len(PARAM_NAMES))
    H = np.asarray(H, dtype=np.float64).reshape(len(params), -1)
    n_s = H.shape[1]
    with open(path, "wb") as fh:
        fh.write(FORMAT_TAG + struct.pack("<IQ", FORMAT_VERSION, n_s))
        fh.write(np.ascontiguousarray(np.hstack([params, H]), dtype="<f8").tobytes())


def read_store(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != FORMAT_TAG:
            raise DatasetError(f"{path}: not a waveform store")
        version, n_s = struct.unpack("<IQ", head[4:])
        if version != FORMAT_VERSION:
            raise DatasetError(f"{path}: unsupported store version {version}")
        body = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    width = len(PARAM_NAMES) + n_s
    if body.size % width:
        raise DatasetError(f"{path}: truncated store")
    rows = body.reshape(-1, width)
    return rows[:, : len(PARAM_NAMES)].copy(), rows[:, len(PARAM_NAMES):].copy()


def file_hash(path) -> str:
    params, H = read_store(path)
    return array_hash(np.hstack([params, H]) if len(params) else np.zeros((0, 1)))


# generation ------------------------------------------------------------------


def _solve_one(job):
    k, row, g, grid, mesh = job
    p = ChannelParams.from_array(row)
    try:
        wf = solve_cir(p, g, grid, mesh)
    except Exception as exc:  # recorded per sample, never dropped
        return k, FAILED, None, f"{type(exc).__name__}: {exc}", None
    h = wf.h
    status = OK if np.any(h > 0) else ZERO
    return k, status, h, "", wf.meta.get("final_budget")


def _init_worker():
    from .solver import _kernels

    _kernels.warmup()


@dataclass
class Dataset:
    manifest: dict
    params: np.ndarray
    H: np.ndarray
    root: Path | None = None

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_dict(self.manifest["grid"])

    @property
    def geometry(self) -> FixedGeometry:
        return FixedGeometry.from_dict(self.manifest["geometry"])

    @property
    def box(self) -> DesignBox:
        return DesignBox.from_dict(self.manifest["box"])

    @property
    def status(self) -> list[str]:
        return [s["status"] for s in self.manifest["samples"]]

    @property
    def ok_indices(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.status) if s == OK], dtype=np.int64)

    def split_indices(self, name: str) -> np.ndarray:
        splits = self.manifest.get("splits")
        if not splits:
            raise DatasetError("dataset has not been split")
        return np.asarray(splits[name], dtype=np.int64)

    def subset(self, name: str):
        idx = self.split_indices(name)
        return idx, self.params[idx], self.H[idx]

    @property
    def manifest_hash(self) -> str:
        return self.manifest["manifest_hash"]


def _seal(manifest: dict) -> dict:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    manifest["manifest_hash"] = json_hash(body)
    return manifest


def generate(box: DesignBox, n: int, grid: TimeGrid | None = None, mesh: Mesh | None = None,
             seed: int = 0, workers: int = 1, out=None, max_fail: float = 0.01) -> Dataset:
    """Solve ``n`` sampled channels and (if ``out`` is given) write the store and manifest."""
    grid = grid or TimeGrid()
    mesh = mesh or Mesh()
    g = mesh.geometry
    draws = sample_params(box, n, seed)
    for p in draws:
        validate_params(p, g)
    params = np.array([p.as_array() for p in draws]).reshape(-1, len(PARAM_NAMES))
    H = np.full((n, grid.N_s), np.nan)
    samples = [None] * n
    budgets = [None] * n
    jobs = [(k, params[k], g, grid, mesh) for k in range(n)]
    t0 = time.perf_counter()
    if workers > 1 and n > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker) as pool:
            results = pool.imap(_solve_one, jobs, chunksize=1)
            for k, status, h, msg, b in results:
                _collect(k, status, h, msg, b, H, samples, budgets)
    else:
        for job in jobs:
            _collect(*_solve_one(job), H, samples, budgets)
    n_fail = sum(s["status"] == FAILED for s in samples)
    if n and n_fail > max_fail * n:
        msgs = "; ".join(f"#{s['index']}: {s['message']}" for s in samples if s["status"] == FAILED)
        raise GenerationError(f"{n_fail}/{n} solves failed ({msgs[:500]})")
    log.info("generated %d samples in %.1f s (%d failed)", n, time.perf_counter() - t0, n_fail)
    manifest = {
        "seed": int(seed),
        "n": int(n),
        "box": box.to_dict(),
        "geometry": g.to_dict(),
        "grid": grid.to_dict(),
        "mesh": mesh.to_dict(),
        "samples": samples,
        "counts": {s: sum(x["status"] == s for x in samples) for s in (OK, ZERO, FAILED)},
        "hashes": {},
        "splits": None,
    }
    ds = Dataset(manifest, params, H)
    if out is not None:
        save(ds, out, budgets=budgets)
    else:
        manifest["hashes"][ALL_FILE] = array_hash(np.hstack([params, H])) if n else None
        _seal(manifest)
    return ds


def _collect(k, status, h, msg, b, H, samples, budgets):
    if h is not None:
        H[k] = h
    samples[k] = {"index": int(k), "status": status, "message": msg}
    budgets[k] = b


def _write_budget_log(path, budgets):
    with open(path, "w") as fh:
        fh.write("index,bulk,bound,degraded,outflow,defect\n")
        for k, b in enumerate(budgets):
            if b is None:
                fh.write(f"{k},,,,,\n")
                continue
            total = sum(b[key] for key in ("bulk", "bound", "degraded", "outflow"))
            fh.write(f"{k},{b['bulk']:.12e},{b['bound']:.12e},{b['degraded']:.12e},"
                     f"{b['outflow']:.12e},{total - 1.0:.3e}\n")


def save(ds: Dataset, out, budgets=None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    if ds.manifest["n"]:
        write_store(out / ALL_FILE, ds.params, ds.H)
        hashes[ALL_FILE] = file_hash(out / ALL_FILE)
        if ds.manifest.get("splits"):
            for name in SPLITS:
                idx = ds.split_indices(name)
                write_store(out / f"{name}.bin", ds.params[idx], ds.H[idx])
                hashes[f"{name}.bin"] = file_hash(out / f"{name}.bin")
        if budgets is not None:
            _write_budget_log(out / BUDGET_LOG, budgets)
    ds.manifest["hashes"] = hashes
    _seal(ds.manifest)
    with open(out / MANIFEST, "w") as fh:
        json.dump(ds.manifest, fh, indent=1, sort_keys=True)
    ds.root = out
    return out


def load(root) -> Dataset:
    root = Path(root)
    try:
        with open(root / MANIFEST) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"no dataset manifest in {root}") from None
    n = manifest["n"]
    if n:
        params, H = read_store(root / ALL_FILE)
        if len(params) != n:
            raise DatasetError(f"{root}: manifest lists {n} samples, store holds {len(params)}")
        for name, digest in manifest["hashes"].items():
            if file_hash(root / name) != digest:
                raise DatasetError(f"{root / name}: content hash mismatch")
    else:
        params = np.zeros((0, len(PARAM_NAMES)))
        H = np.zeros((0, manifest["grid"]["N_s"]))
    expect = json_hash({k: v for k, v in manifest.items() if k != "manifest_hash"})
    if manifest.get("manifest_hash") != expect:
        raise DatasetError(f"{root}: manifest hash mismatch")
    return Dataset(manifest, params, H, root)


def split_indices(ok, fractions=(0.70, 0.15, 0.15), seed: int = 0):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    ok = np.asarray(ok, dtype=np.int64)
    if len(ok) < 10:
        raise DatasetError(f"need at least 10 ok samples to split, have {len(ok)}")
    perm = ok[np.random.default_rng(seed).permutation(len(ok))]
    n_val = int(math.floor(fractions[1] * len(ok) + 1e-9))
    n_test = int(math.floor(fractions[2] * len(ok) + 1e-9))
    n_train = len(ok) - n_val - n_test
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train : n_train + n_val])
    test = np.sort(perm[n_train + n_val :])
    return train, val, test


def split(ds: Dataset, fractions=(0.70, 0.15, 0.15), seed: int = 0, out=None):
    """Seeded partition of the ok samples; recorded in the manifest (and on disk if ``out``)."""
    train, val, test = split_indices(ds.ok_indices, fractions, seed)
    ds.manifest["splits"] = {
        "seed": int(seed),
        "fractions": [float(f) for f in fractions],
        "train": train.tolist(),
        "val": val.tolist(),
        "test": test.tolist(),
        "sizes": [len(train), len(val), len(test)],
    }
    out = out if out is not None else ds.root
    if out is not None:
        save(ds, out)
    else:
        _seal(ds.manifest)
    return train, val, test


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
