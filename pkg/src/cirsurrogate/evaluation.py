"""NRMSE statistics, empirical CDF, per-parameter correlations and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PARAM_NAMES, ChannelParams


class EvaluationError(ValueError):
    pass


def nrmse(h_ref, h_pred) -> float:
    h_ref = np.asarray(h_ref, dtype=np.float64)
    h_pred = np.asarray(h_pred, dtype=np.float64)
    if h_ref.shape != h_pred.shape:
        raise EvaluationError(f"length mismatch {h_ref.shape} vs {h_pred.shape}")
    e = math.sqrt(float(np.sum(h_ref**2)))
    if e == 0.0:
        raise EvaluationError("reference waveform has zero energy")
    return math.sqrt(float(np.sum((h_pred - h_ref) ** 2))) / e


@dataclass(frozen=True)
class Ecdf:
    values: np.ndarray
    fractions: np.ndarray

    def percentile(self, q: float) -> float:
        """Lowest value whose empirical fraction is at least ``q``."""
        i = int(np.searchsorted(self.fractions, q - 1e-12, side="left"))
        return float(self.values[min(i, len(self.values) - 1)])


def ecdf(values) -> Ecdf:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise EvaluationError("ecdf needs at least one value")
    n = v.size
    return Ecdf(v, np.arange(1, n + 1) / n)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise EvaluationError("pearson needs two equal-length inputs of length >= 3")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise EvaluationError("pearson is undefined for a constant input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass
class EvalReport:
    indices: np.ndarray
    params: np.ndarray
    nrmse: np.ndarray
    excluded: int = 0
    correlations: dict = field(default_factory=dict)

    @property
    def cdf(self) -> Ecdf:
        return ecdf(self.nrmse)

    def percentiles(self, qs=(0.5, 0.9, 0.95)) -> dict:
        c = self.cdf
        return {f"p{int(round(q * 100))}": c.percentile(q) for q in qs}


def correlation_table(params, errors) -> dict:
    params = np.asarray(params, dtype=np.float64)
    out = {}
    for k, name in enumerate(PARAM_NAMES):
        col = params[:, k]
        try:
            r = pearson(col, errors)
        except EvaluationError:
            r = None
        out[name] = (float(col.mean()), r)
    return out


def evaluate(model, indices, params, H, out=None, grid=None) -> EvalReport:
    """Score ``model`` on the given samples; zero-energy references are excluded and counted."""
    from .net import predict_cir

    indices = np.asarray(indices)
    if len(indices) == 0:
        raise EvaluationError("empty evaluation split")
    keep, errs = [], []
    for k in range(len(indices)):
        h = H[k]
        if not np.any(h > 0):
            continue
        pred = predict_cir(model, ChannelParams.from_array(params[k]), grid)
        keep.append(k)
        errs.append(nrmse(h, pred.h))
    keep = np.array(keep, dtype=np.int64)
    rep = EvalReport(indices[keep], np.asarray(params)[keep], np.array(errs), len(indices) - len(keep))
    rep.correlations = correlation_table(rep.params, rep.nrmse) if len(keep) >= 3 else {}
    if out is not None:
        write_report(rep, out)
    return rep


def _svg(c: Ecdf, q: float = 0.9) -> str:
    W, Hh, m = 480, 320, 48
    xmax = float(c.values[-1]) * 1.05 or 1.0

    def X(v):
        return m + (W - 2 * m) * v / xmax

    def Y(f):
        return Hh - m - (Hh - 2 * m) * f

    pts = [(X(0.0), Y(0.0))]
    prev = 0.0
    for v, f in zip(c.values, c.fractions):
        pts.append((X(v), Y(prev)))
        pts.append((X(v), Y(f)))
        prev = f
    poly = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
    xq = X(c.percentile(q))
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}">',
        f'<rect x="0" y="0" width="{W}" height="{Hh}" fill="white"/>',
        f'<line x1="{m}" y1="{Hh - m}" x2="{W - m}" y2="{Hh - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{Hh - m}" x2="{m}" y2="{m}" stroke="black"/>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{poly}"/>',
        f'<line x1="{m}" y1="{Y(q):.2f}" x2="{xq:.2f}" y2="{Y(q):.2f}" stroke="gray" stroke-dasharray="4,3"/>',
        f'<line x1="{xq:.2f}" y1="{Y(q):.2f}" x2="{xq:.2f}" y2="{Hh - m}" stroke="gray" stroke-dasharray="4,3"/>',
        f'<text x="{W / 2}" y="{Hh - 12}" text-anchor="middle" font-size="12">NRMSE</text>',
        f'<text x="14" y="{Hh / 2}" font-size="12" transform="rotate(-90 14 {Hh / 2})" text-anchor="middle">CDF</text>',
        f'<text x="{xq + 4:.2f}" y="{Y(q) - 4:.2f}" font-size="11">{c.percentile(q):.3f}</text>',
        "</svg>",
    ])


def write_report(rep: EvalReport, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", *PARAM_NAMES, "nrmse"])
        for i, p, e in zip(rep.indices, rep.params, rep.nrmse):
            w.writerow([int(i), *(f"{v:.10e}" for v in p), f"{e:.10e}"])
    c = rep.cdf
    with open(out / "cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "fraction"])
        for v, f in zip(c.values, c.fractions):
            w.writerow([f"{v:.10e}", f"{f:.10f}"])
    with open(out / "correlations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ParamName", "ParamMean", "CorrWithNRMSE"])
        for name in PARAM_NAMES:
            mean, r = rep.correlations[name]
            w.writerow([name, f"{mean:.6e}", "n/a" if r is None else f"{r:.6f}"])
    (out / "cdf.svg").write_text(_svg(c))
    return out
