"""Pipeline stages with a content-addressed JSON-lines run log.

Every stage appends ``{stage, inputs, outputs, wall_time}`` to the run log.
Input and output digests are computed on values rounded to ~1e-10 relative,
so two runs with the same seed produce the same digests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import dataset as dio
from .codec import ShapeCodec, fit_codec
from .config import PipelineConfig
from .core import PARAM_NAMES, ChannelParams, TimeGrid
from .evaluation import EvalReport, evaluate
from .features import FeatureStandardizer, feature_matrix, fit_standardizer
from .net import SurrogateModel, predict_cir, train

log = logging.getLogger(__name__)

CODEC_FILE = "codec.bin"
FEATURES_FILE = "features.json"
FIT_FILE = "fit.json"
RUN_LOG = "run.jsonl"


class StageError(RuntimeError):
    pass


class HashMismatch(StageError):
    pass


def codec_digest(c: ShapeCodec) -> str:
    arrays = [c.shape.weights, c.shape.mu, c.shape.basis.ravel(), c.mu_Y, c.sigma_Y]
    return dio.array_hash(np.concatenate(arrays))


def standardizer_digest(s: FeatureStandardizer) -> str:
    return dio.array_hash(np.concatenate([s.log_mask.astype(float), s.mu_X, s.sigma_X]))


def model_digest(m: SurrogateModel) -> str:
    blocks = [v.ravel() for net in m.ensemble.members for v in net.params.values()]
    return dio.array_hash(np.concatenate(blocks))


def _digest(*parts) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()


class RunLog:
    def __init__(self, path):
        self.path = Path(path)

    def record(self, stage: str, inputs: str, outputs: str, wall: float, **extra):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        rec = {"stage": stage, "inputs": inputs, "outputs": outputs, "wall_time": round(wall, 3), **extra}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log.info("stage %s done in %.1f s", stage, wall)

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def run_log_hash(path) -> str:
    """Digest of the run log ignoring wall times."""
    recs = [{k: v for k, v in r.items() if k != "wall_time"} for r in RunLog(path).records()]
    return hashlib.sha256(json.dumps(recs, sort_keys=True).encode()).hexdigest()


# stages ------------------------------------------------------------------------


def stage_generate(cfg: PipelineConfig, out, runlog: RunLog | None = None, n=None, seed=None, workers=None):
    t0 = time.perf_counter()
    n = cfg.n if n is None else n
    seed = cfg.seed if seed is None else seed
    workers = cfg.workers if workers is None else workers
    ds = dio.generate(cfg.box, n, cfg.grid, cfg.solver_mesh(), seed, workers, out)
    if runlog:
        inputs = dio.json_hash({"box": cfg.box.to_dict(), "grid": cfg.grid.to_dict(), "mesh": cfg.mesh,
                                "geometry": cfg.geometry.to_dict(), "n": n, "seed": seed})
        runlog.record("generate", inputs, ds.manifest_hash, time.perf_counter() - t0,
                      counts=ds.manifest["counts"])
    return ds


def stage_split(dataset_dir, fractions, seed, runlog: RunLog | None = None):
    t0 = time.perf_counter()
    ds = dio.load(dataset_dir)
    before = ds.manifest_hash
    dio.split(ds, fractions, seed, out=dataset_dir)
    if runlog:
        runlog.record("split", _digest(before, list(fractions), seed), ds.manifest_hash,
                      time.perf_counter() - t0, sizes=ds.manifest["splits"]["sizes"])
    return ds


def stage_fit_codec(cfg: PipelineConfig, dataset_dir, runlog: RunLog | None = None):
    """Fit feature standardizer and codec on the training split only."""
    t0 = time.perf_counter()
    root = Path(dataset_dir)
    ds = dio.load(root)
    idx, params, H = ds.subset("train")
    keep = np.any(H > 0, axis=1)
    idx, params, H = idx[keep], params[keep], H[keep]
    train_hash = dio.index_hash(idx)
    std = fit_standardizer(feature_matrix(params, ds.geometry), train_hash, box_log_mask(ds.box, ds.geometry))
    cc = cfg.codec
    codec = fit_codec(H, ds.grid.t, cc.sigma_w, cc.variance_target, cc.tau_grid, train_hash)
    codec.extra["manifest_hash"] = ds.manifest_hash
    codec.save(root / CODEC_FILE)
    (root / FEATURES_FILE).write_text(json.dumps(std.to_dict(), indent=1, sort_keys=True))
    fit = {"manifest_hash": ds.manifest_hash, "train_index_hash": train_hash,
           "codec_hash": codec.content_hash(), "standardizer_hash": std.content_hash(), "K": codec.K}
    (root / FIT_FILE).write_text(json.dumps(fit, indent=1, sort_keys=True))
    if runlog:
        runlog.record("fit-codec", ds.manifest_hash, _digest(codec_digest(codec), standardizer_digest(std)),
                      time.perf_counter() - t0, K=codec.K)
    return std, codec


def box_log_mask(box, g) -> np.ndarray:
    """Features strictly positive at the box's lower corner.

    Every feature is a product or ratio of parameters, so it can only reach
    zero inside the box through a parameter whose lower bound is zero.
    """
    corner = np.array([box[n].low for n in PARAM_NAMES])
    return feature_matrix([corner], g)[0] > 0


def load_fit(dataset_dir):
    root = Path(dataset_dir)
    try:
        fit = json.loads((root / FIT_FILE).read_text())
        codec = ShapeCodec.load(root / CODEC_FILE)
        std = FeatureStandardizer.from_dict(json.loads((root / FEATURES_FILE).read_text()))
    except FileNotFoundError as exc:
        raise StageError(f"codec not fitted for {root} ({exc.filename} missing)") from None
    if codec.content_hash() != fit["codec_hash"] or std.content_hash() != fit["standardizer_hash"]:
        raise HashMismatch(f"{root}: codec or standardizer file does not match fit record")
    return fit, std, codec


def _targets(codec: ShapeCodec, std: FeatureStandardizer, ds: dio.Dataset, name: str):
    idx, params, H = ds.subset(name)
    keep = np.any(H > 0, axis=1)
    X = std.transform(feature_matrix(params[keep], ds.geometry))
    Y = np.array([codec.encode(h, ds.grid.t) for h in H[keep]])
    return X, Y


def stage_train(cfg: PipelineConfig, dataset_dir, out, runlog: RunLog | None = None):
    t0 = time.perf_counter()
    ds = dio.load(dataset_dir)
    fit, std, codec = load_fit(dataset_dir)
    if fit["manifest_hash"] != ds.manifest_hash:
        raise HashMismatch(f"dataset manifest {ds.manifest_hash[:12]} differs from the one the codec was "
                           f"fitted on ({fit['manifest_hash'][:12]}); rerun fit-codec")
    idx, _, H = ds.subset("train")
    if dio.index_hash(idx[np.any(H > 0, axis=1)]) != fit["train_index_hash"]:
        raise HashMismatch("training indices differ from the ones the codec was fitted on")
    X, Y = _targets(codec, std, ds, "train")
    Xv, Yv = _targets(codec, std, ds, "val")
    ens, hists = train(X, Y, Xv, Yv, cfg.train)
    model = SurrogateModel(ens, std, codec, ds.box, ds.grid, cfg.train, {
        "manifest_hash": ds.manifest_hash,
        "history": hists,
        "metrics": {"best_val": [h["best_val"] for h in hists], "best_epoch": [h["best_epoch"] for h in hists]},
    })
    model.save(out)
    if runlog:
        runlog.record("train", _digest(ds.manifest_hash, codec_digest(codec), standardizer_digest(std)),
                      model_digest(model), time.perf_counter() - t0)
    return model


def stage_eval(model_path, dataset_dir, split: str, out, runlog: RunLog | None = None) -> EvalReport:
    t0 = time.perf_counter()
    model = SurrogateModel.load(model_path)
    ds = dio.load(dataset_dir)
    idx, params, H = ds.subset(split)
    rep = evaluate(model, idx, params, H, out, ds.grid)
    if runlog:
        runlog.record("eval", _digest(model_digest(model), ds.manifest_hash, split), dio.array_hash(rep.nrmse),
                      time.perf_counter() - t0, excluded=rep.excluded, **rep.percentiles())
    return rep


def stage_predict(model_path, params: dict, out, runlog: RunLog | None = None, grid: TimeGrid | None = None):
    t0 = time.perf_counter()
    model = SurrogateModel.load(model_path)
    p = ChannelParams.from_dict(params)
    wf = predict_cir(model, p, grid)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("t,h\n")
        for t, h in zip(wf.grid.t, wf.h):
            fh.write(f"{t:.10e},{h:.10e}\n")
    if runlog:
        runlog.record("predict", _digest(model_digest(model), dio.array_hash(p.as_array())),
                      dio.array_hash(wf.h), time.perf_counter() - t0)
    return wf


def run_pipeline(cfg: PipelineConfig, out=None) -> dict:
    """generate -> split -> fit-codec -> train -> eval into ``out``."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out / RUN_LOG)
    data = out / "dataset"
    stage_generate(cfg, data, runlog)
    stage_split(data, cfg.fractions, cfg.seed, runlog)
    stage_fit_codec(cfg, data, runlog)
    model_path = out / "model.bundle"
    stage_train(cfg, data, model_path, runlog)
    rep = stage_eval(model_path, data, "test", out / "report", runlog)
    return {"out": str(out), "run_log": str(runlog.path), "run_log_hash": run_log_hash(runlog.path),
            **rep.percentiles()}
