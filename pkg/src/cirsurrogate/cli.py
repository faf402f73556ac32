"""Command-line entry point: ``cirsurrogate <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import pipeline as pl
from .config import load_config
from .net import OutOfDomainWarning

LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cirsurrogate", description="Duct CIR surrogate pipeline")
    sub = ap.add_subparsers(dest="cmd", metavar="{generate,split,fit-codec,train,predict,eval,pipeline}")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="pipeline config JSON")
        return p

    p = add("generate", "sample the design box and solve every channel")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="dataset directory")

    p = add("split", "partition ok samples into train/val/test")
    p.add_argument("--dataset", required=True)
    p.add_argument("--fractions", help="comma separated, e.g. 0.7,0.15,0.15")
    p.add_argument("--seed", type=int)

    p = add("fit-codec", "fit feature standardizer and shape codec on the training split")
    p.add_argument("--dataset", required=True)

    p = add("train", "train the surrogate ensemble")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="model bundle path")
    p.add_argument("--seed", type=int)

    p = add("predict", "predict one CIR")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True, help="JSON file with the 8 channel parameters")
    p.add_argument("--out", required=True, help="output CSV")

    p = add("eval", "score a model on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="report directory")

    p = add("pipeline", "run every stage end to end")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    return ap


def _cfg(args):
    cfg = load_config(args.config)
    over = {}
    for name in ("seed", "workers", "n"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if args.cmd == "pipeline" and args.out:
        over["out"] = args.out
    if args.cmd == "train" and args.seed is not None:
        over["train"] = {**cfg.train.to_dict(), "seed": args.seed}
    if over:
        from .config import PipelineConfig

        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **over})
    return cfg


def _runlog(path) -> pl.RunLog:
    return pl.RunLog(Path(path) / pl.RUN_LOG)


def _warn_line(message, category, filename, lineno, file=None, line=None):
    kind = "out_of_domain" if issubclass(category, OutOfDomainWarning) else category.__name__
    print(json.dumps({"warning": kind, "message": str(message)}), file=sys.stderr)


def run(argv=None) -> int:
    ap = _parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        ap.print_usage(sys.stderr)
        return 2
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.cmd is None:
        ap.print_usage(sys.stderr)
        return 2
    level = os.environ.get("SURROGATE_LOG", "error").lower()
    logging.basicConfig(level=LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.showwarning = _warn_line
    try:
        cfg = _cfg(args)
        if args.cmd == "generate":
            ds = pl.stage_generate(cfg, args.out, _runlog(args.out))
            print(json.dumps({"manifest_hash": ds.manifest_hash, **ds.manifest["counts"]}))
        elif args.cmd == "split":
            fr = cfg.fractions
            if args.fractions:
                try:
                    fr = tuple(float(x) for x in args.fractions.split(","))
                except ValueError:
                    raise ValueError(f"bad --fractions {args.fractions!r}") from None
            ds = pl.stage_split(args.dataset, fr, cfg.seed, _runlog(args.dataset))
            print(json.dumps({"sizes": ds.manifest["splits"]["sizes"]}))
        elif args.cmd == "fit-codec":
            std, codec = pl.stage_fit_codec(cfg, args.dataset, _runlog(args.dataset))
            print(json.dumps({"K": codec.K, "captured_variance": codec.captured_variance}))
        elif args.cmd == "train":
            model = pl.stage_train(cfg, args.dataset, args.out, _runlog(args.dataset))
            print(json.dumps({"model": args.out, **model.meta["metrics"]}))
        elif args.cmd == "predict":
            with open(args.params) as fh:
                params = json.load(fh)
            pl.stage_predict(args.model, params, args.out, _runlog(Path(args.out).parent))
        elif args.cmd == "eval":
            rep = pl.stage_eval(args.model, args.dataset, args.split, args.out, _runlog(args.out))
            print(json.dumps({"n": len(rep.nrmse), "excluded": rep.excluded, **rep.percentiles()}))
        elif args.cmd == "pipeline":
            print(json.dumps(pl.run_pipeline(cfg)))
    except Exception as exc:
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
