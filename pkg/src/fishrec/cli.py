"""Command-line entry point: ``fishrec {synth,train,predict,evaluate,saliency,benchmark,sweep}``.

Exit codes: 0 success, 2 invalid configuration, 3 missing or unreadable data,
4 numerical failure.  Failures print one ``error: <kind>: <message>`` line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import HARD_SYNTH, ConfigError, PipelineConfig, load_config

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("fishrec")


class DataError(RuntimeError):
    pass


def _config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "hard", False):
        cfg = cfg.with_overrides(**HARD_SYNTH)
    return cfg.with_overrides(seed=getattr(args, "seed", None), workers=getattr(args, "workers", None))


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_samples(root):
    from .imaging import load_dataset
    root = _require(root, "dataset directory")
    _require(root / "labels.csv", "labels file")
    try:
        return load_dataset(root)
    except (FileNotFoundError, OSError) as err:
        raise DataError(str(err)) from None


def cmd_synth(args) -> int:
    from .synthgen import gen_dataset
    cfg = _config(args)
    out = gen_dataset(cfg.gen_config(), args.out)
    log.info("synthetic dataset written to %s", out)
    return 0


def cmd_train(args) -> int:
    from .modelfile import save_model
    from .pipeline import train_pipeline
    cfg = _config(args)
    samples = _load_samples(args.dataset)
    trained = train_pipeline(samples, cfg)
    save_model(trained, args.out)
    log.info("model written to %s (C=%g, %d part iterations)", args.out, trained.c,
             trained.model.iterations)
    return 0


def cmd_predict(args) -> int:
    from .evaluation import trajectory_vote, write_predictions
    from .modelfile import load_model
    from .pipeline import leaf_paths, predict_records
    trained = load_model(_require(args.model, "model file"))
    workers = args.workers or trained.config.workers
    samples = _load_samples(args.dataset)
    records = predict_records(trained, samples, workers)
    if trained.config.vote:
        records = trajectory_vote(records, leaf_paths(trained.tree))
    write_predictions(args.out, records)
    return 0


def cmd_evaluate(args) -> int:
    from dataclasses import replace

    from .evaluation import compute_metrics, read_predictions
    from .imaging import read_labels
    records = read_predictions(_require(args.predictions, "predictions file"))
    if args.labels:
        truth = {Path(r["filename"]).stem: r["species"]
                 for r in read_labels(_require(args.labels, "labels file"))}
        missing = [r.sample_id for r in records if r.sample_id not in truth]
        if missing:
            raise DataError(f"no label for samples: {', '.join(missing[:5])}")
        records = [replace(r, true_species=truth[r.sample_id]) for r in records]
    report = compute_metrics(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    (out / "confusion.csv").write_text(report.confusion_csv())
    sys.stdout.write(report.to_text())
    return 0


def cmd_saliency(args) -> int:
    from .imaging import read_image, read_mask
    from .saliency import dump_debug, nonmax_suppress, pft_saliency
    cfg = _config(args)
    image = read_image(_require(args.image, "image"))
    sal = pft_saliency(image, cfg.saliency_config())
    mask = read_mask(_require(args.mask, "mask")) if args.mask else np.ones(sal.shape, bool)
    if mask.shape != sal.shape:
        raise DataError("mask and image sizes differ")
    peaks = nonmax_suppress(sal, mask, cfg.saliency_config())
    out = Path(args.out)
    dump_debug(sal, peaks, out, out.with_suffix(".csv"))
    return 0


def cmd_benchmark(args) -> int:
    from .imaging import Sample
    from .pipeline import run_benchmark
    from .synthgen import generate
    cfg = _config(args)
    samples = _load_samples(args.dataset) if args.dataset else \
        [Sample(*row) for row in generate(cfg.gen_config())]
    res = run_benchmark(samples, cfg)
    summary = {k: v for k, v in res.items() if k not in ("reports", "trained")}
    text = json.dumps(summary, indent=2, sort_keys=True, default=float)
    if args.out:
        Path(args.out).write_text(text + "\n")
    sys.stdout.write(text + "\n")
    return 0


def cmd_sweep(args) -> int:
    from .imaging import Sample
    from .pipeline import k_sweep, sweep_table
    from .synthgen import generate
    cfg = _config(args)
    samples = _load_samples(args.dataset) if args.dataset else \
        [Sample(*row) for row in generate(cfg.gen_config())]
    ks = [int(k) for k in args.ks.split(",")]
    table = sweep_table(k_sweep(samples, cfg, ks))
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fishrec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="learn parts and the class hierarchy")
    p.add_argument("dataset")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write partial predictions for a dataset")
    p.add_argument("dataset")
    p.add_argument("--model", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics report from a predictions file")
    p.add_argument("predictions")
    p.add_argument("labels", nargs="?")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("saliency", help="dump a saliency map and its keypoints")
    p.add_argument("image")
    p.add_argument("--mask")
    common(p)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("benchmark", help="partial vs full vs flat on a trajectory split")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--hard", action="store_true", help="use the harder synthetic preset")
    common(p, out_required=False)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep", help="benchmark over several part counts")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--ks", default="4,6,8,10")
    p.add_argument("--hard", action="store_true", help="use the harder synthetic preset")
    common(p, out_required=False)
    p.set_defaults(func=cmd_sweep)
    return ap


def _fail(code: int, kind: str, err: BaseException) -> int:
    msg = " ".join(str(err).split()) or type(err).__name__
    sys.stderr.write(f"error: {kind}: {msg}\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .modelfile import ModelFormatError
    try:
        return args.func(args)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config", err)
    except (DataError, FileNotFoundError, ModelFormatError) as err:
        return _fail(EXIT_DATA, "data", err)
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as err:
        return _fail(EXIT_NUMERIC, "numeric", err)


if __name__ == "__main__":
    sys.exit(main())
