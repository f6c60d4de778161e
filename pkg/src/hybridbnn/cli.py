"""Command-line entry point.

A full run is five commands::

    hybridbnn gen-data --out run/data
    hybridbnn train --data run/data --out run/model
    hybridbnn eval --checkpoint run/model/model.bnck --data run/data
    hybridbnn sweep --predictions run/model/predictions.csv
    hybridbnn attribute --checkpoint run/model/model.bnck --data run/data --input-id sub0003

Failures print one ``error: <kind>: <message>`` line on stderr and exit
non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attribution, bayes, data, nn, selective, train
from .config import ConfigError, RunConfig

log = logging.getLogger("hybridbnn")

OUTPUT_ROOT_ENV = "HYBRIDBNN_OUTPUT_ROOT"


def _out_dir(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    cfg.set("run", "threads", getattr(args, "threads", None))
    return cfg


def _threads(cfg: RunConfig) -> int:
    n = cfg.int("run", "threads")
    if n < 1:
        raise ConfigError("threads must be >= 1")
    return n


def _format_metrics(m: selective.Metrics) -> str:
    def f(v):
        return "NA" if v is None else f"{v:.6f}"

    return (f"n={m.n} accuracy={f(m.accuracy)} precision={f(m.precision)} recall={f(m.recall)} "
            f"f1={f(m.f1)} auc={f(m.auc)}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    cfg = _load_config(args)
    cfg.set("data", "n_samples", args.n)
    cfg.set("data", "seed", args.seed)
    cfg.set("data", "side", args.side)
    cfg.set("data", "hard_fraction", args.hard_fraction)
    out = _out_dir(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"output directory {out} is not empty (use --force)")
    gen = data.GenConfig(
        n_samples=cfg.int("data", "n_samples"),
        side=cfg.int("data", "side"),
        balance=cfg.float("data", "balance"),
        seed=cfg.int("data", "seed"),
        amplitudes=(cfg.float("data", "amplitude_0"), cfg.float("data", "amplitude_1")),
        field_std=cfg.float("data", "field_std"),
        smoothness=cfg.float("data", "smoothness"),
        blob_width=cfg.float("data", "blob_width"),
        blob_jitter=cfg.float("data", "blob_jitter"),
        hard_fraction=cfg.float("data", "hard_fraction"),
        raw_side=cfg.optional_int("data", "raw_side"),
    )
    volumes = data.generate(gen, threads=_threads(cfg))
    volumes, norm = data.normalize_global(volumes)
    tr, te = data.split(volumes, cfg.float("data", "train_fraction"), gen.seed)
    out.mkdir(parents=True, exist_ok=True)
    manifest = data.write_dataset(out, tr, te, norm)
    summary = {"normalization": {"min": norm[0], "max": norm[1]},
               "counts": {split: {str(c): sum(1 for e in manifest if e["split"] == split and e["label"] == c)
                                  for c in (0, 1)} for split in ("train", "test")}}
    (out / "dataset.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    cfg.write(out / "config.gen-data.ini")
    labels = [e["label"] for e in manifest]
    print(f"wrote {len(manifest)} volumes to {out}: class0={labels.count(0)} class1={labels.count(1)} "
          f"train={len(tr)} test={len(te)}")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    cfg.set("train", "epochs", args.epochs)
    cfg.set("train", "seed", args.seed)
    cfg.set("train", "batch_size", args.batch_size)
    cfg.set("train", "lr", args.lr)
    ds = data.load_dataset(args.data)
    if not ds.train:
        raise train.ConfigurationError("dataset has an empty training split")
    spec = nn.ModelSpec(side=ds.train[0].side,
                        channels=tuple(int(c) for c in cfg.floats("model", "channels")),
                        kernel=cfg.int("model", "kernel"))
    tcfg = train.TrainConfig(spec=spec, epochs=cfg.int("train", "epochs"),
                             batch_size=cfg.int("train", "batch_size"),
                             lr=cfg.float("train", "lr"), seed=cfg.int("train", "seed"))
    x, y = data.stack(ds.train)
    params, history = train.fit(tcfg, x, y)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(out / "model.bnck", spec, params)
    train.write_log_csv(out / "train_log.csv", history)
    cfg.write(out / "config.train.ini")
    spec2, params2 = nn.load_checkpoint(out / "model.bnck")
    if spec2 != spec or any(not np.array_equal(params[k], params2[k]) for k in params):
        raise nn.CheckpointError("checkpoint did not reload bitwise")
    last = history[-1]
    print(f"trained {tcfg.epochs} epochs on {len(x)} volumes: loss={last.loss:.6f} accuracy={last.accuracy:.6f}")


def cmd_eval(args) -> None:
    cfg = _load_config(args)
    cfg.set("bayes", "s", args.s)
    cfg.set("bayes", "n", args.n)
    cfg.set("bayes", "seed", args.seed)
    s, n, seed = cfg.float("bayes", "s"), cfg.int("bayes", "n"), cfg.int("bayes", "seed")
    if s < 0:
        raise ConfigError(f"--s must be >= 0, got {s}")
    if n < 1:
        raise ConfigError(f"--n must be >= 1, got {n}")
    spec, params = nn.load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.data)
    bh = bayes.to_bayesian(params, s)
    preds = bayes.mc_infer_many(spec, params, bh, [v.data for v in ds.test], n, seed, _threads(cfg))
    labels = [v.label for v in ds.test]
    out = _out_dir(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    bayes.write_predictions(out / "predictions.csv", [v.id for v in ds.test], preds, labels)
    cfg.write(out / "config.eval.ini")
    metrics = selective.compute_metrics([p.p_mean for p in preds], labels)
    print(_format_metrics(metrics))


def cmd_sweep(args) -> None:
    cfg = _load_config(args)
    cfg.set("sweep", "thresholds", args.thresholds)
    thresholds = selective.parse_thresholds(cfg.get("sweep", "thresholds"))
    _, preds, labels = bayes.read_predictions(args.predictions)
    rows = selective.sweep(preds, labels, thresholds)
    out = _out_dir(args.out) if args.out else Path(args.predictions).parent
    out.mkdir(parents=True, exist_ok=True)
    selective.write_sweep_csv(out / "sweep.csv", rows)
    selective.write_curves(out, rows)
    cfg.write(out / "config.sweep.ini")
    for r in rows:
        acc = "NA" if r.accuracy is None else f"{r.accuracy:.4f}"
        auc = "NA" if r.auc is None else f"{r.auc:.4f}"
        print(f"t={r.threshold:g} accuracy={acc} auc={auc} coverage={r.coverage:.4f}")


def cmd_attribute(args) -> None:
    cfg = _load_config(args)
    for key in ("steps", "sigma", "percentile", "repeats", "seed", "target"):
        cfg.set("attribution", key, getattr(args, key))
    cfg.set("bayes", "s", args.s)
    cfg.set("bayes", "n", args.n)
    s = cfg.float("bayes", "s")
    if s < 0:
        raise ConfigError(f"--s must be >= 0, got {s}")
    acfg = attribution.AttributionConfig(
        steps=cfg.int("attribution", "steps"),
        target=cfg.optional_int("attribution", "target"),
        sigma=cfg.float("attribution", "sigma"),
        percentile=cfg.float("attribution", "percentile"),
        repeats=cfg.int("attribution", "repeats"),
        seed=cfg.int("attribution", "seed"),
        mc_samples=cfg.int("bayes", "n"),
    )
    spec, params = nn.load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.data)
    vol = ds.by_id(args.input_id)
    bh = bayes.to_bayesian(params, s)
    result = attribution.bayes_attribution(spec, params, bh, vol.data, acfg, _threads(cfg))
    out = (_out_dir(args.out) if args.out
           else Path(args.checkpoint).parent / f"attribution_{vol.id}")
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in (("raw", result.raw), ("smoothed", result.smoothed),
                      ("mask_fraction", result.mask_fraction), ("mask", result.mask)):
        data.write_volume(out, data.Volume(arr.astype(np.float32), vol.label, f"{vol.id}_{name}"))
    summary = (f"input_id {vol.id}\n"
               f"target_class {result.target}\n"
               f"steps {acfg.steps}\n"
               f"repeats {acfg.repeats}\n"
               f"completeness_gap {result.completeness_gap!r}\n"
               f"mask_voxels {int(result.mask.sum())}\n"
               f"total_voxels {result.mask.size}\n")
    (out / "summary.txt").write_text(summary)
    cfg.write(out / "config.attribute.ini")
    print(summary, end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridbnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--threads", type=int)
        return p

    p = common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--hard-fraction", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train the classifier"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="Monte-Carlo evaluation of the test split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--s", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("sweep", help="accuracy/AUC/coverage over thresholds"))
    p.add_argument("--predictions", required=True)
    p.add_argument("--thresholds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("attribute", help="averaged integrated-gradients masks"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--input-id", required=True)
    p.add_argument("--repeats", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--percentile", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--s", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attribute)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, FileExistsError, KeyError,
            ArithmeticError, AssertionError, RuntimeError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {str(message).splitlines()[0] if str(message) else ''}",
              file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, ValueError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
