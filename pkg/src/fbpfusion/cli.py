"""Command-line entry point: ``fbpfusion {synth,train,eval,attention-dump,selfcheck}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fbpfusion.attention import weights_per_time, write_weights_csv
from fbpfusion.config import RunConfig, load_config
from fbpfusion.data import SPLITS, generate_synthetic, load_manifest, load_samples
from fbpfusion.errors import ConfigError, ContractError, DimensionError, FormatError, InputError
from fbpfusion.model import FUSIONS, ensemble_mean, evaluate, load_model, save_model, train
from fbpfusion.selfcheck import run_selfcheck
from fbpfusion.tensor import no_grad

log = logging.getLogger("fbpfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (sectioned key = value)")
    p.add_argument("--seed", type=int, help="overrides [run] seed")
    p.add_argument("--out", help="output directory (default: [paths] out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbpfusion", description="Attention-pooled audio-video emotion classifier with FBP fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic audio-video dataset")
    _common(p)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    p.add_argument("--data", help="dataset directory with train.csv (default: [paths] data_dir)")
    p.add_argument("--splits", default="train", help="comma-separated splits to train on (default: train)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--fusion", choices=FUSIONS)
    p.add_argument("--lambda-audio", type=float)
    p.add_argument("--lambda-video", type=float)

    p = sub.add_parser("eval", help="evaluate one checkpoint or a probability-averaged ensemble")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--ensemble", help="comma-separated checkpoints")
    p.add_argument("--manifest", help="manifest CSV (default: <data>/test.csv)")
    p.add_argument("--data", help="dataset directory (default: [paths] data_dir)")

    p = sub.add_parser("attention-dump", help="write per-stream attention weights of one sample as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--manifest", help="manifest CSV (default: search <data>/{train,val,test}.csv)")
    p.add_argument("--data", help="dataset directory (default: [paths] data_dir)")

    p = sub.add_parser("selfcheck", help="run the built-in oracle and invariant suites")
    _common(p)
    return parser


# ---------------------------------------------------------------- helpers


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag, key in (("epochs", "train.epochs"), ("fusion", "model.fusion"),
                      ("lambda_audio", "model.lambda_audio"), ("lambda_video", "model.lambda_video")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfg.with_overrides(**overrides) if overrides else cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(getattr(args, "data", None) or cfg.paths.data_dir)


def _load_checkpoint(path: str):
    model, meta = load_model(path)
    precision = meta.get("train_config", {}).get("precision", 32)
    if precision != 32:
        model, meta = load_model(path, dtype=np.float64)
    return model, meta


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    manifests = generate_synthetic(cfg.data, out)
    for split, path in manifests.items():
        print(f"{split}: {cfg.data.count(split)} samples -> {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data = _data_dir(args, cfg)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    for s in splits:
        if s not in SPLITS:
            raise UsageError(f"unknown split {s!r}; choose from {SPLITS}")
    samples = []
    for s in splits:
        samples += load_samples(load_manifest(data / f"{s}.csv", s), cfg.spectrogram)
    out = _out_dir(args, cfg)
    log.info("training %s fusion on %d samples for %d epochs", cfg.model.fusion, len(samples), cfg.train.epochs)
    result = train(samples, cfg.model, cfg.train,
                   progress=lambda e, l: log.info("epoch %d/%d loss %.6f", e + 1, cfg.train.epochs, l))
    ckpt = out / "model.fbpm"
    save_model(result.model, ckpt, extra={
        "train_config": {k: getattr(cfg.train, k) for k in cfg.train.__dataclass_fields__},
        "spectrogram": {k: getattr(cfg.spectrogram, k) for k in cfg.spectrogram.__dataclass_fields__},
        "train_splits": splits,
        "losses": result.losses,
        "final_train_loss": result.final_train_loss,
    })
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss"])
        for i, loss in enumerate(result.losses, 1):
            w.writerow([i, repr(loss)])
    print(f"checkpoint: {ckpt}")
    print(f"final_train_loss: {result.final_train_loss:.8f}")
    return EXIT_OK


def _eval_samples(args, cfg: RunConfig):
    path = Path(args.manifest) if args.manifest else _data_dir(args, cfg) / "test.csv"
    manifest = load_manifest(path)
    return load_samples(manifest, cfg.spectrogram)


def cmd_eval(args, cfg: RunConfig) -> int:
    samples = _eval_samples(args, cfg)
    out = _out_dir(args, cfg)
    if args.checkpoint:
        model, _ = _load_checkpoint(args.checkpoint)
        report = evaluate(samples, model)
    else:
        paths = [p for p in args.ensemble.split(",") if p]
        reports = []
        for p in paths:
            model, _ = _load_checkpoint(p)
            reports.append(evaluate(samples, model))
        report = ensemble_mean(reports)
        for p, r in zip(paths, reports):
            print(f"member {p}: accuracy {r.accuracy:.4f}")
    jpath, cpath = report.write(out)
    print(f"accuracy: {report.accuracy:.4f} ({len(samples)} samples)")
    if np.isfinite(report.loss):
        print(f"loss: {report.loss:.8f}")
    print(f"report: {jpath}")
    print(f"confusion: {cpath}")
    return EXIT_OK


def cmd_attention_dump(args, cfg: RunConfig) -> int:
    if args.manifest:
        manifests = [load_manifest(args.manifest)]
    else:
        data = _data_dir(args, cfg)
        manifests = [load_manifest(data / f"{s}.csv", s) for s in SPLITS if (data / f"{s}.csv").exists()]
    entry = manifest = None
    for m in manifests:
        if args.sample_id in m.ids():
            manifest, entry = m, m.find(args.sample_id)
            break
    if entry is None:
        raise InputError(f"unknown sample id {args.sample_id!r}")
    (sample,) = load_samples(type(manifest)([entry], manifest.split, manifest.path), cfg.spectrogram)
    model, _ = _load_checkpoint(args.checkpoint)
    with no_grad():
        res = model.forward(sample.spectrogram, sample.frames, training=False)
    rows = []
    if res.audio_weights is not None:
        per_t = weights_per_time(res.audio_weights, res.grid_shape)
        rows += [(sample.sample_id, "audio", i, float(w)) for i, w in enumerate(per_t)]
    rows += [(sample.sample_id, "video", i, float(w)) for i, w in enumerate(res.video_weights)]
    path = _out_dir(args, cfg) / f"attention_{sample.sample_id}.csv"
    write_weights_csv(path, rows)
    print(f"attention weights: {path}")
    return EXIT_OK


def cmd_selfcheck(args, cfg: RunConfig) -> int:
    results = run_selfcheck(report=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = _out_dir(args, cfg)
        (out / "selfcheck.json").write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "detail": r.detail, "seconds": r.seconds} for r in results],
            indent=1) + "\n")
    if failed:
        print(f"selfcheck FAILED: {', '.join(failed)}")
        return EXIT_INVARIANT
    print(f"selfcheck passed ({len(results)} checks)")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention-dump": cmd_attention_dump,
    "selfcheck": cmd_selfcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FormatError, ContractError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
