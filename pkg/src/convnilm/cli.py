"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, load_run_config
from .data import (DataError, Scale, apply_scale, fold_indices, invert_scale, load_house,
                   minmax_fit_transform, parse_channel_file, read_cache, read_manifest,
                   resample_linear, window_split, write_cache, write_manifest)
from .inference import StreamingUnsupported, disaggregate
from .metrics import MetricsReport
from .model import (VARIANTS, CheckpointError, ModelConfig, load_checkpoint, param_count,
                    receptive_field, save_checkpoint)
from .synth import ApplianceSpec, default_specs, gen_synthetic
from .training import AdamState, TrainingDiverged, train_fold

log = logging.getLogger("convnilm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CACHE_NAME = "cache.bin"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# prepare / synth


def _write_dataset(out: Path, windows, period: float, k: int, **manifest) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_cache(out / CACHE_NAME, windows, period)
    scale = windows[0].scale
    write_manifest(out / MANIFEST_NAME, period=period, window=int(windows[0].mixture.shape[0]),
                   n_windows=len(windows), scale={"min_w": scale.min_w, "max_w": scale.max_w},
                   k_folds=k, folds=fold_indices(len(windows), k) if len(windows) >= k else [],
                   **manifest)


def cmd_prepare(args) -> int:
    cfg = load_run_config(args.config, args.set)
    data = replace(cfg.data, dataset=args.dataset or cfg.data.dataset,
                   root=args.root or cfg.data.root, house=args.house or cfg.data.house,
                   top=args.top or cfg.data.top, window=args.window or cfg.data.window)
    house_dir = Path(data.root) / f"house_{data.house}"
    house = load_house(house_dir, data.dataset, data.top)
    mixture, scale = minmax_fit_transform(house.mixture_w)
    targets = apply_scale(house.targets_w, scale, shift=False)
    windows = window_split(mixture, targets, min(data.window_length(), len(mixture)), scale,
                           start=house.start, period=house.period)
    out = Path(args.out)
    _write_dataset(out, windows, house.period, cfg.train.k_folds, dataset=data.dataset,
                   houses=[data.house], channels=house.channels, appliances=house.appliances)
    RunConfig(cfg.model, cfg.train, data).write(out / "config.ini")
    print(f"appliances: {', '.join(f'{n} (ch {c})' for n, c in zip(house.appliances, house.channels))}")
    print(f"scale: min_w={scale.min_w!r} max_w={scale.max_w!r}")
    print(f"windows: {len(windows)} x {windows[0].mixture.shape[0]} samples at {house.period:g} s")
    return EXIT_OK


def _load_specs(path) -> list[ApplianceSpec]:
    if path is None:
        return default_specs()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable appliance spec file ({exc})") from exc
    if not isinstance(raw, list) or not all(isinstance(d, dict) for d in raw):
        raise DataError(f"{path}: expected a JSON list of appliance objects")
    try:
        return [ApplianceSpec.from_dict(d) for d in raw]
    except TypeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_synth(args) -> int:
    specs = _load_specs(args.spec)
    mixture_w, targets_w = gen_synthetic(specs, args.T * args.windows, args.period, args.noise, args.seed)
    mixture, scale = minmax_fit_transform(mixture_w)
    targets = apply_scale(targets_w, scale, shift=False)
    windows = window_split(mixture, targets, args.T, scale, period=args.period)
    out = Path(args.out)
    _write_dataset(out, windows, args.period, args.k, dataset="synthetic", houses=[],
                   channels=list(range(len(specs))), appliances=[s.name for s in specs],
                   specs=[asdict(s) for s in specs], noise_std=args.noise, seed=args.seed)
    print(f"appliances: {', '.join(s.name for s in specs)}")
    print(f"scale: min_w={scale.min_w!r} max_w={scale.max_w!r}")
    print(f"windows: {len(windows)} x {args.T} samples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_dataset(data_dir):
    data_dir = Path(data_dir)
    windows, period = read_cache(data_dir / CACHE_NAME)
    manifest = read_manifest(data_dir / MANIFEST_NAME) if (data_dir / MANIFEST_NAME).exists() else {}
    names = manifest.get("appliances") or [f"appliance_{i}" for i in range(windows[0].targets.shape[0])]
    return windows, period, names


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    windows, period, names = _load_dataset(args.data)
    n_src = windows[0].targets.shape[0]
    overrides = {f: getattr(cfg.model, f) for f in ("n_filters", "filter_len", "stride", "bottleneck",
                                                   "hidden", "kernel", "blocks", "repeats",
                                                   "leaky_slope", "causal_norm")}
    variant = args.variant or cfg.model.variant
    model_cfg = ModelConfig.for_variant(variant, **overrides, n_sources=n_src)
    train_cfg = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    run = RunConfig(model_cfg, train_cfg, cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out / "config.ini")
    ad.set_precision(train_cfg.precision)

    k = train_cfg.k_folds
    blocks = fold_indices(len(windows), k)
    wanted = [args.fold] if args.fold is not None else (
        [cfg.data.fold] if cfg.data.fold >= 0 else list(range(k)))
    scale = windows[0].scale
    base_meta = {"appliances": names, "scale": {"min_w": scale.min_w, "max_w": scale.max_w},
                 "period": period, "k_folds": k, "variant": variant, "loss": train_cfg.loss}

    summary = []
    with open(out / "train.log", "a") as logfile:
        for fold in wanted:
            if not 0 <= fold < k:
                raise UsageError(f"fold {fold} outside 0..{k - 1}")
            held = set(blocks[fold])
            train_w = [w for i, w in enumerate(windows) if i not in held]
            val_w = [windows[i] for i in sorted(held)]
            fold_dir = out / f"fold{fold}"
            fold_dir.mkdir(exist_ok=True)
            meta = dict(base_meta, fold=fold)
            params, state, start, best_val = None, None, 0, np.inf
            last = fold_dir / "last.ckpt"
            if args.resume and last.exists():
                ck = load_checkpoint(last)
                params = {n: t.data for n, t in ck.params.items()}
                state = AdamState.from_blobs(ck.extra)
                start = int(ck.meta.get("epoch", 0))
                if (fold_dir / "best.ckpt").exists():
                    best_val = load_checkpoint(fold_dir / "best.ckpt").meta.get("val_wmse", np.inf)
                log.info("fold %d: resuming at epoch %d", fold, start)
            best = {"val": best_val, "epoch": 0}

            def on_epoch(record, live, adam_state, fold_dir=fold_dir, meta=meta, best=best):
                logfile.write(record.line() + "\n")
                logfile.flush()
                m = dict(meta, epoch=record.epoch, val_wmse=record.val_wmse)
                if record.val_wmse < best["val"]:
                    best.update(val=record.val_wmse, epoch=record.epoch)
                    save_checkpoint(fold_dir / "best.ckpt", model_cfg, live, m)
                save_checkpoint(fold_dir / "last.ckpt", model_cfg, live, m, adam_state.to_blobs())

            try:
                result = train_fold(model_cfg, train_w, val_w, train_cfg, fold=fold, params=params,
                                    state=state, start_epoch=start, on_epoch=on_epoch)
            except TrainingDiverged as exc:
                save_checkpoint(last, model_cfg, exc.params, dict(meta, epoch=exc.epoch, diverged=True))
                print(f"training diverged: {exc}; last good parameters in {last}", file=sys.stderr)
                return EXIT_NUMERIC
            if result.collapsed:
                print(f"fold {fold}: collapse alarm raised (outputs near zero)", file=sys.stderr)
            summary.append((fold, best["epoch"], best["val"]))
            print(f"fold {fold}: best val WMSE {best['val']:.6e} at epoch {best['epoch']}")

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "best_epoch", "best_val_wmse"])
        writer.writerows(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / disaggregate / inspect


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("NILM_THREADS", "1")))
    except ValueError:
        return 1


def _checkpoint_scale(meta: dict) -> Scale:
    if "scale" not in meta:
        raise DataError("checkpoint carries no scale parameters")
    return Scale(meta["scale"]["min_w"], meta["scale"]["max_w"])


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    windows, period, names = _load_dataset(args.data)
    n_src = windows[0].targets.shape[0]
    if n_src != ck.config.n_sources:
        raise DataError(f"checkpoint separates {ck.config.n_sources} appliances, data has {n_src}")
    fold = args.fold if args.fold is not None else ck.meta.get("fold", -1)
    if fold is not None and fold >= 0:
        k = int(ck.meta.get("k_folds", 10))
        chosen = [windows[i] for i in fold_indices(len(windows), k)[fold]]
    else:
        chosen = windows
    scale = windows[0].scale

    def run(w):
        with ad.no_grad():
            return disaggregate(ck.params, ck.config, w.mixture)

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        preds = list(pool.map(run, chosen))

    shift_free = not args.scaled
    pred = np.concatenate(preds, axis=1)
    target = np.concatenate([w.targets for w in chosen], axis=1)
    if shift_free:
        pred, target = invert_scale(pred, scale, shift=False), invert_scale(target, scale, shift=False)
    report = MetricsReport.compute(pred, target, names, n_windows=len(chosen),
                                   space="watts" if shift_free else "scaled")
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.txt").write_text(report.table() + "\n")
    times = np.concatenate([w.start + period * np.arange(w.mixture.shape[0]) for w in chosen])
    for i, name in enumerate(names):
        with open(out / "traces" / f"{_safe(name)}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "target_w" if shift_free else "target", "pred_w" if shift_free else "pred"])
            writer.writerows(zip(times.tolist(), target[i].tolist(), pred[i].tolist()))
    print(report.table())
    return EXIT_OK


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def cmd_disaggregate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.stream and not ck.config.causal:
        raise StreamingUnsupported("--stream needs a causal checkpoint; this one is non-causal")
    scale = _checkpoint_scale(ck.meta)
    period = float(ck.meta.get("period", 1.0))
    series = parse_channel_file(args.input)
    grid = resample_linear(series, period)
    if len(grid) < ck.config.filter_len:
        raise DataError(f"input covers {len(grid)} samples, one frame needs {ck.config.filter_len}")
    ad.set_precision("float64")
    scaled = disaggregate(ck.params, ck.config, apply_scale(grid, scale), stream=args.stream,
                          chunk_frames=args.chunk_frames)
    watts = invert_scale(scaled, scale, shift=False)
    names = ck.meta.get("appliances") or [f"appliance_{i}" for i in range(ck.config.n_sources)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times = series.timestamps[0] + period * np.arange(len(grid))
    for i, name in enumerate(names):
        with open(out / f"{_safe(name)}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "power_w"])
            writer.writerows(zip(times.tolist(), watts[i].tolist()))
    print(f"wrote {len(names)} series of {len(grid)} samples to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    counts = param_count(cfg)
    stored = sum(t.data.size for t in ck.params.values())
    period = float(ck.meta.get("period", 1.0))
    print(f"variant: {cfg.variant}")
    for key, value in asdict(cfg).items():
        print(f"  {key} = {value}")
    print("parameters:")
    print(counts.table())
    if stored != counts.total:
        print(f"warning: checkpoint stores {stored} values, architecture implies {counts.total}")
    print(f"reference count: 41088 (difference {counts.total - 41088:+d})")
    print(receptive_field(cfg).describe(period))
    for key in ("appliances", "scale", "fold", "epoch", "val_wmse"):
        if key in ck.meta:
            print(f"{key}: {ck.meta[key]}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="convnilm", description="Convolutional energy disaggregation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="ingest a REDD / UK-DALE house into a window cache")
    s.add_argument("--dataset", choices=("redd", "ukdale"))
    s.add_argument("--root", help="directory holding house_<N> folders")
    s.add_argument("--house", type=int)
    s.add_argument("--top", type=int)
    s.add_argument("--window", type=int, help="window length in samples (default: one day)")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="JSON list of appliance specs (default: 3-appliance set)")
    s.add_argument("--T", type=int, default=2048, help="window length in samples")
    s.add_argument("--windows", type=int, default=40)
    s.add_argument("--period", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=10, help="folds recorded in the manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train with k-fold cross-validation")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.add_argument("--epochs", type=int)
    s.add_argument("--fold", type=int, help="train only this fold")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics on validation windows, in watts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--fold", type=int, help="override the fold stored in the checkpoint (-1: all)")
    s.add_argument("--scaled", action="store_true", help="debug: report in scaled space")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("disaggregate", help="separate a mixture channel file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--stream", action="store_true")
    s.add_argument("--chunk-frames", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_disaggregate)

    s = sub.add_parser("inspect", help="print a checkpoint's architecture")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, StreamingUnsupported) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
