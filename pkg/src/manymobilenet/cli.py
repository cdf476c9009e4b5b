"""Command-line entry point: gensynth, train, eval, fuse, sweep, inspect.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import gen_synthetic, load_dataset, save_dataset
from .errors import ConfigError, DataError, MetricError, NonFiniteError
from .fusion import Ensemble, EnsembleSpec, format_score, fused_csv, member_csv, member_profile
from .metrics import DEFAULT_THRESHOLD, SELECTION_METRICS, evaluate
from .model import ModelSpec, load_checkpoint, param_stats, save_checkpoint
from .train import BATCH_SIZES, DROPOUT_PRESETS, LEARNING_RATES, WIDTHS, TrainConfig, fit, predict_proba

log = logging.getLogger("manymobilenet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- run directory helpers ---------------------------------------------------


def _prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _digest_path(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _manifest(out: Path, command: str, resolved, inputs: dict, artifacts: list, timings: dict) -> None:
    digests = {k: {"path": str(v), "sha256": _digest_path(v)} for k, v in inputs.items()}
    run_id = hashlib.sha256(json.dumps([command, resolved, digests], sort_keys=True).encode()).hexdigest()[:12]
    doc = {
        "run_id": run_id,
        "command": command,
        "tool_version": __version__,
        "resolved": resolved,
        "inputs": digests,
        "artifacts": sorted(artifacts + ["manifest.json"]),
        "timings_seconds": timings,
    }
    _write(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _quantize(scores) -> np.ndarray:
    """Scores exactly as they are written to CSV, so metrics can be recomputed from the file."""
    return np.array([float(format_score(s)) for s in scores])


# -- commands ----------------------------------------------------------------


def cmd_gensynth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = gen_synthetic(args.n, args.balance, seed, args.image_size)
    out = _prepare_out(args.out, args.force)
    save_dataset(ds, out)
    counts = ds.class_counts()
    log.info("wrote %d images (%d ungradable, %d gradable) to %s", len(ds), counts[0], counts[1], out)
    print(f"label 0: {counts[0]}  label 1: {counts[1]}")
    return EXIT_OK


def cmd_train(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8")
    cfg = TrainConfig.from_text(text, allow_off_grid=args.allow_off_grid)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    train_set = load_dataset(args.data, image_size=args.image_size, split="train")
    val_set = load_dataset(args.val, image_size=args.image_size, split="val")
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    best, history = fit(cfg, train_set, val_set, allow_off_grid=args.allow_off_grid)
    elapsed = time.perf_counter() - t0
    save_checkpoint(best, out / "checkpoint.mmn")
    _write(out / "config.txt", cfg.to_text())
    _write(out / "history.csv", history.to_csv())
    best_record = history.records[best.meta["best_epoch"]]
    _write(out / "metrics.txt", best_record.val.to_text())
    _manifest(
        out,
        "train",
        asdict(cfg),
        {"config": args.config, "data": args.data, "val": args.val},
        ["checkpoint.mmn", "config.txt", "history.csv", "metrics.txt"],
        {"fit": elapsed},
    )
    print(f"best epoch {history.best_epoch}: val {cfg.metric} = {best_record.val.metric_value:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint).eval()
    profile = member_profile(model, args.profile)
    ds = load_dataset(args.data, image_size=model.spec.input_size, split="eval")
    if ds.labels.max() >= model.spec.num_classes:
        raise DataError(f"labels exceed the checkpoint's {model.spec.num_classes} classes")
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    probs = predict_proba(model, ds.images, profile)
    elapsed = time.perf_counter() - t0
    scores = _quantize(probs[:, 1])
    preds = (scores >= DEFAULT_THRESHOLD).astype(int)
    lines = ["id,score,pred,label"]
    for sid, s, p, y in zip(ds.ids, scores, preds, ds.labels):
        lines.append(f"{sid},{format_score(s)},{p},{y}")
    _write(out / "predictions.csv", "\n".join(lines) + "\n")
    report = evaluate(scores, ds.labels, metric=args.metric)
    _write(out / "metrics.txt", report.to_text())
    _manifest(
        out,
        "eval",
        {"profile": args.profile, "metric": args.metric},
        {"checkpoint": args.checkpoint, "data": args.data},
        ["predictions.csv", "metrics.txt"],
        {"inference": elapsed, "per_image": elapsed / len(ds)},
    )
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_fuse(args) -> int:
    spec_path = Path(args.ensemble)
    spec = EnsembleSpec.from_text(spec_path.read_text(encoding="utf-8"), base_dir=spec_path.parent)
    ensemble = Ensemble.from_spec(spec)
    sizes = {m.model.spec.input_size for m in ensemble.members}
    if len(sizes) != 1:
        raise ConfigError(f"members expect different input sizes: {sorted(sizes)}")
    ds = load_dataset(args.data, image_size=sizes.pop(), split="eval")
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    preds = ensemble.predict(ds.images, workers=args.workers)
    total = time.perf_counter() - t0
    _write(out / "fused_predictions.csv", fused_csv(ds.ids, preds))
    for j in range(len(ensemble.members)):
        _write(out / f"member_{j}_predictions.csv", member_csv(ds.ids, preds, j))
    scores = _quantize([p.score for p in preds])
    report = evaluate(scores, ds.labels, metric=args.metric)
    _write(out / "metrics.txt", report.to_text())
    n = len(ds)
    timing = {f"member_{j}_seconds_per_image": s / n for j, s in enumerate(ensemble.member_seconds)}
    timing["fused_seconds_per_image"] = total / n
    _write(out / "timing.txt", "".join(f"{k}={v!r}\n" for k, v in timing.items()))
    _manifest(
        out,
        "fuse",
        {"members": spec.members, "mode": spec.mode, "fuse_on": spec.fuse_on, "metric": args.metric},
        {"ensemble": args.ensemble, "data": args.data, **{f"member_{j}": p for j, (p, _) in enumerate(spec.members)}},
        ["fused_predictions.csv", "metrics.txt", "timing.txt"] + [f"member_{j}_predictions.csv" for j in range(len(ensemble.members))],
        timing,
    )
    print(report.to_text(), end="")
    return EXIT_OK


def _sweep_one(job) -> tuple[str, int]:
    argv = job
    return argv[argv.index("--out") + 1], main(argv)


def cmd_sweep(args) -> int:
    base = TrainConfig.from_text(Path(args.base_config).read_text(encoding="utf-8"), allow_off_grid=True)
    out = _prepare_out(args.out, args.force)
    grid = list(itertools.product(args.batch_sizes, args.lrs, args.dropouts, args.widths))
    rows = ["run,batch_size,lr_max,dropout,width"]
    jobs = []
    for i, (bs, lr, dr, w) in enumerate(grid):
        name = f"run_{i:03d}"
        cfg = replace(base, batch_size=bs, lr_max=lr, dropout=dr, width=w)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        cfg.validate(args.allow_off_grid)
        cfg_path = out / f"{name}.config.txt"
        _write(cfg_path, cfg.to_text())
        rows.append(f"{name},{bs},{lr!r},{dr!r},{w!r}")
        argv = ["train", "--config", str(cfg_path), "--data", args.data, "--val", args.val,
                "--out", str(out / name), "--image-size", str(args.image_size)]
        if args.allow_off_grid:
            argv.append("--allow-off-grid")
        if args.force:
            argv.append("--force")
        jobs.append(argv)
    _write(out / "sweep.csv", "\n".join(rows) + "\n")
    print(f"{len(jobs)} runs")
    if args.dry_run:
        return EXIT_OK
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    failed = [name for name, code in results if code != EXIT_OK]
    if failed:
        log.error("failed runs: %s", ", ".join(failed))
        return max(code for _, code in results)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        spec = load_checkpoint(args.checkpoint).spec
    else:
        spec = ModelSpec(width_multiplier=args.width, input_size=args.image_size)
    stats = param_stats(spec)
    print(f"width_multiplier={spec.width_multiplier!r}")
    print(f"param_count={stats.param_count}")
    print(f"bytes_f32={stats.bytes_f32}")
    print(f"megabytes={stats.bytes_f32 / 1e6:.2f}")
    if args.per_layer:
        for name, count in stats.per_layer.items():
            print(f"{name}={count}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed for all randomness")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--out", help="output (run) directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="manymobilenet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gensynth", parents=[common], help="write a synthetic labelled dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--balance", type=float, default=205 / 434, help="fraction of label-0 (ungradable) images")
    g.add_argument("--image-size", type=int, default=224)
    g.set_defaults(func=cmd_gensynth, needs_out=True)

    t = sub.add_parser("train", parents=[common], help="train one member from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--image-size", type=int, default=224)
    t.add_argument("--allow-off-grid", action="store_true", help="accept values outside the training grid")
    t.set_defaults(func=cmd_train, needs_out=True)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a labelled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--profile", required=True, choices=("imagenet", "dataset"))
    e.add_argument("--metric", default="average", choices=SELECTION_METRICS)
    e.set_defaults(func=cmd_eval, needs_out=True)

    f = sub.add_parser("fuse", parents=[common], help="run an ensemble spec and vote")
    f.add_argument("--ensemble", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--metric", default="average", choices=SELECTION_METRICS)
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_fuse, needs_out=True)

    s = sub.add_parser("sweep", parents=[common], help="expand the training grid into train runs")
    s.add_argument("--base-config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--image-size", type=int, default=224)
    s.add_argument("--batch-sizes", type=int, nargs="+", default=list(BATCH_SIZES))
    s.add_argument("--lrs", type=float, nargs="+", default=list(LEARNING_RATES))
    s.add_argument("--dropouts", type=float, nargs="+", default=list(DROPOUT_PRESETS))
    s.add_argument("--widths", type=float, nargs="+", default=list(WIDTHS))
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--dry-run", action="store_true", help="write configs and sweep.csv only")
    s.add_argument("--allow-off-grid", action="store_true")
    s.set_defaults(func=cmd_sweep, needs_out=True)

    i = sub.add_parser("inspect", parents=[common], help="print parameter statistics")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--width", type=float)
    i.add_argument("--image-size", type=int, default=224)
    i.add_argument("--per-layer", action="store_true")
    i.set_defaults(func=cmd_inspect, needs_out=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.needs_out and not args.out:
        print(f"{args.command}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
