"""Command-line entry point: train, eval, score, heatmap, bench, synth.

Every output lands under the --out directory. CSV outputs start with a
comment line recording version, seed, and the invoking command. A key=value
config file can pre-set any long flag; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import math
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, data, heatmap, metrics, model, training
from .training import DEFAULT_SEED, TrainConfig


def _comment(args: argparse.Namespace) -> str:
    cmd = " ".join(shlex.quote(a) for a in sys.argv)
    return f"tinyfqa {__version__} seed={args.seed} cmd=\"{cmd}\""


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"config {path} line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


_CONFIG_TYPES = {
    "loss": str,
    "learning_rate": float,
    "lr": float,
    "decay_interval": int,
    "decay_factor": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "kernels": int,
    "folds": int,
    "threads": int,
    "alpha": float,
    "lo": float,
    "hi": float,
    "mode": str,
    "runs": int,
    "sigmas": str,
    "textures": int,
    "size": int,
    "stride": int,
}


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        loss=args.loss,
        learning_rate=args.lr,
        decay_interval=args.decay_interval,
        decay_factor=args.decay_factor,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def cmd_train(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    manifest = data.load_manifest(args.manifest)
    if manifest.kind != metrics.KIND_Z_LEVEL:
        print("train requires a Z_LEVEL manifest", file=sys.stderr)
        return 1
    config = _train_config(args)
    print(f"loss={config.loss} kernels={args.kernels} folds={args.folds}")
    store = data.store_for(manifest)

    if args.folds > 1:
        fold_reports: list[metrics.EvalReport] = []

        def on_fold(fold: int, report: metrics.EvalReport) -> None:
            fold_reports.append(report)
            metrics.write_report_csv(report, out / f"fold{fold}_eval.csv", _comment(args))
            metrics.write_report_summary(report, out / f"fold{fold}_summary.txt", _comment(args))
            if args.verbose:
                print(f"fold {fold}: srcc={report.srcc:.4f} roc_auc={report.roc_auc:.4f}")

        result = training.run_folds(
            config, manifest, n_folds=args.folds, n_kernels=args.kernels,
            store=store, on_fold=on_fold,
        )
        lines = [f"# {_comment(args)}", "fold,srcc,plcc,roc_auc,pr_auc"]
        for i, rep in enumerate(result.reports):
            lines.append(f"{i},{rep.srcc!r},{rep.plcc!r},{rep.roc_auc!r},{rep.pr_auc!r}")
        lines.append(
            "mean,{srcc!r},{plcc!r},{roc_auc!r},{pr_auc!r}".format(**result.mean)
        )
        (out / "folds_summary.csv").write_text("\n".join(lines) + "\n")
        print("mean over folds: " + " ".join(f"{k}={v:.4f}" for k, v in result.mean.items()))
        return 0

    train_m, val_m, test_m = data.split_dataset(
        manifest, seed=config.seed
    )
    hook = None
    if args.save_decay_checkpoints:
        def hook(epoch: int, params: model.ModelParams) -> None:
            model.save_weights(params, out / f"checkpoint_epoch{epoch:04d}.flnn")

    on_epoch = None
    if args.verbose:
        def on_epoch(entry: training.EpochLog) -> None:
            print(
                f"epoch {entry.epoch:3d} lr={entry.lr:.4g} loss={entry.train_loss:+.4f} "
                f"val_srcc={entry.val_srcc:+.4f} skipped={entry.skipped_batches}"
            )

    result = training.train(
        config, train_m, n_kernels=args.kernels, val_set=val_m, store=store,
        checkpoint_hook=hook, on_epoch=on_epoch,
    )
    weight_path = out / f"model_{args.kernels}k_{config.loss}.flnn"
    model.save_weights(result.params, weight_path)
    training.write_training_log(result.log, out / "training_log.csv", _comment(args))

    ids, scores, labels = data.score_manifest(result.params, test_m, store=store)
    report = metrics.evaluate(ids, scores, labels, manifest.kind)
    metrics.write_report_csv(report, out / "test_eval.csv", _comment(args))
    metrics.write_report_summary(report, out / "test_summary.txt", _comment(args))
    print(f"weights: {weight_path}")
    print(f"test srcc={report.srcc:.4f} plcc={report.plcc:.4f} "
          f"roc_auc={report.roc_auc:.4f} pr_auc={report.pr_auc:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    params = model.load_weights(args.weights)
    if args.kernels is not None and args.kernels != params.n_kernels:
        print(
            f"warning: --kernels {args.kernels} ignored; weight file has "
            f"{params.n_kernels} kernels and is authoritative",
            file=sys.stderr,
        )
    manifest = data.load_manifest(args.manifest)
    ids, scores, labels = data.score_manifest(
        params, manifest, threads=args.threads
    )
    report = metrics.evaluate(ids, scores, labels, manifest.kind)
    metrics.write_report_csv(report, out / "eval.csv", _comment(args))
    metrics.write_report_summary(report, out / "summary.txt", _comment(args))
    for note in report.notes:
        print(f"note: {note}")
    shown = {
        k: getattr(report, k) for k in ("srcc", "plcc", "roc_auc", "pr_auc")
    }
    print(" ".join(
        f"{k}={'undefined' if math.isnan(v) else format(v, '.4f')}" for k, v in shown.items()
    ))
    return 0


def _iter_image_paths(inputs: list[str]) -> list[Path]:
    paths: list[Path] = []
    exts = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in exts))
        else:
            paths.append(p)
    return paths


def cmd_score(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    params = model.load_weights(args.weights)
    rows = []
    errors = []
    for path in _iter_image_paths(args.images):
        try:
            tile = data.load_image(path)
            n_crops = len(data.crop_positions(tile.shape[0])) * len(
                data.crop_positions(tile.shape[1])
            )
            score = data.dense_score(params, tile, threads=args.threads)
            rows.append(f"{path.name},{score!r},{n_crops}")
            if args.verbose:
                print(f"{path.name}: {score:.4f} ({n_crops} crops)")
        except (OSError, ValueError) as exc:
            errors.append(f"{path}: {exc}")
    lines = [f"# {_comment(args)}", "id,score,crops", *rows]
    (out / "scores.csv").write_text("\n".join(lines) + "\n")
    print(f"scored {len(rows)} tiles -> {out / 'scores.csv'}")
    for err in errors:
        print(f"error: {err}", file=sys.stderr)
    return 1 if errors else 0


def cmd_heatmap(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    params = model.load_weights(args.weights)
    scan = data.load_image(args.image)
    grid = heatmap.score_scan(params, scan, threads=args.threads)
    if args.mode == heatmap.MODE_ABSOLUTE:
        normalized = heatmap.normalize_grid(grid, args.mode, args.lo, args.hi)
    else:
        normalized = heatmap.normalize_grid(grid, args.mode)
    overlay = heatmap.render_overlay(normalized, scan, alpha=args.alpha)
    stem = Path(args.image).stem
    image_path = out / f"{stem}_heatmap_{args.mode.replace('-', '_')}.png"
    heatmap.save_overlay(overlay, image_path)
    heatmap.write_grid_csv(grid, out / f"{stem}_grid.csv", _comment(args))
    print(f"heatmap: {image_path} ({grid.scores.shape[0]}x{grid.scores.shape[1]} positions)")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    if args.weights:
        params = model.load_weights(args.weights)
    else:
        params = training.init_params(args.kernels or 1, seed=args.seed)
    if args.image:
        patch = data.load_image(args.image)
    else:
        rng = np.random.default_rng(args.seed)
        patch = (rng.integers(0, 256, size=(1024, 1024, 3)) / 255.0).astype(np.float32)
    report = bench.time_patch_scoring(
        params, patch, runs=args.runs, threads=args.threads, host=args.host
    )
    bench.write_timing_csv(report, out / "timing.csv", _comment(args))
    print(bench.format_timing_table(report))
    count, size_bytes = bench.model_size_report(params)
    reference = model.PUBLISHED_PARAM_COUNTS.get(params.n_kernels)
    ref_text = f" (published reference: {reference})" if reference else ""
    print(f"parameters:     {count}{ref_text}")
    print(f"weight file:    {size_bytes} bytes")
    hours = bench.estimate_scanner_throughput(2500, 300, report.mean_seconds)
    print(f"scanner load:   2500 patches/WSI x 300 WSI -> {hours:.2f} h at measured speed")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    textures = data.make_textures(args.textures, args.size, args.seed)
    manifest = data.synth_blur_dataset(textures, sigmas, out)
    print(
        f"wrote {len(manifest)} tiles ({args.textures} textures x {len(sigmas)} sigmas) "
        f"-> {manifest.source}"
    )
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="tinyfqa",
        description="Focus quality assessment with a single-conv-layer model.",
    )
    parser.add_argument("--version", action="version", version=f"tinyfqa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help=f"RNG seed (default {DEFAULT_SEED})")
        p.add_argument("--config", help="key=value file; explicit flags override it")
        p.add_argument("--threads", type=int, default=None,
                       help="crop-scoring threads (default: 1 for bench, all cores otherwise)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train a model on a Z_LEVEL manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--kernels", type=int, default=1)
    p.add_argument("--loss", choices=("plcc", "mse"), default="plcc")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--decay-interval", type=int, default=60)
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--save-decay-checkpoints", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a weight file against a manifest")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--kernels", type=int, default=None,
                   help="ignored when it disagrees with the weight file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="dense-score tiles")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("images", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("heatmap", help="render a blur heatmap over a scan")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=(heatmap.MODE_PER_SCAN, heatmap.MODE_ABSOLUTE),
                   default=heatmap.MODE_PER_SCAN)
    p.add_argument("--lo", type=float, default=heatmap.ABSOLUTE_RANGE[0])
    p.add_argument("--hi", type=float, default=heatmap.ABSOLUTE_RANGE[1])
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("bench", help="time dense scoring of one patch")
    common(p)
    p.add_argument("--weights", help="weight file (default: fresh seeded params)")
    p.add_argument("--kernels", type=int, default=1)
    p.add_argument("--image", help="patch to score (default: seeded random 1024x1024)")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--host", default="", help="host descriptor recorded in the report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate a synthetic blur-ramp dataset")
    common(p)
    p.add_argument("--textures", type=int, default=8)
    p.add_argument("--sigmas", default="0,0.5,1,1.5,2,3,4,6")
    p.add_argument("--size", type=int, default=300, help="texture side length")
    p.set_defaults(func=cmd_synth)

    return parser, {name: sp for name, sp in sub.choices.items()}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()

    # first pass only to locate --config; its values become subcommand
    # defaults, so any explicitly passed flag still wins
    probe, _ = parser.parse_known_args(argv)
    if getattr(probe, "config", None):
        raw = _load_config_file(probe.config)
        coerced = {}
        for key, value in raw.items():
            if key not in _CONFIG_TYPES:
                raise SystemExit(f"config {probe.config}: unknown key {key!r}")
            coerced["lr" if key == "learning_rate" else key] = _CONFIG_TYPES[key](value)
        subparsers[probe.command].set_defaults(**coerced)

    args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = 1 if args.command == "bench" else (os.cpu_count() or 1)
    print(f"tinyfqa {__version__} | seed {args.seed} | threads {args.threads}")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
