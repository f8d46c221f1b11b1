"""``pcos-screen`` command-line entry point.

Exit codes: 0 success, 2 usage/configuration error, 3 runtime/training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .augment import augment_batch
from .config import EXPLAIN_METHODS, RunConfig, load_config, write_snapshot
from .errors import CheckpointError, ConfigError, PcosScreenError, PretrainedWeightsError, TrainingDivergedError
from .evaluation import (
    confusion,
    export_curves,
    format_metrics,
    metrics,
    render_confusion,
    sweep,
    write_metrics,
)
from .explain import MAX_SHAPLEY_SEGMENTS, grad_cam, lime_explain, render_overlay, segment, shapley_explain, write_weights
from .model import build_model, deterministic_mode, evaluate_split, load_checkpoint, train

log = logging.getLogger("pcos_screen")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(ConfigError):
    pass


def _print(msg: str = "") -> None:
    print(msg, flush=True)


def _build_manifest(cfg: RunConfig) -> ds.DatasetManifest:
    manifest = ds.dedup(ds.scan_dataset(cfg.data_root))
    return ds.split(manifest, cfg.split)


def _save_png(image: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path, format="PNG")


# -- subcommands ----------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = load_config(args.config, data_root=args.data_root, out_root=args.out_root)
    manifest = ds.dedup(ds.scan_dataset(cfg.data_root))
    out = Path(args.out or Path(cfg.out_root) / "manifest.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save_manifest(manifest, out)
    counts = manifest.class_counts
    _print(f"records\t{len(manifest)}")
    for label in ds.CLASSES:
        _print(f"{label}\t{counts[label]}")
    _print(f"duplicates_removed\t{manifest.duplicates_removed}")
    _print(f"skipped\t{len(manifest.skipped)}")
    for path, reason in manifest.skipped:
        _print(f"  skip\t{path}\t{reason}")
    _print(f"manifest\t{out}")
    return EXIT_OK


def _evaluate_and_write(model, data, out_dir: Path, title: str):
    _, _, probs = evaluate_split(model, data)
    cm = confusion(data.labels.tolist(), probs.tolist())
    report = metrics(cm)
    write_metrics(report, out_dir)
    render_confusion(cm, out_dir / "confusion.png", title=title)
    return report


def cmd_train(args) -> int:
    cfg = load_config(args.config, data_root=args.data_root, out_root=args.out_root)
    if args.no_deterministic:
        cfg = dataclasses.replace(cfg, deterministic=False)
    run_dir = Path(cfg.out_root) / "runs" / (args.run_name or f"{cfg.backbone.kind}-{cfg.digest()}")
    run_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, run_dir / "config.yaml")

    manifest = _build_manifest(cfg)
    ds.save_manifest(manifest, run_dir / "manifest.jsonl")
    data = {s: ds.ManifestData.from_manifest(manifest, s, cfg.preprocess) for s in ds.SPLITS}
    for s in ("train", "val"):
        if len(data[s]) == 0:
            raise ConfigError(f"{s} split is empty; adjust split fractions")

    model = build_model(cfg.backbone, seed=cfg.train.seed)
    model.preprocess = cfg.preprocess
    history, ckpt = train(model, data["train"], data["val"], cfg.train, run_dir,
                          deterministic=cfg.deterministic)
    export_curves(history, run_dir)
    (run_dir / "explanations").mkdir(exist_ok=True)

    best = load_checkpoint(ckpt)
    _print(f"run_dir\t{run_dir}")
    _print(f"epochs\t{len(history.epochs)}\tbest_epoch\t{history.best_epoch}\tstopped_early\t{history.stopped_early}")
    _print(f"best_val_loss\t{history.best.val_loss:.6f}\tbest_val_accuracy\t{history.best.val_accuracy:.6f}")
    if len(data["test"]):
        with deterministic_mode(cfg.deterministic):
            report = _evaluate_and_write(best, data["test"], run_dir, f"Confusion Matrix of {cfg.backbone.kind}")
        _print(format_metrics(report))
    else:
        _print("test split empty; no test metrics written")
    return EXIT_OK


def parse_grid(path: str | Path) -> list[tuple[float, float]]:
    """Alpha pairs, one per line (comma or whitespace separated); ``#`` starts a comment."""
    grid = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read grid file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.replace(",", " ").split()
        try:
            if len(parts) != 2:
                raise ValueError
            a, b = float(parts[0]), float(parts[1])
            if a < 0 or b < 0 or not (np.isfinite(a) and np.isfinite(b)):
                raise ValueError
        except ValueError:
            raise UsageError(f"{path}:{n}: malformed grid row {line.strip()!r}; "
                             f"expected '<mixup_alpha> <cutmix_alpha>' with values >= 0") from None
        grid.append((a, b))
    if not grid:
        raise UsageError(f"{path}: grid file has no alpha pairs")
    return grid


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    cfg = load_config(args.config, data_root=args.data_root, out_root=args.out_root)
    out = Path(cfg.out_root) / "sweeps" / (args.run_name or f"sweep-{cfg.digest()}")
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.yaml")
    manifest = _build_manifest(cfg)
    ds.save_manifest(manifest, out / "manifest.jsonl")
    train_data = ds.ManifestData.from_manifest(manifest, "train", cfg.preprocess)
    val_data = ds.ManifestData.from_manifest(manifest, "val", cfg.preprocess)
    results, report = sweep(grid, cfg.train, (train_data, val_data), cfg.backbone, out,
                            deterministic=cfg.deterministic)
    _print(report.read_text().rstrip())
    failed = [r for r in results if r.failed]
    for r in failed:
        _print(f"FAILED\t{r.mixup_alpha:g}\t{r.cutmix_alpha:g}\t{r.error}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = ds.load_manifest(args.manifest)
    data = ds.ManifestData.from_manifest(manifest, args.split, model.preprocess)
    if len(data) == 0:
        raise UsageError(f"split {args.split!r} is empty in {args.manifest}")
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / f"evaluation-{args.split}"
    with deterministic_mode(True):
        report = _evaluate_and_write(model, data, out, f"Confusion Matrix ({args.split})")
    _print(format_metrics(report))
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = load_config(args.config)
    method = args.method
    n_seg = args.segments or cfg.explain.segments_for(method)
    seed = cfg.explain.seed if args.seed is None else args.seed
    if method == "shapley" and n_seg > MAX_SHAPLEY_SEGMENTS:
        raise UsageError(f"shapley enumeration is capped at {MAX_SHAPLEY_SEGMENTS} segments (got {n_seg}); "
                         f"use --method lime for finer segmentations")
    model = load_checkpoint(args.checkpoint)
    image = ds.load_image(args.image, model.preprocess)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem

    overlay = out / f"{stem}.{method}.overlay.png"
    raw = out / f"{stem}.{method}.raw.png"
    if method == "gradcam":
        heat = grad_cam(model, image, layer=args.layer or cfg.explain.layer)
        render_overlay(image, heat, overlay, raw_path=raw)
    else:
        seg = segment(image, n_seg)
        if method == "lime":
            attr = lime_explain(model, image, seg, n_samples=args.samples or cfg.explain.lime_samples,
                                seed=seed, kernel_width=cfg.explain.kernel_width)
        else:
            attr = shapley_explain(model, image, seg)
        render_overlay(image, attr, overlay, seg=seg, raw_path=raw)
        write_weights(attr, out / f"{stem}.{method}.weights.txt")
    _print(f"overlay\t{overlay}")
    _print(f"raw\t{raw}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = load_config(args.config, data_root=args.data_root, out_root=args.out_root)
    manifest = ds.dedup(ds.scan_dataset(cfg.data_root))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    pick = sorted(rng.choice(len(manifest), size=min(args.count, len(manifest)), replace=False).tolist())
    records = [manifest.records[k] for k in pick]
    if len(records) < 2:
        raise UsageError("augment-preview needs at least 2 images")
    images = [ds.load_image(r, cfg.preprocess) for r in records]
    labels = [ds.label_to_target(r.label) for r in records]
    ids = [r.id for r in records]

    for method, alphas in (("mixup", (args.mixup_alpha, 0.0)), ("cutmix", (0.0, args.cutmix_alpha))):
        if max(alphas) <= 0:
            continue
        mixed = augment_batch(list(zip(images, labels)), alphas[0], alphas[1], rng, ids=ids)
        for k, (rec, m) in enumerate(zip(records, mixed)):
            stem = out / f"{k:02d}.{method}"
            _save_png(images[k], stem.with_name(stem.name + ".before.png"))
            _save_png(m.image, stem.with_name(stem.name + ".after.png"))
            stem.with_name(stem.name + ".txt").write_text(
                f"method\t{m.method}\nlambda\t{m.lambda_effective!r}\nsoft_label_infected\t{m.soft_label!r}\n"
                f"source_id\t{rec.id}\nsource_label\t{rec.label}\npartner_id\t{m.partner_id}\n"
            )
    _print(f"wrote previews for {len(records)} images to {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--data-root", help="override data_root")
    p.add_argument("--out-root", help="override out_root")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcos-screen", description="PCOS ultrasound screening toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan, deduplicate and write the manifest")
    _common(p)
    p.add_argument("--out", help="manifest path (default <out_root>/manifest.jsonl)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="split, train, evaluate and plot one run")
    _common(p)
    p.add_argument("--run-name")
    p.add_argument("--no-deterministic", action="store_true", help="allow nondeterministic kernels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per (mixup_alpha, cutmix_alpha) row of a grid file")
    _common(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--run-name")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on one manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=ds.SPLITS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM / LIME / Shapley overlays for one image")
    p.add_argument("--config")
    p.add_argument("--method", required=True, choices=EXPLAIN_METHODS)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segments", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--layer")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("augment-preview", help="before/after MixUp and CutMix images")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--mixup-alpha", type=float, default=0.25)
    p.add_argument("--cutmix-alpha", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PretrainedWeightsError, PcosScreenError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

