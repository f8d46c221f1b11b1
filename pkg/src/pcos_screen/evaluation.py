"""Confusion-matrix metrics, report writers, training curves and alpha sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import CLASSES, INFECTED, NOT_INFECTED, label_to_target  # noqa: E402
from .errors import ConfigError  # noqa: E402
from .model import (  # noqa: E402
    BackboneSpec,
    TrainConfig,
    TrainingHistory,
    build_model,
    read_history,
    train,
    write_history,
)

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("mixup_alpha", "cutmix_alpha", "val_accuracy", "val_loss", "run_dir")
# default (mixup_alpha, cutmix_alpha) sweep grid
ALPHA_GRID = ((0.0, 0.0), (0.2, 0.3), (0.25, 0.4), (0.3, 0.5), (0.35, 0.6))
# PNG metadata carries no timestamp; dropping Software keeps bytes version-independent
_PNG_META = {"Software": None}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """Same predictions with ``notinfected`` treated as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


@dataclass(frozen=True)
class ClassMetrics:
    precision: Fraction
    recall: Fraction
    f1: Fraction
    support: int


@dataclass
class MetricsReport:
    accuracy: Fraction
    per_class: dict[str, ClassMetrics]
    macro_f1: Fraction
    confusion: ConfusionMatrix
    annotations: list[str] = field(default_factory=list)

    def precision(self, cls: str = INFECTED) -> Fraction:
        return self.per_class[cls].precision

    def recall(self, cls: str = INFECTED) -> Fraction:
        return self.per_class[cls].recall

    def f1(self, cls: str = INFECTED) -> Fraction:
        return self.per_class[cls].f1

    def as_dict(self) -> dict:
        cm = self.confusion
        return {
            "accuracy": float(self.accuracy),
            "macro_f1": float(self.macro_f1),
            "per_class": {
                c: {"precision": float(m.precision), "recall": float(m.recall),
                    "f1": float(m.f1), "support": m.support}
                for c, m in self.per_class.items()
            },
            "confusion": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn},
            "total": cm.total,
            "annotations": list(self.annotations),
        }


def _target(y) -> float:
    return label_to_target(y) if isinstance(y, str) else float(y)


def confusion(y_true: Sequence, y_prob: Sequence[float], threshold: float = 0.5) -> ConfusionMatrix:
    """Count outcomes with ``infected`` as positive; ``p >= threshold`` predicts infected."""
    if len(y_true) != len(y_prob):
        raise ConfigError(f"length mismatch: {len(y_true)} labels vs {len(y_prob)} probabilities")
    if len(y_true) == 0:
        raise ConfigError("need at least one sample")
    tp = fp = fn = tn = 0
    for y, p in zip(y_true, y_prob):
        p = float(p)
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"probability {p} outside [0, 1]")
        t = _target(y)
        if t not in (0.0, 1.0):
            raise ConfigError(f"label {y!r} is not binary")
        pred = p >= threshold
        if t == 1.0:
            tp, fn = (tp + 1, fn) if pred else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if pred else (fp, tn + 1)
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: int, den: int, what: str, notes: list[str]) -> Fraction:
    if den == 0:
        notes.append(f"{what} undefined (zero denominator); reported as 0")
        return Fraction(0)
    return Fraction(num, den)


def _class_metrics(tp: int, fp: int, fn: int, name: str, notes: list[str]) -> ClassMetrics:
    p = _ratio(tp, tp + fp, f"{name} precision", notes)
    r = _ratio(tp, tp + fn, f"{name} recall", notes)
    if p + r == 0:
        notes.append(f"{name} f1 undefined (precision + recall = 0); reported as 0")
        f1 = Fraction(0)
    else:
        f1 = 2 * p * r / (p + r)
    return ClassMetrics(precision=p, recall=r, f1=f1, support=tp + fn)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Exact rational metrics; a zero denominator yields 0 plus an annotation."""
    if cm.total < 1:
        raise ConfigError("confusion matrix is empty")
    notes: list[str] = []
    per_class = {
        INFECTED: _class_metrics(cm.tp, cm.fp, cm.fn, INFECTED, notes),
        NOT_INFECTED: _class_metrics(cm.tn, cm.fn, cm.fp, NOT_INFECTED, notes),
    }
    macro = sum((m.f1 for m in per_class.values()), Fraction(0)) / len(per_class)
    return MetricsReport(
        accuracy=Fraction(cm.tp + cm.tn, cm.total),
        per_class=per_class,
        macro_f1=macro,
        confusion=cm,
        annotations=notes,
    )


def format_metrics(report: MetricsReport) -> str:
    lines = [f"accuracy\t{float(report.accuracy):.6f}"]
    for c in CLASSES:
        m = report.per_class[c]
        lines.append(f"{c}\tprecision={float(m.precision):.6f}\trecall={float(m.recall):.6f}"
                     f"\tf1={float(m.f1):.6f}\tsupport={m.support}")
    lines.append(f"macro_f1\t{float(report.macro_f1):.6f}")
    return "\n".join(lines)


def write_metrics(report: MetricsReport, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
    """Write ``<stem>.json`` (fixed key order) and ``<stem>.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / f"{stem}.json"
    jpath.write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    cpath = out_dir / f"{stem}.csv"
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("class", "precision", "recall", "f1", "support"))
        for c in CLASSES:
            m = report.per_class[c]
            w.writerow((c, repr(float(m.precision)), repr(float(m.recall)), repr(float(m.f1)), m.support))
        w.writerow(("accuracy", "", "", repr(float(report.accuracy)), report.confusion.total))
        w.writerow(("macro_f1", "", "", repr(float(report.macro_f1)), report.confusion.total))
    return jpath, cpath


def render_confusion(cm: ConfusionMatrix, out_path: str | Path, title: str = "Confusion Matrix") -> Path:
    """2x2 heatmap, rows = true class, columns = predicted class."""
    grid = np.array([[cm.tp, cm.fn], [cm.fp, cm.tn]])
    fig, ax = plt.subplots(figsize=(4.5, 4), dpi=100)
    ax.imshow(grid, cmap="Blues", vmin=0, vmax=max(1, grid.max()))
    ax.set_xticks([0, 1], labels=[INFECTED, NOT_INFECTED])
    ax.set_yticks([0, 1], labels=[INFECTED, NOT_INFECTED])
    ax.set_xlabel("Predicted label")
    ax.set_ylabel("True label")
    ax.set_title(title)
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(grid[i, j]), ha="center", va="center",
                    color="white" if grid[i, j] > grid.max() / 2 else "black")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return out_path


# -- curves ---------------------------------------------------------------------


def plot_curves_from_table(table_path: str | Path, plots_dir: str | Path) -> tuple[Path, Path]:
    rows = read_history(table_path)
    plots_dir = Path(plots_dir)
    plots_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch_index for r in rows]
    paths = []
    for name, tr, va in (
        ("accuracy", [r.train_accuracy for r in rows], [r.val_accuracy for r in rows]),
        ("loss", [r.train_loss for r in rows], [r.val_loss for r in rows]),
    ):
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        ax.plot(epochs, tr, label=f"train {name}")
        ax.plot(epochs, va, label=f"val {name}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        ax.set_title(f"Training and validation {name}")
        ax.legend()
        fig.tight_layout()
        path = plots_dir / f"{name}.png"
        fig.savefig(path, format="png", metadata=_PNG_META)
        plt.close(fig)
        paths.append(path)
    return paths[0], paths[1]


def export_curves(history: TrainingHistory, out_dir: str | Path) -> dict[str, Path]:
    """Write ``history.csv`` plus ``plots/accuracy.png`` and ``plots/loss.png``."""
    if not history.epochs:
        raise ConfigError("history is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "history.csv"
    write_history(history, table)
    acc, loss = plot_curves_from_table(table, out_dir / "plots")
    return {"table": table, "accuracy": acc, "loss": loss}


# -- sweep ----------------------------------------------------------------------


@dataclass
class SweepResult:
    mixup_alpha: float
    cutmix_alpha: float
    val_accuracy: float
    val_loss: float
    run_dir: str
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def _fmt_alpha(a: float) -> str:
    return f"{a:g}"


def write_sweep_report(results: Sequence[SweepResult], path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in results:
            if r.failed:
                w.writerow((_fmt_alpha(r.mixup_alpha), _fmt_alpha(r.cutmix_alpha), "FAILED", "FAILED", r.run_dir))
            else:
                w.writerow((_fmt_alpha(r.mixup_alpha), _fmt_alpha(r.cutmix_alpha),
                            repr(r.val_accuracy), repr(r.val_loss), r.run_dir))
    return Path(path)


def sweep(grid: Sequence[tuple[float, float]], base_config: TrainConfig, data, spec: BackboneSpec,
          out_root: str | Path, deterministic: bool = True) -> tuple[list[SweepResult], Path]:
    """One training run per (mixup_alpha, cutmix_alpha) pair, same seed and splits.

    ``data`` is ``(train_data, val_data)``. Metrics are taken at each run's best
    epoch. A failing run is recorded and the sweep moves on.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    train_data, val_data = data
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    results = []
    for k, (ma, ca) in enumerate(grid):
        run_dir = out_root / f"run_{k:02d}_mixup{_fmt_alpha(ma)}_cutmix{_fmt_alpha(ca)}"
        try:
            cfg = dataclasses.replace(base_config, mixup_alpha=float(ma), cutmix_alpha=float(ca))
            model = build_model(spec, seed=cfg.seed)
            history, _ = train(model, train_data, val_data, cfg, run_dir, deterministic=deterministic)
            export_curves(history, run_dir)
            best = history.best
            results.append(SweepResult(float(ma), float(ca), best.val_accuracy, best.val_loss, str(run_dir)))
        except Exception as exc:
            log.error("sweep row %d (%s, %s) failed: %s", k, ma, ca, exc)
            results.append(SweepResult(float(ma), float(ca), math.nan, math.nan, str(run_dir),
                                       error=f"{type(exc).__name__}: {exc}"))
    report = write_sweep_report(results, out_root / "sweep_report.csv")
    return results, report
