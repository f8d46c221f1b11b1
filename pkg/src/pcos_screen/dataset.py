"""Ultrasound image ingestion: directory scan, dedup, preprocessing, splits.

Expected layout::

    <root>/infected/*.{jpg,png}
    <root>/notinfected/*.{jpg,png}

Labels are encoded as the probability of ``infected`` (1.0 / 0.0).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigError,
    DatasetLayoutError,
    EmptyDatasetError,
    InfeasibleSplitError,
    InvalidImageError,
)

log = logging.getLogger(__name__)

INFECTED = "infected"
NOT_INFECTED = "notinfected"
CLASSES = (INFECTED, NOT_INFECTED)
SPLITS = ("train", "val", "test")

# ImageNet statistics, only used when PreprocessConfig.standardize is set.
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

MANIFEST_FIELDS = ("id", "path", "label", "split", "width", "height", "channels")


def label_to_target(label: str) -> float:
    if label not in CLASSES:
        raise ValueError(f"unknown label {label!r}; expected one of {CLASSES}")
    return 1.0 if label == INFECTED else 0.0


@dataclass(frozen=True)
class ImageRecord:
    id: str
    source_path: str
    label: str
    width: int
    height: int
    channels: int

    def __post_init__(self):
        if self.label not in CLASSES:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    split_assignment: dict[str, str] = field(default_factory=dict)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    duplicates_removed: int = 0

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CLASSES}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split_name: str) -> list[ImageRecord]:
        if split_name not in SPLITS:
            raise ConfigError(f"unknown split {split_name!r}; expected one of {SPLITS}")
        if not self.split_assignment:
            raise ConfigError("manifest has no split assignment; run split() first")
        return [r for r in self.records if self.split_assignment.get(r.id) == split_name]


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    crop: str = "center"
    rescale: float | None = None  # None: infer from the integer dtype's max
    standardize: bool = False

    def __post_init__(self):
        if self.target_size <= 0:
            raise ConfigError("target_size must be positive")
        if self.crop != "center":
            raise ConfigError(f"unsupported crop {self.crop!r}")
        if self.rescale is not None and self.rescale <= 0:
            raise ConfigError("rescale divisor must be positive")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        fr = self.fractions
        if any(f < 0 or f > 1 for f in fr):
            raise ConfigError(f"split fractions must lie in [0, 1], got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fr)!r}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


# -- scanning -----------------------------------------------------------------


def content_id(img: Image.Image) -> str:
    """Hash of the decoded pixels; re-encoded copies of one image share an id."""
    h = hashlib.sha256()
    h.update(f"{img.mode}:{img.width}x{img.height}:".encode())
    h.update(img.tobytes())
    return h.hexdigest()[:20]


def _decode(path: Path) -> Image.Image:
    with Image.open(path) as im:
        im.load()
        return im.copy()


def scan_dataset(root_dir: str | Path) -> DatasetManifest:
    root = Path(root_dir)
    missing = [c for c in CLASSES if not (root / c).is_dir()]
    if missing:
        raise DatasetLayoutError(
            f"{root}: missing class director{'y' if len(missing) == 1 else 'ies'} "
            f"{', '.join(repr(m) for m in missing)}; expected <root>/infected/ and "
            f"<root>/notinfected/ holding image files"
        )

    records: list[ImageRecord] = []
    skipped: list[tuple[str, str]] = []
    for label in CLASSES:
        for path in sorted((root / label).iterdir()):
            if not path.is_file() or path.name.startswith("."):
                continue
            try:
                img = _decode(path)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                skipped.append((str(path), f"undecodable: {type(exc).__name__}"))
                continue
            if img.width == 0 or img.height == 0:
                skipped.append((str(path), "zero-size image"))
                continue
            records.append(ImageRecord(
                id=content_id(img),
                source_path=str(path),
                label=label,
                width=img.width,
                height=img.height,
                channels=len(img.getbands()),
            ))

    if not records:
        raise EmptyDatasetError(f"{root}: no decodable images found")
    for path, reason in skipped:
        log.warning("skipped %s (%s)", path, reason)
    return DatasetManifest(records=records, skipped=skipped)


def dedup(manifest: DatasetManifest) -> DatasetManifest:
    """Keep the first record of every content hash, preserving order."""
    seen: set[str] = set()
    kept = []
    for r in manifest.records:
        if r.id in seen:
            continue
        seen.add(r.id)
        kept.append(r)
    removed = len(manifest.records) - len(kept)
    assignment = {k: v for k, v in manifest.split_assignment.items() if k in seen}
    return DatasetManifest(
        records=kept,
        split_assignment=assignment,
        skipped=list(manifest.skipped),
        duplicates_removed=manifest.duplicates_removed + removed,
    )


# -- preprocessing ----------------------------------------------------------


def _to_float_array(image, rescale: float | None) -> np.ndarray:
    if isinstance(image, Image.Image):
        if image.mode in ("P", "CMYK", "YCbCr", "LAB", "HSV"):
            image = image.convert("RGB")
        elif image.mode in ("LA", "PA"):
            image = image.convert("L")
        elif image.mode == "RGBA":
            image = image.convert("RGB")
        arr = np.asarray(image)
    else:
        arr = np.asarray(image)

    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise InvalidImageError(f"unsupported image shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidImageError(f"image has zero dimension: {arr.shape}")

    if rescale is None:
        if arr.dtype == np.bool_:
            rescale = 1.0
        elif np.issubdtype(arr.dtype, np.integer):
            rescale = float(np.iinfo(arr.dtype).max)
        else:
            rescale = 1.0
    out = arr.astype(np.float32) / np.float32(rescale)
    if out.ndim == 2:
        out = np.repeat(out[:, :, None], 3, axis=2)
    return out


def _resize_channel(ch: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.asarray(
        Image.fromarray(ch, mode="F").resize((width, height), Image.BILINEAR),
        dtype=np.float32,
    )


def preprocess(image, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Return a ``(size, size, 3)`` float32 array.

    The short side is resized (bilinear) to ``config.target_size`` and the long
    side is then center-cropped. Grayscale inputs are replicated to 3 channels.
    Values lie in [0, 1] unless ``standardize`` is enabled.
    """
    arr = _to_float_array(image, config.rescale)
    h, w = arr.shape[:2]
    s = config.target_size
    if h <= w:
        new_h, new_w = s, max(s, int(round(w * s / h)))
    else:
        new_h, new_w = max(s, int(round(h * s / w))), s
    if (new_h, new_w) != (h, w):
        arr = np.stack([_resize_channel(arr[:, :, c], new_w, new_h) for c in range(3)], axis=2)
    top = (new_h - s) // 2
    left = (new_w - s) // 2
    out = np.clip(arr[top:top + s, left:left + s], 0.0, 1.0)
    if config.standardize:
        out = (out - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(out, dtype=np.float32)


def load_image(record: ImageRecord | str | Path, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    path = record.source_path if isinstance(record, ImageRecord) else record
    try:
        img = _decode(Path(path))
    except (UnidentifiedImageError, OSError) as exc:
        raise InvalidImageError(f"cannot decode {path}: {exc}") from exc
    return preprocess(img, config)


# -- splitting ----------------------------------------------------------------


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment: every count is within 1 of n*fraction."""
    exact = [n * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    remainder = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:remainder]:
        counts[k] += 1
    return counts


def split(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()) -> DatasetManifest:
    if not manifest.records:
        raise EmptyDatasetError("cannot split an empty manifest")
    rng = np.random.default_rng(spec.seed)
    needed = sum(1 for f in spec.fractions if f > 0)

    if spec.stratified:
        groups = [[r.id for r in manifest.records if r.label == c] for c in CLASSES]
        groups = [g for g in groups if g]
    else:
        groups = [[r.id for r in manifest.records]]

    assignment: dict[str, str] = {}
    for ids in groups:
        if len(ids) < needed:
            raise InfeasibleSplitError(
                f"a class has {len(ids)} record(s) but {needed} splits need at least one each"
            )
        order = rng.permutation(len(ids))
        counts = _split_counts(len(ids), spec.fractions)
        start = 0
        for name, c in zip(SPLITS, counts):
            for k in order[start:start + c]:
                assignment[ids[k]] = name
            start += c

    return dataclasses.replace(manifest, split_assignment=assignment)


# -- persistence --------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write one JSON object per record with a fixed field order."""
    lines = []
    for r in manifest.records:
        row = {
            "id": r.id,
            "path": r.source_path,
            "label": r.label,
            "split": manifest.split_assignment.get(r.id),
            "width": r.width,
            "height": r.height,
            "channels": r.channels,
        }
        lines.append(json.dumps(row, separators=(", ", ": ")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    records, assignment = [], {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rec = ImageRecord(
                id=row["id"], source_path=row["path"], label=row["label"],
                width=int(row["width"]), height=int(row["height"]),
                channels=int(row["channels"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{n}: malformed manifest line ({exc})") from exc
        records.append(rec)
        if row.get("split") is not None:
            assignment[rec.id] = row["split"]
    if not records:
        raise EmptyDatasetError(f"{path}: manifest has no records")
    return DatasetManifest(records=records, split_assignment=assignment)


# -- data access for training -------------------------------------------------


class ArrayData:
    """In-memory images ``(N, S, S, 3)`` with targets in {0, 1}."""

    def __init__(self, images: np.ndarray, labels: Iterable[float], ids: Sequence[str] | None = None):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(list(labels), dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ConfigError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")
        self.ids = list(ids) if ids is not None else [f"sample-{k}" for k in range(len(self.labels))]

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, list[str]]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.images[idx], self.labels[idx], [self.ids[k] for k in idx]


class ManifestData:
    """Lazily decodes and preprocesses the records of one split."""

    def __init__(self, records: Sequence[ImageRecord], config: PreprocessConfig = PreprocessConfig()):
        self.records = list(records)
        self.config = config
        self.labels = np.array([label_to_target(r.label) for r in self.records], dtype=np.float32)
        self.ids = [r.id for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, list[str]]:
        idx = [int(k) for k in indices]
        s = self.config.target_size
        if not idx:
            return np.zeros((0, s, s, 3), np.float32), np.zeros(0, np.float32), []
        images = np.stack([load_image(self.records[k], self.config) for k in idx])
        return images, self.labels[idx], [self.ids[k] for k in idx]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split_name: str,
                      config: PreprocessConfig = PreprocessConfig()) -> "ManifestData":
        return cls(manifest.subset(split_name), config)
