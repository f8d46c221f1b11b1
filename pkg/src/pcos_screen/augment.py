"""MixUp and CutMix for binary targets.

Labels are the probability of ``infected``. All randomness comes from the
``numpy.random.Generator`` passed in; nothing touches global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

METHODS = ("none", "mixup", "cutmix")


@dataclass(frozen=True)
class MixCoefficient:
    lam: float
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class RectMask:
    """Axis-aligned patch replaced by the partner image."""

    x0: int
    y0: int
    w: int
    h: int
    H: int
    W: int

    def __post_init__(self):
        if not (0 <= self.x0 and self.x0 + self.w <= self.W and 0 <= self.y0 and self.y0 + self.h <= self.H):
            raise ValueError(f"patch {self} does not fit inside {self.H}x{self.W}")
        if self.w < 0 or self.h < 0:
            raise ValueError("negative patch extent")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def coverage(self) -> float:
        return self.area / (self.H * self.W)

    @property
    def kept_fraction(self) -> float:
        return (self.H * self.W - self.area) / (self.H * self.W)

    def to_array(self) -> np.ndarray:
        """Boolean ``(H, W)`` array, True inside the replaced patch."""
        m = np.zeros((self.H, self.W), dtype=bool)
        m[self.y0:self.y0 + self.h, self.x0:self.x0 + self.w] = True
        return m


@dataclass
class MixedSample:
    image: np.ndarray
    soft_label: float
    lambda_effective: float
    method: str
    partner_id: str | None = None


def sample_lambda(alpha: float, rng: np.random.Generator) -> MixCoefficient:
    """Draw the mixing weight from Beta(alpha, alpha); alpha == 0 disables mixing."""
    if alpha < 0 or not math.isfinite(alpha):
        raise ValueError(f"alpha must be a finite value >= 0, got {alpha}")
    if alpha == 0:
        return MixCoefficient(1.0, 0.0)
    return MixCoefficient(float(rng.beta(alpha, alpha)), float(alpha))


def _check_pair(x_i: np.ndarray, x_j: np.ndarray) -> None:
    if np.shape(x_i) != np.shape(x_j):
        raise ShapeError(f"image shapes differ: {np.shape(x_i)} vs {np.shape(x_j)}")


def mixup(x_i, y_i, x_j, y_j, lam: float, partner_id: str | None = None) -> MixedSample:
    _check_pair(x_i, x_j)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    x_i = np.asarray(x_i)
    x_j = np.asarray(x_j)
    image = lam * x_i + (1.0 - lam) * x_j
    return MixedSample(
        image=image.astype(x_i.dtype, copy=False),
        soft_label=lam * float(y_i) + (1.0 - lam) * float(y_j),
        lambda_effective=float(lam),
        method="mixup",
        partner_id=partner_id,
    )


def make_rect_mask(lam: float, H: int, W: int, rng: np.random.Generator) -> RectMask:
    """Patch of side ``sqrt(1 - lam)`` times the image side, placed uniformly.

    The patch always lies fully inside the image. Both placement draws happen
    even for an empty patch so the generator advances identically.
    """
    if H <= 0 or W <= 0:
        raise ValueError("image dimensions must be positive")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    side = math.sqrt(1.0 - lam)
    w = min(W, int(math.floor(W * side + 0.5)))
    h = min(H, int(math.floor(H * side + 0.5)))
    x0 = int(rng.integers(0, W - w + 1))
    y0 = int(rng.integers(0, H - h + 1))
    return RectMask(x0=x0, y0=y0, w=w, h=h, H=H, W=W)


def cutmix(x_i, y_i, x_j, y_j, mask: RectMask, partner_id: str | None = None) -> MixedSample:
    _check_pair(x_i, x_j)
    x_i = np.asarray(x_i)
    if x_i.shape[:2] != (mask.H, mask.W):
        raise ShapeError(f"mask is {mask.H}x{mask.W} but images are {x_i.shape[:2]}")
    image = x_i.copy()
    ys, xs = slice(mask.y0, mask.y0 + mask.h), slice(mask.x0, mask.x0 + mask.w)
    image[ys, xs] = np.asarray(x_j)[ys, xs]
    # label weight comes from the realized (integer) patch, not the sampled lambda
    lam = mask.kept_fraction
    return MixedSample(
        image=image,
        soft_label=lam * float(y_i) + (1.0 - lam) * float(y_j),
        lambda_effective=lam,
        method="cutmix",
        partner_id=partner_id,
    )


def mix_with_partners(images: Sequence[np.ndarray], labels: Sequence[float], partners: Sequence[int],
                      method: str, lam: float = 1.0, mask: RectMask | None = None,
                      ids: Sequence[str] | None = None) -> list[MixedSample]:
    """Mix sample ``k`` with sample ``partners[k]`` using one shared lambda/mask.

    A self-pairing is always the identity (lambda_effective = 1).
    """
    if ids is None:
        ids = [str(k) for k in range(len(images))]
    out = []
    for k, p in enumerate(partners):
        p = int(p)
        x, y = images[k], float(labels[k])
        if method == "none" or p == k:
            out.append(MixedSample(np.asarray(x).copy(), y, 1.0, method, ids[p] if method != "none" else None))
        elif method == "mixup":
            out.append(mixup(x, y, images[p], labels[p], lam, partner_id=ids[p]))
        elif method == "cutmix":
            if mask is None:
                raise ValueError("cutmix needs a mask")
            out.append(cutmix(x, y, images[p], labels[p], mask, partner_id=ids[p]))
        else:
            raise ValueError(f"unknown method {method!r}")
    return out


def augment_batch(batch: Sequence[tuple[np.ndarray, float]], mixup_alpha: float, cutmix_alpha: float,
                  rng: np.random.Generator, ids: Sequence[str] | None = None) -> list[MixedSample]:
    """Mix every sample with a partner from a random permutation of the batch.

    One method is chosen per batch, uniformly among the enabled ones (alpha > 0).
    Draw order: method, lambda, permutation, patch placement.
    """
    if mixup_alpha < 0 or cutmix_alpha < 0:
        raise ValueError("alphas must be >= 0")
    images = [np.asarray(x) for x, _ in batch]
    labels = [float(y) for _, y in batch]
    if ids is None:
        ids = [str(k) for k in range(len(batch))]

    enabled = [m for m, a in (("mixup", mixup_alpha), ("cutmix", cutmix_alpha)) if a > 0]
    if not enabled:
        return [MixedSample(x, y, 1.0, "none", None) for x, y in zip(images, labels)]
    if len(batch) < 2:
        raise ConfigError("augmentation needs a batch of at least 2 samples")

    method = enabled[int(rng.integers(len(enabled)))] if len(enabled) > 1 else enabled[0]
    alpha = mixup_alpha if method == "mixup" else cutmix_alpha
    lam = sample_lambda(alpha, rng).lam
    partners = rng.permutation(len(batch))
    mask = None
    if method == "cutmix":
        H, W = images[0].shape[:2]
        mask = make_rect_mask(lam, H, W, rng)
    return mix_with_partners(images, labels, partners, method, lam=lam, mask=mask, ids=ids)
