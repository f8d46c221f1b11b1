"""Attributions for single predictions: Grad-CAM, LIME and exact Shapley values.

LIME and Shapley treat grid superpixels as players. A segment that is "off" is
filled with the image's per-channel mean colour. Both accept either a
:class:`~pcos_screen.model.ModelHandle` or any callable mapping an
``(N, H, W, 3)`` batch to infected probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import AttributionError, ConfigError

MAX_SHAPLEY_SEGMENTS = 14
DEFAULT_KERNEL_WIDTH = 0.25
OVERLAY_ALPHA = 0.4
OVERLAY_CMAP = "jet"

MaskValueFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class Heatmap:
    values: np.ndarray
    source_layer: str
    target: str = "infected"


@dataclass
class SuperpixelSegmentation:
    label_map: np.ndarray
    n_segments: int


@dataclass
class AttributionVector:
    weights: np.ndarray
    method: str
    baseline: str
    intercept: float | None = None
    empty_value: float | None = None
    full_value: float | None = None


def _normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; an all-zero map stays zero, a constant positive map becomes 1."""
    mx, mn = float(raw.max()), float(raw.min())
    if mx <= 0.0:
        return np.zeros_like(raw)
    if mx == mn:
        return np.ones_like(raw)
    return (raw - mn) / (mx - mn)


# -- Grad-CAM -------------------------------------------------------------------


def grad_cam(model, image: np.ndarray, layer: str | None = None) -> Heatmap:
    """Gradient-weighted activation map of ``layer`` for the infected logit.

    Channel weights are the spatial mean of d(logit)/dA; the weighted sum of
    activation channels is rectified, bilinearly upsampled to the image size
    and normalized.
    """
    module = model.module
    layer = layer or getattr(model, "feature_layer", "features")
    named = dict(module.named_modules())
    if layer not in named:
        raise AttributionError(f"layer {layer!r} not found in model")

    captured = {}
    handle = named[layer].register_forward_hook(lambda _m, _i, out: captured.__setitem__("a", out))
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[:2]
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].clone().requires_grad_(True)
    was_training = module.training
    module.eval()
    try:
        with torch.enable_grad():
            score = module(x).reshape(-1)[0]
            acts = captured.get("a")
            if acts is None or not isinstance(acts, torch.Tensor) or acts.dim() != 4:
                raise AttributionError(f"layer {layer!r} does not produce a 4-d feature map")
            if not acts.requires_grad:
                raise AttributionError(f"no gradient path from the score to layer {layer!r}")
            (grads,) = torch.autograd.grad(score, acts, allow_unused=True)
    finally:
        handle.remove()
        module.train(was_training)
    if grads is None:
        raise AttributionError(f"no gradient path from the score to layer {layer!r}")

    acts = acts.detach().double()
    weights = grads.detach().double().mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=(H, W), mode="bilinear", align_corners=False)[0, 0].numpy()
    return Heatmap(values=_normalize(np.maximum(cam, 0.0)), source_layer=layer)


# -- segmentation ---------------------------------------------------------------


def _grid_shape(H: int, W: int, n: int) -> tuple[int, int]:
    best = None
    for r in range(1, n + 1):
        if n % r:
            continue
        c = n // r
        if r > H or c > W:
            continue
        # prefer the tiling whose tiles are closest to square
        score = abs(math.log((H / r) / (W / c)))
        if best is None or score < best[0] - 1e-12:
            best = (score, r, c)
    if best is None:
        raise ConfigError(f"cannot tile a {H}x{W} image into {n} grid segments")
    return best[1], best[2]


def segment(image, n_segments: int, method: str = "grid") -> SuperpixelSegmentation:
    """Tile the image into exactly ``n_segments`` near-equal rectangles."""
    if method != "grid":
        raise ConfigError(f"unknown segmentation method {method!r}")
    shape = np.shape(image)
    H, W = shape[0], shape[1]
    if n_segments < 1 or n_segments > H * W:
        raise ConfigError(f"n_segments must lie in [1, {H * W}], got {n_segments}")
    rows, cols = _grid_shape(H, W, n_segments)
    row_id = (np.arange(H) * rows) // H
    col_id = (np.arange(W) * cols) // W
    label_map = row_id[:, None] * cols + col_id[None, :]
    return SuperpixelSegmentation(label_map=label_map.astype(np.int64), n_segments=n_segments)


# -- perturbation ---------------------------------------------------------------


def perturb(image: np.ndarray, seg: SuperpixelSegmentation, masks: np.ndarray,
            fill: np.ndarray | None = None) -> np.ndarray:
    """One image per mask row; segments with mask 0 take the fill colour."""
    image = np.asarray(image, dtype=np.float32)
    if fill is None:
        fill = image.reshape(-1, image.shape[-1]).mean(axis=0)
    fill_img = np.broadcast_to(np.asarray(fill, dtype=np.float32), image.shape)
    masks = np.asarray(masks, dtype=bool)
    keep = masks[:, seg.label_map]  # (N, H, W)
    return np.where(keep[..., None], image[None], fill_img[None])


def _predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "module") and hasattr(model, "spec"):
        from .model import predict

        return lambda batch: np.asarray(predict(model, batch), dtype=np.float64)
    return lambda batch: np.asarray(model(batch), dtype=np.float64)


def image_value_fn(model, image: np.ndarray, seg: SuperpixelSegmentation, batch_size: int = 64) -> MaskValueFn:
    """Map a ``(N, n_segments)`` mask matrix to infected probabilities."""
    f = _predictor(model)
    fill = np.asarray(image, dtype=np.float32).reshape(-1, np.shape(image)[-1]).mean(axis=0)

    def value(masks: np.ndarray) -> np.ndarray:
        out = [f(perturb(image, seg, masks[s:s + batch_size], fill)) for s in range(0, len(masks), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    return value


# -- LIME -----------------------------------------------------------------------


def _sample_masks(n_samples: int, n_segments: int, rng: np.random.Generator) -> np.ndarray:
    masks = rng.random((n_samples, n_segments)) < 0.5
    masks[0] = True  # the unperturbed instance
    return masks


def lime_weights(value_fn: MaskValueFn, n_segments: int, n_samples: int = 1000, seed: int = 0,
                 kernel_width: float = DEFAULT_KERNEL_WIDTH) -> AttributionVector:
    """Weighted linear surrogate fitted to ``value_fn`` on random segment masks.

    Sample weights are ``exp(-d**2 / kernel_width**2)`` with ``d`` the fraction
    of segments switched off.
    """
    if n_samples < n_segments + 1:
        raise ConfigError(f"n_samples must be >= n_segments + 1 = {n_segments + 1}")
    if kernel_width <= 0:
        raise ConfigError("kernel_width must be positive")
    rng = np.random.default_rng(seed)
    for _attempt in range(2):
        masks = _sample_masks(n_samples, n_segments, rng)
        design = np.hstack([np.ones((n_samples, 1)), masks.astype(np.float64)])
        d = 1.0 - masks.mean(axis=1)
        sw = np.sqrt(np.exp(-(d ** 2) / kernel_width ** 2))
        if np.linalg.matrix_rank(design * sw[:, None]) == n_segments + 1:
            break
    else:
        raise AttributionError("perturbation design matrix is rank deficient after resampling")
    y = np.asarray(value_fn(masks), dtype=np.float64)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    return AttributionVector(weights=coef[1:], method="lime", baseline="segment mean fill",
                             intercept=float(coef[0]))


def lime_explain(model, image: np.ndarray, seg: SuperpixelSegmentation, n_samples: int = 1000,
                 seed: int = 0, kernel_width: float = DEFAULT_KERNEL_WIDTH) -> AttributionVector:
    return lime_weights(image_value_fn(model, image, seg), seg.n_segments, n_samples, seed, kernel_width)


# -- exact Shapley ----------------------------------------------------------------


def coalition_masks(n: int) -> np.ndarray:
    """All ``2**n`` coalitions; row ``s`` has segment ``i`` on iff bit ``i`` of ``s`` is set."""
    s = np.arange(2 ** n, dtype=np.int64)
    return ((s[:, None] >> np.arange(n)) & 1).astype(bool)


def shapley_from_table(values: np.ndarray, n: int) -> np.ndarray:
    """Shapley values from the value of every coalition (indexed by bitmask)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (2 ** n,):
        raise ConfigError(f"expected {2 ** n} coalition values, got {values.shape}")
    s = np.arange(2 ** n, dtype=np.int64)
    size = ((s[:, None] >> np.arange(n)) & 1).sum(axis=1)
    fact = [math.factorial(k) for k in range(n + 1)]
    coef = np.array([fact[k] * fact[n - k - 1] / fact[n] for k in range(n)], dtype=np.float64)
    phi = np.empty(n)
    for i in range(n):
        bit = 1 << i
        without = s[(s & bit) == 0]
        phi[i] = np.sum(coef[size[without]] * (values[without | bit] - values[without]))
    return phi


def _check_shapley_cap(n_segments: int) -> None:
    if n_segments > MAX_SHAPLEY_SEGMENTS:
        raise ConfigError(
            f"exact Shapley enumeration is capped at {MAX_SHAPLEY_SEGMENTS} segments "
            f"(got {n_segments}); use LIME for finer segmentations"
        )
    if n_segments < 1:
        raise ConfigError("need at least one segment")


def shapley_values(value_fn: MaskValueFn, n_segments: int) -> AttributionVector:
    _check_shapley_cap(n_segments)
    values = np.asarray(value_fn(coalition_masks(n_segments)), dtype=np.float64)
    return AttributionVector(
        weights=shapley_from_table(values, n_segments), method="shapley",
        baseline="segment mean fill", empty_value=float(values[0]), full_value=float(values[-1]),
    )


def shapley_explain(model, image: np.ndarray, seg: SuperpixelSegmentation) -> AttributionVector:
    _check_shapley_cap(seg.n_segments)
    return shapley_values(image_value_fn(model, image, seg), seg.n_segments)


# -- rendering ------------------------------------------------------------------


def attribution_map(attr: AttributionVector, seg: SuperpixelSegmentation) -> np.ndarray:
    """Per-pixel map of positive (pro-infected) evidence, scaled to [0, 1]."""
    w = np.asarray(attr.weights, dtype=np.float64)
    if len(w) != seg.n_segments:
        raise ConfigError(f"{len(w)} weights for {seg.n_segments} segments")
    pos = np.clip(w, 0.0, None)
    top = pos.max() if len(pos) else 0.0
    scaled = pos / top if top > 0 else np.zeros_like(pos)
    return scaled[seg.label_map]


def _raw_path_for(overlay_path: Path) -> Path:
    name = overlay_path.name
    if name.endswith(".overlay.png"):
        return overlay_path.with_name(name[: -len(".overlay.png")] + ".raw.png")
    return overlay_path.with_name(overlay_path.stem + ".raw.png")


def render_overlay(image: np.ndarray, attribution, out_path: str | Path,
                   seg: SuperpixelSegmentation | None = None, raw_path: str | Path | None = None,
                   alpha: float = OVERLAY_ALPHA) -> tuple[Path, Path]:
    """Blend ``image`` with a jet-coloured attribution map; also save the raw map as grayscale.

    ``attribution`` is a :class:`Heatmap`, an ``(H, W)`` array in [0, 1], or an
    :class:`AttributionVector` together with ``seg``.
    """
    image = np.asarray(image, dtype=np.float64)
    if isinstance(attribution, Heatmap):
        heat = attribution.values
    elif isinstance(attribution, AttributionVector):
        if seg is None:
            raise ConfigError("an AttributionVector needs its segmentation to be rendered")
        heat = attribution_map(attribution, seg)
    else:
        heat = np.asarray(attribution, dtype=np.float64)
    if heat.shape != image.shape[:2]:
        raise ConfigError(f"attribution shape {heat.shape} does not match image {image.shape[:2]}")
    heat = np.clip(heat, 0.0, 1.0)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)

    colours = matplotlib.colormaps[OVERLAY_CMAP](heat)[..., :3]
    blended = (1.0 - alpha) * np.clip(image, 0.0, 1.0) + alpha * colours
    out_path = Path(out_path)
    raw_path = Path(raw_path) if raw_path is not None else _raw_path_for(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(blended * 255).astype(np.uint8), mode="RGB").save(out_path, format="PNG")
    Image.fromarray(np.round(heat * 255).astype(np.uint8), mode="L").save(raw_path, format="PNG")
    return out_path, raw_path


def write_weights(attr: AttributionVector, path: str | Path) -> Path:
    lines = [f"# method={attr.method} baseline={attr.baseline}"]
    if attr.intercept is not None:
        lines.append(f"# intercept={attr.intercept!r}")
    if attr.empty_value is not None:
        lines.append(f"# f_empty={attr.empty_value!r} f_full={attr.full_value!r}")
    lines.append("segment\tweight")
    lines += [f"{k}\t{float(w)!r}" for k, w in enumerate(attr.weights)]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)
