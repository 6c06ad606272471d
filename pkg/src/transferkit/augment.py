"""Offline augmentation: two rotations, a translation, a brightness change
and a horizontal flip, so every source image yields six items.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import PurePosixPath

import numpy as np

from .dataset import Dataset, LabeledImage, as_image
from .errors import UsageError

VARIANTS = ("orig", "rot+30", "rot-30", "trans", "light", "flip")


@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: float = 30.0
    translation_fraction: float = 0.1
    lighting_factor: float = 1.25
    fill: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 <= self.translation_fraction <= 0.5:
            raise UsageError("translation_fraction must be in [0, 0.5]")
        if not self.lighting_factor > 0:
            raise UsageError("lighting_factor must be > 0")

    def variant_names(self) -> tuple:
        d = f"{self.rotation_degrees:g}"
        return ("orig", f"rot+{d}", f"rot-{d}", "trans", "light", "flip")


def _fill(fill) -> np.ndarray:
    f = np.asarray(fill, dtype=np.float64).reshape(3)
    return np.clip(f, 0.0, 1.0)


def rotate(img, degrees: float, fill=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Rotate about the image center with bilinear sampling, keeping the canvas.

    Positive angles turn the content counter-clockwise as displayed (rows
    growing downward). Samples falling outside the frame take ``fill``.
    """
    img = as_image(img)
    h, w, _ = img.shape
    fill = _fill(fill)
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse map: output pixel -> source position
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    padded = np.empty((h + 2, w + 2, 3))
    padded[:] = fill
    padded[1:-1, 1:-1] = img

    def tap(yi, xi):
        # anything beyond one pixel outside the frame reads the fill border
        return padded[np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)]

    v00, v01 = tap(y0, x0), tap(y0, x0 + 1)
    v10, v11 = tap(y0 + 1, x0), tap(y0 + 1, x0 + 1)
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return np.clip(top + fy * (bottom - top), 0.0, 1.0)


def translate(img, dx: int, dy: int, fill=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Shift content by ``(dx, dy)`` pixels: out[y, x] = in[y - dy, x - dx]."""
    img = as_image(img)
    h, w, _ = img.shape
    dx, dy = int(dx), int(dy)
    if abs(dx) >= w or abs(dy) >= h:
        raise UsageError(f"shift ({dx}, {dy}) must be smaller than image size {w}x{h}")
    out = np.empty_like(img)
    out[:] = _fill(fill)
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = img[
        max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)
    ]
    return out


def adjust_lighting(img, factor: float) -> np.ndarray:
    img = as_image(img)
    if not factor > 0:
        raise UsageError(f"lighting factor must be > 0, got {factor}")
    if factor == 1:
        return img.copy()
    return np.minimum(1.0, img * factor)


def flip_horizontal(img) -> np.ndarray:
    return as_image(img)[:, ::-1].copy()


def _item_rng(seed: int, item_id: str) -> np.random.Generator:
    digest = hashlib.sha256(item_id.encode("utf-8")).digest()
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "little")])


def variant_id(item_id: str, variant: str) -> str:
    p = PurePosixPath(item_id)
    return (p.parent / f"{p.stem}__{variant}{p.suffix}").as_posix()


def augment_image(item: LabeledImage, spec: AugmentSpec, seed: int) -> list[tuple[str, LabeledImage]]:
    """All six variants of one item as ``(variant_name, item)`` pairs."""
    img = item.image
    h, w, _ = img.shape
    rng = _item_rng(seed, item.id)
    mx = int(spec.translation_fraction * w)
    my = int(spec.translation_fraction * h)
    dx = int(rng.integers(-mx, mx + 1))
    dy = int(rng.integers(-my, my + 1))
    names = spec.variant_names()
    images = (
        img.copy(),
        rotate(img, spec.rotation_degrees, spec.fill),
        rotate(img, -spec.rotation_degrees, spec.fill),
        translate(img, dx, dy, spec.fill),
        adjust_lighting(img, spec.lighting_factor),
        flip_horizontal(img),
    )
    return [(v, LabeledImage(variant_id(item.id, v), im, item.label)) for v, im in zip(names, images)]


def augment_dataset(ds: Dataset, spec: AugmentSpec | None = None, seed: int = 0) -> Dataset:
    """Original plus five variants per image; output is exactly 6x the input."""
    if not len(ds):
        raise UsageError("cannot augment an empty dataset")
    spec = spec or AugmentSpec()
    items = [aug for it in ds for _, aug in augment_image(it, spec, seed)]
    return Dataset(tuple(items), ds.class_names)
