"""Labeled image datasets: PPM codec, bilinear resize, directory ingestion,
stratified splitting and a synthetic five-class shapes generator.

Images are float64 arrays shaped ``(height, width, 3)`` with channels in
[0, 1]. Item ids are POSIX-style relative paths (``class/stem.ppm``).
"""

from __future__ import annotations

import csv
import io
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DecodeError, UsageError

log = logging.getLogger(__name__)

SHAPE_CLASSES = ("circle", "plus", "square", "stripes", "triangle")


def as_image(pixels) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise UsageError(f"image must be (height, width, 3), got shape {img.shape}")
    return img


def image_to_volume(img) -> np.ndarray:
    """(H, W, 3) image -> (3, H, W) network input."""
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)))


@dataclass(frozen=True, eq=False)
class LabeledImage:
    id: str
    image: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Items sorted by id; ``label`` indexes ``class_names``."""

    items: tuple
    class_names: tuple
    skipped: tuple = field(default=())

    def __post_init__(self):
        names = tuple(self.class_names)
        if len(set(names)) != len(names):
            raise DataError(f"duplicate class names: {names}")
        items = tuple(sorted(self.items, key=lambda it: it.id))
        ids = [it.id for it in items]
        if len(set(ids)) != len(ids):
            raise DataError("item ids must be unique within a dataset")
        for it in items:
            if not 0 <= it.label < len(names):
                raise DataError(f"label {it.label} of {it.id!r} outside [0, {len(names)})")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "skipped", tuple(self.skipped))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def volumes(self) -> np.ndarray:
        """All images stacked as an (N, 3, H, W) batch."""
        if not self.items:
            raise UsageError("dataset is empty")
        shapes = {it.image.shape for it in self.items}
        if len(shapes) != 1:
            raise DataError(f"images have mixed sizes {sorted(shapes)}; resize first")
        return np.stack([image_to_volume(it.image) for it in self.items])

    def subset(self, keep: Callable[[LabeledImage], bool]) -> "Dataset":
        return Dataset(tuple(it for it in self.items if keep(it)), self.class_names)

    def select_classes(self, names: Sequence[str]) -> "Dataset":
        """Keep only ``names`` and relabel them by their position in ``names``."""
        missing = [n for n in names if n not in self.class_names]
        if missing:
            raise UsageError(f"unknown classes {missing}")
        remap = {self.class_names.index(n): i for i, n in enumerate(names)}
        items = tuple(
            LabeledImage(it.id, it.image, remap[it.label]) for it in self.items if it.label in remap
        )
        return Dataset(items, tuple(names))


# --------------------------------------------------------------------------
# PPM


_TOKEN = re.compile(rb"\S+")


def _header_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    pos = 0
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DecodeError("truncated PPM header", pos)
        if data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise DecodeError("unterminated comment in PPM header", pos)
            pos = nl + 1
            continue
        m = _TOKEN.match(data, pos)
        tok = m.group()
        if b"#" in tok:
            tok = tok[: tok.index(b"#")]
        tokens.append((tok, pos))
        pos += len(tok)
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after PPM header", pos)
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode binary PPM (P6, maxval 255) into an (H, W, 3) image in [0, 1]."""
    if data[:2] != b"P6":
        raise DecodeError(f"bad magic {data[:2]!r}, expected b'P6'", 0)
    tokens, start = _header_tokens(data[2:], 3)
    values = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise DecodeError(f"invalid header field {tok!r}", off + 2)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise DecodeError(f"invalid dimensions {width}x{height}", tokens[0][1] + 2)
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval} (only 255)", tokens[2][1] + 2)
    start += 2
    need = width * height * 3
    raster = data[start : start + need]
    if len(raster) < need:
        raise DecodeError(f"truncated raster: expected {need} bytes, got {len(raster)}", start + len(raster))
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def encode_ppm(img) -> bytes:
    img = as_image(img)
    h, w, _ = img.shape
    raster = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_ppm(path, img) -> None:
    write_bytes_atomic(path, encode_ppm(img))


# --------------------------------------------------------------------------
# resize


def _sample_positions(n_in: int, n_out: int):
    # half-pixel centers: output i samples input coordinate (i + .5) * in/out - .5
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    img = as_image(img)
    if out_w < 1 or out_h < 1:
        raise UsageError(f"output size must be >= 1, got {out_w}x{out_h}")
    h, w, _ = img.shape
    y0, y1, fy = _sample_positions(h, out_h)
    x0, x1, fx = _sample_positions(w, out_w)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = img[y0][:, x0] + fx * (img[y0][:, x1] - img[y0][:, x0])
    bottom = img[y1][:, x0] + fx * (img[y1][:, x1] - img[y1][:, x0])
    out = top + fy * (bottom - top)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# ingestion and manifests


def ingest_directory(root, image_size: int | None = None) -> Dataset:
    """Load ``root/<class>/<image>.ppm``; classes are sorted subdirectory names.

    Undecodable files are logged, skipped and listed in ``Dataset.skipped``.
    With ``image_size`` every image is resized to a square of that side.
    """
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} is not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    items, skipped = [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir(), key=lambda p: p.name):
            if not f.is_file() or f.suffix.lower() != ".ppm":
                continue
            rel = PurePosixPath(cdir.name, f.name).as_posix()
            try:
                img = read_ppm(f)
            except DecodeError as e:
                log.warning("skipping %s: %s", rel, e)
                skipped.append(rel)
                continue
            if image_size is not None and img.shape[:2] != (image_size, image_size):
                img = resize_bilinear(img, image_size, image_size)
            items.append(LabeledImage(rel, img, label))
    if not items:
        raise UsageError(f"no decodable images in class subdirectories of {root}")
    return Dataset(tuple(items), tuple(d.name for d in class_dirs), tuple(skipped))


def write_dataset(ds: Dataset, root) -> None:
    """Write every item as ``root/<id>`` plus ``root/manifest.csv``."""
    root = Path(root)
    for it in ds:
        write_ppm(root / it.id, it.image)
    write_bytes_atomic(root / "manifest.csv", manifest_csv(ds).encode("utf-8"))


def manifest_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "class_name", "label_index"])
    for it in ds:
        w.writerow([it.id, ds.class_names[it.label], it.label])
    return buf.getvalue()


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise UsageError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def source_id(item_id: str) -> str:
    """Strip an augmentation suffix: ``a/x__rot+30.ppm`` -> ``a/x.ppm``."""
    p = PurePosixPath(item_id)
    stem = p.stem.split("__", 1)[0]
    return (p.parent / (stem + p.suffix)).as_posix()


def _take_count(n: int, fraction: float) -> int:
    k = int(round(n * fraction))
    return min(max(k, 1), n - 1)


def stratified_split(ds: Dataset, spec: SplitSpec, group: Callable[[str], str] | None = None):
    """Split into ``(train, test)`` with ``test_fraction`` of each class in test.

    ``group`` maps item ids to a group key; all items of a group land on the
    same side (used to keep augmented variants with their source image).
    """
    key = group or (lambda s: s)
    strata: dict[int, dict[str, list]] = {}
    for it in ds:
        c = it.label if spec.stratified else 0
        strata.setdefault(c, {}).setdefault(key(it.id), []).append(it)
    test_ids = set()
    for c in sorted(strata):
        groups = sorted(strata[c])
        if len(groups) < 2:
            name = ds.class_names[c] if spec.stratified else "dataset"
            raise UsageError(f"class {name!r} has fewer than 2 items; cannot split")
        rng = np.random.default_rng([spec.seed, c])
        order = rng.permutation(len(groups))
        for gi in order[: _take_count(len(groups), spec.test_fraction)]:
            test_ids.update(it.id for it in strata[c][groups[gi]])
    train = ds.subset(lambda it: it.id not in test_ids)
    test = ds.subset(lambda it: it.id in test_ids)
    return train, test


# --------------------------------------------------------------------------
# synthetic shapes


def _shape_mask(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    scale = rng.uniform(0.25, 0.38) * side
    cx = side / 2 + rng.uniform(-0.12, 0.12) * side
    cy = side / 2 + rng.uniform(-0.12, 0.12) * side
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx**2 + dy**2 <= scale**2
    if kind == "square":
        t = max(1.5, 0.22 * scale)
        outer = (np.abs(dx) <= scale) & (np.abs(dy) <= scale)
        inner = (np.abs(dx) <= scale - t) & (np.abs(dy) <= scale - t)
        return outer & ~inner
    if kind == "plus":
        t = max(1.5, 0.3 * scale)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= scale)) | ((np.abs(dy) <= t) & (np.abs(dx) <= scale))
    if kind == "triangle":
        # apex up; half-width grows linearly from apex to base
        top, bottom = cy - scale, cy + scale
        frac = (yy - top) / (bottom - top)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * scale)
    if kind == "stripes":
        period = rng.uniform(0.18, 0.3) * side
        phase = rng.uniform(0, period)
        return ((yy + phase) % period) < period / 2
    raise UsageError(f"unknown shape {kind!r}")


def synth_shapes(per_class: int, side: int = 32, seed: int = 0) -> Dataset:
    """Five gray-level shape classes with seeded position/scale/intensity jitter."""
    if per_class < 1:
        raise UsageError("per_class must be >= 1")
    if side < 16:
        raise UsageError("side must be >= 16")
    items = []
    for label, name in enumerate(SHAPE_CLASSES):
        for i in range(per_class):
            rng = np.random.default_rng([seed, label, i])
            mask = _shape_mask(name, side, rng)
            bg = rng.uniform(0.0, 0.35)
            fg = rng.uniform(0.6, 1.0)
            gray = np.where(mask, fg, bg) + rng.normal(0.0, 0.03, size=mask.shape)
            img = np.repeat(np.clip(gray, 0.0, 1.0)[:, :, None], 3, axis=2)
            # quantize so the in-memory dataset equals its PPM encoding
            img = np.rint(img * 255.0) / 255.0
            items.append(LabeledImage(f"{name}/{name}_{i:04d}.ppm", img, label))
    return Dataset(tuple(items), SHAPE_CLASSES)
