"""Image ingestion, preprocessing, augmentation, splitting and batching.

PPM (P6, maxval 255) is decoded natively. Other formats are handed to
Pillow when it is installed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from .tensor import SeededRng

log = logging.getLogger(__name__)

PathLike = Union[str, Path]
IMAGE_SUFFIXES = {".ppm", ".png", ".jpg", ".jpeg", ".bmp"}


class ImageDecodeError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


@dataclass
class ImageRecord:
    pixels: np.ndarray  # H x W x 3 uint8
    label: Optional[str] = None
    source: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be H x W x 3 with H, W >= 1, got {px.shape}")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LabeledDataset:
    records: List[ImageRecord]
    class_names: List[str]
    skipped: int = 0

    def __post_init__(self):
        known = set(self.class_names)
        for r in self.records:
            if r.label not in known:
                raise ValueError(f"record {r.source!r} has label {r.label!r} outside {self.class_names}")

    def __len__(self):
        return len(self.records)

    def label_index(self, record: ImageRecord) -> int:
        return self.class_names.index(record.label)

    def counts(self) -> dict:
        return {c: sum(r.label == c for r in self.records) for c in self.class_names}


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    normalize: bool = False
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if self.normalize and min(self.std) <= 0:
            raise ValueError("std must be positive when normalization is enabled")


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    rotation: Tuple[float, float] = (-15.0, 15.0)
    brightness: Tuple[float, float] = (0.8, 1.2)
    color: Tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")
        for name in ("rotation", "brightness", "color"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: ({lo}, {hi})")
        if self.brightness[0] <= 0 or self.color[0] <= 0:
            raise ValueError("brightness and color factors must be positive")


NEUTRAL_AUGMENT = AugmentConfig(hflip_prob=0.0, rotation=(0.0, 0.0), brightness=(1.0, 1.0),
                                color=(1.0, 1.0))


# ---------------------------------------------------------------- image files

def _ppm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_ppm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, ImageDecodeError) as e:
        raise ImageDecodeError(f"{path}: bad PPM header") from e
    if magic != b"P6":
        raise ImageDecodeError(f"{path}: not a binary PPM (magic {magic!r})")
    if maxval != 255 or w < 1 or h < 1:
        raise ImageDecodeError(f"{path}: unsupported PPM geometry {w}x{h} maxval {maxval}")
    raster = data[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ImageDecodeError(f"{path}: truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path: PathLike, pixels: np.ndarray) -> None:
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise ImageDecodeError(f"{path}: only PPM is supported without Pillow") from None
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except Exception as e:  # Pillow raises a zoo of exception types
        raise ImageDecodeError(f"{path}: {e}") from e


def ingest_directory(root: PathLike) -> LabeledDataset:
    """Load ``root/<class>/<image>`` into a dataset; classes are sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"dataset root {root} has no class subdirectories")
    records, skipped = [], 0
    for d in class_dirs:
        found = 0
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            try:
                px = read_image(f)
            except (ImageDecodeError, OSError) as e:
                log.warning("skipping undecodable image %s: %s", f, e)
                skipped += 1
                continue
            records.append(ImageRecord(px, d.name, str(f)))
            found += 1
        if not found:
            raise IngestionError(f"class {d.name!r} has no decodable images")
    if skipped:
        log.warning("skipped %d undecodable file(s) under %s", skipped, root)
    return LabeledDataset(records, [d.name for d in class_dirs], skipped)


# ---------------------------------------------------------------- preprocessing

def _axis_weights(n_src: int, n_dst: int):
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0, n_src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, pos - i0


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an H x W x C array with centre-aligned, edge-clamped sampling."""
    img = np.asarray(img, dtype=np.float64)
    y0, y1, fy = _axis_weights(img.shape[0], height)
    x0, x1, fx = _axis_weights(img.shape[1], width)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(record: ImageRecord, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    s = config.target_size
    px = record.pixels
    img = px.astype(np.float64) if px.shape[:2] == (s, s) else resize_bilinear(px, s, s)
    x = img.transpose(2, 0, 1) / 255.0
    if config.normalize:
        x = (x - np.asarray(config.mean)[:, None, None]) / np.asarray(config.std)[:, None, None]
    return np.ascontiguousarray(x, dtype=np.float32)


# ---------------------------------------------------------------- augmentation

def hflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[:, ::-1])


def rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling; uncovered area is black.

    Returns float64 values; the caller rounds.
    """
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape[:2]
    if degrees == 0:
        return img.copy()
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: where each output pixel samples from in the source
    sx = cos * dx + sin * dy + cx
    sy = -sin * dx + cos * dy + cy
    x0, y0 = np.floor(sx).astype(np.intp), np.floor(sy).astype(np.intp)
    fx, fy = (sx - x0)[..., None], (sy - y0)[..., None]
    out = np.zeros_like(img)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + oy, x0 + ox
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = np.where(ok[..., None], img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
            out += vals * wy * wx
    return out


def adjust(pixels: np.ndarray, color=(1.0, 1.0, 1.0), brightness: float = 1.0) -> np.ndarray:
    """Per-channel colour factor, then global brightness; clamp to [0, 255] and round half up."""
    v = np.asarray(pixels, dtype=np.float64) * np.asarray(color, dtype=np.float64) * brightness
    return np.floor(np.clip(v, 0, 255) + 0.5).astype(np.uint8)


def augment(record: ImageRecord, config: AugmentConfig, rng: SeededRng) -> ImageRecord:
    """Random flip, rotation, colour and brightness, in that order.

    Every call draws the same number of values from ``rng`` regardless of
    which transforms end up being no-ops.
    """
    g = rng.generator
    flip = g.random() < config.hflip_prob
    angle = g.uniform(*config.rotation)
    color = g.uniform(config.color[0], config.color[1], size=3)
    bright = g.uniform(*config.brightness)
    px = hflip(record.pixels) if flip else record.pixels
    out = adjust(rotate(px, angle), color, bright)
    return replace(record, pixels=out)


# ---------------------------------------------------------------- splitting and batching

def split_dataset(ds: LabeledDataset, train_fraction: float = 0.8,
                  seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified split: each class is shuffled and cut at floor(fraction * n)."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = SeededRng(seed)
    train, val = [], []
    for c in ds.class_names:
        members = [r for r in ds.records if r.label == c]
        n_train = math.floor(round(train_fraction * len(members), 9))
        if n_train < 1 or n_train >= len(members):
            raise ValueError(f"class {c!r} with {len(members)} records cannot be split "
                             f"at {train_fraction} with both sides non-empty")
        order = rng.generator.permutation(len(members))
        train += [members[i] for i in order[:n_train]]
        val += [members[i] for i in order[n_train:]]
    return LabeledDataset(train, list(ds.class_names)), LabeledDataset(val, list(ds.class_names))


def batches(ds: LabeledDataset, batch_size: int = 32, shuffle_seed: Optional[int] = None,
            preprocess_config: PreprocessConfig = PreprocessConfig(),
            augment_config: Optional[AugmentConfig] = None
            ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(X, y)`` batches; the last batch may be short.

    ``shuffle_seed=None`` keeps dataset order. Augmentation, when given,
    draws from a stream derived from the same seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not len(ds):
        raise ValueError("cannot batch an empty dataset")
    seed = 0 if shuffle_seed is None else shuffle_seed
    order = (np.arange(len(ds)) if shuffle_seed is None
             else SeededRng(seed).generator.permutation(len(ds)))
    aug_rng = SeededRng(seed).spawn(1) if augment_config is not None else None
    for start in range(0, len(ds), batch_size):
        xs, ys = [], []
        for i in order[start:start + batch_size]:
            r = ds.records[i]
            if aug_rng is not None:
                r = augment(r, augment_config, aug_rng)
            xs.append(preprocess(r, preprocess_config))
            ys.append(ds.label_index(ds.records[i]))
        yield np.stack(xs), np.asarray(ys, dtype=np.float32)
