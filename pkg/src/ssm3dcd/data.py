"""Bi-temporal samples: a synthetic generator, PNG pair ingestion and tiling.

Synthetic scenes share a smoothed-noise background between the two dates;
the second date additionally receives a few rectangular or elliptical
"buildings" whose union is the change label.  Each date gets its own global
illumination factor and pixel noise, so unchanged pixels differ
photometrically but not semantically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .network import ChangeMask

SPLITS = ("train", "val", "test")
SUBDIRS = ("A", "B", "label")
LABEL_THRESHOLD = 128
ILLUMINATION = 0.15
NOISE_SIGMA = 0.02
LABEL_FRACTION = (0.01, 0.5)


class DataError(ValueError):
    """Raised for unreadable or inconsistent data; ``path`` names the offender."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class BiTemporalSample:
    image_t1: np.ndarray
    image_t2: np.ndarray
    label: ChangeMask
    id: str

    def __post_init__(self):
        if not isinstance(self.label, ChangeMask):
            self.label = ChangeMask(self.label, threshold=LABEL_THRESHOLD / 255, source="ground truth")
        hw = self.label.mask.shape
        for name in ("image_t1", "image_t2"):
            img = getattr(self, name)
            if img.ndim != 3 or img.shape[:2] != hw:
                raise ValueError(f"sample {self.id}: {name} shape {img.shape} does not match label {hw}")


@dataclass
class DatasetSplit:
    samples: list = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate sample ids in split {self.split!r}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def arrays(self, indices=None, dtype=np.float32):
        """Stacked ``(I1, I2, labels)`` for the given sample indices."""
        picked = self.samples if indices is None else [self.samples[i] for i in indices]
        I1 = np.stack([s.image_t1 for s in picked]).astype(dtype)
        I2 = np.stack([s.image_t2 for s in picked]).astype(dtype)
        y = np.stack([s.label.mask for s in picked]).astype(dtype)
        return I1, I2, y


# ---------------------------------------------------------------- synthetic

def _background(rng, size: int) -> np.ndarray:
    coarse = gaussian_filter(rng.random((size, size, 3)), sigma=(size / 8, size / 8, 0), mode="wrap")
    fine = gaussian_filter(rng.random((size, size, 3)), sigma=(1.5, 1.5, 0), mode="wrap")
    tint = rng.uniform(0.3, 0.6, 3)
    img = tint + 2.5 * (coarse - coarse.mean()) + 0.6 * (fine - fine.mean())
    return np.clip(img, 0.0, 1.0)


def _shape_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.15, 0.85, 2) * size
    hh, hw = rng.uniform(0.06, 0.2, 2) * size
    theta = rng.uniform(0, np.pi) if rng.random() < 0.5 else 0.0
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if rng.random() < 0.5:
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    return (u / hw) ** 2 + (v / hh) ** 2 <= 1.0


def _photometric(rng, img: np.ndarray) -> np.ndarray:
    gain = 1.0 + rng.uniform(-ILLUMINATION, ILLUMINATION)
    return np.clip(img * gain + rng.normal(0.0, NOISE_SIGMA, img.shape), 0.0, 1.0)


def synth_pair(rng, size: int, n_shapes: int):
    """One ``(t1, t2, label)`` triple with exactly ``n_shapes`` inserted objects.

    With one or more shapes the draw is repeated until the changed fraction
    lies strictly inside ``LABEL_FRACTION``.
    """
    bg = _background(rng, size)
    while True:
        label = np.zeros((size, size), dtype=bool)
        t2 = bg.copy()
        for _ in range(n_shapes):
            m = _shape_mask(rng, size)
            roof = rng.uniform(0.0, 1.0, 3)
            # keep roofs visibly away from the local background
            roof = np.where(np.abs(roof - bg[m].mean(axis=0)) < 0.25, 1.0 - roof, roof)
            t2[m] = roof + rng.normal(0.0, 0.03, (int(m.sum()), 3))
            label |= m
        frac = label.mean()
        if n_shapes == 0 or LABEL_FRACTION[0] < frac < LABEL_FRACTION[1]:
            break
    return _photometric(rng, bg), _photometric(rng, np.clip(t2, 0.0, 1.0)), label.astype(np.uint8)


def gen_synthetic(seed: int, n: int, size: int = 64, split: str = "train", shapes=(1, 5)) -> DatasetSplit:
    """``n`` synthetic pairs of ``size x size``; bit-identical for a fixed seed."""
    if size <= 0 or size % 32:
        raise ValueError(f"synthetic image size must be a positive multiple of 32, got {size}")
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    lo, hi = shapes
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid shape-count range {shapes}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        t1, t2, label = synth_pair(rng, size, int(rng.integers(lo, hi + 1)))
        samples.append(BiTemporalSample(t1, t2, label, f"{split}_{seed}_{i:04d}"))
    return DatasetSplit(samples, split)


# ---------------------------------------------------------------- on disk

def _read_png(path: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if mode == "label" and im.mode not in ("L", "1", "P", "I", "I;16"):
                raise DataError(path, f"label must be single-channel, got mode {im.mode}")
            return np.asarray(im.convert("L" if mode == "label" else "RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(path, f"unreadable image ({exc})") from exc


def _png_names(directory: str) -> set:
    if not os.path.isdir(directory):
        raise DataError(directory, "directory does not exist")
    return {f for f in os.listdir(directory) if f.lower().endswith(".png")}


def load_pairs(dir_t1: str, dir_t2: str, dir_label: str, split: str = "train", names=None) -> DatasetSplit:
    """Load identically named PNGs from three directories, ordered by filename.

    Images are scaled to [0, 1]; labels must only contain 0 and 255 and are
    binarized at 128.  ``names`` restricts loading to those files.
    """
    dirs = (dir_t1, dir_t2, dir_label)
    sets = [_png_names(d) for d in dirs]
    union = set().union(*sets)
    for d, s in zip(dirs, sets):
        missing = sorted(union - s)
        if missing:
            raise DataError(os.path.join(d, missing[0]), "file missing from this directory")
    wanted = sorted(union) if names is None else list(names)
    samples = []
    for name in wanted:
        if name not in union:
            raise DataError(os.path.join(dir_t1, name), "listed in manifest but not found")
        a = _read_png(os.path.join(dir_t1, name), "image")
        b = _read_png(os.path.join(dir_t2, name), "image")
        label_path = os.path.join(dir_label, name)
        lab = _read_png(label_path, "label")
        if not np.isin(lab, (0, 255)).all() and not np.isin(lab, (0, 1)).all():
            odd = np.setdiff1d(np.unique(lab), (0, 255))
            # a few antialiased values are tolerated only at the threshold itself
            if not np.array_equal(odd, [LABEL_THRESHOLD]):
                raise DataError(label_path, f"non-binary label values {odd[:5].tolist()}")
        if a.shape != b.shape or a.shape[:2] != lab.shape:
            raise DataError(label_path, f"shape mismatch: t1 {a.shape}, t2 {b.shape}, label {lab.shape}")
        mask = (lab >= LABEL_THRESHOLD) if lab.max() > 1 else lab.astype(bool)
        samples.append(BiTemporalSample(a / 255.0, b / 255.0, mask.astype(np.uint8), os.path.splitext(name)[0]))
    return DatasetSplit(samples, split)


def load_root(root: str, split: str = "train", manifest: str | None = None) -> DatasetSplit:
    """Load ``<root>/{A,B,label}``; with a manifest, only that split's files."""
    names = None
    if manifest is not None:
        names = read_manifest(manifest)[split]
    return load_pairs(*(os.path.join(root, d) for d in SUBDIRS), split=split, names=names)


def save_split(split: DatasetSplit, root: str) -> list:
    """Write a split under ``<root>/{A,B,label}/<id>.png``; returns the filenames."""
    for d in SUBDIRS:
        os.makedirs(os.path.join(root, d), exist_ok=True)
    names = []
    for s in split:
        name = f"{s.id}.png"
        to8 = lambda img: np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)  # noqa: E731
        Image.fromarray(to8(s.image_t1)).save(os.path.join(root, "A", name))
        Image.fromarray(to8(s.image_t2)).save(os.path.join(root, "B", name))
        Image.fromarray(s.label.mask * 255).save(os.path.join(root, "label", name))
        names.append(name)
    return names


def write_manifest(path: str, membership: dict) -> None:
    unknown = set(membership) - set(SPLITS)
    if unknown:
        raise ValueError(f"manifest splits must be among {SPLITS}, got {sorted(unknown)}")
    with open(path, "w") as f:
        json.dump({k: sorted(v) for k, v in membership.items()}, f, indent=2, sort_keys=True)


def read_manifest(path: str) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(path, f"unreadable manifest ({exc})") from exc
    if not isinstance(data, dict) or set(data) - set(SPLITS):
        raise DataError(path, f"manifest must map split names {SPLITS} to filename lists")
    return {k: list(data.get(k, [])) for k in SPLITS}


# ---------------------------------------------------------------- tiling

def _starts(n: int, tile: int, stride: int) -> list:
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def tile(sample: BiTemporalSample, tile: int, stride: int) -> list:
    """Raster-order tiles; the last row/column is anchored to the image edge."""
    H, W = sample.label.mask.shape
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if tile < 1 or tile > H or tile > W:
        raise ValueError(f"tile {tile} does not fit image {H}x{W}")
    out = []
    for y in _starts(H, tile, stride):
        for x in _starts(W, tile, stride):
            win = (slice(y, y + tile), slice(x, x + tile))
            out.append(BiTemporalSample(sample.image_t1[win], sample.image_t2[win],
                                        ChangeMask(sample.label.mask[win], sample.label.threshold, sample.label.source),
                                        f"{sample.id}_y{y}_x{x}"))
    return out
