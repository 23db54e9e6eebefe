"""Procedural lesion images whose masks determine the four text labels.

Geometry: the left field is columns ``[0, W/2)`` and the right field columns
``[W/2, W)`` (image-left is anatomical-left).  Rows split into upper, middle
and lower thirds at ``round(H/3)`` and ``round(2H/3)``.  Lesions are filled
ellipses that never cross the midline.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import IntegrityError, InvalidArgumentError

logger = logging.getLogger(__name__)

# occupied-thirds pattern (upper, middle, lower) -> phrase index in the loc lists
_THIRDS_TO_LOC = {
    (False, False, False): 0,
    (True, False, False): 1,
    (False, True, False): 2,
    (False, False, True): 3,
    (True, False, True): 4,
    (True, True, False): 5,
    (False, True, True): 6,
    (True, True, True): 7,
}
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    min_lesions: int = 1
    max_lesions: int = 3
    radius_range: Tuple[float, float] = (3.0, 12.0)
    lesion_intensity: float = 0.35
    background_level: float = 0.35
    texture_amplitude: float = 0.08
    noise_sigma: float = 0.04

    def validate(self) -> None:
        n = self.image_size
        if n < 6 or n % 2:
            raise InvalidArgumentError("image_size must be even and >= 6")
        if not 1 <= self.min_lesions <= self.max_lesions:
            raise InvalidArgumentError("need 1 <= min_lesions <= max_lesions")
        rmin, rmax = self.radius_range
        if not 0 < rmin <= rmax:
            raise InvalidArgumentError("radius_range must satisfy 0 < min <= max")
        if 2 * math.ceil(rmax) + 1 > n // 2 or 2 * math.ceil(rmax) + 1 > n:
            raise InvalidArgumentError(
                f"lesion radius {rmax} does not fit in a {n // 2}-pixel field"
            )

    @property
    def third_bounds(self) -> Tuple[int, int]:
        n = self.image_size
        return round(n / 3), round(2 * n / 3)


@dataclass(frozen=True)
class Lesion:
    cx: int
    cy: int
    a: float
    b: float
    theta: float

    def extents(self) -> Tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        ex = math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2)
        ey = math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)
        return ex, ey

    def radial(self, n: int) -> np.ndarray:
        """Squared normalized elliptical radius at every pixel centre."""
        yy, xx = np.mgrid[0:n, 0:n]
        dx, dy = xx - self.cx, yy - self.cy
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v


@dataclass
class SegSample:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    mask: np.ndarray  # [1, H, W] uint8 in {0, 1}
    labels: Tuple[int, int, int, int]  # infection, num, left_loc, right_loc
    seed: int


def derive_text_labels(mask: np.ndarray, cfg: GenConfig = GenConfig()) -> Tuple[int, int, int, int]:
    """Infection / Num / LeftLoc / RightLoc indices implied by a binary mask."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError("mask must be square [H, W] or [1, H, W]")
    if not np.isin(m, (0, 1)).all():
        raise InvalidArgumentError("mask must be binary")
    m = m.astype(bool)
    if not m.any():
        raise InvalidArgumentError("mask is empty")
    n = m.shape[0]
    _, n_components = ndimage.label(m, structure=_EIGHT_CONNECTED)
    num = 0 if n_components == 1 else 1
    half = n // 2
    t1, t2 = round(n / 3), round(2 * n / 3)
    locs = []
    for fld in (m[:, :half], m[:, half:]):
        rows = fld.any(axis=1)
        locs.append(_THIRDS_TO_LOC[(bool(rows[:t1].any()), bool(rows[t1:t2].any()), bool(rows[t2:].any()))])
    infection = 1 if locs[0] and locs[1] else 0
    return infection, num, locs[0], locs[1]


def _draw_lesion(rng: np.random.Generator, cfg: GenConfig) -> Lesion:
    n = cfg.image_size
    half = n // 2
    rmin, rmax = cfg.radius_range
    a, b = rng.uniform(rmin, rmax, size=2)
    theta = rng.uniform(0.0, math.pi)
    ex, ey = Lesion(0, 0, a, b, theta).extents()
    lo = half if rng.integers(2) else 0
    cx = int(rng.integers(lo + math.ceil(ex), lo + half - math.ceil(ex)))
    cy = int(rng.integers(math.ceil(ey), n - math.ceil(ey)))
    return Lesion(cx, cy, float(a), float(b), float(theta))


def render_sample(lesions: Sequence[Lesion], cfg: GenConfig, rng: np.random.Generator, seed: int = 0) -> SegSample:
    """Rasterize ``lesions`` over a smooth textured background."""
    cfg.validate()
    n = cfg.image_size
    half = n // 2
    yy, xx = np.mgrid[0:n, 0:n] / n
    bg = np.full((n, n), cfg.background_level)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2) * rng.choice([-1, 1], size=2)
        phase = rng.uniform(0, 2 * math.pi)
        bg += cfg.texture_amplitude / 3 * np.cos(2 * math.pi * (fx * xx + fy * yy) + phase)
    mask = np.zeros((n, n), dtype=bool)
    bump = np.zeros((n, n))
    for les in lesions:
        r2 = les.radial(n)
        inside = r2 <= 1.0 + 1e-9  # keep lattice points exactly on the rim
        cols = np.nonzero(inside.any(axis=0))[0]
        if cols.size and (cols.min() < half) != (cols.max() < half):
            raise InvalidArgumentError("lesion straddles the midline")
        mask |= inside
        bump = np.maximum(bump, np.where(inside, cfg.lesion_intensity * (1.0 - 0.3 * r2), 0.0))
    img = bg + bump + rng.normal(0.0, cfg.noise_sigma, size=(n, n))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    labels = derive_text_labels(mask, cfg)
    return SegSample(img[None], mask[None].astype(np.uint8), labels, int(seed))


def generate_sample(seed: int, cfg: GenConfig = GenConfig()) -> SegSample:
    """One sample, fully determined by ``(seed, cfg)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    k = int(rng.integers(cfg.min_lesions, cfg.max_lesions + 1))
    lesions = [_draw_lesion(rng, cfg) for _ in range(k)]
    return render_sample(lesions, cfg, rng, seed)


def sample_seed(master_seed: int, index: int) -> int:
    """64-bit per-sample seed mixed from the master seed and the sample index."""
    lo, hi = np.random.SeedSequence([master_seed, index]).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


@dataclass
class SegDataset:
    images: np.ndarray  # [N, 1, H, W] float32
    masks: np.ndarray  # [N, 1, H, W] uint8
    labels: np.ndarray  # [N, 4] uint8
    seeds: np.ndarray  # [N] uint64
    indices: np.ndarray = field(default=None)  # [N] global sample indices

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.images))

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "SegDataset":
        return SegDataset(self.images[idx], self.masks[idx], self.labels[idx], self.seeds[idx], self.indices[idx])

    def label_marginals(self) -> List[Dict[int, int]]:
        out = []
        for c in range(4):
            vals, counts = np.unique(self.labels[:, c], return_counts=True)
            out.append({int(v): int(k) for v, k in zip(vals, counts)})
        return out

    def save(self, path) -> None:
        save_dataset(self, path)


def generate_dataset(master_seed: int, indices: Sequence[int], cfg: GenConfig = GenConfig()) -> SegDataset:
    samples = [generate_sample(sample_seed(master_seed, int(i)), cfg) for i in indices]
    return SegDataset(
        images=np.stack([s.image for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        labels=np.array([s.labels for s in samples], dtype=np.uint8).reshape(-1, 4),
        seeds=np.array([s.seed for s in samples], dtype=np.uint64),
        indices=np.asarray(indices, dtype=np.int64),
    )


def generate_split(
    seed: int,
    n_train: int = 512,
    n_val: int = 64,
    n_test: int = 128,
    cfg: GenConfig = GenConfig(),
) -> Dict[str, SegDataset]:
    """Train/val/test datasets over disjoint, consecutive index ranges."""
    if min(n_train, n_val, n_test) <= 0:
        raise InvalidArgumentError("split sizes must be positive")
    bounds = np.cumsum([0, n_train, n_val, n_test])
    out = {}
    for name, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
        out[name] = generate_dataset(seed, range(lo, hi), cfg)
        logger.info("%s split: %d samples, label marginals %s", name, hi - lo, out[name].label_marginals())
    return out


# ------------------------------------------------------------------ file I/O
_DATASET_MAGIC = b"STPD1"
_DATASET_SIZE = 64


def save_dataset(ds: SegDataset, path) -> None:
    """Binary layout: magic, u32 count, then per sample image f32, mask u8, 4 label bytes, u64 seed."""
    n = _DATASET_SIZE
    if ds.images.shape[1:] != (1, n, n):
        raise InvalidArgumentError(f"dataset files hold {n}x{n} images only")
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<I", len(ds)))
        for i in range(len(ds)):
            fh.write(ds.images[i, 0].astype("<f4").tobytes())
            fh.write(ds.masks[i, 0].astype(np.uint8).tobytes())
            fh.write(ds.labels[i].astype(np.uint8).tobytes())
            fh.write(struct.pack("<Q", int(ds.seeds[i])))


def load_dataset(path) -> SegDataset:
    n = _DATASET_SIZE
    raw = Path(path).read_bytes()
    if raw[:5] != _DATASET_MAGIC:
        raise IntegrityError(f"{path}: not a dataset file")
    (count,) = struct.unpack_from("<I", raw, 5)
    rec = np.dtype([("image", "<f4", (n, n)), ("mask", "u1", (n, n)), ("labels", "u1", (4,)), ("seed", "<u8")])
    if len(raw) != 9 + count * rec.itemsize:
        raise IntegrityError(f"{path}: truncated or oversized dataset file")
    arr = np.frombuffer(raw, dtype=rec, count=count, offset=9)
    return SegDataset(
        images=arr["image"].astype(np.float32)[:, None],
        masks=arr["mask"].copy()[:, None],
        labels=arr["labels"].copy(),
        seeds=arr["seed"].astype(np.uint64),
    )
