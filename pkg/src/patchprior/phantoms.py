"""Synthetic phantom families and dataset persistence.

Ellipse phantoms are the (mismatched) training distribution.  The
out-of-distribution family is built from axis-aligned rectangles inside a
large ring, a crude CT-slice analog that shares no shape primitive with the
ellipses.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import pt1

FAMILIES = ("ellipse", "ood")


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    n_ellipses: int = 20
    axis_range: tuple[float, float] = (0.02, 0.20)
    value_range: tuple[float, float] = (0.1, 0.5)
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.axis_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"axis_range must lie inside (0, 1), got {self.axis_range}")
        vlo, vhi = self.value_range
        if not (0.0 <= vlo <= vhi <= 1.0):
            raise ValueError(f"value_range must lie inside [0, 1], got {self.value_range}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.n_ellipses < 0:
            raise ValueError("n_ellipses must be non-negative")


# Defaults for the rectangle/ring family: fewer, larger shapes.
OOD_SPEC_DEFAULTS = dict(n_ellipses=10, axis_range=(0.03, 0.12), value_range=(0.1, 0.5))


def _rng(seed: int, index: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, k])))


def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(n, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="ij")  # (row, col) pixel centers


def ellipse_mask(n: int, center: tuple[float, float], axes: tuple[float, float], angle: float) -> np.ndarray:
    yy, xx = _grid(n)
    dx, dy = xx - center[0], yy - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def generate_ellipse_phantom(spec: PhantomSpec, index: int) -> np.ndarray:
    """Sum of random rotated ellipses clamped at 1; shape (C, N, N)."""
    n = spec.image_size
    img = np.zeros((spec.channels, n, n), dtype=np.float64)
    for k in range(spec.n_ellipses):
        rng = _rng(spec.seed, index, k)
        center = rng.uniform(0.0, n, size=2)
        axes = rng.uniform(*spec.axis_range, size=2) * n
        angle = rng.uniform(0.0, np.pi)
        values = rng.uniform(*spec.value_range, size=spec.channels)
        mask = ellipse_mask(n, (center[0], center[1]), (axes[0], axes[1]), angle)
        img += values[:, None, None] * mask
    return np.minimum(img, 1.0).astype(np.float32)


def generate_ood_phantom(spec: PhantomSpec, index: int) -> np.ndarray:
    """Axis-aligned rectangles plus one large ring, clamped at 1; shape (C, N, N)."""
    n = spec.image_size
    img = np.zeros((spec.channels, n, n), dtype=np.float64)
    if spec.n_ellipses == 0:
        return img.astype(np.float32)
    yy, xx = _grid(n)
    rng = _rng(spec.seed, index, 0)
    cx, cy = n / 2 + rng.uniform(-0.05, 0.05, size=2) * n
    outer = rng.uniform(0.36, 0.46) * n
    width = rng.uniform(0.04, 0.07) * n
    r = np.hypot(xx - cx, yy - cy)
    values = rng.uniform(*spec.value_range, size=spec.channels)
    img += values[:, None, None] * ((r <= outer) & (r > outer - width))
    for k in range(1, spec.n_ellipses + 1):
        rng = _rng(spec.seed, index, k)
        half = rng.uniform(*spec.axis_range, size=2) * n
        # centre uniform over the disk that keeps the rectangle inside the ring
        reach = max(outer - width - np.hypot(*half), 1.0)
        rad = reach * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2 * np.pi)
        center = np.array([cx + rad * np.cos(phi), cy + rad * np.sin(phi)])
        values = rng.uniform(*spec.value_range, size=spec.channels)
        mask = (np.abs(xx - center[0]) <= half[0]) & (np.abs(yy - center[1]) <= half[1])
        img += values[:, None, None] * mask
    return np.minimum(img, 1.0).astype(np.float32)


GENERATORS = {"ellipse": generate_ellipse_phantom, "ood": generate_ood_phantom}


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32
    provenance: dict

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError(f"dataset images must be (n, C, H, W), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("dataset pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def subset(self, indices) -> "Dataset":
        prov = dict(self.provenance, n_images=len(indices), subset=[int(i) for i in indices])
        return Dataset(self.images[list(indices)], prov)


def make_dataset(family: str, spec: PhantomSpec, n: int, start: int = 0) -> Dataset:
    if family not in GENERATORS:
        raise ValueError(f"unknown phantom family {family!r}")
    gen = GENERATORS[family]
    images = np.stack([gen(spec, i) for i in range(start, start + n)])
    prov = {
        "family": family,
        "image_size": spec.image_size,
        "channels": spec.channels,
        "n_images": n,
        "seed": spec.seed,
        "start_index": start,
        "spec": asdict(spec),
    }
    return Dataset(images, prov)


def _sidecar(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    pt1.write(path, ds.images)
    _sidecar(path).write_text(json.dumps(ds.provenance, indent=2, sort_keys=True))


def load_dataset(path: str | os.PathLike) -> Dataset:
    images = pt1.read(path)
    if images.ndim != 4:
        raise pt1.CorruptFileError(f"dataset tensor must be rank 4, got rank {images.ndim}")
    side = _sidecar(path)
    prov = json.loads(side.read_text()) if side.exists() else {}
    if prov.get("n_images", len(images)) != len(images):
        raise pt1.CorruptFileError("sidecar image count does not match payload")
    return Dataset(images, prov)
