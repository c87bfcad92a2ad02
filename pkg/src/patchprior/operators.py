"""Linear forward operators with exact adjoints.

* ``radon``: parallel-beam CT, ray-driven line integrals with bilinear
  interpolation, assembled once into a sparse matrix so the adjoint is the
  exact transpose.  The image spans unit width, so a pixel has size 1/N and
  a full-width chord through a unit-valued image integrates to 1.
* ``blur``: zero-padded uniform box blur.
* ``downsample``: block averaging.

Images are (C, H, W) float32 arrays.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import pt1

KINDS = ("radon", "blur", "downsample")

# sample spacing along each ray, in pixels
RAY_STEP = 0.5


@lru_cache(maxsize=8)
def radon_matrix(n: int, n_views: int, n_detectors: int) -> sp.csr_matrix:
    """Sparse system matrix mapping a flattened n x n image to an (n_views * n_detectors) sinogram.

    Detector bins are one pixel apart; integrals are in units of the image width.
    """
    half = (n - 1) / 2.0
    reach = n / np.sqrt(2.0) + 1.0
    t = np.arange(-reach, reach + RAY_STEP / 2, RAY_STEP)
    s = np.arange(n_detectors) - (n_detectors - 1) / 2.0
    rows, cols, vals = [], [], []
    for v in range(n_views):
        theta = v * np.pi / n_views
        c, si = np.cos(theta), np.sin(theta)
        # point = s * (cos, sin) + t * (-sin, cos); x to the right, y down the rows
        px = s[:, None] * c - t[None, :] * si + half
        py = s[:, None] * si + t[None, :] * c + half
        ray = np.broadcast_to(v * n_detectors + np.arange(n_detectors)[:, None], px.shape)
        j0 = np.floor(px).astype(np.int64)
        i0 = np.floor(py).astype(np.int64)
        fx = px - j0
        fy = py - i0
        for di, dj, w in (
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        ):
            ii, jj = i0 + di, j0 + dj
            ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n) & (w > 0)
            rows.append(ray[ok])
            cols.append((ii * n + jj)[ok])
            vals.append(w[ok] * (RAY_STEP / n))
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_views * n_detectors, n * n),
    ).tocsr()
    mat.sum_duplicates()
    return mat.astype(np.float32)


def ramp_filter(n_detectors: int) -> np.ndarray:
    """Frequency response of the discrete Ram-Lak filter on a zero-padded grid."""
    size = int(2 ** np.ceil(np.log2(2 * n_detectors)))
    k = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-(size // 2) + 1, 0)])
    h = np.zeros(size)
    h[0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd]) ** 2
    return np.real(np.fft.fft(h))


@dataclass(frozen=True)
class ForwardOperator:
    """A linear map A with its exact adjoint.

    ``params`` holds ``n_views``/``n_detectors`` for radon, ``kernel_size``
    for blur and ``factor`` for downsample.
    """

    kind: str
    image_shape: tuple[int, int, int]
    params: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        c, h, w = self.image_shape
        if h != w:
            raise ValueError("operators require square images")
        if self.kind == "radon" and c != 1:
            raise ValueError("radon operator is single channel")
        if self.kind == "blur" and self.params["kernel_size"] % 2 == 0:
            raise ValueError("blur kernel size must be odd")
        if self.kind == "downsample" and h % self.params["factor"]:
            raise ValueError(f"image size {h} not divisible by factor {self.params['factor']}")

    @property
    def n(self) -> int:
        return self.image_shape[1]

    @property
    def measurement_shape(self) -> tuple[int, ...]:
        c, n, _ = self.image_shape
        if self.kind == "radon":
            return (self.params["n_views"], self.params["n_detectors"])
        if self.kind == "blur":
            return self.image_shape
        f = self.params["factor"]
        return (c, n // f, n // f)

    @property
    def matrix(self) -> sp.csr_matrix:
        return radon_matrix(self.n, self.params["n_views"], self.params["n_detectors"])

    def _check(self, a: np.ndarray, shape: tuple[int, ...], what: str) -> None:
        if a.shape != tuple(shape):
            raise ValueError(f"{self.kind} {what} expects shape {tuple(shape)}, got {a.shape}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._check(x, self.image_shape, "forward")
        if self.kind == "radon":
            out = self.matrix @ x.reshape(-1)
            return out.reshape(self.measurement_shape).astype(x.dtype, copy=False)
        if self.kind == "blur":
            k = self.params["kernel_size"]
            return ndimage.uniform_filter(x, size=(1, k, k), mode="constant", cval=0.0)
        f = self.params["factor"]
        c, n, _ = x.shape
        return x.reshape(c, n // f, f, n // f, f).mean(axis=(2, 4))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        self._check(y, self.measurement_shape, "adjoint")
        if self.kind == "radon":
            out = self.matrix.T @ y.reshape(-1)
            return out.reshape(self.image_shape).astype(y.dtype, copy=False)
        if self.kind == "blur":
            # symmetric kernel: the adjoint of zero-padded correlation is itself
            k = self.params["kernel_size"]
            return ndimage.uniform_filter(y, size=(1, k, k), mode="constant", cval=0.0)
        f = self.params["factor"]
        return np.repeat(np.repeat(y, f, axis=1), f, axis=2) / np.asarray(f * f, dtype=y.dtype)

    def gram(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.apply(x))

    def describe(self) -> dict:
        return {"kind": self.kind, "image_shape": list(self.image_shape), **self.params}


def radon(n: int, n_views: int, n_detectors: int) -> ForwardOperator:
    return ForwardOperator("radon", (1, n, n), {"n_views": n_views, "n_detectors": n_detectors})


def blur(n: int, channels: int = 1, kernel_size: int = 9) -> ForwardOperator:
    return ForwardOperator("blur", (channels, n, n), {"kernel_size": kernel_size})


def downsample(n: int, channels: int = 1, factor: int = 4) -> ForwardOperator:
    return ForwardOperator("downsample", (channels, n, n), {"factor": factor})


def default_detectors(n: int) -> int:
    """Detector count covering the image diagonal (96 for a 64-pixel image)."""
    return int(np.ceil(n * np.sqrt(2) / 8.0) * 8)


TASKS = ("ct20", "ct60", "deblur", "sr4")


def make_task_operator(task: str, n: int = 64, channels: int = 1) -> ForwardOperator:
    if task == "ct20":
        return radon(n, 20, default_detectors(n))
    if task == "ct60":
        return radon(n, 60, default_detectors(n))
    if task == "deblur":
        return blur(n, channels, 9)
    if task == "sr4":
        return downsample(n, channels, 4)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def radon_forward(x: np.ndarray, n_views: int, n_detectors: int) -> np.ndarray:
    """Sinogram of a (N, N) or (1, N, N) image."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] != x.shape[2]:
        raise ValueError("radon_forward requires a square image")
    return radon(x.shape[1], n_views, n_detectors).apply(x)


def radon_adjoint(sino: np.ndarray, n: int) -> np.ndarray:
    n_views, n_det = sino.shape
    return radon(n, n_views, n_det).adjoint(np.asarray(sino, dtype=np.float32))


def fbp(sino: np.ndarray, op: ForwardOperator) -> np.ndarray:
    """Filtered back-projection: Ram-Lak filtered views through the exact adjoint.

    Returns the unclamped reconstruction.
    """
    if op.kind != "radon":
        raise ValueError("fbp requires a radon operator")
    n_views, n_det = op.measurement_shape
    if sino.shape != (n_views, n_det):
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry {(n_views, n_det)}")
    resp = ramp_filter(n_det)
    padded = np.zeros((n_views, len(resp)))
    padded[:, :n_det] = sino
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * resp, axis=1))[:, :n_det]
    # n^2: one factor for the detector spacing in the ramp, one for the adjoint's 1/n
    return (np.pi * op.n**2 / n_views) * op.adjoint(filtered.astype(np.float32))


# ------------------------------------------------------------------ noise


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")


@dataclass
class Measurement:
    y: np.ndarray
    op: ForwardOperator
    sigma: float = 0.0
    seed: int = 0


def add_noise(clean: np.ndarray, noise: NoiseModel) -> np.ndarray:
    if noise.sigma == 0:
        return clean.copy()
    rng = np.random.default_rng(noise.seed)
    return (clean + noise.sigma * rng.standard_normal(clean.shape)).astype(clean.dtype)


def simulate(x: np.ndarray, op: ForwardOperator, noise: NoiseModel) -> Measurement:
    return Measurement(add_noise(op.apply(x), noise), op, noise.sigma, noise.seed)


def save_measurement(m: Measurement, path: str | os.PathLike) -> None:
    pt1.write(path, m.y)
    meta = {**m.op.describe(), "sigma_meas": m.sigma, "seed": m.seed}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_measurement(path: str | os.PathLike) -> Measurement:
    y = pt1.read(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    kind = meta["kind"]
    shape = tuple(meta["image_shape"])
    keys = {"radon": ("n_views", "n_detectors"), "blur": ("kernel_size",), "downsample": ("factor",)}
    if kind not in keys:
        raise ValueError(f"unknown operator kind {kind!r} in {path}")
    op = ForwardOperator(kind, shape, {k: meta[k] for k in keys[kind]})
    if y.shape != op.measurement_shape:
        raise ValueError(f"measurement shape {y.shape} does not match operator {op.measurement_shape}")
    return Measurement(y, op, meta.get("sigma_meas", 0.0), meta.get("seed", 0))
