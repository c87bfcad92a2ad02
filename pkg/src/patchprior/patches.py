"""Shifted patch partitions of a zero-padded image and the stochastic patch denoiser.

An N x N image is padded by P on every side.  Shift ``i`` offsets a
(k+1) x (k+1) grid of P x P patches (k = N / P) by ``(i // P, i % P)``
inside the padded image; the padded pixels outside that grid form the
border region, whose denoised value is defined to be zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class PatchLayout:
    N: int
    P: int
    i: int

    def __post_init__(self):
        if self.P <= 0 or self.N % self.P:
            raise ValueError(f"patch size {self.P} must divide image size {self.N}")
        if not 0 <= self.i < self.P * self.P:
            raise ValueError(f"shift index {self.i} outside [0, {self.P * self.P})")

    @property
    def k(self) -> int:
        return self.N // self.P

    @property
    def padded(self) -> int:
        return self.N + 2 * self.P

    @property
    def offset(self) -> tuple[int, int]:
        return divmod(self.i, self.P)

    @property
    def origins(self) -> list[tuple[int, int]]:
        dr, dc = self.offset
        starts = range(self.k + 1)
        return [(dr + a * self.P, dc + b * self.P) for a in starts for b in starts]

    def grid_mask(self) -> np.ndarray:
        mask = np.zeros((self.padded, self.padded), dtype=bool)
        dr, dc = self.offset
        span = (self.k + 1) * self.P
        mask[dr : dr + span, dc : dc + span] = True
        return mask

    def border_mask(self) -> np.ndarray:
        return ~self.grid_mask()


def make_layout(N: int, P: int, i: int | tuple[int, int]) -> PatchLayout:
    """Layout for shift ``i``, given either as a flat index or a (row, col) offset."""
    if isinstance(i, tuple):
        dr, dc = i
        if not (0 <= dr < P and 0 <= dc < P):
            raise ValueError(f"shift offset {i} outside [0, {P})^2")
        i = dr * P + dc
    return PatchLayout(N, P, int(i))


def positional_arrays(N: int, P: int) -> np.ndarray:
    """(2, N+2P, N+2P) array: X (varies along columns) then Y (varies along rows), spanning [-1, 1]."""
    size = N + 2 * P
    ramp = (2.0 * np.arange(size) / (size - 1) - 1.0).astype(np.float32)
    x = np.broadcast_to(ramp[None, :], (size, size))
    y = np.broadcast_to(ramp[:, None], (size, size))
    return np.stack([x, y])


def extract_patches(x_padded: np.ndarray, layout: PatchLayout, pos: np.ndarray) -> list[np.ndarray]:
    """List of (C+2, P, P) patches: image channels, then X, then Y."""
    size = layout.padded
    if x_padded.shape[1:] != (size, size) or pos.shape != (2, size, size):
        raise ValueError(
            f"expected padded image (C, {size}, {size}) and positions (2, {size}, {size}); "
            f"got {x_padded.shape} and {pos.shape}"
        )
    stacked = np.concatenate([x_padded, pos], axis=0)
    p = layout.P
    return [stacked[:, r : r + p, c : c + p] for r, c in layout.origins]


def assemble_patches(patches: list[np.ndarray], layout: PatchLayout) -> np.ndarray:
    """Inverse of :func:`extract_patches` on grid pixels; border pixels are zero."""
    c = patches[0].shape[0]
    out = np.zeros((c, layout.padded, layout.padded), dtype=patches[0].dtype)
    p = layout.P
    for patch, (r, cc) in zip(patches, layout.origins):
        out[:, r : r + p, cc : cc + p] = patch
    return out


# network callable: (R, P, P, C+2) NHWC batch and sigma -> (R, P, P, C)
PatchNet = Callable[[ad.Tensor, float], ad.Tensor]


def stochastic_denoise(x_t: np.ndarray, sigma: float, i: int, net: PatchNet, P: int) -> ad.Tensor:
    """Whole-image estimate of E[x0 | x_t] from one shifted patch partition.

    ``x_t`` is (C, N, N).  The result is an (N, N, C) tensor, differentiable
    with respect to whatever ``net`` closes over.
    """
    c, n, _ = x_t.shape
    layout = make_layout(n, P, i)
    size = layout.padded
    pos = positional_arrays(n, P)
    stacked = np.zeros((size, size, c + 2), dtype=x_t.dtype)
    stacked[P : P + n, P : P + n, :c] = np.moveaxis(x_t, 0, -1)
    stacked[:, :, c:] = np.moveaxis(pos, 0, -1)
    origins = layout.origins
    batch = np.stack([stacked[r : r + P, cc : cc + P, :] for r, cc in origins])
    out = net(ad.Tensor(batch), sigma)
    if out.shape != (len(origins), P, P, c):
        raise ValueError(f"patch network returned {out.shape}, expected {(len(origins), P, P, c)}")
    canvas = ad.place_patches(out, origins, (size, size))
    return ad.crop2d(ad.reshape(canvas, (1, size, size, c)), P, P, n, n)


def to_chw(t: ad.Tensor) -> np.ndarray:
    """(1, N, N, C) or (N, N, C) tensor data as a (C, N, N) array."""
    a = t.data
    if a.ndim == 4:
        a = a[0]
    return np.ascontiguousarray(np.moveaxis(a, -1, 0))
