"""Preconditioned denoiser network and checkpoints.

The network F is a small fully convolutional two-level UNet with residual
blocks and SiLU activations.  It accepts any spatial size divisible by 4,
which is what lets one set of weights train on 16, 12 and 8 pixel patches.
The denoiser wraps it with the usual variance-preserving preconditioning::

    D(x, sigma) = c_skip * x + c_out * F(c_in * x, c_noise)

with ``c_noise = ln(sigma) / 4`` fed to the first layer as a constant channel.

Patch models additionally receive the two positional channels; whole-image
models do not.  Otherwise both share every code path.

Parameter count for ``base_channels=c``, ``C`` image channels and ``q``
positional channels (0 or 2)::

    conv_in   9 (C + q + 1) c + c
    5 res blocks    5 * 2 (9 c^2 + c)
    2 merge convs   2 (9 * 2c * c + c)
    conv_out  9 c C + C

which is 130 881 for the default grayscale patch model (c=32, C=1, q=2).
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import pt1
from .optim import AdamState

RES_BLOCKS = ("enc0", "enc1", "mid", "dec1", "dec0")
MERGES = ("merge1", "merge0")
CKPT_MAGIC = b"PPCK"


@dataclass(frozen=True)
class Architecture:
    kind: str = "patch"  # "patch" or "whole"
    image_channels: int = 1
    base_channels: int = 32
    input_size: int = 16  # patch side for patch models, image side for whole-image models
    dropout: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("patch", "whole"):
            raise ValueError(f"architecture kind must be 'patch' or 'whole', got {self.kind!r}")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 or 3")
        if self.base_channels < 1 or self.input_size % 4:
            raise ValueError("base_channels must be positive and input_size divisible by 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def positional(self) -> bool:
        return self.kind == "patch"

    @property
    def in_channels(self) -> int:
        return self.image_channels + (2 if self.positional else 0) + 1


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = 0.5

    def c_skip(self, s):
        return self.sigma_data**2 / (s**2 + self.sigma_data**2)

    def c_out(self, s):
        return s * self.sigma_data / np.sqrt(s**2 + self.sigma_data**2)

    def c_in(self, s):
        return 1.0 / np.sqrt(s**2 + self.sigma_data**2)

    def c_noise(self, s):
        return np.log(s) / 4.0


def _param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    c, C = arch.base_channels, arch.image_channels
    shapes = {"conv_in.w": (3, 3, arch.in_channels, c), "conv_in.b": (c,)}
    for blk in RES_BLOCKS:
        for j in (1, 2):
            shapes[f"{blk}.conv{j}.w"] = (3, 3, c, c)
            shapes[f"{blk}.conv{j}.b"] = (c,)
    for m in MERGES:
        shapes[f"{m}.w"] = (3, 3, 2 * c, c)
        shapes[f"{m}.b"] = (c,)
    shapes["conv_out.w"] = (3, 3, c, C)
    shapes["conv_out.b"] = (C,)
    return shapes


def init_params(arch: Architecture) -> dict[str, np.ndarray]:
    """He-normal kernels, zero biases, zero output layer (so F starts at 0)."""
    rng = np.random.default_rng(arch.seed)
    params = {}
    for name, shape in _param_shapes(arch).items():
        if name.endswith(".b") or name.startswith("conv_out"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
    return params


def param_count(arch: Architecture) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(arch).values())


@dataclass
class ModelParams:
    """Network weights with EMA shadow, optimizer state and training metadata."""

    arch: Architecture
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam: AdamState | None = None
    step: int = 0
    images_seen: float = 0.0
    sigma_data: float = 0.5
    trained_sigma_range: tuple[float, float] = (0.002, 40.0)
    ema_halflife: float = 10_000.0
    extra: dict = field(default_factory=dict)

    @property
    def precond(self) -> Preconditioner:
        return Preconditioner(self.sigma_data)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.ema.items()},
            self.adam.copy() if self.adam is not None else None,
            self.step,
            self.images_seen,
            self.sigma_data,
            tuple(self.trained_sigma_range),
            self.ema_halflife,
            dict(self.extra),
        )


def build_model(arch: Architecture, **kwargs) -> ModelParams:
    params = init_params(arch)
    return ModelParams(arch, params, {k: v.copy() for k, v in params.items()}, **kwargs)


# ------------------------------------------------------------------ forward


def _res_block(h, p, name, arch, rng):
    z = ad.conv2d(ad.silu(h), p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
    z = ad.silu(z)
    if rng is not None and arch.dropout > 0:
        keep = (rng.random(z.shape) >= arch.dropout).astype(z.dtype) / (1.0 - arch.dropout)
        z = ad.mul(z, keep)
    z = ad.conv2d(z, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
    return ad.add(h, z)


def network(p: dict, arch: Architecture, inp: ad.Tensor, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Raw network F on an NHWC batch that already carries the noise channel."""
    if inp.shape[-1] != arch.in_channels:
        raise ValueError(f"network expects {arch.in_channels} input channels, got {inp.shape[-1]}")
    if inp.shape[1] % 4 or inp.shape[2] % 4:
        raise ValueError(f"spatial size {inp.shape[1:3]} must be divisible by 4")
    h0 = ad.conv2d(inp, p["conv_in.w"], p["conv_in.b"])
    h0 = _res_block(h0, p, "enc0", arch, rng)
    h1 = _res_block(ad.avg_pool2(h0), p, "enc1", arch, rng)
    h2 = _res_block(ad.avg_pool2(h1), p, "mid", arch, rng)
    u1 = ad.conv2d(ad.concat([ad.upsample2(h2), h1]), p["merge1.w"], p["merge1.b"])
    u1 = _res_block(u1, p, "dec1", arch, rng)
    u0 = ad.conv2d(ad.concat([ad.upsample2(u1), h0]), p["merge0.w"], p["merge0.b"])
    u0 = _res_block(u0, p, "dec0", arch, rng)
    return ad.conv2d(ad.silu(u0), p["conv_out.w"], p["conv_out.b"])


def denoise(
    p: dict,
    arch: Architecture,
    x_in: ad.Tensor | np.ndarray,
    sigma,
    precond: Preconditioner = Preconditioner(),
    rng: np.random.Generator | None = None,
) -> ad.Tensor:
    """Preconditioned denoiser on an NHWC batch.

    ``x_in`` holds the noisy image channels followed, for patch models, by the
    positional channels.  ``sigma`` is a scalar or one value per batch entry.
    ``rng`` enables dropout (training only).
    """
    x_in = ad.as_tensor(x_in)
    C = arch.image_channels
    n = x_in.shape[0]
    expected = arch.in_channels - 1
    if len(x_in.shape) != 4 or x_in.shape[-1] != expected:
        raise ValueError(f"denoiser expects NHWC input with {expected} channels, got {x_in.shape}")
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1), (n,))
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    lo, hi = 1e-4, 1e3
    if np.any(sig < lo) or np.any(sig > hi):
        warnings.warn(f"sigma outside [{lo}, {hi}] is extrapolation", stacklevel=2)
    dt = x_in.dtype
    shape4 = (n, 1, 1, 1)
    c_skip = precond.c_skip(sig).reshape(shape4).astype(dt)
    c_out = precond.c_out(sig).reshape(shape4).astype(dt)
    c_in = precond.c_in(sig).reshape(shape4).astype(dt)
    c_noise = precond.c_noise(sig).reshape(shape4).astype(dt)

    img_t = ad.Tensor(x_in.data[..., :C])
    pieces = [ad.mul(img_t, c_in)]
    if arch.positional:
        pieces.append(ad.Tensor(x_in.data[..., C:]))
    pieces.append(ad.Tensor(np.broadcast_to(c_noise, x_in.shape[:3] + (1,)).astype(dt)))
    tp = {k: ad.as_tensor(v) for k, v in p.items()}
    f = network(tp, arch, ad.concat(pieces), rng)
    return ad.add(ad.mul(img_t, c_skip), ad.mul(f, c_out))


def score(p: dict, arch: Architecture, x_t: np.ndarray, sigma: float, precond: Preconditioner = Preconditioner()) -> np.ndarray:
    """(D(x_t, sigma) - x_t) / sigma^2 on the image channels."""
    if sigma == 0:
        raise ValueError("score is undefined at sigma = 0")
    d = denoise(p, arch, x_t, sigma, precond).data
    return (d - x_t[..., : arch.image_channels]) / sigma**2


# -------------------------------------------------------------- checkpoints


def save_checkpoint(model: ModelParams, path: str | os.PathLike) -> None:
    names = sorted(model.params)
    tensors = [model.params[k] for k in names] + [model.ema[k] for k in names]
    adam = None
    if model.adam is not None:
        a = model.adam
        adam = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
        tensors += [a.m[k] for k in names] + [a.v[k] for k in names]
    header = {
        "arch": asdict(model.arch),
        "names": names,
        "adam": adam,
        "step": model.step,
        "images_seen": model.images_seen,
        "sigma_data": model.sigma_data,
        "trained_sigma_range": list(model.trained_sigma_range),
        "ema_halflife": model.ema_halflife,
        "extra": model.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for t in tensors:
            fh.write(pt1.encode(t))


def load_checkpoint(path: str | os.PathLike, expect: Architecture | None = None) -> ModelParams:
    """Read a checkpoint; ``expect`` enforces identical tensor shapes (for fine-tuning)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise pt1.CorruptFileError(f"{path} is not a checkpoint")
        raw = fh.read(4)
        if len(raw) != 4:
            raise pt1.CorruptFileError("truncated checkpoint header")
        (size,) = struct.unpack("<I", raw)
        blob = fh.read(size)
        if len(blob) != size:
            raise pt1.CorruptFileError("truncated checkpoint header")
        header = json.loads(blob)
        tensors = []
        while (t := pt1.read_one(fh)) is not None:
            tensors.append(t)
    arch = Architecture(**header["arch"])
    names = header["names"]
    n = len(names)
    need = n * (4 if header["adam"] else 2)
    if len(tensors) != need:
        raise pt1.CorruptFileError(f"checkpoint holds {len(tensors)} tensors, expected {need}")
    shapes = _param_shapes(arch)
    if sorted(shapes) != names or any(shapes[k] != tensors[j].shape for j, k in enumerate(names)):
        raise pt1.CorruptFileError("checkpoint tensors do not match the stored architecture")
    if expect is not None:
        want = _param_shapes(expect)
        if want != shapes:
            raise ValueError(f"architecture mismatch: checkpoint {arch} vs requested {expect}")
    adam = None
    if header["adam"]:
        a = header["adam"]
        adam = AdamState(
            a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
            dict(zip(names, tensors[2 * n : 3 * n])),
            dict(zip(names, tensors[3 * n : 4 * n])),
        )
    return ModelParams(
        arch,
        dict(zip(names, tensors[:n])),
        dict(zip(names, tensors[n : 2 * n])),
        adam,
        header["step"],
        header["images_seen"],
        header["sigma_data"],
        tuple(header["trained_sigma_range"]),
        header["ema_halflife"],
        header.get("extra", {}),
    )
