"""Denoising score matching on patches, and small-dataset fine-tuning."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import ModelParams, denoise, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_update, ema_beta, ema_update
from .patches import positional_arrays

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "sigma_mean", "patch_size", "wall_seconds")


@dataclass
class TrainConfig:
    sigma_min: float = 0.002
    sigma_max: float = 40.0
    patch_sizes: tuple[int, ...] = (16,)
    patch_probs: tuple[float, ...] = (1.0,)
    batch_sizes: dict[int, int] = field(default_factory=lambda: {16: 32, 12: 48, 8: 64})
    whole_batch_size: int = 2
    inference_patch: int = 16
    lr: float = 2e-4
    steps: int = 2000
    ema_halflife: float = 10_000.0  # in images (one patch counts as one image)
    ema_rampup: float | None = 0.05
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        self.patch_probs = tuple(float(q) for q in self.patch_probs)
        self.batch_sizes = {int(k): int(v) for k, v in self.batch_sizes.items()}
        if len(self.patch_sizes) != len(self.patch_probs):
            raise ValueError("patch_sizes and patch_probs differ in length")
        if abs(sum(self.patch_probs) - 1.0) > 1e-9 or min(self.patch_probs) < 0:
            raise ValueError(f"patch probabilities must be non-negative and sum to 1, got {self.patch_probs}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(patch_sizes=(16, 12, 8), patch_probs=(0.5, 0.3, 0.2), lr=1e-4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_sizes"] = {str(k): v for k, v in self.batch_sizes.items()}
        return d


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream per optimizer step, so resumed runs replay exactly."""
    return np.random.default_rng([seed, step])


def draw_patch_size(cfg: TrainConfig, rng: np.random.Generator) -> int:
    return int(cfg.patch_sizes[rng.choice(len(cfg.patch_sizes), p=cfg.patch_probs)])


def sample_sigmas(cfg: TrainConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Log-uniform noise levels in [sigma_min, sigma_max]."""
    lo, hi = np.log(cfg.sigma_min), np.log(cfg.sigma_max)
    return np.exp(rng.uniform(lo, hi, size=n))


def sample_patch_batch(
    images: np.ndarray, p: int, batch: int, inference_patch: int, rng: np.random.Generator
) -> np.ndarray:
    """Random p x p crops of the zero-padded images with positional channels, NHWC.

    Images are padded by ``inference_patch`` and positions are those of the
    inference-time padded canvas, so a crop means the same place at any size.
    """
    n_img, c, n, _ = images.shape
    P = inference_patch
    size = n + 2 * P
    pos = np.moveaxis(positional_arrays(n, P), 0, -1)
    idx = rng.integers(0, n_img, size=batch)
    rows = rng.integers(0, size - p + 1, size=batch)
    cols = rng.integers(0, size - p + 1, size=batch)
    out = np.zeros((batch, p, p, c + 2), dtype=np.float32)
    for b in range(batch):
        canvas = np.zeros((size, size, c), dtype=np.float32)
        canvas[P : P + n, P : P + n] = np.moveaxis(images[idx[b]], 0, -1)
        r, cc = rows[b], cols[b]
        out[b, :, :, :c] = canvas[r : r + p, cc : cc + p]
        out[b, :, :, c:] = pos[r : r + p, cc : cc + p]
    return out


def sample_batch(model: ModelParams, images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Clean NHWC batch for one step, plus the patch size used (image size for whole models)."""
    if model.arch.kind == "whole":
        idx = rng.integers(0, len(images), size=cfg.whole_batch_size)
        return np.moveaxis(images[idx], 1, -1).astype(np.float32), images.shape[-1]
    p = draw_patch_size(cfg, rng)
    return sample_patch_batch(images, p, cfg.batch_sizes[p], cfg.inference_patch, rng), p


def dsm_loss(
    params: dict,
    model: ModelParams,
    clean: np.ndarray,
    sigmas: np.ndarray,
    noise: np.ndarray,
    rng: np.random.Generator | None = None,
) -> ad.Tensor:
    """Mean of ||D(x + eps, sigma) - x||^2 over pixels of the image channels."""
    C = model.arch.image_channels
    x_noisy = clean.copy()
    x_noisy[..., :C] += sigmas[:, None, None, None].astype(np.float32) * noise
    d = denoise(params, model.arch, x_noisy, sigmas, model.precond, rng=rng)
    return ad.mean(ad.square(ad.sub(d, clean[..., :C])))


def dsm_step(model: ModelParams, images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One Adam step of denoising score matching; updates ``model`` in place."""
    if len(images) == 0:
        raise ValueError("cannot train on an empty batch of images")
    if model.adam is None:
        model.adam = AdamState.for_params(model.params, lr=cfg.lr)
    clean, p = sample_batch(model, images, cfg, rng)
    b = len(clean)
    sigmas = sample_sigmas(cfg, b, rng)
    noise = rng.standard_normal(clean[..., : model.arch.image_channels].shape).astype(np.float32)
    tp = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    loss = dsm_loss(tp, model, clean, sigmas, noise, rng=rng)
    grads = dict(zip(tp, ad.grad(loss, tp.values())))
    model.adam.lr = cfg.lr
    adam_update(model.params, grads, model.adam)
    model.images_seen += b
    beta = ema_beta(b, model.images_seen, cfg.ema_halflife, cfg.ema_rampup)
    ema_update(model.ema, model.params, beta)
    model.step += 1
    return {"loss": float(loss.data), "sigma_mean": float(sigmas.mean()), "patch_size": p}


def train(
    model: ModelParams,
    images: np.ndarray,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    log_name: str = "train_log.csv",
    on_checkpoint: Callable[[ModelParams], None] | None = None,
) -> list[ModelParams]:
    """Run ``cfg.steps`` DSM steps from ``model``'s current state.

    Returns snapshots taken every ``checkpoint_every`` steps (and at the end);
    when ``out_dir`` is given they are also written as ``ckpt_<step>.ckpt``
    next to a CSV training log.
    """
    if len(images) == 0:
        raise ValueError("training dataset is empty")
    model.trained_sigma_range = (cfg.sigma_min, cfg.sigma_max)
    model.ema_halflife = cfg.ema_halflife
    images = np.asarray(images, dtype=np.float32)
    snapshots: list[ModelParams] = []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / log_name, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(LOG_COLUMNS)
    start = time.perf_counter()
    first = model.step
    try:
        for _ in range(cfg.steps):
            info = dsm_step(model, images, cfg, step_rng(cfg.seed, model.step))
            if writer is not None:
                writer.writerow([model.step, f"{info['loss']:.6g}", f"{info['sigma_mean']:.6g}",
                                 info["patch_size"], f"{time.perf_counter() - start:.3f}"])
            if model.step % 100 == 0:
                log.info("step %d loss %.5f", model.step, info["loss"])
            done = model.step - first
            if (cfg.checkpoint_every and done % cfg.checkpoint_every == 0) or done == cfg.steps:
                snap = model.copy()
                snapshots.append(snap)
                if out_dir is not None:
                    save_checkpoint(snap, out_dir / f"ckpt_{snap.step:06d}.ckpt")
                if on_checkpoint is not None:
                    on_checkpoint(snap)
    finally:
        if fh is not None:
            fh.close()
    return snapshots


def start_finetune(base: ModelParams | str | os.PathLike, cfg: TrainConfig) -> ModelParams:
    """Fine-tuning start state: the base EMA weights, fresh optimizer and EMA clock."""
    if not isinstance(base, ModelParams):
        base = load_checkpoint(base)
    model = base.copy()
    model.params = {k: v.copy() for k, v in base.ema.items()}
    model.ema = {k: v.copy() for k, v in base.ema.items()}
    model.adam = AdamState.for_params(model.params, lr=cfg.lr)
    model.images_seen = 0.0
    model.extra = dict(base.extra, finetuned_from_step=base.step)
    model.step = 0
    return model


def finetune(
    base: ModelParams | str | os.PathLike,
    small_dataset: np.ndarray,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
) -> list[ModelParams]:
    """Fine-tune with the varying patch-size scheme; returns the checkpoint series.

    The first element is the untouched starting point (budget 0).
    """
    if len(small_dataset) < 1:
        raise ValueError("fine-tuning needs at least one image")
    model = start_finetune(base, cfg)
    series = [model.copy()]
    series += train(model, small_dataset, cfg, out_dir, log_name="finetune_log.csv")
    return series


def eval_dsm_loss(
    model: ModelParams,
    images: np.ndarray,
    sigmas: np.ndarray | float,
    n_samples: int = 256,
    seed: int = 1234,
    use_ema: bool = True,
    patch_size: int | None = None,
    inference_patch: int = 16,
) -> float:
    """Held-out DSM loss at fixed noise level(s), deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=np.float32)
    if model.arch.kind == "whole":
        idx = rng.integers(0, len(images), size=n_samples)
        clean = np.moveaxis(images[idx], 1, -1)
    else:
        p = patch_size or inference_patch
        clean = sample_patch_batch(images, p, n_samples, inference_patch, rng)
    sig = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(clean),)).copy()
    noise = rng.standard_normal(clean[..., : model.arch.image_channels].shape).astype(np.float32)
    params = model.ema if use_ema else model.params
    total = 0.0
    chunk = 64
    for s in range(0, len(clean), chunk):
        sl = slice(s, s + chunk)
        loss = dsm_loss(params, model, clean[sl], sig[sl], noise[sl])
        total += float(loss.data) * len(clean[sl])
    return total / len(clean)


def identity_mse(images: np.ndarray, sigma: float, n_samples: int = 256, seed: int = 1234, inference_patch: int = 16) -> float:
    """MSE of the do-nothing denoiser on the same patches :func:`eval_dsm_loss` draws."""
    rng = np.random.default_rng(seed)
    clean = sample_patch_batch(np.asarray(images, dtype=np.float32), inference_patch, n_samples, inference_patch, rng)
    noise = rng.standard_normal(clean[..., :-2].shape)
    return float(np.mean((sigma * noise) ** 2))


def write_config(cfg: TrainConfig, path: str | os.PathLike) -> None:
    import json

    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
