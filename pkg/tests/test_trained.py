"""Properties of trained models; uses the cached artifacts in tests/artifacts.py."""

import csv

import numpy as np
import pytest

from patchprior.harness import load_images
from patchprior.metrics import psnr
from patchprior.model import load_checkpoint
from patchprior.operators import make_task_operator
from patchprior.solvers import SolverConfig, denoise_image, reconstruct_fixed_prior, reconstruct_self_supervised, sample_unconditional, task_config
from patchprior.training import TrainConfig, eval_dsm_loss, finetune, identity_mse

from . import artifacts

SIGMAS = (0.02, 0.1, 0.5)


@pytest.fixture(scope="module")
def patch_model():
    return load_checkpoint(artifacts.base_checkpoint("patch"))


@pytest.fixture(scope="module")
def held_out():
    return load_images(artifacts.HELD_OUT_REF)


@pytest.fixture(scope="module")
def target_held_out():
    """Held-out images from the fine-tuning family."""
    return load_images({**artifacts.SMALL_REF, "n": 20, "start": 2000})


def mean_loss(model, images, sigmas=SIGMAS):
    return float(np.mean([eval_dsm_loss(model, images, s) for s in sigmas]))


def test_denoising_gain_over_identity(patch_model, held_out):
    trained = eval_dsm_loss(patch_model, held_out, 0.1)
    identity = identity_mse(held_out, 0.1)
    assert trained <= 0.7 * identity


def test_training_loss_median_decreases():
    with open(artifacts.base_checkpoint("patch").parent / "train_log.csv") as fh:
        loss = np.array([float(r["loss"]) for r in csv.DictReader(fh)])
    assert np.median(loss[900:1000]) < np.median(loss[:100])


@pytest.mark.parametrize("kind", ["patch", "whole"])
def test_held_out_loss_halves_from_initialization(kind, held_out):
    from patchprior.model import build_model

    trained = load_checkpoint(artifacts.base_checkpoint(kind))
    init = build_model(trained.arch)
    assert mean_loss(trained, held_out) <= 0.5 * mean_loss(init, held_out)


def test_averaging_over_shifts_beats_every_single_shift(patch_model, held_out):
    sigma, P = 0.1, 16
    noise = np.random.default_rng(5).standard_normal(held_out.shape).astype(np.float32)
    single = np.zeros(P * P)
    averaged, var_max = 0.0, 0.0
    for x, z in zip(held_out, noise):
        outs = np.stack([denoise_image(patch_model.ema, patch_model, x + sigma * z, sigma, i, P).data[0]
                         for i in range(P * P)])
        single += ((outs - x[0]) ** 2).mean(axis=(1, 2))
        averaged += ((outs.mean(axis=0) - x[0]) ** 2).mean()
        var_max = max(var_max, float(outs.var(axis=0).max()))
    assert np.isfinite(var_max) and var_max > 0
    assert averaged < single.min()


def test_sample_mean_matches_training_mean(patch_model):
    train_mean = float(load_images(artifacts.TRAIN_REF).mean())
    samples = sample_unconditional(patch_model, SolverConfig(**artifacts.SAMPLER), 4)
    assert abs(float(samples.mean()) - train_mean) <= 0.05


def test_sixty_views_beat_twenty_in_distribution(patch_model, held_out):
    x = held_out[0]
    out = {}
    for task in ("ct20", "ct60"):
        op = make_task_operator(task)
        out[task] = psnr(reconstruct_fixed_prior(op.apply(x), op, patch_model, task_config(task, naive=True)).image, x)
    assert out["ct60"] > out["ct20"]


def test_refine_loss_descends_in_most_events(patch_model, target_held_out):
    x = target_held_out[0]
    op = make_task_operator("ct60")
    res = reconstruct_self_supervised(op.apply(x), op, patch_model, task_config("ct60", **artifacts.SS_OVERRIDES))
    events = res.refine_events()
    monotone = [all(b <= a for a, b in zip(ev, ev[1:])) for ev in events]
    assert len(events) == 40 and np.mean(monotone) >= 0.9


@pytest.mark.parametrize("kind", ["patch", "whole"])
def test_finetune_lowers_held_out_target_loss(kind, target_held_out):
    runs = artifacts.overfitting_dir()
    base = load_checkpoint(runs / kind / "budget_000000.ckpt")
    tuned = load_checkpoint(runs / kind / "budget_000500.ckpt")
    assert mean_loss(tuned, target_held_out) < mean_loss(base, target_held_out)


def test_whole_model_overfits_while_patch_stays_flat(target_held_out):
    runs = artifacts.overfitting_dir()
    curves = {}
    for kind in ("patch", "whole"):
        curves[kind] = [mean_loss(load_checkpoint(runs / kind / f"budget_{b:06d}.ckpt"), target_held_out)
                        for b in artifacts.BUDGETS[1:]]
    whole, patch = np.array(curves["whole"]), np.array(curves["patch"])
    assert whole[-1] > whole.min()
    assert patch.max() <= 1.1 * patch.min()


def test_null_shift_finetune_keeps_loss(patch_model, held_out, tmp_path):
    small = load_images({**artifacts.TRAIN_REF, "n": 10})
    before = mean_loss(patch_model, held_out)
    series = finetune(patch_model, small, TrainConfig.finetune_defaults(steps=100, seed=2), tmp_path)
    after = mean_loss(series[-1], held_out)
    assert abs(after - before) <= 0.2 * before
