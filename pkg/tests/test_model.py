import dataclasses

import numpy as np
import pytest

from patchprior import autodiff as ad
from patchprior import model as M
from patchprior import pt1
from patchprior.model import (
    Architecture,
    Preconditioner,
    build_model,
    denoise,
    load_checkpoint,
    param_count,
    save_checkpoint,
    score,
)
from patchprior.training import TrainConfig, dsm_loss, dsm_step, step_rng

from .helpers import fd_check


def closed_form_count(c, C, q):
    return (9 * (C + q + 1) * c + c) + 5 * 2 * (9 * c * c + c) + 2 * (9 * 2 * c * c + c) + (9 * c * C + C)


@pytest.mark.parametrize("kind,C", [("patch", 1), ("whole", 1), ("patch", 3), ("whole", 3)])
def test_parameter_count_closed_form(kind, C):
    arch = Architecture(kind=kind, image_channels=C)
    q = 2 if kind == "patch" else 0
    assert param_count(arch) == closed_form_count(32, C, q)
    assert sum(v.size for v in build_model(arch).params.values()) == param_count(arch)


def test_default_counts():
    assert param_count(Architecture("patch")) == 130_881
    assert param_count(Architecture("whole", input_size=64)) == 130_305


def test_same_seed_same_params():
    a, b = build_model(Architecture(seed=3)), build_model(Architecture(seed=3))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build_model(Architecture(seed=4))
    assert not np.array_equal(a.params["conv_in.w"], c.params["conv_in.w"])


def test_whole_model_has_no_positional_inputs():
    patch, whole = Architecture("patch"), Architecture("whole", input_size=64)
    assert build_model(whole).params["conv_in.w"].shape[2] == 1 + 1
    assert build_model(patch).params["conv_in.w"].shape[2] == 1 + 2 + 1
    # the descriptors differ only in kind and input size
    diff = {f.name for f in dataclasses.fields(Architecture) if getattr(patch, f.name) != getattr(whole, f.name)}
    assert diff == {"kind", "input_size"}


def trained_like(arch, scale=0.05, seed=0):
    """Small random output layer so F is not identically zero."""
    m = build_model(arch)
    rng = np.random.default_rng(seed)
    for k in m.params:
        if k.startswith("conv_out"):
            m.params[k] = (scale * rng.standard_normal(m.params[k].shape)).astype(np.float32)
    return m


def test_sigma_min_limit_is_identity():
    m = trained_like(Architecture("patch", base_channels=8))
    x = np.random.default_rng(1).uniform(size=(2, 16, 16, 3)).astype(np.float32)
    d = denoise(m.params, m.arch, x, 1e-4, m.precond).data
    assert np.allclose(d, x[..., :1], atol=1e-3)


def test_outputs_finite_over_sigma_range():
    m = trained_like(Architecture("patch", base_channels=8))
    x = np.random.default_rng(2).uniform(size=(1, 16, 16, 3)).astype(np.float32)
    for s in np.geomspace(1e-4, 100, 13):
        assert np.isfinite(denoise(m.params, m.arch, x, s, m.precond).data).all()


def test_dsm_loss_gradient_matches_finite_differences():
    arch = Architecture("patch", base_channels=4)
    m = trained_like(arch, scale=0.3)
    names = ["conv_in.w", "mid.conv1.w", "merge0.b", "conv_out.w"]
    rng = np.random.default_rng(3)
    clean = rng.uniform(size=(2, 8, 8, 3))
    sig = np.array([0.3, 1.2])
    noise = rng.standard_normal((2, 8, 8, 1))
    base = {k: v.astype(np.float64) for k, v in m.params.items()}

    def loss(*ts):
        p = dict(base, **dict(zip(names, ts)))
        return dsm_loss(p, m, clean.copy(), sig, noise)

    assert fd_check(loss, [base[k] for k in names], h=1e-5, max_coords=15) < 1e-3


def test_score_consistency_and_zero():
    m = trained_like(Architecture("patch", base_channels=8))
    x = np.random.default_rng(4).uniform(size=(1, 16, 16, 3)).astype(np.float32)
    s = 0.7
    d = denoise(m.params, m.arch, x, s, m.precond).data
    sc = score(m.params, m.arch, x, s, m.precond)
    assert np.allclose(s**2 * sc + x[..., :1], d, atol=1e-6)
    zero = build_model(Architecture("patch", base_channels=8))
    # untrained F = 0 and sigma_data chosen so that c_skip = 1 up to rounding
    p = Preconditioner(sigma_data=1e6)
    assert np.allclose(score(zero.params, zero.arch, x, s, p), 0.0, atol=1e-6)
    with pytest.raises(ValueError):
        score(m.params, m.arch, x, 0.0)


def test_score_of_gaussian_oracle(monkeypatch):
    mu, tau = 0.3, 0.2

    def optimal(p, arch, x, sigma, precond=None, rng=None):
        x = np.asarray(x)[..., :1]
        return ad.Tensor((tau**2 * x + sigma**2 * mu) / (tau**2 + sigma**2))

    monkeypatch.setattr(M, "denoise", optimal)
    x = np.random.default_rng(5).standard_normal((1, 4, 4, 1))
    for sigma in (0.05, 0.5, 3.0):
        got = M.score({}, Architecture("whole", input_size=4), x, sigma)
        assert np.allclose(got, (mu - x) / (tau**2 + sigma**2), atol=1e-6, rtol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    m = build_model(Architecture("patch", base_channels=8))
    images = np.random.default_rng(6).uniform(size=(4, 1, 16, 16)).astype(np.float32)
    cfg = TrainConfig(steps=2, batch_sizes={16: 4})
    dsm_step(m, images, cfg, step_rng(0, 0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.arch == m.arch and back.step == m.step
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
        assert np.array_equal(back.ema[k], m.ema[k])
        assert np.array_equal(back.adam.m[k], m.adam.m[k])
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(pt1.CorruptFileError):
        load_checkpoint(path)
    with pytest.raises(ValueError):
        save_checkpoint(m, path)
        load_checkpoint(path, expect=Architecture("patch", base_channels=16))
